//! Testing by betting on top order statistics.
//!
//! The game compares the `K` largest observed values with the `K` largest
//! values of one model sample of the same size. Round `k = 0..K-1` visits the
//! `(K-k)`-th largest pair, moving toward the maximum, and stakes on the
//! sign of `ỹ - y`. Two constant-bet capital processes are tracked,
//!
//! ```text
//! L(0) ← L(0)·(1 - ½·diff)      L(1) ← L(1)·(1 + ½·diff)
//! ```
//!
//! and the wealth follows the exponentially weighted bet
//! `γ₁ = L(1)/(L(0)+L(1))`, so that `W = (L(0)+L(1))/2` and
//! `ln W ≥ max(ln L(0), ln L(1)) - ln 4` at every round. The level rejecting
//! coherence the least (smallest terminal wealth) is selected.
//!
//! Differences are clipped to `±clip`; with `clip < 2` every factor stays
//! positive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potmodel::{fit_pot, PotModel, DEFAULT_N_BASIS};
use crate::reduce::UnivariateTarget;
use crate::seed;

pub const DEFAULT_LEVEL_GRID: [f64; 8] = [0.9, 0.99, 0.995, 0.999, 0.9992, 0.9995, 0.9997, 0.9999];

const TAG_GAME: u64 = 0x4741_4d45;
const TAG_NULL: u64 = 0x4e55_4c4c;
const TAG_REPEAT: u64 = 0x5245_5054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    /// Number of top order statistics compared.
    #[serde(rename = "K")]
    pub k: usize,
    /// Ville level; the test rejects once the wealth reaches `1/alpha`.
    pub alpha: f64,
    pub clip: f64,
    pub level_grid: Vec<f64>,
    /// Largest level eligible for selection.
    pub max_level: f64,
    pub seed: u64,
    pub n_basis: usize,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            k: 3,
            alpha: 0.05,
            clip: 1.0,
            level_grid: DEFAULT_LEVEL_GRID.to_vec(),
            max_level: 0.9997,
            seed: 0,
            n_basis: DEFAULT_N_BASIS,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Validation(format!("K = {} must be at least 2", self.k)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Validation(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.clip > 0.0 && self.clip <= 1.9999) {
            return Err(Error::Validation(format!("clip {} outside (0, 1.9999]", self.clip)));
        }
        if self.level_grid.is_empty() {
            return Err(Error::Validation("empty level grid".into()));
        }
        if self.level_grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Validation(format!(
                "level grid {:?} outside (0, 1)",
                self.level_grid
            )));
        }
        if self.level_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("level grid must be strictly increasing".into()));
        }
        if !(self.max_level > 0.0 && self.max_level < 1.0) {
            return Err(Error::Validation(format!(
                "max_level {} outside (0, 1)",
                self.max_level
            )));
        }
        Ok(())
    }
}

/// One round of the game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Round {
    pub observed: f64,
    pub model: f64,
    pub raw_diff: f64,
    pub diff: f64,
    /// Wealth multiplier `1 + (γ₁ - ½)·diff`.
    pub factor: f64,
    /// Bet used in this round.
    pub gamma1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BettingState {
    k: usize,
    l0: f64,
    l1: f64,
    wealth: f64,
    gamma1: f64,
    clip: f64,
    history: Vec<Round>,
}

impl BettingState {
    pub fn new(clip: f64) -> Self {
        assert!(clip > 0.0 && clip < 2.0, "clip {clip} must lie in (0, 2)");
        Self {
            k: 0,
            l0: 1.0,
            l1: 1.0,
            wealth: 1.0,
            gamma1: 0.5,
            clip,
            history: Vec::new(),
        }
    }

    /// Play one round; returns the updated wealth.
    pub fn update(&mut self, observed: f64, model: f64) -> f64 {
        let raw_diff = model - observed;
        let diff = raw_diff.clamp(-self.clip, self.clip);
        let factor = 1.0 + (self.gamma1 - 0.5) * diff;
        assert!(factor > 0.0, "non-positive wealth factor {factor}");
        self.history.push(Round {
            observed,
            model,
            raw_diff,
            diff,
            factor,
            gamma1: self.gamma1,
        });
        self.wealth *= factor;
        self.l0 *= 1.0 - 0.5 * diff;
        self.l1 *= 1.0 + 0.5 * diff;
        self.gamma1 = self.l1 / (self.l1 + self.l0);
        self.k += 1;
        self.wealth
    }

    pub fn rounds(&self) -> usize {
        self.k
    }

    pub fn wealth(&self) -> f64 {
        self.wealth
    }

    /// `(L(0), L(1))`
    pub fn capital(&self) -> (f64, f64) {
        (self.l0, self.l1)
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn history(&self) -> &[Round] {
        &self.history
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameResult {
    pub terminal_wealth: f64,
    /// `W_k` after each round `k`.
    pub wealth_path: Vec<f64>,
    /// `(L_k(0), L_k(1))` after each round.
    pub capital_path: Vec<(f64, f64)>,
    /// First round with `W_k ≥ 1/alpha`.
    pub rejection_round: Option<usize>,
    /// `(observed, model)` in visiting order: K-th largest first.
    pub pairs: Vec<(f64, f64)>,
    pub rounds: Vec<Round>,
}

/// Play rounds over `(observed, model)` pairs given in visiting order.
pub fn play_pairs(pairs: &[(f64, f64)], clip: f64, alpha: f64) -> GameResult {
    let mut state = BettingState::new(clip);
    let mut wealth_path = Vec::with_capacity(pairs.len());
    let mut capital_path = Vec::with_capacity(pairs.len());
    for &(obs, model) in pairs {
        wealth_path.push(state.update(obs, model));
        capital_path.push(state.capital());
    }
    let rejection_round = wealth_path.iter().position(|&w| w >= 1.0 / alpha);
    GameResult {
        terminal_wealth: state.wealth(),
        wealth_path,
        capital_path,
        rejection_round,
        pairs: pairs.to_vec(),
        rounds: state.history,
    }
}

/// The `k` largest values, largest first.
pub fn top_k_descending(x: &[f64], k: usize) -> Vec<f64> {
    let mut v = x.to_vec();
    let k = k.min(v.len());
    if k == 0 {
        return Vec::new();
    }
    v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    v.truncate(k);
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Play the game between two samples.
pub fn play_samples(y_obs: &[f64], y_model: &[f64], cfg: &GameConfig) -> Result<GameResult> {
    let k = cfg.k;
    if y_obs.len() < k || y_model.len() < k {
        return Err(Error::GameInfeasible(format!(
            "need {k} values on each side, have {} observed and {} simulated",
            y_obs.len(),
            y_model.len()
        )));
    }
    let obs = top_k_descending(y_obs, k);
    let model = top_k_descending(y_model, k);
    let pairs: Vec<(f64, f64)> = (0..k).rev().map(|i| (obs[i], model[i])).collect();
    Ok(play_pairs(&pairs, cfg.clip, cfg.alpha))
}

/// Draw one model sample of size `|y_obs|` with `cfg.seed` and play.
pub fn play_game(y_obs: &[f64], model: &PotModel, cfg: &GameConfig) -> Result<GameResult> {
    cfg.validate()?;
    if y_obs.len() < cfg.k {
        return Err(Error::GameInfeasible(format!(
            "{} observed exceedances for K = {}",
            y_obs.len(),
            cfg.k
        )));
    }
    let simulated = model.sample_with(&mut seed::rng(cfg.seed), y_obs.len())?;
    play_samples(y_obs, &simulated, cfg)
}

/// True iff the wealth path reaches `1/alpha`.
pub fn ville_rejects(result: &GameResult, alpha: f64) -> bool {
    result.wealth_path.iter().any(|&w| w >= 1.0 / alpha)
}

/// Seed of the single game played at level `p`.
pub fn level_seed(seed: u64, p: f64) -> u64 {
    seed::derive(seed, &[TAG_GAME, seed::level_tag(p)])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelScore {
    pub p: f64,
    pub terminal_wealth: f64,
    pub rejected: bool,
    pub rejection_round: Option<usize>,
    pub seed: u64,
    pub n_exceedances: usize,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSelection {
    pub p_star: f64,
    pub k: usize,
    /// Scores of the feasible levels, in grid order.
    pub scores: Vec<LevelScore>,
    /// `(p, reason)` for levels that could not be fitted or played.
    pub failures: Vec<(f64, String)>,
}

impl LevelSelection {
    pub fn score(&self, p: f64) -> Option<&LevelScore> {
        self.scores.iter().find(|s| s.p == p)
    }
}

fn score_level(target: &UnivariateTarget, cfg: &GameConfig, p: f64) -> Result<LevelScore> {
    let fit = fit_pot(target, p, cfg.n_basis)?;
    let observed = fit.observed_sample(target);
    let game_cfg = GameConfig {
        seed: level_seed(cfg.seed, p),
        ..cfg.clone()
    };
    let result = play_game(&observed, &fit.model, &game_cfg)?;
    Ok(LevelScore {
        p,
        terminal_wealth: result.terminal_wealth,
        rejected: ville_rejects(&result, cfg.alpha),
        rejection_round: result.rejection_round,
        seed: game_cfg.seed,
        n_exceedances: observed.len(),
        q: fit.model.q,
    })
}

/// Score every grid level and pick the one with the smallest terminal
/// wealth among levels `≤ max_level` (ties go to the larger level). A
/// single-level grid returns that level.
pub fn select_level(target: &UnivariateTarget, cfg: &GameConfig) -> Result<LevelSelection> {
    cfg.validate()?;
    let outcomes: Vec<(f64, Result<LevelScore>)> = cfg
        .level_grid
        .par_iter()
        .map(|&p| (p, score_level(target, cfg, p)))
        .collect();

    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for (p, outcome) in outcomes {
        match outcome {
            Ok(s) => scores.push(s),
            Err(e) => failures.push((p, e.to_string())),
        }
    }
    let single = cfg.level_grid.len() == 1;
    let best =
        scores
            .iter()
            .filter(|s| single || s.p <= cfg.max_level)
            .fold(None::<&LevelScore>, |best, s| match best {
                Some(b) if b.terminal_wealth < s.terminal_wealth => Some(b),
                _ => Some(s),
            });
    match best {
        Some(b) => Ok(LevelSelection {
            p_star: b.p,
            k: cfg.k,
            scores,
            failures,
        }),
        None => {
            let mut reasons: Vec<String> = failures.iter().map(|(p, e)| format!("p = {p}: {e}")).collect();
            if reasons.is_empty() {
                reasons.push(format!("no level at or below max_level {}", cfg.max_level));
            }
            Err(Error::NoFeasibleLevel(reasons))
        }
    }
}

/// Terminal wealth at level `p` over `repeats` independent model draws,
/// showing how much the single-simulation score depends on the seed.
pub fn repeated_scores(target: &UnivariateTarget, cfg: &GameConfig, p: f64, repeats: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let fit = fit_pot(target, p, cfg.n_basis)?;
    let observed = fit.observed_sample(target);
    (0..repeats)
        .map(|r| {
            let game_cfg = GameConfig {
                seed: seed::derive(cfg.seed, &[TAG_REPEAT, seed::level_tag(p), r as u64]),
                ..cfg.clone()
            };
            play_game(&observed, &fit.model, &game_cfg).map(|g| g.terminal_wealth)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub trials: usize,
    pub sample_size: usize,
    pub rejections: usize,
    pub rejection_fraction: f64,
    pub mean_terminal_wealth: f64,
    pub sd_terminal_wealth: f64,
    /// Standard error of the mean terminal wealth.
    pub std_error: f64,
}

pub const MIN_CALIBRATION_TRIALS: usize = 100;

/// Games where both sides are drawn from `model`, each of the model's
/// exceedance count.
pub fn null_calibration(model: &PotModel, cfg: &GameConfig, trials: usize) -> Result<CalibrationReport> {
    cfg.validate()?;
    if trials < MIN_CALIBRATION_TRIALS {
        return Err(Error::Validation(format!(
            "{trials} calibration trials, need at least {MIN_CALIBRATION_TRIALS}"
        )));
    }
    let n = model.day_pool.len();
    if n < cfg.k {
        return Err(Error::GameInfeasible(format!(
            "model sample size {n} below K = {}",
            cfg.k
        )));
    }
    let wealth: Vec<(f64, bool)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(cfg.seed, &[TAG_NULL, i as u64]));
            let a = model.sample_with(&mut rng, n)?;
            let b = model.sample_with(&mut rng, n)?;
            let g = play_samples(&a, &b, cfg)?;
            Ok((g.terminal_wealth, ville_rejects(&g, cfg.alpha)))
        })
        .collect::<Result<_>>()?;
    let t = trials as f64;
    let mean = wealth.iter().map(|w| w.0).sum::<f64>() / t;
    let var = wealth.iter().map(|w| (w.0 - mean).powi(2)).sum::<f64>() / (t - 1.0);
    let rejections = wealth.iter().filter(|w| w.1).count();
    Ok(CalibrationReport {
        trials,
        sample_size: n,
        rejections,
        rejection_fraction: rejections as f64 / t,
        mean_terminal_wealth: mean,
        sd_terminal_wealth: var.sqrt(),
        std_error: (var / t).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potmodel::{CyclicScale, ModelKind};
    use crate::reduce::TargetId;
    use proptest::prelude::*;

    fn unit_model(pool: usize) -> PotModel {
        PotModel::new(
            TargetId::T1,
            0.99,
            0.0,
            CyclicScale::constant(1.0, 10).unwrap(),
            (0..pool).map(|i| (i % 365) as u16 + 1).collect(),
            ModelKind::Direct,
        )
        .unwrap()
    }

    #[test]
    fn identical_samples_leave_wealth_at_one() {
        let x = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let g = play_samples(&x, &x, &GameConfig::default()).unwrap();
        assert_eq!(g.terminal_wealth, 1.0);
        assert!(g.rounds.iter().all(|r| r.diff == 0.0 && r.gamma1 == 0.5));
        assert_eq!(g.rejection_round, None);
    }

    #[test]
    fn rounds_visit_kth_largest_first() {
        let obs = [10.0, 9.0, 8.0, 1.0];
        let model = [10.5, 9.25, 8.125, 0.0];
        let g = play_samples(&obs, &model, &GameConfig::default()).unwrap();
        assert_eq!(g.pairs, vec![(8.0, 8.125), (9.0, 9.25), (10.0, 10.5)]);
    }

    #[test]
    fn one_round_hand_evaluation() {
        let mut s = BettingState::new(1.0);
        let w = s.update(0.0, 0.4);
        assert_eq!(w, 1.0);
        let (l0, l1) = s.capital();
        assert!((l1 - 1.2).abs() < 1e-15);
        assert!((l0 - 0.8).abs() < 1e-15);
        assert!((s.gamma1() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn constant_positive_diff() {
        let pairs = vec![(0.0, 0.5); 6];
        let g = play_pairs(&pairs, 1.0, 0.05);
        for (k, (&w, &(_, l1))) in g.wealth_path.iter().zip(&g.capital_path).enumerate() {
            let expect = 1.25f64.powi(k as i32 + 1);
            assert!((l1 - expect).abs() < 1e-12);
            assert!(w >= expect / 4.0);
        }
    }

    #[test]
    fn clipping_bounds_the_difference() {
        let g = play_pairs(&[(0.0, 5.0), (3.0, -4.0)], 1.0, 0.05);
        assert_eq!(g.rounds[0].diff, 1.0);
        assert_eq!(g.rounds[0].raw_diff, 5.0);
        assert_eq!(g.rounds[1].diff, -1.0);
    }

    #[test]
    fn ville_threshold() {
        let flat = play_pairs(&[(1.0, 1.0); 5], 1.0, 0.05);
        assert!(!ville_rejects(&flat, 0.05));
        let mut g = flat.clone();
        g.wealth_path = vec![3.0, 20.0, 15.0];
        assert!(ville_rejects(&g, 0.05));
        assert_eq!(g.wealth_path.iter().position(|&w| w >= 20.0), Some(1));
    }

    #[test]
    fn power_bound_deterministic_diffs() {
        // ln 2 / ln 1.25 = 3.106..., so the constant bet crosses 2 at round index 3
        let bound = 2f64.ln() / 1.25f64.ln();
        assert!((bound - 3.106).abs() < 1e-3);
        let g = play_pairs(&[(0.0, 0.5); 12], 1.0, 0.5);
        let first = g.capital_path.iter().position(|c| c.1 >= 2.0).unwrap();
        assert_eq!(first + 1, bound.ceil() as usize);
    }

    #[test]
    fn infeasible_game() {
        let model = unit_model(50);
        let cfg = GameConfig::default();
        assert!(matches!(
            play_game(&[1.0, 2.0], &model, &cfg),
            Err(Error::GameInfeasible(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(GameConfig::default().validate().is_ok());
        for bad in [
            GameConfig {
                k: 1,
                ..Default::default()
            },
            GameConfig {
                clip: 2.0,
                ..Default::default()
            },
            GameConfig {
                alpha: 1.0,
                ..Default::default()
            },
            GameConfig {
                level_grid: vec![],
                ..Default::default()
            },
            GameConfig {
                level_grid: vec![0.99, 0.9],
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn calibration_needs_trials() {
        let model = unit_model(100);
        assert!(null_calibration(&model, &GameConfig::default(), 0).is_err());
        let rep = null_calibration(&model, &GameConfig::default(), 100).unwrap();
        assert_eq!(rep.trials, 100);
        assert!(rep.mean_terminal_wealth > 0.0);
    }

    proptest! {
        #[test]
        fn regret_and_positivity(
            diffs in prop::collection::vec(-3.0f64..3.0, 1..60),
            clip in 0.01f64..1.9999,
        ) {
            let pairs: Vec<(f64, f64)> = diffs.iter().map(|&d| (0.0, d)).collect();
            let g = play_pairs(&pairs, clip, 0.05);
            for (k, (&w, &(l0, l1))) in g.wealth_path.iter().zip(&g.capital_path).enumerate() {
                prop_assert!(w > 0.0 && l0 > 0.0 && l1 > 0.0);
                prop_assert!(w.ln() >= l0.ln().max(l1.ln()) - 4f64.ln() - 1e-12, "k={}", k);
            }
            for (k, r) in g.rounds.iter().enumerate() {
                if k == 0 {
                    prop_assert_eq!(r.gamma1, 0.5);
                } else {
                    let (l0, l1) = g.capital_path[k - 1];
                    prop_assert!((r.gamma1 - l1 / (l1 + l0)).abs() < 1e-12);
                }
            }
        }
    }
}
