//! Seasonal peaks-over-threshold model with an exponential tail.
//!
//! Exceedances of a target above its empirical `p`-quantile `q` are modelled
//! as `Ỹ = q + f(D)·E`, with `D` drawn from the empirical multiset of
//! exceedance days, `f` a positive cyclic spline in the day of year and `E`
//! standard exponential. For T3 the model is fitted on the auxiliary norm and
//! the target is recovered as `Ỹ·min(sin Θ, cos Θ)` with `Θ ~ U[0, π/2]`.

pub mod spline;

use std::f64::consts::FRAC_PI_2;

use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::{TargetId, UnivariateTarget};
use crate::seed;

pub use spline::{CyclicBasis, CyclicScale, DEFAULT_N_BASIS, PERIOD};

/// `⌈n·p⌉`-th smallest value of `y`.
pub fn empirical_quantile(y: &[f64], p: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InsufficientData("empirical quantile of an empty sample".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Validation(format!("level {p} outside (0, 1)")));
    }
    let k = quantile_rank(y.len(), p);
    let mut v = y.to_vec();
    let (_, x, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*x)
}

/// 1-based rank `⌈n·p⌉`, with a relative guard so `100 × 0.99` gives 99 and
/// not 100 when the product picks up a rounding ulp.
fn quantile_rank(n: usize, p: f64) -> usize {
    let np = n as f64 * p;
    let k = (np - np * 4.0 * f64::EPSILON).ceil() as usize;
    k.clamp(1, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    /// Position in the target series.
    pub pos: usize,
    /// Global day index.
    pub t: usize,
    pub d: u16,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceSet {
    pub p: f64,
    pub q: f64,
    pub records: Vec<Exceedance>,
}

impl ExceedanceSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mean_excess(&self) -> f64 {
        self.records.iter().map(|r| r.excess).sum::<f64>() / self.len() as f64
    }
}

/// Strict exceedances of the fitted series above its empirical `p`-quantile.
/// With `use_aux` the auxiliary norm is used and `q` must stay below the
/// target's auxiliary bound.
pub fn extract_exceedances(target: &UnivariateTarget, p: f64, use_aux: bool) -> Result<ExceedanceSet> {
    let series = if use_aux {
        target
            .aux_norm
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("{} has no auxiliary series", target.target_id())))?
    } else {
        &target.y
    };
    let q = empirical_quantile(series, p)?;
    if use_aux {
        let bound = target.spec.aux_bound();
        if q >= bound {
            return Err(Error::LevelTooHigh { q, bound });
        }
    }
    let records = series
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > q)
        .map(|(pos, &v)| Exceedance {
            pos,
            t: target.t[pos],
            d: target.d[pos],
            excess: v - q,
        })
        .collect();
    Ok(ExceedanceSet { p, q, records })
}

/// Least-squares seasonal scale of the excesses, floored at
/// `1e-6·mean(excess)` and rescaled so the adjusted excesses average 1.
pub fn fit_seasonal_scale(exc: &ExceedanceSet, n_basis: usize) -> Result<CyclicScale> {
    if exc.len() < 2 * n_basis {
        return Err(Error::InsufficientData(format!(
            "{} exceedances at p = {}, need at least {}",
            exc.len(),
            exc.p,
            2 * n_basis
        )));
    }
    let basis = CyclicBasis::even(n_basis)?;
    let days: Vec<f64> = exc.records.iter().map(|r| f64::from(r.d)).collect();
    let values: Vec<f64> = exc.records.iter().map(|r| r.excess).collect();
    let scale = CyclicScale::fit(basis, &days, &values, 1e-6 * exc.mean_excess())?;
    let mean_adjusted = exc.records.iter().map(|r| r.excess / scale.at_day(r.d)).sum::<f64>() / exc.len() as f64;
    Ok(scale.scaled(mean_adjusted))
}

/// `E_t = excess_t / f(d_t)`.
pub fn adjust(exc: &ExceedanceSet, scale: &CyclicScale) -> Vec<f64> {
    exc.records.iter().map(|r| r.excess / scale.at_day(r.d)).collect()
}

/// Exponential Q-Q data for adjusted exceedances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqReport {
    /// `(theoretical, observed)` with theoretical `-ln(1-(k-½)/n)·mean`.
    pub points: Vec<(f64, f64)>,
    pub max_deviation: f64,
    /// Maximum deviation over `k ≤ 0.99·n`.
    pub bulk_deviation: f64,
}

pub const QQ_MIN_POINTS: usize = 20;

pub fn qq_exponential(adjusted: &[f64]) -> Result<QqReport> {
    let n = adjusted.len();
    if n < QQ_MIN_POINTS {
        return Err(Error::InsufficientData(format!(
            "{n} values for a Q-Q plot, need {QQ_MIN_POINTS}"
        )));
    }
    let mut sorted = adjusted.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let nf = n as f64;
    let bulk_end = (0.99 * nf).floor() as usize;
    let mut max_deviation: f64 = 0.0;
    let mut bulk_deviation: f64 = 0.0;
    let points = sorted
        .iter()
        .enumerate()
        .map(|(i, &obs)| {
            let k = i as f64 + 1.0;
            let theo = -(1.0 - (k - 0.5) / nf).ln() * mean;
            let dev = (obs - theo).abs();
            max_deviation = max_deviation.max(dev);
            if i < bulk_end {
                bulk_deviation = bulk_deviation.max(dev);
            }
            (theo, obs)
        })
        .collect();
    Ok(QqReport {
        points,
        max_deviation,
        bulk_deviation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Direct,
    Angular,
}

/// Fitted generative exceedance model. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct PotModel {
    pub target_id: TargetId,
    pub p: f64,
    pub q: f64,
    pub scale: CyclicScale,
    /// Days of the exceedances, with multiplicity.
    pub day_pool: Vec<u16>,
    pub kind: ModelKind,
}

/// Shape parameter of the tail; fixed (exponential tail).
pub const SHAPE: f64 = 0.0;

/// `min(sin Θ, cos Θ)` for `Θ ~ U[0, π/2]`: the share of the pair norm
/// carried by the smaller of the two days.
#[inline]
pub fn angular_factor<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    let theta = rng.random::<f64>() * FRAC_PI_2;
    theta.sin().min(theta.cos())
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    target_id: TargetId,
    p: f64,
    q: f64,
    n_basis: usize,
    knots: Vec<f64>,
    coefficients: Vec<f64>,
    floor: f64,
    day_pool: Vec<u16>,
    kind: ModelKind,
}

impl TryFrom<ModelRepr> for PotModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        if r.n_basis != r.knots.len() {
            return Err(Error::Validation(format!(
                "n_basis {} but {} knots",
                r.n_basis,
                r.knots.len()
            )));
        }
        let scale = CyclicScale::from_parts(r.knots, r.coefficients, r.floor)?;
        PotModel::new(r.target_id, r.p, r.q, scale, r.day_pool, r.kind)
    }
}

impl From<PotModel> for ModelRepr {
    fn from(m: PotModel) -> Self {
        ModelRepr {
            target_id: m.target_id,
            p: m.p,
            q: m.q,
            n_basis: m.scale.n_basis(),
            knots: m.scale.knots().to_vec(),
            coefficients: m.scale.coefficients().to_vec(),
            floor: m.scale.floor(),
            day_pool: m.day_pool,
            kind: m.kind,
        }
    }
}

impl PotModel {
    pub fn new(
        target_id: TargetId,
        p: f64,
        q: f64,
        scale: CyclicScale,
        day_pool: Vec<u16>,
        kind: ModelKind,
    ) -> Result<Self> {
        if (kind == ModelKind::Angular) != (target_id == TargetId::T3) {
            return Err(Error::Validation(format!("{kind:?} model for {target_id}")));
        }
        if !(p > 0.0 && p < 1.0) || !q.is_finite() {
            return Err(Error::Validation(format!("invalid level p = {p}, q = {q}")));
        }
        if let Some(d) = day_pool.iter().find(|&&d| !(1..=365).contains(&d)) {
            return Err(Error::Validation(format!("day {d} in day pool")));
        }
        Ok(Self {
            target_id,
            p,
            q,
            scale,
            day_pool,
            kind,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn check_sampleable(&self) -> Result<()> {
        if self.day_pool.is_empty() {
            return Err(Error::InsufficientData("empty day pool".into()));
        }
        Ok(())
    }

    /// One draw; the caller guarantees a non-empty pool.
    #[inline]
    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let d = self.day_pool[rng.random_range(0..self.day_pool.len())];
        let e: f64 = rng.sample(Exp1);
        let base = self.q + self.scale.at_day(d) * e;
        match self.kind {
            ModelKind::Direct => base,
            ModelKind::Angular => base * angular_factor(rng),
        }
    }

    pub fn sample_with<R: rand::Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<f64>> {
        self.check_sampleable()?;
        Ok((0..n).map(|_| self.draw(rng)).collect())
    }

    /// Number of draws out of `n` with `Ỹ ≥ threshold`.
    pub fn count_at_least<R: rand::Rng + ?Sized>(&self, rng: &mut R, n: usize, threshold: f64) -> Result<usize> {
        self.check_sampleable()?;
        Ok((0..n).filter(|_| self.draw(rng) >= threshold).count())
    }
}

/// `n` seed-deterministic draws from the model.
pub fn sample_model(model: &PotModel, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Validation("sample size must be at least 1".into()));
    }
    model.sample_with(&mut seed::rng(seed), n)
}

/// Everything produced by fitting one target at one level.
#[derive(Debug, Clone)]
pub struct PotFit {
    pub model: PotModel,
    pub exceedances: ExceedanceSet,
    pub adjusted: Vec<f64>,
}

impl PotFit {
    /// Observed values of the target at the exceedance times: the sample the
    /// model is compared with in the betting game.
    pub fn observed_sample(&self, target: &UnivariateTarget) -> Vec<f64> {
        self.exceedances.records.iter().map(|r| target.y[r.pos]).collect()
    }
}

/// Fit the full model for `target` at level `p`.
pub fn fit_pot(target: &UnivariateTarget, p: f64, n_basis: usize) -> Result<PotFit> {
    let angular = target.target_id() == TargetId::T3 && target.aux_norm.is_some();
    let exceedances = extract_exceedances(target, p, angular)?;
    let scale = fit_seasonal_scale(&exceedances, n_basis)?;
    let adjusted = adjust(&exceedances, &scale);
    let model = PotModel::new(
        target.target_id(),
        p,
        exceedances.q,
        scale,
        exceedances.records.iter().map(|r| r.d).collect(),
        if angular { ModelKind::Angular } else { ModelKind::Direct },
    )?;
    Ok(PotFit {
        model,
        exceedances,
        adjusted,
    })
}
