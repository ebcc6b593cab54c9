//! Frequency estimates for the unseen runs.
//!
//! Each replication draws `⌈(1-p)·(total-given)·years·365⌉` exceedances from
//! the fitted model, counts those reaching the event threshold and adds the
//! events observed in the given runs. The point estimate is the (lower)
//! median count divided by the number of runs, so it always sits on the
//! `1/total_runs` grid. The interval is the shortest integer interval holding
//! at least `confidence` of a Poisson law with the mean replication count.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::DAYS_PER_YEAR;
use crate::potmodel::{ModelKind, PotModel};
use crate::reduce::{TargetId, TargetSpec};
use crate::seed;

const TAG_REPLICATION: u64 = 0x5245_504c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    #[serde(rename = "N")]
    pub n_replications: usize,
    pub total_runs: u32,
    pub given_runs: u32,
    pub years: u32,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            n_replications: 1000,
            total_runs: 50,
            given_runs: 4,
            years: 165,
            confidence: 0.92,
            seed: 0,
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_replications < 100 {
            return Err(Error::Validation(format!("N = {} below 100", self.n_replications)));
        }
        if !(self.confidence > 0.5 && self.confidence < 1.0) {
            return Err(Error::Validation(format!(
                "confidence {} outside (0.5, 1)",
                self.confidence
            )));
        }
        if self.given_runs >= self.total_runs || self.years == 0 {
            return Err(Error::Validation(format!(
                "need given_runs < total_runs and years > 0, got {}/{} runs, {} years",
                self.given_runs, self.total_runs, self.years
            )));
        }
        Ok(())
    }

    /// Model draws per replication at level `p`.
    pub fn draws_per_replication(&self, p: f64) -> usize {
        let unseen_days = f64::from(self.total_runs - self.given_runs) * f64::from(self.years) * DAYS_PER_YEAR as f64;
        ((1.0 - p) * unseen_days).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyEstimate {
    pub target_id: TargetId,
    /// Median frequency per run.
    pub point: f64,
    /// Event count per replication, observed add-on included.
    pub counts: Vec<usize>,
    /// Mean replication count.
    pub lambda: f64,
    pub lo_count: usize,
    pub hi_count: usize,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub achieved_coverage: f64,
    pub draws_per_replication: usize,
    pub n_replications: usize,
    pub total_runs: u32,
    pub seed: u64,
}

impl FrequencyEstimate {
    /// Median count (lower median for even N).
    pub fn median_count(&self) -> usize {
        lower_median(&self.counts)
    }

    /// Rows `(count, poisson_prob, empirical_freq)` for a count histogram.
    pub fn histogram(&self) -> Vec<(usize, f64, f64)> {
        let top = self.counts.iter().copied().max().unwrap_or(0).max(self.hi_count);
        let pmf = poisson_pmf(self.lambda, top);
        let n = self.counts.len() as f64;
        let mut freq = vec![0usize; top + 1];
        for &c in &self.counts {
            freq[c] += 1;
        }
        (0..=top).map(|c| (c, pmf[c], freq[c] as f64 / n)).collect()
    }

    pub fn write_histogram_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "count,poisson_prob,empirical_freq")?;
        for (c, p, f) in self.histogram() {
            writeln!(w, "{c},{p},{f}")?;
        }
        Ok(())
    }
}

fn lower_median(counts: &[usize]) -> usize {
    let mut v = counts.to_vec();
    let mid = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable(mid);
    *m
}

/// Check that a model was fitted for `spec`'s target (and, if given, at `p`).
pub fn check_model(model: &PotModel, spec: &TargetSpec, p: Option<f64>) -> Result<()> {
    if model.target_id != spec.target_id {
        return Err(Error::Inconsistent(format!(
            "model fitted for {} used for {}",
            model.target_id, spec.target_id
        )));
    }
    let angular = model.kind == ModelKind::Angular;
    if angular != spec.consecutive {
        return Err(Error::Inconsistent(format!(
            "{:?} model for a {} event",
            model.kind,
            if spec.consecutive {
                "consecutive-day"
            } else {
                "single-day"
            }
        )));
    }
    if let Some(p) = p {
        if model.p != p {
            return Err(Error::Inconsistent(format!(
                "model fitted at p = {}, requested p = {p}",
                model.p
            )));
        }
    }
    Ok(())
}

pub fn estimate_frequency(
    model: &PotModel,
    spec: &TargetSpec,
    observed_count: usize,
    cfg: &EstimateConfig,
) -> Result<FrequencyEstimate> {
    cfg.validate()?;
    check_model(model, spec, None)?;
    let m = cfg.draws_per_replication(model.p);
    let threshold = spec.event_threshold;
    let counts: Vec<usize> = (0..cfg.n_replications)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(cfg.seed, &[TAG_REPLICATION, i as u64]));
            model.count_at_least(&mut rng, m, threshold).map(|c| c + observed_count)
        })
        .collect::<Result<_>>()?;
    let lambda = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let interval = poisson_interval(lambda, cfg.confidence)?;
    let median = lower_median(&counts);
    let (ci_lo, ci_hi) = interval_to_frequency(interval.lo, interval.hi, cfg.total_runs)?;
    Ok(FrequencyEstimate {
        target_id: spec.target_id,
        point: median as f64 / f64::from(cfg.total_runs),
        counts,
        lambda,
        lo_count: interval.lo,
        hi_count: interval.hi,
        ci_lo,
        ci_hi,
        achieved_coverage: interval.achieved,
        draws_per_replication: m,
        n_replications: cfg.n_replications,
        total_runs: cfg.total_runs,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoissonInterval {
    pub lo: usize,
    pub hi: usize,
    /// Poisson mass of `[lo, hi]`.
    pub achieved: f64,
}

/// Largest count considered for mean `lambda`.
pub fn poisson_search_bound(lambda: f64) -> usize {
    (lambda + 10.0 * (lambda + 1.0).sqrt() + 10.0).floor() as usize
}

/// `P(X = j)` for `j = 0..=top`, computed in log space.
pub fn poisson_pmf(lambda: f64, top: usize) -> Vec<f64> {
    if lambda == 0.0 {
        let mut v = vec![0.0; top + 1];
        v[0] = 1.0;
        return v;
    }
    let ln_lambda = lambda.ln();
    let mut log_p = -lambda;
    let mut out = Vec::with_capacity(top + 1);
    out.push(log_p.exp());
    for j in 1..=top {
        log_p += ln_lambda - (j as f64).ln();
        out.push(log_p.exp());
    }
    out
}

/// Shortest integer interval `[a, b]` with Poisson(`lambda`) mass at least
/// `confidence`; ties go to the larger mass, then the smaller `a`.
pub fn poisson_interval(lambda: f64, confidence: f64) -> Result<PoissonInterval> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Validation(format!(
            "Poisson mean {lambda} must be finite and >= 0"
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Validation(format!("confidence {confidence} outside (0, 1)")));
    }
    let top = poisson_search_bound(lambda);
    let pmf = poisson_pmf(lambda, top);
    let mut prefix = Vec::with_capacity(pmf.len() + 1);
    prefix.push(0.0);
    for &p in &pmf {
        prefix.push(prefix.last().unwrap() + p);
    }
    let mass = |a: usize, b: usize| prefix[b + 1] - prefix[a];

    // the smallest feasible b is non-decreasing in a
    let mut best_len = usize::MAX;
    let mut b = 0;
    for a in 0..=top {
        b = b.max(a);
        while b <= top && mass(a, b) < confidence {
            b += 1;
        }
        if b > top {
            break;
        }
        best_len = best_len.min(b - a);
    }
    if best_len == usize::MAX {
        return Err(Error::Validation(format!(
            "no interval within 0..={top} reaches confidence {confidence} for mean {lambda}"
        )));
    }
    let (lo, achieved) = (0..=top - best_len)
        .map(|a| (a, mass(a, a + best_len)))
        .filter(|&(_, m)| m >= confidence)
        .fold((usize::MAX, f64::NEG_INFINITY), |best, cand| {
            if cand.1 > best.1 {
                cand
            } else {
                best
            }
        });
    Ok(PoissonInterval {
        lo,
        hi: lo + best_len,
        achieved,
    })
}

/// Count interval to per-run frequencies.
pub fn interval_to_frequency(lo_count: usize, hi_count: usize, total_runs: u32) -> Result<(f64, f64)> {
    if lo_count > hi_count {
        return Err(Error::Validation(format!(
            "interval [{lo_count}, {hi_count}] is reversed"
        )));
    }
    let n = f64::from(total_runs);
    Ok((lo_count as f64 / n, hi_count as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potmodel::CyclicScale;
    use proptest::prelude::*;

    /// Exhaustive search over all `0 ≤ a ≤ b ≤ top` with direct pmf sums.
    fn brute_interval(lambda: f64, conf: f64) -> (usize, usize, f64) {
        let top = poisson_search_bound(lambda);
        let pmf: Vec<f64> = (0..=top)
            .map(|j| {
                let mut p = (-lambda).exp();
                for i in 1..=j {
                    p *= lambda / i as f64;
                }
                p
            })
            .collect();
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..=top {
            for b in a..=top {
                let m: f64 = pmf[a..=b].iter().sum();
                if m < conf {
                    continue;
                }
                best = match best {
                    None => Some((a, b, m)),
                    Some((ba, bb, bm)) => {
                        let better = (b - a) < (bb - ba) || ((b - a) == (bb - ba) && m > bm + 1e-15);
                        if better {
                            Some((a, b, m))
                        } else {
                            Some((ba, bb, bm))
                        }
                    }
                };
            }
        }
        best.unwrap()
    }

    #[test]
    fn zero_mean_is_point_mass() {
        let i = poisson_interval(0.0, 0.92).unwrap();
        assert_eq!((i.lo, i.hi, i.achieved), (0, 0, 1.0));
    }

    #[test]
    fn unit_mean_at_092() {
        let i = poisson_interval(1.0, 0.92).unwrap();
        assert_eq!((i.lo, i.hi), (0, 3));
        let e = (-1.0f64).exp();
        assert!((e * (1.0 + 1.0 + 0.5) - 0.9197).abs() < 1e-4);
        assert!((i.achieved - e * (1.0 + 1.0 + 0.5 + 1.0 / 6.0)).abs() < 1e-12);
        assert!((i.achieved - 0.9810).abs() < 1e-4);
    }

    #[test]
    fn twelve_matches_enumeration() {
        let i = poisson_interval(12.0, 0.92).unwrap();
        let (a, b, m) = brute_interval(12.0, 0.92);
        assert_eq!((i.lo, i.hi), (a, b));
        assert!((i.achieved - m).abs() < 1e-12);
        // frozen from the enumeration oracle
        assert_eq!((a, b), (6, 18));
    }

    #[test]
    fn rejects_negative_mean() {
        assert!(poisson_interval(-0.1, 0.9).is_err());
        assert!(poisson_interval(f64::NAN, 0.9).is_err());
    }

    #[test]
    fn frequency_conversion() {
        assert_eq!(interval_to_frequency(0, 3, 50).unwrap(), (0.0, 0.06));
        assert_eq!(interval_to_frequency(12, 12, 50).unwrap(), (0.24, 0.24));
        assert_eq!(interval_to_frequency(5, 19, 50).unwrap(), (0.1, 0.38));
        assert!(interval_to_frequency(3, 2, 50).is_err());
    }

    fn model(q: f64, kind: ModelKind, id: TargetId) -> PotModel {
        PotModel::new(
            id,
            0.999,
            q,
            CyclicScale::constant(0.1, 10).unwrap(),
            vec![1, 2, 3],
            kind,
        )
        .unwrap()
    }

    fn small_cfg() -> EstimateConfig {
        EstimateConfig {
            n_replications: 101,
            ..Default::default()
        }
    }

    #[test]
    fn unreachable_threshold_keeps_observed_count() {
        let m = model(0.0, ModelKind::Direct, TargetId::T2);
        let spec = TargetSpec::canonical(TargetId::T2);
        let est = estimate_frequency(&m, &spec, 1, &small_cfg()).unwrap();
        assert!(est.counts.iter().all(|&c| c == 1));
        assert_eq!(est.point, 0.02);
        assert_eq!(est.lambda, 1.0);
    }

    #[test]
    fn certain_event_counts_every_draw() {
        let m = model(0.0, ModelKind::Direct, TargetId::T1);
        let spec = TargetSpec::custom(TargetId::T1, 25, -1.0).unwrap();
        let cfg = small_cfg();
        let est = estimate_frequency(&m, &spec, 0, &cfg).unwrap();
        let draws = cfg.draws_per_replication(0.999);
        assert_eq!(draws, 2771);
        assert!(est.counts.iter().all(|&c| c == draws));
        assert_eq!(est.point, draws as f64 / 50.0);
    }

    #[test]
    fn inconsistent_model_rejected() {
        let m = model(0.0, ModelKind::Direct, TargetId::T1);
        let spec = TargetSpec::canonical(TargetId::T2);
        assert!(matches!(
            estimate_frequency(&m, &spec, 0, &small_cfg()),
            Err(Error::Inconsistent(_))
        ));
        assert!(check_model(&m, &TargetSpec::canonical(TargetId::T1), Some(0.99)).is_err());
        assert!(check_model(&m, &TargetSpec::canonical(TargetId::T1), Some(0.999)).is_ok());
    }

    #[test]
    fn estimate_is_deterministic_and_on_grid() {
        let m = PotModel::new(
            TargetId::T3,
            0.999,
            6.0,
            CyclicScale::constant(1.5, 10).unwrap(),
            (1..=365).collect(),
            ModelKind::Angular,
        )
        .unwrap();
        let spec = TargetSpec::canonical(TargetId::T3);
        let a = estimate_frequency(&m, &spec, 1, &small_cfg()).unwrap();
        let b = estimate_frequency(&m, &spec, 1, &small_cfg()).unwrap();
        assert_eq!(a, b);
        for v in [a.point, a.ci_lo, a.ci_hi] {
            assert!((v * 50.0 - (v * 50.0).round()).abs() < 1e-9, "{v}");
        }
        assert!(a.ci_lo <= a.ci_hi);
        assert!(a.achieved_coverage >= 0.92);
        let hist = a.histogram();
        assert!((hist.iter().map(|h| h.2).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(EstimateConfig::default().validate().is_ok());
        assert!(EstimateConfig {
            n_replications: 99,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EstimateConfig {
            confidence: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn interval_is_minimal(lambda in 0.0f64..40.0, conf in 0.55f64..0.99) {
            let i = poisson_interval(lambda, conf).unwrap();
            let (a, b, m) = brute_interval(lambda, conf);
            prop_assert_eq!(i.hi - i.lo, b - a);
            prop_assert!(i.achieved >= conf);
            prop_assert!((i.achieved - m).abs() < 1e-9);
        }

        #[test]
        fn higher_confidence_never_shortens(lambda in 0.0f64..60.0, c1 in 0.55f64..0.99, c2 in 0.55f64..0.99) {
            let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            let a = poisson_interval(lambda, lo).unwrap();
            let b = poisson_interval(lambda, hi).unwrap();
            prop_assert!(b.hi - b.lo >= a.hi - a.lo);
        }
    }
}
