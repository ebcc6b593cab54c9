//! Reduction of the 25-location panel to univariate target series.
//!
//! Each target is an order statistic across locations: the minimum (T1),
//! the 6th largest (T2), and for T3 the minimum over two consecutive days of
//! the 3rd largest. T3 also carries the auxiliary norm
//! `ȳ = sqrt(y31² + y32²)` used to fit its exceedance model.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, N_LOCATIONS};
use crate::potmodel::empirical_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetId {
    T1,
    T2,
    T3,
}

impl TargetId {
    pub const ALL: [TargetId; 3] = [TargetId::T1, TargetId::T2, TargetId::T3];

    pub fn index(self) -> u64 {
        match self {
            TargetId::T1 => 1,
            TargetId::T2 => 2,
            TargetId::T3 => 3,
        }
    }
}

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.index())
    }
}

impl FromStr for TargetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T1" | "1" => Ok(TargetId::T1),
            "T2" | "2" => Ok(TargetId::T2),
            "T3" | "3" => Ok(TargetId::T3),
            other => Err(Error::Validation(format!("unknown target `{other}`"))),
        }
    }
}

/// Which order statistic to take and the event threshold in Leadbetters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub target_id: TargetId,
    /// Descending rank across the 25 locations (1 = maximum, 25 = minimum).
    pub rank: usize,
    pub event_threshold: f64,
    /// Event requires two consecutive days (T3 only).
    pub consecutive: bool,
}

impl TargetSpec {
    pub fn canonical(id: TargetId) -> Self {
        let (rank, event_threshold) = match id {
            TargetId::T1 => (25, 1.7),
            TargetId::T2 => (6, 5.7),
            TargetId::T3 => (3, 5.0),
        };
        Self {
            target_id: id,
            rank,
            event_threshold,
            consecutive: id == TargetId::T3,
        }
    }

    /// Custom rank and threshold. Thresholds of `-1` or `+inf` are accepted
    /// for certain and impossible events.
    pub fn custom(id: TargetId, rank: usize, event_threshold: f64) -> Result<Self> {
        if !(1..=N_LOCATIONS).contains(&rank) {
            return Err(Error::Validation(format!("rank {rank} outside 1..=25")));
        }
        if event_threshold.is_nan() {
            return Err(Error::Validation("event threshold is NaN".into()));
        }
        Ok(Self {
            rank,
            event_threshold,
            ..Self::canonical(id)
        })
    }

    /// Upper bound on the auxiliary-norm threshold for T3: `y ≥ T` implies
    /// `ȳ ≥ √2·T`, so fitting above a lower level keeps every event inside
    /// the modelled region.
    pub fn aux_bound(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.event_threshold
    }
}

/// A reduced series with its day labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateTarget {
    pub spec: TargetSpec,
    pub y: Vec<f64>,
    pub d: Vec<u16>,
    /// 1-based index of the (first) day in the concatenated runs.
    pub t: Vec<usize>,
    /// `(y31, y32)` pairs, T3 only.
    pub aux_pair: Option<Vec<(f64, f64)>>,
    /// `ȳ`, T3 only.
    pub aux_norm: Option<Vec<f64>>,
}

impl UnivariateTarget {
    pub fn target_id(&self) -> TargetId {
        self.spec.target_id
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Series the exceedance model is fitted on: `ȳ` for T3, `y` otherwise.
    pub fn fit_series(&self) -> &[f64] {
        self.aux_norm.as_deref().unwrap_or(&self.y)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        match (&self.aux_pair, &self.aux_norm) {
            (Some(pairs), Some(norm)) => {
                writeln!(w, "target_id,t,day_of_year,y,y31,y32,ybar")?;
                for i in 0..self.len() {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{}",
                        self.spec.target_id, self.t[i], self.d[i], self.y[i], pairs[i].0, pairs[i].1, norm[i]
                    )?;
                }
            }
            _ => {
                writeln!(w, "target_id,t,day_of_year,y")?;
                for i in 0..self.len() {
                    writeln!(w, "{},{},{},{}", self.spec.target_id, self.t[i], self.d[i], self.y[i])?;
                }
            }
        }
        Ok(())
    }
}

/// `rank`-th largest of the row; duplicates count with multiplicity.
pub(crate) fn kth_largest(row: &[f64; N_LOCATIONS], rank: usize) -> f64 {
    let mut v = *row;
    let (_, x, _) = v.select_nth_unstable_by(rank - 1, |a, b| b.total_cmp(a));
    *x
}

pub fn reduce_target(data: &Dataset, spec: &TargetSpec) -> UnivariateTarget {
    let mut y = Vec::with_capacity(data.n_total());
    let mut d = Vec::with_capacity(data.n_total());
    let mut t = Vec::with_capacity(data.n_total());
    let mut offset = 0;

    if !spec.consecutive {
        for run in data.runs() {
            for (i, row) in run.values.iter().enumerate() {
                y.push(kth_largest(row, spec.rank));
                d.push(run.day_of_year[i]);
                t.push(offset + i + 1);
            }
            offset += run.n_days();
        }
        return UnivariateTarget {
            spec: *spec,
            y,
            d,
            t,
            aux_pair: None,
            aux_norm: None,
        };
    }

    let mut pairs = Vec::with_capacity(data.n_total());
    let mut norm = Vec::with_capacity(data.n_total());
    for run in data.runs() {
        let daily: Vec<f64> = run.values.iter().map(|r| kth_largest(r, spec.rank)).collect();
        // pairs stay inside the run
        for i in 0..daily.len().saturating_sub(1) {
            let (a, b) = (daily[i], daily[i + 1]);
            pairs.push((a, b));
            norm.push((a * a + b * b).sqrt());
            y.push(a.min(b));
            d.push(run.day_of_year[i]);
            t.push(offset + i + 1);
        }
        offset += run.n_days();
    }
    UnivariateTarget {
        spec: *spec,
        y,
        d,
        t,
        aux_pair: Some(pairs),
        aux_norm: Some(norm),
    }
}

/// Number of `t` with `y_t ≥ threshold`.
pub fn count_events(target: &UnivariateTarget, spec: &TargetSpec) -> usize {
    target.y.iter().filter(|&&v| v >= spec.event_threshold).count()
}

pub const ANGULAR_BINS: usize = 20;

/// Angles of the normalized T3 pair above a high quantile of `ȳ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngularReport {
    pub p: f64,
    pub threshold: f64,
    pub angles: Vec<f64>,
    /// Counts over `[0, π/2]` in equal bins.
    pub histogram: Vec<usize>,
    /// Kolmogorov–Smirnov distance to `U[0, π/2]`.
    pub ks_distance: f64,
}

pub fn angular_diagnostic(target: &UnivariateTarget, p: f64) -> Result<AngularReport> {
    let (pairs, norm) = match (&target.aux_pair, &target.aux_norm) {
        (Some(a), Some(n)) => (a, n),
        _ => {
            return Err(Error::Validation(format!(
                "angular diagnostic needs T3, got {}",
                target.target_id()
            )))
        }
    };
    let q = empirical_quantile(norm, p)?;
    let angles: Vec<f64> = pairs
        .iter()
        .zip(norm)
        .filter(|(_, &n)| n > q)
        .map(|(&(a, _), &n)| (a / n).clamp(0.0, 1.0).asin())
        .collect();
    if angles.len() < ANGULAR_BINS {
        return Err(Error::InsufficientData(format!(
            "{} exceedances above {q}, need {ANGULAR_BINS}",
            angles.len()
        )));
    }
    let mut histogram = vec![0usize; ANGULAR_BINS];
    for &a in &angles {
        let bin = ((a / FRAC_PI_2) * ANGULAR_BINS as f64) as usize;
        histogram[bin.min(ANGULAR_BINS - 1)] += 1;
    }
    let ks_distance = ks_uniform(&mut angles.clone(), FRAC_PI_2);
    Ok(AngularReport {
        p,
        threshold: q,
        angles,
        histogram,
        ks_distance,
    })
}

/// KS distance of a sample to `U[0, upper]`. Sorts in place.
pub(crate) fn ks_uniform(x: &mut [f64], upper: f64) -> f64 {
    ks_distance(x, |v| (v / upper).clamp(0.0, 1.0))
}

/// KS distance between the empirical distribution of `x` and `cdf`.
pub fn ks_distance(x: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < x.len() {
        // step over ties so a point mass is measured against the full jump
        let mut j = i;
        while j + 1 < x.len() && x[j + 1] == x[i] {
            j += 1;
        }
        let f = cdf(x[i]);
        d = d.max(f - i as f64 / n).max((j + 1) as f64 / n - f);
        i = j + 1;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{GridRun, DAYS_PER_YEAR};

    fn dataset_from_rows(runs: Vec<Vec<[f64; N_LOCATIONS]>>) -> Dataset {
        let runs = runs
            .into_iter()
            .enumerate()
            .map(|(k, rows)| {
                let days = (0..rows.len()).map(|t| (t % DAYS_PER_YEAR) as u16 + 1).collect();
                GridRun::new(k as u32 + 1, days, rows).unwrap()
            })
            .collect();
        Dataset::new(runs).unwrap()
    }

    fn year_of(row: [f64; N_LOCATIONS]) -> Vec<[f64; N_LOCATIONS]> {
        vec![row; DAYS_PER_YEAR]
    }

    fn permutation_row() -> [f64; N_LOCATIONS] {
        let mut row = [0.0; N_LOCATIONS];
        for (j, x) in row.iter_mut().enumerate() {
            *x = ((j * 7) % 25 + 1) as f64;
        }
        row
    }

    #[test]
    fn t1_is_minimum() {
        let mut row = permutation_row();
        row[3] = 0.5;
        let data = dataset_from_rows(vec![year_of(row)]);
        let t = reduce_target(&data, &TargetSpec::canonical(TargetId::T1));
        assert!(t.y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn t2_is_sixth_largest() {
        let data = dataset_from_rows(vec![year_of(permutation_row())]);
        let t = reduce_target(&data, &TargetSpec::canonical(TargetId::T2));
        assert!(t.y.iter().all(|&v| v == 20.0));
        assert_eq!(t.len(), 365);
        assert_eq!(t.t[0], 1);
    }

    #[test]
    fn t3_three_four_five() {
        let mut rows = year_of([0.0; N_LOCATIONS]);
        // 3rd largest is 3 on day 1 and 4 on day 2
        rows[0][..3].copy_from_slice(&[9.0, 9.0, 3.0]);
        rows[1][..3].copy_from_slice(&[9.0, 9.0, 4.0]);
        let data = dataset_from_rows(vec![rows]);
        let t = reduce_target(&data, &TargetSpec::canonical(TargetId::T3));
        assert_eq!(t.aux_pair.as_ref().unwrap()[0], (3.0, 4.0));
        assert_eq!(t.aux_norm.as_ref().unwrap()[0], 5.0);
        assert_eq!(t.y[0], 3.0);
        assert_eq!(t.d[0], 1);
    }

    #[test]
    fn t3_pairs_do_not_cross_runs() {
        let data = dataset_from_rows(vec![year_of([1.0; N_LOCATIONS]), year_of([2.0; N_LOCATIONS])]);
        let t = reduce_target(&data, &TargetSpec::canonical(TargetId::T3));
        assert_eq!(t.len(), 2 * 365 - 2);
        assert!(t.aux_pair.unwrap().iter().all(|&(a, b)| a == b));
        // second run starts at global index 366
        assert_eq!(t.t[364], 366);
    }

    #[test]
    fn count_events_trivial_cases() {
        let data = dataset_from_rows(vec![year_of([0.0; N_LOCATIONS])]);
        for id in TargetId::ALL {
            let spec = TargetSpec::canonical(id);
            let t = reduce_target(&data, &spec);
            assert_eq!(count_events(&t, &spec), 0);
            let all = TargetSpec::custom(id, spec.rank, -1.0).unwrap();
            assert_eq!(count_events(&t, &all), t.len());
        }
    }

    #[test]
    fn diagonal_angles_are_point_mass() {
        let n = 1000;
        let target = UnivariateTarget {
            spec: TargetSpec::canonical(TargetId::T3),
            y: (0..n).map(|i| i as f64).collect(),
            d: vec![1; n],
            t: (1..=n).collect(),
            aux_pair: Some((0..n).map(|i| (i as f64, i as f64)).collect()),
            aux_norm: Some((0..n).map(|i| (i as f64).hypot(i as f64)).collect()),
        };
        let rep = angular_diagnostic(&target, 0.9).unwrap();
        assert!(rep
            .angles
            .iter()
            .all(|a| (a - std::f64::consts::FRAC_PI_4).abs() < 1e-12));
        assert!((rep.ks_distance - 0.5).abs() < 1e-9);
        assert_eq!(rep.histogram.iter().sum::<usize>(), rep.angles.len());
    }

    #[test]
    fn angular_needs_enough_exceedances() {
        let n = 100;
        let target = UnivariateTarget {
            spec: TargetSpec::canonical(TargetId::T3),
            y: vec![1.0; n],
            d: vec![1; n],
            t: (1..=n).collect(),
            aux_pair: Some((0..n).map(|i| (i as f64, 1.0)).collect()),
            aux_norm: Some((0..n).map(|i| (i as f64).hypot(1.0)).collect()),
        };
        assert!(matches!(
            angular_diagnostic(&target, 0.9),
            Err(Error::InsufficientData(_))
        ));
        let t1 = UnivariateTarget {
            aux_pair: None,
            aux_norm: None,
            ..target
        };
        assert!(angular_diagnostic(&t1, 0.5).is_err());
    }

    #[test]
    fn ks_distance_basics() {
        let mut x = vec![0.5];
        assert!((ks_uniform(&mut x, 1.0) - 0.5).abs() < 1e-15);
        let mut grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&mut grid, 1.0) - 0.005).abs() < 1e-12);
    }
}
