//! Climate-run panels: CSV loading and writing, plus a synthetic generator
//! with a brute-force ground-truth oracle.
//!
//! A run is a `n_days × 25` panel of daily precipitation on a 365-day
//! calendar. Runs are stored one per CSV file with the header
//! `run_id,day_index,day_of_year,loc_00,...,loc_24`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::TargetSpec;
use crate::seed;

pub const N_LOCATIONS: usize = 25;
pub const DAYS_PER_YEAR: usize = 365;

const TAG_SYNTH: u64 = 0x5359_4e54;
const TAG_ORACLE: u64 = 0x4f52_4143;

/// One climate-model run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub run_id: u32,
    pub day_of_year: Vec<u16>,
    pub values: Vec<[f64; N_LOCATIONS]>,
}

impl GridRun {
    /// Build a run, checking the calendar and value invariants.
    pub fn new(run_id: u32, day_of_year: Vec<u16>, values: Vec<[f64; N_LOCATIONS]>) -> Result<Self> {
        if day_of_year.len() != values.len() {
            return Err(Error::Validation(format!(
                "run {run_id}: {} day labels for {} rows",
                day_of_year.len(),
                values.len()
            )));
        }
        check_calendar(&day_of_year)
            .map_err(|(row, msg)| Error::Validation(format!("run {run_id}, row {}: {msg}", row + 1)))?;
        for (row, v) in values.iter().enumerate() {
            if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::Validation(format!(
                    "run {run_id}, row {}: value {x} is not a finite non-negative number",
                    row + 1
                )));
            }
        }
        Ok(Self {
            run_id,
            day_of_year,
            values,
        })
    }

    pub fn n_days(&self) -> usize {
        self.values.len()
    }
}

/// Returns the offending row index on failure.
fn check_calendar(days: &[u16]) -> std::result::Result<(), (usize, String)> {
    if days.is_empty() {
        return Err((0, "run is empty".into()));
    }
    if !days.len().is_multiple_of(DAYS_PER_YEAR) {
        return Err((
            days.len() - 1,
            format!("{} days is not a multiple of {DAYS_PER_YEAR}", days.len()),
        ));
    }
    for (i, &d) in days.iter().enumerate() {
        if !(1..=DAYS_PER_YEAR as u16).contains(&d) {
            return Err((i, format!("day_of_year {d} outside 1..=365")));
        }
        if i > 0 && d != days[i - 1] % DAYS_PER_YEAR as u16 + 1 {
            return Err((i, format!("day_of_year {d} does not follow {}", days[i - 1])));
        }
    }
    Ok(())
}

/// Several runs, kept in ascending `run_id` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    runs: Vec<GridRun>,
}

impl Dataset {
    pub fn new(mut runs: Vec<GridRun>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Validation("dataset has no runs".into()));
        }
        runs.sort_by_key(|r| r.run_id);
        if let Some(w) = runs.windows(2).find(|w| w[0].run_id == w[1].run_id) {
            return Err(Error::Validation(format!("duplicate run_id {}", w[0].run_id)));
        }
        Ok(Self { runs })
    }

    pub fn runs(&self) -> &[GridRun] {
        &self.runs
    }

    pub fn n_total(&self) -> usize {
        self.runs.iter().map(GridRun::n_days).sum()
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub fn csv_header() -> String {
    let mut h = String::from("run_id,day_index,day_of_year");
    for j in 0..N_LOCATIONS {
        h.push_str(&format!(",loc_{j:02}"));
    }
    h
}

/// Load one run file. Lines starting with `#` are comments.
pub fn load_run(path: &Path) -> Result<GridRun> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(0, format!("{other:?}")),
        })?;

    let expected = csv_header();
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.len() != N_LOCATIONS + 3 {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("header has {} columns, expected {}", headers.len(), N_LOCATIONS + 3),
        });
    }
    if headers.iter().collect::<Vec<_>>().join(",") != expected {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("unexpected header, expected `{expected}`"),
        });
    }

    let mut run_id = None;
    let mut days = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != N_LOCATIONS + 3 {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("line {line}: {} columns, expected {}", rec.len(), N_LOCATIONS + 3),
            });
        }
        let id: u32 = rec[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("run_id `{}`: {e}", &rec[0])))?;
        match run_id {
            None => run_id = Some(id),
            Some(r) if r != id => {
                return Err(Error::Validation(format!(
                    "{}:{line}: run_id {id} differs from {r}",
                    path.display()
                )))
            }
            _ => {}
        }
        let idx: usize = rec[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("day_index `{}`: {e}", &rec[1])))?;
        if idx != days.len() + 1 {
            return Err(Error::Validation(format!(
                "{}:{line}: day_index {idx}, expected {}",
                path.display(),
                days.len() + 1
            )));
        }
        let d: u16 = rec[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("day_of_year `{}`: {e}", &rec[2])))?;
        if !(1..=DAYS_PER_YEAR as u16).contains(&d) {
            return Err(Error::Validation(format!(
                "{}:{line}: day_of_year {d} outside 1..=365",
                path.display()
            )));
        }
        let mut row = [0.0; N_LOCATIONS];
        for (j, slot) in row.iter_mut().enumerate() {
            let field = &rec[j + 3];
            *slot = field
                .trim()
                .parse()
                .map_err(|e| parse_err(line, format!("loc_{j:02} `{field}`: {e}")))?;
        }
        days.push(d);
        values.push(row);
    }
    let run_id = run_id.ok_or_else(|| Error::Validation(format!("{}: no data rows", path.display())))?;
    GridRun::new(run_id, days, values).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_dataset<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let runs = paths.iter().map(|p| load_run(p.as_ref())).collect::<Result<Vec<_>>>()?;
    Dataset::new(runs)
}

/// Write a run in canonical form. `comment`, if given, is emitted as a
/// leading `# ...` line.
pub fn write_run<W: Write>(w: W, run: &GridRun, comment: Option<&str>) -> Result<()> {
    let mut w = BufWriter::new(w);
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "{}", csv_header())?;
    for (i, (d, row)) in run.day_of_year.iter().zip(&run.values).enumerate() {
        write!(w, "{},{},{}", run.run_id, i + 1, d)?;
        for x in row {
            write!(w, ",{x}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_file_name(run_id: u32) -> String {
    format!("run_{run_id:03}.csv")
}

/// Write every run to `dir/run_NNN.csv`, returning the paths in run order.
pub fn write_dataset(dir: &Path, data: &Dataset, comment: Option<&str>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    data.runs()
        .iter()
        .map(|run| {
            let path = dir.join(run_file_name(run.run_id));
            write_run(File::create(&path)?, run, comment)?;
            Ok(path)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Parameters of the synthetic generator.
///
/// Each day draws a latent factor `Z = s(d)·E` with `E ~ Exp(1)` and
/// `s(d) = tail_scale·(1 + seasonal_amplitude·sin(2πd/365))`; location `j`
/// receives `spatial_loading[j]·Z` plus independent unit-exponential noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_runs: u32,
    pub years_per_run: u32,
    pub seed: u64,
    pub seasonal_amplitude: f64,
    pub tail_scale: f64,
    pub spatial_loading: Vec<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_runs: 4,
            years_per_run: 165,
            seed: 0,
            seasonal_amplitude: 0.5,
            tail_scale: 1.0,
            spatial_loading: vec![1.0; N_LOCATIONS],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 || self.years_per_run == 0 {
            return Err(Error::Validation("n_runs and years_per_run must be positive".into()));
        }
        // amplitude < 1 keeps s(d) strictly positive
        if !(0.0..1.0).contains(&self.seasonal_amplitude) {
            return Err(Error::Validation(format!(
                "seasonal_amplitude {} outside [0, 1)",
                self.seasonal_amplitude
            )));
        }
        if !(self.tail_scale.is_finite() && self.tail_scale > 0.0) {
            return Err(Error::Validation(format!("tail_scale {} must be > 0", self.tail_scale)));
        }
        if self.spatial_loading.len() != N_LOCATIONS {
            return Err(Error::Validation(format!(
                "spatial_loading has {} entries, expected {N_LOCATIONS}",
                self.spatial_loading.len()
            )));
        }
        if let Some(l) = self.spatial_loading.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
            return Err(Error::Validation(format!("spatial loading {l} outside (0, 1]")));
        }
        Ok(())
    }

    /// Seasonal scale of the latent factor on day `d`.
    pub fn latent_scale(&self, d: u16) -> f64 {
        self.tail_scale * (1.0 + self.seasonal_amplitude * (2.0 * PI * f64::from(d) / DAYS_PER_YEAR as f64).sin())
    }

    pub fn run_days(&self) -> usize {
        self.years_per_run as usize * DAYS_PER_YEAR
    }

    fn draw_day<R: rand::Rng>(&self, rng: &mut R, latent: f64) -> [f64; N_LOCATIONS] {
        let mut row = [0.0; N_LOCATIONS];
        for (x, l) in row.iter_mut().zip(&self.spatial_loading) {
            let noise: f64 = rng.sample(Exp1);
            *x = l * latent + noise;
        }
        row
    }
}

/// Generate a dataset; a pure function of `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let runs = (1..=spec.n_runs)
        .map(|run_id| {
            let mut rng = seed::rng(seed::derive(spec.seed, &[TAG_SYNTH, u64::from(run_id)]));
            let n = spec.run_days();
            let mut days = Vec::with_capacity(n);
            let mut values = Vec::with_capacity(n);
            for t in 0..n {
                let d = (t % DAYS_PER_YEAR) as u16 + 1;
                let e: f64 = rng.sample(Exp1);
                let z = spec.latent_scale(d) * e;
                days.push(d);
                values.push(spec.draw_day(&mut rng, z));
            }
            GridRun::new(run_id, days, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(runs)
}

// ---------------------------------------------------------------------------
// Ground-truth oracle
// ---------------------------------------------------------------------------

/// Monte Carlo estimate of the expected number of events per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleFrequency {
    /// Expected events per run of `years_per_run` years.
    pub per_run: f64,
    pub std_error: f64,
    /// Upper bound on the truncation bias from the latent-factor cutoff.
    pub bias_bound: f64,
    pub oracle_days: usize,
}

/// `ln C(25, r)`.
fn ln_choose_grid(r: usize) -> f64 {
    (1..=r).map(|i| ((N_LOCATIONS + 1 - i) as f64 / i as f64).ln()).sum()
}

/// Brute-force simulation of the generator, independent of the fitting code.
///
/// Draws are conditioned on the latent factor exceeding a cutoff `c` and
/// reweighted by `P(Z > c | d) = exp(-c/s(d))`, which is exact because `Z` is
/// exponential given `d`. The cutoff is placed low enough that an event with
/// `Z ≤ c` needs at least `rank` noise terms above a margin, which bounds the
/// neglected mass by `e^-30` per day. For plain or low thresholds `c = 0` and
/// this is ordinary simulation.
pub fn ground_truth_frequency(spec: &SynthSpec, target: &TargetSpec, oracle_days: usize) -> Result<OracleFrequency> {
    spec.validate()?;
    if oracle_days < 1_000_000 {
        return Err(Error::Validation(format!("oracle_days {oracle_days} < 10^6")));
    }
    let rank = target.rank;
    if !(1..=N_LOCATIONS).contains(&rank) {
        return Err(Error::Validation(format!("rank {rank} outside 1..=25")));
    }
    let threshold = target.event_threshold;
    let run_days = spec.run_days();
    let events_per_run = if target.consecutive {
        (run_days - 1) as f64
    } else {
        run_days as f64
    };
    if threshold == f64::INFINITY {
        return Ok(OracleFrequency {
            per_run: 0.0,
            std_error: 0.0,
            bias_bound: 0.0,
            oracle_days,
        });
    }

    let margin = (30.0 + ln_choose_grid(rank)) / rank as f64;
    let l_max = spec.spatial_loading.iter().cloned().fold(0.0, f64::max);
    let cutoff = ((threshold - margin) / l_max).max(0.0);
    let bias_per_day = if cutoff > 0.0 { (-30.0f64).exp() } else { 0.0 };
    let days_per_event = if target.consecutive { 2.0 } else { 1.0 };

    let mut rng = seed::rng(seed::derive(spec.seed, &[TAG_ORACLE, rank as u64, threshold.to_bits()]));
    let conditioned_day = |rng: &mut seed::Rng, d: u16| -> (f64, bool) {
        let s = spec.latent_scale(d);
        let weight = (-cutoff / s).exp();
        let e: f64 = rng.sample(Exp1);
        let z = cutoff + s * e;
        let mut row = spec.draw_day(rng, z);
        row.sort_unstable_by(|a, b| b.total_cmp(a));
        (weight, row[rank - 1] >= threshold)
    };

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..oracle_days {
        let d: u16 = rng.random_range(1..=DAYS_PER_YEAR as u16);
        let (w1, hit1) = conditioned_day(&mut rng, d);
        let x = if target.consecutive {
            let (w2, hit2) = conditioned_day(&mut rng, d % DAYS_PER_YEAR as u16 + 1);
            if hit1 && hit2 {
                w1 * w2
            } else {
                0.0
            }
        } else if hit1 {
            w1
        } else {
            0.0
        };
        sum += x;
        sum_sq += x * x;
    }
    let n = oracle_days as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(OracleFrequency {
        per_run: mean * events_per_run,
        std_error: (var / n).sqrt() * events_per_run,
        bias_bound: bias_per_day * days_per_event * events_per_run,
        oracle_days,
    })
}
