//! End-to-end orchestration: reduce → score levels → fit at the selected
//! level → frequency estimate, with every artifact written to an output
//! directory.
//!
//! All randomness is derived from the global seed, the target and a stage
//! tag, so a run is reproducible from its config and input files alone.
//! Every CSV starts with a `# potx seed=... config=...` comment line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::betting::{select_level, GameConfig, LevelSelection};
use crate::error::{Error, Result};
use crate::estimate::{estimate_frequency, EstimateConfig, FrequencyEstimate};
use crate::ingest::{generate_synthetic, load_dataset, Dataset, SynthSpec};
use crate::potmodel::{fit_pot, qq_exponential, PotFit, QqReport};
use crate::reduce::{
    angular_diagnostic, count_events, reduce_target, AngularReport, TargetId, TargetSpec, UnivariateTarget,
    ANGULAR_BINS,
};
use crate::seed;

const TAG_GAME: u64 = 0x4741_4d45;
const TAG_ESTIMATE: u64 = 0x4553_5449;

/// Level used for the T3 angular diagnostic.
pub const ANGULAR_LEVEL: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Files(Vec<PathBuf>),
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetOverrides {
    /// Replaces the canonical rank/threshold.
    pub spec: Option<TargetSpec>,
    pub game: Option<GameConfig>,
    pub estimate: Option<EstimateConfig>,
    /// Skip selection and use this level for the final fit.
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub targets: Vec<TargetId>,
    pub game: GameConfig,
    pub estimate: EstimateConfig,
    pub overrides: BTreeMap<TargetId, TargetOverrides>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Game sizes reported in the score table; `game.k` drives selection.
    pub k_list: Vec<usize>,
    pub emit_plot_data: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SynthSpec::default()),
            targets: TargetId::ALL.to_vec(),
            game: GameConfig::default(),
            estimate: EstimateConfig::default(),
            overrides: BTreeMap::new(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            k_list: vec![3, 5],
            emit_plot_data: true,
        }
    }
}

fn in_target(id: TargetId, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("{id}: {m}")),
        other => other,
    }
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Validation("no targets requested".into()));
        }
        if let DataSource::Files(paths) = &self.data {
            if paths.is_empty() {
                return Err(Error::Validation("no data files given".into()));
            }
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if self.k_list.iter().any(|&k| k < 2) {
            return Err(Error::Validation(format!(
                "K list {:?} has values below 2",
                self.k_list
            )));
        }
        for id in &self.targets {
            let (game, est) = (self.game_config(*id), self.estimate_config(*id));
            game.validate().map_err(|e| in_target(*id, e))?;
            est.validate().map_err(|e| in_target(*id, e))?;
            if let Some(spec) = self.overrides.get(id).and_then(|o| o.spec) {
                let checked =
                    TargetSpec::custom(*id, spec.rank, spec.event_threshold).map_err(|e| in_target(*id, e))?;
                if spec != checked {
                    return Err(Error::Validation(format!(
                        "{id}: target override {spec:?} does not match its key (expected {checked:?})"
                    )));
                }
            }
            if let Some(p) = self.overrides.get(id).and_then(|o| o.level) {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Validation(format!("{id}: level override {p} outside (0, 1)")));
                }
            }
        }
        Ok(())
    }

    pub fn target_spec(&self, id: TargetId) -> TargetSpec {
        self.overrides
            .get(&id)
            .and_then(|o| o.spec)
            .unwrap_or_else(|| TargetSpec::canonical(id))
    }

    /// Game config for `id`, seeded from the global seed.
    pub fn game_config(&self, id: TargetId) -> GameConfig {
        let base = self
            .overrides
            .get(&id)
            .and_then(|o| o.game.clone())
            .unwrap_or_else(|| self.game.clone());
        GameConfig {
            seed: seed::derive(self.seed, &[TAG_GAME, id.index(), base.seed]),
            ..base
        }
    }

    pub fn estimate_config(&self, id: TargetId) -> EstimateConfig {
        let base = self
            .overrides
            .get(&id)
            .and_then(|o| o.estimate.clone())
            .unwrap_or_else(|| self.estimate.clone());
        EstimateConfig {
            seed: seed::derive(self.seed, &[TAG_ESTIMATE, id.index(), base.seed]),
            ..base
        }
    }

    /// Short hash of the config, excluding the output directory.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn comment_line(&self) -> String {
        format!("potx seed={} config={}", self.seed, self.config_hash())
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Files(paths) => load_dataset(paths),
            DataSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

/// Size the global rayon pool from `POTX_THREADS` (unset or 0 = one per
/// core). Returns the number of worker threads in use.
pub fn init_threads_from_env() -> Result<usize> {
    let n = match std::env::var("POTX_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Validation(format!("POTX_THREADS={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    // a second call keeps the pool built by the first
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}

/// Everything computed for one target.
#[derive(Debug, Clone)]
pub struct TargetOutcome {
    pub spec: TargetSpec,
    pub observed_count: usize,
    /// One selection per game size, in `k_list` order (selection K first).
    pub selections: Vec<LevelSelection>,
    pub p_star: f64,
    pub fit: PotFit,
    pub estimate: FrequencyEstimate,
    pub qq: Option<QqReport>,
    pub angular: Option<AngularReport>,
}

/// Per-target work on an already reduced series.
pub fn analyze_target(
    target: &UnivariateTarget,
    game: &GameConfig,
    estimate: &EstimateConfig,
    k_list: &[usize],
    level_override: Option<f64>,
) -> std::result::Result<TargetOutcome, (&'static str, Error)> {
    let spec = target.spec;
    let observed_count = count_events(target, &spec);

    let mut ks = vec![game.k];
    ks.extend(k_list.iter().copied().filter(|&k| k != game.k));
    let selections = ks
        .iter()
        .map(|&k| select_level(target, &GameConfig { k, ..game.clone() }))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| ("select", e))?;
    let p_star = level_override.unwrap_or(selections[0].p_star);

    let fit = fit_pot(target, p_star, game.n_basis).map_err(|e| ("fit", e))?;
    let estimate = estimate_frequency(&fit.model, &spec, observed_count, estimate).map_err(|e| ("estimate", e))?;
    let qq = qq_exponential(&fit.adjusted).ok();
    let angular = if spec.consecutive {
        angular_diagnostic(target, ANGULAR_LEVEL).ok()
    } else {
        None
    };
    Ok(TargetOutcome {
        spec,
        observed_count,
        selections,
        p_star,
        fit,
        estimate,
        qq,
        angular,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageError {
    pub target_id: TargetId,
    pub stage: String,
    pub message: String,
}

/// A grid level that could not be scored (fit or game failure).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedLevel {
    pub target_id: TargetId,
    #[serde(rename = "K")]
    pub k: usize,
    pub p: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnswerRow {
    pub target_id: TargetId,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub confidence_achieved: f64,
    pub lambda: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub p_star: f64,
    pub observed_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub config_hash: String,
    pub answers: Vec<AnswerRow>,
    pub errors: Vec<StageError>,
    pub skipped_levels: Vec<SkippedLevel>,
    pub files: Vec<PathBuf>,
}

impl PipelineReport {
    pub fn success(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Buffered CSV file with the pipeline comment line.
pub struct CsvOut {
    path: PathBuf,
    w: BufWriter<File>,
}

impl CsvOut {
    pub fn create(path: &Path, comment: &str, header: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "# {comment}")?;
        writeln!(w, "{header}")?;
        Ok(Self {
            path: path.to_path_buf(),
            w,
        })
    }

    pub fn row(&mut self, line: std::fmt::Arguments<'_>) -> Result<()> {
        self.w.write_fmt(line)?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.w.flush()?;
        Ok(self.path)
    }
}

pub const SCORE_HEADER: &str = "target_id,K,p,terminal_wealth,rejected,rejection_round,seed";
pub const ANSWER_HEADER: &str = "target_id,point,ci_lo,ci_hi,confidence_achieved,lambda,N,seed";

pub fn write_score_rows(out: &mut CsvOut, target: TargetId, sel: &LevelSelection) -> Result<()> {
    for s in &sel.scores {
        out.row(format_args!(
            "{target},{},{},{},{},{},{}",
            sel.k,
            s.p,
            s.terminal_wealth,
            s.rejected,
            s.rejection_round.map(|r| r.to_string()).unwrap_or_default(),
            s.seed
        ))?;
    }
    Ok(())
}

pub fn write_answer_row(out: &mut CsvOut, est: &FrequencyEstimate) -> Result<()> {
    out.row(format_args!(
        "{},{},{},{},{},{},{},{}",
        est.target_id, est.point, est.ci_lo, est.ci_hi, est.achieved_coverage, est.lambda, est.n_replications, est.seed
    ))
}

/// Plot data for one fitted target. The angular histogram is written only
/// when a report is given.
pub fn write_fit_plots(
    dir: &Path,
    comment: &str,
    fit: &PotFit,
    qq: Option<&QqReport>,
    angular: Option<&AngularReport>,
) -> Result<Vec<PathBuf>> {
    let id = fit.model.target_id;
    let mut files = Vec::new();

    let mut out = CsvOut::create(&dir.join(format!("seasonal_{id}.csv")), comment, "day_of_year,f")?;
    for d in 1..=365u16 {
        out.row(format_args!("{d},{}", fit.model.scale.at_day(d)))?;
    }
    files.push(out.finish()?);

    let mut out = CsvOut::create(
        &dir.join(format!("exceedances_{id}.csv")),
        comment,
        "t,day_of_year,excess,adjusted",
    )?;
    for (r, e) in fit.exceedances.records.iter().zip(&fit.adjusted) {
        out.row(format_args!("{},{},{},{e}", r.t, r.d, r.excess))?;
    }
    files.push(out.finish()?);

    if let Some(qq) = qq {
        let mut out = CsvOut::create(&dir.join(format!("qq_{id}.csv")), comment, "theoretical,observed")?;
        for (t, o) in &qq.points {
            out.row(format_args!("{t},{o}"))?;
        }
        files.push(out.finish()?);
    }

    if let Some(ang) = angular {
        let mut out = CsvOut::create(&dir.join(format!("angular_{id}.csv")), comment, "bin_lo,bin_hi,count")?;
        let width = std::f64::consts::FRAC_PI_2 / ANGULAR_BINS as f64;
        for (i, c) in ang.histogram.iter().enumerate() {
            out.row(format_args!("{},{},{c}", i as f64 * width, (i + 1) as f64 * width))?;
        }
        files.push(out.finish()?);
    }
    Ok(files)
}

pub fn write_series_plot(dir: &Path, comment: &str, target: &UnivariateTarget) -> Result<PathBuf> {
    let id = target.target_id();
    let header = if target.aux_norm.is_some() {
        "t,day_of_year,y,ybar"
    } else {
        "t,day_of_year,y"
    };
    let mut out = CsvOut::create(&dir.join(format!("series_{id}.csv")), comment, header)?;
    for i in 0..target.len() {
        match &target.aux_norm {
            Some(norm) => out.row(format_args!(
                "{},{},{},{}",
                target.t[i], target.d[i], target.y[i], norm[i]
            ))?,
            None => out.row(format_args!("{},{},{}", target.t[i], target.d[i], target.y[i]))?,
        }
    }
    out.finish()
}

/// Run every requested target and write all artifacts under `out_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    config.validate()?;
    let data = config.load_data()?;
    let out_dir = &config.out_dir;
    std::fs::create_dir_all(out_dir)?;
    let comment = config.comment_line();
    let plot_dir = out_dir.join("plots");

    let mut files = Vec::new();
    let mut errors = Vec::new();
    let mut answers = Vec::new();
    let mut skipped_levels = Vec::new();
    let mut scores = CsvOut::create(&out_dir.join("scores.csv"), &comment, SCORE_HEADER)?;
    let mut answer_csv = CsvOut::create(&out_dir.join("answer.csv"), &comment, ANSWER_HEADER)?;

    let mut targets = config.targets.clone();
    targets.sort();
    targets.dedup();
    for id in targets {
        let spec = config.target_spec(id);
        let target = reduce_target(&data, &spec);
        let game = config.game_config(id);
        let est_cfg = config.estimate_config(id);
        let level = config.overrides.get(&id).and_then(|o| o.level);
        let outcome = match analyze_target(&target, &game, &est_cfg, &config.k_list, level) {
            Ok(o) => o,
            Err((stage, e)) => {
                errors.push(StageError {
                    target_id: id,
                    stage: stage.into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        for sel in &outcome.selections {
            write_score_rows(&mut scores, id, sel)?;
            skipped_levels.extend(sel.failures.iter().map(|(p, message)| SkippedLevel {
                target_id: id,
                k: sel.k,
                p: *p,
                message: message.clone(),
            }));
        }
        write_answer_row(&mut answer_csv, &outcome.estimate)?;

        let model_path = out_dir.join(format!("model_{id}.json"));
        std::fs::write(&model_path, outcome.fit.model.to_json()? + "\n")?;
        files.push(model_path);

        if config.emit_plot_data {
            files.push(write_series_plot(&plot_dir, &comment, &target)?);
            files.extend(write_fit_plots(
                &plot_dir,
                &comment,
                &outcome.fit,
                outcome.qq.as_ref(),
                outcome.angular.as_ref(),
            )?);
            let mut out = CsvOut::create(
                &plot_dir.join(format!("poisson_{id}.csv")),
                &comment,
                "count,poisson_prob,empirical_freq",
            )?;
            for (c, p, f) in outcome.estimate.histogram() {
                out.row(format_args!("{c},{p},{f}"))?;
            }
            files.push(out.finish()?);
        }

        answers.push(AnswerRow {
            target_id: id,
            point: outcome.estimate.point,
            ci_lo: outcome.estimate.ci_lo,
            ci_hi: outcome.estimate.ci_hi,
            confidence_achieved: outcome.estimate.achieved_coverage,
            lambda: outcome.estimate.lambda,
            n: outcome.estimate.n_replications,
            seed: outcome.estimate.seed,
            p_star: outcome.p_star,
            observed_count: outcome.observed_count,
        });
    }
    files.insert(0, answer_csv.finish()?);
    files.insert(0, scores.finish()?);

    let report = PipelineReport {
        seed: config.seed,
        config_hash: config.config_hash(),
        answers,
        errors,
        skipped_levels,
        files: files
            .iter()
            .map(|f| f.strip_prefix(out_dir).unwrap_or(f).to_path_buf())
            .collect(),
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_fails_validation() {
        let mut cfg = PipelineConfig::default();
        cfg.game.level_grid.clear();
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = PipelineConfig { seed: 1, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn config_json_roundtrip_with_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 7, "game": {"K": 5}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.game.k, 5);
        assert_eq!(cfg.game.level_grid.len(), 8);
        let back = PipelineConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn per_target_seeds_differ() {
        let cfg = PipelineConfig::default();
        assert_ne!(cfg.game_config(TargetId::T1).seed, cfg.game_config(TargetId::T2).seed);
        assert_ne!(
            cfg.estimate_config(TargetId::T1).seed,
            cfg.game_config(TargetId::T1).seed
        );
    }
}
