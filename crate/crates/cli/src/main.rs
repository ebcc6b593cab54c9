//! `potx`: batch front end for the seasonal POT extrapolation pipeline.
//!
//! Every subcommand reads an optional JSON config (`--config`), applies flag
//! overrides on top of it, and writes its artifacts under `--out`. Usage
//! errors exit with status 2. Any other failure exits with 1.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use potx::betting::select_level;
use potx::estimate::{check_model, estimate_frequency};
use potx::ingest::{write_dataset, Dataset};
use potx::pipeline::{
    self, init_threads_from_env, write_answer_row, write_fit_plots, write_score_rows, write_series_plot, CsvOut,
    DataSource, PipelineConfig, ANGULAR_LEVEL, ANSWER_HEADER, SCORE_HEADER,
};
use potx::potmodel::{adjust, extract_exceedances, fit_pot, qq_exponential, ModelKind, PotFit, PotModel};
use potx::reduce::{angular_diagnostic, count_events, reduce_target, TargetId, UnivariateTarget};

#[derive(Debug, Parser)]
#[command(
    name = "potx",
    version,
    about = "Seasonal peaks-over-threshold extrapolation with betting-based level selection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Global reproducibility seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Run CSV files; replaces the config's data source.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset, one CSV per run.
    Synth {
        #[arg(long)]
        runs: Option<u32>,
        #[arg(long)]
        years: Option<u32>,
    },
    /// Reduce a dataset to target series CSVs.
    Reduce {
        #[command(flatten)]
        data: DataArgs,
        /// Restrict to one target (default: all configured targets).
        #[arg(long)]
        target: Option<TargetId>,
    },
    /// Fit the POT model at a fixed level and write its JSON.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        target: TargetId,
        #[arg(long)]
        p: f64,
    },
    /// Score every grid level with the betting game and report p★.
    Select {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        target: TargetId,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Monte Carlo frequency estimate from a fitted model.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: TargetId,
        /// Level the model is expected to be fitted at.
        #[arg(long)]
        p: Option<f64>,
        /// Observed event count in the given runs; counted from the data when omitted.
        #[arg(long)]
        observed: Option<usize>,
        #[arg(long = "N")]
        n: Option<usize>,
        #[arg(long)]
        confidence: Option<f64>,
    },
    /// Write plot data for a fitted model and its data.
    Report {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the whole pipeline for every configured target.
    Run {
        #[command(flatten)]
        data: DataArgs,
    },
}

/// Bad or missing input detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<(PipelineConfig, bool)> {
    let (mut cfg, from_file) = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            let cfg = PipelineConfig::from_json(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            (cfg, true)
        }
        None => (PipelineConfig::default(), false),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok((cfg, from_file))
}

/// Data comes from `--data` or from a config file; the built-in default
/// source is not used implicitly.
fn resolve_data(cfg: &mut PipelineConfig, from_file: bool, data: &DataArgs) -> Result<Dataset> {
    if !data.data.is_empty() {
        cfg.data = DataSource::Files(data.data.clone());
    } else if !from_file {
        return Err(usage("no input: pass --data <files> or --config <file>"));
    }
    if let DataSource::Files(paths) = &cfg.data {
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(usage(format!("input file {} does not exist", missing.display())));
        }
    }
    Ok(cfg.load_data()?)
}

fn run(cli: Cli) -> Result<bool> {
    let threads = init_threads_from_env().map_err(|e| usage(e.to_string()))?;
    log::info!("using {threads} worker threads");
    let (mut cfg, from_file) = load_config(&cli.common)?;
    let comment = cfg.comment_line();
    let out = cfg.out_dir.clone();

    match cli.command {
        Command::Synth { runs, years } => {
            let mut spec = match &cfg.data {
                DataSource::Synthetic(s) => s.clone(),
                DataSource::Files(_) => Default::default(),
            };
            if let Some(r) = runs {
                spec.n_runs = r;
            }
            if let Some(y) = years {
                spec.years_per_run = y;
            }
            if let Some(seed) = cli.common.seed {
                spec.seed = seed;
            }
            spec.validate().map_err(|e| usage(e.to_string()))?;
            let data = potx::ingest::generate_synthetic(&spec)?;
            let comment = format!("potx synth seed={}", spec.seed);
            for path in write_dataset(&out, &data, Some(&comment))? {
                println!("{}", path.display());
            }
            Ok(true)
        }
        Command::Reduce { data, target } => {
            let dataset = resolve_data(&mut cfg, from_file, &data)?;
            let ids = target.map(|t| vec![t]).unwrap_or_else(|| cfg.targets.clone());
            std::fs::create_dir_all(&out)?;
            for id in ids {
                let t = reduce_target(&dataset, &cfg.target_spec(id));
                let path = out.join(format!("target_{id}.csv"));
                t.write_csv(BufWriter::new(File::create(&path)?))?;
                println!(
                    "{} ({} values, {} events)",
                    path.display(),
                    t.len(),
                    count_events(&t, &t.spec)
                );
            }
            Ok(true)
        }
        Command::Fit { data, target, p } => {
            let dataset = resolve_data(&mut cfg, from_file, &data)?;
            let game = cfg.game_config(target);
            if p > game.max_level {
                eprintln!(
                    "warning: level {p} exceeds the largest selectable level {}; the tail fit rests on very few exceedances",
                    game.max_level
                );
            }
            let t = reduce_target(&dataset, &cfg.target_spec(target));
            let fit = fit_pot(&t, p, game.n_basis).with_context(|| format!("{target}: fit at p = {p}"))?;
            let path = write_model(&out, &fit.model)?;
            println!(
                "{}: q = {}, {} exceedances -> {}",
                target,
                fit.model.q,
                fit.exceedances.len(),
                path.display()
            );
            Ok(true)
        }
        Command::Select { data, target, k, alpha } => {
            let dataset = resolve_data(&mut cfg, from_file, &data)?;
            let mut game = cfg.game_config(target);
            if let Some(k) = k {
                game.k = k;
            }
            if let Some(a) = alpha {
                game.alpha = a;
            }
            game.validate().map_err(|e| usage(e.to_string()))?;
            let t = reduce_target(&dataset, &cfg.target_spec(target));
            let sel = select_level(&t, &game).with_context(|| format!("{target}: level selection"))?;
            let mut csv = CsvOut::create(&out.join(format!("scores_{target}.csv")), &comment, SCORE_HEADER)?;
            write_score_rows(&mut csv, target, &sel)?;
            csv.finish()?;
            for s in &sel.scores {
                println!(
                    "  p = {:<7} W = {:<12.6} {}",
                    s.p,
                    s.terminal_wealth,
                    if s.rejected { "rejected" } else { "" }
                );
            }
            for (p, msg) in &sel.failures {
                eprintln!("warning: level {p} skipped: {msg}");
            }
            println!("{target} K = {}: p* = {}", sel.k, sel.p_star);
            Ok(true)
        }
        Command::Estimate {
            data,
            model,
            target,
            p,
            observed,
            n,
            confidence,
        } => {
            let model = read_model(&model)?;
            let spec = cfg.target_spec(target);
            check_model(&model, &spec, p)?;
            let observed = match observed {
                Some(c) => c,
                None => {
                    let dataset = resolve_data(&mut cfg, from_file, &data)?;
                    count_events(&reduce_target(&dataset, &spec), &spec)
                }
            };
            let mut est_cfg = cfg.estimate_config(target);
            if let Some(n) = n {
                est_cfg.n_replications = n;
            }
            if let Some(c) = confidence {
                est_cfg.confidence = c;
            }
            est_cfg.validate().map_err(|e| usage(e.to_string()))?;
            let est = estimate_frequency(&model, &spec, observed, &est_cfg)?;
            let mut csv = CsvOut::create(&out.join(format!("answer_{target}.csv")), &comment, ANSWER_HEADER)?;
            write_answer_row(&mut csv, &est)?;
            csv.finish()?;
            let mut hist = CsvOut::create(
                &out.join(format!("poisson_{target}.csv")),
                &comment,
                "count,poisson_prob,empirical_freq",
            )?;
            for (c, pr, f) in est.histogram() {
                hist.row(format_args!("{c},{pr},{f}"))?;
            }
            hist.finish()?;
            println!(
                "{target}: point = {} interval = [{}, {}] (coverage {:.4}, lambda {:.3})",
                est.point, est.ci_lo, est.ci_hi, est.achieved_coverage, est.lambda
            );
            Ok(true)
        }
        Command::Report { data, model } => {
            let model = read_model(&model)?;
            let dataset = resolve_data(&mut cfg, from_file, &data)?;
            let id = model.target_id;
            let t = reduce_target(&dataset, &cfg.target_spec(id));
            let fit = refit_view(&t, model)?;
            let qq = qq_exponential(&fit.adjusted).ok();
            let angular = if t.spec.consecutive {
                angular_diagnostic(&t, ANGULAR_LEVEL).ok()
            } else {
                None
            };
            let mut files = vec![write_series_plot(&out, &comment, &t)?];
            files.extend(write_fit_plots(&out, &comment, &fit, qq.as_ref(), angular.as_ref())?);
            for f in files {
                println!("{}", f.display());
            }
            Ok(true)
        }
        Command::Run { data } => {
            resolve_data(&mut cfg, from_file, &data)?;
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let report = pipeline::run_pipeline(&cfg)?;
            for a in &report.answers {
                println!(
                    "{}: p* = {} point = {} interval = [{}, {}]",
                    a.target_id, a.p_star, a.point, a.ci_lo, a.ci_hi
                );
            }
            for s in report
                .skipped_levels
                .iter()
                .filter(|s| s.k == cfg.game_config(s.target_id).k)
            {
                eprintln!("warning: {} level {} skipped: {}", s.target_id, s.p, s.message);
            }
            for e in &report.errors {
                eprintln!("error: {} failed at {}: {}", e.target_id, e.stage, e.message);
            }
            Ok(report.success())
        }
    }
}

fn write_model(dir: &Path, model: &PotModel) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("model_{}.json", model.target_id));
    std::fs::write(&path, model.to_json()? + "\n")?;
    Ok(path)
}

fn read_model(path: &Path) -> Result<PotModel> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("model {}: {e}", path.display())))?;
    PotModel::from_json(&text).with_context(|| format!("model {}", path.display()))
}

/// Exceedances and adjusted values of `target` under an existing model,
/// without refitting the scale.
fn refit_view(target: &UnivariateTarget, model: PotModel) -> Result<PotFit> {
    let exceedances = extract_exceedances(target, model.p, model.kind == ModelKind::Angular)?;
    let adjusted = adjust(&exceedances, &model.scale);
    Ok(PotFit {
        model,
        exceedances,
        adjusted,
    })
}
