//! `uqsep` command-line runner: generate datasets, train surrogates, run the
//! separation loop and score finished runs.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use uqsep::evalkit::{coverage_calibration, crossing_rate, score_run, Head, RunScores};
use uqsep::problems::{build_initial_dataset, Dataset};
use uqsep::separation::{run_separation, RunArtifacts};
use uqsep::surrogates::Surrogate;
use uqsep::umap::{evaluate_maps, GridSpec, OutputMaps};

use config::LoadedConfig;

#[derive(Parser)]
#[command(name = "uqsep", version, about = "Separate aleatoric and epistemic uncertainty by iterative acquisition")]
struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the initial dataset and the ground-truth region manifest.
    Generate(Common),
    /// Train a surrogate on a dataset and export its uncertainty maps.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV as written by `generate`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Export uncertainty maps of a saved model.
    Maps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the separation loop and write the report directory.
    Separate(Common),
    /// Score a report directory against its ground-truth regions.
    Score {
        /// Report directory written by `separate`.
        #[arg(long)]
        run: PathBuf,
        /// Where to write `scores.toml`; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// One exit code per error class; 2 is left to argument parsing.
fn exit_code(e: &anyhow::Error) -> u8 {
    use uqsep::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Config(_)) => 3,
        Some(E::Parse { .. }) => 4,
        Some(E::Io { .. }) => 5,
        Some(E::Format(_)) => 6,
        Some(E::Shape { .. }) => 7,
        Some(E::Domain(_)) => 8,
        Some(E::Infeasible(_)) => 9,
        Some(E::State(_)) => 10,
        Some(E::Diverged { .. } | E::NonFiniteGradient { .. }) => 11,
        None => 1,
    }
}

struct Log {
    quiet: bool,
}

impl Log {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let log = Log { quiet: cli.quiet };
    match cli.command {
        Command::Generate(c) => generate(&load(&c)?, &log),
        Command::Train { common, data } => train(&load(&common)?, &data, &log),
        Command::Maps { common, model } => maps(&load(&common)?, &model, &log),
        Command::Separate(c) => separate(&load(&c)?, &log),
        Command::Score { run, out } => score(&run, out.as_deref().unwrap_or(&run), &log),
    }
}

fn load(c: &Common) -> Result<LoadedConfig> {
    let mut loaded = match &c.config {
        Some(path) => config::load(path)?,
        None => LoadedConfig::from_defaults(),
    };
    if let Some(seed) = c.seed {
        loaded.config.seed = seed;
    }
    if let Some(out) = &c.out {
        loaded.config.out = Some(out.clone());
    }
    Ok(loaded)
}

fn prepare_out(cfg: &LoadedConfig) -> Result<PathBuf> {
    let out = cfg.config.out_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let echo = out.join("config.toml");
    let text = match &cfg.source {
        Some(text) => text.clone(),
        None => toml::to_string(&cfg.config).context("serializing the default config")?,
    };
    std::fs::write(&echo, text).map_err(|e| uqsep::Error::Io { path: echo, source: e })?;
    Ok(out)
}

#[derive(Serialize)]
struct Manifest<'a> {
    problem: &'a uqsep::problems::Problem,
    grid: &'a GridSpec,
}

fn write_manifest(path: &Path, problem: &uqsep::problems::Problem, grid: &GridSpec) -> Result<()> {
    let text = toml::to_string(&Manifest { problem, grid }).context("serializing the manifest")?;
    std::fs::write(path, text).map_err(|e| uqsep::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn generate(cfg: &LoadedConfig, log: &Log) -> Result<()> {
    let (problem, sep) = cfg.resolve()?;
    let out = prepare_out(cfg)?;
    let dataset = build_initial_dataset(&problem, sep.n_initial, sep.seed)?;
    dataset.write_csv(&out.join("dataset.csv"))?;
    let grid = GridSpec::for_problem(&problem, sep.grid_resolution)?;
    write_manifest(&out.join("manifest.toml"), &problem, &grid)?;
    log.say(format!("wrote {} rows to {}", dataset.len(), out.join("dataset.csv").display()));
    Ok(())
}

fn export_maps(dir: &Path, maps: &[OutputMaps]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (k, m) in maps.iter().enumerate() {
        for (kind, map) in [("epistemic", &m.epistemic), ("aleatoric", &m.aleatoric)] {
            let stem = uqsep::separation::map_file_stem(kind, k);
            map.write_csv(&dir.join(format!("{stem}.csv")))?;
            let max = map.max();
            let shown = if max > 0.0 { map.scaled(1.0 / max) } else { map.clone() };
            shown.write_pgm(&dir.join(format!("{stem}.pgm")))?;
        }
    }
    Ok(())
}

fn train(cfg: &LoadedConfig, data: &Path, log: &Log) -> Result<()> {
    let (problem, sep) = cfg.resolve()?;
    let dataset = Dataset::read_csv(data)?;
    let out = prepare_out(cfg)?;
    log.say(format!(
        "training {} on {} rows",
        sep.surrogate.kind_name(),
        dataset.len()
    ));
    let (model, _) = Surrogate::train(&dataset, &sep.surrogate_for(0))?;
    model.save(&out.join("model.bin"))?;
    let grid = GridSpec::for_problem(&problem, sep.grid_resolution)?;
    export_maps(&out.join("maps"), &evaluate_maps(&model, &problem, &grid)?)?;
    log.say(format!("wrote model and maps to {}", out.display()));
    Ok(())
}

fn maps(cfg: &LoadedConfig, model_path: &Path, log: &Log) -> Result<()> {
    let (problem, sep) = cfg.resolve()?;
    let model = Surrogate::load(model_path)?;
    let out = prepare_out(cfg)?;
    let grid = GridSpec::for_problem(&problem, sep.grid_resolution)?;
    export_maps(&out.join("maps"), &evaluate_maps(&model, &problem, &grid)?)?;
    log.say(format!("wrote maps to {}", out.join("maps").display()));
    Ok(())
}

fn separate(cfg: &LoadedConfig, log: &Log) -> Result<()> {
    let (problem, sep) = cfg.resolve()?;
    let out = prepare_out(cfg)?;
    log.say(format!(
        "separating {} with {} for {} iterations",
        problem.name,
        sep.surrogate.kind_name(),
        sep.iterations
    ));
    let report = run_separation(&problem, &sep)?;
    report.write_dir(&out)?;
    for rec in &report.iterations {
        log.say(format!(
            "iteration {}: {} points, {} mask cells",
            rec.iteration,
            rec.dataset_size,
            rec.mask.count()
        ));
    }
    log.say(format!("status: {:?}; report in {}", report.status, out.display()));
    Ok(())
}

#[derive(Serialize)]
struct HeadCoverage {
    lower: Vec<f64>,
    median: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize)]
struct ModelScores {
    coverage: HeadCoverage,
    crossing_rate: f64,
}

#[derive(Serialize)]
struct ScoreFile {
    #[serde(flatten)]
    run: RunScores,
    model: Option<ModelScores>,
}

const COVERAGE_POINTS: usize = 2000;
const COVERAGE_SEED: u64 = 0x5EED;

fn score(run_dir: &Path, out: &Path, log: &Log) -> Result<()> {
    let artifacts = RunArtifacts::read_dir(run_dir)?;
    let run = score_run(&artifacts)?;
    let model_path = run_dir.join("model.bin");
    let model = match model_path.exists() {
        true => match Surrogate::load(&model_path)? {
            Surrogate::Eqr(m) => {
                // noise-free, gap-free test inputs over the whole domain
                let clean = artifacts.problem.clone().with_regions(Vec::new())?;
                let test = build_initial_dataset(&clean, COVERAGE_POINTS, COVERAGE_SEED)?;
                let cov = |h| coverage_calibration(&m, test.inputs(), test.targets(), h);
                Some(ModelScores {
                    coverage: HeadCoverage {
                        lower: cov(Head::Lower)?,
                        median: cov(Head::Median)?,
                        upper: cov(Head::Upper)?,
                    },
                    crossing_rate: crossing_rate(&m, &artifacts.grid)?,
                })
            }
            _ => None,
        },
        false => None,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("scores.toml");
    let text = toml::to_string(&ScoreFile { run, model }).context("serializing scores")?;
    std::fs::write(&path, text).map_err(|e| uqsep::Error::Io { path: path.clone(), source: e })?;
    log.say(format!("wrote {}", path.display()));
    Ok(())
}
