//! The separation loop: train, map, combine, binarize, acquire inside the
//! mask, retrain. Uncertainty that survives the loop is aleatoric; what the
//! loop resolved (initial mask XOR final mask) is epistemic.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{build_initial_dataset, nfp_query, Dataset, Problem};
use crate::seed::{derive_seed, TAG_ACQUIRE, TAG_ITERATION, TAG_LABEL};
use crate::surrogates::{Surrogate, SurrogateConfig};
use crate::umap::{
    binarize, binarize_relative, combine_across_outputs, combine_per_output, evaluate_maps, fit_minmax,
    normalize_all, sample_in_mask, xor_masks, BinaryMask, GridSpec, MapKind, MapOutput, MinMaxStats, OutputMaps,
    UncertaintyMap,
};

/// How the threshold `T` is applied to the total map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `value >= T · max` of the iteration-0 total map. Later maps are
    /// measured against the initial scale, so resolved regions drop out and
    /// the mask can become empty.
    #[default]
    Initial,
    /// `value >= T · max` of the current total map.
    Relative,
    /// `value >= T` on the total map as is.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationConfig {
    pub iterations: usize,
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub n_initial: usize,
    /// Points acquired per iteration; a quarter of `n_initial` when unset.
    pub n_acquire: Option<usize>,
    pub grid_resolution: usize,
    pub seed: u64,
    pub surrogate: SurrogateConfig,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            threshold: 0.05,
            threshold_mode: ThresholdMode::Initial,
            n_initial: 4000,
            n_acquire: None,
            grid_resolution: 64,
            seed: 0,
            surrogate: SurrogateConfig::default(),
        }
    }
}

impl SeparationConfig {
    /// Defaults for the robot arm: a larger dataset, so fewer epochs give a
    /// similar number of optimizer steps, and four iterations.
    pub fn robot() -> Self {
        let mut cfg = Self {
            iterations: 4,
            n_initial: 20_000,
            ..Self::default()
        };
        cfg.surrogate.train_config_mut().epochs = 60;
        cfg
    }

    pub fn acquire_count(&self) -> usize {
        self.n_acquire.unwrap_or(self.n_initial.div_ceil(4))
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        if self.n_initial == 0 {
            return Err(Error::Config("n_initial must be positive".into()));
        }
        if self.acquire_count() == 0 {
            return Err(Error::Config("n_acquire must be positive".into()));
        }
        if self.grid_resolution < 8 {
            return Err(Error::Config("grid_resolution must be at least 8".into()));
        }
        self.surrogate.validate()
    }

    fn binarize(&self, total: &UncertaintyMap, reference_max: f64) -> BinaryMask {
        match self.threshold_mode {
            ThresholdMode::Initial if reference_max > 0.0 => binarize(&total.scaled(1.0 / reference_max), self.threshold),
            ThresholdMode::Initial | ThresholdMode::Absolute => binarize(total, self.threshold),
            ThresholdMode::Relative => binarize_relative(total, self.threshold),
        }
    }

    /// Surrogate configuration used at `iteration`, with its derived seed.
    pub fn surrogate_for(&self, iteration: usize) -> SurrogateConfig {
        let mut cfg = self.surrogate.clone();
        let train = cfg.train_config_mut();
        train.seed = derive_seed(self.seed, &[TAG_ITERATION, iteration as u64, train.seed]);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dataset_size: usize,
    /// Points added right before this iteration's training.
    pub acquired: usize,
    /// Per output, normalized with the frozen iteration-0 stats.
    pub normalized: Vec<OutputMaps>,
    /// Product over outputs of the halved per-output sums.
    pub total: UncertaintyMap,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The mask driving acquisition for `iteration` was empty.
    EarlyStopped { iteration: usize },
    /// Training diverged at `iteration`; earlier records are kept.
    Aborted { iteration: usize, reason: String },
}

/// Cells of a final mask with their positions on the slice and map values.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedRegion {
    pub mask: BinaryMask,
    pub cells: Vec<(usize, usize)>,
    pub positions: Vec<[f64; 2]>,
    pub values: Vec<f64>,
}

impl SeparatedRegion {
    fn new(mask: BinaryMask, values_from: &UncertaintyMap) -> Self {
        let cells = mask.cells();
        let positions = cells.iter().map(|&(i, j)| mask.grid.center(i, j)).collect();
        let values = cells.iter().map(|&c| values_from.values[c]).collect();
        Self {
            mask,
            cells,
            positions,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub iteration: usize,
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SeparationReport {
    pub problem: Problem,
    pub config: SeparationConfig,
    pub grid: GridSpec,
    pub stats: MinMaxStats,
    /// Maximum of the iteration-0 total map.
    pub reference_max: f64,
    pub dataset: Dataset,
    pub iterations: Vec<IterationRecord>,
    pub status: RunStatus,
    /// Surviving uncertainty: the last total mask, valued by the last total map.
    pub aleatoric: SeparatedRegion,
    /// Resolved uncertainty: first mask XOR last mask, valued by the first
    /// total map.
    pub epistemic: SeparatedRegion,
    /// The most recently trained surrogate.
    pub model: Surrogate,
    pub timings: Vec<PhaseTiming>,
}

impl SeparationReport {
    /// Equality of everything except wall-clock timings.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.problem == other.problem
            && self.config == other.config
            && self.grid == other.grid
            && self.stats == other.stats
            && self.reference_max.to_bits() == other.reference_max.to_bits()
            && self.dataset == other.dataset
            && self.iterations == other.iterations
            && self.status == other.status
            && self.aleatoric == other.aleatoric
            && self.epistemic == other.epistemic
            && self.model == other.model
    }

    pub fn early_stopped(&self) -> bool {
        matches!(self.status, RunStatus::EarlyStopped { .. })
    }

    pub fn aborted(&self) -> bool {
        matches!(self.status, RunStatus::Aborted { .. })
    }

    fn refresh_final(&mut self) -> Result<()> {
        let first = &self.iterations[0];
        let last = self.iterations.last().expect("iteration 0 present");
        self.aleatoric = SeparatedRegion::new(last.mask.clone(), &last.total);
        self.epistemic = SeparatedRegion::new(xor_masks(&last.mask, &first.mask)?, &first.total);
        Ok(())
    }
}

struct Timer(Vec<PhaseTiming>);

impl Timer {
    fn time<T>(&mut self, iteration: usize, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push(PhaseTiming {
            iteration,
            phase: phase.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

fn total_map(normalized: &[OutputMaps]) -> Result<UncertaintyMap> {
    let halves = normalized
        .iter()
        .map(|m| Ok(combine_per_output(&m.epistemic, &m.aleatoric)?.scaled(0.5)))
        .collect::<Result<Vec<_>>>()?;
    combine_across_outputs(&halves)
}

fn record(
    config: &SeparationConfig,
    maps: &[OutputMaps],
    stats: &MinMaxStats,
    reference_max: Option<f64>,
    iteration: usize,
    dataset_size: usize,
    acquired: usize,
) -> Result<IterationRecord> {
    let normalized = normalize_all(maps, stats)?;
    let total = total_map(&normalized)?;
    let mask = config.binarize(&total, reference_max.unwrap_or_else(|| total.max()));
    Ok(IterationRecord {
        iteration,
        dataset_size,
        acquired,
        normalized,
        total,
        mask,
    })
}

fn is_training_failure(e: &Error) -> bool {
    matches!(e, Error::Diverged { .. } | Error::NonFiniteGradient { .. })
}

/// Run the loop on a freshly built initial dataset.
pub fn run_separation(problem: &Problem, config: &SeparationConfig) -> Result<SeparationReport> {
    problem.validate()?;
    config.validate()?;
    let dataset = build_initial_dataset(problem, config.n_initial, config.seed)?;
    run_separation_on(problem, config, dataset)
}

/// Run the loop starting from a caller-provided dataset.
pub fn run_separation_on(problem: &Problem, config: &SeparationConfig, dataset: Dataset) -> Result<SeparationReport> {
    problem.validate()?;
    config.validate()?;
    if dataset.input_dim() != problem.input_dim() || dataset.output_dim() != problem.output_dim() {
        return Err(Error::shape("dataset columns", problem.input_dim(), dataset.input_dim()));
    }
    let grid = GridSpec::for_problem(problem, config.grid_resolution)?;
    let mut timer = Timer(Vec::new());

    let (model, _) = timer.time(0, "train", || Surrogate::train(&dataset, &config.surrogate_for(0)))?;
    let maps = timer.time(0, "maps", || evaluate_maps(&model, problem, &grid))?;
    let stats = fit_minmax(&maps);
    let first = record(config, &maps, &stats, None, 0, dataset.len(), 0)?;

    let mut report = SeparationReport {
        problem: problem.clone(),
        config: config.clone(),
        grid: grid.clone(),
        stats,
        reference_max: first.total.max(),
        dataset,
        aleatoric: SeparatedRegion::new(first.mask.clone(), &first.total),
        epistemic: SeparatedRegion::new(BinaryMask::empty(&grid), &first.total),
        iterations: vec![first],
        status: RunStatus::Completed,
        model,
        timings: Vec::new(),
    };
    advance(&mut report, config.iterations, &mut timer)?;
    report.timings = timer.0;
    Ok(report)
}

/// Continue a finished run for `additional` more iterations. Splitting a run
/// this way gives the same outcome as running all iterations at once.
pub fn resume(report: &SeparationReport, additional: usize) -> Result<SeparationReport> {
    if let RunStatus::Aborted { iteration, reason } = &report.status {
        return Err(Error::State(format!(
            "cannot resume a run aborted at iteration {iteration}: {reason}"
        )));
    }
    let mut next = report.clone();
    if additional == 0 || report.early_stopped() {
        return Ok(next);
    }
    next.config.iterations += additional;
    let mut timer = Timer(std::mem::take(&mut next.timings));
    let target = next.config.iterations;
    advance(&mut next, target, &mut timer)?;
    next.timings = timer.0;
    Ok(next)
}

/// Iterate until the last record has index `target`, an empty mask stops
/// acquisition, or training fails.
fn advance(report: &mut SeparationReport, target: usize, timer: &mut Timer) -> Result<()> {
    let config = report.config.clone();
    let problem = report.problem.clone();
    let n_acquire = config.acquire_count();
    let mut i = report.iterations.len();
    while i <= target {
        let prev_mask = &report.iterations[i - 1].mask;
        let acquire_seed = derive_seed(config.seed, &[TAG_ITERATION, i as u64, TAG_ACQUIRE]);
        let Some(xs) = sample_in_mask(prev_mask, n_acquire, &problem, acquire_seed)? else {
            report.status = RunStatus::EarlyStopped { iteration: i };
            break;
        };
        let label_seed = derive_seed(config.seed, &[TAG_ITERATION, i as u64, TAG_LABEL]);
        let ys = timer.time(i, "label", || nfp_query(&problem, xs.view(), label_seed))?;
        report.dataset.append(xs.view(), ys.view(), i as u32)?;

        let trained = timer.time(i, "train", || Surrogate::train(&report.dataset, &config.surrogate_for(i)));
        let model = match trained {
            Ok((m, _)) => m,
            Err(e) if is_training_failure(&e) => {
                report.status = RunStatus::Aborted {
                    iteration: i,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let maps = timer.time(i, "maps", || evaluate_maps(&model, &problem, &report.grid))?;
        let rec = record(&config, &maps, &report.stats, Some(report.reference_max), i, report.dataset.len(), xs.nrows())?;
        report.iterations.push(rec);
        report.model = model;
        i += 1;
    }
    report.refresh_final()
}

#[derive(Serialize)]
struct Manifest<'a> {
    problem: &'a Problem,
    grid: &'a GridSpec,
}

#[derive(Serialize)]
struct IterationSummary {
    iteration: usize,
    dataset_size: usize,
    acquired: usize,
    mask_cells: usize,
    total_mean: f64,
    total_max: f64,
}

#[derive(Serialize)]
struct FinalSummary {
    aleatoric_cells: usize,
    epistemic_cells: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    status: &'a RunStatus,
    early_stopped: bool,
    iterations: Vec<IterationSummary>,
    #[serde(rename = "final")]
    final_masks: FinalSummary,
    stats: &'a MinMaxStats,
    reference_max: f64,
}

#[derive(Serialize)]
struct Timings<'a> {
    phase: &'a [PhaseTiming],
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

fn write_region_cells(path: &Path, region: &SeparatedRegion) -> Result<()> {
    let mut text = String::from("i,j,a,b,value\n");
    for ((&(i, j), p), v) in region.cells.iter().zip(&region.positions).zip(&region.values) {
        writeln!(text, "{i},{j},{:.16e},{:.16e},{:.16e}", p[0], p[1], v).expect("string write");
    }
    write_text(path, &text)
}

/// Per-iteration map file stem, e.g. `epistemic_y0`.
pub fn map_file_stem(kind: &str, output: usize) -> String {
    format!("{kind}_y{output}")
}

impl SeparationReport {
    /// Write the run directory. Everything except `timing.toml` is a pure
    /// function of the configuration and seed.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("separation.toml"), &to_toml(&self.config)?)?;
        write_text(
            &dir.join("manifest.toml"),
            &to_toml(&Manifest {
                problem: &self.problem,
                grid: &self.grid,
            })?,
        )?;
        self.dataset.write_csv(&dir.join("dataset.csv"))?;
        self.model.save(&dir.join("model.bin"))?;
        for rec in &self.iterations {
            let sub = dir.join(format!("iter_{}", rec.iteration));
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (k, m) in rec.normalized.iter().enumerate() {
                for (name, map) in [("epistemic", &m.epistemic), ("aleatoric", &m.aleatoric)] {
                    let stem = map_file_stem(name, k);
                    map.write_csv(&sub.join(format!("{stem}.csv")))?;
                    map.write_pgm(&sub.join(format!("{stem}.pgm")))?;
                }
            }
            rec.total.write_csv(&sub.join("total.csv"))?;
            rec.total.write_pgm(&sub.join("total.pgm"))?;
            rec.mask.write_pgm(&sub.join("mask.pgm"))?;
        }
        self.aleatoric.mask.write_pgm(&dir.join("aleatoric_mask.pgm"))?;
        self.epistemic.mask.write_pgm(&dir.join("epistemic_mask.pgm"))?;
        write_region_cells(&dir.join("aleatoric_cells.csv"), &self.aleatoric)?;
        write_region_cells(&dir.join("epistemic_cells.csv"), &self.epistemic)?;

        let summary = Summary {
            status: &self.status,
            early_stopped: self.early_stopped(),
            iterations: self
                .iterations
                .iter()
                .map(|r| IterationSummary {
                    iteration: r.iteration,
                    dataset_size: r.dataset_size,
                    acquired: r.acquired,
                    mask_cells: r.mask.count(),
                    total_mean: r.total.mean(),
                    total_max: r.total.max(),
                })
                .collect(),
            final_masks: FinalSummary {
                aleatoric_cells: self.aleatoric.mask.count(),
                epistemic_cells: self.epistemic.mask.count(),
            },
            stats: &self.stats,
            reference_max: self.reference_max,
        };
        write_text(&dir.join("summary.toml"), &to_toml(&summary)?)?;
        write_text(&dir.join("timing.toml"), &to_toml(&Timings { phase: &self.timings })?)
    }
}

/// Problem and grid stored in a run directory.
pub fn read_manifest(dir: &Path) -> Result<(Problem, GridSpec)> {
    #[derive(Deserialize)]
    struct Owned {
        problem: Problem,
        grid: GridSpec,
    }
    let path = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Owned = toml::from_str(&text).map_err(|e| toml_parse_error(&path, &text, &e))?;
    Ok((m.problem, m.grid))
}

/// The parts of a finished run that scoring needs, in memory or read back
/// from a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub problem: Problem,
    pub grid: GridSpec,
    pub reference_max: f64,
    pub initial_maps: Vec<OutputMaps>,
    pub initial_total: UncertaintyMap,
    pub final_total: UncertaintyMap,
    pub aleatoric_mask: BinaryMask,
    pub epistemic_mask: BinaryMask,
}

impl RunArtifacts {
    pub fn from_report(report: &SeparationReport) -> Self {
        let first = &report.iterations[0];
        let last = report.iterations.last().expect("iteration 0 present");
        Self {
            problem: report.problem.clone(),
            grid: report.grid.clone(),
            reference_max: report.reference_max,
            initial_maps: first.normalized.clone(),
            initial_total: first.total.clone(),
            final_total: last.total.clone(),
            aleatoric_mask: report.aleatoric.mask.clone(),
            epistemic_mask: report.epistemic.mask.clone(),
        }
    }

    /// Read a directory written by [`SeparationReport::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct SummaryIn {
            reference_max: f64,
            iterations: Vec<IterationIn>,
        }
        #[derive(Deserialize)]
        struct IterationIn {
            iteration: usize,
        }
        let need = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::State(format!("run directory is missing {}", p.display())))
            }
        };
        need("manifest.toml")?;
        let (problem, grid) = read_manifest(dir)?;
        let summary_path = need("summary.toml")?;
        let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        let summary: SummaryIn = toml::from_str(&text).map_err(|e| toml_parse_error(&summary_path, &text, &e))?;
        let last = summary
            .iterations
            .iter()
            .map(|r| r.iteration)
            .max()
            .ok_or_else(|| Error::State("summary lists no iterations".into()))?;

        let mut initial_maps = Vec::new();
        for k in 0..problem.output_dim() {
            let read = |kind: &str, mk: MapKind| {
                let p = need(&format!("iter_0/{}.csv", map_file_stem(kind, k)))?;
                UncertaintyMap::read_csv(&p, &grid, mk, MapOutput::Index(k))
            };
            initial_maps.push(OutputMaps {
                epistemic: read("epistemic", MapKind::Epistemic)?,
                aleatoric: read("aleatoric", MapKind::Aleatoric)?,
            });
        }
        let total = |i: usize| {
            let p = need(&format!("iter_{i}/total.csv"))?;
            UncertaintyMap::read_csv(&p, &grid, MapKind::Combined, MapOutput::All)
        };
        Ok(Self {
            reference_max: summary.reference_max,
            initial_maps,
            initial_total: total(0)?,
            final_total: total(last)?,
            aleatoric_mask: BinaryMask::read_pgm(&need("aleatoric_mask.pgm")?, &grid)?,
            epistemic_mask: BinaryMask::read_pgm(&need("epistemic_mask.pgm")?, &grid)?,
            problem,
            grid,
        })
    }
}

/// Parse error for a TOML document, with the 1-based line of the offending span.
pub fn toml_parse_error(path: &Path, text: &str, e: &toml::de::Error) -> Error {
    let start = e.span().map(|s| s.start.min(text.len()));
    let mut line = start.map(|s| text[..s].matches('\n').count() as u64 + 1).unwrap_or(0);
    // errors inside a buffered table point at its header; find the key itself
    if let (Some(start), Some(key)) = (start, unknown_field(e.message())) {
        let found = text[start..].lines().position(|l| {
            l.trim_start()
                .strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        });
        if let Some(offset) = found {
            line += offset as u64;
        }
    }
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.message().to_string(),
    }
}

fn unknown_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("unknown field `")?;
    rest.split('`').next()
}
