//! Uncertainty maps on a regular grid over a 2-D input slice, and the map
//! algebra the separation loop is built from.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Zip};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{fmt_f64, Problem};
use crate::seed::rng_from_seed;
use crate::surrogates::Surrogate;

/// Regular grid over input dimensions `dims`; other inputs are held at
/// `fixed`. Cell `(i, j)` spans step `i` along `dims[0]` and `j` along
/// `dims[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: [usize; 2],
    pub low: [f64; 2],
    pub high: [f64; 2],
    pub resolution: [usize; 2],
    pub fixed: Vec<f64>,
}

impl GridSpec {
    /// Grid over the problem's declared slice, spanning the full domain.
    pub fn for_problem(problem: &Problem, resolution: usize) -> Result<Self> {
        let [a, b] = problem.slice.dims;
        let grid = Self {
            dims: [a, b],
            low: [problem.domain_low[a], problem.domain_low[b]],
            high: [problem.domain_high[a], problem.domain_high[b]],
            resolution: [resolution, resolution],
            fixed: problem.slice.fixed.clone(),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&r| r < 8) {
            return Err(Error::Config(format!(
                "grid resolution must be at least 8 per axis, got {:?}",
                self.resolution
            )));
        }
        if !(self.low[0] < self.high[0] && self.low[1] < self.high[1]) {
            return Err(Error::Config("grid needs low < high on both axes".into()));
        }
        if self.dims[0] == self.dims[1] || self.dims.iter().any(|&d| d >= self.fixed.len()) {
            return Err(Error::Config(format!("invalid grid dims {:?}", self.dims)));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.resolution[0], self.resolution[1])
    }

    pub fn n_cells(&self) -> usize {
        self.resolution[0] * self.resolution[1]
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.high[axis] - self.low[axis]) / self.resolution[axis] as f64
    }

    /// Slice coordinates of a cell center.
    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.low[0] + (i as f64 + 0.5) * self.step(0),
            self.low[1] + (j as f64 + 0.5) * self.step(1),
        ]
    }

    /// Full input vector at a cell center.
    pub fn input_at(&self, i: usize, j: usize) -> Vec<f64> {
        let c = self.center(i, j);
        let mut x = self.fixed.clone();
        x[self.dims[0]] = c[0];
        x[self.dims[1]] = c[1];
        x
    }

    pub fn check_within(&self, problem: &Problem) -> Result<()> {
        self.validate()?;
        if self.fixed.len() != problem.input_dim() {
            return Err(Error::Domain(format!(
                "grid has {} input dims, problem has {}",
                self.fixed.len(),
                problem.input_dim()
            )));
        }
        let mut corner_lo = self.fixed.clone();
        let mut corner_hi = self.fixed.clone();
        for axis in 0..2 {
            corner_lo[self.dims[axis]] = self.low[axis];
            corner_hi[self.dims[axis]] = self.high[axis];
        }
        if !problem.in_domain(&corner_lo) || !problem.in_domain(&corner_hi) {
            return Err(Error::Domain("grid leaves the problem's input domain".into()));
        }
        Ok(())
    }

    pub(crate) fn same_as(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::Config("maps are defined on different grids".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Epistemic,
    Aleatoric,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapOutput {
    Index(usize),
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub grid: GridSpec,
    pub values: Array2<f64>,
    pub kind: MapKind,
    pub output: MapOutput,
}

impl UncertaintyMap {
    pub fn new(grid: GridSpec, values: Array2<f64>, kind: MapKind, output: MapOutput) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::shape("map rows", grid.shape().0, values.nrows()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("map values must be finite and non-negative".into()));
        }
        Ok(Self {
            grid,
            values,
            kind,
            output,
        })
    }

    pub fn constant(grid: &GridSpec, value: f64, kind: MapKind, output: MapOutput) -> Self {
        Self {
            values: Array2::from_elem(grid.shape(), value),
            grid: grid.clone(),
            kind,
            output,
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.mapv(|v| v * factor),
            ..self.clone()
        }
    }

    /// Row-major CSV, row `i` = step along `dims[0]`, 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, grid: &GridSpec, kind: MapKind, output: MapOutput) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (n0, n1) = grid.shape();
        let mut values = Array2::zeros((n0, n1));
        let lines: Vec<&str> = text.lines().collect();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line as u64,
            message,
        };
        if lines.len() != n0 {
            return Err(parse_err(lines.len(), format!("expected {n0} rows")));
        }
        for (i, line) in lines.iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n1 {
                return Err(parse_err(i + 1, format!("expected {n1} columns, got {}", fields.len())));
            }
            for (j, f) in fields.iter().enumerate() {
                values[[i, j]] = f
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(i + 1, format!("not a number: {f:?}")))?;
            }
        }
        Self::new(grid.clone(), values, kind, output)
    }

    /// 8-bit text PGM; value 0 → 0 and 1 → 255, clamped. The image x axis is
    /// `dims[0]`, the y axis `dims[1]` pointing up.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, &self.values.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    }
}

fn write_pgm(path: &Path, levels: &Array2<u8>) -> Result<()> {
    let (w, h) = levels.dim();
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(out, "P2\n{w} {h}\n255").map_err(io)?;
    for j in (0..h).rev() {
        let row: Vec<String> = (0..w).map(|i| levels[[i, j]].to_string()).collect();
        writeln!(out, "{}", row.join(" ")).map_err(io)?;
    }
    std::fs::write(path, out).map_err(io)
}

fn read_pgm(path: &Path) -> Result<Array2<u8>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.to_owned(),
    };
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(err("not a P2 PGM"));
    }
    let mut num = || -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| err("truncated PGM"))?
            .parse()
            .map_err(|_| err("bad PGM number"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval == 0 || maxval > 255 {
        return Err(err("unsupported PGM maxval"));
    }
    let mut levels = Array2::zeros((w, h));
    for j in (0..h).rev() {
        for i in 0..w {
            levels[[i, j]] = num()? as u8;
        }
    }
    Ok(levels)
}

/// Epistemic and aleatoric maps of one output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMaps {
    pub epistemic: UncertaintyMap,
    pub aleatoric: UncertaintyMap,
}

/// Sigma maps at every cell center, per output.
pub fn evaluate_maps(model: &Surrogate, problem: &Problem, grid: &GridSpec) -> Result<Vec<OutputMaps>> {
    grid.check_within(problem)?;
    if model.input_dim() != problem.input_dim() {
        return Err(Error::shape("surrogate input", problem.input_dim(), model.input_dim()));
    }
    let (n0, n1) = grid.shape();
    let o = model.output_dim();
    // one grid row per task; each task is a fixed batch so results do not
    // depend on scheduling
    let rows: Vec<Vec<Vec<(f64, f64)>>> = (0..n0)
        .into_par_iter()
        .map(|i| {
            let xs: Vec<f64> = (0..n1).flat_map(|j| grid.input_at(i, j)).collect();
            let xs = Array2::from_shape_vec((n1, grid.fixed.len()), xs).expect("sized");
            let est = model.predict_batch(xs.view())?;
            Ok(est
                .into_iter()
                .map(|per_out| per_out.iter().map(|e| (e.sigma_epistemic, e.sigma_aleatoric)).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..o)
        .map(|k| {
            let epi = Array2::from_shape_fn((n0, n1), |(i, j)| rows[i][j][k].0);
            let ale = Array2::from_shape_fn((n0, n1), |(i, j)| rows[i][j][k].1);
            OutputMaps {
                epistemic: UncertaintyMap {
                    grid: grid.clone(),
                    values: epi,
                    kind: MapKind::Epistemic,
                    output: MapOutput::Index(k),
                },
                aleatoric: UncertaintyMap {
                    grid: grid.clone(),
                    values: ale,
                    kind: MapKind::Aleatoric,
                    output: MapOutput::Index(k),
                },
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn of(map: &UncertaintyMap) -> Self {
        Self {
            min: map.min(),
            max: map.max(),
        }
    }
}

/// Per-output scaling ranges captured once from the first maps of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub epistemic: Vec<MinMax>,
    pub aleatoric: Vec<MinMax>,
}

pub fn fit_minmax(maps: &[OutputMaps]) -> MinMaxStats {
    MinMaxStats {
        epistemic: maps.iter().map(|m| MinMax::of(&m.epistemic)).collect(),
        aleatoric: maps.iter().map(|m| MinMax::of(&m.aleatoric)).collect(),
    }
}

/// `(v - min) / (max - min)` clamped to [0, 1]; a degenerate range maps to 0.
pub fn normalize(map: &UncertaintyMap, range: MinMax) -> UncertaintyMap {
    let span = range.max - range.min;
    let values = if span > 0.0 {
        map.values.mapv(|v| ((v - range.min) / span).clamp(0.0, 1.0))
    } else {
        Array2::zeros(map.values.raw_dim())
    };
    UncertaintyMap {
        values,
        ..map.clone()
    }
}

/// Normalize both maps of every output with frozen stats.
pub fn normalize_all(maps: &[OutputMaps], stats: &MinMaxStats) -> Result<Vec<OutputMaps>> {
    if maps.len() != stats.epistemic.len() || maps.len() != stats.aleatoric.len() {
        return Err(Error::shape("min-max stats outputs", stats.epistemic.len(), maps.len()));
    }
    Ok(maps
        .iter()
        .enumerate()
        .map(|(k, m)| OutputMaps {
            epistemic: normalize(&m.epistemic, stats.epistemic[k]),
            aleatoric: normalize(&m.aleatoric, stats.aleatoric[k]),
        })
        .collect())
}

/// Cell-wise sum of normalized epistemic and aleatoric maps, in [0, 2].
pub fn combine_per_output(epistemic: &UncertaintyMap, aleatoric: &UncertaintyMap) -> Result<UncertaintyMap> {
    epistemic.grid.same_as(&aleatoric.grid)?;
    Ok(UncertaintyMap {
        grid: epistemic.grid.clone(),
        values: &epistemic.values + &aleatoric.values,
        kind: MapKind::Combined,
        output: epistemic.output,
    })
}

/// Cell-wise product over outputs, starting from the all-ones map.
pub fn combine_across_outputs(maps: &[UncertaintyMap]) -> Result<UncertaintyMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("no maps to combine".into()))?;
    let mut values = Array2::from_elem(first.grid.shape(), 1.0);
    for m in maps {
        first.grid.same_as(&m.grid)?;
        values *= &m.values;
    }
    Ok(UncertaintyMap {
        grid: first.grid.clone(),
        values,
        kind: MapKind::Combined,
        output: MapOutput::All,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: GridSpec,
    pub bits: Array2<bool>,
}

impl BinaryMask {
    pub fn empty(grid: &GridSpec) -> Self {
        Self {
            grid: grid.clone(),
            bits: Array2::from_elem(grid.shape(), false),
        }
    }

    pub fn full(grid: &GridSpec) -> Self {
        Self {
            grid: grid.clone(),
            bits: Array2::from_elem(grid.shape(), true),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(other.bits.iter()).all(|(&a, &b)| !a || b)
    }

    /// True cells as `(i, j)` indices, row-major.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.bits
            .indexed_iter()
            .filter(|(_, &b)| b)
            .map(|(ij, _)| ij)
            .collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, &self.bits.mapv(|b| if b { 255 } else { 0 }))
    }

    /// Mask from a PGM; any non-zero level is true.
    pub fn read_pgm(path: &Path, grid: &GridSpec) -> Result<Self> {
        let levels = read_pgm(path)?;
        if levels.dim() != grid.shape() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 2,
                message: format!("mask is {:?}, grid is {:?}", levels.dim(), grid.shape()),
            });
        }
        Ok(Self {
            grid: grid.clone(),
            bits: levels.mapv(|v| v > 0),
        })
    }
}

/// `value >= threshold`, cell-wise, on the map's own [0, 1] scale.
pub fn binarize(map: &UncertaintyMap, threshold: f64) -> BinaryMask {
    BinaryMask {
        grid: map.grid.clone(),
        bits: map.values.mapv(|v| v >= threshold),
    }
}

/// Threshold relative to the map's maximum: `value >= threshold · max`.
/// An all-zero map gives an all-true mask only when `threshold <= 0`.
pub fn binarize_relative(map: &UncertaintyMap, threshold: f64) -> BinaryMask {
    let max = map.max();
    if max > 0.0 {
        binarize(&map.scaled(1.0 / max), threshold)
    } else {
        binarize(map, threshold)
    }
}

pub fn xor_masks(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.grid.same_as(&b.grid)?;
    let mut bits = a.bits.clone();
    Zip::from(&mut bits).and(&b.bits).for_each(|x, &y| *x ^= y);
    Ok(BinaryMask {
        grid: a.grid.clone(),
        bits,
    })
}

/// `n_new` inputs drawn uniformly over the union of true cells; inputs
/// outside the slice are drawn uniformly over their full domain range.
/// Returns `None` for an empty mask.
pub fn sample_in_mask(mask: &BinaryMask, n_new: usize, problem: &Problem, seed: u64) -> Result<Option<Array2<f64>>> {
    if n_new == 0 {
        return Err(Error::Config("n_new must be positive".into()));
    }
    mask.grid.check_within(problem)?;
    let cells = mask.cells();
    if cells.is_empty() {
        return Ok(None);
    }
    let grid = &mask.grid;
    let d = problem.input_dim();
    let mut rng = rng_from_seed(seed);
    let mut out = Array2::zeros((n_new, d));
    for mut row in out.rows_mut() {
        // equal-area cells: uniform cell choice is area-proportional
        let (i, j) = cells[rng.random_range(0..cells.len())];
        for k in 0..d {
            row[k] = rng.random_range(problem.domain_low[k]..=problem.domain_high[k]);
        }
        for (axis, idx) in [(0, i), (1, j)] {
            let lo = grid.low[axis] + idx as f64 * grid.step(axis);
            let hi = (lo + grid.step(axis)).min(grid.high[axis]);
            row[grid.dims[axis]] = rng.random_range(lo..hi);
        }
    }
    Ok(Some(out))
}
