//! Forward processes, benchmark problems with ground-truth regions, and the
//! growing dataset the acquisition loop works on.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed, Rng, TAG_DATASET, TAG_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionPurpose {
    DataGap,
    Noise,
}

/// Axis-aligned box in input space with a ground-truth role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub purpose: RegionPurpose,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl RegionSpec {
    pub fn data_gap(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        let r = Self {
            low,
            high,
            purpose: RegionPurpose::DataGap,
            noise_sigma: 0.0,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn noise(low: Vec<f64>, high: Vec<f64>, sigma: f64) -> Result<Self> {
        let r = Self {
            low,
            high,
            purpose: RegionPurpose::Noise,
            noise_sigma: sigma,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.low.len() != self.high.len() || self.low.is_empty() {
            return Err(Error::Config("region bounds need matching, non-empty low/high".into()));
        }
        if self.low.iter().zip(&self.high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config(format!(
                "region needs low < high per dimension: {:?} / {:?}",
                self.low, self.high
            )));
        }
        let noisy = self.noise_sigma > 0.0;
        match self.purpose {
            RegionPurpose::Noise if !noisy || !self.noise_sigma.is_finite() => Err(Error::Config(
                "noise regions need a positive finite noise_sigma".into(),
            )),
            RegionPurpose::DataGap if self.noise_sigma != 0.0 => {
                Err(Error::Config("data_gap regions must have noise_sigma = 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    /// Closed-box membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(&v, (&l, &h))| v >= l && v <= h)
    }
}

/// The exact forward map of a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForwardProcess {
    Toy,
    Robot { segment_lengths: [f64; 4] },
}

impl ForwardProcess {
    pub fn input_dim(&self) -> usize {
        match self {
            ForwardProcess::Toy => 2,
            ForwardProcess::Robot { .. } => 5,
        }
    }

    pub fn output_dim(&self) -> usize {
        2
    }

    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ForwardProcess::Toy => {
                let (a, b) = toy_nfp(x[0], x[1]);
                vec![a, b]
            }
            ForwardProcess::Robot { segment_lengths } => {
                let (a, b) = robot_fk_with(segment_lengths, x);
                vec![a, b]
            }
        }
    }
}

/// y1 = sin r, y2 = x1 · cos r · cos x2, with r = |x|.
pub fn toy_nfp(x1: f64, x2: f64) -> (f64, f64) {
    let r = x1.hypot(x2);
    (r.sin(), x1 * r.cos() * x2.cos())
}

pub const ROBOT_SEGMENTS: [f64; 4] = [0.5, 0.5, 1.0, 1.0];

/// Tip of a planar arm whose base slides on a vertical wall at `(0, x[0])`;
/// `x[1..5]` are relative joint angles.
pub fn robot_fk(x: &[f64; 5]) -> (f64, f64) {
    robot_fk_with(&ROBOT_SEGMENTS, x)
}

fn robot_fk_with(lengths: &[f64; 4], x: &[f64]) -> (f64, f64) {
    let mut theta = 0.0;
    let mut tip = (0.0, x[0]);
    for (k, &len) in lengths.iter().enumerate() {
        theta += x[k + 1];
        tip.0 += len * theta.cos();
        tip.1 += len * theta.sin();
    }
    tip
}

/// The two input dimensions a map is drawn over; the other dimensions are
/// held at `fixed` (entries for the slice dimensions are ignored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub dims: [usize; 2],
    pub fixed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub name: String,
    pub domain_low: Vec<f64>,
    pub domain_high: Vec<f64>,
    pub regions: Vec<RegionSpec>,
    pub nfp: ForwardProcess,
    pub slice: SliceSpec,
}

impl Problem {
    pub fn input_dim(&self) -> usize {
        self.nfp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.nfp.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        if self.domain_low.len() != d || self.domain_high.len() != d {
            return Err(Error::Config(format!("domain must have {d} dimensions")));
        }
        if self
            .domain_low
            .iter()
            .zip(&self.domain_high)
            .any(|(l, h)| !(l < h))
        {
            return Err(Error::Config("domain needs low < high per dimension".into()));
        }
        for r in &self.regions {
            r.validate()?;
            if r.dim() != d {
                return Err(Error::Config(format!("region has {} dims, problem has {d}", r.dim())));
            }
            let inside = (0..d)
                .all(|k| r.low[k] >= self.domain_low[k] && r.high[k] <= self.domain_high[k]);
            if !inside {
                return Err(Error::Config(format!(
                    "region {:?}..{:?} leaves the input domain",
                    r.low, r.high
                )));
            }
        }
        let [a, b] = self.slice.dims;
        if a == b || a >= d || b >= d {
            return Err(Error::Config(format!("invalid slice dims {:?}", self.slice.dims)));
        }
        if self.slice.fixed.len() != d {
            return Err(Error::Config(format!("slice fixed values need {d} entries")));
        }
        Ok(())
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.len() == self.input_dim()
            && x.iter()
                .zip(self.domain_low.iter().zip(&self.domain_high))
                .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    pub fn in_gap(&self, x: &[f64]) -> bool {
        self.regions
            .iter()
            .any(|r| r.purpose == RegionPurpose::DataGap && r.contains(x))
    }

    /// Noise level at `x`: the first noise region containing it, else 0.
    pub fn noise_sigma_at(&self, x: &[f64]) -> f64 {
        self.regions
            .iter()
            .find(|r| r.purpose == RegionPurpose::Noise && r.contains(x))
            .map_or(0.0, |r| r.noise_sigma)
    }

    pub fn regions_of(&self, purpose: RegionPurpose) -> impl Iterator<Item = &RegionSpec> {
        self.regions.iter().filter(move |r| r.purpose == purpose)
    }

    /// Same problem with a replaced region list.
    pub fn with_regions(mut self, regions: Vec<RegionSpec>) -> Result<Self> {
        self.regions = regions;
        self.validate()?;
        Ok(self)
    }

    fn label(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let mut y = self.nfp.evaluate(x);
        let sigma = self.noise_sigma_at(x);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("validated sigma");
            for v in &mut y {
                *v += noise.sample(rng);
            }
        }
        y
    }
}

/// Trigonometric two-output toy on [-5, 5]² with two data gaps on top and
/// two N(0, 0.3²) noise patches at the bottom.
pub fn toy_problem() -> Problem {
    let b = |lo: [f64; 2], hi: [f64; 2]| (lo.to_vec(), hi.to_vec());
    let (g1, g2) = (b([-3.5, 1.5], [-1.5, 3.5]), b([1.5, 1.5], [3.5, 3.5]));
    let (n1, n2) = (b([-3.5, -3.5], [-1.5, -1.5]), b([1.5, -3.5], [3.5, -1.5]));
    Problem {
        name: "toy".into(),
        domain_low: vec![-5.0, -5.0],
        domain_high: vec![5.0, 5.0],
        regions: vec![
            RegionSpec::data_gap(g1.0, g1.1).unwrap(),
            RegionSpec::data_gap(g2.0, g2.1).unwrap(),
            RegionSpec::noise(n1.0, n1.1, 0.3).unwrap(),
            RegionSpec::noise(n2.0, n2.1, 0.3).unwrap(),
        ],
        nfp: ForwardProcess::Toy,
        slice: SliceSpec {
            dims: [0, 1],
            fixed: vec![0.0, 0.0],
        },
    }
}

/// Five-input planar arm (wall base + four joints) with joint 3 (`x[3]`)
/// excluded from the data over [π/4, 3π/4]. No injected noise.
pub fn robot_problem() -> Problem {
    let low = vec![-1.0, -PI, -PI, -PI, -PI];
    let high = vec![1.0, PI, PI, PI, PI];
    let mut gap_low = low.clone();
    let mut gap_high = high.clone();
    gap_low[3] = PI / 4.0;
    gap_high[3] = 3.0 * PI / 4.0;
    Problem {
        name: "robot".into(),
        domain_low: low,
        domain_high: high,
        regions: vec![RegionSpec::data_gap(gap_low, gap_high).unwrap()],
        nfp: ForwardProcess::Robot {
            segment_lengths: ROBOT_SEGMENTS,
        },
        slice: SliceSpec {
            dims: [2, 3],
            fixed: vec![0.0; 5],
        },
    }
}

/// Inputs with targets and the acquisition round each row arrived in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    targets: Array2<f64>,
    rounds: Vec<u32>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>, rounds: Vec<u32>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::shape("dataset target rows", inputs.nrows(), targets.nrows()));
        }
        if rounds.len() != inputs.nrows() {
            return Err(Error::shape("dataset round tags", inputs.nrows(), rounds.len()));
        }
        if !inputs.iter().chain(targets.iter()).all(|v| v.is_finite()) {
            return Err(Error::Config("dataset values must be finite".into()));
        }
        Ok(Self {
            inputs,
            targets,
            rounds,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn targets(&self) -> ArrayView2<'_, f64> {
        self.targets.view()
    }

    pub fn rounds(&self) -> &[u32] {
        &self.rounds
    }

    pub fn round_count(&self, round: u32) -> usize {
        self.rounds.iter().filter(|&&r| r == round).count()
    }

    pub fn append(&mut self, inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, round: u32) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape("appended inputs", self.input_dim(), inputs.ncols()));
        }
        if targets.ncols() != self.output_dim() {
            return Err(Error::shape("appended targets", self.output_dim(), targets.ncols()));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::shape("appended rows", inputs.nrows(), targets.nrows()));
        }
        if !inputs.iter().chain(targets.iter()).all(|v| v.is_finite()) {
            return Err(Error::Config("appended values must be finite".into()));
        }
        let stack = |a: &Array2<f64>, b: ArrayView2<'_, f64>| {
            ndarray::concatenate(ndarray::Axis(0), &[a.view(), b]).expect("matching columns")
        };
        self.inputs = stack(&self.inputs, inputs);
        self.targets = stack(&self.targets, targets);
        self.rounds.extend(std::iter::repeat_n(round, inputs.nrows()));
        Ok(())
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let pick = |m: &Array2<f64>| {
            let mut out = Array2::zeros((rows.len(), m.ncols()));
            for (r, &i) in rows.iter().enumerate() {
                out.row_mut(r).assign(&m.row(i));
            }
            out
        };
        (pick(&self.inputs), pick(&self.targets))
    }

    /// CSV with header `x0,..,y0,..,round` and 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = (0..self.input_dim()).map(|k| format!("x{k}")).collect();
        header.extend((0..self.output_dim()).map(|k| format!("y{k}")));
        header.push("round".into());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self
                .inputs
                .row(i)
                .iter()
                .chain(self.targets.row(i).iter())
                .map(|v| fmt_f64(*v))
                .collect();
            rec.push(self.rounds[i].to_string());
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
        let parse_err = |line: u64, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let n_x = header.iter().filter(|h| h.starts_with('x')).count();
        let n_y = header.iter().filter(|h| h.starts_with('y')).count();
        let expected: Vec<String> = (0..n_x)
            .map(|k| format!("x{k}"))
            .chain((0..n_y).map(|k| format!("y{k}")))
            .chain(std::iter::once("round".to_owned()))
            .collect();
        if n_x == 0 || n_y == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(parse_err(1, format!("expected header {}", expected.join(","))));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut rounds = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            for (k, field) in rec.iter().enumerate() {
                if k < n_x + n_y {
                    let v: f64 = field
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(line, format!("column {k}: not a number: {field:?}")))?;
                    if k < n_x {
                        xs.push(v);
                    } else {
                        ys.push(v);
                    }
                } else {
                    rounds.push(field.trim().parse::<u32>().map_err(|_| {
                        parse_err(line, format!("round tag not a non-negative integer: {field:?}"))
                    })?);
                }
            }
        }
        let n = rounds.len();
        let inputs = Array2::from_shape_vec((n, n_x), xs).expect("row-major");
        let targets = Array2::from_shape_vec((n, n_y), ys).expect("row-major");
        Self::new(inputs, targets, rounds)
    }
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Uniform design over the input domain with gap regions rejected; labels
/// follow the same rule as [`nfp_query`].
pub fn build_initial_dataset(problem: &Problem, n_points: usize, seed: u64) -> Result<Dataset> {
    problem.validate()?;
    if n_points == 0 {
        return Err(Error::Config("n_points must be positive".into()));
    }
    let d = problem.input_dim();
    let mut rng = rng_from_seed(derive_seed(seed, &[TAG_DATASET]));
    let mut inputs = Array2::zeros((n_points, d));
    let max_attempts = 100 * n_points + 1000;
    let mut attempts = 0usize;
    let mut x = vec![0.0; d];
    for i in 0..n_points {
        loop {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Infeasible(format!(
                    "more than 99% of {attempts} uniform draws fell inside data gaps"
                )));
            }
            for k in 0..d {
                x[k] = rng.random_range(problem.domain_low[k]..=problem.domain_high[k]);
            }
            if !problem.in_gap(&x) {
                break;
            }
        }
        inputs.row_mut(i).assign(&ndarray::ArrayView1::from(&x));
    }
    let targets = label_rows(problem, inputs.view(), derive_seed(seed, &[TAG_DATASET]));
    Dataset::new(inputs, targets, vec![0; n_points])
}

/// Label `inputs` with the forward process, adding noise inside noise
/// regions. Row `k` draws its noise from a stream keyed on `(seed, k)`, so a
/// batch gives the same labels as per-row calls with the same keys.
pub fn nfp_query(problem: &Problem, inputs: ArrayView2<'_, f64>, seed: u64) -> Result<Array2<f64>> {
    if inputs.ncols() != problem.input_dim() {
        return Err(Error::shape("query inputs", problem.input_dim(), inputs.ncols()));
    }
    for (i, row) in inputs.rows().into_iter().enumerate() {
        let x = row.to_vec();
        if !problem.in_domain(&x) {
            return Err(Error::Domain(format!("query row {i} {x:?} lies outside the input domain")));
        }
    }
    Ok(label_rows(problem, inputs, seed))
}

/// Label a single point with an explicit per-point seed.
pub fn nfp_query_point(problem: &Problem, x: &[f64], point_seed: u64) -> Result<Vec<f64>> {
    if !problem.in_domain(x) {
        return Err(Error::Domain(format!("query point {x:?} lies outside the input domain")));
    }
    Ok(problem.label(x, &mut rng_from_seed(point_seed)))
}

/// Seed used for row `k` of a query made with `seed`.
pub fn query_point_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, &[TAG_LABEL, k as u64])
}

fn label_rows(problem: &Problem, inputs: ArrayView2<'_, f64>, seed: u64) -> Array2<f64> {
    let o = problem.output_dim();
    let mut out = Array2::zeros((inputs.nrows(), o));
    for (k, row) in inputs.rows().into_iter().enumerate() {
        let x = row.to_vec();
        let y = problem.label(&x, &mut rng_from_seed(query_point_seed(seed, k)));
        out.slice_mut(s![k, ..]).assign(&ndarray::ArrayView1::from(&y));
    }
    out
}
