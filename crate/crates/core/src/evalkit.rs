//! Scores for uncertainty maps and masks against ground-truth regions, plus
//! quantile-head diagnostics.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{RegionPurpose, RegionSpec};
use crate::separation::RunArtifacts;
use crate::surrogates::QuantileSurrogate;
use crate::umap::{BinaryMask, GridSpec, MapKind, MapOutput, OutputMaps, UncertaintyMap};

/// Cells whose centers fall inside `region`. Non-slice inputs are taken at
/// the grid's fixed values, so a region that misses the slice is empty.
pub fn region_to_mask(region: &RegionSpec, grid: &GridSpec) -> BinaryMask {
    let (n0, n1) = grid.shape();
    if region.dim() != grid.fixed.len() {
        return BinaryMask::empty(grid);
    }
    BinaryMask {
        grid: grid.clone(),
        bits: Array2::from_shape_fn((n0, n1), |(i, j)| region.contains(&grid.input_at(i, j))),
    }
}

fn union_mask(regions: &[RegionSpec], grid: &GridSpec) -> BinaryMask {
    let mut acc = BinaryMask::empty(grid);
    for r in regions {
        let m = region_to_mask(r, grid);
        acc.bits.zip_mut_with(&m.bits, |a, &b| *a |= b);
    }
    acc
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::Config("masks are defined on different grids".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(b.bits.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// 8-connected components of `mask` that touch `region`, merged into one mask.
pub fn components_touching(mask: &BinaryMask, region: &BinaryMask) -> BinaryMask {
    let (n0, n1) = mask.grid.shape();
    let mut keep = Array2::from_elem((n0, n1), false);
    let mut stack: Vec<(usize, usize)> = mask
        .bits
        .indexed_iter()
        .filter(|&(ij, &b)| b && region.bits[ij])
        .map(|(ij, _)| ij)
        .collect();
    for &c in &stack {
        keep[c] = true;
    }
    while let Some((i, j)) = stack.pop() {
        for a in i.saturating_sub(1)..=(i + 1).min(n0 - 1) {
            for b in j.saturating_sub(1)..=(j + 1).min(n1 - 1) {
                if mask.bits[[a, b]] && !keep[[a, b]] {
                    keep[[a, b]] = true;
                    stack.push((a, b));
                }
            }
        }
    }
    BinaryMask {
        grid: mask.grid.clone(),
        bits: keep,
    }
}

/// IoU of a region against only those mask components that touch it, so
/// detections elsewhere (other regions, stray blobs) do not count against
/// this region. Halos attached to the region still do.
pub fn matched_iou(mask: &BinaryMask, region: &BinaryMask) -> Result<f64> {
    if mask.grid != region.grid {
        return Err(Error::Config("masks are defined on different grids".into()));
    }
    iou(&components_touching(mask, region), region)
}

/// Cells outside every region, shrunk by one cell (8-neighbourhood) away
/// from region boundaries.
pub fn background_mask(all_regions: &[RegionSpec], grid: &GridSpec) -> BinaryMask {
    let occupied = union_mask(all_regions, grid);
    let (n0, n1) = grid.shape();
    let near_region = |i: usize, j: usize| {
        (i.saturating_sub(1)..=(i + 1).min(n0 - 1))
            .any(|a| (j.saturating_sub(1)..=(j + 1).min(n1 - 1)).any(|b| occupied.bits[[a, b]]))
    };
    BinaryMask {
        grid: grid.clone(),
        bits: Array2::from_shape_fn((n0, n1), |(i, j)| !near_region(i, j)),
    }
}

/// Mean of the masked cells, accumulated as offsets from the map's minimum
/// so a constant map yields its value exactly.
fn masked_mean(map: &UncertaintyMap, mask: &BinaryMask) -> Option<f64> {
    let base = map.min();
    let (sum, n) = map
        .values
        .iter()
        .zip(mask.bits.iter())
        .filter(|(_, &b)| b)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + (v - base), n + 1));
    (n > 0).then(|| base + sum / n as f64)
}

fn ratio(inside: f64, background: f64) -> f64 {
    if background > 0.0 {
        inside / background
    } else if inside > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Mean of `map` inside `regions` over its mean on the eroded background of
/// `all_regions`. Values well above 1 mean the map lights up where the
/// regions are.
pub fn leakage_score(map: &UncertaintyMap, regions: &[RegionSpec], all_regions: &[RegionSpec]) -> Result<f64> {
    let inside = union_mask(regions, &map.grid);
    let background = background_mask(all_regions, &map.grid);
    let mean_in = masked_mean(map, &inside)
        .ok_or_else(|| Error::Config("regions do not intersect the map's slice".into()))?;
    let mean_bg = masked_mean(map, &background)
        .ok_or_else(|| Error::Config("no background cells left outside the regions".into()))?;
    Ok(ratio(mean_in, mean_bg))
}

/// Agreement of one ground-truth region with a map and a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub iou: f64,
    pub matched_iou: f64,
    pub mean_inside: f64,
    pub mean_background: f64,
    pub contrast: f64,
}

pub fn score_region(
    map: &UncertaintyMap,
    mask: &BinaryMask,
    region: &RegionSpec,
    all_regions: &[RegionSpec],
) -> Result<RegionScore> {
    let region_mask = region_to_mask(region, &map.grid);
    let background = background_mask(all_regions, &map.grid);
    let mean_inside = masked_mean(map, &region_mask)
        .ok_or_else(|| Error::Config("region does not intersect the map's slice".into()))?;
    let mean_background = masked_mean(map, &background)
        .ok_or_else(|| Error::Config("no background cells left outside the regions".into()))?;
    Ok(RegionScore {
        iou: iou(mask, &region_mask)?,
        matched_iou: matched_iou(mask, &region_mask)?,
        mean_inside,
        mean_background,
        contrast: ratio(mean_inside, mean_background),
    })
}

/// Which quantile head of an E-QR member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Lower,
    Median,
    Upper,
}

impl Head {
    fn index(self) -> usize {
        match self {
            Head::Lower => 0,
            Head::Median => 1,
            Head::Upper => 2,
        }
    }
}

/// Per output, the fraction of test targets at or below the
/// ensemble-averaged `head` prediction.
pub fn coverage_calibration(
    model: &QuantileSurrogate,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    head: Head,
) -> Result<Vec<f64>> {
    if inputs.nrows() != targets.nrows() {
        return Err(Error::shape("test targets", inputs.nrows(), targets.nrows()));
    }
    if inputs.nrows() == 0 {
        return Err(Error::Config("coverage needs a non-empty test set".into()));
    }
    let o = model.scaler().output_dim();
    if targets.ncols() != o {
        return Err(Error::shape("test target columns", o, targets.ncols()));
    }
    let heads = model.member_heads(inputs)?;
    let n_members = heads.len() as f64;
    let k = head.index();
    Ok((0..o)
        .map(|j| {
            let covered = (0..inputs.nrows())
                .filter(|&i| {
                    let pred = heads.iter().map(|m| m[i][j][k]).sum::<f64>() / n_members;
                    targets[[i, j]] <= pred
                })
                .count();
            covered as f64 / inputs.nrows() as f64
        })
        .collect())
}

/// Fraction of `(cell, member, output)` triples whose lower head exceeds
/// the upper head.
pub fn crossing_rate(model: &QuantileSurrogate, grid: &GridSpec) -> Result<f64> {
    let (n0, n1) = grid.shape();
    let xs: Vec<f64> = (0..n0)
        .flat_map(|i| (0..n1).flat_map(move |j| grid.input_at(i, j)))
        .collect();
    let xs = Array2::from_shape_vec((n0 * n1, grid.fixed.len()), xs).expect("sized");
    let heads = model.member_heads(xs.view())?;
    let mut crossed = 0usize;
    let mut total = 0usize;
    for member in &heads {
        for row in member {
            for h in row {
                crossed += (h[0] > h[2]) as usize;
                total += 1;
            }
        }
    }
    Ok(crossed as f64 / total.max(1) as f64)
}

/// Cell-wise mean over outputs of the epistemic (or aleatoric) maps.
pub fn mean_over_outputs(maps: &[OutputMaps], kind: MapKind) -> Result<UncertaintyMap> {
    let pick = |m: &OutputMaps| match kind {
        MapKind::Aleatoric => m.aleatoric.clone(),
        _ => m.epistemic.clone(),
    };
    let first = maps.first().ok_or_else(|| Error::Config("no maps to average".into()))?;
    let mut acc = pick(first);
    for m in &maps[1..] {
        let next = pick(m);
        acc.grid.same_as(&next.grid)?;
        acc.values += &next.values;
    }
    acc.values /= maps.len() as f64;
    acc.output = MapOutput::All;
    Ok(acc)
}

/// Scores of one ground-truth region in a finished run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionReport {
    /// Index into the problem's region list.
    pub region: usize,
    pub purpose: RegionPurpose,
    /// Noise regions against the final (aleatoric) mask and total map;
    /// data gaps against the XOR (epistemic) mask and the initial total map.
    /// Map values are on the iteration-0 scale (divided by its maximum).
    pub mask: RegionScore,
    pub initial_epistemic_contrast: f64,
    pub initial_aleatoric_contrast: f64,
    /// Mean of the final total map inside the region, iteration-0 scale.
    pub final_total_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunScores {
    pub regions: Vec<RegionReport>,
    /// Iteration-0 epistemic contrast over all noise regions.
    pub aleatoric_into_epistemic: Option<f64>,
    /// Iteration-0 aleatoric contrast over all data gaps.
    pub epistemic_into_aleatoric: Option<f64>,
}

pub fn score_run(run: &RunArtifacts) -> Result<RunScores> {
    let all = &run.problem.regions;
    let scale = if run.reference_max > 0.0 { 1.0 / run.reference_max } else { 1.0 };
    let initial_total = run.initial_total.scaled(scale);
    let final_total = run.final_total.scaled(scale);
    let epistemic = mean_over_outputs(&run.initial_maps, MapKind::Epistemic)?;
    let aleatoric = mean_over_outputs(&run.initial_maps, MapKind::Aleatoric)?;

    let regions = all
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let one = std::slice::from_ref(r);
            let mask = match r.purpose {
                RegionPurpose::Noise => score_region(&final_total, &run.aleatoric_mask, r, all)?,
                RegionPurpose::DataGap => score_region(&initial_total, &run.epistemic_mask, r, all)?,
            };
            let region_mask = region_to_mask(r, &run.grid);
            Ok(RegionReport {
                region: k,
                purpose: r.purpose,
                mask,
                initial_epistemic_contrast: leakage_score(&epistemic, one, all)?,
                initial_aleatoric_contrast: leakage_score(&aleatoric, one, all)?,
                final_total_mean: masked_mean(&final_total, &region_mask).unwrap_or(0.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let of = |purpose| -> Vec<RegionSpec> { all.iter().filter(|r| r.purpose == purpose).cloned().collect() };
    let (noise, gaps) = (of(RegionPurpose::Noise), of(RegionPurpose::DataGap));
    Ok(RunScores {
        regions,
        aleatoric_into_epistemic: (!noise.is_empty())
            .then(|| leakage_score(&epistemic, &noise, all))
            .transpose()?,
        epistemic_into_aleatoric: (!gaps.is_empty())
            .then(|| leakage_score(&aleatoric, &gaps, all))
            .transpose()?,
    })
}
