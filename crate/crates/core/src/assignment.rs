//! Guidance maps and dynamic label assignment.
//!
//! A guidance map scores every uncertain cell in `[0, 1]`. The inter-guided
//! map for one branch is the geometric mean of the *other two* branches'
//! probabilities; the self-guided map uses the branch's own probabilities.
//! Either way the raw map is min-max normalized per region: per annotated box
//! for box-labeled samples, per pyramid level over the uncertain cells for
//! dot-labeled and unlabeled samples. Guidance is built from plain values and
//! never carries gradient back into the branches that produced it.

use crate::annotations::{Region, RegionMask, Supervision, SupervisionKind};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::grid::FeatureGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSource {
    /// Inter-guided: built from the other two classification branches.
    Igm,
    /// Self-guided: built from the branch's own classification scores.
    Sgm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    pub levels: Vec<FeatureGrid>,
    pub source: GuidanceSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellLabel {
    Pos,
    Neg,
    Ignore,
}

/// Partition of every pyramid cell of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub form: SupervisionKind,
    /// Per level, row-major.
    pub labels: Vec<Vec<CellLabel>>,
    /// Guidance weight per cell; zero on certain cells.
    pub weights: Vec<Vec<f64>>,
    /// Box owning each cell (box-labeled samples), smallest area first.
    pub owner: Vec<Vec<Option<usize>>>,
    /// Whether the partition came from a guidance map (as opposed to the
    /// fixed center-region rule).
    pub guided: bool,
    /// Positives per annotated box.
    pub positives_per_box: Vec<usize>,
    pub counts: AssignmentCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AssignmentCounts {
    pub positives: usize,
    pub negatives: usize,
    pub ignored: usize,
}

impl AssignmentResult {
    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, CellLabel)> + '_ {
        self.labels.iter().enumerate().flat_map(|(l, v)| v.iter().enumerate().map(move |(i, c)| (l, i, *c)))
    }

    pub fn count(&self, label: CellLabel) -> usize {
        self.labels.iter().flatten().filter(|c| **c == label).count()
    }
}

/// Min-max rescaling to `[0, 1]`. A constant region maps to all zeros.
pub fn normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let (lo, hi) = min_max(values.iter().copied());
    if hi <= lo {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Box index owning each cell: the smallest-area box whose interior holds the
/// cell center (earlier box on equal area). `None` outside every box.
pub fn box_ownership(mask: &RegionMask, boxes: &[BBox]) -> Vec<Vec<Option<usize>>> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[a].area().total_cmp(&boxes[b].area()).then(a.cmp(&b)));
    mask.pyramid
        .levels
        .iter()
        .map(|spec| {
            let mut out = Vec::with_capacity(spec.cells());
            for row in 0..spec.height {
                for col in 0..spec.width {
                    let (x, y) = spec.cell_center(row, col);
                    out.push(order.iter().copied().find(|&j| boxes[j].contains_strictly(x, y)));
                }
            }
            out
        })
        .collect()
}

fn check_shapes(mask: &RegionMask, maps: &[&[FeatureGrid]]) -> Result<()> {
    for m in maps {
        if m.len() != mask.pyramid.num_levels() {
            return Err(Error::ShapeMismatch { left: vec![mask.pyramid.num_levels()], right: vec![m.len()] });
        }
        for (grid, spec) in m.iter().zip(&mask.pyramid.levels) {
            if grid.height != spec.height || grid.width != spec.width {
                return Err(Error::ShapeMismatch {
                    left: vec![spec.height, spec.width],
                    right: vec![grid.height, grid.width],
                });
            }
        }
    }
    Ok(())
}

/// Inter-guided map for the branch supervised by `supervision`'s form.
/// `p_box`, `p_dot`, `p_unl` are the three branches' probabilities per level.
pub fn inter_guided_map(
    supervision: &Supervision,
    p_box: &[FeatureGrid],
    p_dot: &[FeatureGrid],
    p_unl: &[FeatureGrid],
    mask: &RegionMask,
) -> Result<GuidanceMap> {
    check_shapes(mask, &[p_box, p_dot, p_unl])?;
    let others: [&[FeatureGrid]; 2] = match supervision.kind() {
        SupervisionKind::Box => [p_dot, p_unl],
        SupervisionKind::Dot => [p_box, p_unl],
        SupervisionKind::Unlabeled => [p_box, p_dot],
    };
    guided_by_others(supervision, &others, mask)
}

/// Inter-guided map from whichever other branches are being trained: the
/// geometric mean of one or two branches, normalized as usual.
pub fn guided_by_others(supervision: &Supervision, others: &[&[FeatureGrid]], mask: &RegionMask) -> Result<GuidanceMap> {
    check_shapes(mask, others)?;
    let raw = match others {
        [a] => a.to_vec(),
        [a, b] => a
            .iter()
            .zip(b.iter())
            .map(|(ga, gb)| {
                ga.check_same_shape(gb)?;
                let values = ga.values.iter().zip(&gb.values).map(|(x, y)| (x * y).sqrt()).collect();
                Ok(FeatureGrid { values, ..ga.clone() })
            })
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(Error::Config(format!("guidance needs one or two other branches, got {}", others.len()))),
    };
    guidance_from_raw(raw, supervision, mask, GuidanceSource::Igm)
}

/// Self-guided map: the supervised branch's own probabilities, normalized the same way.
pub fn self_guided_map(supervision: &Supervision, own: &[FeatureGrid], mask: &RegionMask) -> Result<GuidanceMap> {
    check_shapes(mask, &[own])?;
    guidance_from_raw(own.to_vec(), supervision, mask, GuidanceSource::Sgm)
}

/// Normalizes a raw confidence map over the regions implied by the supervision
/// form. Certain cells get weight zero.
pub fn guidance_from_raw(
    mut raw: Vec<FeatureGrid>,
    supervision: &Supervision,
    mask: &RegionMask,
    source: GuidanceSource,
) -> Result<GuidanceMap> {
    check_shapes(mask, &[&raw])?;
    match supervision {
        Supervision::BoxLabeled(boxes) => {
            let owner = box_ownership(mask, boxes);
            for j in 0..boxes.len() {
                let cells: Vec<(usize, usize)> = owner
                    .iter()
                    .enumerate()
                    .flat_map(|(l, o)| o.iter().enumerate().filter(move |(_, x)| **x == Some(j)).map(move |(i, _)| (l, i)))
                    .collect();
                if cells.is_empty() {
                    continue;
                }
                let vals: Vec<f64> = cells.iter().map(|&(l, i)| raw[l].values[i]).collect();
                let normed = normalize(&vals)?;
                for (&(l, i), v) in cells.iter().zip(normed) {
                    raw[l].values[i] = v;
                }
            }
            for (l, grid) in raw.iter_mut().enumerate() {
                for (i, v) in grid.values.iter_mut().enumerate() {
                    if owner[l][i].is_none() {
                        *v = 0.0;
                    }
                }
            }
        }
        Supervision::DotLabeled(_) | Supervision::Unlabeled => {
            for (l, grid) in raw.iter_mut().enumerate() {
                let idx: Vec<usize> = (0..grid.values.len()).filter(|&i| mask.levels[l][i] == Region::Uncertain).collect();
                if !idx.is_empty() {
                    let vals: Vec<f64> = idx.iter().map(|&i| grid.values[i]).collect();
                    let normed = normalize(&vals)?;
                    for (&i, v) in idx.iter().zip(normed) {
                        grid.values[i] = v;
                    }
                }
                for (i, v) in grid.values.iter_mut().enumerate() {
                    if mask.levels[l][i] != Region::Uncertain {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(GuidanceMap { levels: raw, source })
}

/// Partitions cells into positives, negatives and ignored cells.
///
/// * box-labeled: positives are box cells with guidance `>= t`; negatives are
///   exactly the certain-negative region; a box with no cell reaching `t`
///   takes its single highest-guidance cell (ties: nearest the box center,
///   then earlier in level/row-major order).
/// * dot-labeled: positives are the annotated dot cells; uncertain cells with
///   guidance `< t` are negatives; the rest are ignored.
/// * unlabeled: guidance `>= t` positive, otherwise negative.
pub fn assign(supervision: &Supervision, guidance: &GuidanceMap, mask: &RegionMask, t: f64) -> Result<AssignmentResult> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("assignment threshold must lie in (0, 1), got {t}")));
    }
    check_shapes(mask, &[&guidance.levels])?;
    let weights: Vec<Vec<f64>> = guidance.levels.iter().map(|g| g.values.clone()).collect();
    let n_levels = mask.pyramid.num_levels();
    let mut labels: Vec<Vec<CellLabel>> = mask.levels.iter().map(|l| vec![CellLabel::Ignore; l.len()]).collect();
    let mut owner: Vec<Vec<Option<usize>>> = mask.levels.iter().map(|l| vec![None; l.len()]).collect();
    let mut positives_per_box = Vec::new();

    match supervision {
        Supervision::BoxLabeled(boxes) => {
            owner = box_ownership(mask, boxes);
            positives_per_box = vec![0; boxes.len()];
            for l in 0..n_levels {
                for (i, region) in mask.levels[l].iter().enumerate() {
                    if *region == Region::CertainNegative {
                        labels[l][i] = CellLabel::Neg;
                    } else if let Some(j) = owner[l][i] {
                        if weights[l][i] >= t {
                            labels[l][i] = CellLabel::Pos;
                            positives_per_box[j] += 1;
                        }
                    }
                }
            }
            for (j, b) in boxes.iter().enumerate() {
                if positives_per_box[j] == 0 {
                    if let Some((l, i)) = best_cell(mask, &owner, j, b, |l, i| weights[l][i]) {
                        labels[l][i] = CellLabel::Pos;
                        positives_per_box[j] = 1;
                    }
                }
            }
        }
        Supervision::DotLabeled(_) => {
            for l in 0..n_levels {
                for (i, region) in mask.levels[l].iter().enumerate() {
                    labels[l][i] = match region {
                        Region::CertainPositive => CellLabel::Pos,
                        Region::Uncertain if weights[l][i] < t => CellLabel::Neg,
                        Region::Uncertain => CellLabel::Ignore,
                        Region::CertainNegative => CellLabel::Neg,
                    };
                }
            }
        }
        Supervision::Unlabeled => {
            for l in 0..n_levels {
                for i in 0..mask.levels[l].len() {
                    labels[l][i] = if weights[l][i] >= t { CellLabel::Pos } else { CellLabel::Neg };
                }
            }
        }
    }
    Ok(finish(supervision.kind(), labels, weights, owner, true, positives_per_box))
}

/// Fixed FCOS-style rule for box-labeled samples: cells whose centers fall in
/// the central `fraction` of their owning box are positive, the certain
/// negative region is negative, other box cells are ignored. A box with no
/// such cell takes its cell nearest the box center.
pub fn center_region_assignment(boxes: &[BBox], mask: &RegionMask, fraction: f64) -> AssignmentResult {
    let owner = box_ownership(mask, boxes);
    let mut labels: Vec<Vec<CellLabel>> = mask.levels.iter().map(|l| vec![CellLabel::Ignore; l.len()]).collect();
    let mut positives_per_box = vec![0; boxes.len()];
    let half = 0.5 * fraction;
    for (l, spec) in mask.pyramid.levels.iter().enumerate() {
        for row in 0..spec.height {
            for col in 0..spec.width {
                let i = row * spec.width + col;
                if mask.levels[l][i] == Region::CertainNegative {
                    labels[l][i] = CellLabel::Neg;
                    continue;
                }
                let Some(j) = owner[l][i] else { continue };
                let b = &boxes[j];
                let (cx, cy) = b.center();
                let (x, y) = spec.cell_center(row, col);
                if (x - cx).abs() < half * b.width() && (y - cy).abs() < half * b.height() {
                    labels[l][i] = CellLabel::Pos;
                    positives_per_box[j] += 1;
                }
            }
        }
    }
    for (j, b) in boxes.iter().enumerate() {
        if positives_per_box[j] == 0 {
            if let Some((l, i)) = best_cell(mask, &owner, j, b, |_, _| 0.0) {
                labels[l][i] = CellLabel::Pos;
                positives_per_box[j] = 1;
            }
        }
    }
    let weights = mask.levels.iter().map(|l| vec![0.0; l.len()]).collect();
    finish(SupervisionKind::Box, labels, weights, owner, false, positives_per_box)
}

/// Highest-scoring cell owned by box `j`; ties go to the cell nearest the box
/// center, then to the earlier cell in level/row-major order.
fn best_cell(
    mask: &RegionMask,
    owner: &[Vec<Option<usize>>],
    j: usize,
    b: &BBox,
    score: impl Fn(usize, usize) -> f64,
) -> Option<(usize, usize)> {
    let (cx, cy) = b.center();
    let mut best: Option<(f64, f64, usize, usize)> = None;
    for (l, spec) in mask.pyramid.levels.iter().enumerate() {
        for row in 0..spec.height {
            for col in 0..spec.width {
                let i = row * spec.width + col;
                if owner[l][i] != Some(j) {
                    continue;
                }
                let (x, y) = spec.cell_center(row, col);
                let s = score(l, i);
                let d = (x - cx).powi(2) + (y - cy).powi(2);
                let better = match best {
                    None => true,
                    Some((bs, bd, _, _)) => s > bs || (s == bs && d < bd),
                };
                if better {
                    best = Some((s, d, l, i));
                }
            }
        }
    }
    best.map(|(_, _, l, i)| (l, i))
}

fn finish(
    form: SupervisionKind,
    labels: Vec<Vec<CellLabel>>,
    weights: Vec<Vec<f64>>,
    owner: Vec<Vec<Option<usize>>>,
    guided: bool,
    positives_per_box: Vec<usize>,
) -> AssignmentResult {
    let mut counts = AssignmentCounts::default();
    for c in labels.iter().flatten() {
        match c {
            CellLabel::Pos => counts.positives += 1,
            CellLabel::Neg => counts.negatives += 1,
            CellLabel::Ignore => counts.ignored += 1,
        }
    }
    AssignmentResult { form, labels, weights, owner, guided, positives_per_box, counts }
}
