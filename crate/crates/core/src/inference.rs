//! Test-time pipeline and average-precision metrics.
//!
//! Inference averages the classification branches into one score per cell,
//! decodes a box at every cell above the score threshold from the
//! localization branch, and suppresses overlaps with greedy NMS.
//!
//! AP follows the COCO recipe: detections are matched greedily in score
//! order, each to the unmatched truth of highest IoU (at or above the
//! threshold), and precision is read off the monotone envelope at the 101
//! recall points `0, 0.01, ..., 1`.

use serde::{Deserialize, Serialize};

use crate::annotations::Image;
use crate::error::Result;
use crate::geometry::{iou_unchecked, nms, BBox, Detection};
use crate::grid::FeatureGrid;
use crate::losses::OffsetGrid;
use crate::model::{Branch, DetectorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRule {
    #[default]
    Mean,
    Max,
    GeometricMean,
}

impl EnsembleRule {
    pub fn combine(self, scores: &[f64]) -> f64 {
        let n = scores.len() as f64;
        match self {
            EnsembleRule::Mean => scores.iter().sum::<f64>() / n,
            EnsembleRule::Max => scores.iter().copied().fold(0.0, f64::max),
            EnsembleRule::GeometricMean => scores.iter().product::<f64>().powf(1.0 / n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub ensemble: EnsembleRule,
    /// Classification branches that take part in the ensemble.
    pub branches: Vec<Branch>,
    /// Cap on candidates entering NMS, highest scores first.
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.6,
            ensemble: EnsembleRule::Mean,
            branches: vec![Branch::ClsBox, Branch::ClsDot, Branch::ClsUnlabeled],
            pre_nms_top_k: 1000,
            max_detections: 100,
        }
    }
}

/// Per-cell ensemble of several branches' probabilities.
pub fn ensemble_scores(branch_probs: &[Vec<FeatureGrid>], rule: EnsembleRule) -> Vec<FeatureGrid> {
    let first = &branch_probs[0];
    first
        .iter()
        .enumerate()
        .map(|(l, grid)| {
            let values = (0..grid.values.len())
                .map(|i| {
                    let s: Vec<f64> = branch_probs.iter().map(|b| b[l].values[i]).collect();
                    rule.combine(&s).clamp(0.0, 1.0)
                })
                .collect();
            FeatureGrid { values, ..grid.clone() }
        })
        .collect()
}

/// Thresholds, decodes and suppresses precomputed head outputs.
pub fn detect_from_outputs(scores: &[FeatureGrid], offsets: &[OffsetGrid], cfg: &InferenceConfig) -> Vec<Detection> {
    let mut candidates = Vec::new();
    for (grid, off) in scores.iter().zip(offsets) {
        let s = grid.stride as f64;
        for (i, &score) in grid.values.iter().enumerate() {
            if score < cfg.score_threshold {
                continue;
            }
            let (row, col) = (i / grid.width, i % grid.width);
            let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
            let [l, t, r, b] = off.at(i);
            let bbox = BBox { x_min: cx - l, y_min: cy - t, x_max: cx + r, y_max: cy + b };
            if bbox.validate().is_ok() {
                candidates.push(Detection { bbox, score });
            }
        }
    }
    // stable: equal scores keep level/row-major order
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    candidates.truncate(cfg.pre_nms_top_k);
    let mut kept = nms(&candidates, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

/// Full inference on one image.
pub fn infer(state: &DetectorState, image: &Image, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    let mut wanted = cfg.branches.clone();
    wanted.push(Branch::Loc);
    let fwd = state.forward_branches(image, &wanted)?;
    let probs: Vec<Vec<FeatureGrid>> = cfg
        .branches
        .iter()
        .map(|b| fwd.probs(*b).expect("branch evaluated"))
        .collect();
    let scores = ensemble_scores(&probs, cfg.ensemble);
    let offsets = fwd.offsets().expect("localization evaluated");
    Ok(detect_from_outputs(&scores, &offsets, cfg))
}

/// One scored detection after matching against the truths of its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedDetection {
    pub score: f64,
    pub true_positive: bool,
}

/// Greedy matching of one image's detections (any order; sorted internally).
pub fn match_image(detections: &[Detection], truths: &[BBox], iou_threshold: f64) -> Vec<MatchedDetection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; truths.len()];
    order
        .into_iter()
        .map(|d| {
            let det = &detections[d];
            let mut best: Option<(usize, f64)> = None;
            for (t, truth) in truths.iter().enumerate() {
                if taken[t] {
                    continue;
                }
                let iou = iou_unchecked(&det.bbox, truth);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((t, iou));
                }
            }
            if let Some((t, _)) = best {
                taken[t] = true;
            }
            MatchedDetection { score: det.score, true_positive: best.is_some() }
        })
        .collect()
}

pub const RECALL_POINTS: usize = 101;

/// Average precision over all images at one IoU threshold. Zero when there
/// are no ground-truth boxes.
pub fn average_precision(detections: &[Vec<Detection>], truths: &[Vec<BBox>], iou_threshold: f64) -> f64 {
    let n_truth: usize = truths.iter().map(Vec::len).sum();
    if n_truth == 0 {
        return 0.0;
    }
    let mut pooled: Vec<MatchedDetection> = detections
        .iter()
        .zip(truths)
        .flat_map(|(d, t)| match_image(d, t, iou_threshold))
        .collect();
    pooled.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut precision = Vec::with_capacity(pooled.len());
    let mut recall = Vec::with_capacity(pooled.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for m in &pooled {
        if m.true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_truth as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

/// IoU thresholds of the sweep: 0.40, 0.45, ..., 0.75.
pub fn sweep_thresholds() -> Vec<f64> {
    (0..8).map(|k| (40 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    /// Mean of the eight per-threshold values.
    pub map: f64,
    pub ap50: f64,
}

impl ApReport {
    /// Fixed-width table, one row per threshold.
    pub fn table(&self) -> String {
        let mut out = String::from("iou    ap\n");
        for (t, a) in self.thresholds.iter().zip(&self.ap) {
            out.push_str(&format!("{t:.2}   {a:.4}\n"));
        }
        out.push_str(&format!("mAP    {:.4}\nAP50   {:.4}\n", self.map, self.ap50));
        out
    }
}

pub fn ap_sweep(detections: &[Vec<Detection>], truths: &[Vec<BBox>]) -> ApReport {
    let thresholds = sweep_thresholds();
    let ap: Vec<f64> = thresholds.iter().map(|&t| average_precision(detections, truths, t)).collect();
    let map = ap.iter().sum::<f64>() / ap.len() as f64;
    let ap50 = ap[2];
    ApReport { thresholds, ap, map, ap50 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, x + w, y + h).unwrap()
    }

    fn det(bbox: BBox, score: f64) -> Detection {
        Detection { bbox, score }
    }

    #[test]
    fn perfect_detections() {
        let truths = vec![vec![b(0., 0., 4., 4.), b(10., 10., 5., 5.)], vec![b(3., 3., 6., 6.)]];
        let dets: Vec<Vec<Detection>> = truths.iter().map(|t| t.iter().map(|x| det(*x, 0.9)).collect()).collect();
        let r = ap_sweep(&dets, &truths);
        assert!(r.ap.iter().all(|a| *a == 1.0));
        assert_eq!(r.map, 1.0);
        assert_eq!(r.thresholds.len(), 8);
        assert_eq!(r.thresholds[2], 0.5);
    }

    #[test]
    fn no_detections() {
        let truths = vec![vec![b(0., 0., 4., 4.)]];
        assert_eq!(average_precision(&[vec![]], &truths, 0.5), 0.0);
    }

    #[test]
    fn iou_exactly_half_matches_at_half() {
        let truths = vec![vec![b(0., 0., 1., 1.)]];
        let dets = vec![vec![det(b(0., 0., 2., 1.), 0.8)]];
        let r = ap_sweep(&dets, &truths);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap[3], 0.0);
        assert_eq!(r.ap[0], 1.0);
    }

    #[test]
    fn matching_prefers_highest_iou() {
        let truths = [b(0., 0., 10., 10.), b(1., 0., 10., 10.)];
        let d = [det(b(1., 0., 10., 10.), 0.9), det(b(0., 0., 10., 10.), 0.8)];
        let m = match_image(&d, &truths, 0.5);
        assert!(m.iter().all(|x| x.true_positive));
    }

    #[test]
    fn ensemble_rules() {
        assert!((EnsembleRule::Mean.combine(&[0.2, 0.4, 0.6]) - 0.4).abs() < 1e-15);
        assert_eq!(EnsembleRule::Max.combine(&[0.2, 0.4, 0.6]), 0.6);
        assert!((EnsembleRule::GeometricMean.combine(&[0.25, 1.0]) - 0.5).abs() < 1e-15);
        let g = vec![FeatureGrid::new(0, 4, 1, 2, vec![0.3, 0.7]).unwrap()];
        let e = ensemble_scores(&[g.clone(), g.clone(), g.clone()], EnsembleRule::Mean);
        for (a, x) in e[0].values.iter().zip(&g[0].values) {
            assert!((a - x).abs() < 1e-15);
        }
    }

    #[test]
    fn below_threshold_gives_nothing() {
        let scores = vec![FeatureGrid::new(0, 4, 2, 2, vec![0.01; 4]).unwrap()];
        let off = vec![OffsetGrid { stride: 4, height: 2, width: 2, values: vec![2.0; 16] }];
        assert!(detect_from_outputs(&scores, &off, &InferenceConfig::default()).is_empty());
    }

    #[test]
    fn single_confident_cell_decodes_truth() {
        // cell (1, 2) at stride 4 has center (10, 6); truth [7, 3, 13, 11]
        let truth = BBox::new(7.0, 3.0, 13.0, 11.0).unwrap();
        let mut sv = vec![0.0; 16];
        sv[6] = 0.95;
        let scores = vec![FeatureGrid::new(0, 4, 4, 4, sv).unwrap()];
        let mut ov = vec![1.0; 64];
        let t = crate::geometry::encode_target(&truth, 10.0, 6.0).unwrap();
        for (plane, v) in t.as_array().into_iter().enumerate() {
            ov[plane * 16 + 6] = v;
        }
        let off = vec![OffsetGrid { stride: 4, height: 4, width: 4, values: ov }];
        let d = detect_from_outputs(&scores, &off, &InferenceConfig::default());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, truth);
        assert_eq!(crate::geometry::iou(&d[0].bbox, &truth).unwrap(), 1.0);
    }
}
