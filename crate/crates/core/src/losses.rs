//! Training objectives for the three classification branches and the
//! localization branch, each with its derivative with respect to the branch
//! output.
//!
//! Classification losses take post-sigmoid probabilities and return
//! `dL/dP` per cell; the caller chains that through the sigmoid on the tape.

use serde::{Deserialize, Serialize};

use crate::annotations::SupervisionKind;
use crate::assignment::{AssignmentResult, CellLabel};
use crate::error::{Error, Result};
use crate::geometry::{giou_loss_with_grad, BBox};
use crate::grid::FeatureGrid;

/// Form of the confidence-aware log argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CaVariant {
    /// `log(P (1 - W))` / `log(1 - P (1 - W))`, as printed.
    #[default]
    Verbatim,
    /// `log(P W)` / `log(1 - P W)`.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal exponent.
    pub gamma: f64,
    /// Assignment threshold.
    pub t: f64,
    /// Weight of the dot-labeled terms.
    pub lambda: f64,
    /// Weight of the unlabeled terms.
    pub beta: f64,
    pub ca_enabled: bool,
    pub ca_variant: CaVariant,
    /// Lower clamp on log arguments.
    pub epsilon: f64,
    /// Divide each form's terms by its positive count (at least one).
    pub normalize_by_positives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            t: 0.5,
            lambda: 1.0,
            beta: 1.0,
            ca_enabled: false,
            ca_variant: CaVariant::Verbatim,
            epsilon: 1e-7,
            normalize_by_positives: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(Error::Config(format!("t must lie in (0, 1), got {}", self.t)));
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("lambda and beta must be >= 0".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// `d/dx x^g` for `x >= 0`, with `0 * inf` resolved to zero.
fn dpow(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else if x == 0.0 {
        if g > 1.0 {
            0.0
        } else if g == 1.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        g * x.powf(g - 1.0)
    }
}

/// `ln(clamp(x, eps, 1))` and its derivative (zero where clamped).
fn clamped_ln(x: f64, eps: f64) -> (f64, f64) {
    if x < eps {
        (eps.ln(), 0.0)
    } else if x > 1.0 {
        (0.0, 0.0)
    } else {
        (x.ln(), 1.0 / x)
    }
}

fn mul_safe(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        a * b
    }
}

/// `-(1 - p)^g ln p` and its derivative in `p`.
pub fn focal_positive(p: f64, gamma: f64, eps: f64) -> (f64, f64) {
    let q = 1.0 - p;
    let m = q.powf(gamma);
    let (ln, dln) = clamped_ln(p, eps);
    (-m * ln, mul_safe(dpow(q, gamma), ln) - m * dln)
}

/// `-p^g ln(1 - p)` and its derivative in `p`.
pub fn focal_negative(p: f64, gamma: f64, eps: f64) -> (f64, f64) {
    let m = p.powf(gamma);
    let (ln, dln) = clamped_ln(1.0 - p, eps);
    (-m * ln, -mul_safe(dpow(p, gamma), ln) + m * dln)
}

fn ca_factor(w: f64, variant: CaVariant) -> f64 {
    match variant {
        CaVariant::Verbatim => 1.0 - w,
        CaVariant::Weighted => w,
    }
}

/// Confidence-aware positive term `-(1 - p)^g ln(p k(w))` and its derivative in `p`.
pub fn ca_positive(p: f64, w: f64, cfg: &LossConfig) -> (f64, f64) {
    let k = ca_factor(w, cfg.ca_variant);
    let q = 1.0 - p;
    let m = q.powf(cfg.gamma);
    let (ln, dln) = clamped_ln(p * k, cfg.epsilon);
    (-m * ln, mul_safe(dpow(q, cfg.gamma), ln) - m * dln * k)
}

/// Confidence-aware negative term `-p^g ln(1 - p k(w))` and its derivative in `p`.
pub fn ca_negative(p: f64, w: f64, cfg: &LossConfig) -> (f64, f64) {
    let k = ca_factor(w, cfg.ca_variant);
    let m = p.powf(cfg.gamma);
    let (ln, dln) = clamped_ln(1.0 - p * k, cfg.epsilon);
    (-m * ln, -mul_safe(dpow(p, cfg.gamma), ln) + m * dln * k)
}

/// Confidence-aware sums over the given cells: positives `W >= t` and
/// negatives `W < t`, restricted to cells whose label is not `Ignore`.
pub fn ca_terms(p: &[f64], w: &[f64], labels: &[CellLabel], cfg: &LossConfig) -> (f64, f64) {
    let (mut pos, mut neg) = (0.0, 0.0);
    for ((&pi, &wi), &label) in p.iter().zip(w).zip(labels) {
        match label {
            CellLabel::Ignore => {}
            _ if wi >= cfg.t => pos += ca_positive(pi, wi, cfg).0,
            _ => neg += ca_negative(pi, wi, cfg).0,
        }
    }
    (pos, neg)
}

/// Positive/negative classification sums for one sample and their gradient
/// with respect to the branch probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss {
    pub positive: f64,
    pub negative: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `d(positive + negative)/dP`, per level, row-major.
    pub grad: Vec<Vec<f64>>,
}

/// Which sides of the partition lie in the uncertain region for a form.
fn uncertain_sides(form: SupervisionKind) -> (bool, bool) {
    match form {
        SupervisionKind::Box => (true, false),
        SupervisionKind::Dot => (false, true),
        SupervisionKind::Unlabeled => (true, true),
    }
}

fn cls_loss(probs: &[FeatureGrid], a: &AssignmentResult, cfg: &LossConfig) -> Result<ClsLoss> {
    if probs.len() != a.labels.len() {
        return Err(Error::ShapeMismatch { left: vec![a.labels.len()], right: vec![probs.len()] });
    }
    let ca = cfg.ca_enabled && a.guided;
    let (ca_pos, ca_neg) = uncertain_sides(a.form);
    let mut out = ClsLoss { positive: 0.0, negative: 0.0, n_pos: 0, n_neg: 0, grad: Vec::with_capacity(probs.len()) };
    for (l, grid) in probs.iter().enumerate() {
        if grid.values.len() != a.labels[l].len() {
            return Err(Error::ShapeMismatch { left: vec![a.labels[l].len()], right: vec![grid.values.len()] });
        }
        let mut g = vec![0.0; grid.values.len()];
        for (i, (&p, &label)) in grid.values.iter().zip(&a.labels[l]).enumerate() {
            let w = a.weights[l][i];
            match label {
                CellLabel::Pos => {
                    let (v, d) = if ca && ca_pos { ca_positive(p, w, cfg) } else { focal_positive(p, cfg.gamma, cfg.epsilon) };
                    out.positive += v;
                    out.n_pos += 1;
                    g[i] = d;
                }
                CellLabel::Neg => {
                    let (v, d) = if ca && ca_neg { ca_negative(p, w, cfg) } else { focal_negative(p, cfg.gamma, cfg.epsilon) };
                    out.negative += v;
                    out.n_neg += 1;
                    g[i] = d;
                }
                CellLabel::Ignore => {}
            }
        }
        out.grad.push(g);
    }
    Ok(out)
}

fn expect_form(a: &AssignmentResult, form: SupervisionKind) -> Result<()> {
    if a.form != form {
        return Err(Error::Config(format!("assignment built for {:?}, expected {form:?}", a.form)));
    }
    Ok(())
}

/// Box-branch classification terms. Positives use the CA form when enabled;
/// the certain-negative region always uses the plain focal form.
pub fn box_cls_loss(p_box: &[FeatureGrid], a: &AssignmentResult, cfg: &LossConfig) -> Result<ClsLoss> {
    expect_form(a, SupervisionKind::Box)?;
    cls_loss(p_box, a, cfg)
}

/// Dot-branch classification terms. The annotated cells use plain focal
/// loss; negatives drawn from the uncertain region use the CA form when enabled.
pub fn dot_cls_loss(p_dot: &[FeatureGrid], a: &AssignmentResult, cfg: &LossConfig) -> Result<ClsLoss> {
    expect_form(a, SupervisionKind::Dot)?;
    cls_loss(p_dot, a, cfg)
}

/// Unlabeled-branch classification terms over every cell.
pub fn unlabeled_cls_loss(p_unl: &[FeatureGrid], a: &AssignmentResult, cfg: &LossConfig) -> Result<ClsLoss> {
    expect_form(a, SupervisionKind::Unlabeled)?;
    cls_loss(p_unl, a, cfg)
}

/// Predicted edge distances for one level: `[left, top, right, bottom]`
/// planes of `height × width` each.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetGrid {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl OffsetGrid {
    pub fn at(&self, cell: usize) -> [f64; 4] {
        let n = self.height * self.width;
        [self.values[cell], self.values[n + cell], self.values[2 * n + cell], self.values[3 * n + cell]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegLoss {
    pub value: f64,
    pub count: usize,
    /// Gradient per level in the [`OffsetGrid`] layout.
    pub grad: Vec<Vec<f64>>,
}

/// Sum of `1 - GIoU` between the box decoded at each positive cell and the
/// box that owns the cell.
pub fn box_reg_loss(offsets: &[OffsetGrid], boxes: &[BBox], a: &AssignmentResult) -> Result<RegLoss> {
    expect_form(a, SupervisionKind::Box)?;
    let mut out = RegLoss { value: 0.0, count: 0, grad: Vec::with_capacity(offsets.len()) };
    for (l, off) in offsets.iter().enumerate() {
        let n = off.height * off.width;
        let mut g = vec![0.0; 4 * n];
        for (i, label) in a.labels[l].iter().enumerate() {
            if *label != CellLabel::Pos {
                continue;
            }
            let (row, col) = (i / off.width, i % off.width);
            let s = off.stride as f64;
            let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
            let truth = match a.owner[l][i] {
                Some(j) if boxes.get(j).is_some_and(|b| b.contains_strictly(cx, cy)) => boxes[j],
                _ => return Err(Error::LocationOutsideBox { x: cx, y: cy }),
            };
            let [dl, dt, dr, db] = off.at(i);
            let pred = BBox { x_min: cx - dl, y_min: cy - dt, x_max: cx + dr, y_max: cy + db };
            let (v, d) = giou_loss_with_grad(&pred, &truth)?;
            out.value += v;
            out.count += 1;
            g[i] = -d[0];
            g[n + i] = -d[1];
            g[2 * n + i] = d[2];
            g[3 * n + i] = d[3];
        }
        out.grad.push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCounts {
    pub box_reg: usize,
    pub box_pos: usize,
    pub box_neg: usize,
    pub dot_pos: usize,
    pub dot_neg: usize,
    pub unl_pos: usize,
    pub unl_neg: usize,
}

/// Per-term values of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub box_reg: f64,
    pub box_pos: f64,
    pub box_neg: f64,
    pub dot_pos: f64,
    pub dot_neg: f64,
    pub unl_pos: f64,
    pub unl_neg: f64,
    pub total: f64,
    pub counts: LossCounts,
}

impl LossReport {
    /// Recomputes `total` from the terms.
    pub fn finalize(mut self, cfg: &LossConfig) -> Self {
        self.total = total_loss(&self, cfg);
        self
    }

    pub fn terms(&self) -> [f64; 7] {
        [self.box_reg, self.box_pos, self.box_neg, self.dot_pos, self.dot_neg, self.unl_pos, self.unl_neg]
    }
}

/// `reg + box_pos + box_neg + lambda (dot_pos + dot_neg) + beta (unl_pos + unl_neg)`.
pub fn total_loss(r: &LossReport, cfg: &LossConfig) -> f64 {
    r.box_reg + r.box_pos + r.box_neg + cfg.lambda * (r.dot_pos + r.dot_neg) + cfg.beta * (r.unl_pos + r.unl_neg)
}

/// Divisor applied to a form's terms under `normalize_by_positives`.
pub fn term_scale(cfg: &LossConfig, positives: usize) -> f64 {
    if cfg.normalize_by_positives {
        1.0 / positives.max(1) as f64
    } else {
        1.0
    }
}
