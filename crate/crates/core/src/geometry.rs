//! Axis-aligned boxes, points, overlap measures and greedy suppression.
//!
//! Boxes are continuous and half-open: area is `(x_max - x_min) * (y_max - y_min)`
//! with no +1 pixel convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::DegenerateBox(self.x_min, self.y_min, self.x_max, self.y_max));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) * 0.5, (self.y_min + self.y_max) * 0.5)
    }

    /// Strict interior test.
    pub fn contains_strictly(&self, x: f64, y: f64) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { x_min: a[0], y_min: a[1], x_max: a[2], y_max: a[3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Distances from a location to the four box edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl RegressionTarget {
    pub fn as_array(&self) -> [f64; 4] {
        [self.left, self.top, self.right, self.bottom]
    }
}

/// A scored box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    inter / (a.area() + b.area() - inter)
}

/// Generalized IoU in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclose = (a.x_max.max(b.x_max) - a.x_min.min(b.x_min)) * (a.y_max.max(b.y_max) - a.y_min.min(b.y_min));
    Ok(inter / union - (enclose - union) / enclose)
}

/// `1 - GIoU(pred, truth)`.
pub fn giou_loss(pred: &BBox, truth: &BBox) -> Result<f64> {
    Ok(1.0 - giou(pred, truth)?)
}

/// `1 - GIoU` and its derivative with respect to the predicted
/// `[x_min, y_min, x_max, y_max]`. At corner coincidences the one-sided
/// derivative taking the predicted edge as inactive is returned.
pub fn giou_loss_with_grad(pred: &BBox, truth: &BBox) -> Result<(f64, [f64; 4])> {
    pred.validate()?;
    truth.validate()?;
    let [x1, y1, x2, y2] = pred.as_array();
    let [tx1, ty1, tx2, ty2] = truth.as_array();

    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_t = truth.area();

    let iw_raw = x2.min(tx2) - x1.max(tx1);
    let ih_raw = y2.min(ty2) - y1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_p + area_t - inter;

    let cw = x2.max(tx2) - x1.min(tx1);
    let chh = y2.max(ty2) - y1.min(ty1);
    let enclose = cw * chh;

    let loss = 2.0 - inter / union - union / enclose;

    // d(iw)/d[x1, x2], d(ih)/d[y1, y2]
    let overlapping = iw_raw > 0.0 && ih_raw > 0.0;
    let d_iw = if overlapping {
        [if x1 > tx1 { -1.0 } else { 0.0 }, if x2 < tx2 { 1.0 } else { 0.0 }]
    } else {
        [0.0, 0.0]
    };
    let d_ih = if overlapping {
        [if y1 > ty1 { -1.0 } else { 0.0 }, if y2 < ty2 { 1.0 } else { 0.0 }]
    } else {
        [0.0, 0.0]
    };
    let d_inter = [d_iw[0] * ih, d_ih[0] * iw, d_iw[1] * ih, d_ih[1] * iw];
    let d_area = [-ph, -pw, ph, pw];
    let d_cw = [if x1 < tx1 { -1.0 } else { 0.0 }, if x2 > tx2 { 1.0 } else { 0.0 }];
    let d_ch = [if y1 < ty1 { -1.0 } else { 0.0 }, if y2 > ty2 { 1.0 } else { 0.0 }];
    let d_enclose = [d_cw[0] * chh, d_ch[0] * cw, d_cw[1] * chh, d_ch[1] * cw];

    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enclose - union * d_enclose[i]) / (enclose * enclose);
        grad[i] = -d_iou - d_ratio;
    }
    Ok((loss, grad))
}

/// Distances from `(x, y)` to the edges of `bbox`; the location must lie strictly inside.
pub fn encode_target(bbox: &BBox, x: f64, y: f64) -> Result<RegressionTarget> {
    bbox.validate()?;
    if !bbox.contains_strictly(x, y) {
        return Err(Error::LocationOutsideBox { x, y });
    }
    Ok(RegressionTarget {
        left: x - bbox.x_min,
        top: y - bbox.y_min,
        right: bbox.x_max - x,
        bottom: bbox.y_max - y,
    })
}

/// Inverse of [`encode_target`]. Exact for coordinates on a dyadic grid.
pub fn decode_target(target: &RegressionTarget, x: f64, y: f64) -> BBox {
    BBox {
        x_min: x - target.left,
        y_min: y - target.top,
        x_max: x + target.right,
        y_max: y + target.bottom,
    }
}

/// Greedy non-maximum suppression. Keeps the highest-scoring detection,
/// drops everything overlapping it with IoU at or above `iou_threshold`,
/// and repeats. Equal scores keep input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut suppressed = vec![false; detections.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(detections[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou_unchecked(&detections[i].bbox, &detections[j].bbox) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(a: f64, c: f64, d: f64, e: f64) -> BBox {
        BBox::new(a, c, d, e).unwrap()
    }

    #[test]
    fn iou_examples() {
        let x = b(0., 0., 2., 2.);
        assert_eq!(iou(&x, &x).unwrap(), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)).unwrap(), 0.0);
        assert!((iou(&x, &b(1., 1., 3., 3.)).unwrap() - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(1., 0., 1., 2.).is_err());
        let bad = BBox { x_min: 0., y_min: 0., x_max: 1., y_max: f64::NAN };
        assert!(iou(&bad, &b(0., 0., 1., 1.)).is_err());
        assert!(giou_loss(&b(0., 0., 1., 1.), &BBox { x_min: 2., y_min: 0., x_max: 1., y_max: 1. }).is_err());
    }

    #[test]
    fn giou_examples() {
        let x = b(0., 0., 2., 2.);
        assert_eq!(giou_loss(&x, &x).unwrap(), 0.0);
        let l = giou_loss(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)).unwrap();
        assert!((l - 16.0 / 9.0).abs() < 1e-15);
        // touching along an edge: enclosing box equals union
        let l = giou_loss(&b(0., 0., 1., 1.), &b(1., 0., 2., 1.)).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn giou_grad_matches_loss_value() {
        let (l, _) = giou_loss_with_grad(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)).unwrap();
        assert!((l - 16.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn encode_center_of_square() {
        let s = 4.0;
        let bx = b(10. - s, 10. - s, 10. + s, 10. + s);
        let t = encode_target(&bx, 10., 10.).unwrap();
        assert_eq!(t.as_array(), [s; 4]);
        assert_eq!(decode_target(&t, 10., 10.), bx);
    }

    #[test]
    fn encode_on_boundary_errors() {
        let bx = b(0., 0., 4., 4.);
        assert!(matches!(encode_target(&bx, 0., 2.), Err(Error::LocationOutsideBox { .. })));
        assert!(encode_target(&bx, 5., 2.).is_err());
    }

    #[test]
    fn nms_examples() {
        let d = Detection { bbox: b(0., 0., 2., 2.), score: 0.7 };
        assert_eq!(nms(&[d], 0.6), vec![d]);
        let hi = Detection { bbox: b(0., 0., 2., 2.), score: 0.9 };
        let lo = Detection { bbox: b(0., 0., 2., 2.), score: 0.8 };
        assert_eq!(nms(&[lo, hi], 0.6), vec![hi]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_tie_keeps_earlier() {
        let a = Detection { bbox: b(0., 0., 2., 2.), score: 0.5 };
        let c = Detection { bbox: b(0., 0., 2., 2.1), score: 0.5 };
        assert_eq!(nms(&[a, c], 0.6), vec![a]);
        assert_eq!(nms(&[c, a], 0.6), vec![c]);
    }
}
