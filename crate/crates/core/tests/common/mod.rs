//! Reference implementations and random instances shared by the
//! property and acceptance suites.
#![allow(dead_code)]

use omnidet::annotations::{build_region_mask, Image, Supervision};
use omnidet::assignment::{assign, guidance_from_raw, AssignmentResult, CellLabel, GuidanceSource};
use omnidet::geometry::{iou, BBox, Detection, Point};
use omnidet::grid::{FeatureGrid, PyramidSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn dyadic(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let steps = ((hi - lo) * 16.0) as i64;
    lo + rng.gen_range(0..=steps) as f64 / 16.0
}

pub fn rand_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x = rng.gen_range(0.0..extent);
    let y = rng.gen_range(0.0..extent);
    BBox::new(x, y, x + rng.gen_range(0.5..extent / 2.0), y + rng.gen_range(0.5..extent / 2.0)).unwrap()
}

/// Reference: a detection survives iff no surviving detection of higher
/// priority overlaps it at or above the threshold. Evaluated recursively
/// with memoization, without the greedy sweep.
pub fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let higher = |a: usize, b: usize| dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b);
    fn kept(i: usize, dets: &[Detection], thr: f64, memo: &mut Vec<Option<bool>>, higher: &dyn Fn(usize, usize) -> bool) -> bool {
        if let Some(v) = memo[i] {
            return v;
        }
        let mut v = true;
        for j in 0..dets.len() {
            if j != i && higher(j, i) && iou(&dets[i].bbox, &dets[j].bbox).unwrap() >= thr && kept(j, dets, thr, memo, higher) {
                v = false;
                break;
            }
        }
        memo[i] = Some(v);
        v
    }
    let mut memo = vec![None; n];
    let mut out: Vec<usize> = (0..n).filter(|&i| kept(i, dets, thr, &mut memo, &higher)).collect();
    out.sort_by(|&a, &b| if higher(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    out.into_iter().map(|i| dets[i]).collect()
}

pub fn random_dets(rng: &mut ChaCha8Rng, n: usize, tie_scores: bool) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let score = if tie_scores { rng.gen_range(0..4) as f64 / 4.0 } else { rng.gen_range(0.0..1.0) };
            Detection { bbox: rand_box(rng, 16.0), score }
        })
        .collect()
}

/// Exhaustive PR-curve oracle: for every score cutoff k, re-match the top-k
/// detections of each image from scratch and record (recall, precision).
pub fn ap_oracle(dets: &[Vec<Detection>], truths: &[Vec<BBox>], thr: f64) -> f64 {
    let n_truth: usize = truths.iter().map(Vec::len).sum();
    if n_truth == 0 {
        return 0.0;
    }
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        for (k, x) in d.iter().enumerate() {
            all.push((x.score, img, k));
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut curve = Vec::new();
    for cutoff in 1..=all.len() {
        let top = &all[..cutoff];
        let mut tp = 0;
        for (img, t) in truths.iter().enumerate() {
            let mut mine: Vec<&Detection> = top.iter().filter(|e| e.1 == img).map(|e| &dets[img][e.2]).collect();
            mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let mut used = vec![false; t.len()];
            for d in mine {
                let mut best: Option<(usize, f64)> = None;
                for (j, tb) in t.iter().enumerate() {
                    let v = iou(&d.bbox, tb).unwrap();
                    if !used[j] && v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                    tp += 1;
                }
            }
        }
        curve.push((tp as f64 / n_truth as f64, tp as f64 / cutoff as f64));
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            curve.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

pub fn random_fixture(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<BBox>>) {
    let images = rng.gen_range(1..=3);
    let mut total_d = rng.gen_range(0..=10);
    let mut total_t = rng.gen_range(1..=5);
    let mut dets = vec![Vec::new(); images];
    let mut truths = vec![Vec::new(); images];
    while total_t > 0 {
        let i = rng.gen_range(0..images);
        truths[i].push(rand_box(rng, 12.0));
        total_t -= 1;
    }
    while total_d > 0 {
        let i = rng.gen_range(0..images);
        // half the detections are jittered copies of a truth so matches occur
        let bbox = if !truths[i].is_empty() && rng.gen_bool(0.6) {
            let t = truths[i][rng.gen_range(0..truths[i].len())];
            let j = |r: &mut ChaCha8Rng| r.gen_range(-1.0..1.0);
            let (a, b, c, d) = (t.x_min + j(rng), t.y_min + j(rng), t.x_max + j(rng), t.y_max + j(rng));
            BBox::new(a.min(c - 0.1), b.min(d - 0.1), c, d).unwrap()
        } else {
            rand_box(rng, 12.0)
        };
        dets[i].push(Detection { bbox, score: rng.gen_range(0.0..1.0) });
        total_d -= 1;
    }
    (dets, truths)
}

pub struct Instance {
    pub sup: Supervision,
    pub mask: omnidet::annotations::RegionMask,
    pub raw: Vec<FeatureGrid>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, form: usize) -> Instance {
    let h = rng.gen_range(2..7usize) * 8;
    let w = rng.gen_range(2..7usize) * 8;
    let image = Image::zeros(h, w, 1);
    let sup = match form {
        0 => Supervision::BoxLabeled(
            (0..rng.gen_range(1..5))
                .map(|_| {
                    let bw = dyadic(rng, 2.0, (w as f64 / 2.0).max(3.0));
                    let bh = dyadic(rng, 2.0, (h as f64 / 2.0).max(3.0));
                    let x = dyadic(rng, 0.0, w as f64 - bw);
                    let y = dyadic(rng, 0.0, h as f64 - bh);
                    BBox::new(x, y, x + bw, y + bh).unwrap()
                })
                .collect(),
        ),
        1 => Supervision::DotLabeled(
            (0..rng.gen_range(1..4))
                .map(|_| Point { x: dyadic(rng, 0.0, w as f64 - 0.0625), y: dyadic(rng, 0.0, h as f64 - 0.0625) })
                .collect(),
        ),
        _ => Supervision::Unlabeled,
    };
    let pyramid = PyramidSpec::for_image(h, w, &[4, 8]).unwrap();
    let mask = build_region_mask(&image, &sup, &pyramid).unwrap();
    // coarse values make ties and constant regions common
    let coarse = rng.gen_bool(0.3);
    let raw = pyramid
        .levels
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let values = (0..s.cells())
                .map(|_| if coarse { rng.gen_range(0..3) as f64 / 4.0 } else { rng.gen_range(0.0..1.0) })
                .collect();
            FeatureGrid::new(l, s.stride, s.height, s.width, values).unwrap()
        })
        .collect();
    Instance { sup, mask, raw }
}

pub fn assign_raw(inst: &Instance, raw: Vec<FeatureGrid>, t: f64) -> AssignmentResult {
    let g = guidance_from_raw(raw, &inst.sup, &inst.mask, GuidanceSource::Igm).unwrap();
    assign(&inst.sup, &g, &inst.mask, t).unwrap()
}

pub fn positives(a: &AssignmentResult) -> Vec<(usize, usize)> {
    a.iter_cells().filter(|c| c.2 == CellLabel::Pos).map(|c| (c.0, c.1)).collect()
}
