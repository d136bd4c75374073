//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Each check compares analytic derivatives with central differences over
//! many random configurations and records the worst relative error
//! `|a - n| / max(|a|, |n|, REL_FLOOR)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::annotations::{build_region_mask, Image, Supervision};
use crate::assignment::{assign, guidance_from_raw, AssignmentResult, GuidanceSource};
use crate::error::Result;
use crate::geometry::{giou_loss_with_grad, BBox, Point};
use crate::grid::FeatureGrid;
use crate::losses::{ca_negative, ca_positive, focal_negative, focal_positive, CaVariant, LossConfig};
use crate::model::{Branch, DetectorState, ModelConfig};
use crate::synthetic::mix_seed;
use crate::tape::{Tape, Tensor, Var};
use crate::train::form_loss;

/// Tolerance for single operations and loss formulas.
pub const ELEMENTARY_TOL: f64 = 1e-4;
/// Tolerance for gradients through the whole network.
pub const END_TO_END_TOL: f64 = 1e-3;
/// Denominator floor, so that two near-zero derivatives compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub configurations: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn configurations(&self) -> usize {
        self.checks.iter().map(|c| c.configurations).sum()
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<34} {:>7} {:>12} {:>9}  status\n", "check", "configs", "max rel err", "tol");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<34} {:>7} {:>12.3e} {:>9.0e}  {}\n",
                c.name,
                c.configurations,
                c.max_rel_err,
                c.tolerance,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Options for [`run`].
#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Configurations per check.
    pub configurations: usize,
    /// Parameters probed per end-to-end configuration.
    pub params_per_config: usize,
    /// Name of a check whose analytic gradient gets perturbed, as a
    /// negative control.
    pub corrupt: Option<String>,
}

impl GradcheckOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, configurations: 100, params_per_config: 20, corrupt: None }
    }
}

struct Recorder<'a> {
    opts: &'a GradcheckOptions,
    checks: Vec<CheckResult>,
}

impl Recorder<'_> {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.opts.seed, name, 0))
    }

    /// `pairs` yields (analytic, numeric) pairs per configuration.
    fn record(&mut self, name: &str, tolerance: f64, configurations: usize, pairs: Vec<(f64, f64)>) {
        let corrupt = self.opts.corrupt.as_deref() == Some(name);
        let max = pairs
            .iter()
            .map(|&(a, n)| rel_err(if corrupt { a * 1.01 + 1e-3 } else { a }, n))
            .fold(0.0, f64::max);
        self.checks.push(CheckResult {
            name: name.to_string(),
            configurations,
            max_rel_err: max,
            tolerance,
            passed: max <= tolerance && max.is_finite(),
        });
    }
}

/// Central difference of `f` at `x` with step `h`.
fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Fourth-order five-point difference; lets whole-loss checks take larger
/// steps so cancellation in sums of many cells stays below tolerance.
fn five_point(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

/// Runs every suite.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rec = Recorder { opts, checks: Vec::new() };
    tape_ops(&mut rec)?;
    giou(&mut rec)?;
    per_cell_losses(&mut rec);
    sample_losses(&mut rec)?;
    end_to_end(&mut rec)?;
    Ok(GradcheckReport { checks: rec.checks })
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Elementwise and layer operations, each reduced to a scalar through
/// random output weights.
fn tape_ops(rec: &mut Recorder) -> Result<()> {
    let n = rec.opts.configurations;
    // (name, input shapes, input range, builder)
    let ops: Vec<(&str, Vec<Vec<usize>>, (f64, f64), Build)> = vec![
        ("tape.add", vec![vec![6], vec![6]], (-2.0, 2.0), |t, v| t.add(v[0], v[1])),
        ("tape.mul", vec![vec![6], vec![6]], (-2.0, 2.0), |t, v| t.mul(v[0], v[1])),
        ("tape.sqrt", vec![vec![6]], (0.05, 3.0), |t, v| Ok(t.sqrt(v[0]))),
        ("tape.sigmoid", vec![vec![6]], (-6.0, 6.0), |t, v| Ok(t.sigmoid(v[0]))),
        ("tape.log", vec![vec![6]], (0.05, 3.0), |t, v| Ok(t.log(v[0]))),
        ("tape.clamp", vec![vec![6]], (-3.0, 3.0), |t, v| Ok(t.clamp(v[0], -1.0, 1.0))),
        ("tape.scale", vec![vec![6]], (-2.0, 2.0), |t, v| Ok(t.scale(v[0], -1.7))),
        ("tape.relu", vec![vec![6]], (-2.0, 2.0), |t, v| Ok(t.relu(v[0]))),
        ("tape.exp", vec![vec![6]], (-3.0, 3.0), |t, v| Ok(t.exp(v[0]))),
        ("tape.sum", vec![vec![2, 3]], (-2.0, 2.0), |t, v| Ok(t.sum(v[0]))),
        ("tape.upsample2x", vec![vec![2, 3, 2]], (-2.0, 2.0), |t, v| Ok(t.upsample2x(v[0]))),
        ("tape.conv2d.stride1", vec![vec![2, 5, 4], vec![3, 2, 3, 3], vec![3]], (-1.0, 1.0), |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, 1)
        }),
        ("tape.conv2d.stride2", vec![vec![2, 6, 5], vec![2, 2, 3, 3], vec![2]], (-1.0, 1.0), |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 1)
        }),
        ("tape.conv2d.pointwise", vec![vec![3, 3, 3], vec![2, 3, 1, 1], vec![2]], (-1.0, 1.0), |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, 0)
        }),
    ];
    for (name, shapes, (lo, hi), build) in ops {
        let mut rng = rec.rng(name);
        let mut pairs = Vec::new();
        for _ in 0..n {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let len = s.iter().product();
                    let data = (0..len).map(|_| away_from_kinks(&mut rng, lo, hi, name)).collect();
                    Tensor { shape: s.clone(), data }
                })
                .collect();
            let eval = |inputs: &[Tensor], weights: Option<&[f64]>| -> Result<(f64, Tape, Vec<Var>, Var)> {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
                let out = build(&mut tape, &vars)?;
                let value = match weights {
                    Some(w) => tape.value(out).data.iter().zip(w).map(|(a, b)| a * b).sum(),
                    None => 0.0,
                };
                Ok((value, tape, vars, out))
            };
            let (_, tape0, _, out0) = eval(&inputs, None)?;
            let weights: Vec<f64> = (0..tape0.value(out0).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, mut tape, vars, out) = eval(&inputs, Some(&weights))?;
            let seed = Tensor { shape: tape.shape(out).to_vec(), data: weights.clone() };
            let grads = tape.backward_with(vec![(out, seed)])?;
            for (k, input) in inputs.iter().enumerate() {
                let g = grads.get(vars[k]);
                for i in 0..input.len() {
                    // the stencil stays inside the clearance kept around kinks
                    let numeric = five_point(
                        |x| {
                            let mut perturbed = inputs.clone();
                            perturbed[k].data[i] = x;
                            eval(&perturbed, Some(&weights)).expect("same shapes").0
                        },
                        input.data[i],
                        2e-4,
                    );
                    pairs.push((g.data[i], numeric));
                }
            }
        }
        rec.record(name, ELEMENTARY_TOL, n, pairs);
    }
    Ok(())
}

/// Uniform draw that stays clear of the kinks of relu and clamp.
fn away_from_kinks(rng: &mut ChaCha8Rng, lo: f64, hi: f64, name: &str) -> f64 {
    loop {
        let x: f64 = rng.gen_range(lo..hi);
        let near = |k: f64| (x - k).abs() < 1e-3;
        let bad = match name {
            "tape.relu" => near(0.0),
            "tape.clamp" => near(-1.0) || near(1.0),
            _ => false,
        };
        if !bad {
            return x;
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0.0..20.0);
    let y = rng.gen_range(0.0..20.0);
    BBox::new(x, y, x + rng.gen_range(1.0..12.0), y + rng.gen_range(1.0..12.0)).expect("positive size")
}

fn giou(rec: &mut Recorder) -> Result<()> {
    let n = rec.opts.configurations.max(100) * 2;
    let mut rng = rec.rng("geometry.giou_loss");
    let mut pairs = Vec::new();
    for _ in 0..n {
        let truth = random_box(&mut rng);
        let pred = random_box(&mut rng);
        let (_, grad) = giou_loss_with_grad(&pred, &truth)?;
        for k in 0..4 {
            let numeric = central(
                |x| {
                    let mut a = pred.as_array();
                    a[k] = x;
                    giou_loss_with_grad(&BBox::from_array(a), &truth).expect("valid").0
                },
                pred.as_array()[k],
                1e-6,
            );
            pairs.push((grad[k], numeric));
        }
    }
    rec.record("geometry.giou_loss", ELEMENTARY_TOL, n, pairs);
    Ok(())
}

fn per_cell_losses(rec: &mut Recorder) {
    let n = rec.opts.configurations;
    type CellFn = fn(f64, f64, &LossConfig) -> (f64, f64);
    let cases: [(&str, CaVariant, CellFn); 6] = [
        ("loss.focal_positive", CaVariant::Verbatim, |p, _, c| focal_positive(p, c.gamma, c.epsilon)),
        ("loss.focal_negative", CaVariant::Verbatim, |p, _, c| focal_negative(p, c.gamma, c.epsilon)),
        ("loss.ca_positive.verbatim", CaVariant::Verbatim, ca_positive),
        ("loss.ca_negative.verbatim", CaVariant::Verbatim, ca_negative),
        ("loss.ca_positive.weighted", CaVariant::Weighted, ca_positive),
        ("loss.ca_negative.weighted", CaVariant::Weighted, ca_negative),
    ];
    for (name, variant, f) in cases {
        let mut rng = rec.rng(name);
        let mut pairs = Vec::new();
        for _ in 0..n {
            let cfg = LossConfig { gamma: rng.gen_range(0.0..3.0), ca_variant: variant, ..LossConfig::default() };
            let p = rng.gen_range(0.02..0.98);
            let w = rng.gen_range(0.02..0.98);
            let (_, d) = f(p, w, &cfg);
            pairs.push((d, central(|x| f(x, w, &cfg).0, p, 1e-7)));
        }
        rec.record(name, ELEMENTARY_TOL, n, pairs);
    }
}

fn random_grids(rng: &mut ChaCha8Rng, mask_levels: &[(u32, usize, usize)], lo: f64, hi: f64) -> Vec<FeatureGrid> {
    mask_levels
        .iter()
        .enumerate()
        .map(|(l, &(s, h, w))| {
            FeatureGrid::new(l, s, h, w, (0..h * w).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
        })
        .collect()
}

/// A random small sample of the given form on a 32x32 image with strides 4 and 8.
fn random_sample(rng: &mut ChaCha8Rng, form: usize) -> Supervision {
    match form {
        0 => Supervision::BoxLabeled(
            (0..rng.gen_range(1..4))
                .map(|_| {
                    let x = rng.gen_range(0.0..20.0);
                    let y = rng.gen_range(0.0..20.0);
                    BBox::new(x, y, x + rng.gen_range(4.0..12.0), y + rng.gen_range(4.0..12.0)).expect("box")
                })
                .collect(),
        ),
        1 => Supervision::DotLabeled(
            (0..rng.gen_range(1..4)).map(|_| Point { x: rng.gen_range(0.0..32.0), y: rng.gen_range(0.0..32.0) }).collect(),
        ),
        _ => Supervision::Unlabeled,
    }
}

fn assignment_for(rng: &mut ChaCha8Rng, sup: &Supervision, image: &Image, strides: &[u32], t: f64) -> Result<AssignmentResult> {
    let pyramid = crate::grid::PyramidSpec::for_image(image.height, image.width, strides)?;
    let mask = build_region_mask(image, sup, &pyramid)?;
    let dims: Vec<(u32, usize, usize)> = pyramid.levels.iter().map(|l| (l.stride, l.height, l.width)).collect();
    let raw = random_grids(rng, &dims, 0.0, 1.0);
    let g = guidance_from_raw(raw, sup, &mask, GuidanceSource::Igm)?;
    assign(sup, &g, &mask, t)
}

/// Classification and regression losses of whole samples with respect to
/// the branch outputs, under random assignments.
fn sample_losses(rec: &mut Recorder) -> Result<()> {
    let n = rec.opts.configurations;
    let image = Image::zeros(32, 32, 1);
    let strides = [4u32, 8];
    let dims = [(4u32, 8usize, 8usize), (8, 4, 4)];
    for (form, name) in [(0, "loss.sample.box"), (1, "loss.sample.dot"), (2, "loss.sample.unlabeled")] {
        for ca in [false, true] {
            let name = format!("{name}{}", if ca { ".ca" } else { "" });
            let mut rng = rec.rng(&name);
            let mut pairs = Vec::new();
            for c in 0..n {
                let sup = random_sample(&mut rng, form);
                let cfg = LossConfig {
                    gamma: rng.gen_range(0.0..3.0),
                    lambda: rng.gen_range(0.1..2.0),
                    beta: rng.gen_range(0.1..2.0),
                    ca_enabled: ca,
                    ca_variant: if c % 2 == 0 { CaVariant::Verbatim } else { CaVariant::Weighted },
                    normalize_by_positives: c % 3 == 0,
                    ..LossConfig::default()
                };
                let a = assignment_for(&mut rng, &sup, &image, &strides, cfg.t)?;
                let probs = random_grids(&mut rng, &dims, 0.02, 0.98);
                let offsets: Vec<crate::losses::OffsetGrid> = dims
                    .iter()
                    .map(|&(s, h, w)| crate::losses::OffsetGrid {
                        stride: s,
                        height: h,
                        width: w,
                        values: (0..4 * h * w).map(|_| rng.gen_range(0.5..10.0)).collect(),
                    })
                    .collect();
                let total = |p: &[FeatureGrid], o: &[crate::losses::OffsetGrid]| -> f64 {
                    form_loss(&sup, p, Some(o), &a, &cfg).expect("fixed inputs").0.total
                };
                let (_, seeds) = form_loss(&sup, &probs, Some(&offsets), &a, &cfg)?;
                // six random cells per seed grid; offset probes whose stencil
                // straddles a GIoU kink are skipped
                for (branch, level, grad) in seeds {
                    let len = grad.len();
                    let picks: Vec<usize> = (0..6).map(|_| rng.gen_range(0..len)).collect();
                    for i in picks {
                        let numeric = if branch == Branch::Loc {
                            let at = |x: f64| {
                                let mut o = offsets.clone();
                                o[level].values[i] = x;
                                total(&probs, &o)
                            };
                            let x0 = offsets[level].values[i];
                            let fine = central(at, x0, 1e-6);
                            if rel_err(fine, central(at, x0, 4e-6)) > ELEMENTARY_TOL / 10.0 {
                                continue;
                            }
                            fine
                        } else {
                            let x0 = probs[level].values[i];
                            five_point(
                                |x| {
                                    let mut p = probs.clone();
                                    p[level].values[i] = x;
                                    total(&p, &offsets)
                                },
                                x0,
                                1e-4,
                            )
                        };
                        pairs.push((grad[i], numeric));
                    }
                }
            }
            rec.record(&name, ELEMENTARY_TOL, n, pairs);
        }
    }
    Ok(())
}

/// Random parameters of a small network, checked against differences of
/// the full training loss with the assignment held fixed.
fn end_to_end(rec: &mut Recorder) -> Result<()> {
    let configs = rec.opts.configurations;
    let model = ModelConfig { backbone_channels: vec![4, 6, 8], fpn_channels: 6, head_channels: 4, head_convs: 1, ..ModelConfig::default() };
    for (form, name) in [(0, "model.end_to_end.box"), (1, "model.end_to_end.dot"), (2, "model.end_to_end.unlabeled")] {
        let mut rng = rec.rng(name);
        let mut pairs = Vec::new();
        for c in 0..configs {
            let mut state = DetectorState::new(model.clone(), mix_seed(rec.opts.seed, name, c as u64))?;
            // move the heads away from the prior so all terms carry gradient
            for p in &mut state.params {
                for v in &mut p.values {
                    *v += rng.gen_range(-0.05..0.05);
                }
            }
            let data = (0..32 * 32).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let image = Image::new(32, 32, 1, data)?;
            let sup = random_sample(&mut rng, form);
            let cfg = LossConfig { ca_enabled: c % 2 == 1, ..LossConfig::default() };
            let a = assignment_for(&mut rng, &sup, &image, &model.strides(), cfg.t)?;
            let own = Branch::classifier(sup.kind());
            let branches = if form == 0 { vec![own, Branch::Loc] } else { vec![own] };

            let total = |s: &DetectorState| -> Result<f64> {
                let fwd = s.forward_branches(&image, &branches)?;
                let offsets = fwd.offsets();
                Ok(form_loss(&sup, &fwd.probs(own).expect("own"), offsets.as_deref(), &a, &cfg)?.0.total)
            };
            let fwd = state.forward_branches(&image, &branches)?;
            let offsets = fwd.offsets();
            let (_, seeds) = form_loss(&sup, &fwd.probs(own).expect("own"), offsets.as_deref(), &a, &cfg)?;
            let grads = fwd.backward(seeds)?;

            // parameters that influence this loss: trunk plus the evaluated heads
            let prefixes: Vec<String> = ["backbone.", "lateral."]
                .iter()
                .map(|s| s.to_string())
                .chain(branches.iter().map(|b| format!("{}.", b.prefix())))
                .collect();
            let candidates: Vec<(usize, usize)> = state
                .params
                .iter()
                .enumerate()
                .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())))
                .flat_map(|(k, p)| (0..p.values.len()).map(move |i| (k, i)))
                .collect();
            // a difference whose stencil straddles a ReLU or GIoU kink says
            // nothing about the derivative; such probes are redrawn
            let mut taken = 0;
            for _ in 0..rec.opts.params_per_config * 10 {
                if taken == rec.opts.params_per_config {
                    break;
                }
                let (k, i) = candidates[rng.gen_range(0..candidates.len())];
                let x0 = state.params[k].values[i];
                let probe = std::cell::RefCell::new(state.clone());
                let at = |x: f64| -> f64 {
                    probe.borrow_mut().params[k].values[i] = x;
                    total(&probe.borrow()).expect("same shapes")
                };
                let fine = central(at, x0, 1e-6);
                let coarse = central(at, x0, 4e-6);
                if rel_err(fine, coarse) > END_TO_END_TOL / 10.0 {
                    continue;
                }
                pairs.push((grads[k][i], fine));
                taken += 1;
            }
        }
        rec.record(name, END_TO_END_TOL, configs, pairs);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(rel_err(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn small_run_passes_and_control_fails() {
        let mut opts = GradcheckOptions::new(3);
        opts.configurations = 10;
        opts.params_per_config = 5;
        let r = run(&opts).unwrap();
        assert!(r.passed(), "{}", r.table());
        opts.corrupt = Some("loss.ca_positive.verbatim".into());
        let r = run(&opts).unwrap();
        let f = r.failures();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].name, "loss.ca_positive.verbatim");
    }
}
