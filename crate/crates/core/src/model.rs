//! The detector: a small strided conv backbone, a top-down pyramid with 1×1
//! lateral merges, and a head with three classification branches (one per
//! supervision form) plus one localization branch, all shared across levels.
//!
//! Parameters are held as `f64` for the forward pass but every stored value
//! is kept exactly representable as `f32`; initialization and each optimizer
//! update round to single precision, so checkpoints are lossless.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{Image, SupervisionKind};
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, PyramidSpec};
use crate::losses::OffsetGrid;
use crate::tape::{Gradients, Tape, Tensor, Var};

/// Log-offset clamp before exponentiation.
const MAX_LOG_OFFSET: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    /// Number of pyramid levels, taken from the deepest stages.
    pub pyramid_levels: usize,
    pub fpn_channels: usize,
    pub head_channels: usize,
    /// 3×3 conv layers in each branch tower.
    pub head_convs: usize,
    /// Initial foreground probability of the classification branches.
    pub prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            backbone_channels: vec![8, 16, 32],
            pyramid_levels: 2,
            fpn_channels: 16,
            head_channels: 8,
            head_convs: 2,
            prior: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.pyramid_levels == 0 || self.pyramid_levels > self.backbone_channels.len() {
            return Err(Error::Config(format!(
                "pyramid_levels must be in 1..={} for {} backbone stages",
                self.backbone_channels.len(),
                self.backbone_channels.len()
            )));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::Config(format!("prior must lie in (0, 1), got {}", self.prior)));
        }
        if self.in_channels == 0 || self.fpn_channels == 0 || self.head_channels == 0 || self.backbone_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Strides of the pyramid levels, finest first.
    pub fn strides(&self) -> Vec<u32> {
        let n = self.backbone_channels.len();
        (n - self.pyramid_levels..n).map(|s| 1u32 << (s + 1)).collect()
    }

    pub fn pyramid(&self, height: usize, width: usize) -> Result<PyramidSpec> {
        PyramidSpec::for_image(height, width, &self.strides())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    ClsBox,
    ClsDot,
    ClsUnlabeled,
    Loc,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::ClsBox, Branch::ClsDot, Branch::ClsUnlabeled, Branch::Loc];

    pub fn classifier(kind: SupervisionKind) -> Branch {
        match kind {
            SupervisionKind::Box => Branch::ClsBox,
            SupervisionKind::Dot => Branch::ClsDot,
            SupervisionKind::Unlabeled => Branch::ClsUnlabeled,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Branch::ClsBox => "head.cls_box",
            Branch::ClsDot => "head.cls_dot",
            Branch::ClsUnlabeled => "head.cls_unlabeled",
            Branch::Loc => "head.loc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Parameters, optimizer buffers and iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    /// One momentum buffer per parameter, same length.
    pub momentum: Vec<Vec<f64>>,
    pub iteration: u64,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Param>,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, std: f64, bias: f64) {
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = (0..c_out * c_in * k * k).map(|_| round_f32(normal.sample(self.rng))).collect();
        self.params.push(Param { name: format!("{name}.weight"), shape: vec![c_out, c_in, k, k], values: w });
        self.params.push(Param { name: format!("{name}.bias"), shape: vec![c_out], values: vec![round_f32(bias); c_out] });
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl DetectorState {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng, params: Vec::new() };
        let mut c_in = config.in_channels;
        for (s, &c) in config.backbone_channels.iter().enumerate() {
            init.conv(&format!("backbone.{s}"), c, c_in, 3, he_std(c_in * 9), 0.0);
            c_in = c;
        }
        let first = config.backbone_channels.len() - config.pyramid_levels;
        for l in 0..config.pyramid_levels {
            let c = config.backbone_channels[first + l];
            init.conv(&format!("lateral.{l}"), config.fpn_channels, c, 1, he_std(c), 0.0);
        }
        let prior_bias = -((1.0 - config.prior) / config.prior).ln();
        for branch in Branch::ALL {
            let mut c = config.fpn_channels;
            for i in 0..config.head_convs {
                init.conv(&format!("{}.{i}", branch.prefix()), config.head_channels, c, 3, he_std(c * 9), 0.0);
                c = config.head_channels;
            }
            let (outs, bias) = if branch == Branch::Loc { (4, 0.0) } else { (1, prior_bias) };
            init.conv(&format!("{}.out", branch.prefix()), outs, c, 3, 0.01, bias);
        }
        let params = init.params;
        let momentum = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Ok(Self { config, params, momentum, iteration: 0 })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Runs the network on one image, recording every operation.
    pub fn forward(&self, image: &Image) -> Result<Forward> {
        self.forward_branches(image, &Branch::ALL)
    }

    /// As [`forward`](Self::forward) but only evaluates the listed head branches.
    pub fn forward_branches(&self, image: &Image, branches: &[Branch]) -> Result<Forward> {
        if image.channels != self.config.in_channels {
            return Err(Error::ShapeMismatch { left: vec![self.config.in_channels], right: vec![image.channels] });
        }
        let pyramid = self.config.pyramid(image.height, image.width)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.param(Tensor { shape: p.shape.clone(), data: p.values.clone() }))
            .collect();
        let by_name = |name: &str| -> Var { vars[self.param_index(name).expect("parameter layout")] };

        let input = tape.constant(Tensor::new(vec![image.channels, image.height, image.width], image.to_chw())?);
        let mut stages = Vec::with_capacity(self.config.backbone_channels.len());
        let mut x = input;
        for s in 0..self.config.backbone_channels.len() {
            let c = tape.conv2d(x, by_name(&format!("backbone.{s}.weight")), by_name(&format!("backbone.{s}.bias")), 2, 1)?;
            x = tape.relu(c);
            stages.push(x);
        }

        let first = stages.len() - self.config.pyramid_levels;
        let mut features = vec![x; self.config.pyramid_levels];
        let mut above: Option<Var> = None;
        for l in (0..self.config.pyramid_levels).rev() {
            let lat = tape.conv2d(stages[first + l], by_name(&format!("lateral.{l}.weight")), by_name(&format!("lateral.{l}.bias")), 1, 0)?;
            let merged = match above {
                Some(up) => {
                    let u = tape.upsample2x(up);
                    tape.add(lat, u)?
                }
                None => lat,
            };
            features[l] = merged;
            above = Some(merged);
        }

        let mut levels = Vec::with_capacity(features.len());
        for (l, &feat) in features.iter().enumerate() {
            let stride = pyramid.levels[l].stride as f64;
            let mut out = [None; 4];
            for &branch in branches {
                let mut h = feat;
                for i in 0..self.config.head_convs {
                    let p = format!("{}.{i}", branch.prefix());
                    let c = tape.conv2d(h, by_name(&format!("{p}.weight")), by_name(&format!("{p}.bias")), 1, 1)?;
                    h = tape.relu(c);
                }
                let p = format!("{}.out", branch.prefix());
                let logits = tape.conv2d(h, by_name(&format!("{p}.weight")), by_name(&format!("{p}.bias")), 1, 1)?;
                out[branch.index()] = Some(if branch == Branch::Loc {
                    let c = tape.clamp(logits, -MAX_LOG_OFFSET, MAX_LOG_OFFSET);
                    let e = tape.exp(c);
                    tape.scale(e, stride)
                } else {
                    tape.sigmoid(logits)
                });
            }
            levels.push(out);
        }
        Ok(Forward { tape, param_vars: vars, levels, pyramid })
    }
}

/// One recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    param_vars: Vec<Var>,
    levels: Vec<[Option<Var>; 4]>,
    pub pyramid: PyramidSpec,
}

impl Forward {
    /// Output node of `branch` at `level`, if that branch was evaluated.
    pub fn output(&self, branch: Branch, level: usize) -> Option<Var> {
        self.levels[level][branch.index()]
    }

    /// Post-sigmoid probabilities of a classification branch, per level.
    pub fn probs(&self, branch: Branch) -> Option<Vec<FeatureGrid>> {
        assert!(branch != Branch::Loc, "probs() reads classification branches");
        self.levels
            .iter()
            .enumerate()
            .map(|(l, outs)| {
                let v = outs[branch.index()]?;
                let spec = self.pyramid.levels[l];
                Some(FeatureGrid {
                    level_index: l,
                    stride: spec.stride,
                    height: spec.height,
                    width: spec.width,
                    values: self.tape.value(v).data.clone(),
                })
            })
            .collect()
    }

    /// Predicted edge distances in pixels, per level.
    pub fn offsets(&self) -> Option<Vec<OffsetGrid>> {
        self.levels
            .iter()
            .enumerate()
            .map(|(l, outs)| {
                let v = outs[Branch::Loc.index()]?;
                let spec = self.pyramid.levels[l];
                Some(OffsetGrid { stride: spec.stride, height: spec.height, width: spec.width, values: self.tape.value(v).data.clone() })
            })
            .collect()
    }

    /// Backpropagates upstream gradients given per `(branch, level)` and
    /// returns one gradient vector per parameter (zeros where nothing flowed).
    pub fn backward(mut self, seeds: Vec<(Branch, usize, Vec<f64>)>) -> Result<Vec<Vec<f64>>> {
        let mut tape_seeds = Vec::with_capacity(seeds.len());
        for (branch, level, grad) in seeds {
            let var = self.levels[level][branch.index()]
                .ok_or_else(|| Error::Config(format!("{branch:?} was not evaluated")))?;
            let shape = self.tape.shape(var).to_vec();
            tape_seeds.push((var, Tensor::new(shape, grad)?));
        }
        if tape_seeds.is_empty() {
            return Ok(self.param_vars.iter().map(|v| vec![0.0; self.tape.value(*v).len()]).collect());
        }
        let mut grads: Gradients = self.tape.backward_with(tape_seeds)?;
        Ok(self
            .param_vars
            .iter()
            .map(|&v| match grads.take(v) {
                Some(t) => t.data,
                None => vec![0.0; self.tape.value(v).len()],
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every_n_iters: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, momentum: 0.9, decay_factor: 0.1, decay_every_n_iters: 30000 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.decay_every_n_iters == 0 {
            return Err(Error::Config("decay_every_n_iters must be positive".into()));
        }
        Ok(())
    }

    /// Step schedule: `lr0 * decay_factor^(iteration / decay_every)`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.learning_rate * self.decay_factor.powi((iteration / self.decay_every_n_iters) as i32)
    }
}

/// `v <- m v + g; p <- p - lr(iteration) v`, results rounded to `f32`.
/// Rejects non-finite gradients before touching any parameter.
pub fn sgd_step(state: &mut DetectorState, grads: &[Vec<f64>], cfg: &OptimizerConfig, iteration: u64) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::ShapeMismatch { left: vec![state.params.len()], right: vec![grads.len()] });
    }
    for (p, g) in state.params.iter().zip(grads) {
        if g.len() != p.values.len() {
            return Err(Error::ShapeMismatch { left: p.shape.clone(), right: vec![g.len()] });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let lr = cfg.lr_at(iteration);
    for ((p, v), g) in state.params.iter_mut().zip(state.momentum.iter_mut()).zip(grads) {
        for ((pi, vi), gi) in p.values.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = round_f32(cfg.momentum * *vi + gi);
            *pi = round_f32(*pi - lr * *vi);
        }
    }
    state.iteration = iteration + 1;
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ODETCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (little-endian):
///
/// ```text
/// magic "ODETCKPT" | version u32 | iteration u64
/// config_len u32 | config as JSON
/// n_params u32
/// per parameter: name_len u32 | name utf-8 | ndims u32 | dims u32... | values f32...
/// per parameter, same order: momentum f32...
/// ```
pub fn save_checkpoint(state: &DetectorState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&state.iteration.to_le_bytes());
    let cfg = serde_json::to_vec(&state.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for p in &state.params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &p.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    for m in &state.momentum {
        for v in m {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let iteration = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let nd = r.u32()? as usize;
        let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let values = r.f32s(shape.iter().product())?;
        params.push(Param { name, shape, values });
    }
    let momentum = params.iter().map(|p| r.f32s(p.values.len())).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let state = DetectorState { config, params, momentum, iteration };
    let fresh = DetectorState::new(state.config.clone(), 0)?;
    let layout = |s: &DetectorState| s.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect::<Vec<_>>();
    if layout(&fresh) != layout(&state) {
        return Err(Error::Checkpoint("parameter layout does not match the stored model config".into()));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Image {
        Image::new(h, w, 1, (0..h * w).map(|i| ((i * 37 % 101) as f32) / 101.0).collect()).unwrap()
    }

    #[test]
    fn output_shapes_three_levels() {
        let cfg = ModelConfig { backbone_channels: vec![4, 4, 4, 4], pyramid_levels: 3, ..Default::default() };
        assert_eq!(cfg.strides(), vec![4, 8, 16]);
        let state = DetectorState::new(cfg, 1).unwrap();
        let f = state.forward(&image(64, 64)).unwrap();
        let dims: Vec<_> = f.probs(Branch::ClsBox).unwrap().iter().map(|g| (g.height, g.width)).collect();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4)]);
        for b in [Branch::ClsDot, Branch::ClsUnlabeled] {
            assert_eq!(f.probs(b).unwrap().len(), 3);
        }
        let off = f.offsets().unwrap();
        assert_eq!(off[2].values.len(), 4 * 16);
    }

    #[test]
    fn initial_probability_near_prior() {
        let state = DetectorState::new(ModelConfig::default(), 7).unwrap();
        let f = state.forward(&image(64, 64)).unwrap();
        let b0 = -((1.0f64 - 0.01) / 0.01).ln();
        assert!((crate::tape::sigmoid(b0) - 0.01).abs() < 1e-12);
        for b in [Branch::ClsBox, Branch::ClsDot, Branch::ClsUnlabeled] {
            for g in f.probs(b).unwrap() {
                for v in g.values {
                    assert!((v - 0.01).abs() < 0.005, "{v}");
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let state = DetectorState::new(ModelConfig::default(), 3).unwrap();
        let a = state.forward(&image(32, 32)).unwrap();
        let b = state.forward(&image(32, 32)).unwrap();
        assert_eq!(a.probs(Branch::ClsDot), b.probs(Branch::ClsDot));
        assert_eq!(a.offsets(), b.offsets());
    }

    #[test]
    fn rejects_indivisible_image() {
        let state = DetectorState::new(ModelConfig::default(), 3).unwrap();
        assert!(state.forward(&image(36, 32)).is_err());
        let rgb = Image::zeros(32, 32, 3);
        assert!(state.forward(&rgb).is_err());
    }

    #[test]
    fn params_are_f32_exact() {
        let state = DetectorState::new(ModelConfig::default(), 11).unwrap();
        for p in &state.params {
            assert!(p.values.iter().all(|v| (*v as f32) as f64 == *v), "{}", p.name);
        }
    }

    fn one_param_state(p0: f64) -> DetectorState {
        DetectorState {
            config: ModelConfig::default(),
            params: vec![Param { name: "p".into(), shape: vec![1], values: vec![p0] }],
            momentum: vec![vec![0.0]],
            iteration: 0,
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = one_param_state(1.0);
        let cfg = OptimizerConfig { learning_rate: 0.1, momentum: 0.0, ..Default::default() };
        sgd_step(&mut s, &[vec![2.0]], &cfg, 0).unwrap();
        assert_eq!(s.params[0].values[0], round_f32(0.8));
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn momentum_recurrence() {
        let mut s = one_param_state(0.0);
        let cfg = OptimizerConfig { learning_rate: 0.1, momentum: 0.9, ..Default::default() };
        sgd_step(&mut s, &[vec![1.0]], &cfg, 0).unwrap();
        sgd_step(&mut s, &[vec![1.0]], &cfg, 1).unwrap();
        assert!((s.params[0].values[0] + 0.29).abs() < 1e-7);
    }

    #[test]
    fn schedule_boundary() {
        let cfg = OptimizerConfig { learning_rate: 0.5, decay_factor: 0.1, decay_every_n_iters: 100, ..Default::default() };
        assert_eq!(cfg.lr_at(99), 0.5);
        assert!((cfg.lr_at(100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut s = one_param_state(1.0);
        let err = sgd_step(&mut s, &[vec![f64::NAN]], &OptimizerConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(s.params[0].values[0], 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = DetectorState::new(ModelConfig::default(), 5).unwrap();
        let grads: Vec<Vec<f64>> = state.params.iter().map(|p| p.values.iter().map(|v| v * 0.3 + 0.01).collect()).collect();
        sgd_step(&mut state, &grads, &OptimizerConfig::default(), 0).unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&state, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), state);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn backward_without_seeds_is_zero() {
        let state = DetectorState::new(ModelConfig::default(), 5).unwrap();
        let f = state.forward(&image(32, 32)).unwrap();
        let g = f.backward(vec![]).unwrap();
        assert!(g.iter().flatten().all(|v| *v == 0.0));
    }
}
