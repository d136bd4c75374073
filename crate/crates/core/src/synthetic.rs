//! Synthetic detection data with known ground truth, and the equal-sampling
//! batch scheduler.
//!
//! Objects are axis-aligned Gaussian blobs. The truth box of a blob is its
//! half-maximum ellipse's bounding box, so every pixel brighter than half the
//! blob's peak lies inside it. Elongated faint streaks act as distractors.
//! All coordinates sit on a 1/16 pixel grid, which keeps flips and target
//! encoding exact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{Image, Sample, Split, Supervision, SupervisionKind, TrainingSample};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};

const GRID: f64 = 16.0;

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Fraction of unlabeled/val/test images drawn with no objects.
    pub empty_fraction: f64,
    /// Range of truth box side lengths in pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Peak blob intensity above background.
    pub contrast: f64,
    /// Standard deviation of the additive Gaussian background noise.
    pub noise: f64,
    /// Upper bound on elongated distractor streaks per image.
    pub distractors_max: usize,
    pub seed: u64,
    pub n_box: usize,
    pub n_dot: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            objects_min: 1,
            objects_max: 3,
            empty_fraction: 0.1,
            size_min: 6.0,
            size_max: 16.0,
            contrast: 1.0,
            noise: 0.35,
            distractors_max: 2,
            seed: 0,
            n_box: 200,
            n_dot: 150,
            n_unlabeled: 400,
            n_val: 300,
            n_test: 100,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size as f64;
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max) {
            return Err(Error::Config(format!("invalid object size range [{}, {}]", self.size_min, self.size_max)));
        }
        if self.size_max >= s {
            return Err(Error::Config(format!("objects up to {} px do not fit a {s} px image", self.size_max)));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::Config("need 1 <= objects_min <= objects_max".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) || !(self.noise >= 0.0) || !(self.contrast > 0.0) {
            return Err(Error::Config("empty_fraction in [0,1], noise >= 0, contrast > 0 required".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_box + self.n_dot + self.n_unlabeled + self.n_val + self.n_test
    }
}

/// SplitMix64 finalizer, used to derive independent named sub-streams.
pub fn mix_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in stream.bytes().chain(index.to_le_bytes()) {
        z = z.wrapping_add(b as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// One rendered object: peak amplitude, center and half-maximum semi-axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub amplitude: f64,
}

impl Blob {
    /// Intensity at `(x, y)`; equals half the amplitude on the truth ellipse.
    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        let ln2 = std::f64::consts::LN_2;
        let u = (x - self.cx) / self.half_w;
        let v = (y - self.cy) / self.half_h;
        self.amplitude * (-ln2 * (u * u + v * v)).exp()
    }

    pub fn truth_box(&self) -> BBox {
        BBox { x_min: self.cx - self.half_w, y_min: self.cy - self.half_h, x_max: self.cx + self.half_w, y_max: self.cy + self.half_h }
    }
}

/// Generated sample together with the blobs that produced it.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: Image,
    pub blobs: Vec<Blob>,
}

/// Renders one image from its own RNG.
pub fn render(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, n_objects: usize) -> Rendered {
    let s = cfg.image_size as f64;
    let mut blobs: Vec<Blob> = Vec::with_capacity(n_objects);
    let mut attempts = 0;
    while blobs.len() < n_objects && attempts < 200 {
        attempts += 1;
        let half_w = snap(rng.gen_range(cfg.size_min..=cfg.size_max) * 0.5);
        let half_h = snap((half_w * 2.0 * rng.gen_range(0.7..=1.4)).clamp(cfg.size_min, cfg.size_max) * 0.5);
        let cx = snap(rng.gen_range(half_w..=s - half_w));
        let cy = snap(rng.gen_range(half_h..=s - half_h));
        let cand = Blob { cx, cy, half_w, half_h, amplitude: cfg.contrast * rng.gen_range(0.6..=1.0) };
        let b = cand.truth_box();
        if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > s || b.y_max > s {
            continue;
        }
        let clear = blobs.iter().all(|o| {
            let ob = o.truth_box();
            b.x_max + 2.0 <= ob.x_min || ob.x_max + 2.0 <= b.x_min || b.y_max + 2.0 <= ob.y_min || ob.y_max + 2.0 <= b.y_min
        });
        if clear {
            blobs.push(cand);
        }
    }

    let n_distract = if cfg.distractors_max > 0 { rng.gen_range(0..=cfg.distractors_max) } else { 0 };
    let streaks: Vec<(f64, f64, f64, f64, f64, f64)> = (0..n_distract)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let len = rng.gen_range(12.0..24.0);
            let width = rng.gen_range(1.0..2.0);
            (rng.gen_range(0.0..s), rng.gen_range(0.0..s), angle, len, width, cfg.contrast * rng.gen_range(0.4..0.8))
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid noise");
    let n = cfg.image_size;
    let mut data = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut v: f64 = blobs.iter().map(|b| b.intensity(x, y)).sum();
            for &(sx, sy, angle, len, width, amp) in &streaks {
                let (dx, dy) = (x - sx, y - sy);
                let along = dx * angle.cos() + dy * angle.sin();
                let across = -dx * angle.sin() + dy * angle.cos();
                v += amp * (-(along / len).powi(2) - (across / width).powi(2)).exp();
            }
            if cfg.noise > 0.0 {
                v += noise.sample(rng);
            }
            data.push(v as f32);
        }
    }
    Rendered { image: Image { height: n, width: n, channels: 1, data }, blobs }
}

/// Generates every split. Each sample draws from its own derived seed.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let plan = [
        (Split::TrainBox, cfg.n_box),
        (Split::TrainDot, cfg.n_dot),
        (Split::TrainUnlabeled, cfg.n_unlabeled),
        (Split::Val, cfg.n_val),
        (Split::Test, cfg.n_test),
    ];
    let mut out = Vec::with_capacity(cfg.total());
    let mut id = 0u64;
    for (split, count) in plan {
        for _ in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, "data", id));
            let annotated = matches!(split, Split::TrainBox | Split::TrainDot);
            let empty = !annotated && rng.gen_bool(cfg.empty_fraction);
            let n_obj = if empty { 0 } else { rng.gen_range(cfg.objects_min..=cfg.objects_max) };
            let r = render(cfg, &mut rng, n_obj);
            let truth: Vec<BBox> = r.blobs.iter().map(Blob::truth_box).collect();
            let supervision = match split {
                Split::TrainBox => Supervision::BoxLabeled(truth.clone()),
                Split::TrainDot => Supervision::DotLabeled(
                    truth.iter().map(|b| {
                        let (x, y) = b.center();
                        Point { x, y }
                    })
                    .collect(),
                ),
                _ => Supervision::Unlabeled,
            };
            out.push(Sample::new(id, split, r.image, supervision, Some(truth))?);
            id += 1;
        }
    }
    Ok(out)
}

/// Training pools per supervision form, without ground truth.
#[derive(Debug, Clone, Default)]
pub struct TrainingPools {
    pub box_labeled: Vec<TrainingSample>,
    pub dot_labeled: Vec<TrainingSample>,
    pub unlabeled: Vec<TrainingSample>,
}

impl TrainingPools {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut pools = Self::default();
        for s in samples {
            match s.split {
                Split::TrainBox => pools.box_labeled.push(s.training_view()),
                Split::TrainDot => pools.dot_labeled.push(s.training_view()),
                Split::TrainUnlabeled => pools.unlabeled.push(s.training_view()),
                Split::Val | Split::Test => {}
            }
        }
        pools
    }

    pub fn pool(&self, kind: SupervisionKind) -> &[TrainingSample] {
        match kind {
            SupervisionKind::Box => &self.box_labeled,
            SupervisionKind::Dot => &self.dot_labeled,
            SupervisionKind::Unlabeled => &self.unlabeled,
        }
    }
}

/// One scheduled draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub form: SupervisionKind,
    /// Index into the form's pool.
    pub index: usize,
    pub flip: bool,
}

struct FormStream {
    form: SupervisionKind,
    size: usize,
    order: Vec<usize>,
    cursor: usize,
    shuffle: ChaCha8Rng,
    flip: ChaCha8Rng,
}

/// Equal sampling across supervision forms: each step draws one sample per
/// active form, walking a fresh shuffle of that form's pool every epoch.
/// Every form has its own shuffle and flip streams, so a form's draw
/// sequence does not depend on which other forms are active.
pub struct BatchScheduler {
    streams: Vec<FormStream>,
    flip_prob: f64,
}

impl BatchScheduler {
    pub fn new(forms: &[SupervisionKind], pool_sizes: [usize; 3], seed: u64, flip_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(Error::Config(format!("flip probability must lie in [0, 1], got {flip_prob}")));
        }
        let mut streams = Vec::new();
        for kind in SupervisionKind::ALL {
            if !forms.contains(&kind) {
                continue;
            }
            let size = pool_sizes[kind as usize];
            if size == 0 {
                return Err(Error::EmptyPool(kind.name()));
            }
            streams.push(FormStream {
                form: kind,
                size,
                order: Vec::new(),
                cursor: 0,
                shuffle: ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("shuffle.{}", kind.name()), 0)),
                flip: ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("flip.{}", kind.name()), 0)),
            });
        }
        if streams.is_empty() {
            return Err(Error::Config("no supervision form selected".into()));
        }
        Ok(Self { streams, flip_prob })
    }

    pub fn forms(&self) -> Vec<SupervisionKind> {
        self.streams.iter().map(|s| s.form).collect()
    }

    /// Draws one item per active form, in box/dot/unlabeled order.
    pub fn next_batch(&mut self) -> Vec<BatchItem> {
        let p = self.flip_prob;
        self.streams
            .iter_mut()
            .map(|s| {
                if s.cursor == s.order.len() {
                    s.order = (0..s.size).collect();
                    s.order.shuffle(&mut s.shuffle);
                    s.cursor = 0;
                }
                let index = s.order[s.cursor];
                s.cursor += 1;
                let flip = s.flip.gen_bool(p);
                BatchItem { form: s.form, index, flip }
            })
            .collect()
    }

    /// Draws a batch and materializes the (possibly flipped) samples.
    pub fn next_samples(&mut self, pools: &TrainingPools) -> Vec<(SupervisionKind, TrainingSample)> {
        self.next_batch()
            .into_iter()
            .map(|item| {
                let s = &pools.pool(item.form)[item.index];
                (item.form, if item.flip { s.flipped() } else { s.clone() })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { n_box: 4, n_dot: 4, n_unlabeled: 6, n_val: 3, n_test: 3, seed: 9, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&GeneratorConfig { seed: 10, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_counts_and_supervision() {
        let s = generate(&small()).unwrap();
        assert_eq!(s.len(), 20);
        for x in &s {
            assert!(x.hidden_truth().is_some());
            match (&x.split, &x.supervision) {
                (Split::TrainBox, Supervision::BoxLabeled(b)) => assert_eq!(b.as_slice(), x.hidden_truth().unwrap()),
                (Split::TrainDot, Supervision::DotLabeled(d)) => {
                    let t = x.hidden_truth().unwrap();
                    assert_eq!(d.len(), t.len());
                    for (p, b) in d.iter().zip(t) {
                        assert_eq!((p.x, p.y), b.center());
                    }
                }
                (Split::TrainUnlabeled | Split::Val | Split::Test, Supervision::Unlabeled) => {}
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn empty_images_allowed() {
        let cfg = GeneratorConfig { empty_fraction: 1.0, ..small() };
        let s = generate(&cfg).unwrap();
        for x in s.iter().filter(|x| x.split == Split::TrainUnlabeled) {
            assert!(x.hidden_truth().unwrap().is_empty());
        }
    }

    #[test]
    fn infeasible_config_rejected() {
        assert!(generate(&GeneratorConfig { size_max: 80.0, ..small() }).is_err());
        assert!(generate(&GeneratorConfig { size_min: 0.0, ..small() }).is_err());
    }

    #[test]
    fn truth_box_bounds_half_maximum() {
        let cfg = GeneratorConfig { noise: 0.0, distractors_max: 0, ..small() };
        for i in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let r = render(&cfg, &mut rng, 3);
            for b in &r.blobs {
                let bx = b.truth_box();
                for row in 0..cfg.image_size {
                    for col in 0..cfg.image_size {
                        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                        if b.intensity(x, y) >= 0.5 * b.amplitude {
                            assert!(x >= bx.x_min && x <= bx.x_max && y >= bx.y_min && y <= bx.y_max);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn coordinates_are_dyadic() {
        for s in generate(&small()).unwrap() {
            for b in s.hidden_truth().unwrap() {
                for v in b.as_array() {
                    assert_eq!(v * GRID, (v * GRID).round());
                }
            }
        }
    }

    #[test]
    fn equal_sampling_counts() {
        let all = SupervisionKind::ALL;
        let mut sched = BatchScheduler::new(&all, [5, 7, 9], 1, 0.5).unwrap();
        let mut counts = [0usize; 3];
        for _ in 0..10 {
            let batch = sched.next_batch();
            assert_eq!(batch.len(), 3);
            for item in batch {
                counts[item.form as usize] += 1;
            }
        }
        assert_eq!(counts, [10, 10, 10]);
    }

    #[test]
    fn epoch_visits_each_sample_once() {
        let mut sched = BatchScheduler::new(&[SupervisionKind::Dot], [0, 4, 0], 3, 0.0).unwrap();
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..4).map(|_| sched.next_batch()[0].index).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn no_flip_keeps_samples() {
        let samples = generate(&small()).unwrap();
        let pools = TrainingPools::from_samples(&samples);
        let mut sched = BatchScheduler::new(&SupervisionKind::ALL, [4, 4, 6], 2, 0.0).unwrap();
        for _ in 0..8 {
            for (form, s) in sched.next_samples(&pools) {
                assert!(pools.pool(form).contains(&s));
            }
        }
    }

    #[test]
    fn form_streams_are_independent() {
        let mut a = BatchScheduler::new(&[SupervisionKind::Box], [5, 5, 5], 4, 0.5).unwrap();
        let mut b = BatchScheduler::new(&SupervisionKind::ALL, [5, 5, 5], 4, 0.5).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch()[0], b.next_batch()[0]);
        }
    }

    #[test]
    fn empty_pool_errors() {
        assert!(matches!(
            BatchScheduler::new(&SupervisionKind::ALL, [3, 0, 2], 0, 0.5),
            Err(Error::EmptyPool("dot"))
        ));
    }
}
