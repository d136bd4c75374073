//! Training loop, run artifacts and the ablation grid.
//!
//! A step draws one sample per active supervision form, assigns labels to
//! every grid cell, evaluates that form's loss terms and sums the parameter
//! gradients of the batch before a single SGD update.
//!
//! A run writes into its output directory:
//!
//! ```text
//! config.toml          the full ExperimentConfig
//! loss_log.jsonl       one StepRecord per line
//! checkpoints/         step_NNNNNN.ckpt, final.ckpt (last_good.ckpt on abort)
//! ap_report.json       ApReport on the evaluation split
//! timings.json         wall-clock seconds
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotations::{build_region_mask, Sample, Split, Supervision, SupervisionKind, TrainingSample};
use crate::assignment::{assign, center_region_assignment, guided_by_others, self_guided_map, AssignmentResult, GuidanceSource};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::grid::FeatureGrid;
use crate::inference::{ap_sweep, infer, ApReport, InferenceConfig};
use crate::losses::{box_cls_loss, box_reg_loss, dot_cls_loss, term_scale, unlabeled_cls_loss, LossConfig, LossReport, OffsetGrid};
use crate::model::{save_checkpoint, sgd_step, Branch, DetectorState, ModelConfig, OptimizerConfig};
use crate::synthetic::{mix_seed, BatchScheduler, GeneratorConfig, TrainingPools};

pub const ENV_OUT_DIR: &str = "OMNIDET_OUT_DIR";
pub const ENV_THREADS: &str = "OMNIDET_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BoxOnly,
    BoxDot,
    BoxDotUnlabeled,
}

impl Regime {
    pub fn forms(self) -> &'static [SupervisionKind] {
        match self {
            Regime::BoxOnly => &[SupervisionKind::Box],
            Regime::BoxDot => &[SupervisionKind::Box, SupervisionKind::Dot],
            Regime::BoxDotUnlabeled => &SupervisionKind::ALL,
        }
    }

    pub fn classifiers(self) -> Vec<Branch> {
        self.forms().iter().map(|k| Branch::classifier(*k)).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::BoxOnly => "box_only",
            Regime::BoxDot => "box_dot",
            Regime::BoxDotUnlabeled => "box_dot_unlabeled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub assignment: GuidanceSource,
    pub iterations: u64,
    /// Steps at the start during which box-labeled samples use the fixed
    /// center-region rule.
    pub burn_in: u64,
    /// Side fraction of the central region used by the fixed rule.
    pub center_fraction: f64,
    pub flip_prob: f64,
    /// Seeds parameter init, shuffling and flips. Data comes from
    /// `generator.seed`.
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub eval_split: Split,
    /// Restrict the test-time ensemble to the branches the regime trains.
    pub ensemble_trained_only: bool,
    pub output_dir: PathBuf,
    /// Evaluation workers; 0 means one per available core.
    pub threads: usize,
    pub deterministic: bool,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub inference: InferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            regime: Regime::BoxDotUnlabeled,
            assignment: GuidanceSource::Igm,
            iterations: 3000,
            burn_in: 500,
            center_fraction: 0.5,
            flip_prob: 0.5,
            seed: 0,
            checkpoint_every: 1000,
            eval_split: Split::Val,
            ensemble_trained_only: true,
            output_dir: PathBuf::from("runs/default"),
            threads: 0,
            deterministic: false,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig { decay_every_n_iters: 1000, ..OptimizerConfig::default() },
            inference: InferenceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if !(self.center_fraction > 0.0 && self.center_fraction <= 1.0) {
            return Err(Error::Config(format!("center_fraction must lie in (0, 1], got {}", self.center_fraction)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        if self.inference.branches.is_empty() || self.inference.branches.contains(&Branch::Loc) {
            return Err(Error::Config("inference.branches must list classification branches".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `OMNIDET_OUT_DIR` and `OMNIDET_THREADS` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(t) = std::env::var(ENV_THREADS) {
            self.threads = t.parse().map_err(|_| Error::Config(format!("{ENV_THREADS} must be an integer, got `{t}`")))?;
        }
        Ok(())
    }

    pub fn worker_threads(&self) -> usize {
        if self.deterministic {
            1
        } else if self.threads == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.threads
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        let mut inf = self.inference.clone();
        if self.ensemble_trained_only {
            inf.branches = self.regime.classifiers();
        }
        inf
    }

    /// Whether box-labeled samples use guided assignment at `iteration`.
    pub fn box_guided_at(&self, iteration: u64) -> bool {
        self.regime != Regime::BoxOnly && iteration >= self.burn_in
    }
}

/// How one sample's cells are partitioned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignmentRule {
    /// Central region of each box; box-labeled samples only.
    CenterRegion(f64),
    Guided(GuidanceSource),
}

/// Loss terms of one sample and the gradient they induce.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub form: SupervisionKind,
    /// Form's terms scaled by `term_scale`, before lambda/beta.
    pub report: LossReport,
    pub assignment: AssignmentResult,
    /// `None` when the form's weight is zero and nothing was backpropagated.
    pub grads: Option<Vec<Vec<f64>>>,
}

/// Forward, assignment, loss and backward for one training sample.
/// `active` lists the classification branches being trained; guidance is
/// drawn only from those.
pub fn sample_gradients(
    state: &DetectorState,
    sample: &TrainingSample,
    rule: AssignmentRule,
    active: &[Branch],
    cfg: &LossConfig,
) -> Result<SampleOutcome> {
    let form = sample.supervision.kind();
    let own = Branch::classifier(form);
    let pyramid = state.config.pyramid(sample.image.height, sample.image.width)?;
    let mask = build_region_mask(&sample.image, &sample.supervision, &pyramid)?;

    let others: Vec<Branch> = active.iter().copied().filter(|b| *b != own).collect();
    let mut branches = vec![own];
    if rule == AssignmentRule::Guided(GuidanceSource::Igm) {
        if others.is_empty() {
            return Err(Error::Config("inter-guided assignment needs a second trained branch".into()));
        }
        branches.extend(&others);
    }
    if form == SupervisionKind::Box {
        branches.push(Branch::Loc);
    }
    let fwd = state.forward_branches(&sample.image, &branches)?;
    let p_own = fwd.probs(own).expect("own branch evaluated");

    let assignment = match rule {
        AssignmentRule::CenterRegion(fraction) => match &sample.supervision {
            Supervision::BoxLabeled(boxes) => center_region_assignment(boxes, &mask, fraction),
            _ => return Err(Error::Config("the center-region rule applies to box-labeled samples only".into())),
        },
        AssignmentRule::Guided(GuidanceSource::Sgm) => {
            assign(&sample.supervision, &self_guided_map(&sample.supervision, &p_own, &mask)?, &mask, cfg.t)?
        }
        AssignmentRule::Guided(GuidanceSource::Igm) => {
            let probs: Vec<Vec<FeatureGrid>> = others.iter().map(|b| fwd.probs(*b).expect("evaluated")).collect();
            let refs: Vec<&[FeatureGrid]> = probs.iter().map(|p| p.as_slice()).collect();
            assign(&sample.supervision, &guided_by_others(&sample.supervision, &refs, &mask)?, &mask, cfg.t)?
        }
    };

    let offsets = if form == SupervisionKind::Box { fwd.offsets() } else { None };
    let (report, seeds) = form_loss(&sample.supervision, &p_own, offsets.as_deref(), &assignment, cfg)?;
    let grads = if seeds.is_empty() { None } else { Some(fwd.backward(seeds)?) };
    Ok(SampleOutcome { form, report, assignment, grads })
}

/// Upstream gradient for one head output: `(branch, level, dL/dout)`.
pub type Seed = (Branch, usize, Vec<f64>);

/// Loss terms of one sample under a fixed assignment, and the gradient of
/// the weighted total with respect to the head outputs. Forms with zero
/// weight produce no seeds. `offsets` is required for box-labeled samples.
pub fn form_loss(
    supervision: &Supervision,
    p_own: &[FeatureGrid],
    offsets: Option<&[OffsetGrid]>,
    assignment: &AssignmentResult,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<Seed>)> {
    let form = supervision.kind();
    let own = Branch::classifier(form);
    let mut report = LossReport::default();
    let mut seeds = Vec::new();
    match form {
        SupervisionKind::Box => {
            let cls = box_cls_loss(p_own, assignment, cfg)?;
            let offsets = offsets.ok_or_else(|| Error::Config("box-labeled loss needs localization output".into()))?;
            let reg = box_reg_loss(offsets, supervision.boxes(), assignment)?;
            let s = term_scale(cfg, cls.n_pos);
            report.box_reg = s * reg.value;
            report.box_pos = s * cls.positive;
            report.box_neg = s * cls.negative;
            report.counts.box_reg = reg.count;
            report.counts.box_pos = cls.n_pos;
            report.counts.box_neg = cls.n_neg;
            for (l, g) in cls.grad.into_iter().enumerate() {
                seeds.push((own, l, scaled(g, s)));
            }
            for (l, g) in reg.grad.into_iter().enumerate() {
                seeds.push((Branch::Loc, l, scaled(g, s)));
            }
        }
        SupervisionKind::Dot | SupervisionKind::Unlabeled => {
            let (cls, weight) = if form == SupervisionKind::Dot {
                (dot_cls_loss(p_own, assignment, cfg)?, cfg.lambda)
            } else {
                (unlabeled_cls_loss(p_own, assignment, cfg)?, cfg.beta)
            };
            let s = term_scale(cfg, cls.n_pos);
            if form == SupervisionKind::Dot {
                report.dot_pos = s * cls.positive;
                report.dot_neg = s * cls.negative;
                report.counts.dot_pos = cls.n_pos;
                report.counts.dot_neg = cls.n_neg;
            } else {
                report.unl_pos = s * cls.positive;
                report.unl_neg = s * cls.negative;
                report.counts.unl_pos = cls.n_pos;
                report.counts.unl_neg = cls.n_neg;
            }
            if weight != 0.0 {
                for (l, g) in cls.grad.into_iter().enumerate() {
                    seeds.push((own, l, scaled(g, weight * s)));
                }
            }
        }
    }
    Ok((report.finalize(cfg), seeds))
}

fn scaled(mut g: Vec<f64>, s: f64) -> Vec<f64> {
    if s != 1.0 {
        g.iter_mut().for_each(|v| *v *= s);
    }
    g
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Whether box-labeled samples used guided assignment.
    pub box_guided: bool,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Owns the model and the batch stream of one run.
pub struct Trainer {
    cfg: ExperimentConfig,
    pools: TrainingPools,
    scheduler: BatchScheduler,
    pub state: DetectorState,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, pools: &TrainingPools) -> Result<Self> {
        cfg.validate()?;
        let sizes = [pools.box_labeled.len(), pools.dot_labeled.len(), pools.unlabeled.len()];
        let scheduler = BatchScheduler::new(cfg.regime.forms(), sizes, cfg.seed, cfg.flip_prob).map_err(|e| match e {
            Error::EmptyPool(form) => Error::Data(format!(
                "no {form} training samples; regime `{}` needs one of each of {:?} (use a regime covering only the available forms, e.g. box_only)",
                cfg.regime.name(),
                cfg.regime.forms().iter().map(|k| k.name()).collect::<Vec<_>>()
            )),
            other => other,
        })?;
        let state = DetectorState::new(cfg.model.clone(), mix_seed(cfg.seed, "init", 0))?;
        Ok(Self { cfg: cfg.clone(), pools: pools.clone(), scheduler, state })
    }

    /// Runs one step and updates the parameters. On error the parameters are
    /// left as they were before the step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let iteration = self.state.iteration;
        let box_guided = self.cfg.box_guided_at(iteration);
        let active = self.cfg.regime.classifiers();
        let mut total = LossReport::default();
        let mut grads: Option<Vec<Vec<f64>>> = None;
        for (form, sample) in self.scheduler.next_samples(&self.pools) {
            let rule = if form == SupervisionKind::Box && !box_guided {
                AssignmentRule::CenterRegion(self.cfg.center_fraction)
            } else {
                AssignmentRule::Guided(self.cfg.assignment)
            };
            let out = sample_gradients(&self.state, &sample, rule, &active, &self.cfg.loss)?;
            accumulate_report(&mut total, &out.report);
            if let Some(g) = out.grads {
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
        }
        let total = total.finalize(&self.cfg.loss);
        if !total.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: iteration });
        }
        let grads = grads.unwrap_or_else(|| self.state.params.iter().map(|p| vec![0.0; p.values.len()]).collect());
        sgd_step(&mut self.state, &grads, &self.cfg.optimizer, iteration)?;
        Ok(StepRecord { step: iteration, lr: self.cfg.optimizer.lr_at(iteration), box_guided, loss: total })
    }
}

fn accumulate_report(acc: &mut LossReport, r: &LossReport) {
    acc.box_reg += r.box_reg;
    acc.box_pos += r.box_pos;
    acc.box_neg += r.box_neg;
    acc.dot_pos += r.dot_pos;
    acc.dot_neg += r.dot_neg;
    acc.unl_pos += r.unl_pos;
    acc.unl_neg += r.unl_neg;
    let (a, c) = (&mut acc.counts, &r.counts);
    a.box_reg += c.box_reg;
    a.box_pos += c.box_pos;
    a.box_neg += c.box_neg;
    a.dot_pos += c.dot_pos;
    a.dot_neg += c.dot_neg;
    a.unl_pos += c.unl_pos;
    a.unl_neg += c.unl_neg;
}

/// Detections and ground truth for every sample of `split`.
pub fn evaluate(
    state: &DetectorState,
    samples: &[Sample],
    split: Split,
    cfg: &InferenceConfig,
    threads: usize,
) -> Result<(ApReport, Vec<Vec<Detection>>)> {
    let chosen: Vec<&Sample> = samples.iter().filter(|s| s.split == split).collect();
    if chosen.is_empty() {
        return Err(Error::Data(format!("split `{split:?}` has no samples")));
    }
    let mut truths = Vec::with_capacity(chosen.len());
    for s in &chosen {
        let t = s.hidden_truth().ok_or_else(|| Error::Data(format!("sample {} has no ground truth", s.id)))?;
        truths.push(t.to_vec());
    }
    let detections = parallel_map(chosen.len(), threads, |i| infer(state, &chosen[i].image, cfg))?;
    Ok((ap_sweep(&detections, &truths), detections))
}

/// `f(0..n)` on up to `threads` scoped workers, results in index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every index ran")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub config: ExperimentConfig,
    pub state: DetectorState,
    pub log: Vec<StepRecord>,
    pub report: ApReport,
    pub timings: Timings,
}

fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Trains from scratch and evaluates on `cfg.eval_split`. With `out` set,
/// writes the artifact files as training proceeds.
pub fn run_experiment(cfg: &ExperimentConfig, samples: &[Sample], out: Option<&Path>) -> Result<RunArtifact> {
    cfg.validate()?;
    let pools = TrainingPools::from_samples(samples);
    let mut trainer = Trainer::new(cfg, &pools)?;

    let ckpt_dir = out.map(|d| d.join("checkpoints"));
    let mut log_file = None;
    if let (Some(dir), Some(ckpt)) = (out, &ckpt_dir) {
        fs::create_dir_all(ckpt).map_err(|e| Error::io(ckpt, e))?;
        let p = dir.join("config.toml");
        fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("loss_log.jsonl");
        log_file = Some((BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?), p));
        save_checkpoint(&trainer.state, &ckpt.join(checkpoint_name(0)))?;
    }

    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations as usize);
    for _ in 0..cfg.iterations {
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let Some(ckpt) = &ckpt_dir {
                    save_checkpoint(&trainer.state, &ckpt.join("last_good.ckpt"))?;
                }
                if let Some((w, p)) = log_file.as_mut() {
                    w.flush().map_err(|err| Error::io(p.as_path(), err))?;
                }
                return Err(e);
            }
        };
        if let Some((w, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(record);
        let done = trainer.state.iteration;
        if let Some(ckpt) = &ckpt_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                save_checkpoint(&trainer.state, &ckpt.join(checkpoint_name(done)))?;
            }
        }
    }
    if let Some((w, p)) = log_file.as_mut() {
        w.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    let train_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let (report, _) = evaluate(&trainer.state, samples, cfg.eval_split, &cfg.inference_config(), cfg.worker_threads())?;
    let timings = Timings { train_seconds, eval_seconds: started.elapsed().as_secs_f64() };

    if let (Some(dir), Some(ckpt)) = (out, &ckpt_dir) {
        if cfg.iterations > 0 {
            save_checkpoint(&trainer.state, &ckpt.join("final.ckpt"))?;
        }
        write_json(&dir.join("ap_report.json"), &report)?;
        write_json(&dir.join("timings.json"), &timings)?;
    }
    Ok(RunArtifact { config: cfg.clone(), state: trainer.state, log, report, timings })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub regime: Regime,
    pub assignment: GuidanceSource,
    pub ca: bool,
}

impl AblationCell {
    pub fn new(regime: Regime, assignment: GuidanceSource, ca: bool) -> Self {
        let name = if regime == Regime::BoxOnly {
            "box_only".to_string()
        } else {
            let r = if regime == Regime::BoxDot { "bd" } else { "bdu" };
            let a = if assignment == GuidanceSource::Igm { "igm" } else { "sgm" };
            format!("{r}_{a}{}", if ca { "_ca" } else { "" })
        };
        Self { name, regime, assignment, ca }
    }

    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.regime = self.regime;
        cfg.assignment = self.assignment;
        cfg.loss.ca_enabled = self.ca;
        cfg.seed = seed;
        cfg
    }
}

/// Supervised baseline followed by {SGM, IGM} x {no CA, CA} for both
/// multi-form regimes.
pub fn ablation_grid() -> Vec<AblationCell> {
    let mut cells = vec![AblationCell::new(Regime::BoxOnly, GuidanceSource::Igm, false)];
    for regime in [Regime::BoxDot, Regime::BoxDotUnlabeled] {
        for assignment in [GuidanceSource::Sgm, GuidanceSource::Igm] {
            for ca in [false, true] {
                cells.push(AblationCell::new(regime, assignment, ca));
            }
        }
    }
    cells
}

/// Cells whose names appear in `names`, in grid order. Unknown names error.
pub fn select_cells(names: &[String]) -> Result<Vec<AblationCell>> {
    let grid = ablation_grid();
    for n in names {
        if !grid.iter().any(|c| &c.name == n) {
            let known: Vec<&str> = grid.iter().map(|c| c.name.as_str()).collect();
            return Err(Error::Config(format!("unknown ablation cell `{n}`; known: {}", known.join(", "))));
        }
    }
    Ok(grid.into_iter().filter(|c| names.contains(&c.name)).collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// `sqrt((sd_a^2 + sd_b^2) / 2)`.
pub fn pooled_sd(a: &[f64], b: &[f64]) -> f64 {
    ((sample_sd(a).powi(2) + sample_sd(b).powi(2)) / 2.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    pub seeds: Vec<u64>,
    pub map: Vec<f64>,
    pub ap50: Vec<f64>,
}

impl CellResult {
    pub fn map_mean(&self) -> f64 {
        mean(&self.map)
    }

    pub fn ap50_mean(&self) -> f64 {
        mean(&self.ap50)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell.name == name)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:>5} {:>17} {:>17}\n", "cell", "runs", "mAP", "AP50");
        for c in &self.cells {
            out.push_str(&format!(
                "{:<14} {:>5} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}\n",
                c.cell.name,
                c.map.len(),
                c.map_mean(),
                sample_sd(&c.map),
                c.ap50_mean(),
                sample_sd(&c.ap50)
            ));
        }
        out
    }
}

/// Trains every (cell, seed) pair on `samples` and collects the reports.
/// Runs are spread over `threads` workers; results do not depend on it.
/// With `out` set, each run writes its artifact to `out/<cell>/seed_<s>`.
pub fn run_ablation(
    base: &ExperimentConfig,
    samples: &[Sample],
    cells: &[AblationCell],
    seeds: &[u64],
    threads: usize,
    out: Option<&Path>,
    progress: &(dyn Fn(&AblationCell, u64, &ApReport) + Sync),
) -> Result<AblationReport> {
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let reports = parallel_map(jobs.len(), threads, |j| {
        let (c, seed) = jobs[j];
        let mut cfg = cells[c].apply(base, seed);
        // one worker per run; the runs themselves are the parallel unit
        cfg.threads = 1;
        let dir = out.map(|o| o.join(&cells[c].name).join(format!("seed_{seed}")));
        let artifact = run_experiment(&cfg, samples, dir.as_deref())?;
        progress(&cells[c], seed, &artifact.report);
        Ok(artifact.report)
    })?;
    let mut results: Vec<CellResult> = cells
        .iter()
        .map(|c| CellResult { cell: c.clone(), seeds: Vec::new(), map: Vec::new(), ap50: Vec::new() })
        .collect();
    for ((c, seed), r) in jobs.into_iter().zip(reports) {
        results[c].seeds.push(seed);
        results[c].map.push(r.map);
        results[c].ap50.push(r.ap50);
    }
    Ok(AblationReport { cells: results })
}

/// Boxes of the evaluation split, for oracle checks.
pub fn split_truths(samples: &[Sample], split: Split) -> Vec<Vec<BBox>> {
    samples
        .iter()
        .filter(|s| s.split == split)
        .map(|s| s.hidden_truth().map(<[BBox]>::to_vec).unwrap_or_default())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.generator = GeneratorConfig {
            image_size: 32,
            size_min: 5.0,
            size_max: 10.0,
            n_box: 4,
            n_dot: 3,
            n_unlabeled: 5,
            n_val: 3,
            n_test: 2,
            ..GeneratorConfig::default()
        };
        cfg.iterations = 3;
        cfg.burn_in = 1;
        cfg.threads = 1;
        cfg
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_toml("iterations = 7\n[loss]\nlambda = 0.5\n").unwrap();
        assert_eq!(partial.iterations, 7);
        assert_eq!(partial.loss.lambda, 0.5);
        assert_eq!(partial.loss.gamma, 2.0);
    }

    #[test]
    fn bad_config_is_config_error() {
        let e = ExperimentConfig::from_toml("flip_prob = 2.0").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::from_toml("regime = \"everything\"").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn grid_has_baseline_and_eight_cells() {
        let g = ablation_grid();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0].name, "box_only");
        assert!(g.iter().any(|c| c.name == "bdu_igm_ca"));
        assert!(select_cells(&["nope".into()]).is_err());
        let s = select_cells(&["bdu_igm".into(), "box_only".into()]).unwrap();
        assert_eq!(s[0].name, "box_only");
    }

    #[test]
    fn stats() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((sample_sd(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(sample_sd(&[4.0]), 0.0);
        assert!((pooled_sd(&[1.0, 3.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn short_run_logs_every_step() {
        let cfg = tiny();
        let samples = generate(&cfg.generator).unwrap();
        let a = run_experiment(&cfg, &samples, None).unwrap();
        assert_eq!(a.log.len(), 3);
        assert!(!a.log[0].box_guided);
        assert!(a.log[1].box_guided);
        assert_eq!(a.state.iteration, 3);
        for r in &a.log {
            assert!(r.loss.total.is_finite());
            assert!(r.loss.counts.box_pos >= 1);
            assert!(r.loss.counts.unl_pos + r.loss.counts.unl_neg > 0);
        }
    }

    #[test]
    fn missing_pool_names_degraded_mode() {
        let mut cfg = tiny();
        cfg.generator.n_dot = 0;
        let samples = generate(&cfg.generator).unwrap();
        let pools = TrainingPools::from_samples(&samples);
        let e = Trainer::new(&cfg, &pools).err().unwrap();
        assert!(e.to_string().contains("box_only"), "{e}");
        cfg.regime = Regime::BoxOnly;
        assert!(Trainer::new(&cfg, &pools).is_ok());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v = parallel_map(17, 4, |i| Ok(i * i)).unwrap();
        assert_eq!(v, (0..17).map(|i| i * i).collect::<Vec<_>>());
        assert!(parallel_map(5, 3, |i| if i == 3 { Err(Error::Config("x".into())) } else { Ok(i) }).is_err());
    }
}
