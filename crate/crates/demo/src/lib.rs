//! Browser front end for a small omni-supervised training session.
//!
//! A [`Demo`] owns a generated dataset and a trainer. The page asks it for
//! the label assignment of a training image under a chosen threshold, runs
//! a few optimizer steps at a time, and overlays detections on held-out
//! images. Everything crosses the boundary as JSON strings or raw pixels.

use omnidet::annotations::{Sample, Split, Supervision, SupervisionKind};
use omnidet::assignment::{CellLabel, GuidanceSource};
use omnidet::inference::infer;
use omnidet::synthetic::{generate, GeneratorConfig, TrainingPools};
use omnidet::train::{sample_gradients, AssignmentRule, ExperimentConfig, Trainer};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn js_err(e: omnidet::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn kind_of(form: &str) -> Result<SupervisionKind, String> {
    SupervisionKind::ALL.into_iter().find(|k| k.name() == form).ok_or_else(|| format!("unknown form `{form}`"))
}

fn supervision_json(s: &Supervision) -> Value {
    match s {
        Supervision::BoxLabeled(b) => json!({ "boxes": b.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]).collect::<Vec<_>>() }),
        Supervision::DotLabeled(d) => json!({ "dots": d.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>() }),
        Supervision::Unlabeled => json!({}),
    }
}

#[wasm_bindgen]
pub struct Demo {
    cfg: ExperimentConfig,
    pools: TrainingPools,
    val: Vec<Sample>,
    trainer: Trainer,
    losses: Vec<f64>,
}

impl Demo {
    pub fn create(seed: u64) -> omnidet::Result<Demo> {
        let mut cfg = ExperimentConfig {
            generator: GeneratorConfig { seed, n_box: 24, n_dot: 24, n_unlabeled: 48, n_val: 12, n_test: 1, ..Default::default() },
            seed,
            threads: 1,
            ..ExperimentConfig::default()
        };
        cfg.burn_in = 100;
        let samples = generate(&cfg.generator)?;
        let pools = TrainingPools::from_samples(&samples);
        let val = samples.into_iter().filter(|s| s.split == Split::Val).collect();
        let trainer = Trainer::new(&cfg, &pools)?;
        Ok(Demo { cfg, pools, val, trainer, losses: Vec::new() })
    }

    /// Labels, guidance weights and region of every cell of one training
    /// image under the current parameters.
    pub fn assignment_value(&self, form: &str, index: usize, t: f64, source: &str) -> Result<Value, String> {
        let kind = kind_of(form)?;
        let pool = self.pools.pool(kind);
        let sample = pool.get(index % pool.len().max(1)).ok_or("empty pool")?;
        let source = match source {
            "igm" => GuidanceSource::Igm,
            "sgm" => GuidanceSource::Sgm,
            other => return Err(format!("unknown guidance `{other}`")),
        };
        let loss = omnidet::losses::LossConfig { t, ..self.cfg.loss.clone() };
        let active = self.cfg.regime.classifiers();
        let out = sample_gradients(&self.trainer.state, sample, AssignmentRule::Guided(source), &active, &loss)
            .map_err(|e| e.to_string())?;
        let pyramid = self.cfg.model.pyramid(sample.image.height, sample.image.width).map_err(|e| e.to_string())?;
        let levels: Vec<Value> = pyramid
            .levels
            .iter()
            .enumerate()
            .map(|(l, spec)| {
                let labels: String = out.assignment.labels[l]
                    .iter()
                    .map(|c| match c {
                        CellLabel::Pos => 'p',
                        CellLabel::Neg => 'n',
                        CellLabel::Ignore => '.',
                    })
                    .collect();
                json!({ "stride": spec.stride, "height": spec.height, "width": spec.width,
                        "labels": labels, "weights": out.assignment.weights[l] })
            })
            .collect();
        Ok(json!({
            "id": sample.id,
            "annotations": supervision_json(&sample.supervision),
            "levels": levels,
            "counts": out.assignment.counts,
            "guided": out.assignment.guided,
        }))
    }

    pub fn train_value(&mut self, steps: u32) -> Result<Value, String> {
        for _ in 0..steps {
            let r = self.trainer.step().map_err(|e| e.to_string())?;
            self.losses.push(r.loss.total);
        }
        Ok(json!({ "iteration": self.trainer.state.iteration, "losses": self.losses }))
    }

    pub fn detect_value(&self, index: usize) -> Result<Value, String> {
        let s = self.val.get(index % self.val.len().max(1)).ok_or("no validation images")?;
        let dets = infer(&self.trainer.state, &s.image, &self.cfg.inference_config()).map_err(|e| e.to_string())?;
        let truth = s.hidden_truth().unwrap_or(&[]);
        Ok(json!({
            "id": s.id,
            "detections": dets.iter().map(|d| json!({ "box": [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max], "score": d.score })).collect::<Vec<_>>(),
            "truth": truth.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]).collect::<Vec<_>>(),
        }))
    }

    fn image_of(&self, form: &str, index: usize) -> Result<&omnidet::annotations::Image, String> {
        if form == "val" {
            return self.val.get(index % self.val.len().max(1)).map(|s| &s.image).ok_or_else(|| "no validation images".into());
        }
        let pool = self.pools.pool(kind_of(form)?);
        pool.get(index % pool.len().max(1)).map(|s| &s.image).ok_or_else(|| "empty pool".into())
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsValue> {
        Demo::create(seed as u64).map_err(js_err)
    }

    /// Grayscale RGBA pixels of an image; `form` is box, dot, unlabeled or val.
    pub fn pixels(&self, form: &str, index: usize) -> Result<Vec<u8>, JsValue> {
        let img = self.image_of(form, index).map_err(|e| JsValue::from_str(&e))?;
        let (lo, hi) = img.data.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (hi - lo).max(1e-6);
        let mut out = Vec::with_capacity(img.height * img.width * 4);
        for px in img.data.chunks_exact(img.channels) {
            let g = ((px[0] - lo) / span * 255.0) as u8;
            out.extend_from_slice(&[g, g, g, 255]);
        }
        Ok(out)
    }

    #[wasm_bindgen(js_name = imageSize)]
    pub fn image_size(&self) -> usize {
        self.cfg.generator.image_size
    }

    pub fn assignment(&self, form: &str, index: usize, t: f64, source: &str) -> Result<String, JsValue> {
        self.assignment_value(form, index, t, source).map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
    }

    pub fn train(&mut self, steps: u32) -> Result<String, JsValue> {
        self.train_value(steps).map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
    }

    pub fn detect(&self, index: usize) -> Result<String, JsValue> {
        self.detect_value(index).map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
    }
}
