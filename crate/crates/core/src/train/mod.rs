//! Set-prediction training: matching, losses, AdamW and the deterministic loop.

mod loss;
mod matching;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_many, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::corpus::{BoundingBox, Corpus, ItemAnnotation, KeypointKind, KeypointPair, Keypoints};
use crate::error::{Error, Result};
use crate::model::{Detector, ForwardOptions, ModelConfig, SceneInput};
use crate::relate::ContextMatrices;
use crate::rng::{derive_seed, stream};
use crate::stats::CooccurrenceStats;

pub use loss::{
    cost_matrix, giou, giou_loss, layer_loss, pair_cost, set_loss, LayerLoss, LossBreakdown, LossWeights,
};
pub use matching::{hungarian_match, CostMatrix, MatchResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub weights: LossWeights,
    /// Losses on every decoder layer, not just the last.
    pub aux_loss: bool,
    /// Stop after this many steps, if set.
    pub max_steps: Option<usize>,
    pub shuffle: bool,
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            lr: 1e-4,
            lr_drop_epoch: None,
            lr_drop_factor: 0.1,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.1,
            weights: LossWeights::default(),
            aux_loss: true,
            max_steps: None,
            shuffle: true,
            checkpoint_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm > 0.0;
        if !ok {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_drop_epoch {
            Some(e) if epoch >= e => self.lr * self.lr_drop_factor,
            _ => self.lr,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64, c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, value) in params.values_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, p) in value.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps) + c.weight_decay * *p;
                *p -= lr * update;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub scene: String,
    pub total: f64,
    /// Weighted sums over layers.
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Forward + loss for one scene; returns the loss variable and its breakdown.
pub fn scene_loss(
    det: &Detector,
    tape: &mut Tape,
    p: &[Var],
    input: &SceneInput,
    gts: &[ItemAnnotation],
    stats: Option<&CooccurrenceStats>,
    config: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let out = det.forward(tape, p, input, stats)?;
    let layers = if config.aux_loss {
        &out.layers[..]
    } else {
        &out.layers[out.layers.len() - 1..]
    };
    set_loss(tape, layers, gts, &config.weights)
}

fn check_finite(step: usize, b: &LossBreakdown) -> Result<()> {
    for (l, t) in b.layers.iter().enumerate() {
        for (name, v) in [("cls", t.cls), ("l1", t.l1), ("giou", t.giou)] {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    term: format!("layer {} {name}", l + 1),
                    value: v,
                });
            }
        }
    }
    if !b.total.is_finite() {
        return Err(Error::Diverged {
            step,
            term: "total".into(),
            value: b.total,
        });
    }
    Ok(())
}

/// Stateful trainer over one detector.
pub struct Trainer<'a> {
    pub det: &'a mut Detector,
    pub stats: Option<&'a CooccurrenceStats>,
    pub config: TrainConfig,
    opt: AdamW,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(det: &'a mut Detector, stats: Option<&'a CooccurrenceStats>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(det.params());
        Ok(Trainer {
            det,
            stats,
            config,
            opt,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Forward, backward, clip and update on one scene.
    pub fn step(&mut self, input: &SceneInput, gts: &[ItemAnnotation], epoch: usize, scene: &str) -> Result<StepMetrics> {
        let mut tape = Tape::new();
        let p = self.det.params().bind(&mut tape);
        let (loss, breakdown) = scene_loss(self.det, &mut tape, &p, input, gts, self.stats, &self.config)?;
        check_finite(self.step, &breakdown)?;
        let grads = tape.backward(loss)?;
        let mut g: Vec<Vec<f64>> = self
            .det
            .params()
            .iter()
            .map(|(id, _, t)| grads.get_or_zeros(p[id.0], t.len()))
            .collect();
        let grad_norm = clip_grad_norm(&mut g, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                term: "grad_norm".into(),
                value: grad_norm,
            });
        }
        let lr = self.config.lr_at(epoch);
        self.opt.step(self.det.params_mut(), &g, lr, &self.config);
        let w = &self.config.weights;
        let metrics = StepMetrics {
            step: self.step,
            epoch,
            scene: scene.to_string(),
            total: breakdown.total,
            cls: breakdown.term("cls", w),
            l1: breakdown.term("l1", w),
            giou: breakdown.term("giou", w),
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs_completed: usize,
    /// Total loss per step.
    pub losses: Vec<f64>,
}

/// Scene visiting order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut stream(derive_seed(derive_seed(seed, 3), epoch as u64)));
    }
    order
}

/// Trains `det` on `corpus`. With `out_dir`, appends `metrics.jsonl` and writes
/// `ckpt-{epoch}.bin` after every epoch. `on_step` sees every step's metrics.
/// Where [`train_loop`] writes `metrics.jsonl` and per-epoch checkpoints;
/// `provenance` is stored in every checkpoint's metadata under `"run"`.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    pub provenance: &'a serde_json::Value,
}

impl<'a> TrainOutput<'a> {
    pub fn new(dir: &'a Path) -> Self {
        TrainOutput {
            dir,
            provenance: &serde_json::Value::Null,
        }
    }
}

pub fn train_loop(
    det: &mut Detector,
    corpus: &Corpus,
    stats: Option<&CooccurrenceStats>,
    config: &TrainConfig,
    seed: u64,
    output: Option<TrainOutput<'_>>,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainSummary> {
    if corpus.num_classes() != det.config().num_classes {
        return Err(Error::Config(format!(
            "corpus has {} classes, model expects {}",
            corpus.num_classes(),
            det.config().num_classes
        )));
    }
    if let Some(s) = stats {
        s.expect_classes(det.config().num_classes)?;
    }
    let out_dir = output.map(|o| o.dir);
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut trainer = Trainer::new(det, stats, config.clone())?;
    let mut losses = Vec::new();
    let mut epochs_completed = 0;
    'epochs: for epoch in 0..config.epochs {
        for i in epoch_order(corpus.len(), seed, epoch, config.shuffle) {
            if config.max_steps.is_some_and(|m| trainer.steps_done() >= m) {
                break 'epochs;
            }
            let scene = &corpus.scenes[i];
            let input = SceneInput::from_scene(scene)?;
            let m = trainer.step(&input, &scene.items, epoch, &scene.id)?;
            if let Some((f, path)) = log.as_mut() {
                let line = serde_json::to_string(&m)?;
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            losses.push(m.total);
            on_step(&m);
        }
        epochs_completed = epoch + 1;
        if let (Some(out), true) = (output, config.checkpoint_every_epoch) {
            let meta = serde_json::json!({
                "epoch": epoch,
                "step": trainer.steps_done(),
                "seed": seed,
                "train": config,
                "run": out.provenance,
            });
            let dir = out.dir;
            trainer.det.save(&dir.join(format!("ckpt-{epoch}.bin")), meta)?;
        }
    }
    Ok(TrainSummary {
        steps: trainer.steps_done(),
        epochs_completed,
        losses,
    })
}

/// The 2-query, 8-dim, 2-decoder-layer configuration used for end-to-end gradient checks.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 2,
        num_queries: 2,
        context_layers: Some(vec![2]),
        ffn_hidden: 8,
        stem_channels: 2,
        image_height: 8,
        image_width: 8,
        ..ModelConfig::default()
    }
}

/// A micro detector, one scene and one ground truth for end-to-end gradient
/// checks. Zero-initialized weights (biases, the context output map) are moved
/// off zero so every path, including the relation path, carries gradient.
pub fn micro_problem(seed: u64) -> Result<(Detector, SceneInput, Vec<ItemAnnotation>)> {
    let config = micro_config();
    let mut det = Detector::new(config.clone(), seed)?;
    let mut rng = stream(derive_seed(seed, 7));
    for v in det.params_mut().values_mut() {
        for x in v.data_mut() {
            if *x == 0.0 {
                *x = rng.random_range(-0.5..0.5);
            }
        }
    }
    let pixels = Tensor::from_fn(&[3, config.image_height, config.image_width], |_| rng.random());
    let mut keypoints = Keypoints::default();
    for (k, kind) in KeypointKind::ALL.into_iter().enumerate() {
        let y = 0.2 + 0.2 * k as f64;
        keypoints.pairs[kind.index()] = Some(KeypointPair {
            left: [0.45, y],
            right: [0.55, y],
            score_left: 0.9,
            score_right: 0.8,
        });
    }
    let gts = vec![ItemAnnotation {
        class_id: 6,
        bbox: BoundingBox::new(0.5, 0.55, 0.3, 0.25),
    }];
    Ok((det, SceneInput { pixels, keypoints }, gts))
}

/// Central-difference check of the full set loss with respect to every
/// parameter of [`micro_problem`]. Context tensors are detached by design, so
/// they are recorded once at the base point and held fixed while perturbing.
pub fn end_to_end_grad_check(seed: u64, stats: &CooccurrenceStats, h: f64) -> Result<GradCheckReport> {
    let (det, input, gts) = micro_problem(seed)?;
    let train = TrainConfig::default();
    let contexts: Vec<Option<ContextMatrices>> = {
        let mut tape = Tape::new();
        let p = det.params().bind_frozen(&mut tape);
        let out = det.forward(&mut tape, &p, &input, Some(stats))?;
        out.layers.into_iter().map(|l| l.context).collect()
    };
    let values: Vec<Tensor> = det.params().iter().map(|(_, _, t)| t.clone()).collect();
    grad_check_many(
        |tape, xs| {
            let opts = ForwardOptions {
                fixed_context: Some(&contexts),
                ..ForwardOptions::default()
            };
            let out = det.forward_with(tape, xs, &input, Some(stats), opts)?;
            Ok(set_loss(tape, &out.layers, &gts, &train.weights)?.0)
        },
        &values,
        h,
    )
}
