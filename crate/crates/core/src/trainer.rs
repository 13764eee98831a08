//! Minibatch training: learning-rate schedule, batching, optimizers, the
//! epoch loop and resumable training state.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, predict, Checkpoint, ModelConfig, ModelState, Scene};
use crate::params::{apply_bn_stats, round_to_f32, Forward, Mode, ParamKind, BN_MOMENTUM};
use crate::tensor::{Real, Tape, Tensor};

/// How a minibatch of training pixels is turned into a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchUnit {
    /// One forward pass over the whole raster and graph; the loss covers the
    /// batch pixels only.
    #[default]
    NodeBatch,
    /// One square patch per batch pixel, each with its own graph; the loss
    /// covers the pixel the patch was cut around.
    Patch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Gradient descent with heavy-ball momentum.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Coefficient of the squared-norm penalty on weight tensors.
    pub weight_reg: f64,
    pub seed: u64,
    pub batch_unit: BatchUnit,
    /// Side of the square patches used by [`BatchUnit::Patch`].
    pub patch_size: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Momentum of [`OptimizerKind::Sgd`].
    pub momentum: f64,
    /// Global gradient norm above which gradients are rescaled; 0 disables clipping.
    pub clip_norm: f64,
    /// Training accuracy is measured every this many epochs and after the last one.
    pub train_oa_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            minibatch_size: 7,
            lr_initial: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 50,
            weight_reg: 1e-3,
            seed: 0,
            batch_unit: BatchUnit::NodeBatch,
            patch_size: 27,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.9,
            clip_norm: 5.0,
            train_oa_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be at least 1");
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad("lr_initial must be positive");
        }
        if !(self.weight_reg >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("weight_reg and clip_norm must be non-negative");
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return bad("patch_size must be odd");
        }
        if self.train_oa_every == 0 {
            return bad("train_oa_every must be at least 1");
        }
        Ok(())
    }
}

/// `lr_initial · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!("epoch {epoch} is outside a {}-epoch schedule", cfg.epochs)));
    }
    Ok(cfg.lr_initial * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32))
}

/// Shuffle generator for one epoch, derived from the run seed.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64)
}

/// Shuffles the training pixels and cuts them into batches of
/// `minibatch_size`; the last batch may be shorter.
pub fn make_batches(train_pixels: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = train_pixels.to_vec();
    order.shuffle(rng);
    order.chunks(cfg.minibatch_size).map(<[usize]>::to_vec).collect()
}

/// A scene with per-pixel 0-based training targets.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub scene: Scene,
    /// Target class of every pixel that may enter the loss.
    pub targets: Vec<Option<usize>>,
    pub train_pixels: Vec<usize>,
}

impl TrainData {
    /// Uses every pixel with a target as a training pixel.
    pub fn new(scene: Scene, targets: Vec<Option<usize>>) -> Result<Self> {
        if targets.len() != scene.pixels() {
            return Err(Error::Dimension(format!("{} targets for {} pixels", targets.len(), scene.pixels())));
        }
        let train_pixels: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
        if train_pixels.is_empty() {
            return Err(Error::Data("the training mask is empty".into()));
        }
        Ok(TrainData { scene, targets, train_pixels })
    }
}

/// First-order optimizer state, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: BTreeMap<String, Vec<Real>>,
    second: BTreeMap<String, Vec<Real>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(
        &mut self,
        model: &mut ModelState,
        grads: &[(String, Vec<Real>)],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1 as Real, cfg.beta2 as Real);
        let lr = lr as Real;
        for (name, g) in grads {
            let p = model.params.get_mut(name)?;
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            match self.kind {
                OptimizerKind::Adam => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps as Real);
                    }
                    round_to_f32(v);
                }
                OptimizerKind::Sgd => {
                    let mu = cfg.momentum as Real;
                    for ((w, &gi), mi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = mu * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
            }
            round_to_f32(m);
        }
        Ok(())
    }

    fn save_into(&self, ck: &mut Checkpoint) {
        for (name, m) in &self.first {
            ck.push(format!("opt.m/{name}"), Tensor::new([m.len()], m.clone()).expect("1-d"));
        }
        for (name, v) in &self.second {
            ck.push(format!("opt.v/{name}"), Tensor::new([v.len()], v.clone()).expect("1-d"));
        }
    }

    fn load_from(kind: OptimizerKind, step: u64, ck: &Checkpoint) -> Self {
        let mut opt = Optimizer::new(kind);
        opt.step = step;
        for (name, t) in &ck.records {
            if let Some(n) = name.strip_prefix("opt.m/") {
                opt.first.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix("opt.v/") {
                opt.second.insert(n.to_string(), t.data().to_vec());
            }
        }
        opt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed by the end of the epoch.
    pub step: usize,
    pub lr: f64,
    /// Mean training objective over the epoch's batches.
    pub loss: f64,
    pub train_oa: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Not serialized, so checkpoints of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// `epoch,step,lr,loss,train_oa`, one row per epoch.
    pub fn epoch_csv(&self) -> String {
        let mut s = String::from("epoch,step,lr,loss,train_oa\n");
        for e in &self.epochs {
            let oa = e.train_oa.map(|v| format!("{v:.6}")).unwrap_or_default();
            s += &format!("{},{},{:e},{:.10e},{}\n", e.epoch, e.step, e.lr, e.loss, oa);
        }
        s
    }

    /// `epoch,step,lr,loss`, one row per optimizer step.
    pub fn step_csv(&self) -> String {
        let mut s = String::from("epoch,step,lr,loss\n");
        for r in &self.steps {
            s += &format!("{},{},{:e},{:.17e}\n", r.epoch, r.step, r.lr, r.loss);
        }
        s
    }

    pub fn final_train_oa(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.train_oa)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Progress {
    epoch: usize,
    next_batch: usize,
    step: usize,
    loss_sum: f64,
    batches_done: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    progress: Progress,
    optimizer_steps: u64,
    report: TrainReport,
}

/// Resumable training state: the model, the optimizer and the position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelState,
    pub cfg: TrainConfig,
    opt: Optimizer,
    progress: Progress,
    report: TrainReport,
}

impl Trainer {
    pub fn new(model: ModelState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            opt: Optimizer::new(cfg.optimizer),
            cfg,
            progress: Progress::default(),
            report: TrainReport::default(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.cfg.epochs
    }

    pub fn epoch(&self) -> usize {
        self.progress.epoch
    }

    pub fn steps_done(&self) -> usize {
        self.progress.step
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn into_parts(self) -> (ModelState, TrainReport) {
        (self.model, self.report)
    }

    /// Runs batches until the schedule ends or `max_steps` optimizer steps
    /// have been taken in this call.
    pub fn run(&mut self, data: &TrainData, max_steps: Option<usize>) -> Result<()> {
        let started = Instant::now();
        let mut taken = 0;
        while !self.is_finished() && max_steps.map_or(true, |m| taken < m) {
            let epoch = self.progress.epoch;
            let lr = lr_at_epoch(&self.cfg, epoch)?;
            let batches = make_batches(&data.train_pixels, &self.cfg, &mut epoch_rng(self.cfg.seed, epoch));
            while self.progress.next_batch < batches.len() && max_steps.map_or(true, |m| taken < m) {
                let b = self.progress.next_batch;
                let loss = self.step(data, &batches[b], epoch, b, lr)?;
                self.progress.step += 1;
                self.progress.next_batch += 1;
                self.progress.loss_sum += loss;
                self.progress.batches_done += 1;
                self.report.steps.push(StepRecord { epoch, step: self.progress.step, lr, loss });
                taken += 1;
            }
            if self.progress.next_batch == batches.len() {
                self.finish_epoch(data, epoch, lr)?;
            }
        }
        self.report.wall_time_secs += started.elapsed().as_secs_f64();
        Ok(())
    }

    fn finish_epoch(&mut self, data: &TrainData, epoch: usize, lr: f64) -> Result<()> {
        let last = epoch + 1 == self.cfg.epochs;
        let train_oa =
            if last || (epoch + 1) % self.cfg.train_oa_every == 0 { Some(self.train_accuracy(data)?) } else { None };
        let loss = self.progress.loss_sum / self.progress.batches_done.max(1) as f64;
        log::info!(
            "epoch {:>4}  lr {lr:.3e}  loss {loss:.6}{}",
            epoch + 1,
            train_oa.map(|oa| format!("  train OA {oa:.4}")).unwrap_or_default()
        );
        self.report.epochs.push(EpochRecord { epoch, step: self.progress.step, lr, loss, train_oa });
        self.progress = Progress { epoch: epoch + 1, step: self.progress.step, ..Progress::default() };
        Ok(())
    }

    /// Inference-mode accuracy on the training pixels.
    pub fn train_accuracy(&self, data: &TrainData) -> Result<f64> {
        let logits = match self.cfg.batch_unit {
            BatchUnit::NodeBatch => predict(&self.model, &data.scene, &data.train_pixels, 4096)?,
            BatchUnit::Patch => predict_patches(&self.model, &data.scene, &data.train_pixels, self.cfg.patch_size)?,
        };
        let correct = argmax_rows(&logits)
            .iter()
            .zip(&data.train_pixels)
            .filter(|(p, &px)| data.targets[px] == Some(**p))
            .count();
        Ok(correct as f64 / data.train_pixels.len() as f64)
    }

    fn step(&mut self, data: &TrainData, batch: &[usize], epoch: usize, batch_idx: usize, lr: f64) -> Result<f64> {
        let model = &self.model;
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train);
        let patches;
        let (scenes, queries): (Vec<&Scene>, Vec<Vec<usize>>) = match self.cfg.batch_unit {
            BatchUnit::NodeBatch => (vec![&data.scene], vec![batch.to_vec()]),
            BatchUnit::Patch => {
                patches = batch
                    .iter()
                    .map(|&p| cut_patch(&data.scene, p, self.cfg.patch_size, &model.config))
                    .collect::<Result<Vec<_>>>()?;
                (patches.iter().map(|(s, _)| s).collect(), patches.iter().map(|(_, q)| vec![*q]).collect())
            }
        };
        let out = forward(&mut fwd, model, &scenes, &queries)?;
        let targets: Vec<Option<usize>> = batch.iter().map(|&p| data.targets[p]).collect();
        let mut loss = fwd.tape.cross_entropy(out.logits, &targets)?;
        let bound: Vec<(String, crate::Var)> = fwd.bound().map(|(n, v)| (n.to_string(), v)).collect();
        if self.cfg.weight_reg > 0.0 {
            for (name, v) in &bound {
                if model.params.param(name)?.kind == ParamKind::Weight {
                    let sq = fwd.tape.sum_squares(*v)?;
                    let term = fwd.tape.scale(sq, self.cfg.weight_reg as Real)?;
                    loss = fwd.tape.add(loss, term)?;
                }
            }
        }
        let bn_stats = fwd.take_bn_stats();
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(self.non_finite(epoch, batch_idx));
        }
        tape.backward(loss)?;
        let mut grads: Vec<(String, Vec<Real>)> =
            bound.iter().filter_map(|(n, v)| tape.grad(*v).map(|g| (n.clone(), g.to_vec()))).collect();
        let norm = grads.iter().flat_map(|(_, g)| g).map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(self.non_finite(epoch, batch_idx));
        }
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let s = (self.cfg.clip_norm / norm) as Real;
            grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|x| *x *= s);
        }
        self.opt.update(&mut self.model, &grads, lr, &self.cfg)?;
        apply_bn_stats(&mut self.model.params, &bn_stats, BN_MOMENTUM)?;
        self.model.params.round_to_storage();
        if !self.model.params.is_finite() {
            return Err(self.non_finite(epoch, batch_idx));
        }
        Ok(value)
    }

    fn non_finite(&self, epoch: usize, batch: usize) -> Error {
        let (param, param_norm) = self.model.params.iter().map(|(n, p)| (n.to_string(), p.value.norm() as f64)).fold(
            (String::new(), f64::NEG_INFINITY),
            |best, cur| {
                if !(cur.1 <= best.1) {
                    cur
                } else {
                    best
                }
            },
        );
        Error::NonFinite { epoch, batch, param, param_norm }
    }

    /// Model, optimizer state and schedule position as one checkpoint.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model);
        let meta = TrainMeta {
            config: self.cfg.clone(),
            progress: self.progress.clone(),
            optimizer_steps: self.opt.steps(),
            report: self.report.clone(),
        };
        ck.header.meta = serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?;
        self.opt.save_into(&mut ck);
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Restores a trainer saved with [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: TrainMeta = serde_json::from_value(ck.header.meta.clone())
            .map_err(|e| Error::Mismatch(format!("checkpoint carries no training state: {e}")))?;
        let model = ck.to_model()?;
        Ok(Trainer {
            model,
            opt: Optimizer::load_from(meta.config.optimizer, meta.optimizer_steps, ck),
            cfg: meta.config,
            progress: meta.progress,
            report: meta.report,
        })
    }
}

/// Trains a fresh model and returns it with its report.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainData,
    classes: usize,
) -> Result<(ModelState, TrainReport)> {
    let model = ModelState::new(model_cfg.clone(), data.scene.bands(), classes, train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    trainer.run(data, None)?;
    Ok(trainer.into_parts())
}

/// `Σ ‖W‖²` over weight tensors; biases and normalization parameters are excluded.
pub fn weight_penalty(model: &ModelState) -> Real {
    model
        .params
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(_, p)| p.value.data().iter().map(|v| v * v).sum::<Real>())
        .sum()
}

/// Row-wise argmax; ties go to the lower class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let p = logits.shape()[1];
    logits
        .data()
        .chunks(p)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

/// Cuts a `size`×`size` window containing `pixel`, centered on it where the
/// raster allows and shifted inward at the borders. Returns the patch scene
/// and the pixel's index inside it.
pub fn cut_patch(scene: &Scene, pixel: usize, size: usize, cfg: &ModelConfig) -> Result<(Scene, usize)> {
    let (m, n, b) = (scene.height(), scene.width(), scene.bands());
    let (r, c) = (pixel / n, pixel % n);
    let (ph, pw) = (size.min(m), size.min(n));
    let r0 = r.saturating_sub(size / 2).min(m - ph);
    let c0 = c.saturating_sub(size / 2).min(n - pw);
    let src = scene.raster().data();
    let mut data = Vec::with_capacity(ph * pw * b);
    for i in r0..r0 + ph {
        let start = (i * n + c0) * b;
        data.extend_from_slice(&src[start..start + pw * b]);
    }
    let patch = Scene::build(Tensor::new([ph, pw, b], data)?, cfg)?;
    Ok((patch, (r - r0) * pw + (c - c0)))
}

/// Inference-mode logits for each pixel, each evaluated on its own patch.
pub fn predict_patches(model: &ModelState, scene: &Scene, pixels: &[usize], size: usize) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(pixels.len() * model.classes);
    for group in pixels.chunks(16) {
        let patches = group.iter().map(|&p| cut_patch(scene, p, size, &model.config)).collect::<Result<Vec<_>>>()?;
        let scenes: Vec<&Scene> = patches.iter().map(|(s, _)| s).collect();
        let queries: Vec<Vec<usize>> = patches.iter().map(|(_, q)| vec![*q]).collect();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
        let out = forward(&mut fwd, model, &scenes, &queries)?;
        rows.extend_from_slice(tape.value(out.logits).data());
    }
    Tensor::new([pixels.len(), model.classes], rows)
}
