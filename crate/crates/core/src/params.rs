//! Named parameter storage and the per-pass forward context.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, Real, Tape, Tensor, Var};

/// Role of a stored tensor. Only weights are subject to weight regularization;
/// running statistics are not trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnScale => "gamma",
            ParamKind::BnShift => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    /// Inverse of the trailing name component written by [`tag`](Self::tag).
    pub fn from_name(name: &str) -> Option<ParamKind> {
        Some(match name.rsplit('.').next()? {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "gamma" => ParamKind::BnScale,
            "beta" => ParamKind::BnShift,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Insertion-ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Param)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = Param { kind, value };
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, Param { kind, value }));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Mismatch(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1.value),
            None => Err(Error::Mismatch(format!("no parameter named `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|(_, p)| p.kind.is_trainable()).map(|(_, p)| p.value.numel()).sum()
    }

    /// Rounds every stored value to 32-bit precision so that checkpoints,
    /// which hold 32-bit floats, reproduce the in-memory state exactly.
    pub fn round_to_storage(&mut self) {
        for (_, p) in &mut self.entries {
            round_to_f32(p.value.data_mut());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, p)| p.value.is_finite())
    }
}

pub fn round_to_f32(values: &mut [Real]) {
    for v in values {
        *v = *v as f32 as Real;
    }
}

/// Uniform initialization in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as Real).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Registers batch-norm scale, shift and running statistics under `prefix`.
pub fn init_batch_norm(store: &mut ParamStore, prefix: &str, features: usize) {
    store.insert(format!("{prefix}.gamma"), ParamKind::BnScale, Tensor::ones([features]));
    store.insert(format!("{prefix}.beta"), ParamKind::BnShift, Tensor::zeros([features]));
    store.insert(format!("{prefix}.running_mean"), ParamKind::RunningMean, Tensor::zeros([features]));
    store.insert(format!("{prefix}.running_var"), ParamKind::RunningVar, Tensor::ones([features]));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients tracked on trainable parameters.
    Train,
    /// Running statistics, no gradient tracking.
    Eval,
}

/// State of one forward pass: the tape, the parameters bound onto it, and the
/// batch statistics produced by train-mode normalization.
pub struct Forward<'t, 's> {
    pub tape: &'t mut Tape,
    store: &'s ParamStore,
    mode: Mode,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'t, 's> Forward<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore, mode: Mode) -> Self {
        Forward { tape, store, mode, bound: HashMap::new(), order: Vec::new(), bn_stats: Vec::new() }
    }

    /// Uses `var` for parameter `name` instead of the stored tensor.
    pub fn bind(&mut self, name: &str, var: Var) {
        if self.bound.insert(name.to_string(), var).is_none() {
            self.order.push(name.to_string());
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// The tape variable for parameter `name`, registering it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.param(name)?;
        let track = self.mode == Mode::Train && p.kind.is_trainable();
        let v = self.tape.leaf(p.value.clone().requires_grad(track));
        self.bind(name, v);
        Ok(v)
    }

    /// Batch normalization over every axis but `axis`, with parameters under `prefix`.
    pub fn batch_norm(&mut self, prefix: &str, x: Var, axis: usize) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, axis, BnMode::Train)?;
                self.bn_stats.push((prefix.to_string(), stats.expect("train mode yields stats")));
                Ok(y)
            }
            Mode::Eval => {
                let store = self.store;
                let mean = store.get(&format!("{prefix}.running_mean"))?.data();
                let var = store.get(&format!("{prefix}.running_var"))?.data();
                Ok(self.tape.batch_norm(x, gamma, beta, axis, BnMode::Eval { mean, var })?.0)
            }
        }
    }

    /// Parameters bound during this pass, in first-use order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|n| (n.as_str(), self.bound[n]))
    }

    /// Batch statistics gathered by train-mode normalization.
    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Weight of the previous running statistic when folding in a new batch.
pub const BN_MOMENTUM: Real = 0.9;

/// Folds batch statistics into running averages with the given momentum.
pub fn apply_bn_stats(store: &mut ParamStore, stats: &[(String, BatchStats)], momentum: Real) -> Result<()> {
    for (prefix, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let running = store.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, b) in running.data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
    Ok(())
}
