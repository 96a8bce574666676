//! Optimizers, learning-rate schedule, the joining-aware training loop and
//! evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cross_entropy_value, Tape};
use crate::checkpoint::{Checkpoint, PhaseMeta};
use crate::data::{permutation, DatasetError, DatasetHandle, DatasetSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::reparam::{deployed_forward_patches, DeployedViT};
use crate::schedule::{lambda_at, tape_mean_site_diversity, DiversityConfig, JoinSchedule, ScheduleKind};
use crate::tensor::{Tensor, TensorError};
use crate::vit::{forward_patches, patchify, tape_model_forward, ModelConfig, MultiBranchViT};

pub const METRICS_HEADER: &str = "step,lambda,lr,loss,div_loss,distill_loss,eval_acc";
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    CosineDecay,
}

mod defaults {
    pub fn base_lr() -> f64 {
        1e-3
    }
    pub fn weight_decay() -> f64 {
        0.05
    }
    pub fn betas() -> [f64; 2] {
        [0.9, 0.999]
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn batch_size() -> usize {
        128
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "defaults::base_lr")]
    pub base_lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::betas")]
    pub betas: [f64; 2],
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    pub total_steps: u64,
    /// Defaults to 5% of `total_steps`.
    #[serde(default)]
    pub lr_warmup_steps: Option<u64>,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// `None` trains without joining (λ stays 0).
    #[serde(default)]
    pub join: Option<JoinSchedule>,
    #[serde(default)]
    pub diversity: DiversityConfig,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub eval_dataset: Option<DatasetSpec>,
    /// Evaluate every this many steps (and always after the last step); 0 = last step only.
    #[serde(default)]
    pub eval_every: u64,
    /// Write a checkpoint every this many steps; 0 = final checkpoint only.
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    /// Desk-scale recipe on the synthetic dataset.
    fn default() -> Self {
        let total = 5000;
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerKind::Adamw,
            base_lr: defaults::base_lr(),
            weight_decay: defaults::weight_decay(),
            betas: defaults::betas(),
            momentum: defaults::momentum(),
            adam_eps: defaults::adam_eps(),
            batch_size: defaults::batch_size(),
            total_steps: total,
            lr_warmup_steps: None,
            lr_schedule: LrSchedule::CosineDecay,
            join: Some(JoinSchedule {
                kind: ScheduleKind::Linear,
                join_start_step: total * 3 / 10,
                warmup_steps: 1000,
                adjust_steps: 2000,
            }),
            diversity: DiversityConfig::default(),
            seed: 0,
            dataset: DatasetSpec::Synthetic(SynthSpec::new(0, 10, 200, 28)),
            eval_dataset: Some(DatasetSpec::Synthetic(SynthSpec {
                sample_seed: Some(1),
                ..SynthSpec::new(0, 10, 50, 28)
            })),
            eval_every: 500,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("field `{name}`: {msg}")));
        self.model
            .validate()
            .map_err(|e| Error::Config(format!("field `model`: {e}")))?;
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return field("base_lr", "must be a finite non-negative number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return field("weight_decay", "must be a finite non-negative number");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return field("betas", "each beta must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return field("momentum", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return field("adam_eps", "must be positive");
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be positive");
        }
        if self.total_steps == 0 {
            return field("total_steps", "must be positive");
        }
        if self.lr_warmup_steps.is_some_and(|w| w > self.total_steps) {
            return field("lr_warmup_steps", "exceeds total_steps");
        }
        if !(self.diversity.alpha >= 0.0 && self.diversity.alpha.is_finite()) {
            return field("diversity.alpha", "must be a finite non-negative number");
        }
        if let Some(j) = &self.join {
            if j.end_step() > self.total_steps {
                return Err(Error::Config(format!(
                    "field `join`: join_start_step + warmup_steps + adjust_steps = {} exceeds total_steps = {}",
                    j.end_step(),
                    self.total_steps
                )));
            }
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        self.lr_warmup_steps.unwrap_or(self.total_steps / 20)
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        self.join.as_ref().map_or(0.0, |j| lambda_at(step, j))
    }
}

/// Linear ramp from 0 to `base_lr` over the warmup, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    let span = cfg.total_steps.saturating_sub(warmup);
    if span == 0 {
        return cfg.base_lr;
    }
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Tensor(TensorError::Usage("cross_entropy: empty batch".into())));
    }
    Ok(cross_entropy_value(logits, labels)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Per-parameter optimizer moments. `first` holds AdamW's first moment or
/// SGD velocity; `second` is empty for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            kind,
            step: 0,
            first: zeros(),
            second: if kind == OptimizerKind::Adamw { zeros() } else { Vec::new() },
        }
    }

    fn check(&self, params: &[Tensor]) -> Result<()> {
        let ok = self.first.len() == params.len()
            && (self.second.is_empty() || self.second.len() == params.len())
            && self.first.iter().zip(params).all(|(m, p)| m.shape() == p.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::ModelMismatch("optimizer state does not mirror the parameters".into()))
        }
    }
}

/// One AdamW step with decoupled weight decay and bias-corrected moments.
/// Parameters whose gradient is `None` are left untouched; `decay[k]` selects
/// which parameters are decayed.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    decay: &[bool],
    state: &mut OptimizerState,
    h: &AdamWHyper,
) -> Result<()> {
    state.check(params)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[k] else { continue };
        let shrink = if decay[k] { 1.0 - h.lr * h.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            *w *= shrink;
            *w -= h.lr * (*mi / c1) / ((*vi / c2).sqrt() + h.eps);
        }
    }
    Ok(())
}

/// `v ← m·v + g; θ ← θ − lr·v`, with optional decoupled decay on `decay[k]` params.
pub fn sgd_momentum_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    decay: &[bool],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    state.check(params)?;
    state.step += 1;
    for (k, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[k] else { continue };
        let shrink = if decay[k] { 1.0 - lr * weight_decay } else { 1.0 };
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(state.first[k].data_mut()) {
            *vi = momentum * *vi + gi;
            *w *= shrink;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lambda: f64,
    pub lr: f64,
    pub loss: f64,
    /// Raw (unweighted) mean diversity loss, logged whether or not it is optimized.
    pub div_loss: f64,
    pub distill_loss: f64,
    pub eval_acc: Option<f64>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},",
            self.step, self.lambda, self.lr, self.loss, self.div_loss, self.distill_loss
        );
        if let Some(a) = self.eval_acc {
            let _ = write!(s, "{a}");
        }
        s
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
}

/// Anything that maps a patch matrix to logits.
pub trait Classifier {
    fn config(&self) -> &ModelConfig;
    fn logits_from_patches(&self, patches: &Tensor) -> Result<Tensor>;
}

impl Classifier for DeployedViT {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn logits_from_patches(&self, patches: &Tensor) -> Result<Tensor> {
        deployed_forward_patches(patches, self)
    }
}

/// A multi-branch model evaluated at a fixed λ.
pub struct AtLambda<'a> {
    pub model: &'a MultiBranchViT,
    pub lambda: f64,
}

impl Classifier for AtLambda<'_> {
    fn config(&self) -> &ModelConfig {
        &self.model.config
    }
    fn logits_from_patches(&self, patches: &Tensor) -> Result<Tensor> {
        forward_patches(patches, self.model, self.lambda)
    }
}

pub fn check_compatible(config: &ModelConfig, data: &DatasetHandle) -> Result<()> {
    if data.channels != config.channels || data.image_size != config.image_size {
        return Err(Error::ModelMismatch(format!(
            "dataset images are {}×{}×{}, model expects {}×{}×{}",
            data.channels, data.image_size, data.image_size, config.channels, config.image_size, config.image_size
        )));
    }
    if data.num_classes > config.num_classes {
        return Err(Error::ModelMismatch(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes, config.num_classes
        )));
    }
    Ok(())
}

/// Accuracy (argmax, first index wins ties) and mean cross-entropy.
pub fn evaluate(model: &dyn Classifier, data: &DatasetHandle) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    check_compatible(model.config(), data)?;
    let mut correct = 0;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk);
        let logits = model.logits_from_patches(&patchify(&images, model.config())?)?;
        loss_sum += cross_entropy(&logits, &labels)? * labels.len() as f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == label);
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        correct,
        samples: data.len(),
    })
}

/// Stateful training driver. One call to [`Trainer::step`] performs one
/// optimizer update; the batch drawn at a step depends only on the seed and
/// the step index, so resumed runs reproduce uninterrupted ones.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: &'a DatasetHandle,
    eval: Option<&'a DatasetHandle>,
    pub model: MultiBranchViT,
    pub optimizer: OptimizerState,
    pub step: u64,
    names: Vec<String>,
    decay: Vec<bool>,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    /// Fresh run: initializes the model from `cfg.seed`.
    pub fn new(cfg: &'a TrainConfig, train: &'a DatasetHandle, eval: Option<&'a DatasetHandle>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = MultiBranchViT::init(&cfg.model, &mut rng)?;
        Self::with_model(cfg, train, eval, model)
    }

    pub fn with_model(
        cfg: &'a TrainConfig,
        train: &'a DatasetHandle,
        eval: Option<&'a DatasetHandle>,
        model: MultiBranchViT,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.config != cfg.model {
            return Err(Error::ModelMismatch("model config differs from the training config".into()));
        }
        if train.is_empty() {
            return Err(DatasetError::Empty.into());
        }
        check_compatible(&cfg.model, train)?;
        if let Some(e) = eval {
            check_compatible(&cfg.model, e)?;
        }
        let tensors = model.tensors();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        let decay = tensors.iter().map(|(_, t)| t.shape().len() == 2).collect();
        let params: Vec<Tensor> = tensors.into_iter().map(|(_, t)| t).collect();
        Ok(Self {
            cfg,
            train,
            eval,
            optimizer: OptimizerState::new(cfg.optimizer, &params),
            model,
            step: 0,
            names,
            decay,
            epoch_order: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        cfg: &'a TrainConfig,
        train: &'a DatasetHandle,
        eval: Option<&'a DatasetHandle>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let model = ckpt.multi_branch()?;
        let mut t = Self::with_model(cfg, train, eval, model)?;
        let fetch = |prefix: &str| -> Result<Vec<Tensor>> {
            t.names
                .iter()
                .map(|n| {
                    ckpt.tensor(&format!("{prefix}.{n}"))
                        .cloned()
                        .ok_or_else(|| Error::ModelMismatch(format!("checkpoint lacks {prefix}.{n}")))
                })
                .collect()
        };
        if ckpt.tensor("optim.t").is_some() {
            t.optimizer.first = fetch("optim.m")?;
            if cfg.optimizer == OptimizerKind::Adamw {
                t.optimizer.second = fetch("optim.v")?;
            }
            t.optimizer.step = ckpt.tensor("optim.t").map_or(0.0, |x| x.item()) as u64;
            let params: Vec<Tensor> = t.model.tensors().into_iter().map(|(_, x)| x).collect();
            t.optimizer.check(&params)?;
        }
        t.step = ckpt.phase.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        self.cfg
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Steps taken so far and the λ used by the most recent update.
    pub fn phase(&self) -> PhaseMeta {
        PhaseMeta {
            step: self.step,
            lambda: self.cfg.lambda_at(self.step.saturating_sub(1)),
        }
    }

    /// Model, training config and optimizer moments.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_multi_branch(&self.model, self.phase());
        ck.config.train = Some(serde_json::to_value(self.cfg)?);
        for (k, n) in self.names.iter().enumerate() {
            ck.tensors.push((format!("optim.m.{n}"), self.optimizer.first[k].clone()));
            if let Some(v) = self.optimizer.second.get(k) {
                ck.tensors.push((format!("optim.v.{n}"), v.clone()));
            }
        }
        ck.tensors.push(("optim.t".into(), Tensor::scalar(self.optimizer.step as f64)));
        Ok(ck)
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let len = self.train.len() as u64;
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|j| {
                let pos = self.step * b + j;
                let epoch = pos / len;
                if self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let seed = self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch;
                    self.epoch_order = Some((epoch, permutation(len as usize, seed)));
                }
                self.epoch_order.as_ref().unwrap().1[(pos % len) as usize]
            })
            .collect()
    }

    /// One optimizer update.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let step = self.step;
        let lambda = self.cfg.lambda_at(step);
        let lr = lr_at(step, self.cfg);
        let indices = self.batch_indices();
        let (images, labels) = self.train.batch(&indices);
        let diverged = |loss: f64| Error::Divergence { step, loss };
        let non_finite = |e: Error| match e {
            Error::Tensor(TensorError::NonFinite { .. }) => diverged(f64::NAN),
            other => other,
        };

        let mut tape = Tape::new();
        let patches = tape.constant(patchify(&images, &self.cfg.model)?);
        let bound = self.model.bind(&mut tape, true);
        let (logits, traces) = tape_model_forward(&mut tape, &bound, patches, lambda).map_err(non_finite)?;
        let ce = tape.cross_entropy(logits, &labels).map_err(|e| non_finite(e.into()))?;
        let div = tape_mean_site_diversity(&mut tape, &traces)?;
        let div_value = div.map_or(0.0, |v| tape.value(v).item());
        let loss = match div {
            Some(d) if self.cfg.diversity.enabled && self.cfg.diversity.alpha > 0.0 => {
                let weighted = tape.scale(d, self.cfg.diversity.alpha)?;
                tape.add(ce, weighted)?
            }
            _ => ce,
        };
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(diverged(loss_value));
        }
        let grads = tape.backward(loss).map_err(|e| non_finite(e.into()))?;
        let mut param_grads = Vec::with_capacity(self.names.len());
        bound.map(&mut |_, v| {
            param_grads.push(tape.is_trainable(*v).then(|| grads.get_or_zeros(*v)));
        });
        if param_grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(diverged(loss_value));
        }
        drop(tape);

        let mut params: Vec<Tensor> = Vec::with_capacity(self.names.len());
        self.model.for_each_mut(&mut |_, t| params.push(std::mem::replace(t, Tensor::scalar(0.0))));
        let update = match self.cfg.optimizer {
            OptimizerKind::Adamw => adamw_step(
                &mut params,
                &param_grads,
                &self.decay,
                &mut self.optimizer,
                &AdamWHyper {
                    lr,
                    weight_decay: self.cfg.weight_decay,
                    beta1: self.cfg.betas[0],
                    beta2: self.cfg.betas[1],
                    eps: self.cfg.adam_eps,
                },
            ),
            OptimizerKind::SgdMomentum => sgd_momentum_step(
                &mut params,
                &param_grads,
                &self.decay,
                &mut self.optimizer,
                lr,
                self.cfg.momentum,
                self.cfg.weight_decay,
            ),
        };
        let mut it = params.into_iter();
        self.model.for_each_mut(&mut |_, t| *t = it.next().expect("parameter count"));
        update?;
        self.step += 1;

        let eval_due = self.step == self.cfg.total_steps
            || (self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0);
        let eval_acc = match (eval_due, self.eval) {
            (true, Some(data)) => Some(
                evaluate(
                    &AtLambda {
                        model: &self.model,
                        lambda,
                    },
                    data,
                )?
                .accuracy,
            ),
            _ => None,
        };
        Ok(MetricsRow {
            step,
            lambda,
            lr,
            loss: loss_value,
            div_loss: div_value,
            distill_loss: 0.0,
            eval_acc,
        })
    }

    /// Runs to `total_steps`, calling `after_step` once per update.
    pub fn run(&mut self, mut after_step: impl FnMut(&Self, &MetricsRow) -> Result<()>) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.finished() {
            let row = self.step()?;
            after_step(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MultiBranchViT,
    pub metrics: Vec<MetricsRow>,
    /// λ in effect at the last update.
    pub final_lambda: f64,
}

/// Fresh training run from `cfg.seed` to `cfg.total_steps`.
pub fn train_loop(cfg: &TrainConfig, train: &DatasetHandle, eval: Option<&DatasetHandle>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, train, eval)?;
    let metrics = trainer.run(|_, _| Ok(()))?;
    let final_lambda = metrics.last().map_or(0.0, |r| r.lambda);
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
        final_lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64, steps: u64) -> TrainConfig {
        let model = ModelConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            dim: 8,
            heads: 2,
            ffn_hidden: 16,
            deploy_blocks: 1,
            branches: 2,
            num_classes: 4,
            ..ModelConfig::default()
        };
        TrainConfig {
            model,
            base_lr: 3e-3,
            batch_size: 16,
            total_steps: steps,
            join: Some(JoinSchedule {
                kind: ScheduleKind::Linear,
                join_start_step: steps / 4,
                warmup_steps: steps / 4,
                adjust_steps: steps / 4,
            }),
            seed,
            dataset: DatasetSpec::Synthetic(SynthSpec::new(seed, 4, 20, 4)),
            eval_dataset: None,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }

    fn bits(m: &MultiBranchViT) -> Vec<u64> {
        m.tensors().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[1, 5]);
        assert!((cross_entropy(&uniform, &[3]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let sharp = Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap();
        let v = cross_entropy(&sharp, &[0]).unwrap();
        assert!((v - 2.061153622e-9).abs() < 1e-15, "{v}");
        let two = Tensor::from_rows(&[vec![0.3, 1.2], vec![0.3, 1.2]]).unwrap();
        let one = Tensor::from_rows(&[vec![0.3, 1.2]]).unwrap();
        assert_eq!(cross_entropy(&two, &[1, 1]).unwrap(), cross_entropy(&one, &[1]).unwrap());
        assert!(cross_entropy(&one, &[2]).is_err());
    }

    fn hyper(lr: f64, wd: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn adamw_zero_gradient() {
        let mut p = vec![Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap()];
        let mut st = OptimizerState::new(OptimizerKind::Adamw, &p);
        let g = vec![Some(Tensor::zeros(&[1, 2]))];
        adamw_step(&mut p, &g, &[true], &mut st, &hyper(0.1, 0.0)).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.0]);
        adamw_step(&mut p, &g, &[true], &mut st, &hyper(0.1, 0.5)).unwrap();
        assert!((p[0].data()[0] - 1.5 * 0.95).abs() <= 1e-12);
        assert!((p[0].data()[1] + 2.0 * 0.95).abs() <= 1e-12);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut p = vec![Tensor::scalar(0.7), Tensor::scalar(0.7)];
        let mut st = OptimizerState::new(OptimizerKind::Adamw, &p);
        let g = vec![Some(Tensor::scalar(0.3)), Some(Tensor::scalar(-4.0))];
        adamw_step(&mut p, &g, &[false, false], &mut st, &hyper(0.01, 0.0)).unwrap();
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps)
        let expected = |g: f64| 0.7 - 0.01 * g / (g.abs() + 1e-8);
        assert!((p[0].item() - expected(0.3)).abs() <= 1e-12);
        assert!((p[1].item() - expected(-4.0)).abs() <= 1e-12);
        // second step with the same gradient, by hand
        let g0 = 0.3;
        let m = 0.9 * 0.1 * g0 + 0.1 * g0;
        let v = 0.999 * 0.001 * g0 * g0 + 0.001 * g0 * g0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let before = p[0].item();
        adamw_step(&mut p, &g, &[false, false], &mut st, &hyper(0.01, 0.0)).unwrap();
        assert!((p[0].item() - (before - 0.01 * m_hat / (v_hat.sqrt() + 1e-8))).abs() <= 1e-12);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = OptimizerState::new(OptimizerKind::Adamw, &p);
        adamw_step(&mut p, &[None], &[true], &mut st, &hyper(0.1, 0.5)).unwrap();
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn sgd_momentum_closed_forms() {
        let mut p = vec![Tensor::scalar(2.0)];
        let mut st = OptimizerState::new(OptimizerKind::SgdMomentum, &p);
        sgd_momentum_step(&mut p, &[Some(Tensor::scalar(0.0))], &[false], &mut st, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p[0].item(), 2.0);
        let g = [Some(Tensor::scalar(0.5))];
        sgd_momentum_step(&mut p, &g, &[false], &mut st, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0].item() - (2.0 - 0.1 * 0.5)).abs() <= 1e-12);
        sgd_momentum_step(&mut p, &g, &[false], &mut st, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0].item() - (2.0 - 0.1 * 0.5 * (2.0 + 0.9))).abs() <= 1e-12);
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig {
            base_lr: 0.4,
            total_steps: 1100,
            lr_warmup_steps: Some(100),
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(50, &cfg), 0.2);
        assert_eq!(lr_at(100, &cfg), 0.4);
        assert!((lr_at(600, &cfg) - 0.2).abs() < 1e-12);
        assert!(lr_at(1100, &cfg).abs() < 1e-12);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = tiny_cfg(0, 40);
        cfg.batch_size = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size"), "{msg}");
        let mut cfg = tiny_cfg(0, 40);
        cfg.total_steps = 20;
        assert!(cfg.validate().unwrap_err().to_string().contains("join"));
        let json = serde_json::to_string(&tiny_cfg(0, 40)).unwrap();
        assert_eq!(TrainConfig::from_json(&json).unwrap(), tiny_cfg(0, 40));
        assert!(TrainConfig::from_json(r#"{"model": 3}"#).is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny_cfg(3, 24);
        let data = cfg.dataset.load().unwrap();
        let a = train_loop(&cfg, &data, None).unwrap();
        let b = train_loop(&cfg, &data, None).unwrap();
        assert_eq!(bits(&a.model), bits(&b.model));
        assert_eq!(a.metrics, b.metrics);

        let mut first = Trainer::new(&cfg, &data, None).unwrap();
        for _ in 0..10 {
            first.step().unwrap();
        }
        let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.phase.step, 10);
        let mut resumed = Trainer::resume(&cfg, &data, None, &ck).unwrap();
        let rest = resumed.run(|_, _| Ok(())).unwrap();
        assert_eq!(rest.first().unwrap().step, 10);
        assert_eq!(bits(&resumed.model), bits(&a.model));
    }

    #[test]
    fn lambda_trace_follows_schedule() {
        let cfg = tiny_cfg(4, 40);
        let data = cfg.dataset.load().unwrap();
        let out = train_loop(&cfg, &data, None).unwrap();
        let sched = cfg.join.unwrap();
        for row in &out.metrics {
            assert_eq!(row.lambda, lambda_at(row.step, &sched));
            assert_eq!(row.distill_loss, 0.0);
            assert!(row.div_loss >= 0.0 && row.div_loss <= 1.0);
        }
        assert_eq!(out.final_lambda, 1.0);
    }

    #[test]
    fn scale_only_keeps_attention_shift_at_zero() {
        let cfg = tiny_cfg(5, 12);
        let data = cfg.dataset.load().unwrap();
        let out = train_loop(&cfg, &data, None).unwrap();
        assert_eq!(out.model.blocks[0].ln1.beta.max_abs(), 0.0);
        assert!(out.model.blocks[0].ln2.beta.max_abs() > 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny_cfg(6, 40);
        cfg.base_lr = 1e300;
        cfg.lr_warmup_steps = Some(0);
        cfg.weight_decay = 0.0;
        let data = cfg.dataset.load().unwrap();
        match train_loop(&cfg, &data, None) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics.len())),
        }
    }

    #[test]
    fn random_model_is_near_chance() {
        let mut model = ModelConfig::default();
        model.image_size = 8;
        model.patch_size = 4;
        model.dim = 16;
        let data = SynthSpec::new(7, 10, 40, 8).generate().unwrap();
        // one model maps each class template to a single prediction, so
        // chance level is a statement about the average over inits
        let mut total = 0.0;
        let mut m = None;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = MultiBranchViT::init_with_std(&model, &mut rng, 0.5).unwrap();
            total += evaluate(&AtLambda { model: &model, lambda: 0.0 }, &data).unwrap().accuracy;
            m = Some(model);
        }
        let mean = total / 20.0;
        assert!((mean - 0.1).abs() <= 0.05, "{mean}");
        let m = m.unwrap();
        assert!(evaluate(&AtLambda { model: &m, lambda: 0.0 }, &data.take(0)).is_err());
        let wrong = SynthSpec::new(7, 10, 2, 12).generate().unwrap();
        assert!(matches!(
            evaluate(&AtLambda { model: &m, lambda: 0.0 }, &wrong),
            Err(Error::ModelMismatch(_))
        ));
    }

    #[test]
    fn metrics_csv_format() {
        let row = MetricsRow {
            step: 3,
            lambda: 0.5,
            lr: 0.001,
            loss: 1.25,
            div_loss: 0.1,
            distill_loss: 0.0,
            eval_acc: None,
        };
        let with = MetricsRow {
            eval_acc: Some(0.75),
            ..row.clone()
        };
        assert_eq!(
            metrics_csv(&[row, with]),
            "step,lambda,lr,loss,div_loss,distill_loss,eval_acc\n3,0.5,0.001,1.25,0.1,0,\n3,0.5,0.001,1.25,0.1,0,0.75\n"
        );
    }
}
