//! Training loop: Adam with per-step cosine decay, optionally with noise
//! injected in the forward pass.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{shuffle, Dataset};
use crate::error::{Error, Result};
use crate::model::{predict_accuracy, ModelGraph};
use crate::noise::{NoiseContext, NoiseSchedule, Purpose, RngStream, StreamPath};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint};

/// Batch size used for inference-only passes (clean accuracy, sweeps).
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub adam: AdamConfig,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            epochs: 60,
            batch_size: 128,
            seed: 0,
            schedule: NoiseSchedule::None,
            adam: AdamConfig::default(),
            shuffle: true,
        }
    }
}

fn config_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

impl TrainConfig {
    /// Checks value ranges. Field names in errors are dotted paths.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(config_err(
                "lr0",
                format!("must be positive, got {}", self.lr0),
            ));
        }
        if self.epochs == 0 {
            return Err(config_err("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be at least 1"));
        }
        for (name, b) in [
            ("adam.beta1", self.adam.beta1),
            ("adam.beta2", self.adam.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam.eps > 0.0) {
            return Err(config_err("adam.eps", "must be positive"));
        }
        self.schedule.validate().map_err(|e| match e {
            Error::Config { field, msg } => Error::Config {
                field: format!("schedule.{field}"),
                msg,
            },
            other => other,
        })
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }
}

/// Cosine decay `lr0 · ½ · (1 + cos(π t / T))`. `t` is clamped to `[0, T]`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    debug_assert!(total > 0);
    let t = t.min(total) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}

/// First and second moment buffers plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    /// Fresh zeroed moments for parameters with these element counts.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_model<T: Scalar>(model: &ModelGraph<T>) -> Self {
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
        Self::new(&sizes)
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }
}

/// One bias-corrected Adam update. All gradients are checked before any
/// parameter changes, so a non-finite gradient leaves everything intact.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&[T]],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Dimension(format!(
                "parameter {i}: {} values, {} gradients, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            let param = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFiniteGradient { param, index });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *w = T::of(w.as_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean training loss over the epoch.
    pub loss: f64,
    /// Noise-free accuracy on the training set after the epoch.
    pub clean_acc: f64,
    /// Learning rate after the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,clean_acc,lr\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.clean_acc, r.lr);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Clean accuracy of `model` on `data`, in fixed-size batches.
pub fn clean_accuracy<T: Scalar>(model: &ModelGraph<T>, data: &Dataset<T>) -> Result<f64> {
    let mut correct = 0.0;
    let mut start = 0;
    while start < data.len() {
        let count = EVAL_BATCH.min(data.len() - start);
        let (x, y) = data.range(start, count)?;
        let logits = model.forward(&x, None)?;
        correct += predict_accuracy(&logits, y) * count as f64;
        start += count;
    }
    Ok(correct / data.len() as f64)
}

/// Trains `model` on `data`; see [`train_with`].
pub fn train<T: Scalar>(
    model: ModelGraph<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(ModelGraph<T>, TrainLog)> {
    train_with(model, data, cfg, |_| {})
}

/// Trains `model`, calling `on_epoch` after each epoch. Each batch draws
/// its noise context from `(cfg.seed, epoch, batch)`, so a run is a pure
/// function of the config, the initial model and the data order.
pub fn train_with<T: Scalar>(
    mut model: ModelGraph<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelGraph<T>, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    if data.sample_shape() != model.input_shape() {
        return Err(Error::Dimension(format!(
            "data samples have shape {:?}, model expects {:?}",
            data.sample_shape(),
            model.input_shape()
        )));
    }
    if data.num_classes() > model.num_classes() {
        return Err(Error::Dimension(format!(
            "data has {} classes, model outputs {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    let n = data.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let names = model.parameter_names();
    let mut state = AdamState::for_model(&model);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            let mut rng = RngStream::new(
                cfg.seed,
                StreamPath::new(Purpose::Shuffle).epoch(epoch as u64),
            );
            shuffle(&mut order, &mut rng);
        }
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(idx)?;
            let ctx = NoiseContext::for_training(
                &cfg.schedule,
                cfg.seed,
                epoch as u64,
                b as u64,
                idx.len(),
            )?;
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let fwd = model.forward_tape(&mut tape, input, ctx.as_ref())?;
            let loss_var = tape.softmax_cross_entropy(fwd.logits, &y)?;
            let loss = tape.value(loss_var).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss,
                });
            }
            loss_sum += loss * idx.len() as f64;
            tape.backward(loss_var)?;
            let grads: Vec<&[T]> = fwd
                .params
                .iter()
                .map(|&p| tape.grad(p).expect("parameters are gradient leaves"))
                .collect();
            let lr = cosine_lr(cfg.lr0, step, total);
            let mut params = model.parameters_mut();
            adam_step(&mut params, &grads, &names, &mut state, lr, &cfg.adam)?;
            step += 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / n as f64,
            clean_acc: clean_accuracy(&model, data)?,
            lr: cosine_lr(cfg.lr0, step, total),
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok((model, log))
}
