//! MSE training with Adam, best-validation selection and JSON checkpoints.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ScalerParams, WindowedDataset};
use crate::exec::Execution;
use crate::layers::Mode;
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global L2 max-norm; `None` disables clipping.
    pub gradient_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 1,
            seed: 42,
            gradient_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "only batch size 1 is supported, got {}",
                self.batch_size
            )));
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// `(ŷ - y)²` on the tape.
pub fn mse_loss(g: &mut Graph, prediction: Var, target: f64) -> Result<Var> {
    let y = g.constant(Tensor::vector(vec![target]));
    let d = g.sub(prediction, y)?;
    let sq = g.hadamard(d, d)?;
    Ok(g.sum(sq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!("adam parameter {i}"), p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *pj -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's updates.
    pub train_loss: f64,
    /// Eval-mode MSE on the validation set after the epoch.
    pub validation_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Eval-mode mean squared error over `set`.
pub fn dataset_mse(model: &Model, set: &WindowedDataset, exec: Execution) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InsufficientData {
            required: 1,
            available: 0,
        });
    }
    let errors = exec.map_range(set.len(), |i| {
        model
            .predict(&set.inputs[i], &set.time_indices[i])
            .map(|(y, _)| (y - set.targets[i]).powi(2))
    });
    let mut total = 0.0;
    for e in errors {
        total += e?;
    }
    Ok(total / set.len() as f64)
}

/// One forward/backward pass at batch size 1; returns the loss and the
/// gradients in `Model::named_tensors` order.
pub fn sample_gradients(
    model: &Model,
    window: &Tensor,
    times: &[f64],
    target: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.forward(&mut g, &bound, window, times, Mode::Train, rng)?;
    let loss = mse_loss(&mut g, out.prediction, target)?;
    let value = g.value(loss).item()?;
    g.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .map(|v| g.grad(*v).cloned().ok_or_else(|| Error::Contract("missing gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

pub fn train(
    model: &Model,
    train_set: &WindowedDataset,
    validation_set: &WindowedDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, validation_set, config, Execution::default(), |_| Control::Continue)
}

/// Chronological batch-size-1 training. `on_epoch` sees every record and
/// may stop early; the returned model is the lowest-validation snapshot.
pub fn train_with(
    model: &Model,
    train_set: &WindowedDataset,
    validation_set: &WindowedDataset,
    config: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord) -> Control,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::InsufficientData {
            required: 1,
            available: 0,
        });
    }
    if model.parameter_count() == 0 {
        return Err(Error::Config(format!(
            "{} has no trainable parameters",
            model.config.kind.display_name()
        )));
    }
    let mut current = model.clone();
    let mut state = AdamState::new(&current.named_tensors().iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for i in 0..train_set.len() {
            let (loss, mut grads) = sample_gradients(
                &current,
                &train_set.inputs[i],
                &train_set.time_indices[i],
                train_set.targets[i],
                &mut rng,
            )?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    sample: i,
                    loss,
                });
            }
            if let Some(c) = config.gradient_clip {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut current.tensors_mut(), &grads, &mut state, config)?;
            total += loss;
        }
        let validation_loss = dataset_mse(&current, validation_set, exec)?;
        if !validation_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                sample: train_set.len(),
                loss: validation_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            validation_loss,
        };
        debug!(
            "epoch {epoch}: train {:.6e} validation {:.6e}",
            record.train_loss, record.validation_loss
        );
        history.push(record);
        if best.as_ref().is_none_or(|(_, v, _)| validation_loss < *v) {
            best = Some((epoch, validation_loss, current.clone()));
        }
        if on_epoch(&record) == Control::Stop {
            break;
        }
    }
    let (best_epoch, best_validation_loss, model) = best.expect("at least one epoch");
    info!(
        "{}: best validation MSE {best_validation_loss:.6e} at epoch {best_epoch}",
        model.config.kind.display_name()
    );
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_validation_loss,
    })
}

/// Loss history as CSV: `epoch,train_loss,validation_loss`.
pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "validation_loss"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:e}", r.train_loss),
            format!("{:e}", r.validation_loss),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub epoch: usize,
    pub validation_loss: Option<f64>,
    pub seed: u64,
    pub country: Option<String>,
    pub scaler: Option<ScalerParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub parameters: Vec<NamedTensor>,
    pub metadata: CheckpointMetadata,
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: CheckpointMetadata) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: model.config.clone(),
            parameters: model
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            metadata,
        }
    }

    /// Rebuilds the model; every tensor must be present with the shape the
    /// config implies.
    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut model = Model::zeros(self.config.clone())?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.parameters.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                names.len(),
                self.parameters.len()
            )));
        }
        for ((name, slot), stored) in names.iter().zip(model.tensors_mut()).zip(&self.parameters) {
            if *name != stored.name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name:?}, found {:?}",
                    stored.name
                )));
            }
            if slot.shape() != stored.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, config requires {:?}",
                    stored.shape,
                    slot.shape()
                )));
            }
            let t = Tensor::new(stored.shape.clone(), stored.data.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor {name:?}: {e}")))?;
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!("tensor {name:?} has non-finite entries")));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))
    }
}

pub fn save_checkpoint(model: &Model, metadata: CheckpointMetadata, path: &Path) -> Result<()> {
    let text = Checkpoint::from_model(model, metadata).to_json()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMetadata)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_json(&text)?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt.metadata))
}
