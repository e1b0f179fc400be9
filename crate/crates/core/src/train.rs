//! Training protocol: Adam with bias correction, step learning-rate decay,
//! seeded epoch shuffling over mini-batches, MSE loss, per-epoch validation
//! RMSE, and best-validation checkpoint selection.

use std::io::{self, BufReader, Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::eval;
use crate::model::{build_model, ConfigError, GazeModel, ModelConfig};
use crate::tensor::{checked_mode, Element, RngState, RngStream, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("model expects {expected} channels x {expected_t} timepoints; datasets carry {got} x {got_t}")]
    DataModelMismatch {
        expected: usize,
        expected_t: usize,
        got: usize,
        got_t: usize,
    },
    #[error("epoch {epoch} out of range (0..{epochs})")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in parameter {name} (checked mode)")]
    NonFiniteGradient { name: String },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic {found:?}, expected \"EGCK\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated while reading {section}")]
    Truncated { section: &'static str },
    #[error("checkpoint parameter count {found} does not match config ({expected})")]
    ParamCountMismatch { expected: u64, found: u64 },
    #[error("checkpoint config: {0}")]
    MalformedConfig(String),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

fn default_epochs() -> usize {
    15
}
fn default_batch() -> usize {
    64
}
fn default_lr0() -> f64 {
    1e-4
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_decay_every() -> usize {
    6
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Optimization schedule: 15 epochs of batch-64 Adam at 1e-4, decimated every
/// 6 epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr0: default_lr0(),
            decay_factor: default_decay_factor(),
            decay_every: default_decay_every(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(TrainError::InvalidConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(TrainError::InvalidConfig("decay_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean squared error over all coordinates; for `[B, 2]` gaze batches this is
/// exactly the squared Eq.-1 RMSE (2n denominator).
pub fn mse_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let diff = pred.sub(target)?;
    diff.mul(&diff)?.mean_all()
}

/// Step decay: `lr0 * decay_factor^floor(epoch / decay_every)` (0-based
/// epochs, so the drops land on epochs 6 and 12 of a 15-epoch run).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64, TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    Ok(cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32))
}

/// One Adam update on a flat parameter block, straight from the formulas:
/// `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`, bias-corrected, then
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`. `t` is the post-increment step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Element>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one_m_b1 = T::from_f64(1.0 - beta1);
    let one_m_b2 = T::from_f64(1.0 - beta2);
    let corr1 = T::from_f64(1.0 / (1.0 - beta1.powi(t as i32)));
    let corr2 = T::from_f64(1.0 / (1.0 - beta2.powi(t as i32)));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + one_m_b1 * g;
        v[i] = b2 * v[i] + one_m_b2 * g * g;
        let m_hat = m[i] * corr1;
        let v_hat = v[i] * corr2;
        param[i] -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
    }
}

/// Adam state over a fixed parameter registry.
pub struct Adam<T: Element> {
    params: Vec<(String, Tensor<T>)>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Element> Adam<T> {
    pub fn new(params: Vec<(String, Tensor<T>)>, cfg: &TrainConfig) -> Self {
        let m = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Total scalars touched per step (the optimizer's view of param_count).
    pub fn parameter_scalars(&self) -> usize {
        self.params.iter().map(|(_, p)| p.numel()).sum()
    }

    /// Applies one update using each parameter's accumulated gradient
    /// (missing gradients count as zero).
    pub fn step(&mut self, lr: f64) -> Result<(), TrainError> {
        self.t += 1;
        let t = self.t;
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        if checked_mode() {
            for (name, p) in &self.params {
                if let Some(g) = p.grad() {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TrainError::NonFiniteGradient { name: name.clone() });
                    }
                }
            }
        }
        for ((_, p), (m, v)) in self.params.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let grad = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
            let mut data = p.to_vec();
            // elementwise update; chunk large parameters across threads
            const CHUNK: usize = 1 << 15;
            if data.len() >= 2 * CHUNK {
                data.par_chunks_mut(CHUNK)
                    .zip(m.par_chunks_mut(CHUNK))
                    .zip(v.par_chunks_mut(CHUNK))
                    .zip(grad.par_chunks(CHUNK))
                    .for_each(|(((d, m), v), g)| {
                        adam_update(d, g, m, v, t, lr, beta1, beta2, eps);
                    });
            } else {
                adam_update(&mut data, &grad, m, v, t, lr, beta1, beta2, eps);
            }
            p.copy_from_slice(&data);
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub lr: f64,
    pub train_mse: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,lr,train_mse,val_rmse,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_mse, r.val_rmse, r.seconds
            ));
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self, TrainError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != "epoch,lr,train_mse,val_rmse,seconds" {
                    return Err(TrainError::MalformedConfig(format!(
                        "unexpected history header {line:?}"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(TrainError::MalformedConfig(format!("history line {}", i + 1)));
            }
            let bad = |e: std::num::ParseFloatError| TrainError::MalformedConfig(e.to_string());
            rows.push(EpochStats {
                epoch: f[0]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| TrainError::MalformedConfig(e.to_string()))?,
                lr: f[1].parse().map_err(bad)?,
                train_mse: f[2].parse().map_err(bad)?,
                val_rmse: f[3].parse().map_err(bad)?,
                seconds: f[4].parse().map_err(bad)?,
            });
        }
        Ok(TrainHistory { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        crate::fsutil::atomic_write(path, |w| w.write_all(self.to_csv_string().as_bytes()))?;
        Ok(())
    }

    pub fn best_epoch(&self) -> Option<u32> {
        let mut best: Option<(f64, u32)> = None;
        for r in &self.rows {
            if best.is_none() || r.val_rmse < best.unwrap().0 {
                best = Some((r.val_rmse, r.epoch));
            }
        }
        best.map(|(_, e)| e)
    }
}

const CK_MAGIC: [u8; 4] = *b"EGCK";
const CK_VERSION: u32 = 1;

/// Best-validation model snapshot: the config, flat f32 state payload in
/// registry order, the epoch it came from, its validation RMSE, and the
/// training RNG position at save time (in-memory resume aid; not serialized).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: u32,
    pub val_rmse: f64,
    pub state: Vec<f32>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_model(model: &GazeModel<f32>, epoch: u32, val_rmse: f64, rng: Option<RngState>) -> Self {
        let mut state = Vec::new();
        for (_, t) in model.state_tensors() {
            state.extend_from_slice(&t.data());
        }
        Checkpoint {
            config: model.config.clone(),
            epoch,
            val_rmse,
            state,
            rng,
        }
    }

    /// Rebuilds a model with this checkpoint's parameters; eval-mode outputs
    /// reproduce the snapshotted model bit-for-bit.
    pub fn restore(&self) -> Result<GazeModel<f32>, TrainError> {
        let mut rng = RngStream::new(0);
        let model = build_model::<f32>(&self.config, &mut rng)?;
        let mut offset = 0usize;
        for (_, t) in model.state_tensors() {
            let n = t.numel();
            if offset + n > self.state.len() {
                return Err(TrainError::ParamCountMismatch {
                    expected: self.state.len() as u64,
                    found: (offset + n) as u64,
                });
            }
            t.copy_from_slice(&self.state[offset..offset + n]);
            offset += n;
        }
        if offset != self.state.len() {
            return Err(TrainError::ParamCountMismatch {
                expected: offset as u64,
                found: self.state.len() as u64,
            });
        }
        Ok(model)
    }

    /// Format: magic `EGCK`, u32 version, u32 config-JSON length + bytes,
    /// u64 value count, f32 payload in registry order, u32 epoch, f64
    /// validation RMSE (all little-endian).
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let config_json = serde_json::to_vec(&self.config)
            .map_err(|e| TrainError::MalformedConfig(e.to_string()))?;
        crate::fsutil::atomic_write(path, |w| {
            w.write_all(&CK_MAGIC)?;
            w.write_u32::<LittleEndian>(CK_VERSION)?;
            w.write_u32::<LittleEndian>(config_json.len() as u32)?;
            w.write_all(&config_json)?;
            w.write_u64::<LittleEndian>(self.state.len() as u64)?;
            let mut buf = Vec::with_capacity(8192 * 4);
            for chunk in self.state.chunks(8192) {
                buf.clear();
                for v in chunk {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            w.write_u32::<LittleEndian>(self.epoch)?;
            w.write_f64::<LittleEndian>(self.val_rmse)?;
            Ok(())
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let trunc = |e: io::Error, section: &'static str| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                TrainError::Truncated { section }
            } else {
                TrainError::Io(e)
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| trunc(e, "magic"))?;
        if magic != CK_MAGIC {
            return Err(TrainError::BadMagic { found: magic });
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| trunc(e, "version"))?;
        if version != CK_VERSION {
            return Err(TrainError::UnsupportedVersion { found: version });
        }
        let json_len = r.read_u32::<LittleEndian>().map_err(|e| trunc(e, "config length"))? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json).map_err(|e| trunc(e, "config"))?;
        let config: ModelConfig =
            serde_json::from_slice(&json).map_err(|e| TrainError::MalformedConfig(e.to_string()))?;
        config.validate()?;
        let count = r.read_u64::<LittleEndian>().map_err(|e| trunc(e, "value count"))?;
        let expected: usize = {
            // params plus the two batch-norm running buffers
            config.param_count().total() + 2 * config.temporal_filters
        };
        if count != expected as u64 {
            return Err(TrainError::ParamCountMismatch {
                expected: expected as u64,
                found: count,
            });
        }
        let mut state = vec![0f32; count as usize];
        r.read_f32_into::<LittleEndian>(&mut state)
            .map_err(|e| trunc(e, "parameter payload"))?;
        let epoch = r.read_u32::<LittleEndian>().map_err(|e| trunc(e, "epoch"))?;
        let val_rmse = r.read_f64::<LittleEndian>().map_err(|e| trunc(e, "val_rmse"))?;
        Ok(Checkpoint {
            config,
            epoch,
            val_rmse,
            state,
            rng: None,
        })
    }
}

/// Runs the full schedule: seeded per-epoch shuffles, Adam updates, per-epoch
/// validation RMSE in eval mode, and returns the checkpoint of the epoch with
/// the lowest validation RMSE (ties keep the earliest) plus the history.
pub fn train(
    model: &GazeModel<f32>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if val_ds.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    if model.config.channels != crate::data::CHANNELS
        || model.config.timepoints != crate::data::TIMEPOINTS
    {
        return Err(TrainError::DataModelMismatch {
            expected: model.config.channels,
            expected_t: model.config.timepoints,
            got: crate::data::CHANNELS,
            got_t: crate::data::TIMEPOINTS,
        });
    }

    let mut adam = Adam::new(model.parameters(), cfg);
    let mut run_rng = RngStream::new(cfg.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(cfg, epoch)?;
        let shuffle_seed = run_rng.next_u64();
        let dropout_seed = run_rng.next_u64();
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        RngStream::new(shuffle_seed).shuffle(&mut order);
        model.reseed_dropout(dropout_seed);

        model.set_training(true);
        let mut weighted_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train_ds.batch_tensors(batch);
            let pred = model.forward(&x)?;
            let loss = mse_loss(&pred, &y)?;
            model.zero_grads();
            loss.backward()?;
            adam.step(lr)?;
            weighted_loss += loss.item() as f64 * batch.len() as f64;
        }
        let train_mse = weighted_loss / train_ds.len() as f64;

        model.set_training(false);
        let (report, _) = eval::evaluate(model, val_ds, None)?;
        let val_rmse = report.rmse;
        let seconds = started.elapsed().as_secs_f64();
        history.rows.push(EpochStats {
            epoch: epoch as u32,
            lr,
            train_mse,
            val_rmse,
            seconds,
        });

        let improved = best.as_ref().is_none_or(|b| val_rmse < b.val_rmse);
        if improved {
            best = Some(Checkpoint::from_model(
                model,
                epoch as u32,
                val_rmse,
                Some(run_rng.state()),
            ));
        }
    }

    Ok((best.expect("epochs >= 1"), history))
}
