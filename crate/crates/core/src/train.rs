//! AdamW training with per-epoch exponential learning-rate decay, random
//! 2.5D crops, full-resolution validation and lowest-validation-loss
//! checkpoint selection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::medsegnet::{decode_tensors, encode_tensors, hard_dice, MedSegModel, ModelError, NamedTensor, DICE_EPS};
use crate::prep::{extract_25d, random_crop, DatasetManifest, PrepError, Slice25D, Split};
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, Mode, ParamStore, Tensor, TensorError};
use crate::volio::{atomic_write, MaskVolume, VolioError, Volume};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
const OPTIMIZER_MAGIC: &[u8; 4] = b"OPTM";
pub const CURVES_HEADER: &str = "epoch,train_loss,val_loss,val_dice";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch must be >= 0, got {0}")]
    NegativeEpoch(i64),
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("scan `{0}` is in the manifest but was not loaded")]
    MissingScan(String),
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("curves: {0}")]
    Curves(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Volume(#[from] VolioError),
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative decay per epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_decay: 0.985,
            weight_decay: 1e-5,
            epochs: 95,
            batch_size: 8,
            crop_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.crop_size < 2 {
            return Err(TrainError::Config("crop_size must be >= 2".into()));
        }
        Ok(())
    }

    /// `lr0 * lr_decay^epoch`, epochs counted from 0.
    pub fn lr_at(&self, epoch: i64) -> Result<f64, TrainError> {
        if epoch < 0 {
            return Err(TrainError::NegativeEpoch(epoch));
        }
        Ok(self.lr0 * self.lr_decay.powf(epoch as f64))
    }
}

/// Learning rate of the default schedule.
pub fn lr_at(epoch: i64) -> Result<f64, TrainError> {
    TrainConfig::default().lr_at(epoch)
}

/// First and second moments per parameter, in parameter-store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn check(&self, store: &ParamStore<T>) -> Result<(), TrainError> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(TrainError::StateMismatch(format!(
                "{} moment tensors for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            if m.len() != p.tensor.numel() || v.len() != p.tensor.numel() {
                return Err(TrainError::StateMismatch(format!("`{}` has {} values", p.name, p.tensor.numel())));
            }
            if let Some(g) = p.tensor.grad() {
                if g.len() != p.tensor.numel() {
                    return Err(TrainError::StateMismatch(format!("gradient of `{}` has wrong length", p.name)));
                }
            }
        }
        Ok(())
    }

    /// One decoupled-weight-decay Adam update using the gradients stored on
    /// the parameters. Parameters without a gradient see `g = 0`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, wd: f64) -> Result<(), TrainError> {
        self.check(store)?;
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let (c1, c2) = (T::lit(1.0 - BETA1.powi(t)), T::lit(1.0 - BETA2.powi(t)));
        let (lr, wd, eps) = (T::lit(lr), T::lit(wd), T::lit(ADAM_EPS));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.tensor.grad().map(|g| g.to_vec());
            let theta = p.tensor.data_mut();
            for i in 0..theta.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let old = theta[i];
                theta[i] = old - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * old;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// 1-indexed.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

/// One row per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveLog {
    pub rows: Vec<CurveRow>,
}

impl CurveLog {
    pub fn to_csv(&self) -> Result<Vec<u8>, TrainError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| TrainError::Curves(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(CURVES_HEADER.split(',')).map_err(|e| TrainError::Curves(e.to_string()))?;
        }
        w.into_inner().map_err(|e| TrainError::Curves(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        Ok(atomic_write(path, &self.to_csv()?)?)
    }

    pub fn read_csv(path: &Path) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Curves(format!("{}: {e}", path.display())))?;
        let header = r.headers().map_err(|e| TrainError::Curves(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>().join(",") != CURVES_HEADER {
            return Err(TrainError::Curves(format!("{}: unexpected header", path.display())));
        }
        let rows = r
            .deserialize()
            .collect::<Result<Vec<CurveRow>, _>>()
            .map_err(|e| TrainError::Curves(format!("{}: {e}", path.display())))?;
        Ok(Self { rows })
    }
}

/// Epoch (1-indexed) and value of the lowest validation loss; the earliest
/// epoch wins ties because later epochs must strictly improve.
pub fn select_best(val_losses: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((i + 1, l));
        }
    }
    best
}

/// Normalized volumes and masks keyed by scan id, plus the slice manifest.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub scans: BTreeMap<String, (Volume, MaskVolume)>,
    pub manifest: DatasetManifest,
}

impl TrainData {
    fn slice(&self, scan_id: &str, z: usize) -> Result<Slice25D, TrainError> {
        let (v, m) = self.scans.get(scan_id).ok_or_else(|| TrainError::MissingScan(scan_id.to_string()))?;
        Ok(extract_25d(v, m, scan_id, z)?)
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: MedSegModel<T>,
    pub optimizer: AdamWState<T>,
    pub curves: CurveLog,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(model: MedSegModel<T>) -> Self {
        let optimizer = AdamWState::new(model.params());
        Self {
            model,
            optimizer,
            curves: CurveLog::default(),
        }
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.curves.rows.len()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights of the lowest-validation-loss epoch reached in this call;
    /// `None` if a resumed run never beat its earlier best.
    pub best: Option<MedSegModel<T>>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub last: TrainState<T>,
}

fn batch_tensors<T: Scalar>(slices: &[Slice25D]) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (slices[0].height, slices[0].width);
    let mut x = Vec::with_capacity(slices.len() * 3 * h * w);
    let mut y = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        x.extend(s.channels.iter().map(|&c| T::lit(c as f64)));
        y.extend(s.label.iter().map(|&l| if l != 0 { T::one() } else { T::zero() }));
    }
    let b = slices.len();
    (
        Tensor::new(vec![b, 3, h, w], x).expect("batch sizes agree"),
        Tensor::new(vec![b, 1, h, w], y).expect("batch sizes agree"),
    )
}

fn epoch_rng(seed: u64, epoch: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Mean Dice loss and mean hard Dice over full-resolution slices, batch 1.
pub fn validate<T: Scalar>(model: &MedSegModel<T>, data: &TrainData) -> Result<(f64, f64), TrainError> {
    let entries: Vec<_> = data.manifest.split(Split::InternalVal).collect();
    if entries.is_empty() {
        return Err(TrainError::EmptySplit(Split::InternalVal));
    }
    let per_slice = entries
        .par_iter()
        .map(|e| {
            let s = data.slice(&e.scan_id, e.z)?;
            let (x, y) = batch_tensors::<T>(std::slice::from_ref(&s));
            let mut g = Graph::new();
            let xv = g.input(&x);
            let p = model.forward(&mut g, xv, Mode::Eval)?;
            let loss = g.dice_loss(p, &y, T::lit(DICE_EPS))?;
            Ok((g.value(loss)[0].as_f64(), hard_dice(g.value(p), y.data())))
        })
        .collect::<Result<Vec<(f64, f64)>, TrainError>>()?;
    let n = per_slice.len() as f64;
    let loss = per_slice.iter().map(|r| r.0).sum::<f64>() / n;
    let dice = per_slice.iter().map(|r| r.1).sum::<f64>() / n;
    Ok((loss, dice))
}

/// Runs `config.epochs - state.epoch()` further epochs. `on_epoch` receives
/// the state after every epoch and whether its validation loss is a new
/// strict minimum; use it to persist checkpoints and curves.
pub fn train_loop<T: Scalar>(
    mut state: TrainState<T>,
    data: &TrainData,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState<T>, bool) -> Result<(), TrainError>,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    let train: Vec<_> = data.manifest.split(Split::Train).cloned().collect();
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if data.manifest.split(Split::InternalVal).next().is_none() {
        return Err(TrainError::EmptySplit(Split::InternalVal));
    }
    let prior: Vec<f64> = state.curves.rows.iter().map(|r| r.val_loss).collect();
    let mut best_val = select_best(&prior).map_or(f64::INFINITY, |b| b.1);
    let mut best_epoch = select_best(&prior).map_or(0, |b| b.0);
    let mut best = None;

    for epoch in state.epoch() + 1..=config.epochs {
        let lr = config.lr_at(epoch as i64 - 1)?;
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order = train.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let crops = chunk
                .iter()
                .map(|e| Ok(random_crop(&data.slice(&e.scan_id, e.z)?, config.crop_size, &mut rng)))
                .collect::<Result<Vec<_>, TrainError>>()?;
            let (x, y) = batch_tensors::<T>(&crops);
            let mut g = Graph::new();
            let xv = g.input(&x);
            let p = state.model.forward(&mut g, xv, Mode::Train)?;
            let loss = g.dice_loss(p, &y, T::lit(DICE_EPS))?;
            let lv = g.value(loss)[0].as_f64();
            if !lv.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi + 1 });
            }
            g.backward_into(loss, state.model.params_mut())?;
            state.model.commit_bn(&g);
            state.optimizer.step(state.model.params_mut(), lr, config.weight_decay)?;
            loss_sum += lv;
            batches += 1;
        }

        let (val_loss, val_dice) = validate(&state.model, data)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: 0 });
        }
        state.curves.rows.push(CurveRow {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_dice,
        });
        log::info!(
            "epoch {epoch}/{}: lr {lr:.3e} train {:.4} val {val_loss:.4} dice {val_dice:.4}",
            config.epochs,
            loss_sum / batches as f64
        );
        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            best_epoch = epoch;
            best = Some(state.model.clone());
        }
        on_epoch(&state, improved)?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss: best_val,
        last: state,
    })
}

/// Optimizer snapshot stored alongside checkpoint weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection<T> {
    pub state: AdamWState<T>,
    /// Completed epochs when saved.
    pub epoch: usize,
}

fn ckpt_err(path: &Path, detail: impl std::fmt::Display) -> TrainError {
    TrainError::Checkpoint {
        path: path.display().to_string(),
        detail: detail.to_string(),
    }
}

/// Weights container followed, if `optimizer` is given, by
/// `"OPTM" | u64 step | u32 epoch | container of m.<name> / v.<name>`.
pub fn encode_checkpoint<T: Scalar>(
    model: &MedSegModel<T>,
    optimizer: Option<&OptimizerSection<T>>,
) -> Result<Vec<u8>, TrainError> {
    let mut bytes = encode_tensors(&model.to_named_tensors())?;
    if let Some(opt) = optimizer {
        let f32s = |s: &[T]| s.iter().map(|v| v.as_f64() as f32).collect::<Vec<f32>>();
        let mut moments = Vec::new();
        for ((p, m), v) in model.params().iter().zip(&opt.state.m).zip(&opt.state.v) {
            for (prefix, data) in [("m", m), ("v", v)] {
                moments.push(NamedTensor {
                    name: format!("{prefix}.{}", p.name),
                    dims: p.tensor.shape().to_vec(),
                    data: f32s(data),
                });
            }
        }
        bytes.extend_from_slice(OPTIMIZER_MAGIC);
        bytes.extend_from_slice(&opt.state.t.to_le_bytes());
        bytes.extend_from_slice(&(opt.epoch as u32).to_le_bytes());
        bytes.extend_from_slice(&encode_tensors(&moments)?);
    }
    Ok(bytes)
}

pub fn save_checkpoint<T: Scalar>(
    model: &MedSegModel<T>,
    optimizer: Option<&OptimizerSection<T>>,
    path: &Path,
) -> Result<(), TrainError> {
    Ok(atomic_write(path, &encode_checkpoint(model, optimizer)?)?)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(MedSegModel<T>, Option<OptimizerSection<T>>), ModelError> {
    let (tensors, tail) = decode_tensors(bytes)?;
    let model = MedSegModel::<T>::from_named_tensors(&tensors)?;
    if tail.is_empty() {
        return Ok((model, None));
    }
    if tail.len() < 16 || &tail[..4] != OPTIMIZER_MAGIC {
        return Err(ModelError::Format("unrecognized trailing section".into()));
    }
    let t = u64::from_le_bytes(tail[4..12].try_into().unwrap());
    let epoch = u32::from_le_bytes(tail[12..16].try_into().unwrap()) as usize;
    let (moments, rest) = decode_tensors(&tail[16..])?;
    if !rest.is_empty() {
        return Err(ModelError::Format(format!("{} unexpected trailing bytes", rest.len())));
    }
    let by_name: BTreeMap<&str, &NamedTensor> = moments.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut state = AdamWState::new(model.params());
    state.t = t;
    for ((p, m), v) in model.params().iter().zip(&mut state.m).zip(&mut state.v) {
        for (prefix, dst) in [("m", m), ("v", v)] {
            let name = format!("{prefix}.{}", p.name);
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| ModelError::Format(format!("optimizer section lacks `{name}`")))?;
            if src.data.len() != dst.len() {
                return Err(ModelError::Format(format!("`{name}` has wrong length")));
            }
            for (d, &s) in dst.iter_mut().zip(&src.data) {
                *d = T::lit(s as f64);
            }
        }
    }
    if by_name.len() != 2 * model.params().len() {
        return Err(ModelError::Format("optimizer section has extra tensors".into()));
    }
    Ok((model, Some(OptimizerSection { state, epoch })))
}

/// Loads weights and the optimizer section if present.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(MedSegModel<T>, Option<OptimizerSection<T>>), TrainError> {
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| ckpt_err(path, e))
}
