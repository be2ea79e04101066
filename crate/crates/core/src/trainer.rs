//! Training loop with validation-driven model selection.
//!
//! Every epoch each training cube is randomly rotated and flipped, scaled to
//! the network range and masked; the network learns to reconstruct the
//! unmasked cube. After each epoch the validation cube is reconstructed and
//! the largest global Mahalanobis distance in the reconstruction is recorded.
//! The parameters at the peak of that metric are the result of training.
//!
//! Randomness is derived from `(seed, epoch, item)` so results do not depend
//! on how batch items are scheduled across threads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{normalize_symmetric, random_rotate_flip, HsiCube};
use crate::detectors::grx;
use crate::error::{Error, Result};
use crate::maskgen::{apply_mask, generate_mask_map, FillMode, FillSpec, MaskParams};
use crate::msgms::MsgmsConfig;
use crate::net::{forward, init_params, loss_and_grad, LossKind, NetParams, NetworkConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub seed: u64,
    pub fill_mode: FillMode,
    pub mask_params: MaskParams,
    pub loss: LossKind,
    pub msgms: MsgmsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-6,
            batch_size: 16,
            max_epochs: 200,
            patience_epochs: 30,
            seed: 0,
            fill_mode: FillMode::CutOut,
            mask_params: MaskParams::default(),
            loss: LossKind::Msgms,
            msgms: MsgmsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience_epochs == 0 {
            return bad("batch_size, max_epochs and patience_epochs must be positive".into());
        }
        self.mask_params.validate()
    }
}

/// Generator for one `(epoch, item)` slot of a run.
pub fn derive_rng(seed: u64, epoch: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | (item & 0xFFFF_FFFF));
    rng
}

/// Item slot used for the per-epoch shuffle.
const SHUFFLE_SLOT: u64 = 0xFFFF_FFFF;
/// Item slot of epoch 0 used for parameter initialization.
const INIT_SLOT: u64 = 0xFFFF_FFFE;

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: i32,
    m: NetParams<T>,
    v: NetParams<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &NetParams<T>, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate: T::of(learning_rate),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay: T::of(weight_decay),
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
    pub fn step(&mut self, params: &mut NetParams<T>, grad: &NetParams<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps, wd) = (self.learning_rate, self.eps, self.weight_decay);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for (((p, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub mean_loss: f64,
    pub domain_metric: f64,
    pub seconds: f64,
}

/// Running peak of the validation metric. A later epoch that only equals the
/// peak does not count as a new peak.
#[derive(Debug, Clone)]
pub struct DomainSearchState<P> {
    pub best_metric: f64,
    pub best_epoch: usize,
    pub best_params: Option<P>,
    pub epochs_since_peak: usize,
    pub history: Vec<EpochRecord>,
}

impl<P> Default for DomainSearchState<P> {
    fn default() -> Self {
        Self {
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            best_params: None,
            epochs_since_peak: 0,
            history: Vec::new(),
        }
    }
}

impl<P> DomainSearchState<P> {
    /// Records an epoch; `snapshot` is only called at a new peak. Returns
    /// whether this epoch is the new peak.
    pub fn observe(&mut self, record: EpochRecord, snapshot: impl FnOnce() -> P) -> bool {
        let peak = record.domain_metric > self.best_metric;
        if peak {
            self.best_metric = record.domain_metric;
            self.best_epoch = record.epoch;
            self.best_params = Some(snapshot());
            self.epochs_since_peak = 0;
        } else {
            self.epochs_since_peak += 1;
        }
        self.history.push(record);
        peak
    }

    /// Stop once the peak is `patience` epochs old or the epoch budget is spent.
    pub fn should_stop(&self, patience: usize, max_epochs: usize) -> bool {
        self.history.len() >= max_epochs || (self.best_epoch > 0 && self.epochs_since_peak >= patience)
    }
}

/// Largest GRX score of the reconstruction of `val_cube`.
pub fn domain_metric<T: Scalar>(params: &NetParams<T>, val_cube: &HsiCube<T>, cfg: &NetworkConfig) -> Result<f64> {
    let y = forward(val_cube, params, cfg)?;
    Ok(grx(&y)?.max().as_f64())
}

/// A training cube and the acquisition it came from; CutMix donors must come
/// from a different source.
#[derive(Debug, Clone)]
pub struct TaggedCube<T> {
    pub cube: HsiCube<T>,
    pub tag: String,
}

impl<T> TaggedCube<T> {
    pub fn new(cube: HsiCube<T>, tag: impl Into<String>) -> Self {
        Self { cube, tag: tag.into() }
    }
}

/// Rotate/flip, scale to the network range and mask one training cube.
/// Returns `(masked, original)`.
pub fn augment_and_mask<T: Scalar, R: Rng + ?Sized>(
    cube: &HsiCube<T>,
    tag: &str,
    mask_params: &MaskParams,
    fill_mode: FillMode,
    donor_pool: &[TaggedCube<T>],
    rng: &mut R,
) -> Result<(HsiCube<T>, HsiCube<T>)> {
    let rotated = random_rotate_flip(cube, rng)?;
    let (original, _) = normalize_symmetric(&rotated);
    let mask = generate_mask_map(original.height(), original.width(), mask_params, rng)?;
    let masked = match fill_mode {
        FillMode::CutOut => apply_mask(&original, &mask, &FillSpec::cutout())?,
        FillMode::CutMix => {
            let eligible: Vec<&TaggedCube<T>> = donor_pool.iter().filter(|d| d.tag != tag).collect();
            if eligible.is_empty() {
                return Err(Error::NoDonor(tag.to_string()));
            }
            let donor = eligible[rng.random_range(0..eligible.len())];
            let (donor, _) = normalize_symmetric(&donor.cube);
            apply_mask(&original, &mask, &FillSpec::cutmix(&donor))?
        }
    };
    Ok((masked, original))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stop_epoch: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn epoch_seconds(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.seconds).collect()
    }
}

pub const EPOCH_LOG_HEADER: &str = "epoch,mean_loss,domain_metric,is_peak,seconds";

/// CSV log; `is_peak` marks the selected epoch only.
pub fn epoch_log_csv(report: &TrainReport) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in &report.history {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{},{:.6}",
            r.epoch,
            r.mean_loss,
            r.domain_metric,
            u8::from(r.epoch == report.best_epoch),
            r.seconds
        );
    }
    out
}

pub fn write_epoch_log(report: &TrainReport, path: &Path) -> Result<()> {
    std::fs::write(path, epoch_log_csv(report))?;
    Ok(())
}

/// Trains from a seeded initialization. `val_cube` must already be in
/// network form (band-selected and scaled).
pub fn train<T: Scalar>(
    train_cubes: &[TaggedCube<T>],
    val_cube: &HsiCube<T>,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
) -> Result<(NetParams<T>, TrainReport)> {
    let init = init_params(net_cfg, &mut derive_rng(train_cfg.seed, 0, INIT_SLOT))?;
    train_from(init, train_cubes, val_cube, net_cfg, train_cfg)
}

/// Trains starting from the given parameters.
pub fn train_from<T: Scalar>(
    mut params: NetParams<T>,
    train_cubes: &[TaggedCube<T>],
    val_cube: &HsiCube<T>,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
) -> Result<(NetParams<T>, TrainReport)> {
    train_cfg.validate()?;
    net_cfg.validate()?;
    if train_cubes.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    for t in train_cubes {
        if t.cube.dims() != net_cfg.input_size {
            return Err(Error::ShapeMismatch {
                expected: net_cfg.input_size,
                actual: t.cube.dims(),
            });
        }
    }
    if val_cube.dims() != net_cfg.input_size {
        return Err(Error::ShapeMismatch {
            expected: net_cfg.input_size,
            actual: val_cube.dims(),
        });
    }
    if train_cfg.loss == LossKind::Msgms {
        train_cfg.msgms.validate(net_cfg.input_size.0, net_cfg.input_size.1)?;
    }

    let mut opt = AdamW::new(&params, train_cfg.learning_rate, train_cfg.weight_decay);
    let mut search: DomainSearchState<NetParams<T>> = DomainSearchState::default();
    let seed = train_cfg.seed;
    for epoch in 1..=train_cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_cubes.len()).collect();
        order.shuffle(&mut derive_rng(seed, epoch as u64, SHUFFLE_SLOT));

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            let results: Vec<Result<(T, NetParams<T>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let slot = (b * train_cfg.batch_size + k) as u64;
                    let mut rng = derive_rng(seed, epoch as u64, slot);
                    let item = &train_cubes[idx];
                    let (masked, original) = augment_and_mask(
                        &item.cube,
                        &item.tag,
                        &train_cfg.mask_params,
                        train_cfg.fill_mode,
                        train_cubes,
                        &mut rng,
                    )?;
                    loss_and_grad(&masked, &original, &params, net_cfg, train_cfg.loss, &train_cfg.msgms)
                })
                .collect();
            let mut total: Option<NetParams<T>> = None;
            for r in results {
                let (loss, grad) = r?;
                loss_sum += loss.as_f64();
                match total.as_mut() {
                    None => total = Some(grad),
                    Some(acc) => acc.add_scaled(&grad, T::one()),
                }
            }
            let mut grad = total.expect("non-empty batch");
            let scale = T::one() / T::of_usize(batch.len());
            for t in grad.tensors_mut() {
                t.data.iter_mut().for_each(|v| *v *= scale);
            }
            opt.step(&mut params, &grad);
        }
        if !params.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "parameters became non-finite in epoch {epoch}"
            )));
        }

        let metric = domain_metric(&params, val_cube, net_cfg)?;
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train_cubes.len() as f64,
            domain_metric: metric,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.6e}, metric {:.6e}, {:.2}s",
            record.mean_loss,
            record.domain_metric,
            record.seconds
        );
        search.observe(record, || params.clone());
        if search.should_stop(train_cfg.patience_epochs, train_cfg.max_epochs) {
            break;
        }
    }

    let report = TrainReport {
        stop_epoch: search.history.len(),
        best_epoch: search.best_epoch,
        best_metric: search.best_metric,
        history: search.history,
        checkpoint: None,
    };
    let best = search.best_params.unwrap_or(params);
    Ok((best, report))
}
