//! Stage-2 training: frozen encoder, dual-head decoder fine-tuning with
//! `L = λ₀·L_MSE + λ₁·L_SSIM + λ₂·L_CE`.
//!
//! Inputs are whole images (clean or pixel-corrupted); the reconstruction
//! target is always the uncorrupted original, and the classification
//! target is the corruption mask `M`. Terms with a weight of exactly zero
//! are not built at all, so they contribute neither values nor gradients.

use serde::{Deserialize, Serialize};

use crate::augment::{make_epoch_stream, AugmentedSample, CorruptionConfig};
use crate::error::{Error, Result};
use crate::model::forward::{forward_full_image, ModelVars};
use crate::pretrain::{accumulate, GradMap};
use crate::model::{ModelConfig, ModelParams, ParamScope};
use crate::tensor::adamw::{clip_global_norm, AdamWConfig, AdamWState};
use crate::tensor::schedule::LrSchedule;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of the positive (corrupted) class in the cross-entropy.
    pub omega: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda0: 1.0,
            lambda1: 0.5,
            lambda2: 1.0,
            omega: 3.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("loss: {msg}")))
            }
        };
        c(
            self.lambda0 >= 0.0 && self.lambda1 >= 0.0 && self.lambda2 >= 0.0,
            "loss weights must be non-negative",
        )?;
        c(self.omega > 0.0, "omega must be positive")?;
        c(self.ssim_window % 2 == 1, "ssim_window must be odd")?;
        c(
            self.ssim_window <= image_size,
            "ssim_window must not exceed the image side",
        )?;
        c(self.ssim_sigma > 0.0, "ssim_sigma must be positive")?;
        Ok(())
    }
}

/// Mean squared error over every element of the image pair.
pub fn mse_full<E: Element>(tape: &Tape<E>, target: &Tensor<E>, pred: Var) -> Result<Var> {
    let shape = tape.shape_of(pred);
    if shape != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_full",
            left: target.shape().to_vec(),
            right: shape,
        });
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Band matrix that applies a normalized 1-D Gaussian window along one
/// axis with symmetric (mirror, edge-inclusive) padding folded in.
pub(crate) fn gaussian_band_matrix<E: Element>(n: usize, window: usize, sigma: f64) -> Tensor<E> {
    let r = (window / 2) as isize;
    let mut weights = Vec::with_capacity(window);
    for t in -r..=r {
        weights.push((-((t * t) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = weights.iter().sum();
    let mut mat = Tensor::<E>::zeros(&[n, n]);
    for i in 0..n as isize {
        for (wi, t) in (-r..=r).enumerate() {
            let mut j = i + t;
            loop {
                if j < 0 {
                    j = -j - 1;
                } else if j >= n as isize {
                    j = 2 * n as isize - 1 - j;
                } else {
                    break;
                }
            }
            let idx = (i as usize) * n + j as usize;
            mat.data_mut()[idx] += E::of_f64(weights[wi] / norm);
        }
    }
    mat
}

/// `1 − mean SSIM`, Gaussian-windowed, computed per channel over every
/// pixel center and averaged. Differentiable end to end: the window sums
/// are band-matrix products, so the whole map is built from tape ops.
pub fn ssim_loss<E: Element>(
    tape: &Tape<E>,
    target: &Tensor<E>,
    pred: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = tape.shape_of(pred);
    if shape != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim_loss",
            left: target.shape().to_vec(),
            right: shape,
        });
    }
    let [c, h, w]: [usize; 3] = shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::config(format!("ssim_loss expects [C,H,W], got {shape:?}")))?;
    if cfg.ssim_window > h || cfg.ssim_window > w {
        return Err(Error::config(format!(
            "ssim_window {} exceeds image {h}x{w}",
            cfg.ssim_window
        )));
    }
    // stabilizers with dynamic range L = 1
    let c1 = cfg.ssim_k1 * cfg.ssim_k1;
    let c2 = cfg.ssim_k2 * cfg.ssim_k2;

    let gh = tape.constant(gaussian_band_matrix::<E>(h, cfg.ssim_window, cfg.ssim_sigma));
    let gwt = {
        let g = gaussian_band_matrix::<E>(w, cfg.ssim_window, cfg.ssim_sigma);
        tape.constant(g.transposed()?)
    };
    let blur = |x: Var| -> crate::error::Result<Var> {
        let t = tape.matmul(gh, x)?;
        tape.matmul(t, gwt)
    };

    let pred2d = tape.reshape(pred, &[c, h * w])?;
    let mut channel_mean_sum: Option<Var> = None;
    for ch in 0..c {
        let x = {
            let row = tape.gather_rows(pred2d, &[ch])?;
            tape.reshape(row, &[h, w])?
        };
        let y = {
            let data = target.data()[ch * h * w..(ch + 1) * h * w].to_vec();
            tape.constant(Tensor::from_vec(&[h, w], data)?)
        };
        let mu_x = blur(x)?;
        let mu_y = blur(y)?;
        let xx = tape.mul(x, x)?;
        let yy = tape.mul(y, y)?;
        let xy = tape.mul(x, y)?;
        let mu_x2 = tape.mul(mu_x, mu_x)?;
        let mu_y2 = tape.mul(mu_y, mu_y)?;
        let mu_xy = tape.mul(mu_x, mu_y)?;
        let var_x = tape.sub(blur(xx)?, mu_x2)?;
        let var_y = tape.sub(blur(yy)?, mu_y2)?;
        let cov = tape.sub(blur(xy)?, mu_xy)?;

        let num = {
            let a = tape.add_scalar(tape.mul_scalar(mu_xy, 2.0), c1);
            let b = tape.add_scalar(tape.mul_scalar(cov, 2.0), c2);
            tape.mul(a, b)?
        };
        let den = {
            let a = tape.add_scalar(tape.add(mu_x2, mu_y2)?, c1);
            let b = tape.add_scalar(tape.add(var_x, var_y)?, c2);
            tape.mul(a, b)?
        };
        let ssim_map = tape.div(num, den)?;
        let m = tape.mean(ssim_map);
        channel_mean_sum = Some(match channel_mean_sum {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    let mean_ssim = tape.mul_scalar(channel_mean_sum.expect("c >= 1"), 1.0 / c as f64);
    let neg = tape.mul_scalar(mean_ssim, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Weighted binary cross-entropy from logits, Eq.-style
/// `-(1/HW)·Σ ω·m·log p + (1−m)·log(1−p)`, computed in the overflow-free
/// softplus form (never materializes `log(0)`).
pub fn weighted_bce<E: Element>(
    tape: &Tape<E>,
    mask: &Tensor<E>,
    logits: Var,
    omega: f64,
) -> Result<Var> {
    let shape = tape.shape_of(logits);
    if shape != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "weighted_bce",
            left: mask.shape().to_vec(),
            right: shape,
        });
    }
    // ω·m·softplus(−z) + (1−m)·softplus(z)
    let pos_w = tape.constant(mask.scale(E::of_f64(omega)));
    let neg_w = tape.constant(mask.map(|m| E::one() - m));
    let neg_z = tape.neg(logits);
    let pos_term = tape.mul(pos_w, tape.softplus(neg_z))?;
    let neg_term = tape.mul(neg_w, tape.softplus(logits))?;
    Ok(tape.mean(tape.add(pos_term, neg_term)?))
}

/// Weighted loss components for logging; they sum to the total.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
    pub ce: f64,
}

/// `λ₀·L_MSE + λ₁·L_SSIM + λ₂·L_CE`. Zero-weight terms are skipped
/// entirely, so with all weights zero the loss is exactly 0.
pub fn total_loss<E: Element>(
    tape: &Tape<E>,
    original: &Tensor<E>,
    recon: Var,
    mask: &Tensor<E>,
    logits: Var,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut components = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let mut push = |tape: &Tape<E>, term: Var, slot: &mut f64| -> Result<()> {
        *slot = tape.value(term).item().to_f64_val();
        total = Some(match total.take() {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        Ok(())
    };
    if cfg.lambda0 != 0.0 {
        let t = mse_full(tape, original, recon)?;
        let t = tape.mul_scalar(t, cfg.lambda0);
        push(tape, t, &mut components.mse)?;
    }
    if cfg.lambda1 != 0.0 {
        let t = ssim_loss(tape, original, recon, cfg)?;
        let t = tape.mul_scalar(t, cfg.lambda1);
        push(tape, t, &mut components.ssim)?;
    }
    if cfg.lambda2 != 0.0 {
        let t = weighted_bce(tape, mask, logits, cfg.omega)?;
        let t = tape.mul_scalar(t, cfg.lambda2);
        push(tape, t, &mut components.ce)?;
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(E::zero())),
    };
    components.total = tape.value(total).item().to_f64_val();
    Ok((total, components))
}

/// Input/target wiring for one stage-2 sample: the network sees `input`
/// (possibly corrupted); reconstruction always targets the original.
#[derive(Clone, Debug)]
pub struct TrainTarget {
    pub input: Tensor,
    pub recon_target: Tensor,
    pub class_target: Tensor,
}

impl From<&AugmentedSample> for TrainTarget {
    fn from(s: &AugmentedSample) -> Self {
        TrainTarget {
            input: s.corrupted.clone(),
            recon_target: s.original.clone(),
            class_target: s.label.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    /// Cosine-annealing restart period, in epochs.
    pub period_epochs: f64,
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
    pub corruption: CorruptionConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 200,
            batch_size: 16,
            max_lr: 1e-3,
            min_lr: 1e-9,
            period_epochs: 60.0,
            clip_norm: None,
            loss: LossConfig::default(),
            corruption: CorruptionConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
    pub ce: f64,
    pub lr: f64,
}

pub struct Stage2Trainer {
    pub model_config: ModelConfig,
    pub config: Stage2Config,
    schedule: LrSchedule,
    optimizer: AdamWState,
    freeze_encoder: bool,
    seed: u64,
}

impl Stage2Trainer {
    pub fn new(
        model_config: ModelConfig,
        config: Stage2Config,
        seed: u64,
        freeze_encoder: bool,
    ) -> Result<Self> {
        if config.epochs == 0 || config.batch_size == 0 {
            return Err(Error::config("stage2: epochs and batch_size must be positive"));
        }
        config.loss.validate(model_config.image_size)?;
        config.corruption.validate(model_config.channels)?;
        let schedule = LrSchedule::Periodic {
            max_lr: config.max_lr,
            min_lr: config.min_lr,
            period: config.period_epochs,
        };
        Ok(Stage2Trainer {
            model_config,
            config,
            schedule,
            optimizer: AdamWState::new(AdamWConfig::default()),
            freeze_encoder,
            seed,
        })
    }

    /// One epoch over the augmentation stream. With a frozen encoder the
    /// encoder parameters are bit-identical before and after.
    pub fn epoch(
        &mut self,
        params: &mut ModelParams,
        images: &[Tensor],
        epoch: usize,
    ) -> Result<Stage2EpochLog> {
        let stream = make_epoch_stream(images, &self.config.corruption, epoch, self.seed)?;
        let lr = self.schedule.lr_at(epoch as f64);
        let scope = if self.freeze_encoder {
            ParamScope::DecoderAndHeads
        } else {
            ParamScope::All
        };

        let mut sums = LossBreakdown::default();
        for batch in stream.chunks(self.config.batch_size) {
            // parallel across samples, deterministic batch-order reduction
            let passes: Vec<Result<(LossBreakdown, GradMap)>> = {
                use rayon::prelude::*;
                batch
                    .par_iter()
                    .map(|sample| self.sample_pass(params, &TrainTarget::from(sample)))
                    .collect()
            };
            let mut grad_sum: GradMap = std::collections::BTreeMap::new();
            for pass in passes {
                let (breakdown, grads) = pass?;
                if !breakdown.total.is_finite() {
                    return Err(Error::config(format!(
                        "stage-2 loss diverged at epoch {epoch}"
                    )));
                }
                sums.total += breakdown.total;
                sums.mse += breakdown.mse;
                sums.ssim += breakdown.ssim;
                sums.ce += breakdown.ce;
                accumulate(&mut grad_sum, grads);
            }
            let inv = 1.0 / batch.len() as f32;
            for g in grad_sum.values_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            if let Some(max_norm) = self.config.clip_norm {
                clip_global_norm(&mut grad_sum, max_norm);
            }
            let mut named = params.trainable_mut(scope);
            self.optimizer.step(
                named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)),
                &grad_sum,
                lr,
            )?;
        }
        let n = stream.len() as f64;
        Ok(Stage2EpochLog {
            epoch,
            total: sums.total / n,
            mse: sums.mse / n,
            ssim: sums.ssim / n,
            ce: sums.ce / n,
            lr,
        })
    }

    fn sample_pass(
        &self,
        params: &ModelParams,
        target: &TrainTarget,
    ) -> Result<(LossBreakdown, GradMap)> {
        let tape = Tape::new();
        let vars = ModelVars::insert(&tape, params, self.freeze_encoder, true);
        let fwd = forward_full_image(&tape, &vars, &self.model_config, &target.input)?;
        let (loss, breakdown) = total_loss(
            &tape,
            &target.recon_target,
            fwd.recon,
            &target.class_target,
            fwd.logits,
            &self.config.loss,
        )?;
        tape.backward(loss)?;
        Ok((breakdown, vars.collect_grads(&tape)))
    }
}
