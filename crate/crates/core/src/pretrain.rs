//! Stage-1 training: random patch masking and masked-patch reconstruction.
//!
//! Per image, a random 75% of tokens is hidden; the encoder sees only the
//! visible remainder, the decoder fills the gaps with mask tokens, and the
//! loss is the mean squared error over the masked rows alone. Both encoder
//! and decoder parameters update.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{self, ModelVars};
use crate::model::patches::patchify;
use crate::model::{ModelConfig, ModelParams, ParamScope};
use crate::seeding;
use crate::tensor::adamw::{clip_global_norm, AdamWConfig, AdamWState};
use crate::tensor::schedule::{linear_scaled_lr, LrSchedule};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

const STREAM_ORDER: u64 = 0x51;
const STREAM_MASK: u64 = 0x52;

/// Masked/visible index split of the token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

/// Uniform subset of `floor(mask_ratio * n)` masked tokens, without
/// replacement. Index lists come back sorted.
pub fn sample_mask(n: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    let k = (mask_ratio * n as f64).floor() as usize;
    if k == 0 || k >= n {
        return Err(Error::config(format!(
            "mask_ratio {mask_ratio} with n={n} leaves nothing to mask or nothing visible"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates: the first k entries are a uniform subset
    for i in 0..k {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut masked: Vec<usize> = indices[..k].to_vec();
    masked.sort_unstable();
    let is_masked: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &masked {
            v[i] = true;
        }
        v
    };
    let visible: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { n, masked, visible })
}

/// Mean squared error over masked token rows only, normalized by
/// `|masked| * d`. Visible rows do not contribute.
pub fn masked_mse<E: Element>(
    tape: &Tape<E>,
    original_patches: &Tensor<E>,
    recon_patches: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    let shape = tape.shape_of(recon_patches);
    if shape != original_patches.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_mse",
            left: original_patches.shape().to_vec(),
            right: shape,
        });
    }
    let d = original_patches.shape()[1];
    let mut target = Vec::with_capacity(plan.masked.len() * d);
    for &i in &plan.masked {
        target.extend_from_slice(&original_patches.data()[i * d..(i + 1) * d]);
    }
    let target = tape.constant(Tensor::from_vec(&[plan.masked.len(), d], target)?);
    let recon_masked = tape.gather_rows(recon_patches, &plan.masked)?;
    let diff = tape.sub(recon_masked, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base rate before the `lr_base * batch/256` scaling rule.
    pub lr_base: f64,
    pub min_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub clip_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 120,
            batch_size: 20,
            lr_base: 1e-3,
            min_lr: 0.0,
            warmup_frac: 0.1,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct Stage1Trainer {
    pub model_config: ModelConfig,
    pub config: PretrainConfig,
    schedule: LrSchedule,
    optimizer: AdamWState,
    steps_per_epoch: usize,
    seed: u64,
}

impl Stage1Trainer {
    pub fn new(
        model_config: ModelConfig,
        config: PretrainConfig,
        dataset_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if dataset_len == 0 {
            return Err(Error::Dataset("stage-1 training set is empty".into()));
        }
        if config.epochs == 0 || config.batch_size == 0 {
            return Err(Error::config("pretrain: epochs and batch_size must be positive"));
        }
        let steps_per_epoch = dataset_len.div_ceil(config.batch_size);
        let total_steps = (steps_per_epoch * config.epochs) as u64;
        let schedule = LrSchedule::HalfCycle {
            base_lr: linear_scaled_lr(config.lr_base, config.batch_size),
            min_lr: config.min_lr,
            warmup_steps: ((total_steps as f64) * config.warmup_frac).round() as u64,
            total_steps,
        };
        Ok(Stage1Trainer {
            model_config,
            config,
            schedule,
            optimizer: AdamWState::new(AdamWConfig::default()),
            steps_per_epoch,
            seed,
        })
    }

    /// One epoch over normal images: per-image mask sampling, visible-only
    /// encoding, masked-row loss, AdamW on every trainable parameter.
    pub fn epoch(
        &mut self,
        params: &mut ModelParams,
        images: &[Tensor],
        epoch: usize,
    ) -> Result<EpochLog> {
        if images.is_empty() {
            return Err(Error::Dataset("stage-1 training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut seeding::rng_from(self.seed, STREAM_ORDER, epoch as u64));

        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for (batch_idx, batch) in order.chunks(self.config.batch_size).enumerate() {
            // samples run in parallel (one tape per thread); gradients are
            // reduced sequentially in batch order, so results do not
            // depend on scheduling
            let passes: Vec<Result<(f64, GradMap)>> = {
                use rayon::prelude::*;
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(within, &img_idx)| {
                        let sample_tag = (epoch * self.steps_per_epoch + batch_idx) as u64;
                        let mut mask_rng = seeding::rng_from(
                            self.seed,
                            STREAM_MASK,
                            sample_tag * self.config.batch_size as u64 + within as u64,
                        );
                        self.sample_pass(params, &images[img_idx], &mut mask_rng)
                    })
                    .collect()
            };
            let mut grad_sum: GradMap = std::collections::BTreeMap::new();
            for pass in passes {
                let (loss, grads) = pass?;
                if !loss.is_finite() {
                    return Err(Error::config(format!(
                        "stage-1 loss diverged at epoch {epoch}"
                    )));
                }
                loss_sum += loss;
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
            let step = self.optimizer.step_count();
            let lr = self.schedule.lr_at(step as f64);
            last_lr = lr;
            let mut named = params.trainable_mut(ParamScope::All);
            self.optimizer.step(
                named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)),
                &grad_sum,
                lr,
            )?;
        }
        Ok(EpochLog {
            epoch,
            loss: loss_sum / images.len() as f64,
            lr: last_lr,
        })
    }

    fn sample_pass(
        &self,
        params: &ModelParams,
        image: &Tensor,
        mask_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, GradMap)> {
        let cfg = &self.model_config;
        let patches = patchify(image, cfg.patch_size)?;
        let plan = sample_mask(cfg.token_count(), cfg.mask_ratio, mask_rng)?;

        let tape = Tape::new();
        let vars = ModelVars::insert(&tape, params, false, true);
        let mut visible_rows = Vec::with_capacity(plan.visible.len() * cfg.patch_dim());
        let d = cfg.patch_dim();
        for &i in &plan.visible {
            visible_rows.extend_from_slice(&patches.data()[i * d..(i + 1) * d]);
        }
        let visible =
            tape.constant(Tensor::from_vec(&[plan.visible.len(), d], visible_rows)?);
        let encoded = forward::encode(&tape, &vars, cfg, visible, &plan.visible)?;
        // stage 1 never encodes masked tokens
        debug_assert_eq!(tape.shape_of(encoded)[0], plan.visible.len());
        let dec = forward::decode(&tape, &vars, cfg, encoded, &plan.visible)?;
        let recon = forward::head_recon_tokens(&tape, &vars, dec)?;
        let loss = masked_mse(&tape, &patches, recon, &plan)?;
        let loss_value = tape.value(loss).item() as f64;
        tape.backward(loss)?;
        Ok((loss_value, vars.collect_grads(&tape)))
    }
}

pub(crate) type GradMap = std::collections::BTreeMap<String, Tensor>;

pub(crate) fn accumulate(sum: &mut GradMap, grads: GradMap) {
    for (name, g) in grads {
        match sum.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                sum.insert(name, g);
            }
        }
    }
}
