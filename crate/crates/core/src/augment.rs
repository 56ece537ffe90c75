//! Stage-2 data augmentation: corrupt random rectangular blocks of normal
//! images and emit the binary pixel label matrix `M`.
//!
//! `M` marks treated regions, not changed values: every pixel inside a
//! generated block is labeled 1 even if the sampled operation happened to
//! leave its value unchanged, and pixels outside all blocks are returned
//! bit-identical to the original.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Tensor;

const STREAM_SELECT: u64 = 0x61;
const STREAM_SHUFFLE: u64 = 0x62;
const STREAM_SAMPLE: u64 = 0x63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptOp {
    GaussianNoise,
    ChannelShuffle,
    ChannelShift,
    FlipH,
    FlipV,
    Rotate90,
    Rotate180,
}

pub const ALL_OPS: [CorruptOp; 7] = [
    CorruptOp::GaussianNoise,
    CorruptOp::ChannelShuffle,
    CorruptOp::ChannelShift,
    CorruptOp::FlipH,
    CorruptOp::FlipV,
    CorruptOp::Rotate90,
    CorruptOp::Rotate180,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Fraction of samples corrupted per epoch (the rest pass through).
    pub corrupt_probability: f64,
    pub block_count: [usize; 2],
    /// Block side as a fraction of the image side.
    pub block_frac: [f64; 2],
    pub ops: Vec<CorruptOp>,
    pub noise_sigma: f64,
    /// Chance that a block receives a second, distinct operation.
    pub multi_op_prob: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            corrupt_probability: 5.0 / 6.0,
            block_count: [1, 12],
            block_frac: [0.05, 0.35],
            ops: ALL_OPS.to_vec(),
            noise_sigma: 0.2,
            multi_op_prob: 0.3,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("corruption: {msg}")))
            }
        };
        c(
            (0.0..=1.0).contains(&self.corrupt_probability),
            "corrupt_probability must be in [0,1]",
        )?;
        c(
            self.block_count[0] >= 1 && self.block_count[0] <= self.block_count[1],
            "block_count range must be ordered and start at 1 or more",
        )?;
        c(
            self.block_frac[0] > 0.0
                && self.block_frac[0] <= self.block_frac[1]
                && self.block_frac[1] <= 1.0,
            "block_frac range must be ordered within (0,1]",
        )?;
        c(!self.ops.is_empty(), "op set must not be empty")?;
        c(self.noise_sigma >= 0.0, "noise_sigma must be non-negative")?;
        c(
            (0.0..=1.0).contains(&self.multi_op_prob),
            "multi_op_prob must be in [0,1]",
        )?;
        if channels < 2 {
            c(
                !self.ops.contains(&CorruptOp::ChannelShuffle),
                "channel_shuffle needs at least 2 channels",
            )?;
        }
        Ok(())
    }
}

/// Corrupted image plus the ground-truth corruption mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub original: Tensor,
    pub corrupted: Tensor,
    /// `M in {0,1}^{H,W}`: 1 exactly on the union of block rectangles.
    pub label: Tensor,
}

impl AugmentedSample {
    pub fn clean(image: Tensor) -> Self {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        AugmentedSample {
            original: image.clone(),
            corrupted: image,
            label: Tensor::zeros(&[h, w]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

fn sample_block(height: usize, width: usize, cfg: &CorruptionConfig, rng: &mut ChaCha8Rng) -> Block {
    let side = |limit: usize, rng: &mut ChaCha8Rng| -> usize {
        let frac = rng.gen_range(cfg.block_frac[0]..=cfg.block_frac[1]);
        ((frac * limit as f64).round() as usize).clamp(1, limit)
    };
    let w = side(width, rng);
    let h = side(height, rng);
    let x0 = rng.gen_range(0..=width - w);
    let y0 = rng.gen_range(0..=height - h);
    Block { x0, y0, w, h }
}

/// Corrupt one image. Draws the per-sample Bernoulli first; a negative
/// draw returns the identity sample with `M ≡ 0`.
pub fn corrupt(image: &Tensor, cfg: &CorruptionConfig, rng: &mut ChaCha8Rng) -> Result<AugmentedSample> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::config(format!("corrupt expects [C,H,W], got {:?}", image.shape())))?;
    cfg.validate(c)?;
    if !(rng.gen_range(0.0..1.0) < cfg.corrupt_probability) {
        return Ok(AugmentedSample::clean(image.clone()));
    }
    Ok(corrupt_always(image, cfg, rng, c, h, w))
}

/// Corruption with the Bernoulli gate already decided positive.
fn corrupt_always(
    image: &Tensor,
    cfg: &CorruptionConfig,
    rng: &mut ChaCha8Rng,
    c: usize,
    h: usize,
    w: usize,
) -> AugmentedSample {
    let mut corrupted = image.clone();
    let mut label = Tensor::zeros(&[h, w]);
    let k = rng.gen_range(cfg.block_count[0]..=cfg.block_count[1]);
    for _ in 0..k {
        let block = sample_block(h, w, cfg, rng);
        let mut ops = Vec::with_capacity(2);
        ops.push(*cfg.ops.choose(rng).expect("non-empty op set"));
        if cfg.ops.len() > 1 && rng.gen_range(0.0..1.0) < cfg.multi_op_prob {
            let remaining: Vec<CorruptOp> =
                cfg.ops.iter().copied().filter(|o| *o != ops[0]).collect();
            ops.push(*remaining.choose(rng).expect("len > 1"));
        }
        for op in ops {
            apply_op(&mut corrupted, c, h, w, block, op, cfg, rng);
        }
        for y in block.y0..block.y0 + block.h {
            for x in block.x0..block.x0 + block.w {
                label.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    AugmentedSample {
        original: image.clone(),
        corrupted,
        label,
    }
}

fn apply_op(
    img: &mut Tensor,
    c: usize,
    h: usize,
    w: usize,
    b: Block,
    op: CorruptOp,
    cfg: &CorruptionConfig,
    rng: &mut ChaCha8Rng,
) {
    let at = |ch: usize, y: usize, x: usize| ch * h * w + y * w + x;
    match op {
        CorruptOp::GaussianNoise => {
            let dist = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
                .expect("sigma validated");
            for ch in 0..c {
                for y in b.y0..b.y0 + b.h {
                    for x in b.x0..b.x0 + b.w {
                        let i = at(ch, y, x);
                        let v = img.data()[i] as f64 + dist.sample(rng);
                        img.data_mut()[i] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
        CorruptOp::ChannelShuffle => {
            // cyclic channel rotation by a non-zero offset
            let shift = rng.gen_range(1..c);
            let snapshot = img.clone();
            for ch in 0..c {
                let src = (ch + shift) % c;
                for y in b.y0..b.y0 + b.h {
                    for x in b.x0..b.x0 + b.w {
                        img.data_mut()[at(ch, y, x)] = snapshot.data()[at(src, y, x)];
                    }
                }
            }
        }
        CorruptOp::ChannelShift => {
            for ch in 0..c {
                let magnitude = rng.gen_range(0.2..0.6);
                let sign = if rng.gen_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                let delta = (sign * magnitude) as f32;
                for y in b.y0..b.y0 + b.h {
                    for x in b.x0..b.x0 + b.w {
                        let i = at(ch, y, x);
                        img.data_mut()[i] = (img.data()[i] + delta).clamp(0.0, 1.0);
                    }
                }
            }
        }
        CorruptOp::FlipH => {
            for ch in 0..c {
                for y in b.y0..b.y0 + b.h {
                    for dx in 0..b.w / 2 {
                        let i = at(ch, y, b.x0 + dx);
                        let j = at(ch, y, b.x0 + b.w - 1 - dx);
                        img.data_mut().swap(i, j);
                    }
                }
            }
        }
        CorruptOp::FlipV => {
            for ch in 0..c {
                for dy in 0..b.h / 2 {
                    for x in b.x0..b.x0 + b.w {
                        let i = at(ch, b.y0 + dy, x);
                        let j = at(ch, b.y0 + b.h - 1 - dy, x);
                        img.data_mut().swap(i, j);
                    }
                }
            }
        }
        CorruptOp::Rotate90 => {
            if b.w != b.h {
                // in-place semantics need a square block
                apply_op(img, c, h, w, b, CorruptOp::Rotate180, cfg, rng);
                return;
            }
            let snapshot = img.clone();
            for ch in 0..c {
                for dy in 0..b.h {
                    for dx in 0..b.w {
                        // clockwise: (dy,dx) <- (h-1-dx, dy)
                        let src = at(ch, b.y0 + b.h - 1 - dx, b.x0 + dy);
                        img.data_mut()[at(ch, b.y0 + dy, b.x0 + dx)] = snapshot.data()[src];
                    }
                }
            }
        }
        CorruptOp::Rotate180 => {
            let snapshot = img.clone();
            for ch in 0..c {
                for dy in 0..b.h {
                    for dx in 0..b.w {
                        let src = at(ch, b.y0 + b.h - 1 - dy, b.x0 + b.w - 1 - dx);
                        img.data_mut()[at(ch, b.y0 + dy, b.x0 + dx)] = snapshot.data()[src];
                    }
                }
            }
        }
    }
}

/// One epoch's worth of samples: exactly `round(p*N)` corrupted (chosen
/// without replacement), the rest clean, order shuffled. Fully determined
/// by `(dataset, config, epoch_index, base_seed)`.
pub fn make_epoch_stream(
    dataset: &[Tensor],
    cfg: &CorruptionConfig,
    epoch_index: usize,
    base_seed: u64,
) -> Result<Vec<AugmentedSample>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("augmentation stream: dataset is empty".into()));
    }
    if let Some(img) = dataset.first() {
        let [c, _, _]: [usize; 3] = img
            .shape()
            .try_into()
            .map_err(|_| Error::config("dataset images must be [C,H,W]".to_string()))?;
        cfg.validate(c)?;
    }
    let n = dataset.len();
    let n_corrupt = (cfg.corrupt_probability * n as f64).round() as usize;

    let mut selector = seeding::rng_from(base_seed, STREAM_SELECT, epoch_index as u64);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut selector);
    let corrupt_set: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in indices.iter().take(n_corrupt) {
            v[i] = true;
        }
        v
    };

    let epoch_seed = seeding::derive_seed(base_seed, STREAM_SAMPLE, epoch_index as u64);
    let mut samples = Vec::with_capacity(n);
    for (i, image) in dataset.iter().enumerate() {
        if corrupt_set[i] {
            let [c, h, w]: [usize; 3] = image.shape().try_into().expect("validated above");
            let mut rng = seeding::rng_from(epoch_seed, 0, i as u64);
            samples.push(corrupt_always(image, cfg, &mut rng, c, h, w));
        } else {
            samples.push(AugmentedSample::clean(image.clone()));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng_from(base_seed, STREAM_SHUFFLE, epoch_index as u64));
    Ok(order.into_iter().map(|i| samples[i].clone()).collect())
}
