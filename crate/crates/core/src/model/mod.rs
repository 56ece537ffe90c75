//! ViT-style encoder, lightweight transformer decoder, and the two output
//! heads: reconstruction (per-token pixels) and per-pixel classification.

pub mod forward;
pub mod patches;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration: 64x64 RGB, 8x8 patches (64 tokens),
    /// 128-wide 4-deep encoder, 64-wide 2-deep decoder.
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            channels: 3,
            patch_size: 8,
            encoder_dim: 128,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.75,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("model: {msg}")))
            }
        };
        c(self.channels > 0, "channels must be positive")?;
        c(self.patch_size > 0, "patch_size must be positive")?;
        c(
            self.image_size % self.patch_size == 0,
            "image_size must be divisible by patch_size",
        )?;
        c(self.encoder_depth > 0 && self.decoder_depth > 0, "depths must be positive")?;
        c(
            self.encoder_heads > 0 && self.encoder_dim % self.encoder_heads == 0,
            "encoder_dim must be divisible by encoder_heads",
        )?;
        c(
            self.decoder_heads > 0 && self.decoder_dim % self.decoder_heads == 0,
            "decoder_dim must be divisible by decoder_heads",
        )?;
        c(
            self.encoder_dim % 4 == 0 && self.decoder_dim % 4 == 0,
            "embedding dims must be divisible by 4 (2-D sin-cos layout)",
        )?;
        c(self.mlp_ratio > 0, "mlp_ratio must be positive")?;
        let n = self.token_count();
        let masked = self.masked_count();
        c(
            self.mask_ratio > 0.0 && self.mask_ratio < 1.0 && masked > 0 && masked < n,
            "mask_ratio must leave at least one masked and one visible token",
        )?;
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// floor(mask_ratio * n)
    pub fn masked_count(&self) -> usize {
        (self.mask_ratio * self.token_count() as f64).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub proj: LinearParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub mlp_fc1: LinearParams,
    pub mlp_fc2: LinearParams,
}

/// All model parameters plus the fixed sin-cos position tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub patch_embed: LinearParams, // [p²C, enc_dim]
    pub enc_pos: Tensor,           // [n, enc_dim], fixed
    pub enc_blocks: Vec<BlockParams>,
    pub enc_norm: NormParams,
    pub dec_embed: LinearParams, // [enc_dim, dec_dim]
    pub mask_token: Tensor,      // [dec_dim], learned
    pub dec_pos: Tensor,         // [n, dec_dim], fixed
    pub dec_blocks: Vec<BlockParams>,
    pub dec_norm: NormParams,
    pub head_recon: LinearParams,    // [dec_dim, p²C]
    pub head_classify: LinearParams, // [dec_dim, p²]
}

fn trunc_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            break x as f32;
        }
    })
}

fn init_linear(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> LinearParams {
    LinearParams {
        weight: trunc_normal(&[inp, out], 0.02, rng),
        bias: Tensor::zeros(&[out]),
    }
}

fn init_norm(dim: usize) -> NormParams {
    NormParams {
        gamma: Tensor::filled(&[dim], 1.0),
        beta: Tensor::zeros(&[dim]),
    }
}

fn init_block(dim: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> BlockParams {
    BlockParams {
        norm1: init_norm(dim),
        attn: AttentionParams {
            query: init_linear(dim, dim, rng),
            key: init_linear(dim, dim, rng),
            value: init_linear(dim, dim, rng),
            proj: init_linear(dim, dim, rng),
        },
        norm2: init_norm(dim),
        mlp_fc1: init_linear(dim, dim * mlp_ratio, rng),
        mlp_fc2: init_linear(dim * mlp_ratio, dim, rng),
    }
}

/// Fixed 2-D sin-cos table: `[grid², dim]`, half the dim for the row
/// coordinate and half for the column, each as sin block then cos block.
pub fn sincos_2d(dim: usize, grid: usize) -> Tensor {
    assert_eq!(dim % 4, 0, "sincos dim must be divisible by 4");
    let half = dim / 2;
    let quarter = dim / 4;
    let axis = |pos: usize| -> Vec<f32> {
        let mut v = Vec::with_capacity(half);
        for j in 0..quarter {
            let omega = 1.0 / 10000f64.powf(j as f64 / quarter as f64);
            v.push((pos as f64 * omega).sin() as f32);
        }
        for j in 0..quarter {
            let omega = 1.0 / 10000f64.powf(j as f64 / quarter as f64);
            v.push((pos as f64 * omega).cos() as f32);
        }
        v
    };
    let mut data = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            data.extend(axis(gy));
            data.extend(axis(gx));
        }
    }
    Tensor::from_vec(&[grid * grid, dim], data).expect("sized above")
}

impl ModelParams {
    /// Seeded initialization: truncated normal (σ=0.02) projections, zero
    /// biases, unit layernorm scales. Bit-reproducible for a fixed seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_blocks = (0..config.encoder_depth)
            .map(|_| init_block(config.encoder_dim, config.mlp_ratio, &mut rng))
            .collect();
        let dec_blocks = (0..config.decoder_depth)
            .map(|_| init_block(config.decoder_dim, config.mlp_ratio, &mut rng))
            .collect();
        Ok(ModelParams {
            patch_embed: init_linear(config.patch_dim(), config.encoder_dim, &mut rng),
            enc_pos: sincos_2d(config.encoder_dim, config.grid()),
            enc_blocks,
            enc_norm: init_norm(config.encoder_dim),
            dec_embed: init_linear(config.encoder_dim, config.decoder_dim, &mut rng),
            mask_token: trunc_normal(&[config.decoder_dim], 0.02, &mut rng),
            dec_pos: sincos_2d(config.decoder_dim, config.grid()),
            dec_blocks,
            dec_norm: init_norm(config.decoder_dim),
            head_recon: init_linear(
                config.decoder_dim,
                config.patch_size * config.patch_size * config.channels,
                &mut rng,
            ),
            head_classify: init_linear(
                config.decoder_dim,
                config.patch_size * config.patch_size,
                &mut rng,
            ),
        })
    }

    /// Visit every tensor (trainable and fixed) with its canonical name.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        self.visit(|name, t| f(name, t));
    }

    fn visit(&self, mut f: impl FnMut(&str, &Tensor)) {
        let block = |prefix: &str, b: &BlockParams, f: &mut dyn FnMut(&str, &Tensor)| {
            f(&format!("{prefix}.norm1.gamma"), &b.norm1.gamma);
            f(&format!("{prefix}.norm1.beta"), &b.norm1.beta);
            for (tag, l) in [
                ("q", &b.attn.query),
                ("k", &b.attn.key),
                ("v", &b.attn.value),
                ("o", &b.attn.proj),
            ] {
                f(&format!("{prefix}.attn.{tag}.weight"), &l.weight);
                f(&format!("{prefix}.attn.{tag}.bias"), &l.bias);
            }
            f(&format!("{prefix}.norm2.gamma"), &b.norm2.gamma);
            f(&format!("{prefix}.norm2.beta"), &b.norm2.beta);
            f(&format!("{prefix}.mlp.fc1.weight"), &b.mlp_fc1.weight);
            f(&format!("{prefix}.mlp.fc1.bias"), &b.mlp_fc1.bias);
            f(&format!("{prefix}.mlp.fc2.weight"), &b.mlp_fc2.weight);
            f(&format!("{prefix}.mlp.fc2.bias"), &b.mlp_fc2.bias);
        };
        f("enc.patch_embed.weight", &self.patch_embed.weight);
        f("enc.patch_embed.bias", &self.patch_embed.bias);
        f("enc.pos", &self.enc_pos);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            block(&format!("enc.block{i}"), b, &mut f);
        }
        f("enc.norm.gamma", &self.enc_norm.gamma);
        f("enc.norm.beta", &self.enc_norm.beta);
        f("dec.embed.weight", &self.dec_embed.weight);
        f("dec.embed.bias", &self.dec_embed.bias);
        f("dec.mask_token", &self.mask_token);
        f("dec.pos", &self.dec_pos);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            block(&format!("dec.block{i}"), b, &mut f);
        }
        f("dec.norm.gamma", &self.dec_norm.gamma);
        f("dec.norm.beta", &self.dec_norm.beta);
        f("head_r.weight", &self.head_recon.weight);
        f("head_r.bias", &self.head_recon.bias);
        f("head_m.weight", &self.head_classify.weight);
        f("head_m.bias", &self.head_classify.bias);
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Mutable references to trainable tensors (position tables excluded),
    /// optionally restricted to the decoder-and-heads subset used by the
    /// frozen-encoder stage.
    pub fn trainable_mut(&mut self, scope: ParamScope) -> Vec<(String, &mut Tensor)> {
        fn push_linear<'a>(
            prefix: &str,
            l: &'a mut LinearParams,
            out: &mut Vec<(String, &'a mut Tensor)>,
        ) {
            out.push((format!("{prefix}.weight"), &mut l.weight));
            out.push((format!("{prefix}.bias"), &mut l.bias));
        }
        fn push_block<'a>(
            prefix: &str,
            b: &'a mut BlockParams,
            out: &mut Vec<(String, &'a mut Tensor)>,
        ) {
            out.push((format!("{prefix}.norm1.gamma"), &mut b.norm1.gamma));
            out.push((format!("{prefix}.norm1.beta"), &mut b.norm1.beta));
            push_linear(&format!("{prefix}.attn.q"), &mut b.attn.query, out);
            push_linear(&format!("{prefix}.attn.k"), &mut b.attn.key, out);
            push_linear(&format!("{prefix}.attn.v"), &mut b.attn.value, out);
            push_linear(&format!("{prefix}.attn.o"), &mut b.attn.proj, out);
            out.push((format!("{prefix}.norm2.gamma"), &mut b.norm2.gamma));
            out.push((format!("{prefix}.norm2.beta"), &mut b.norm2.beta));
            push_linear(&format!("{prefix}.mlp.fc1"), &mut b.mlp_fc1, out);
            push_linear(&format!("{prefix}.mlp.fc2"), &mut b.mlp_fc2, out);
        }

        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if scope == ParamScope::All {
            push_linear("enc.patch_embed", &mut self.patch_embed, &mut out);
            for (i, b) in self.enc_blocks.iter_mut().enumerate() {
                push_block(&format!("enc.block{i}"), b, &mut out);
            }
            out.push(("enc.norm.gamma".into(), &mut self.enc_norm.gamma));
            out.push(("enc.norm.beta".into(), &mut self.enc_norm.beta));
        }
        push_linear("dec.embed", &mut self.dec_embed, &mut out);
        out.push(("dec.mask_token".into(), &mut self.mask_token));
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            push_block(&format!("dec.block{i}"), b, &mut out);
        }
        out.push(("dec.norm.gamma".into(), &mut self.dec_norm.gamma));
        out.push(("dec.norm.beta".into(), &mut self.dec_norm.beta));
        push_linear("head_r", &mut self.head_recon, &mut out);
        push_linear("head_m", &mut self.head_classify, &mut out);
        out
    }

    /// FNV-1a digest over names and raw little-endian bytes, for cheap
    /// bit-equality assertions (encoder freeze contract).
    pub fn digest_encoder(&self) -> u64 {
        self.digest_filtered(|name| name.starts_with("enc."))
    }

    pub fn digest(&self) -> u64 {
        self.digest_filtered(|_| true)
    }

    fn digest_filtered(&self, keep: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        self.for_each(|name, t| {
            if keep(name) {
                eat(name.as_bytes());
                for &x in t.data() {
                    eat(&x.to_bits().to_le_bytes());
                }
            }
        });
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamScope {
    All,
    DecoderAndHeads,
}
