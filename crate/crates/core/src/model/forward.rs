//! Differentiable forward passes: encoder over visible tokens, decoder with
//! mask-token reinsertion, and the two per-token heads.
//!
//! Parameters enter a tape as leaves once per forward ([`ModelVars`]); the
//! same graph code serves training (backward over the leaves) and
//! inference (leaves frozen, values read out).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::patches::{patchify, unpatchify_perm};
use crate::model::{AttentionParams, BlockParams, LinearParams, ModelConfig, ModelParams, NormParams};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub proj: LinearVars,
}

#[derive(Clone, Copy)]
pub struct BlockVars {
    pub norm1: NormVars,
    pub attn: AttentionVars,
    pub norm2: NormVars,
    pub mlp_fc1: LinearVars,
    pub mlp_fc2: LinearVars,
}

/// Every parameter of the model as tape leaves.
pub struct ModelVars {
    pub patch_embed: LinearVars,
    pub enc_pos: Var,
    pub enc_blocks: Vec<BlockVars>,
    pub enc_norm: NormVars,
    pub dec_embed: LinearVars,
    pub mask_token: Var,
    pub dec_pos: Var,
    pub dec_blocks: Vec<BlockVars>,
    pub dec_norm: NormVars,
    pub head_recon: LinearVars,
    pub head_classify: LinearVars,
}

fn leaf_linear(tape: &Tape, l: &LinearParams, grad: bool) -> LinearVars {
    LinearVars {
        weight: tape.leaf(l.weight.clone(), grad),
        bias: tape.leaf(l.bias.clone(), grad),
    }
}

fn leaf_norm(tape: &Tape, n: &NormParams, grad: bool) -> NormVars {
    NormVars {
        gamma: tape.leaf(n.gamma.clone(), grad),
        beta: tape.leaf(n.beta.clone(), grad),
    }
}

fn leaf_attn(tape: &Tape, a: &AttentionParams, grad: bool) -> AttentionVars {
    AttentionVars {
        query: leaf_linear(tape, &a.query, grad),
        key: leaf_linear(tape, &a.key, grad),
        value: leaf_linear(tape, &a.value, grad),
        proj: leaf_linear(tape, &a.proj, grad),
    }
}

fn leaf_block(tape: &Tape, b: &BlockParams, grad: bool) -> BlockVars {
    BlockVars {
        norm1: leaf_norm(tape, &b.norm1, grad),
        attn: leaf_attn(tape, &b.attn, grad),
        norm2: leaf_norm(tape, &b.norm2, grad),
        mlp_fc1: leaf_linear(tape, &b.mlp_fc1, grad),
        mlp_fc2: leaf_linear(tape, &b.mlp_fc2, grad),
    }
}

impl ModelVars {
    /// Insert all parameters as leaves. With `freeze_encoder` the encoder
    /// side (patch embedding, encoder blocks, final encoder norm) takes no
    /// gradients; position tables never do.
    pub fn insert(tape: &Tape, params: &ModelParams, freeze_encoder: bool, train: bool) -> Self {
        let enc_grad = train && !freeze_encoder;
        let dec_grad = train;
        ModelVars {
            patch_embed: leaf_linear(tape, &params.patch_embed, enc_grad),
            enc_pos: tape.constant(params.enc_pos.clone()),
            enc_blocks: params
                .enc_blocks
                .iter()
                .map(|b| leaf_block(tape, b, enc_grad))
                .collect(),
            enc_norm: leaf_norm(tape, &params.enc_norm, enc_grad),
            dec_embed: leaf_linear(tape, &params.dec_embed, dec_grad),
            mask_token: tape.leaf(params.mask_token.clone(), dec_grad),
            dec_pos: tape.constant(params.dec_pos.clone()),
            dec_blocks: params
                .dec_blocks
                .iter()
                .map(|b| leaf_block(tape, b, dec_grad))
                .collect(),
            dec_norm: leaf_norm(tape, &params.dec_norm, dec_grad),
            head_recon: leaf_linear(tape, &params.head_recon, dec_grad),
            head_classify: leaf_linear(tape, &params.head_classify, dec_grad),
        }
    }

    /// Gradients of trainable leaves by canonical parameter name, after a
    /// backward pass. Absent entries received no gradient.
    pub fn collect_grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        let mut grads = BTreeMap::new();
        take(tape, &mut grads, "dec.mask_token", self.mask_token);
        take_linear(tape, &mut grads, "enc.patch_embed", &self.patch_embed);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            take_block(tape, &mut grads, &format!("enc.block{i}"), b);
        }
        take_norm(tape, &mut grads, "enc.norm", &self.enc_norm);
        take_linear(tape, &mut grads, "dec.embed", &self.dec_embed);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            take_block(tape, &mut grads, &format!("dec.block{i}"), b);
        }
        take_norm(tape, &mut grads, "dec.norm", &self.dec_norm);
        take_linear(tape, &mut grads, "head_r", &self.head_recon);
        take_linear(tape, &mut grads, "head_m", &self.head_classify);
        grads
    }
}

fn take(tape: &Tape, grads: &mut BTreeMap<String, Tensor>, name: &str, var: Var) {
    if let Some(g) = tape.take_grad(var) {
        grads.insert(name.to_string(), g);
    }
}

fn take_linear(tape: &Tape, grads: &mut BTreeMap<String, Tensor>, prefix: &str, l: &LinearVars) {
    take(tape, grads, &format!("{prefix}.weight"), l.weight);
    take(tape, grads, &format!("{prefix}.bias"), l.bias);
}

fn take_norm(tape: &Tape, grads: &mut BTreeMap<String, Tensor>, prefix: &str, n: &NormVars) {
    take(tape, grads, &format!("{prefix}.gamma"), n.gamma);
    take(tape, grads, &format!("{prefix}.beta"), n.beta);
}

fn take_block(tape: &Tape, grads: &mut BTreeMap<String, Tensor>, prefix: &str, b: &BlockVars) {
    take_norm(tape, grads, &format!("{prefix}.norm1"), &b.norm1);
    take_linear(tape, grads, &format!("{prefix}.attn.q"), &b.attn.query);
    take_linear(tape, grads, &format!("{prefix}.attn.k"), &b.attn.key);
    take_linear(tape, grads, &format!("{prefix}.attn.v"), &b.attn.value);
    take_linear(tape, grads, &format!("{prefix}.attn.o"), &b.attn.proj);
    take_norm(tape, grads, &format!("{prefix}.norm2"), &b.norm2);
    take_linear(tape, grads, &format!("{prefix}.mlp.fc1"), &b.mlp_fc1);
    take_linear(tape, grads, &format!("{prefix}.mlp.fc2"), &b.mlp_fc2);
}

fn linear(tape: &Tape, x: Var, l: &LinearVars) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_rowvec(y, l.bias)
}

fn layernorm(tape: &Tape, x: Var, n: &NormVars) -> Result<Var> {
    tape.layernorm(x, n.gamma, n.beta, LAYERNORM_EPS)
}

fn attention(tape: &Tape, x: Var, a: &AttentionVars, heads: usize) -> Result<Var> {
    let dim = tape.shape_of(x)[1];
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = linear(tape, x, &a.query)?;
    let k = linear(tape, x, &a.key)?;
    let v = linear(tape, x, &a.value)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    linear(tape, cat, &a.proj)
}

fn transformer_block(tape: &Tape, x: Var, b: &BlockVars, heads: usize) -> Result<Var> {
    // pre-norm: x + attn(ln1(x)); x + mlp(ln2(x))
    let h = layernorm(tape, x, &b.norm1)?;
    let h = attention(tape, h, &b.attn, heads)?;
    let x = tape.add(x, h)?;
    let h = layernorm(tape, x, &b.norm2)?;
    let h = linear(tape, h, &b.mlp_fc1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, &b.mlp_fc2)?;
    tape.add(x, h)
}

fn check_positions(positions: &[usize], n: usize) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::config("encode: at least one visible token required"));
    }
    let mut seen = vec![false; n];
    for &p in positions {
        if p >= n {
            return Err(Error::IndexOutOfRange {
                op: "token position",
                index: p,
                len: n,
            });
        }
        if seen[p] {
            return Err(Error::config(format!("duplicate token position {p}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Encoder over the visible token rows. Output row order matches input
/// row order; position codes are taken from `visible_positions`.
pub fn encode(
    tape: &Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    visible_patches: Var,
    visible_positions: &[usize],
) -> Result<Var> {
    let n = config.token_count();
    check_positions(visible_positions, n)?;
    let got = tape.shape_of(visible_patches);
    if got != [visible_positions.len(), config.patch_dim()] {
        return Err(Error::ShapeMismatch {
            op: "encode",
            left: got,
            right: vec![visible_positions.len(), config.patch_dim()],
        });
    }
    let tokens = linear(tape, visible_patches, &vars.patch_embed)?;
    let pos = tape.gather_rows(vars.enc_pos, visible_positions)?;
    let mut x = tape.add(tokens, pos)?;
    for b in &vars.enc_blocks {
        x = transformer_block(tape, x, b, config.encoder_heads)?;
    }
    layernorm(tape, x, &vars.enc_norm)
}

/// Decoder: project encoder outputs, scatter them to their raster
/// positions, fill masked positions with the learned mask token, add
/// decoder position codes and run the decoder blocks. Returns all `n`
/// token states in raster order.
pub fn decode(
    tape: &Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    encoded: Var,
    visible_positions: &[usize],
) -> Result<Var> {
    let n = config.token_count();
    check_positions(visible_positions, n)?;
    let y = linear(tape, encoded, &vars.dec_embed)?;
    let mut full = tape.scatter_rows(y, visible_positions, n)?;
    let masked: Vec<usize> = {
        let mut vis = vec![false; n];
        for &p in visible_positions {
            vis[p] = true;
        }
        (0..n).filter(|&i| !vis[i]).collect()
    };
    if !masked.is_empty() {
        let mask_rows = tape.broadcast_row(vars.mask_token, masked.len())?;
        let mask_full = tape.scatter_rows(mask_rows, &masked, n)?;
        full = tape.add(full, mask_full)?;
    }
    let mut x = tape.add(full, vars.dec_pos)?;
    for b in &vars.dec_blocks {
        x = transformer_block(tape, x, b, config.decoder_heads)?;
    }
    layernorm(tape, x, &vars.dec_norm)
}

/// Per-token reconstruction head: `[n, dec_dim] -> [n, p²·C]`.
pub fn head_recon_tokens(tape: &Tape, vars: &ModelVars, dec_out: Var) -> Result<Var> {
    linear(tape, dec_out, &vars.head_recon)
}

/// Per-token classification head: `[n, dec_dim] -> [n, p²]` logits.
pub fn head_classify_tokens(tape: &Tape, vars: &ModelVars, dec_out: Var) -> Result<Var> {
    linear(tape, dec_out, &vars.head_classify)
}

/// Reassemble head tokens into an image `[C,H,W]` on the tape.
pub fn tokens_to_image(
    tape: &Tape,
    config: &ModelConfig,
    tokens: Var,
    channels: usize,
) -> Result<Var> {
    let (h, w) = (config.image_size, config.image_size);
    let perm = Arc::new(unpatchify_perm(config.patch_size, channels, h, w)?);
    let shape = if channels == 1 {
        vec![h, w]
    } else {
        vec![channels, h, w]
    };
    tape.gather_flat(tokens, perm, &shape)
}

/// One full-image forward pass (no masking): reconstruction `[C,H,W]`,
/// probability map `P in [0,1]^{H,W}` and the raw logit map.
pub struct FullForward {
    pub recon: Var,
    pub logits: Var,
}

pub fn forward_full_image(
    tape: &Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    image: &Tensor,
) -> Result<FullForward> {
    let patches = patchify(image, config.patch_size)?;
    let all: Vec<usize> = (0..config.token_count()).collect();
    let input = tape.constant(patches);
    let enc = encode(tape, vars, config, input, &all)?;
    let dec = decode(tape, vars, config, enc, &all)?;
    let recon_tokens = head_recon_tokens(tape, vars, dec)?;
    let logit_tokens = head_classify_tokens(tape, vars, dec)?;
    Ok(FullForward {
        recon: tokens_to_image(tape, config, recon_tokens, config.channels)?,
        logits: tokens_to_image(tape, config, logit_tokens, 1)?,
    })
}

// ── inference wrappers (fresh tape, frozen leaves, values out) ─────────

pub fn encode_infer(
    params: &ModelParams,
    config: &ModelConfig,
    visible_patches: &Tensor,
    visible_positions: &[usize],
) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = ModelVars::insert(&tape, params, true, false);
    let input = tape.constant(visible_patches.clone());
    let out = encode(&tape, &vars, config, input, visible_positions)?;
    Ok(tape.value(out))
}

pub fn decode_infer(
    params: &ModelParams,
    config: &ModelConfig,
    encoded: &Tensor,
    visible_positions: &[usize],
) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = ModelVars::insert(&tape, params, true, false);
    let input = tape.constant(encoded.clone());
    let out = decode(&tape, &vars, config, input, visible_positions)?;
    Ok(tape.value(out))
}

/// Reconstruction head applied to decoder output, as an image `[C,H,W]`.
pub fn head_reconstruct(
    params: &ModelParams,
    config: &ModelConfig,
    dec_out: &Tensor,
) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = ModelVars::insert(&tape, params, true, false);
    let d = tape.constant(dec_out.clone());
    let tokens = head_recon_tokens(&tape, &vars, d)?;
    let img = tokens_to_image(&tape, config, tokens, config.channels)?;
    Ok(tape.value(img))
}

/// Classification head applied to decoder output: probabilities `[H,W]`.
pub fn head_classify(
    params: &ModelParams,
    config: &ModelConfig,
    dec_out: &Tensor,
) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = ModelVars::insert(&tape, params, true, false);
    let d = tape.constant(dec_out.clone());
    let tokens = head_classify_tokens(&tape, &vars, d)?;
    let logits = tokens_to_image(&tape, config, tokens, 1)?;
    let probs = tape.sigmoid(logits);
    Ok(tape.value(probs))
}

/// Full-image inference: `(reconstruction [C,H,W], P [H,W])`.
pub fn infer_full(
    params: &ModelParams,
    config: &ModelConfig,
    image: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let vars = ModelVars::insert(&tape, params, true, false);
    let fwd = forward_full_image(&tape, &vars, config, image)?;
    let probs = tape.sigmoid(fwd.logits);
    Ok((tape.value(fwd.recon), tape.value(probs)))
}
