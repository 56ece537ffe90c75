//! Shared harnesses for the verification suites: finite-difference
//! gradient cases over every differentiable op and loss, and the naive
//! reference oracles (pair-counting AUC, double-loop SSIM, elementwise
//! CE and reconstruction error).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tad_core::model::forward::{self, ModelVars};
use tad_core::model::patches::unpatchify_perm;
use tad_core::model::{ModelConfig, ModelParams};
use tad_core::pretrain::{masked_mse, sample_mask, MaskPlan};
use tad_core::stage2::{mse_full, ssim_loss, total_loss, weighted_bce, LossConfig};
use tad_core::tensor::gradcheck::{check_scalar_fn, GradCheckReport};
use tad_core::tensor::tape::{Tape, Var};
use tad_core::tensor::{Element, Tensor};

pub struct GradCase {
    pub label: &'static str,
    pub f32_report: GradCheckReport,
    pub f64_report: GradCheckReport,
}

const H32: f64 = 1e-2;
const H64: f64 = 1e-5;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xace0 ^ tag)
}

/// Fixed weights so reduction losses have non-degenerate gradients.
fn weights(n: usize, tag: u64) -> Vec<f64> {
    let mut r = rng(tag ^ 0x77);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn weighted_sum<E: Element>(tape: &Tape<E>, x: Var, w: &[f64]) -> Var {
    let shape = tape.shape_of(x);
    let wt = Tensor::from_fn(&shape, |i| E::of_f64(w[i]));
    let wv = tape.constant(wt);
    let prod = tape.mul(x, wv).expect("same shape");
    tape.sum(prod)
}

fn loss_cfg() -> LossConfig {
    LossConfig {
        ssim_window: 7,
        ..Default::default()
    }
}

macro_rules! grad_case {
    ($label:literal, $h:expr, $ty:ty, $tag:expr, $shapes:expr, $build:expr) => {{
        let mut r = rng($tag);
        let inputs: Vec<Tensor<$ty>> = $shapes
            .iter()
            .map(|(shape, lo, hi)| Tensor::<$ty>::uniform(shape, *lo, *hi, &mut r))
            .collect();
        check_scalar_fn(&inputs, $h, $build).expect($label)
    }};
}

macro_rules! both {
    ($label:literal, $tag:expr, $shapes:expr, $build:expr) => {{
        GradCase {
            label: $label,
            f32_report: grad_case!($label, H32, f32, $tag, $shapes, $build),
            f64_report: grad_case!($label, H64, f64, $tag, $shapes, $build),
        }
    }};
}

/// Every differentiable op and every loss, checked by central finite
/// differences in both precisions.
pub fn run_gradient_suite() -> Vec<GradCase> {
    let mut cases = Vec::new();
    let s = |shape: &[usize], lo: f64, hi: f64| (shape.to_vec(), lo, hi);

    // matmul: d sum(A·B) vs finite differences
    cases.push(both!("matmul", 1, [s(&[5, 4], -1.0, 1.0), s(&[4, 3], -1.0, 1.0)], |tape, v| {
        let c = tape.matmul(v[0], v[1])?;
        Ok(tape.sum(c))
    }));

    let w15 = weights(15, 2);
    cases.push(both!("softmax", 2, [s(&[3, 5], -2.0, 2.0)], |tape, v| {
        let y = tape.softmax(v[0], 1)?;
        Ok(weighted_sum(tape, y, &w15))
    }));

    let w32 = weights(32, 3);
    cases.push(both!(
        "layernorm",
        3,
        [s(&[4, 8], -2.0, 2.0), s(&[8], 0.5, 1.5), s(&[8], -0.5, 0.5)],
        |tape, v| {
            let y = tape.layernorm(v[0], v[1], v[2], 1e-6)?;
            Ok(weighted_sum(tape, y, &w32))
        }
    ));

    let w24 = weights(24, 4);
    cases.push(both!("gelu", 4, [s(&[4, 6], -2.0, 2.0)], |tape, v| {
        let y = tape.gelu(v[0]);
        Ok(weighted_sum(tape, y, &w24))
    }));

    let w24b = weights(24, 5);
    cases.push(both!("sigmoid", 5, [s(&[4, 6], -3.0, 3.0)], |tape, v| {
        let y = tape.sigmoid(v[0]);
        Ok(weighted_sum(tape, y, &w24b))
    }));

    let w24c = weights(24, 6);
    cases.push(both!("softplus", 6, [s(&[4, 6], -3.0, 3.0)], |tape, v| {
        let y = tape.softplus(v[0]);
        Ok(weighted_sum(tape, y, &w24c))
    }));

    let w12 = weights(12, 7);
    cases.push(both!(
        "elementwise_add_mul_sub",
        7,
        [s(&[3, 4], -1.0, 1.0), s(&[3, 4], -1.0, 1.0)],
        |tape, v| {
            let sum = tape.add(v[0], v[1])?;
            let prod = tape.mul(sum, v[0])?;
            let diff = tape.sub(prod, v[1])?;
            Ok(weighted_sum(tape, diff, &w12))
        }
    ));

    let w12b = weights(12, 8);
    cases.push(both!(
        "div",
        8,
        [s(&[3, 4], -1.0, 1.0), s(&[3, 4], 0.5, 1.5)],
        |tape, v| {
            let q = tape.div(v[0], v[1])?;
            Ok(weighted_sum(tape, q, &w12b))
        }
    ));

    let w20 = weights(20, 9);
    cases.push(both!(
        "transpose_reshape",
        9,
        [s(&[4, 5], -1.0, 1.0)],
        |tape, v| {
            let t = tape.transpose(v[0])?;
            let r = tape.reshape(t, &[2, 10])?;
            Ok(weighted_sum(tape, r, &w20))
        }
    ));

    let w9 = weights(9, 10);
    cases.push(both!("gather_rows", 10, [s(&[6, 3], -1.0, 1.0)], |tape, v| {
        let g = tape.gather_rows(v[0], &[4, 0, 4])?;
        Ok(weighted_sum(tape, g, &w9))
    }));

    let w15b = weights(15, 11);
    cases.push(both!("scatter_rows", 11, [s(&[3, 3], -1.0, 1.0)], |tape, v| {
        let sc = tape.scatter_rows(v[0], &[4, 1, 2], 5)?;
        Ok(weighted_sum(tape, sc, &w15b))
    }));

    let w16 = weights(16, 12);
    cases.push(both!(
        "slice_concat_cols",
        12,
        [s(&[4, 2], -1.0, 1.0), s(&[4, 2], -1.0, 1.0)],
        |tape, v| {
            let cat = tape.concat_cols(&[v[0], v[1]])?;
            let left = tape.slice_cols(cat, 1, 2)?;
            let rebuilt = tape.concat_cols(&[left, v[0]])?;
            Ok(weighted_sum(tape, rebuilt, &w16))
        }
    ));

    let w12c = weights(12, 13);
    cases.push(both!(
        "add_rowvec_broadcast",
        13,
        [s(&[3, 4], -1.0, 1.0), s(&[4], -1.0, 1.0)],
        |tape, v| {
            let bias = tape.add_rowvec(v[0], v[1])?;
            let rows = tape.broadcast_row(v[1], 3)?;
            let sum = tape.add(bias, rows)?;
            Ok(weighted_sum(tape, sum, &w12c))
        }
    ));

    let w18 = weights(18, 14);
    cases.push(both!("gather_flat", 14, [s(&[3, 6], -1.0, 1.0)], |tape, v| {
        let perm: Vec<usize> = (0..18).map(|i| (i * 7) % 18).collect();
        let g = tape.gather_flat(v[0], Arc::new(perm), &[18])?;
        Ok(weighted_sum(tape, g, &w18))
    }));

    // losses
    let orig_patches = {
        let mut r = rng(15);
        Tensor::<f64>::uniform(&[6, 4], 0.0, 1.0, &mut r)
    };
    let plan = {
        let mut r = rng(16);
        sample_mask(6, 0.5, &mut r).expect("valid plan")
    };
    {
        let plan32 = plan.clone();
        let orig32 = Tensor::<f32>::from_fn(&[6, 4], |i| orig_patches.data()[i] as f32);
        let plan64 = plan.clone();
        let orig64 = orig_patches.clone();
        cases.push(GradCase {
            label: "masked_mse",
            f32_report: grad_case!("masked_mse", H32, f32, 17, [s(&[6, 4], 0.0, 1.0)], {
                let (o, p): (Tensor<f32>, MaskPlan) = (orig32.clone(), plan32.clone());
                move |tape: &Tape<f32>, v: &[Var]| masked_mse(tape, &o, v[0], &p)
            }),
            f64_report: grad_case!("masked_mse", H64, f64, 17, [s(&[6, 4], 0.0, 1.0)], {
                let (o, p) = (orig64.clone(), plan64.clone());
                move |tape: &Tape<f64>, v: &[Var]| masked_mse(tape, &o, v[0], &p)
            }),
        });
    }

    {
        let target64 = {
            let mut r = rng(18);
            Tensor::<f64>::uniform(&[3, 12, 12], 0.0, 1.0, &mut r)
        };
        let target32 = Tensor::<f32>::from_fn(&[3, 12, 12], |i| target64.data()[i] as f32);
        let (t32, t64) = (target32.clone(), target64.clone());
        cases.push(GradCase {
            label: "mse_full",
            f32_report: grad_case!("mse_full", H32, f32, 19, [s(&[3, 12, 12], 0.0, 1.0)], {
                let t = t32.clone();
                move |tape: &Tape<f32>, v: &[Var]| mse_full(tape, &t, v[0])
            }),
            f64_report: grad_case!("mse_full", H64, f64, 19, [s(&[3, 12, 12], 0.0, 1.0)], {
                let t = t64.clone();
                move |tape: &Tape<f64>, v: &[Var]| mse_full(tape, &t, v[0])
            }),
        });

        let (t32, t64) = (target32.clone(), target64.clone());
        cases.push(GradCase {
            label: "ssim_loss",
            f32_report: grad_case!("ssim_loss", H32, f32, 20, [s(&[3, 12, 12], 0.0, 1.0)], {
                let t = t32.clone();
                move |tape: &Tape<f32>, v: &[Var]| ssim_loss(tape, &t, v[0], &loss_cfg())
            }),
            f64_report: grad_case!("ssim_loss", H64, f64, 20, [s(&[3, 12, 12], 0.0, 1.0)], {
                let t = t64.clone();
                move |tape: &Tape<f64>, v: &[Var]| ssim_loss(tape, &t, v[0], &loss_cfg())
            }),
        });

        // total loss through both heads' tensors at once
        let mask64 = {
            let mut r = rng(21);
            Tensor::<f64>::from_fn(&[12, 12], |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 })
        };
        let mask32 = Tensor::<f32>::from_fn(&[12, 12], |i| mask64.data()[i] as f32);
        cases.push(GradCase {
            label: "total_loss",
            f32_report: grad_case!(
                "total_loss",
                H32,
                f32,
                22,
                [s(&[3, 12, 12], 0.0, 1.0), s(&[12, 12], -2.0, 2.0)],
                {
                    let (t, m) = (t32, mask32);
                    move |tape: &Tape<f32>, v: &[Var]| {
                        Ok(total_loss(tape, &t, v[0], &m, v[1], &loss_cfg())?.0)
                    }
                }
            ),
            f64_report: grad_case!(
                "total_loss",
                H64,
                f64,
                22,
                [s(&[3, 12, 12], 0.0, 1.0), s(&[12, 12], -2.0, 2.0)],
                {
                    let (t, m) = (t64, mask64);
                    move |tape: &Tape<f64>, v: &[Var]| {
                        Ok(total_loss(tape, &t, v[0], &m, v[1], &loss_cfg())?.0)
                    }
                }
            ),
        });
    }

    {
        let mask64 = {
            let mut r = rng(23);
            Tensor::<f64>::from_fn(&[8, 8], |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 })
        };
        let mask32 = Tensor::<f32>::from_fn(&[8, 8], |i| mask64.data()[i] as f32);
        cases.push(GradCase {
            label: "weighted_bce",
            f32_report: grad_case!("weighted_bce", H32, f32, 24, [s(&[8, 8], -2.0, 2.0)], {
                let m = mask32;
                move |tape: &Tape<f32>, v: &[Var]| weighted_bce(tape, &m, v[0], 3.0)
            }),
            f64_report: grad_case!("weighted_bce", H64, f64, 24, [s(&[8, 8], -2.0, 2.0)], {
                let m = mask64;
                move |tape: &Tape<f64>, v: &[Var]| weighted_bce(tape, &m, v[0], 3.0)
            }),
        });
    }

    cases
}

/// Gradient of `MSE(reconstruction, image)` w.r.t. the reconstruction head
/// weights, through the real model graph (f32, the training precision).
pub fn head_reconstruction_grad_report() -> GradCheckReport {
    let cfg = ModelConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        encoder_dim: 8,
        encoder_depth: 1,
        encoder_heads: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        mlp_ratio: 2,
        mask_ratio: 0.75,
    };
    let params = ModelParams::init(&cfg, 31).unwrap();
    let mut r = rng(32);
    let image = Tensor::<f32>::uniform(&[3, 8, 8], 0.0, 1.0, &mut r);
    let dec_out = Tensor::<f32>::uniform(&[cfg.token_count(), cfg.decoder_dim], -1.0, 1.0, &mut r);
    let inputs = vec![params.head_recon.weight.clone(), params.head_recon.bias.clone()];
    let perm = Arc::new(unpatchify_perm(cfg.patch_size, 3, 8, 8).unwrap());
    check_scalar_fn(&inputs, 1e-2, move |tape, v| {
        let d = tape.constant(dec_out.clone());
        let tokens = {
            let wt = tape.matmul(d, v[0])?;
            tape.add_rowvec(wt, v[1])?
        };
        let img = tape.gather_flat(tokens, perm.clone(), &[3, 8, 8])?;
        mse_full(tape, &image, img)
    })
    .expect("head gradient check")
}

/// Full-model gradient check (every trainable leaf at once) on a tiny
/// configuration: backward through encoder, decoder, both heads and all
/// three losses.
pub fn full_model_grad_report() -> GradCheckReport {
    let cfg = ModelConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        encoder_dim: 8,
        encoder_depth: 1,
        encoder_heads: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        mlp_ratio: 2,
        mask_ratio: 0.75,
    };
    let params = ModelParams::init(&cfg, 33).unwrap();
    let mut r = rng(34);
    let image = Tensor::<f32>::uniform(&[3, 8, 8], 0.0, 1.0, &mut r);
    let mask = Tensor::<f32>::from_fn(&[8, 8], |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
    // pick a few representative parameters as check targets
    let inputs = vec![
        params.patch_embed.weight.clone(),
        params.enc_blocks[0].attn.query.weight.clone(),
        params.dec_blocks[0].mlp_fc1.bias.clone(),
        params.head_classify.weight.clone(),
    ];
    let base = params;
    let lcfg = LossConfig {
        ssim_window: 5,
        ..Default::default()
    };
    check_scalar_fn(&inputs, 1e-2, move |tape, v| {
        let mut p = base.clone();
        p.patch_embed.weight = tape.value(v[0]);
        p.enc_blocks[0].attn.query.weight = tape.value(v[1]);
        p.dec_blocks[0].mlp_fc1.bias = tape.value(v[2]);
        p.head_classify.weight = tape.value(v[3]);
        // rebuild the graph with the perturbed parameters as leaves wired
        // through the checked vars
        let vars = rebuild_vars(tape, &p, v);
        let fwd = forward::forward_full_image(tape, &vars, &cfg, &image)?;
        Ok(total_loss(tape, &image, fwd.recon, &mask, fwd.logits, &lcfg)?.0)
    })
    .expect("full model gradient check")
}

/// ModelVars whose four checked slots alias the given vars.
fn rebuild_vars(tape: &Tape<f32>, params: &ModelParams, v: &[Var]) -> ModelVars {
    let mut vars = ModelVars::insert(tape, params, false, true);
    vars.patch_embed.weight = v[0];
    vars.enc_blocks[0].attn.query.weight = v[1];
    vars.dec_blocks[0].mlp_fc1.bias = v[2];
    vars.head_classify.weight = v[3];
    vars
}

// ── naive oracles ───────────────────────────────────────────────────────

/// O(n²) Mann-Whitney pair counting.
pub fn auc_pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Direct per-window double-loop SSIM loss with symmetric padding and a
/// normalized Gaussian window, independent of the band-matrix route.
pub fn ssim_loss_naive(target: &Tensor<f64>, pred: &Tensor<f64>, cfg: &LossConfig) -> f64 {
    let [c, h, w]: [usize; 3] = target.shape().try_into().unwrap();
    let r = (cfg.ssim_window / 2) as isize;
    let g1d: Vec<f64> = (-r..=r)
        .map(|t| (-((t * t) as f64) / (2.0 * cfg.ssim_sigma * cfg.ssim_sigma)).exp())
        .collect();
    let norm: f64 = g1d.iter().sum();
    let g1d: Vec<f64> = g1d.iter().map(|x| x / norm).collect();
    let reflect = |mut i: isize, n: usize| -> usize {
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n as isize {
                i = 2 * n as isize - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let c1 = cfg.ssim_k1 * cfg.ssim_k1;
    let c2 = cfg.ssim_k2 * cfg.ssim_k2;
    let mut total = 0.0;
    for ch in 0..c {
        let at = |img: &Tensor<f64>, y: usize, x: usize| img.data()[ch * h * w + y * w + x];
        let mut channel_sum = 0.0;
        for cy in 0..h {
            for cx in 0..w {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (wi, dy) in (-r..=r).enumerate() {
                    for (wj, dx) in (-r..=r).enumerate() {
                        let weight = g1d[wi] * g1d[wj];
                        let y = reflect(cy as isize + dy, h);
                        let x = reflect(cx as isize + dx, w);
                        let a = at(pred, y, x);
                        let b = at(target, y, x);
                        mx += weight * a;
                        my += weight * b;
                        mxx += weight * a * a;
                        myy += weight * b * b;
                        mxy += weight * a * b;
                    }
                }
                let (vx, vy, cov) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
                let ssim = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                channel_sum += ssim;
            }
        }
        total += channel_sum / (h * w) as f64;
    }
    1.0 - total / c as f64
}

/// Probability-space weighted cross-entropy with clamped probabilities.
pub fn bce_naive(mask: &Tensor<f64>, logits: &Tensor<f64>, omega: f64) -> f64 {
    let mut sum = 0.0;
    for (&m, &z) in mask.data().iter().zip(logits.data()) {
        let p = (1.0 / (1.0 + (-z).exp())).clamp(1e-12, 1.0 - 1e-12);
        sum += omega * m * p.ln() + (1.0 - m) * (1.0 - p).ln();
    }
    -sum / mask.numel() as f64
}

/// Elementwise channel-mean squared error.
pub fn recon_error_naive(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f64> {
    let [c, h, w]: [usize; 3] = a.shape().try_into().unwrap();
    Tensor::from_fn(&[h, w], |i| {
        let mut s = 0.0;
        for ch in 0..c {
            let d = (a.data()[ch * h * w + i] - b.data()[ch * h * w + i]) as f64;
            s += d * d;
        }
        s / c as f64
    })
}
