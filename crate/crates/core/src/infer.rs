//! Inference: reconstruction-error map `E`, pixel-anomaly probability map
//! `P`, fused score map `S = E ⊙ P`, and the scalar image score `mean(S)`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{self, ModelVars};
use crate::model::patches::patchify;
use crate::model::{ModelConfig, ModelParams};
use crate::pretrain::sample_mask;
use crate::seeding;
use crate::stage2::gaussian_band_matrix;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// How the per-pixel score map is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// `S = E ⊙ P` from one unmasked forward pass.
    Fusion,
    /// Reconstruction error only (`P ≡ 1`).
    ErrorOnly,
    /// Classifier probability only (`E ≡ 1`).
    ProbabilityOnly,
    /// Masked-autoencoder scoring: average per-pixel error over repeated
    /// 75%-mask draws, each pixel counted only when its patch was masked.
    MaskedMae,
}

impl FromStr for ScoreVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fusion" => Ok(ScoreVariant::Fusion),
            "e" | "error" => Ok(ScoreVariant::ErrorOnly),
            "p" | "probability" => Ok(ScoreVariant::ProbabilityOnly),
            "masked-e" | "masked_e" | "masked" => Ok(ScoreVariant::MaskedMae),
            other => Err(Error::config(format!(
                "unknown score variant '{other}' (expected fusion|e|p|masked-e)"
            ))),
        }
    }
}

impl std::fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScoreVariant::Fusion => "fusion",
            ScoreVariant::ErrorOnly => "e",
            ScoreVariant::ProbabilityOnly => "p",
            ScoreVariant::MaskedMae => "masked-e",
        };
        write!(f, "{s}")
    }
}

/// Mask draws for [`ScoreVariant::MaskedMae`].
pub const MASKED_MAE_DRAWS: usize = 8;

#[derive(Clone, Debug)]
pub struct ScoreMaps {
    /// Non-negative reconstruction error, `[H,W]`.
    pub error: Tensor,
    /// Pixel anomaly probability in `[0,1]`, `[H,W]`.
    pub probability: Tensor,
    /// `S = E ⊙ P`, `[H,W]`.
    pub score: Tensor,
    /// `mean(S)`.
    pub image_score: f64,
}

impl ScoreMaps {
    fn assemble(error: Tensor, probability: Tensor) -> Result<Self> {
        let score = fuse(&error, &probability)?;
        let image_score = image_score(&score);
        Ok(ScoreMaps {
            error,
            probability,
            score,
            image_score,
        })
    }
}

/// Channel-averaged squared reconstruction error. With three channels this
/// is `(E_R + E_G + E_B)/3`; other channel counts fall back to the same
/// mean over `C` channels.
pub fn reconstruction_error(original: &Tensor, recon: &Tensor) -> Result<Tensor> {
    if original.shape() != recon.shape() {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_error",
            left: original.shape().to_vec(),
            right: recon.shape().to_vec(),
        });
    }
    let [c, h, w]: [usize; 3] = original.shape().try_into().map_err(|_| {
        Error::config(format!(
            "reconstruction_error expects [C,H,W], got {:?}",
            original.shape()
        ))
    })?;
    let mut e = Tensor::zeros(&[h, w]);
    let inv_c = 1.0 / c as f32;
    for ch in 0..c {
        for i in 0..h * w {
            let d = original.data()[ch * h * w + i] - recon.data()[ch * h * w + i];
            e.data_mut()[i] += d * d * inv_c;
        }
    }
    Ok(e)
}

/// Hadamard product of the error and probability maps.
pub fn fuse(error: &Tensor, probability: &Tensor) -> Result<Tensor> {
    error.mul(probability).map_err(|_| Error::ShapeMismatch {
        op: "fuse",
        left: error.shape().to_vec(),
        right: probability.shape().to_vec(),
    })
}

/// Arithmetic mean of all score-map entries.
pub fn image_score(score: &Tensor) -> f64 {
    score.mean_f64()
}

/// Score one image. Pure function of `(params, image, variant, seed)`;
/// the seed only matters for the masked variant's mask draws.
pub fn score_image(
    params: &ModelParams,
    config: &ModelConfig,
    image: &Tensor,
    variant: ScoreVariant,
    seed: u64,
) -> Result<ScoreMaps> {
    let (h, w) = (config.image_size, config.image_size);
    match variant {
        ScoreVariant::Fusion => {
            let (recon, p) = forward::infer_full(params, config, image)?;
            let e = reconstruction_error(image, &recon)?;
            ScoreMaps::assemble(e, p)
        }
        ScoreVariant::ErrorOnly => {
            let (recon, _) = forward::infer_full(params, config, image)?;
            let e = reconstruction_error(image, &recon)?;
            ScoreMaps::assemble(e, Tensor::filled(&[h, w], 1.0))
        }
        ScoreVariant::ProbabilityOnly => {
            let (_, p) = forward::infer_full(params, config, image)?;
            ScoreMaps::assemble(Tensor::filled(&[h, w], 1.0), p)
        }
        ScoreVariant::MaskedMae => {
            let e = masked_error_map(params, config, image, MASKED_MAE_DRAWS, seed)?;
            ScoreMaps::assemble(e, Tensor::filled(&[h, w], 1.0))
        }
    }
}

/// Per-pixel error averaged over independent mask draws, counting each
/// pixel only in draws where its patch was masked. Draws continue past
/// the requested count until every patch has been masked at least once,
/// so the normalization is always well defined.
fn masked_error_map(
    params: &ModelParams,
    config: &ModelConfig,
    image: &Tensor,
    draws: usize,
    seed: u64,
) -> Result<Tensor> {
    let (h, w) = (config.image_size, config.image_size);
    let n = config.token_count();
    let p = config.patch_size;
    let grid = config.grid();
    let patches = patchify(image, p)?;
    let d = config.patch_dim();

    let mut rng = seeding::rng_from(seed, 0x4d61, 0);
    let mut err_sum = Tensor::zeros(&[h, w]);
    let mut coverage = vec![0u32; n];
    let mut done = 0usize;
    while done < draws || coverage.iter().any(|&c| c == 0) {
        if done > draws + 1000 {
            return Err(Error::config(
                "masked scoring failed to cover every patch".to_string(),
            ));
        }
        let plan = sample_mask(n, config.mask_ratio, &mut rng)?;
        let mut visible_rows = Vec::with_capacity(plan.visible.len() * d);
        for &i in &plan.visible {
            visible_rows.extend_from_slice(&patches.data()[i * d..(i + 1) * d]);
        }
        let visible = Tensor::from_vec(&[plan.visible.len(), d], visible_rows)?;

        let tape = Tape::new();
        let vars = ModelVars::insert(&tape, params, true, false);
        let iv = tape.constant(visible);
        let enc = forward::encode(&tape, &vars, config, iv, &plan.visible)?;
        let dec = forward::decode(&tape, &vars, config, enc, &plan.visible)?;
        let tokens = forward::head_recon_tokens(&tape, &vars, dec)?;
        let recon_img = forward::tokens_to_image(&tape, config, tokens, config.channels)?;
        let e = reconstruction_error(image, &tape.value(recon_img))?;

        for &token in &plan.masked {
            coverage[token] += 1;
            let (gy, gx) = (token / grid, token % grid);
            for py in 0..p {
                for px in 0..p {
                    let idx = (gy * p + py) * w + gx * p + px;
                    err_sum.data_mut()[idx] += e.data()[idx];
                }
            }
        }
        done += 1;
    }
    for token in 0..n {
        let (gy, gx) = (token / grid, token % grid);
        let inv = 1.0 / coverage[token] as f32;
        for py in 0..p {
            for px in 0..p {
                let idx = (gy * p + py) * w + gx * p + px;
                err_sum.data_mut()[idx] *= inv;
            }
        }
    }
    Ok(err_sum)
}

/// Separable Gaussian smoothing with symmetric padding (opt-in, off by
/// default in evaluation).
pub fn gaussian_smooth(map: &Tensor, sigma: f64) -> Result<Tensor> {
    let [h, w]: [usize; 2] = map
        .shape()
        .try_into()
        .map_err(|_| Error::config(format!("smooth expects [H,W], got {:?}", map.shape())))?;
    let radius = (3.0 * sigma).ceil() as usize;
    let window = (2 * radius + 1).min(h.min(w) | 1);
    let gh: Tensor = gaussian_band_matrix(h, window, sigma);
    let gw: Tensor = gaussian_band_matrix(w, window, sigma);
    gh.matmul(map)?.matmul(&gw.transposed()?)
}

/// Min-max normalize a map to 16-bit grayscale (constant maps go to 0).
pub fn heatmap_u16(map: &Tensor) -> Vec<u16> {
    let (lo, hi) = map.min_max();
    let span = (hi - lo) as f64;
    map.data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) as f64 / span) * 65535.0).round() as u16
            } else {
                0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            encoder_dim: 16,
            encoder_depth: 1,
            encoder_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 2,
            mask_ratio: 0.75,
        }
    }

    #[test]
    fn identical_images_have_zero_error() {
        let mut rng = rng_from(1, 0, 0);
        let img = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let e = reconstruction_error(&img, &img).unwrap();
        assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_channel_difference_averages_over_three() {
        let mut a = Tensor::zeros(&[3, 1, 1]);
        let b = Tensor::zeros(&[3, 1, 1]);
        a.set(&[0, 0, 0], 1.0);
        let e = reconstruction_error(&a, &b).unwrap();
        assert!((e.at(&[0, 0]) - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn error_matches_naive_oracle() {
        let mut rng = rng_from(2, 0, 0);
        let a = Tensor::uniform(&[3, 6, 5], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 6, 5], 0.0, 1.0, &mut rng);
        let e = reconstruction_error(&a, &b).unwrap();
        for y in 0..6 {
            for x in 0..5 {
                let mut s = 0.0f64;
                for c in 0..3 {
                    let d = (a.at(&[c, y, x]) - b.at(&[c, y, x])) as f64;
                    s += d * d;
                }
                assert!((e.at(&[y, x]) as f64 - s / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let e = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zeros = Tensor::zeros(&[2, 2]);
        assert!(fuse(&e, &zeros).unwrap().data().iter().all(|&x| x == 0.0));
        let ones = Tensor::filled(&[2, 2], 1.0);
        assert_eq!(fuse(&e, &ones).unwrap(), e);
        let halves = Tensor::filled(&[2, 2], 0.5);
        assert_eq!(
            fuse(&e, &halves).unwrap().data(),
            &[0.5, 1.0, 1.5, 2.0]
        );
        assert!(fuse(&e, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn image_score_examples() {
        assert_eq!(image_score(&Tensor::zeros(&[4, 4])), 0.0);
        let s = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(image_score(&s), 2.5);
        let mut rng = rng_from(3, 0, 0);
        let big = Tensor::uniform(&[64, 64], 0.0, 1.0, &mut rng);
        let naive: f64 = big.data().iter().map(|&x| x as f64).sum::<f64>() / 4096.0;
        assert!((image_score(&big) - naive).abs() < 1e-7);
    }

    #[test]
    fn fusion_satisfies_identities() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 4).unwrap();
        let mut rng = rng_from(4, 0, 0);
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let maps = score_image(&params, &cfg, &img, ScoreVariant::Fusion, 0).unwrap();
        let expected = fuse(&maps.error, &maps.probability).unwrap();
        assert_eq!(maps.score, expected);
        assert!((maps.image_score - image_score(&maps.score)).abs() < 1e-12);
        assert!(maps.error.data().iter().all(|&x| x >= 0.0));
        assert!(maps.probability.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn error_only_equals_reconstruction_error() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut rng = rng_from(5, 0, 0);
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let maps = score_image(&params, &cfg, &img, ScoreVariant::ErrorOnly, 0).unwrap();
        let (recon, _) = forward::infer_full(&params, &cfg, &img).unwrap();
        let e = reconstruction_error(&img, &recon).unwrap();
        assert_eq!(maps.score, e);
    }

    #[test]
    fn masked_variant_is_deterministic() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 6).unwrap();
        let mut rng = rng_from(6, 0, 0);
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let a = score_image(&params, &cfg, &img, ScoreVariant::MaskedMae, 42).unwrap();
        let b = score_image(&params, &cfg, &img, ScoreVariant::MaskedMae, 42).unwrap();
        assert_eq!(a.score, b.score);
        assert!(a.error.data().iter().all(|&x| x.is_finite() && x >= 0.0));
    }

    #[test]
    fn increasing_error_never_decreases_image_score() {
        let mut rng = rng_from(7, 0, 0);
        let e = Tensor::uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let p = Tensor::uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let base = image_score(&fuse(&e, &p).unwrap());
        for idx in [0usize, 17, 63] {
            let mut bumped = e.clone();
            bumped.data_mut()[idx] += 0.5;
            let s = image_score(&fuse(&bumped, &p).unwrap());
            assert!(s >= base);
        }
    }

    #[test]
    fn untrained_head_floor_is_half_error() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 8).unwrap();
        for t in [
            &mut params.head_classify.weight,
            &mut params.head_classify.bias,
        ] {
            for x in t.data_mut() {
                *x = 0.0;
            }
        }
        let mut rng = rng_from(8, 0, 0);
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let maps = score_image(&params, &cfg, &img, ScoreVariant::Fusion, 0).unwrap();
        let expected = maps.error.scale(0.5);
        assert_eq!(maps.score, expected, "S must equal E/2 bitwise");
    }

    #[test]
    fn unknown_variant_string_errors() {
        assert!("nonsense".parse::<ScoreVariant>().is_err());
        assert_eq!("fusion".parse::<ScoreVariant>().unwrap(), ScoreVariant::Fusion);
        assert_eq!("masked-e".parse::<ScoreVariant>().unwrap(), ScoreVariant::MaskedMae);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let c = Tensor::filled(&[12, 12], 0.7);
        let s = gaussian_smooth(&c, 1.5).unwrap();
        for &v in s.data() {
            assert!((v - 0.7).abs() < 1e-5);
        }
    }

    #[test]
    fn heatmap_normalization() {
        let m = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(heatmap_u16(&m), vec![0, 32768, 65535]);
        let flat = Tensor::filled(&[2, 2], 5.0);
        assert_eq!(heatmap_u16(&flat), vec![0, 0, 0, 0]);
    }
}
