//! Procedural test corpus in MVTec directory layout: textured normal
//! images plus anomalous test images with exact ground-truth masks.
//!
//! Textures carry per-image phase/scale/tint jitter so a model cannot
//! memorize one constant output; planted defects are inversion-based and
//! guaranteed to change every masked pixel at 8-bit resolution.

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::image_io::{write_pgm8, write_png_rgb};
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Tensor;

const STREAM_TRAIN: u64 = 0x71;
const STREAM_TEST_NORMAL: u64 = 0x72;
const STREAM_TEST_ANOM: u64 = 0x73;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Stripes,
    Checker,
    Blobs,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Stripes, Category::Checker, Category::Blobs];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Stripes => "stripes",
            Category::Checker => "checker",
            Category::Blobs => "blobs",
        }
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stripes" => Ok(Category::Stripes),
            "checker" => Ok(Category::Checker),
            "blobs" => Ok(Category::Blobs),
            other => Err(Error::config(format!(
                "unknown category '{other}' (expected stripes|checker|blobs)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    ColorBlob,
    NoisePatch,
    ScratchLine,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [
        DefectKind::ColorBlob,
        DefectKind::NoisePatch,
        DefectKind::ScratchLine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DefectKind::ColorBlob => "color_blob",
            DefectKind::NoisePatch => "noise_patch",
            DefectKind::ScratchLine => "scratch_line",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub category: Category,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub defects: Vec<DefectKind>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config("synth: image_size must be at least 16"));
        }
        if self.n_train == 0 || self.n_test_normal == 0 || self.n_test_anomalous == 0 {
            return Err(Error::config("synth: all counts must be positive"));
        }
        if self.defects.is_empty() {
            return Err(Error::config("synth: defect list must not be empty"));
        }
        Ok(())
    }
}

/// Quantize to the 8-bit grid so PNG round-trips are exact.
fn quantize(x: f64) -> f32 {
    ((x.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn normal_image(category: Category, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = size as f64;
    let noise = Normal::new(0.0, 0.008).expect("fixed sigma");
    match category {
        Category::Stripes => {
            let wavelength = rng.gen_range(11.0..15.0);
            let theta: f64 = rng.gen_range(0.65..0.92); // ~37..53 degrees
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let tints = [
                1.0 + rng.gen_range(-0.05..0.05),
                0.82 + rng.gen_range(-0.05..0.05),
                0.65 + rng.gen_range(-0.05..0.05),
            ];
            let (ct, st) = (theta.cos(), theta.sin());
            Tensor::from_fn(&[3, size, size], |k| {
                let ch = k / (size * size);
                let y = (k / size) % size;
                let x = k % size;
                let t = (x as f64 * ct + y as f64 * st) * std::f64::consts::TAU / wavelength + phase;
                let v = 0.5 + 0.32 * t.sin();
                quantize(v * tints[ch] + noise.sample(rng))
            })
        }
        Category::Checker => {
            let cell = rng.gen_range(9.0..13.0);
            let ox = rng.gen_range(0.0..cell);
            let oy = rng.gen_range(0.0..cell);
            let lo = [
                0.25 + rng.gen_range(-0.04..0.04),
                0.30 + rng.gen_range(-0.04..0.04),
                0.42 + rng.gen_range(-0.04..0.04),
            ];
            let hi = [
                0.75 + rng.gen_range(-0.04..0.04),
                0.68 + rng.gen_range(-0.04..0.04),
                0.55 + rng.gen_range(-0.04..0.04),
            ];
            Tensor::from_fn(&[3, size, size], |k| {
                let ch = k / (size * size);
                let y = (k / size) % size;
                let x = k % size;
                let u = ((x as f64 + ox) * std::f64::consts::TAU / cell).sin();
                let v = ((y as f64 + oy) * std::f64::consts::TAU / cell).sin();
                // rounded checker: tanh-squashed sine product
                let m = 0.5 + 0.5 * (3.0 * u * v).tanh();
                quantize(lo[ch] + (hi[ch] - lo[ch]) * m + noise.sample(rng))
            })
        }
        Category::Blobs => {
            // round dots on a lattice; the image-to-image variation is a
            // global offset, spacing, dot radius and tint, which a small
            // autoencoder can actually learn to reconstruct
            let spacing = rng.gen_range(15.0..17.5);
            let ox = rng.gen_range(0.0..spacing);
            let oy = rng.gen_range(0.0..spacing);
            let radius = rng.gen_range(4.2..5.2);
            let bg = [
                0.25 + rng.gen_range(-0.03..0.03),
                0.28 + rng.gen_range(-0.03..0.03),
                0.35 + rng.gen_range(-0.03..0.03),
            ];
            let fg = [
                0.85 + rng.gen_range(-0.03..0.03),
                0.72 + rng.gen_range(-0.03..0.03),
                0.55 + rng.gen_range(-0.03..0.03),
            ];
            let _ = s;
            Tensor::from_fn(&[3, size, size], |k| {
                let ch = k / (size * size);
                let y = ((k / size) % size) as f64;
                let x = (k % size) as f64;
                // distance to the nearest lattice point
                let fx = (x - ox) / spacing;
                let fy = (y - oy) / spacing;
                let dx = (fx - fx.round()) * spacing;
                let dy = (fy - fy.round()) * spacing;
                let d = (dx * dx + dy * dy).sqrt();
                // soft-edged dot
                let m = 1.0 / (1.0 + ((d - radius) * 1.8).exp());
                quantize(bg[ch] + (fg[ch] - bg[ch]) * m + noise.sample(rng))
            })
        }
    }
}

/// Flip to the complementary 8-bit value when an operation left the pixel
/// unchanged, so masked pixels always differ from the base image.
fn ensure_changed(new: f32, old: f32) -> f32 {
    if new == old {
        let bits = (old * 255.0).round() as i32;
        let flipped = if bits >= 255 { 254 } else { bits + 1 };
        flipped as f32 / 255.0
    } else {
        new
    }
}

/// Plant one defect; returns the mask. Pixels outside the mask are
/// untouched; pixels inside are guaranteed to change.
fn plant_defect(
    image: &mut Tensor,
    kind: DefectKind,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let size = image.shape()[1];
    let mut mask = Tensor::zeros(&[size, size]);
    let paint = |image: &mut Tensor, mask: &mut Tensor, y: usize, x: usize, f: &mut dyn FnMut(usize, f32) -> f32| {
        for ch in 0..3 {
            let old = image.at(&[ch, y, x]);
            let new = quantize(f(ch, old) as f64);
            image.set(&[ch, y, x], ensure_changed(new, old));
        }
        mask.set(&[y, x], 1.0);
    };
    match kind {
        DefectKind::ColorBlob => {
            let max_r = (size as f64 / 2.0 - 2.0).max(2.0);
            let r = rng.gen_range(6.0..10.0f64).min(max_r);
            let cx = rng.gen_range(r..size as f64 - r);
            let cy = rng.gen_range(r..size as f64 - r);
            let tint = [rng.gen_range(0.0..1.0f64) as f32, rng.gen_range(0.0..1.0f64) as f32, rng.gen_range(0.0..1.0f64) as f32];
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if d2 <= r * r {
                        paint(image, &mut mask, y, x, &mut |ch, old| {
                            0.5 * (1.0 - old) + 0.5 * tint[ch]
                        });
                    }
                }
            }
        }
        DefectKind::NoisePatch => {
            let hi = 18.min(size - 1);
            let lo = 10.min(hi);
            let bw = rng.gen_range(lo..=hi);
            let bh = rng.gen_range(lo..=hi);
            let x0 = rng.gen_range(0..=size - bw);
            let y0 = rng.gen_range(0..=size - bh);
            let dist = Normal::new(0.0, 0.25).expect("fixed sigma");
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let deltas = [
                        dist.sample(rng) as f32,
                        dist.sample(rng) as f32,
                        dist.sample(rng) as f32,
                    ];
                    paint(image, &mut mask, y, x, &mut |ch, old| old + deltas[ch]);
                }
            }
        }
        DefectKind::ScratchLine => {
            let margin = 4.0;
            let x0 = rng.gen_range(margin..size as f64 - margin);
            let y0 = rng.gen_range(margin..size as f64 - margin);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let len = rng.gen_range(22.0..38.0);
            let thickness = rng.gen_range(1.8..2.8);
            let (dx, dy) = (angle.cos(), angle.sin());
            let (x1, y1) = (x0 + dx * len, y0 + dy * len);
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64, y as f64);
                    // distance from pixel to the segment
                    let t = (((px - x0) * dx + (py - y0) * dy) / len).clamp(0.0, 1.0);
                    let (qx, qy) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                    let d2 = (px - qx).powi(2) + (py - qy).powi(2);
                    if d2 <= thickness * thickness {
                        paint(image, &mut mask, y, x, &mut |_, old| 1.0 - old);
                    }
                }
            }
        }
    }
    mask
}

/// Generate a category corpus under `root/<category>/` in MVTec layout:
/// `train/good`, `test/good`, `test/<defect>`, `ground_truth/<defect>`.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    let cat_dir = root.join(spec.category.name());
    let size = spec.image_size;

    for i in 0..spec.n_train {
        let mut rng = seeding::rng_from(spec.seed, STREAM_TRAIN, i as u64);
        let img = normal_image(spec.category, size, &mut rng);
        write_png_rgb(&cat_dir.join(format!("train/good/{i:03}.png")), &img)?;
    }
    for i in 0..spec.n_test_normal {
        let mut rng = seeding::rng_from(spec.seed, STREAM_TEST_NORMAL, i as u64);
        let img = normal_image(spec.category, size, &mut rng);
        write_png_rgb(&cat_dir.join(format!("test/good/{i:03}.png")), &img)?;
    }
    let mut per_defect_index = std::collections::BTreeMap::new();
    for i in 0..spec.n_test_anomalous {
        let kind = spec.defects[i % spec.defects.len()];
        let mut rng = seeding::rng_from(spec.seed, STREAM_TEST_ANOM, i as u64);
        let mut img = normal_image(spec.category, size, &mut rng);
        let mask = plant_defect(&mut img, kind, &mut rng);
        let idx = per_defect_index.entry(kind.name()).or_insert(0usize);
        write_png_rgb(
            &cat_dir.join(format!("test/{}/{idx:03}.png", kind.name())),
            &img,
        )?;
        write_pgm8(
            &cat_dir.join(format!("ground_truth/{}/{idx:03}_mask.pgm", kind.name())),
            &mask,
        )?;
        *idx += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image_io::{read_pgm, read_png};

    fn spec() -> SynthSpec {
        SynthSpec {
            category: Category::Stripes,
            image_size: 32,
            n_train: 4,
            n_test_normal: 3,
            n_test_anomalous: 3,
            defects: DefectKind::ALL.to_vec(),
            seed: 9,
        }
    }

    #[test]
    fn corpus_is_bit_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic(&spec(), d1.path()).unwrap();
        generate_synthetic(&spec(), d2.path()).unwrap();
        let img1 = std::fs::read(d1.path().join("stripes/train/good/000.png")).unwrap();
        let img2 = std::fs::read(d2.path().join("stripes/train/good/000.png")).unwrap();
        assert_eq!(img1, img2);
    }

    #[test]
    fn counts_match_spec() {
        let dir = tempfile::tempdir().unwrap();
        let s = SynthSpec {
            n_train: 20,
            n_test_normal: 10,
            n_test_anomalous: 10,
            ..spec()
        };
        generate_synthetic(&s, dir.path()).unwrap();
        let count_files = |sub: &str| -> usize {
            let mut n = 0;
            let base = dir.path().join("stripes").join(sub);
            for entry in walk_pngs(&base) {
                let _ = entry;
                n += 1;
            }
            n
        };
        assert_eq!(count_files("train/good"), 20);
        assert_eq!(count_files("test/good"), 10);
        let anomalous: usize = DefectKind::ALL
            .iter()
            .map(|d| count_files(&format!("test/{}", d.name())))
            .sum();
        assert_eq!(anomalous, 10);
        let mut masks = 0;
        for d in DefectKind::ALL {
            let gt = dir.path().join("stripes/ground_truth").join(d.name());
            if gt.exists() {
                masks += std::fs::read_dir(gt).unwrap().count();
            }
        }
        assert_eq!(masks, 10);
    }

    fn walk_pngs(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        if let Ok(rd) = std::fs::read_dir(dir) {
            for e in rd.flatten() {
                if e.path().extension().is_some_and(|x| x == "png") {
                    out.push(e.path());
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn anomalous_images_differ_exactly_inside_their_masks() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        generate_synthetic(&s, dir.path()).unwrap();
        // regenerate each anomalous base image from its seed and compare
        for i in 0..s.n_test_anomalous {
            let kind = s.defects[i % s.defects.len()];
            let mut rng = seeding::rng_from(s.seed, STREAM_TEST_ANOM, i as u64);
            let base = normal_image(s.category, s.image_size, &mut rng);
            let idx = i / s.defects.len();
            let img = read_png(
                &dir.path()
                    .join(format!("stripes/test/{}/{idx:03}.png", kind.name())),
            )
            .unwrap();
            let mask = read_pgm(
                &dir.path()
                    .join(format!("stripes/ground_truth/{}/{idx:03}_mask.pgm", kind.name())),
            )
            .unwrap();
            assert!(mask.data().iter().any(|&m| m == 1.0), "mask {i} is empty");
            for y in 0..s.image_size {
                for x in 0..s.image_size {
                    let changed = (0..3).any(|c| img.at(&[c, y, x]) != base.at(&[c, y, x]));
                    assert_eq!(
                        changed,
                        mask.at(&[y, x]) == 1.0,
                        "pixel ({y},{x}) of image {i}: changed={changed}"
                    );
                }
            }
        }
    }

    #[test]
    fn all_categories_generate() {
        let dir = tempfile::tempdir().unwrap();
        for cat in Category::ALL {
            let s = SynthSpec {
                category: cat,
                ..spec()
            };
            generate_synthetic(&s, dir.path()).unwrap();
            assert!(dir
                .path()
                .join(cat.name())
                .join("train/good/000.png")
                .exists());
        }
    }
}
