//! Dataset loading (MVTec directory layout), image codecs, synthetic
//! corpus generation, and checkpoint serialization.

pub mod checkpoint;
pub mod image_io;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One test image with its label and (for anomalous items) the mask.
#[derive(Clone, Debug)]
pub struct TestItem {
    pub image: Tensor,
    pub anomalous: bool,
    /// `[H,W]` of exact `{0,1}`; present iff the item belongs to a defect
    /// class (good items carry none).
    pub mask: Option<Tensor>,
    /// `<defect>/<filename>` relative name, for reports.
    pub name: String,
}

/// A single category: normal-only training split plus a labeled test split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub name: String,
    pub train: Vec<Tensor>,
    pub test: Vec<TestItem>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect())
}

fn binarize(mask: &Tensor) -> Tensor {
    mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

fn load_image(path: &Path, resize_to: Option<usize>) -> Result<Tensor> {
    let img = image_io::read_png(path)?;
    match resize_to {
        Some(side) if img.shape()[1] != side || img.shape()[2] != side => {
            image_io::resize_area(&img, side, side)
        }
        _ => Ok(img),
    }
}

fn find_mask(gt_dir: &Path, stem: &str) -> Option<PathBuf> {
    for ext in ["pgm", "png"] {
        let candidate = gt_dir.join(format!("{stem}_mask.{ext}"));
        if candidate.exists() {
            return Some(candidate);
        }
    }
    None
}

fn load_mask(path: &Path, resize_to: Option<usize>) -> Result<Tensor> {
    let raw = if path.extension().is_some_and(|e| e == "png") {
        let rgb = image_io::read_png(path)?;
        // channel-average to gray
        let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
        Tensor::from_fn(&[h, w], |i| {
            (rgb.data()[i] + rgb.data()[h * w + i] + rgb.data()[2 * h * w + i]) / 3.0
        })
    } else {
        image_io::read_pgm(path)?
    };
    let resized = match resize_to {
        Some(side) if raw.shape()[0] != side || raw.shape()[1] != side => {
            let as3d = raw.reshaped(&[1, raw.shape()[0], raw.shape()[1]])?;
            let r = image_io::resize_area(&as3d, side, side)?;
            r.reshaped(&[side, side])?
        }
        _ => raw,
    };
    Ok(binarize(&resized))
}

/// Load one category directory (`train/good`, `test/<class>`,
/// `ground_truth/<class>`). Train items come exclusively from
/// `train/good`, so anomalous samples can never enter training.
pub fn load_corpus(dir: &Path, resize_to: Option<usize>) -> Result<Corpus> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    let train_dir = dir.join("train/good");
    if !train_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} has no train/good directory",
            dir.display()
        )));
    }
    let mut train = Vec::new();
    for path in image_files(&train_dir)? {
        train.push(load_image(&path, resize_to)?);
    }
    if train.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: train/good contains no png images",
            dir.display()
        )));
    }

    let test_dir = dir.join("test");
    let mut test = Vec::new();
    if test_dir.is_dir() {
        for class_dir in sorted_entries(&test_dir)? {
            if !class_dir.is_dir() {
                continue;
            }
            let class = class_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let anomalous = class != "good";
            for path in image_files(&class_dir)? {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let mask = if anomalous {
                    let gt_dir = dir.join("ground_truth").join(&class);
                    let mask_path = find_mask(&gt_dir, &stem).ok_or_else(|| {
                        Error::Dataset(format!(
                            "anomalous image {} has no mask under {}",
                            path.display(),
                            gt_dir.display()
                        ))
                    })?;
                    Some(load_mask(&mask_path, resize_to)?)
                } else {
                    None
                };
                test.push(TestItem {
                    image: load_image(&path, resize_to)?,
                    anomalous,
                    mask,
                    name: format!("{class}/{stem}"),
                });
            }
        }
    }
    Ok(Corpus { name, train, test })
}

/// Category subdirectories of a corpus root (anything with `train/good`).
pub fn list_categories(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in sorted_entries(root)? {
        if entry.join("train/good").is_dir() {
            out.push(entry);
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no category directories (expected <cat>/train/good)",
            root.display()
        )));
    }
    Ok(out)
}
