//! ROC/AUC for image-level detection and pixel-level localization.
//!
//! The AUC is computed by sweeping unique score thresholds and integrating
//! the ROC curve with the trapezoid rule, which handles ties by the
//! midpoint convention and therefore equals the Mann-Whitney statistic
//! `P(score⁺ > score⁻) + ½·P(tie)`.

use serde::Serialize;

use crate::error::{Error, Result};

/// ROC curve points plus the trapezoidal area.
#[derive(Clone, Debug, Serialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` points, monotone, from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Threshold-sweep ROC. Scores may repeat; labels are `false` = normal,
/// `true` = anomalous. Errors unless both classes are present.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "roc_curve",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes; got {positives} positive / {negatives} negative"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    // descending by score; ties grouped
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));

    let mut points = Vec::with_capacity(scores.len() + 2);
    points.push((0.0, 0.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(RocCurve {
        points,
        auc,
        positives,
        negatives,
    })
}

/// Area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.auc)
}

/// Everything needed to evaluate one test image.
#[derive(Clone, Debug)]
pub struct ScoredItem {
    pub image_score: f64,
    pub anomalous: bool,
    /// Flattened per-pixel scores (the `S` map).
    pub pixel_scores: Vec<f32>,
    /// Flattened ground-truth mask; required when `anomalous`.
    pub mask: Option<Vec<bool>>,
    pub name: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub image_auc: f64,
    pub pixel_auc: f64,
    pub image_positives: usize,
    pub image_negatives: usize,
    pub pixel_positives: usize,
    pub pixel_negatives: usize,
    pub image_roc: Vec<(f64, f64)>,
}

/// Image AUC over per-image scores; pixel AUC over all pixels of all test
/// images pooled into one ranking (normal images contribute all-negative
/// pixels).
pub fn evaluate(items: &[ScoredItem]) -> Result<EvalReport> {
    let mut image_scores = Vec::with_capacity(items.len());
    let mut image_labels = Vec::with_capacity(items.len());
    let mut pixel_scores: Vec<f64> = Vec::new();
    let mut pixel_labels: Vec<bool> = Vec::new();
    for item in items {
        image_scores.push(item.image_score);
        image_labels.push(item.anomalous);
        match (&item.mask, item.anomalous) {
            (Some(mask), _) => {
                if mask.len() != item.pixel_scores.len() {
                    return Err(Error::ShapeMismatch {
                        op: "evaluate mask",
                        left: vec![mask.len()],
                        right: vec![item.pixel_scores.len()],
                    });
                }
                pixel_scores.extend(item.pixel_scores.iter().map(|&s| s as f64));
                pixel_labels.extend(mask.iter().copied());
            }
            (None, true) => {
                return Err(Error::Dataset(format!(
                    "anomalous item {} has no ground-truth mask",
                    item.name
                )));
            }
            (None, false) => {
                pixel_scores.extend(item.pixel_scores.iter().map(|&s| s as f64));
                pixel_labels.extend(std::iter::repeat(false).take(item.pixel_scores.len()));
            }
        }
    }
    let image = roc_curve(&image_scores, &image_labels)?;
    let pixel = roc_curve(&pixel_scores, &pixel_labels)?;
    Ok(EvalReport {
        image_auc: image.auc,
        pixel_auc: pixel.auc,
        image_positives: image.positives,
        image_negatives: image.negatives,
        pixel_positives: pixel.positives,
        pixel_negatives: pixel.negatives,
        image_roc: image.points,
    })
}
