//! End-to-end commands behind the CLI: corpus synthesis, the two training
//! stages, scoring, evaluation, and the ablation matrix.
//!
//! Every command is a deterministic function of its config and inputs;
//! outputs are written atomically, so a failed run leaves no partial files.

pub mod ablation;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::checkpoint::{load_checkpoint, save_checkpoint, save_tensors, CheckpointMeta, Stage};
use crate::data::image_io::{atomic_write, read_png, resize_area, write_pgm16};
use crate::data::synth::{generate_synthetic, SynthSpec};
use crate::data::{list_categories, load_corpus, Corpus};
use crate::error::{Error, Result};
use crate::infer::{gaussian_smooth, heatmap_u16, image_score, score_image, ScoreMaps, ScoreVariant};
use crate::metrics::{evaluate, EvalReport, ScoredItem};
use crate::model::{ModelConfig, ModelParams};
use crate::pretrain::{PretrainConfig, Stage1Trainer};
use crate::seeding;
use crate::stage2::{Stage2Config, Stage2Trainer};
use crate::tensor::Tensor;

const STREAM_SCORE: u64 = 0x81;
pub(crate) const STREAM_INIT: u64 = 0x82;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub pool: Pool,
    pub smooth_sigma: Option<f64>,
    /// Min-max normalize each S map before pooling pixels into the
    /// localization ranking (off by default; AUC is not invariant to
    /// per-image transforms).
    pub normalize_per_image: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool: Pool::Mean,
            smooth_sigma: None,
            normalize_per_image: false,
        }
    }
}

/// Top-level run configuration (JSON on disk, unknown keys rejected).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub stage2: Stage2Config,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage2.loss.validate(self.model.image_size)?;
        self.stage2.corruption.validate(self.model.channels)?;
        if let Some(sigma) = self.eval.smooth_sigma {
            if sigma <= 0.0 {
                return Err(Error::config("eval.smooth_sigma must be positive"));
            }
        }
        Ok(())
    }
}

/// Parse and validate a config file; schema errors carry the JSON path.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let cfg: RunConfig = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::config(format!("{}: at {}: {}", path.display(), e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Generate one or more synthetic categories under `out`.
pub fn cmd_synth(specs: &[SynthSpec], out: &Path) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("synth: no categories requested"));
    }
    for spec in specs {
        generate_synthetic(spec, out)?;
    }
    Ok(())
}

fn load_category(cfg: &RunConfig, data: &Path) -> Result<Corpus> {
    load_corpus(data, Some(cfg.model.image_size))
}

/// Stage-1 training on one category; writes a stage1 checkpoint and
/// `epoch,loss,lr` progress lines.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    progress: &mut dyn std::io::Write,
) -> Result<()> {
    cfg.validate()?;
    let corpus = load_category(cfg, data)?;
    let mut params = ModelParams::init(&cfg.model, seeding::derive_seed(cfg.seed, STREAM_INIT, 0))?;
    let mut trainer = Stage1Trainer::new(cfg.model, cfg.pretrain, corpus.train.len(), cfg.seed)?;
    writeln!(progress, "epoch,loss,lr").ok();
    let mut losses = Vec::with_capacity(cfg.pretrain.epochs);
    for epoch in 0..cfg.pretrain.epochs {
        let log = trainer.epoch(&mut params, &corpus.train, epoch)?;
        losses.push(log.loss);
        writeln!(progress, "{},{},{}", log.epoch, log.loss, log.lr).ok();
        progress.flush().ok();
    }
    // soft trend check: 5-epoch moving average should not increase
    if let Some(msg) = moving_average_regression(&losses, 5) {
        writeln!(progress, "# warning: {msg}").ok();
    }
    let meta = CheckpointMeta {
        stage: Stage::Stage1,
        config: cfg.model,
        seed: cfg.seed,
    };
    save_checkpoint(&params, &meta, out)
}

fn moving_average_regression(losses: &[f64], window: usize) -> Option<String> {
    if losses.len() < 2 * window {
        return None;
    }
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let mut prev = avg(&losses[0..window]);
    for start in 1..=losses.len() - window {
        let cur = avg(&losses[start..start + window]);
        if cur > prev * 1.05 {
            return Some(format!(
                "loss moving average rose from {prev:.6} to {cur:.6} at epoch {start}"
            ));
        }
        prev = cur;
    }
    None
}

/// Stage-2 training from a stage-1 checkpoint; writes a stage2 checkpoint
/// and `epoch,total,mse,ssim,ce,lr` progress lines.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    init_checkpoint: &Path,
    out: &Path,
    progress: &mut dyn std::io::Write,
) -> Result<()> {
    cfg.validate()?;
    let (params, meta) = load_checkpoint(init_checkpoint)?;
    if meta.stage != Stage::Stage1 {
        return Err(Error::Checkpoint(format!(
            "stage-2 training must start from a stage1 checkpoint, got {}",
            meta.stage
        )));
    }
    if meta.config != cfg.model {
        return Err(Error::Checkpoint(
            "checkpoint architecture does not match the configured model".into(),
        ));
    }
    let corpus = load_category(cfg, data)?;
    let mut params = params;
    let mut trainer = Stage2Trainer::new(cfg.model, cfg.stage2.clone(), cfg.seed, true)?;
    writeln!(progress, "epoch,total,mse,ssim,ce,lr").ok();
    for epoch in 0..cfg.stage2.epochs {
        let log = trainer.epoch(&mut params, &corpus.train, epoch)?;
        writeln!(
            progress,
            "{},{},{},{},{},{}",
            log.epoch, log.total, log.mse, log.ssim, log.ce, log.lr
        )
        .ok();
        progress.flush().ok();
    }
    let meta = CheckpointMeta {
        stage: Stage::Stage2,
        config: cfg.model,
        seed: cfg.seed,
    };
    save_checkpoint(&params, &meta, out)
}

fn apply_eval_transforms(maps: &ScoreMaps, eval: &EvalConfig) -> Result<(Tensor, f64)> {
    let mut s = maps.score.clone();
    if let Some(sigma) = eval.smooth_sigma {
        s = gaussian_smooth(&s, sigma)?;
    }
    let img_score = match eval.pool {
        Pool::Mean => image_score(&s),
        Pool::Max => s.min_max().1 as f64,
    };
    if eval.normalize_per_image {
        let (lo, hi) = s.min_max();
        if hi > lo {
            s = s.map(|v| (v - lo) / (hi - lo));
        }
    }
    Ok((s, img_score))
}

/// Score images (files or a directory of PNGs): 16-bit PGM heatmaps, a
/// `scores.csv`, and optionally the raw maps in a tensor container.
pub fn cmd_score(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    out_dir: &Path,
    variant: ScoreVariant,
    dump_raw: bool,
) -> Result<()> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no png images",
            input.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let score_seed = seeding::derive_seed(cfg.seed, STREAM_SCORE, 0);
    let mut csv = String::from("image,score\n");
    for file in &files {
        let img = {
            let raw = read_png(file)?;
            let side = meta.config.image_size;
            if raw.shape()[1] != side || raw.shape()[2] != side {
                resize_area(&raw, side, side)?
            } else {
                raw
            }
        };
        let maps = score_image(&params, &meta.config, &img, variant, score_seed)?;
        let (s, img_score) = apply_eval_transforms(&maps, &cfg.eval)?;
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let side = meta.config.image_size;
        write_pgm16(
            &out_dir.join(format!("{stem}_score.pgm")),
            &heatmap_u16(&s),
            side,
            side,
        )?;
        if dump_raw {
            let tensors = vec![
                ("E".to_string(), maps.error.clone()),
                ("P".to_string(), maps.probability.clone()),
                ("S".to_string(), maps.score.clone()),
            ];
            let meta_json = serde_json::json!({
                "kind": "score-maps",
                "image": stem,
                "variant": variant.to_string(),
            });
            save_tensors(&out_dir.join(format!("{stem}_maps.tadc")), &meta_json, &tensors)?;
        }
        csv.push_str(&format!("{stem},{img_score}\n"));
    }
    atomic_write(&out_dir.join("scores.csv"), csv.as_bytes())
}

#[derive(Clone, Debug, Serialize)]
pub struct CategoryEval {
    pub category: String,
    pub image_auc: f64,
    pub pixel_auc: f64,
    pub image_positives: usize,
    pub image_negatives: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub rows: Vec<CategoryEval>,
    pub mean_image_auc: f64,
    pub mean_pixel_auc: f64,
}

/// Evaluate a checkpoint on a category (or every category under a root).
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out_dir: &Path,
    variant: ScoreVariant,
) -> Result<EvalSummary> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let categories = categories_under(data)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for cat_dir in &categories {
        let corpus = load_corpus(cat_dir, Some(meta.config.image_size))?;
        let report = evaluate_corpus(cfg, &params, &meta.config, &corpus, variant)?;
        rows.push(CategoryEval {
            category: corpus.name.clone(),
            image_auc: report.image_auc,
            pixel_auc: report.pixel_auc,
            image_positives: report.image_positives,
            image_negatives: report.image_negatives,
        });
        reports.push((corpus.name.clone(), report));
    }
    let summary = summarize(rows);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    atomic_write(&out_dir.join("eval.csv"), eval_csv(&summary).as_bytes())?;
    let json = serde_json::json!({
        "rows": summary.rows,
        "mean_image_auc": summary.mean_image_auc,
        "mean_pixel_auc": summary.mean_pixel_auc,
        "reports": reports.iter().map(|(name, r)| serde_json::json!({
            "category": name,
            "image_auc": r.image_auc,
            "pixel_auc": r.pixel_auc,
            "pixel_positives": r.pixel_positives,
            "pixel_negatives": r.pixel_negatives,
            "image_roc": r.image_roc,
        })).collect::<Vec<_>>(),
    });
    atomic_write(
        &out_dir.join("eval.json"),
        serde_json::to_string_pretty(&json)
            .map_err(|e| Error::config(e.to_string()))?
            .as_bytes(),
    )?;
    Ok(summary)
}

fn summarize(rows: Vec<CategoryEval>) -> EvalSummary {
    let n = rows.len().max(1) as f64;
    let mean_image_auc = rows.iter().map(|r| r.image_auc).sum::<f64>() / n;
    let mean_pixel_auc = rows.iter().map(|r| r.pixel_auc).sum::<f64>() / n;
    EvalSummary {
        rows,
        mean_image_auc,
        mean_pixel_auc,
    }
}

fn eval_csv(summary: &EvalSummary) -> String {
    let mut out = String::from("category,image_auc,pixel_auc,n_pos,n_neg\n");
    for r in &summary.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.category, r.image_auc, r.pixel_auc, r.image_positives, r.image_negatives
        ));
    }
    out.push_str(&format!(
        "mean,{},{},,\n",
        summary.mean_image_auc, summary.mean_pixel_auc
    ));
    out
}

/// Category dirs under `data`: itself if it is one, else its children.
pub fn categories_under(data: &Path) -> Result<Vec<PathBuf>> {
    if data.join("train/good").is_dir() {
        Ok(vec![data.to_path_buf()])
    } else {
        list_categories(data)
    }
}

/// Score every test item of a corpus and pool into an evaluation report.
pub fn evaluate_corpus(
    cfg: &RunConfig,
    params: &ModelParams,
    model: &ModelConfig,
    corpus: &Corpus,
    variant: ScoreVariant,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    let score_seed = seeding::derive_seed(cfg.seed, STREAM_SCORE, 0);
    // read-only inference, parallel across images; collect keeps order
    let items: Vec<ScoredItem> = corpus
        .test
        .par_iter()
        .map(|t| -> Result<ScoredItem> {
            let maps = score_image(params, model, &t.image, variant, score_seed)?;
            let (s, img_score) = apply_eval_transforms(&maps, &cfg.eval)?;
            Ok(ScoredItem {
                image_score: img_score,
                anomalous: t.anomalous,
                pixel_scores: s.data().to_vec(),
                mask: t
                    .mask
                    .as_ref()
                    .map(|m| m.data().iter().map(|&v| v >= 0.5).collect()),
                name: t.name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{Category, DefectKind, SynthSpec};

    fn tiny_run_config() -> RunConfig {
        RunConfig {
            seed: 3,
            model: ModelConfig {
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
            },
            pretrain: PretrainConfig {
                epochs: 2,
                batch_size: 4,
                ..Default::default()
            },
            stage2: Stage2Config {
                epochs: 2,
                batch_size: 4,
                loss: crate::stage2::LossConfig {
                    ssim_window: 7,
                    ..Default::default()
                },
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }

    fn tiny_corpus(root: &Path) {
        let spec = SynthSpec {
            category: Category::Stripes,
            image_size: 16,
            n_train: 6,
            n_test_normal: 3,
            n_test_anomalous: 3,
            defects: DefectKind::ALL.to_vec(),
            seed: 40,
        };
        generate_synthetic(&spec, root).unwrap();
    }

    #[test]
    fn config_round_trip_and_unknown_key_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let cfg = tiny_run_config();
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let loaded = load_run_config(&path).unwrap();
        assert_eq!(loaded.seed, cfg.seed);

        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["model"]["bogus_knob"] = serde_json::json!(1);
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let err = load_run_config(&path).unwrap_err().to_string();
        assert!(err.contains("model"), "error should name the JSON path: {err}");
    }

    #[test]
    fn invalid_values_are_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut cfg = tiny_run_config();
        cfg.model.patch_size = 5; // 16 % 5 != 0
        std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert!(load_run_config(&path).is_err());
    }

    #[test]
    fn pretrain_then_train_then_eval_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let cat = dir.path().join("stripes");
        let cfg = tiny_run_config();
        let ck1 = dir.path().join("stage1.tadc");
        let ck2 = dir.path().join("stage2.tadc");
        let mut sink = Vec::new();
        cmd_pretrain(&cfg, &cat, &ck1, &mut sink).unwrap();
        assert!(ck1.exists());
        let head = String::from_utf8(sink.clone()).unwrap();
        assert!(head.starts_with("epoch,loss,lr\n"), "{head}");

        cmd_train(&cfg, &cat, &ck1, &ck2, &mut sink).unwrap();
        let out = dir.path().join("eval");
        let summary = cmd_eval(&cfg, &ck2, &cat, &out, ScoreVariant::Fusion).unwrap();
        assert_eq!(summary.rows.len(), 1);
        assert!(out.join("eval.csv").exists());
        assert!(out.join("eval.json").exists());
        let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
        assert!(csv.starts_with("category,image_auc,pixel_auc,n_pos,n_neg\n"));

        // identical rerun reproduces the CSV byte for byte
        let out2 = dir.path().join("eval2");
        cmd_eval(&cfg, &ck2, &cat, &out2, ScoreVariant::Fusion).unwrap();
        assert_eq!(
            std::fs::read(out.join("eval.csv")).unwrap(),
            std::fs::read(out2.join("eval.csv")).unwrap()
        );
    }

    #[test]
    fn train_requires_stage1_lineage() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let cat = dir.path().join("stripes");
        let cfg = tiny_run_config();
        let ck1 = dir.path().join("stage1.tadc");
        let ck2 = dir.path().join("stage2.tadc");
        let mut sink = Vec::new();
        cmd_pretrain(&cfg, &cat, &ck1, &mut sink).unwrap();
        cmd_train(&cfg, &cat, &ck1, &ck2, &mut sink).unwrap();
        // feeding the stage-2 checkpoint back in must fail
        let err = cmd_train(&cfg, &cat, &ck2, &dir.path().join("x.tadc"), &mut sink)
            .unwrap_err()
            .to_string();
        assert!(err.contains("stage1"), "{err}");
    }

    #[test]
    fn score_command_writes_heatmaps_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path());
        let cat = dir.path().join("stripes");
        let cfg = tiny_run_config();
        let ck1 = dir.path().join("stage1.tadc");
        let mut sink = Vec::new();
        cmd_pretrain(&cfg, &cat, &ck1, &mut sink).unwrap();
        let out = dir.path().join("scores");
        cmd_score(
            &cfg,
            &ck1,
            &cat.join("test/good"),
            &out,
            ScoreVariant::ErrorOnly,
            true,
        )
        .unwrap();
        assert!(out.join("scores.csv").exists());
        assert!(out.join("000_score.pgm").exists());
        assert!(out.join("000_maps.tadc").exists());
        let csv = std::fs::read_to_string(out.join("scores.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4); // header + 3 images
    }
}
