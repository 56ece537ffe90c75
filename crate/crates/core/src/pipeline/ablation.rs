//! The eight-variant ablation matrix plus the full fusion model.
//!
//! Variants are fixed combinations of: stage-1 pretraining on/off, stage-2
//! input mode (clean or corrupted), active losses, and score mode. Within
//! one run, every pretrained variant shares the same stage-1 checkpoint so
//! stage-2 differences are isolated.

use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::data::checkpoint::{save_checkpoint, CheckpointMeta, Stage};
use crate::data::image_io::atomic_write;
use crate::data::{load_corpus, Corpus};
use crate::error::{Error, Result};
use crate::infer::ScoreVariant;
use crate::metrics::EvalReport;
use crate::model::ModelParams;
use crate::pipeline::{categories_under, evaluate_corpus, RunConfig, STREAM_INIT};
use crate::pretrain::Stage1Trainer;
use crate::seeding;
use crate::stage2::{Stage2Config, Stage2Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum VariantId {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
    VIII,
    Ours,
}

impl VariantId {
    pub const ALL: [VariantId; 9] = [
        VariantId::I,
        VariantId::II,
        VariantId::III,
        VariantId::IV,
        VariantId::V,
        VariantId::VI,
        VariantId::VII,
        VariantId::VIII,
        VariantId::Ours,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            VariantId::I => "I",
            VariantId::II => "II",
            VariantId::III => "III",
            VariantId::IV => "IV",
            VariantId::V => "V",
            VariantId::VI => "VI",
            VariantId::VII => "VII",
            VariantId::VIII => "VIII",
            VariantId::Ours => "OURS",
        }
    }
}

impl FromStr for VariantId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" => Ok(VariantId::I),
            "II" => Ok(VariantId::II),
            "III" => Ok(VariantId::III),
            "IV" => Ok(VariantId::IV),
            "V" => Ok(VariantId::V),
            "VI" => Ok(VariantId::VI),
            "VII" => Ok(VariantId::VII),
            "VIII" => Ok(VariantId::VIII),
            "OURS" => Ok(VariantId::Ours),
            other => Err(Error::config(format!(
                "unknown variant '{other}' (expected I..VIII or OURS)"
            ))),
        }
    }
}

impl std::fmt::Display for VariantId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSet {
    pub mse: bool,
    pub ssim: bool,
    pub ce: bool,
}

impl LossSet {
    const RECON: LossSet = LossSet {
        mse: true,
        ssim: true,
        ce: false,
    };
    const CLASSIFY: LossSet = LossSet {
        mse: false,
        ssim: false,
        ce: true,
    };
    const ALL: LossSet = LossSet {
        mse: true,
        ssim: true,
        ce: true,
    };
}

#[derive(Clone, Copy, Debug)]
pub struct VariantStage2 {
    pub corrupted_inputs: bool,
    pub losses: LossSet,
    pub freeze_encoder: bool,
}

/// One row of the ablation table, fully describing how the model is
/// trained and scored.
#[derive(Clone, Copy, Debug)]
pub struct VariantSpec {
    pub id: VariantId,
    pub pretrain: bool,
    pub stage2: Option<VariantStage2>,
    pub score: ScoreVariant,
}

impl VariantSpec {
    /// The canonical table. I scores a masked autoencoder directly;
    /// II–V train standalone (no stage 1, encoder not frozen); VI–VIII
    /// and OURS fine-tune a frozen pretrained encoder.
    pub fn for_id(id: VariantId) -> Self {
        let standalone = |losses, corrupted, score| VariantSpec {
            id,
            pretrain: false,
            stage2: Some(VariantStage2 {
                corrupted_inputs: corrupted,
                losses,
                freeze_encoder: false,
            }),
            score,
        };
        let pretrained = |losses, corrupted, score| VariantSpec {
            id,
            pretrain: true,
            stage2: Some(VariantStage2 {
                corrupted_inputs: corrupted,
                losses,
                freeze_encoder: true,
            }),
            score,
        };
        match id {
            VariantId::I => VariantSpec {
                id,
                pretrain: true,
                stage2: None,
                score: ScoreVariant::MaskedMae,
            },
            VariantId::II => standalone(LossSet::RECON, false, ScoreVariant::ErrorOnly),
            VariantId::III => standalone(LossSet::RECON, true, ScoreVariant::ErrorOnly),
            VariantId::IV => standalone(LossSet::CLASSIFY, true, ScoreVariant::ProbabilityOnly),
            VariantId::V => standalone(LossSet::ALL, true, ScoreVariant::Fusion),
            VariantId::VI => pretrained(LossSet::RECON, false, ScoreVariant::ErrorOnly),
            VariantId::VII => pretrained(LossSet::RECON, true, ScoreVariant::ErrorOnly),
            VariantId::VIII => pretrained(LossSet::CLASSIFY, true, ScoreVariant::ProbabilityOnly),
            VariantId::Ours => pretrained(LossSet::ALL, true, ScoreVariant::Fusion),
        }
    }

    /// Reject inconsistent combinations before any compute: a score mode
    /// can only read heads its training actually exercised.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(format!("variant {}: {msg}", self.id)));
        match (self.stage2.as_ref(), self.score) {
            (None, ScoreVariant::MaskedMae) => {
                if !self.pretrain {
                    return fail("masked scoring needs stage-1 training".into());
                }
            }
            (None, other) => {
                return fail(format!("score mode {other} needs stage-2 training"));
            }
            (Some(s2), score) => {
                let recon = s2.losses.mse || s2.losses.ssim;
                match score {
                    ScoreVariant::ErrorOnly if !recon => {
                        return fail("E scoring without a reconstruction loss".into());
                    }
                    ScoreVariant::ProbabilityOnly if !s2.losses.ce => {
                        return fail("P scoring without the classification loss".into());
                    }
                    ScoreVariant::Fusion if !(recon && s2.losses.ce) => {
                        return fail("fusion scoring needs both loss families".into());
                    }
                    ScoreVariant::MaskedMae => {
                        return fail("masked scoring is incompatible with stage-2 training".into());
                    }
                    _ => {}
                }
                if !s2.losses.mse && !s2.losses.ssim && !s2.losses.ce {
                    return fail("stage-2 training with no active loss".into());
                }
            }
        }
        Ok(())
    }
}

/// Stage-2 config specialized to a variant: inactive losses get weight 0,
/// clean-input variants disable corruption entirely.
fn stage2_for_variant(base: &Stage2Config, v: &VariantStage2) -> Stage2Config {
    let mut cfg = base.clone();
    if !v.losses.mse {
        cfg.loss.lambda0 = 0.0;
    }
    if !v.losses.ssim {
        cfg.loss.lambda1 = 0.0;
    }
    if !v.losses.ce {
        cfg.loss.lambda2 = 0.0;
    }
    if !v.corrupted_inputs {
        cfg.corruption.corrupt_probability = 0.0;
    }
    cfg
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub category: String,
    pub image_auc: f64,
    pub pixel_auc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: VariantId, category: &str) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant.name() && r.category == category)
    }

    pub fn mean_image_auc(&self, variant: VariantId) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant.name())
            .map(|r| r.image_auc)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_pixel_auc(&self, variant: VariantId) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant.name())
            .map(|r| r.pixel_auc)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Train (if needed) and evaluate a single variant on one corpus.
/// `stage1` carries the shared pretrained parameters for variants that
/// start from stage 1.
pub fn run_variant(
    cfg: &RunConfig,
    corpus: &Corpus,
    spec: &VariantSpec,
    stage1: Option<&ModelParams>,
    progress: &mut dyn std::io::Write,
) -> Result<(EvalReport, ModelParams)> {
    spec.validate()?;
    let mut params = if spec.pretrain {
        stage1
            .ok_or_else(|| {
                Error::config(format!(
                    "variant {} needs the shared stage-1 checkpoint",
                    spec.id
                ))
            })?
            .clone()
    } else {
        ModelParams::init(&cfg.model, seeding::derive_seed(cfg.seed, STREAM_INIT, 0))?
    };
    if let Some(v2) = &spec.stage2 {
        let s2cfg = stage2_for_variant(&cfg.stage2, v2);
        let mut trainer = Stage2Trainer::new(cfg.model, s2cfg, cfg.seed, v2.freeze_encoder)?;
        for epoch in 0..cfg.stage2.epochs {
            let log = trainer.epoch(&mut params, &corpus.train, epoch)?;
            writeln!(
                progress,
                "# {} epoch {} total {:.6}",
                spec.id, log.epoch, log.total
            )
            .ok();
        }
    }
    let report = evaluate_corpus(cfg, &params, &cfg.model, corpus, spec.score)?;
    Ok((report, params))
}

/// Run the ablation matrix over one category directory (or every category
/// under a root). Writes `ablation.csv`, `ablation.md`, and per-variant
/// checkpoints under `out_dir`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data: &Path,
    out_dir: &Path,
    variants: &[VariantId],
    progress: &mut dyn std::io::Write,
) -> Result<AblationTable> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::config("ablate: no variants requested"));
    }
    let specs: Vec<VariantSpec> = variants.iter().map(|&id| VariantSpec::for_id(id)).collect();
    for spec in &specs {
        spec.validate()?;
    }
    let categories = categories_under(data)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rows = Vec::new();
    for cat_dir in &categories {
        let corpus = load_corpus(cat_dir, Some(cfg.model.image_size))?;
        let cat_out = out_dir.join(&corpus.name);
        std::fs::create_dir_all(&cat_out).map_err(|e| Error::io(&cat_out, e))?;

        // one shared stage-1 model per category
        let stage1 = if specs.iter().any(|s| s.pretrain) {
            writeln!(progress, "# stage1 on {}", corpus.name).ok();
            let mut params =
                ModelParams::init(&cfg.model, seeding::derive_seed(cfg.seed, STREAM_INIT, 0))?;
            let mut trainer =
                Stage1Trainer::new(cfg.model, cfg.pretrain, corpus.train.len(), cfg.seed)?;
            for epoch in 0..cfg.pretrain.epochs {
                let log = trainer.epoch(&mut params, &corpus.train, epoch)?;
                writeln!(progress, "# stage1 epoch {} loss {:.6}", log.epoch, log.loss).ok();
            }
            let meta = CheckpointMeta {
                stage: Stage::Stage1,
                config: cfg.model,
                seed: cfg.seed,
            };
            save_checkpoint(&params, &meta, &cat_out.join("stage1.tadc"))?;
            Some(params)
        } else {
            None
        };

        for spec in &specs {
            writeln!(progress, "# variant {} on {}", spec.id, corpus.name).ok();
            let (report, params) = run_variant(cfg, &corpus, spec, stage1.as_ref(), progress)?;
            if spec.stage2.is_some() {
                let meta = CheckpointMeta {
                    stage: Stage::Stage2,
                    config: cfg.model,
                    seed: cfg.seed,
                };
                save_checkpoint(&params, &meta, &cat_out.join(format!("{}.tadc", spec.id)))?;
            }
            writeln!(
                progress,
                "{},{},{},{}",
                spec.id, corpus.name, report.image_auc, report.pixel_auc
            )
            .ok();
            rows.push(AblationRow {
                variant: spec.id.name().to_string(),
                category: corpus.name.clone(),
                image_auc: report.image_auc,
                pixel_auc: report.pixel_auc,
            });
        }
    }
    let table = AblationTable { rows };
    atomic_write(&out_dir.join("ablation.csv"), table_csv(&table).as_bytes())?;
    atomic_write(
        &out_dir.join("ablation.md"),
        table_markdown(&table, variants).as_bytes(),
    )?;
    Ok(table)
}

fn table_csv(table: &AblationTable) -> String {
    let mut out = String::from("variant,category,image_auc,pixel_auc\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.variant, r.category, r.image_auc, r.pixel_auc
        ));
    }
    out
}

fn table_markdown(table: &AblationTable, variants: &[VariantId]) -> String {
    let categories: Vec<String> = {
        let mut seen = Vec::new();
        for r in &table.rows {
            if !seen.contains(&r.category) {
                seen.push(r.category.clone());
            }
        }
        seen
    };
    let mut out = String::new();
    for (title, pick) in [
        ("Image-level AUC", 0usize),
        ("Pixel-level AUC", 1usize),
    ] {
        out.push_str(&format!("## {title}\n\n| category |"));
        for v in variants {
            out.push_str(&format!(" {v} |"));
        }
        out.push_str("\n|---|");
        for _ in variants {
            out.push_str("---|");
        }
        out.push('\n');
        for cat in &categories {
            out.push_str(&format!("| {cat} |"));
            for v in variants {
                let cell = table
                    .get(*v, cat)
                    .map(|r| if pick == 0 { r.image_auc } else { r.pixel_auc })
                    .map(|x| format!("{:.3}", x))
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!(" {cell} |"));
            }
            out.push('\n');
        }
        out.push_str("| **mean** |");
        for v in variants {
            let mean = if pick == 0 {
                table.mean_image_auc(*v)
            } else {
                table.mean_pixel_auc(*v)
            };
            let cell = mean.map(|x| format!("{:.3}", x)).unwrap_or_else(|| "-".into());
            out.push_str(&format!(" {cell} |"));
        }
        out.push_str("\n\n");
    }
    out
}
