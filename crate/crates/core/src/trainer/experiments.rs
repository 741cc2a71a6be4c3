use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    evaluate, load_data, load_tokenizer, train_on, write_json, DataBundle, EvalReport, StepLosses,
    TrainConfig,
};
use crate::data::{load_domain, DomainSpec};
use crate::error::{GmsError, Result};
use crate::losses::LossConfig;
use crate::scalar::Scalar;
use crate::tokenizer::{FrozenTokenizer, TokenizerKind};

pub const ABLATION_FILE: &str = "ablation.json";
pub const CROSS_DOMAIN_FILE: &str = "cross_domain.json";
pub const TOKENIZER_ABLATION_FILE: &str = "tokenizer_ablation.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loss: String,
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
    pub step0: StepLosses,
    pub init_hash: String,
}

/// One row per loss configuration: latent only, segmentation only, both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, loss: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.loss == loss)
    }

    /// `step0(both) - (step0(lm) + step0(seg))`.
    pub fn step0_gap(&self) -> Option<f64> {
        Some(
            self.row("both")?.step0.total
                - (self.row("lm")?.step0.total + self.row("seg")?.step0.total),
        )
    }
}

/// Three runs sharing seed, tokenizer and initial weights.
pub fn run_ablation_on<T: Scalar>(
    base: &TrainConfig,
    tok: &FrozenTokenizer<T>,
    data: &DataBundle,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(3);
    for loss in [
        LossConfig::lm_only(),
        LossConfig::seg_only(),
        LossConfig::both(),
    ] {
        let cfg = TrainConfig {
            loss: LossConfig {
                lm_reduction: base.loss.lm_reduction,
                ..loss
            },
            ..base.clone()
        };
        let out = train_on(&cfg, tok, data)?;
        log::info!("ablation {}: dsc {:.4}", loss.label(), out.report.dsc);
        rows.push(AblationRow {
            loss: loss.label().to_string(),
            dsc: out.report.dsc,
            iou: out.report.iou,
            hd95: out.report.hd95,
            step0: out.step0,
            init_hash: out.init_hash,
        });
    }
    Ok(AblationTable {
        seed: base.seed,
        config_hash: base.config_hash(),
        rows,
    })
}

pub fn run_ablation(base: &TrainConfig, out: Option<&Path>) -> Result<AblationTable> {
    base.validate()?;
    let tok = load_tokenizer::<f32>(base.tokenizer, base.tokenizer_weights.as_deref())?;
    let table = run_ablation_on(base, &tok, &load_data(base)?)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| GmsError::io(dir, e))?;
        write_json(dir.join(ABLATION_FILE), &table)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainInfo {
    pub name: String,
    pub dataset: PathBuf,
    pub spec: Option<DomainSpec>,
}

impl DomainInfo {
    /// Name taken from the recorded generator domain, else the directory.
    pub fn from_dataset(root: &Path) -> Result<Self> {
        let spec = load_domain(root)?;
        let name = match &spec {
            Some(s) => s.domain.to_string(),
            None => root
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("?")
                .to_string(),
        };
        Ok(DomainInfo {
            name,
            dataset: root.to_path_buf(),
            spec,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainRow {
    pub train_domain: String,
    pub test_domain: String,
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
    pub n: usize,
    /// Hash of the checkpoint used; shared by both rows of a training domain.
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainTable {
    pub seed: u64,
    pub domains: Vec<DomainInfo>,
    /// `A->A, A->B, B->B, B->A`.
    pub rows: Vec<CrossDomainRow>,
    /// Per training domain: in-domain DSC at least the cross-domain DSC.
    pub in_domain_ge_cross: Vec<(String, bool)>,
}

fn row(train: &DomainInfo, test: &DomainInfo, r: &EvalReport, hash: &str) -> CrossDomainRow {
    CrossDomainRow {
        train_domain: train.name.clone(),
        test_domain: test.name.clone(),
        dsc: r.dsc,
        iou: r.iou,
        hd95: r.hd95,
        n: r.n,
        checkpoint_hash: hash.to_string(),
    }
}

/// Trains once per domain and evaluates each checkpoint on both test splits.
pub fn run_cross_domain_on<T: Scalar>(
    cfg: &TrainConfig,
    tok: &FrozenTokenizer<T>,
    a: (&DomainInfo, &DataBundle),
    b: (&DomainInfo, &DataBundle),
) -> Result<(CrossDomainTable, Vec<super::Checkpoint<T>>)> {
    let mut rows = Vec::with_capacity(4);
    let mut trend = Vec::with_capacity(2);
    let mut checkpoints = Vec::with_capacity(2);
    for (own, other) in [(a, b), (b, a)] {
        let run_cfg = TrainConfig {
            dataset: own.0.dataset.clone(),
            ..cfg.clone()
        };
        let out = train_on(&run_cfg, tok, own.1)?;
        let hash = out.best.content_hash()?;
        let cross = evaluate(&out.best, tok, &other.1.test)?;
        rows.push(row(own.0, own.0, &out.report, &hash));
        rows.push(row(own.0, other.0, &cross, &hash));
        let holds = out.report.dsc >= cross.dsc;
        log::info!(
            "trained on {}: in-domain dsc {:.4}, on {} {:.4} (in-domain >= cross: {holds})",
            own.0.name,
            out.report.dsc,
            other.0.name,
            cross.dsc
        );
        trend.push((own.0.name.clone(), holds));
        checkpoints.push(out.best);
    }
    let table = CrossDomainTable {
        seed: cfg.seed,
        domains: vec![a.0.clone(), b.0.clone()],
        rows,
        in_domain_ge_cross: trend,
    };
    Ok((table, checkpoints))
}

/// `cfg.dataset` is ignored; the two roots name the domains.
pub fn run_cross_domain(
    cfg: &TrainConfig,
    root_a: &Path,
    root_b: &Path,
    out: Option<&Path>,
) -> Result<CrossDomainTable> {
    cfg.validate()?;
    let tok = load_tokenizer::<f32>(cfg.tokenizer, cfg.tokenizer_weights.as_deref())?;
    let load = |root: &Path| -> Result<(DomainInfo, DataBundle)> {
        let info = DomainInfo::from_dataset(root)?;
        let data = load_data(&TrainConfig {
            dataset: root.to_path_buf(),
            ..cfg.clone()
        })?;
        Ok((info, data))
    };
    let (ia, da) = load(root_a)?;
    let (ib, db) = load(root_b)?;
    let (table, checkpoints) = run_cross_domain_on(cfg, &tok, (&ia, &da), (&ib, &db))?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| GmsError::io(dir, e))?;
        for (info, ck) in [&ia, &ib].iter().zip(&checkpoints) {
            ck.save(dir.join(format!("train_{}.gmst", info.name)))?;
        }
        write_json(dir.join(CROSS_DOMAIN_FILE), &table)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerRow {
    pub tokenizer: String,
    pub latent_channels: usize,
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
    pub seed: u64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTable {
    pub rows: Vec<TokenizerRow>,
}

/// Identical LMM training under each tokenizer. An explicit LMM config has
/// its channel counts rebound to each tokenizer.
pub fn run_tokenizer_ablation_on<T: Scalar>(
    cfg: &TrainConfig,
    tokenizers: &[&FrozenTokenizer<T>],
    data: &DataBundle,
) -> Result<TokenizerTable> {
    let mut rows = Vec::with_capacity(tokenizers.len());
    for tok in tokenizers {
        let c = tok.latent_channels();
        let run_cfg = TrainConfig {
            tokenizer: tok.kind(),
            lmm: cfg.lmm.clone().map(|l| crate::lmm::LmmConfig {
                in_channels: c,
                out_channels: c,
                ..l
            }),
            ..cfg.clone()
        };
        let out = train_on(&run_cfg, tok, data)?;
        rows.push(TokenizerRow {
            tokenizer: tok.kind().to_string(),
            latent_channels: c,
            dsc: out.report.dsc,
            iou: out.report.iou,
            hd95: out.report.hd95,
            seed: cfg.seed,
            trainable_params: out.report.trainable_params,
        });
    }
    Ok(TokenizerTable { rows })
}

/// Patch tokenizer against the trained VAE at `vae_weights`.
pub fn run_tokenizer_ablation(
    cfg: &TrainConfig,
    vae_weights: &Path,
    out: Option<&Path>,
) -> Result<TokenizerTable> {
    cfg.validate()?;
    let patch = load_tokenizer::<f32>(TokenizerKind::Patch, None)?;
    let vae = load_tokenizer::<f32>(TokenizerKind::ConvVae, Some(vae_weights))?;
    let table = run_tokenizer_ablation_on(cfg, &[&patch, &vae], &load_data(cfg)?)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| GmsError::io(dir, e))?;
        write_json(dir.join(TOKENIZER_ABLATION_FILE), &table)?;
    }
    Ok(table)
}
