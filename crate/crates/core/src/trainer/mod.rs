//! Training, evaluation, checkpointing and the experiment protocols.
//!
//! Only the LMM is trained. Each step encodes the (augmented) batch with the
//! frozen tokenizer, maps the image latents, decodes the prediction when the
//! segmentation term is active and applies one AdamW update.

mod checkpoint;
mod eval;
mod experiments;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use eval::{
    evaluate, evaluate_model, predict, predict_masks, EvalReport, PredictOutput, SampleMetrics,
};
pub use experiments::{
    run_ablation, run_ablation_on, run_cross_domain, run_cross_domain_on, run_tokenizer_ablation,
    run_tokenizer_ablation_on, AblationRow, AblationTable, CrossDomainRow, CrossDomainTable,
    DomainInfo, TokenizerRow, TokenizerTable,
};

use crate::data::{
    augment, load_manifest, load_sample, resize, split, AugmentConfig, Sample, Split, TEST_SPLIT,
    TRAIN_SPLIT,
};
use crate::error::{GmsError, Result};
use crate::lmm::{LmmConfig, LmmModel};
use crate::losses::{compound_loss, LossConfig};
use crate::optim::{collect_grads, AdamW, AdamWConfig, CosineSchedule};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::{stack_images, stack_masks, FrozenTokenizer, TokenizerKind};

const INIT_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const EPOCH_STREAM: u64 = 1 << 32;

pub const BEST_CHECKPOINT: &str = "best.gmst";
pub const FINAL_CHECKPOINT: &str = "final.gmst";
pub const REPORT_FILE: &str = "report.json";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub tokenizer: TokenizerKind,
    pub tokenizer_weights: Option<PathBuf>,
    /// Defaults to [`LmmConfig::for_latent`] of the tokenizer.
    pub lmm: Option<LmmConfig>,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub image_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub train_fraction: f64,
    /// Share of the training split held out for best-checkpoint selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data"),
            tokenizer: TokenizerKind::Patch,
            tokenizer_weights: None,
            lmm: None,
            loss: LossConfig::both(),
            batch_size: 8,
            epochs: 200,
            lr: 2e-3,
            image_size: 64,
            seed: 7,
            augment: AugmentConfig::default(),
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GmsError::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(GmsError::Config("epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(GmsError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(GmsError::Config(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(GmsError::Config(
                "split fractions must lie in [0, 1)".into(),
            ));
        }
        self.loss.validate()
    }

    pub fn lmm_config(&self, latent_channels: usize) -> LmmConfig {
        self.lmm
            .clone()
            .unwrap_or_else(|| LmmConfig::for_latent(latent_channels))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Train (minus validation), validation and test samples at the training
/// resolution.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Reads the split files of `cfg.dataset`, creating them from the manifest
/// when absent.
pub fn load_split(cfg: &TrainConfig) -> Result<Split> {
    let root = &cfg.dataset;
    if root.join(TRAIN_SPLIT).exists() && root.join(TEST_SPLIT).exists() {
        return Split::read(root);
    }
    let s = split(&load_manifest(root)?, cfg.train_fraction, cfg.seed)?;
    s.write(root)?;
    Ok(s)
}

fn load_all(root: &Path, ids: &[String], size: usize) -> Result<Vec<Sample>> {
    ids.par_iter()
        .map(|id| {
            let s = load_sample(root, id)?;
            if s.height() == size && s.width() == size {
                Ok(s)
            } else {
                resize(&s, size)
            }
        })
        .collect()
}

/// Splits off `round(val_fraction * n)` training samples, chosen by seed.
pub fn carve_validation(
    train: Vec<Sample>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let n_val = (val_fraction * train.len() as f64).round() as usize;
    if n_val >= train.len() && !train.is_empty() {
        return Err(GmsError::Usage(
            "validation share leaves no training samples".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut seeded(derive_seed(seed, VAL_STREAM)));
    let mut is_val = vec![false; train.len()];
    idx[..n_val].iter().for_each(|&i| is_val[i] = true);
    let (val, rest): (Vec<_>, Vec<_>) = train.into_iter().zip(is_val).partition(|(_, v)| *v);
    Ok((
        rest.into_iter().map(|p| p.0).collect(),
        val.into_iter().map(|p| p.0).collect(),
    ))
}

pub fn load_data(cfg: &TrainConfig) -> Result<DataBundle> {
    let split = load_split(cfg)?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(GmsError::Usage(format!(
            "empty split in {} ({} train, {} test)",
            cfg.dataset.display(),
            split.train.len(),
            split.test.len()
        )));
    }
    let train = load_all(&cfg.dataset, &split.train, cfg.image_size)?;
    let test = load_all(&cfg.dataset, &split.test, cfg.image_size)?;
    let (train, val) = carve_validation(train, cfg.val_fraction, cfg.seed)?;
    Ok(DataBundle { train, val, test })
}

/// Patch tokenizer, or a trained VAE read from `weights`.
pub fn load_tokenizer<T: Scalar>(
    kind: TokenizerKind,
    weights: Option<&Path>,
) -> Result<FrozenTokenizer<T>> {
    match (kind, weights) {
        (TokenizerKind::Patch, None) => Ok(FrozenTokenizer::patch()),
        (TokenizerKind::ConvVae, None) => Err(GmsError::Usage(
            "the vae tokenizer needs --tokenizer-weights from train-tokenizer".into(),
        )),
        (kind, Some(path)) => {
            let tok = FrozenTokenizer::load(path)?;
            if tok.kind() != kind {
                return Err(GmsError::Usage(format!(
                    "{} holds a {} tokenizer, not {kind}",
                    path.display(),
                    tok.kind()
                )));
            }
            Ok(tok)
        }
    }
}

/// Loss values of one optimisation step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub lm: Option<f64>,
    pub seg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over batches.
    pub loss: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    /// Test-split evaluation of the best checkpoint.
    pub report: EvalReport,
    pub history: Vec<EpochLog>,
    pub step0: StepLosses,
    /// Parameter hash of the freshly initialised LMM.
    pub init_hash: String,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| GmsError::io(dir, e))?;
        self.best.save(dir.join(BEST_CHECKPOINT))?;
        self.last.save(dir.join(FINAL_CHECKPOINT))?;
        self.report.write(dir.join(REPORT_FILE))?;
        write_json(dir.join(HISTORY_FILE), &self.history)
    }
}

pub(crate) fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| GmsError::io(path, e))
}

/// One AdamW step on a prepared batch.
fn train_step<T: Scalar>(
    model: &mut LmmModel<T>,
    opt: &mut AdamW<T>,
    tok: &FrozenTokenizer<T>,
    loss_cfg: &LossConfig,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    lr: f64,
) -> Result<StepLosses> {
    let z_i = tok.encode_images(images)?;
    let z_m = tok.encode_masks(masks)?;
    let mut g = Graph::new();
    let tp = tok.bind(&mut g)?;
    let p = model.bind(&mut g, true)?;
    let zi = g.constant(z_i)?;
    let zm = g.constant(z_m)?;
    let m = g.constant(masks.clone())?;
    let z_hat = model.forward(&mut g, &p, zi)?;
    let m_hat = if loss_cfg.use_seg {
        Some(tok.decode_mask_var(&mut g, &tp, z_hat)?)
    } else {
        None
    };
    let terms = compound_loss(&mut g, loss_cfg, zm, z_hat, m, m_hat)?;
    let read = |v| g.value(v).item().map(|x: T| x.as_f64());
    let losses = StepLosses {
        total: read(terms.total)?,
        lm: terms.lm.map(read).transpose()?,
        seg: terms.seg.map(read).transpose()?,
    };
    if !losses.total.is_finite() {
        return Err(GmsError::Divergence(format!(
            "non-finite loss {} (latent term {:?}, segmentation term {:?})",
            losses.total, losses.lm, losses.seg
        )));
    }
    let grads = g.backward(terms.total)?;
    let grads = collect_grads(&p, &grads, model.params())?;
    opt.step(model.params_mut(), &grads, lr)?;
    Ok(losses)
}

/// Augmented batch as `([N, 3, H, W], [N, H, W])`.
fn prepare_batch<T: Scalar>(
    samples: &[Sample],
    indices: &[usize],
    aug: &AugmentConfig,
    epoch_seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let batch = indices
        .par_iter()
        .map(|&i| {
            augment(
                &samples[i],
                aug,
                &mut seeded(derive_seed(epoch_seed, i as u64)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((stack_images(&batch)?, stack_masks(&batch)?))
}

/// Trains on an already loaded bundle.
pub fn train_on<T: Scalar>(
    cfg: &TrainConfig,
    tok: &FrozenTokenizer<T>,
    data: &DataBundle,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    tok.ensure_frozen()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(GmsError::Usage(
            "training and test splits must be non-empty".into(),
        ));
    }
    let started = Instant::now();
    let tok_hash = tok.param_hash();
    let mut model = LmmModel::<T>::new(
        cfg.lmm_config(tok.latent_channels()),
        derive_seed(cfg.seed, INIT_STREAM),
    )?;
    let init_hash = model.params().hash();
    let mut opt = AdamW::new(model.params(), AdamWConfig::default());
    let sched = CosineSchedule::new(cfg.lr, cfg.epochs);
    let snapshot = |model: &LmmModel<T>, opt: &AdamW<T>, epoch, best| Checkpoint {
        model: model.clone(),
        optimizer: opt.clone(),
        tokenizer_kind: tok.kind(),
        tokenizer_hash: tok_hash.clone(),
        config: cfg.clone(),
        epoch,
        best_val_dsc: best,
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step0 = None;
    let mut best: Option<(f64, Checkpoint<T>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = sched.lr(epoch)?;
        let epoch_seed = derive_seed(cfg.seed, EPOCH_STREAM + epoch as u64);
        order.shuffle(&mut seeded(epoch_seed));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, masks) = prepare_batch::<T>(&data.train, chunk, &cfg.augment, epoch_seed)?;
            let losses = crate::fpenv::with_flush_to_zero(|| {
                train_step(&mut model, &mut opt, tok, &cfg.loss, &images, &masks, lr)
            })
            .map_err(|e| match e {
                GmsError::Divergence(msg) => {
                    GmsError::Divergence(format!("epoch {epoch}, batch {batches}: {msg}"))
                }
                other => other,
            })?;
            step0.get_or_insert(losses);
            loss_sum += losses.total;
            batches += 1;
        }
        let val_dsc = if data.val.is_empty() {
            None
        } else {
            let m = evaluate_model(&model, tok, &data.val)?;
            Some(m.iter().map(|s| s.dsc).sum::<f64>() / m.len() as f64)
        };
        if let Some(d) = val_dsc {
            if best.as_ref().is_none_or(|(b, _)| d > *b) {
                best = Some((d, snapshot(&model, &opt, epoch + 1, Some(d))));
            }
        }
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            val_dsc,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.6} val dsc {:?}",
            log.loss,
            val_dsc
        );
        history.push(log);
    }
    if tok.param_hash() != tok_hash {
        return Err(GmsError::Contract(
            "tokenizer parameters changed during training".into(),
        ));
    }
    let best_dsc = best.as_ref().map(|(d, _)| *d);
    let last = snapshot(&model, &opt, cfg.epochs, best_dsc);
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    let mut report = evaluate(&best, tok, &data.test)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        best,
        last,
        report,
        history,
        step0: step0.expect("at least one step"),
        init_hash,
    })
}

/// Loads tokenizer and data from `cfg`, trains in 32-bit precision and
/// writes checkpoints and reports to `out` when given.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome<f32>> {
    cfg.validate()?;
    let tok = load_tokenizer::<f32>(cfg.tokenizer, cfg.tokenizer_weights.as_deref())?;
    let data = load_data(cfg)?;
    let outcome = train_on(cfg, &tok, &data)?;
    if let Some(dir) = out {
        outcome.write(dir)?;
    }
    Ok(outcome)
}
