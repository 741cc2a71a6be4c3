use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_json, Checkpoint};
use crate::data::pnm::{read_mask, read_ppm, write_pgm};
use crate::data::{resize, Sample};
use crate::error::{GmsError, Result};
use crate::lmm::LmmModel;
use crate::metrics::{dsc_iou, evaluate_pair, BinaryMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{stack_images, FrozenTokenizer, MaskPrediction};

const EVAL_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
}

/// Metric means over one evaluation set together with the run identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
    pub tokenizer: String,
    pub latent_channels: usize,
    pub trainable_params: usize,
    pub per_sample: Vec<SampleMetrics>,
    /// The only field that varies between otherwise identical runs.
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn from_samples(
        per_sample: Vec<SampleMetrics>,
        ckpt_seed: u64,
        config_hash: String,
    ) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(GmsError::Usage("cannot report on zero samples".into()));
        }
        let n = per_sample.len();
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n as f64;
        Ok(EvalReport {
            dsc: mean(|s| s.dsc),
            iou: mean(|s| s.iou),
            hd95: mean(|s| s.hd95),
            n,
            seed: ckpt_seed,
            config_hash,
            tokenizer: String::new(),
            latent_channels: 0,
            trainable_params: 0,
            per_sample,
            wall_clock_secs: 0.0,
        })
    }

    /// Copy with the timing field zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        EvalReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GmsError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Encode, map, decode and binarize a `[N, 3, H, W]` batch.
pub fn predict_masks<T: Scalar>(
    model: &LmmModel<T>,
    tok: &FrozenTokenizer<T>,
    images: &Tensor<T>,
) -> Result<MaskPrediction<T>> {
    crate::fpenv::with_flush_to_zero(|| {
        let z = tok.encode_images(images)?;
        let z_hat = model.predict(&z)?;
        tok.decode_to_mask(&z_hat)
    })
}

/// Per-sample metrics in input order. Chunks run in parallel; every chunk
/// has the same composition whatever the thread count.
pub fn evaluate_model<T: Scalar>(
    model: &LmmModel<T>,
    tok: &FrozenTokenizer<T>,
    samples: &[Sample],
) -> Result<Vec<SampleMetrics>> {
    let chunks: Vec<Vec<SampleMetrics>> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let pred = predict_masks(model, tok, &stack_images::<T>(chunk)?)?;
            chunk
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let gt = BinaryMask::from_tensor(&s.mask)?;
                    let p = BinaryMask::from_tensor(&pred.binary.index0(i)?)?;
                    let r = evaluate_pair(&gt, &p)?;
                    Ok(SampleMetrics {
                        id: s.id.clone(),
                        dsc: r.dsc,
                        iou: r.iou,
                        hd95: r.hd95,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Evaluates `ckpt` on `samples`. The tokenizer must be the one the
/// checkpoint was trained against.
pub fn evaluate<T: Scalar>(
    ckpt: &Checkpoint<T>,
    tok: &FrozenTokenizer<T>,
    samples: &[Sample],
) -> Result<EvalReport> {
    tok.ensure_frozen()?;
    if tok.param_hash() != ckpt.tokenizer_hash {
        return Err(GmsError::Contract(format!(
            "tokenizer hash {} does not match the checkpoint's {}",
            tok.param_hash(),
            ckpt.tokenizer_hash
        )));
    }
    let started = std::time::Instant::now();
    let per_sample = evaluate_model(&ckpt.model, tok, samples)?;
    let mut report =
        EvalReport::from_samples(per_sample, ckpt.config.seed, ckpt.config.config_hash())?;
    report.tokenizer = tok.kind().to_string();
    report.latent_channels = tok.latent_channels();
    report.trainable_params = ckpt.model.count_trainable_params();
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOutput {
    pub mask_path: PathBuf,
    pub gray_path: PathBuf,
    /// Against the supplied ground truth, if any.
    pub dsc: Option<f64>,
}

fn nearest_plane(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (sh, sw) = (t.shape()[0], t.shape()[1]);
    if (sh, sw) == (h, w) {
        return t.clone();
    }
    let d = t.data();
    let pick = |o: usize, n_out: usize, n_in: usize| {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1)
    };
    Tensor::from_fn(&[h, w], |i| d[pick(i / w, h, sh) * sw + pick(i % w, w, sw)])
}

/// Segments one PPM image. Writes `<stem>_mask.pgm` (0/255) and
/// `<stem>_gray.pgm` into `out_dir` at the input resolution.
pub fn predict<T: Scalar>(
    ckpt: &Checkpoint<T>,
    tok: &FrozenTokenizer<T>,
    image: &Path,
    mask: Option<&Path>,
    out_dir: &Path,
) -> Result<PredictOutput> {
    if tok.param_hash() != ckpt.tokenizer_hash {
        return Err(GmsError::Contract(
            "tokenizer does not match the checkpoint".into(),
        ));
    }
    let img = read_ppm(image)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let size = ckpt.config.image_size;
    let sample = Sample::new("input", img, Tensor::zeros(&[h, w]))?;
    let sample = if (h, w) == (size, size) {
        sample
    } else {
        resize(&sample, size)?
    };
    let batch = stack_images::<T>(std::slice::from_ref(&sample))?;
    let pred = predict_masks(&ckpt.model, tok, &batch)?;
    let gray = nearest_plane(&pred.gray.index0(0)?.cast::<f32>(), h, w);
    let binary = nearest_plane(&pred.binary.index0(0)?.cast::<f32>(), h, w);

    std::fs::create_dir_all(out_dir).map_err(|e| GmsError::io(out_dir, e))?;
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("prediction");
    let mask_path = out_dir.join(format!("{stem}_mask.pgm"));
    let gray_path = out_dir.join(format!("{stem}_gray.pgm"));
    write_pgm(&mask_path, &binary)?;
    write_pgm(&gray_path, &gray)?;
    let dsc = match mask {
        None => None,
        Some(p) => {
            let gt = BinaryMask::from_tensor(&read_mask(p)?)?;
            Some(dsc_iou(&gt, &BinaryMask::from_tensor(&binary)?)?.0)
        }
    };
    Ok(PredictOutput {
        mask_path,
        gray_path,
        dsc,
    })
}
