//! Frozen image tokenizers: encode to a latent grid at 1/8 resolution and
//! decode back to `[0, 1]` images.
//!
//! Two kinds share one interface. The patch tokenizer is an exact
//! space-to-depth rearrangement with 192 latent channels. The convolutional
//! VAE is trained locally and encodes with its posterior mean.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::data::Sample;
use crate::error::{GmsError, Result};
use crate::nn::{Bound, Conv2dLayer, Layer, ParamId, ParamStore, PRELU_INIT};
use crate::optim::{collect_grads, AdamW, AdamWConfig, CosineSchedule};
use crate::rng::{derive_seed, seeded, Rng};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const DOWNSAMPLE: usize = 8;
pub const PATCH_LATENT_CHANNELS: usize = 3 * DOWNSAMPLE * DOWNSAMPLE;
pub const VAE_LATENT_CHANNELS: usize = 4;
pub const MASK_THRESHOLD: f64 = 0.5;

const ENC_WIDTHS: [usize; 3] = [32, 64, 128];
const DEC_WIDTHS: [usize; 4] = [128, 64, 32, 16];
const LOGVAR_LIMIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Patch,
    ConvVae,
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerKind::Patch => "patch",
            TokenizerKind::ConvVae => "conv_vae",
        })
    }
}

impl FromStr for TokenizerKind {
    type Err = GmsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(TokenizerKind::Patch),
            "vae" | "conv_vae" => Ok(TokenizerKind::ConvVae),
            other => Err(GmsError::Usage(format!(
                "unknown tokenizer {other:?} (expected patch or vae)"
            ))),
        }
    }
}

/// Gray-to-binary mask conversion. Values at or above the threshold are
/// foreground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskCodec {
    pub threshold: f64,
}

impl Default for MaskCodec {
    fn default() -> Self {
        MaskCodec {
            threshold: MASK_THRESHOLD,
        }
    }
}

impl MaskCodec {
    pub fn binarize<T: Scalar>(&self, gray: &Tensor<T>) -> Tensor<T> {
        let thr = T::lit(self.threshold);
        gray.map(|v| if v >= thr { T::one() } else { T::zero() })
    }
}

/// Decoded mask: the channel mean of the decoded image and its binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction<T> {
    pub gray: Tensor<T>,
    pub binary: Tensor<T>,
}

#[derive(Clone, Debug)]
struct VaeArch {
    down: Vec<(Conv2dLayer, ParamId)>,
    head: Conv2dLayer,
    dec_in: (Conv2dLayer, ParamId),
    up: Vec<(Conv2dLayer, ParamId)>,
    out: Conv2dLayer,
}

fn prelu_param<T: Scalar>(store: &mut ParamStore<T>, name: String, c: usize) -> ParamId {
    store.add(name, Tensor::full(&[c], T::lit(PRELU_INIT)))
}

impl VaeArch {
    fn new<T: Scalar>(store: &mut ParamStore<T>, c_lat: usize, rng: &mut Rng) -> Self {
        let mut cin = 3;
        let mut down = Vec::new();
        for (i, &c) in ENC_WIDTHS.iter().enumerate() {
            let conv = Conv2dLayer::new(store, &format!("enc.down{i}"), cin, c, 4, 2, 1, rng);
            down.push((conv, prelu_param(store, format!("enc.down{i}.prelu"), c)));
            cin = c;
        }
        let head = Conv2dLayer::same3x3(store, "enc.head", cin, 2 * c_lat, rng);
        let dec_in = (
            Conv2dLayer::same3x3(store, "dec.in", c_lat, DEC_WIDTHS[0], rng),
            prelu_param(store, "dec.in.prelu".into(), DEC_WIDTHS[0]),
        );
        let mut up = Vec::new();
        for i in 0..3 {
            let (a, b) = (DEC_WIDTHS[i], DEC_WIDTHS[i + 1]);
            let conv = Conv2dLayer::same3x3(store, &format!("dec.up{i}"), a, b, rng);
            up.push((conv, prelu_param(store, format!("dec.up{i}.prelu"), b)));
        }
        let out = Conv2dLayer::same3x3(store, "dec.out", DEC_WIDTHS[3], 3, rng);
        VaeArch {
            down,
            head,
            dec_in,
            up,
            out,
        }
    }

    /// Posterior mean and clamped log-variance.
    fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        c_lat: usize,
    ) -> Result<(Var, Var)> {
        let x = g.scale(x, T::lit(2.0))?;
        let mut h = g.shift(x, -T::one())?;
        for (conv, a) in &self.down {
            h = conv.forward(g, p, h)?;
            h = g.prelu(h, p[*a])?;
        }
        let stats = self.head.forward(g, p, h)?;
        let mu = g.slice_channels(stats, 0, c_lat)?;
        let logvar = g.slice_channels(stats, c_lat, c_lat)?;
        let lim = T::lit(LOGVAR_LIMIT);
        let logvar = g.clamp(logvar, -lim, lim)?;
        Ok((mu, logvar))
    }

    fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let mut h = self.dec_in.0.forward(g, p, z)?;
        h = g.prelu(h, p[self.dec_in.1])?;
        for (conv, a) in &self.up {
            h = g.upsample_nearest2x(h)?;
            h = conv.forward(g, p, h)?;
            h = g.prelu(h, p[*a])?;
        }
        let y = self.out.forward(g, p, h)?;
        let y = g.tanh(y)?;
        let y = g.shift(y, T::one())?;
        g.scale(y, T::lit(0.5))
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        let layers = self
            .down
            .iter()
            .chain(std::iter::once(&self.dec_in))
            .chain(&self.up)
            .map(|(c, _)| c)
            .chain([&self.head, &self.out]);
        for conv in layers {
            conv.init_parameters(store, rng);
        }
    }
}

/// Encoder/decoder pair. Once frozen, its parameters may never change.
#[derive(Clone, Debug)]
pub struct FrozenTokenizer<T> {
    kind: TokenizerKind,
    latent_channels: usize,
    params: ParamStore<T>,
    arch: Option<VaeArch>,
    frozen_hash: Option<String>,
}

impl<T: Scalar> FrozenTokenizer<T> {
    pub fn patch() -> Self {
        let params = ParamStore::new();
        FrozenTokenizer {
            kind: TokenizerKind::Patch,
            latent_channels: PATCH_LATENT_CHANNELS,
            frozen_hash: Some(params.hash()),
            params,
            arch: None,
        }
    }

    /// Randomly initialised, not yet frozen.
    pub fn untrained_conv_vae(latent_channels: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = seeded(seed);
        let arch = VaeArch::new(&mut params, latent_channels, &mut rng);
        arch.init(&mut params, &mut rng);
        FrozenTokenizer {
            kind: TokenizerKind::ConvVae,
            latent_channels,
            params,
            arch: Some(arch),
            frozen_hash: None,
        }
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn downsample_factor(&self) -> usize {
        DOWNSAMPLE
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    /// Hash of the current parameter bytes.
    pub fn param_hash(&self) -> String {
        self.params.hash()
    }

    pub fn freeze(&mut self) {
        self.frozen_hash = Some(self.params.hash());
    }

    /// Fails unless frozen and unchanged since freezing.
    pub fn ensure_frozen(&self) -> Result<()> {
        match &self.frozen_hash {
            None => Err(GmsError::Contract("tokenizer is not frozen".into())),
            Some(h) if *h != self.params.hash() => Err(GmsError::Contract(
                "tokenizer parameters changed after freezing".into(),
            )),
            Some(_) => Ok(()),
        }
    }

    /// Same tokenizer at another precision.
    pub fn cast<U: Scalar>(&self) -> FrozenTokenizer<U> {
        let params = self.params.cast::<U>();
        FrozenTokenizer {
            kind: self.kind,
            latent_channels: self.latent_channels,
            frozen_hash: self.frozen_hash.as_ref().map(|_| params.hash()),
            params,
            arch: self.arch.clone(),
        }
    }

    /// Records the parameters as constants on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        self.params.bind(g, false)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(GmsError::dim(
                "tokenizer input",
                "[N, 3, H, W]",
                format!("{shape:?}"),
            ));
        }
        if !shape[2].is_multiple_of(DOWNSAMPLE) || !shape[3].is_multiple_of(DOWNSAMPLE) {
            return Err(GmsError::Config(format!(
                "image size {}x{} is not divisible by {DOWNSAMPLE}; resize it first",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(GmsError::dim(
                "latent",
                "[N, C, h, w]",
                format!("{shape:?}"),
            ));
        }
        if shape[1] != self.latent_channels {
            return Err(GmsError::dim(
                "latent channels (axis 1)",
                self.latent_channels,
                shape[1],
            ));
        }
        Ok(())
    }

    /// `[N, 3, H, W]` in `[0, 1]` to `[N, c_lat, H/8, W/8]`.
    pub fn encode_var(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_image(g.shape(x))?;
        match &self.arch {
            None => g.space_to_depth(x, DOWNSAMPLE),
            Some(arch) => Ok(arch.encode(g, p, x, self.latent_channels)?.0),
        }
    }

    /// `[N, c_lat, h, w]` to `[N, 3, 8h, 8w]` in `[0, 1]`.
    pub fn decode_var(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        self.check_latent(g.shape(z))?;
        match &self.arch {
            None => {
                let y = g.depth_to_space(z, DOWNSAMPLE)?;
                g.clamp(y, T::zero(), T::one())
            }
            Some(arch) => arch.decode(g, p, z),
        }
    }

    /// Gray mask `[N, 8h, 8w]`: channel mean of the decoded image.
    pub fn decode_mask_var(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let img = self.decode_var(g, p, z)?;
        g.mean_channels(img)
    }

    fn run(
        &self,
        input: &Tensor<T>,
        f: impl FnOnce(&Self, &mut Graph<T>, &Bound, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let x = g.constant(input.clone())?;
        let y = f(self, &mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    /// Batched images `[N, 3, H, W]`.
    pub fn encode_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(images.shape())?;
        self.run(images, Self::encode_var)
    }

    /// One image `[3, H, W]` to `[c_lat, H/8, W/8]`.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(GmsError::dim("image", "[3, H, W]", format!("{s:?}")));
        }
        let z = self.encode_images(&image.reshape(&[1, s[0], s[1], s[2]])?)?;
        z.index0(0)
    }

    /// Batched binary masks `[N, H, W]`, replicated to three channels.
    pub fn encode_masks(&self, masks: &Tensor<T>) -> Result<Tensor<T>> {
        let s = masks.shape();
        if s.len() != 3 {
            return Err(GmsError::dim("masks", "[N, H, W]", format!("{s:?}")));
        }
        if let Some(v) = masks
            .data()
            .iter()
            .find(|&&v| v != T::zero() && v != T::one())
        {
            return Err(GmsError::Validation(format!(
                "mask value {v} is not 0 or 1"
            )));
        }
        self.encode_images(&replicate3(masks))
    }

    pub fn encode_mask(&self, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let s = mask.shape();
        if s.len() != 2 {
            return Err(GmsError::dim("mask", "[H, W]", format!("{s:?}")));
        }
        self.encode_masks(&mask.reshape(&[1, s[0], s[1]])?)?
            .index0(0)
    }

    /// `[c_lat, h, w]` or `[N, c_lat, h, w]`; the output keeps the batch form.
    pub fn decode_latent(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (batched, single) = batch_view(z)?;
        let y = self.run(&batched, Self::decode_var)?;
        if single {
            y.index0(0)
        } else {
            Ok(y)
        }
    }

    pub fn decode_to_mask(&self, z: &Tensor<T>) -> Result<MaskPrediction<T>> {
        let (batched, single) = batch_view(z)?;
        let gray = self.run(&batched, Self::decode_mask_var)?;
        let gray = if single { gray.index0(0)? } else { gray };
        let binary = MaskCodec::default().binarize(&gray);
        Ok(MaskPrediction { gray, binary })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        self.params.save_into(&mut a, "")?;
        a.metadata = BTreeMap::from([
            ("kind".to_string(), self.kind.to_string()),
            ("c_lat".to_string(), self.latent_channels.to_string()),
            ("downsample_factor".to_string(), DOWNSAMPLE.to_string()),
            ("frozen".to_string(), self.is_frozen().to_string()),
        ]);
        Ok(a)
    }

    /// Rebuilds a tokenizer from its archive. The result is frozen.
    pub fn from_archive(a: &Archive) -> Result<Self> {
        let kind: TokenizerKind = a.meta("kind")?.parse().map_err(|_| {
            GmsError::Format(format!(
                "unknown tokenizer kind {:?}",
                a.meta("kind").unwrap_or_default()
            ))
        })?;
        let c_lat: usize = a
            .meta("c_lat")?
            .parse()
            .map_err(|_| GmsError::Format("c_lat is not an integer".into()))?;
        let factor = a.meta("downsample_factor")?;
        if factor != DOWNSAMPLE.to_string() {
            return Err(GmsError::Format(format!(
                "unsupported downsample factor {factor}"
            )));
        }
        let mut tok = match kind {
            TokenizerKind::Patch => {
                if c_lat != PATCH_LATENT_CHANNELS {
                    return Err(GmsError::Format(format!(
                        "patch tokenizer with c_lat {c_lat}"
                    )));
                }
                Self::patch()
            }
            TokenizerKind::ConvVae => Self::untrained_conv_vae(c_lat, 0),
        };
        if a.tensors().len() != tok.params.len() {
            return Err(GmsError::Format(format!(
                "tokenizer archive holds {} tensors, expected {}",
                a.tensors().len(),
                tok.params.len()
            )));
        }
        tok.params.load_from(a, "")?;
        tok.freeze();
        Ok(tok)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    /// Mean per-pixel squared reconstruction error over `samples`.
    pub fn reconstruction_mse(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(GmsError::Usage("no samples to reconstruct".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in samples.chunks(16) {
            let x = stack_images::<T>(chunk)?;
            let z = self.encode_images(&x)?;
            let y = self.decode_latent(&z)?;
            for (&a, &b) in x.data().iter().zip(y.data()) {
                total += (a - b).as_f64().powi(2);
            }
            count += x.numel();
        }
        Ok(total / count as f64)
    }
}

/// `[N, H, W]` to `[N, 3, H, W]` by copying each mask into three channels.
pub fn replicate3<T: Scalar>(masks: &Tensor<T>) -> Tensor<T> {
    let s = masks.shape();
    let hw = s[1] * s[2];
    let d = masks.data();
    Tensor::from_fn(&[s[0], 3, s[1], s[2]], |i| {
        let (n, r) = (i / (3 * hw), i % hw);
        d[n * hw + r]
    })
}

/// Images of `samples` as one `[N, 3, H, W]` batch.
pub fn stack_images<T: Scalar>(samples: &[Sample]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

/// Masks of `samples` as one `[N, H, W]` batch.
pub fn stack_masks<T: Scalar>(samples: &[Sample]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = samples.iter().map(|s| s.mask.cast()).collect();
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

fn batch_view<T: Scalar>(z: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    let s = z.shape();
    match s.len() {
        3 => Ok((z.reshape(&[1, s[0], s[1], s[2]])?, true)),
        4 => Ok((z.clone(), false)),
        _ => Err(GmsError::dim(
            "latent",
            "[C, h, w] or [N, C, h, w]",
            format!("{s:?}"),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the KL term; 0 gives a plain autoencoder.
    pub kl_weight: f64,
    pub batch_size: usize,
    pub latent_channels: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 200,
            lr: 1e-3,
            kl_weight: 1e-6,
            batch_size: 8,
            latent_channels: VAE_LATENT_CHANNELS,
            seed: 0,
        }
    }
}

/// Per-epoch mean reconstruction and KL terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainReport {
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Loss of one batch on `g`: `(total, recon, kl)`. The KL node is absent
/// when its weight is zero.
fn vae_batch_loss<T: Scalar>(
    tok: &FrozenTokenizer<T>,
    g: &mut Graph<T>,
    p: &Bound,
    x: &Tensor<T>,
    kl_weight: f64,
    rng: &mut Rng,
) -> Result<(Var, Var, Option<Var>)> {
    let arch = tok.arch.as_ref().expect("conv vae");
    let xv = g.constant(x.clone())?;
    let (mu, logvar) = arch.encode(g, p, xv, tok.latent_channels)?;
    let half = g.scale(logvar, T::lit(0.5))?;
    let std = g.exp(half)?;
    let noise = Tensor::from_fn(g.shape(mu), |_| T::lit(StandardNormal.sample(rng)));
    let noise = g.constant(noise)?;
    let jitter = g.mul(std, noise)?;
    let z = g.add(mu, jitter)?;
    let recon = arch.decode(g, p, z)?;
    let diff = g.sub(recon, xv)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    if kl_weight == 0.0 {
        return Ok((mse, mse, None));
    }
    // 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar) per sample, batch mean
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.shift(t, -T::one())?;
    let per = g.sum_rows(t)?;
    let kl = g.mean(per)?;
    let kl = g.scale(kl, T::lit(0.5))?;
    let weighted = g.scale(kl, T::lit(kl_weight))?;
    let total = g.add(mse, weighted)?;
    Ok((total, mse, Some(kl)))
}

/// Trains a convolutional VAE on the images of `samples` and returns it
/// frozen.
pub fn train_conv_vae<T: Scalar>(
    samples: &[Sample],
    cfg: &VaeTrainConfig,
) -> Result<(FrozenTokenizer<T>, VaeTrainReport)> {
    if samples.is_empty() {
        return Err(GmsError::Usage(
            "cannot train a tokenizer on an empty dataset".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.latent_channels == 0 {
        return Err(GmsError::Config(
            "epochs, batch size and latent channels must be positive".into(),
        ));
    }
    let mut tok = FrozenTokenizer::<T>::untrained_conv_vae(cfg.latent_channels, cfg.seed);
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    for img in &images {
        let s = img.shape();
        tok.check_image(&[1, s[0], s[1], s[2]])?;
    }
    let mut opt = AdamW::new(&tok.params, AdamWConfig::default());
    let sched = CosineSchedule::new(cfg.lr, cfg.epochs);
    let mut report = VaeTrainReport::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    crate::fpenv::with_flush_to_zero(|| -> Result<()> {
        for epoch in 0..cfg.epochs {
            let lr = sched.lr(epoch)?;
            let mut rng = seeded(derive_seed(cfg.seed, epoch as u64 + 1));
            order.shuffle(&mut rng);
            let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
            for batch in order.chunks(cfg.batch_size) {
                let refs: Vec<&Tensor<T>> = batch.iter().map(|&i| &images[i]).collect();
                let x = Tensor::stack(&refs)?;
                let mut g = Graph::new();
                let p = tok.params.bind(&mut g, true)?;
                let (total, recon, kl) =
                    vae_batch_loss(&tok, &mut g, &p, &x, cfg.kl_weight, &mut rng)?;
                let loss = g.value(total).item()?.as_f64();
                if !loss.is_finite() {
                    return Err(GmsError::Divergence(format!(
                        "tokenizer loss became {loss} at epoch {epoch}"
                    )));
                }
                let w = batch.len() as f64;
                recon_sum += w * g.value(recon).item()?.as_f64();
                kl_sum += w * kl.map_or(Ok(0.0), |k| g.value(k).item().map(|v| v.as_f64()))?;
                let grads = g.backward(total)?;
                let grads = collect_grads(&p, &grads, &tok.params)?;
                opt.step(&mut tok.params, &grads, lr)?;
            }
            let n = images.len() as f64;
            report.recon.push(recon_sum / n);
            report.kl.push(kl_sum / n);
            log::debug!("tokenizer epoch {epoch}: recon {:.5}", recon_sum / n);
        }
        Ok(())
    })?;
    tok.freeze();
    Ok((tok, report))
}
