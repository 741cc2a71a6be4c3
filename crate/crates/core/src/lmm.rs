//! Latent mapping model: image latents to mask latents at unchanged spatial
//! size.

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{GmsError, Result};
use crate::nn::{Bound, Conv2dLayer, ConvBlock, ParamStore, SelfAttention2d};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Two conv blocks, with an additive skip around the pair when enabled.
    ConvPair,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmmConfig {
    pub width: usize,
    pub stages: Vec<Stage>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Query/key channel count; the width when unset.
    pub key_channels: Option<usize>,
    pub skip_connections: bool,
    /// GroupNorm groups; derived from the width when unset.
    pub groups: Option<usize>,
}

impl LmmConfig {
    /// Width 128 with `[conv pair, attention, conv pair, attention, conv pair]`.
    pub fn for_latent(latent_channels: usize) -> Self {
        LmmConfig {
            width: 128,
            stages: vec![
                Stage::ConvPair,
                Stage::Attention,
                Stage::ConvPair,
                Stage::Attention,
                Stage::ConvPair,
            ],
            in_channels: latent_channels,
            out_channels: latent_channels,
            key_channels: None,
            skip_connections: true,
            groups: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.in_channels == 0 || self.key_channels == Some(0) {
            return Err(GmsError::Config("LMM widths must be positive".into()));
        }
        if self.in_channels != self.out_channels {
            return Err(GmsError::Config(format!(
                "LMM in_channels {} differs from out_channels {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Block {
    Pair(ConvBlock, ConvBlock),
    Attention(SelfAttention2d),
}

#[derive(Clone, Debug)]
pub struct LmmModel<T> {
    config: LmmConfig,
    params: ParamStore<T>,
    input_proj: Conv2dLayer,
    blocks: Vec<Block>,
    output_proj: Conv2dLayer,
}

impl<T: Scalar> LmmModel<T> {
    pub fn new(config: LmmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = ParamStore::new();
        let w = config.width;
        let input_proj =
            Conv2dLayer::same3x3(&mut params, "input_proj", config.in_channels, w, &mut rng);
        let mut blocks = Vec::with_capacity(config.stages.len());
        for (i, stage) in config.stages.iter().enumerate() {
            let prefix = format!("stage{i}");
            blocks.push(match stage {
                Stage::ConvPair => Block::Pair(
                    ConvBlock::new(
                        &mut params,
                        &format!("{prefix}.a"),
                        w,
                        w,
                        config.groups,
                        &mut rng,
                    )?,
                    ConvBlock::new(
                        &mut params,
                        &format!("{prefix}.b"),
                        w,
                        w,
                        config.groups,
                        &mut rng,
                    )?,
                ),
                Stage::Attention => Block::Attention(SelfAttention2d::new(
                    &mut params,
                    &format!("{prefix}.attn"),
                    w,
                    config.key_channels.unwrap_or(w),
                    &mut rng,
                )),
            });
        }
        let output_proj =
            Conv2dLayer::same3x3(&mut params, "output_proj", w, config.out_channels, &mut rng);
        Ok(LmmModel {
            config,
            params,
            input_proj,
            blocks,
            output_proj,
        })
    }

    pub fn config(&self) -> &LmmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Element count of the model's own tensors.
    pub fn count_trainable_params(&self) -> usize {
        self.params.numel()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        self.params.bind(g, trainable)
    }

    /// `[N, c_lat, h, w] -> [N, c_lat, h, w]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 4 {
            return Err(GmsError::dim("LMM input", "[N, C, h, w]", format!("{s:?}")));
        }
        if s[1] != self.config.in_channels {
            return Err(GmsError::dim(
                "LMM input channels (axis 1)",
                self.config.in_channels,
                s[1],
            ));
        }
        let mut h = self.input_proj.forward(g, p, z)?;
        for block in &self.blocks {
            h = match block {
                Block::Pair(a, b) => {
                    let y = a.forward(g, p, h)?;
                    let y = b.forward(g, p, y)?;
                    if self.config.skip_connections {
                        g.add(y, h)?
                    } else {
                        y
                    }
                }
                Block::Attention(attn) => attn.forward(g, p, h)?,
            };
        }
        self.output_proj.forward(g, p, h)
    }

    /// Inference on `[c_lat, h, w]` or `[N, c_lat, h, w]`.
    pub fn predict(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let single = z.ndim() == 3;
        let input = if single {
            let s = z.shape();
            z.reshape(&[1, s[0], s[1], s[2]])?
        } else {
            z.clone()
        };
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let x = g.constant(input)?;
        let y = self.forward(&mut g, &p, x)?;
        let out = g.value(y).clone();
        if single {
            out.index0(0)
        } else {
            Ok(out)
        }
    }

    /// Writes the tensors under `prefix` and the config as JSON metadata.
    pub fn save_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        self.params.save_into(archive, prefix)?;
        archive
            .metadata
            .insert("lmm_config".into(), serde_json::to_string(&self.config)?);
        Ok(())
    }

    pub fn load_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let config: LmmConfig = serde_json::from_str(archive.meta("lmm_config")?)
            .map_err(|e| GmsError::Format(format!("bad LMM config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.params.load_from(archive, prefix)?;
        Ok(model)
    }
}
