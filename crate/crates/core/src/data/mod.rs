//! Synthetic two-domain datasets, image/mask files, resizing, splitting and
//! augmentation.

mod dataset;
pub mod pnm;
mod synth;
mod transform;

pub use dataset::{
    generate_synthetic, load_domain, load_manifest, load_sample, read_id_list, save_sample, split,
    write_id_list, Split, DOMAIN_FILE, MANIFEST, TEST_SPLIT, TRAIN_SPLIT,
};
pub use synth::{generate_sample, Domain, DomainSpec};
pub use transform::{augment, hflip, hsv_to_rgb, resize, rgb_to_hsv, rot90, vflip, AugmentConfig};

use crate::error::{GmsError, Result};
use crate::tensor::Tensor;

/// An image in `[0, 1]` with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`.
    pub image: Tensor<f32>,
    /// `[H, W]`, values 0 or 1.
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 {
            return Err(GmsError::dim("image", "[3, H, W]", format!("{is:?}")));
        }
        if ms.len() != 2 || ms != &is[1..] {
            return Err(GmsError::dim(
                "mask",
                format!("{:?}", &is[1..]),
                format!("{ms:?}"),
            ));
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }

    /// Foreground pixel fraction.
    pub fn mask_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.numel() as f64
    }
}
