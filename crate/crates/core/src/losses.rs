//! Training objectives. All losses take batched inputs with a leading
//! sample axis, compute a per-sample value and average it over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{GmsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Smoothing added to the numerator and denominator of the Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Squared L2 norm of the difference.
    #[default]
    Sum,
    /// Mean squared difference.
    Mean,
}

/// Which terms of the compound objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossConfig {
    pub use_lm: bool,
    pub use_seg: bool,
    #[serde(default)]
    pub lm_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::both()
    }
}

impl LossConfig {
    pub fn both() -> Self {
        LossConfig {
            use_lm: true,
            use_seg: true,
            lm_reduction: Reduction::Sum,
        }
    }

    pub fn lm_only() -> Self {
        LossConfig {
            use_seg: false,
            ..Self::both()
        }
    }

    pub fn seg_only() -> Self {
        LossConfig {
            use_lm: false,
            ..Self::both()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_lm && !self.use_seg {
            return Err(GmsError::Config(
                "at least one of the latent and segmentation losses must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Short tag used by the CLI and in reports.
    pub fn label(&self) -> &'static str {
        match (self.use_lm, self.use_seg) {
            (true, true) => "both",
            (true, false) => "lm",
            (false, true) => "seg",
            (false, false) => "none",
        }
    }
}

/// `||z_m - z_hat||^2` per sample (or its mean), averaged over the batch.
pub fn latent_matching_loss<T: Scalar>(
    g: &mut Graph<T>,
    z_m: Var,
    z_hat: Var,
    reduction: Reduction,
) -> Result<Var> {
    if g.shape(z_m) != g.shape(z_hat) {
        return Err(GmsError::dim(
            "latent matching operands",
            format!("{:?}", g.shape(z_m)),
            format!("{:?}", g.shape(z_hat)),
        ));
    }
    let diff = g.sub(z_m, z_hat)?;
    let sq = g.square(diff)?;
    let per_sample = g.sum_rows(sq)?;
    let per_sample = match reduction {
        Reduction::Sum => per_sample,
        Reduction::Mean => {
            let shape = g.shape(z_m);
            let inner = shape[1..].iter().product::<usize>();
            g.scale(per_sample, T::one() / T::lit(inner as f64))?
        }
    };
    g.mean(per_sample)
}

/// `1 - (2 sum(m * m_hat) + eps) / (sum m + sum m_hat + eps)` per sample,
/// averaged over the batch. `m` must be binary and `m_hat` within `[0, 1]`.
pub fn soft_dice_loss<T: Scalar>(g: &mut Graph<T>, m: Var, m_hat: Var) -> Result<Var> {
    if g.shape(m) != g.shape(m_hat) {
        return Err(GmsError::dim(
            "dice operands",
            format!("{:?}", g.shape(m)),
            format!("{:?}", g.shape(m_hat)),
        ));
    }
    if let Some(v) = g
        .value(m)
        .data()
        .iter()
        .find(|&&v| v != T::zero() && v != T::one())
    {
        return Err(GmsError::Validation(format!(
            "ground-truth mask must be binary, found {v}"
        )));
    }
    if let Some(v) = g
        .value(m_hat)
        .data()
        .iter()
        .find(|&&v| !(v >= T::zero() && v <= T::one()))
    {
        return Err(GmsError::Validation(format!(
            "predicted mask must lie in [0, 1], found {v}"
        )));
    }
    let eps = T::lit(DICE_EPS);
    let inter = g.mul(m, m_hat)?;
    let inter = g.sum_rows(inter)?;
    let num = g.scale(inter, T::lit(2.0))?;
    let num = g.shift(num, eps)?;
    let sm = g.sum_rows(m)?;
    let smh = g.sum_rows(m_hat)?;
    let den = g.add(sm, smh)?;
    let den = g.shift(den, eps)?;
    let ratio = g.div(num, den)?;
    let loss = g.scale(ratio, -T::one())?;
    let loss = g.shift(loss, T::one())?;
    g.mean(loss)
}

/// The individual terms and their unweighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub lm: Option<Var>,
    pub seg: Option<Var>,
}

/// Unweighted sum of the enabled terms. `m_hat` is only read when the
/// segmentation term is enabled.
pub fn compound_loss<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &LossConfig,
    z_m: Var,
    z_hat: Var,
    m: Var,
    m_hat: Option<Var>,
) -> Result<LossTerms> {
    cfg.validate()?;
    let lm = if cfg.use_lm {
        Some(latent_matching_loss(g, z_m, z_hat, cfg.lm_reduction)?)
    } else {
        None
    };
    let seg = if cfg.use_seg {
        let m_hat = m_hat
            .ok_or_else(|| GmsError::Usage("segmentation loss needs the decoded mask".into()))?;
        Some(soft_dice_loss(g, m, m_hat)?)
    } else {
        None
    };
    let total = match (lm, seg) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("validated above"),
    };
    Ok(LossTerms { total, lm, seg })
}
