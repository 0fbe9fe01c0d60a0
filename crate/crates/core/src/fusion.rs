//! Composed-query construction.
//!
//! Two weighted interpolations in the shared embedding space:
//!
//! * `q_vlm = norm((1 − α)·norm(img) + α·norm(text))`
//! * `q = norm((1 − β)·q_vlm + β·norm(caption))`
//!
//! Every input is unit-normalized before weighting, so α and β act as pure
//! interpolation weights regardless of encoder output scale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{Embedding, StoreError};

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_BETA: f64 = 0.6;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("beta {0} outside [0, 1]")]
    BetaOutOfRange(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero vector in fusion input or output")]
    ZeroVector,
}

impl From<StoreError> for FusionError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::DimMismatch { expected, actual } => FusionError::DimMismatch(expected, actual),
            _ => FusionError::ZeroVector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

impl FusionParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, FusionError> {
        let p = Self { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FusionError::AlphaOutOfRange(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(FusionError::BetaOutOfRange(self.beta));
        }
        Ok(())
    }
}

/// The final query vector for one query, with its intermediate stage.
#[derive(Debug, Clone)]
pub struct ComposedQuery {
    pub query_id: String,
    pub q_vlm: Embedding,
    pub q_final: Embedding,
    pub params: FusionParams,
    /// False when no caption embedding was available and β was forced to 0.
    pub caption_used: bool,
}

impl ComposedQuery {
    /// Composes a query from raw encoder outputs. A missing caption degrades
    /// to `q_final = q_vlm`.
    pub fn compose(
        query_id: impl Into<String>,
        ref_img: &Embedding,
        mod_text: &Embedding,
        caption: Option<&Embedding>,
        params: FusionParams,
    ) -> Result<Self, FusionError> {
        params.validate()?;
        let q_vlm = fuse_vlm(ref_img, mod_text, params.alpha)?;
        let q_final = match caption {
            Some(c) => fuse_final(&q_vlm, c, params.beta)?,
            None => q_vlm.clone(),
        };
        Ok(Self {
            query_id: query_id.into(),
            q_vlm,
            q_final,
            params,
            caption_used: caption.is_some(),
        })
    }
}

fn unit(e: &Embedding) -> Result<Vec<f64>, FusionError> {
    let n = e.norm();
    if n == 0.0 {
        return Err(FusionError::ZeroVector);
    }
    Ok(e.as_slice().iter().map(|&x| f64::from(x) / n).collect())
}

fn blend(a: &[f64], b: &[f64], w: f64) -> Result<Embedding, FusionError> {
    let mixed: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect();
    let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
    // exact cancellation of antipodal inputs leaves only rounding noise
    if n < 1e-9 {
        return Err(FusionError::ZeroVector);
    }
    Ok(Embedding::new(mixed.iter().map(|x| (x / n) as f32).collect())?)
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<(), FusionError> {
    if a.dim() != b.dim() {
        return Err(FusionError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// Image/text fusion: `norm((1 − α)·norm(img) + α·norm(text))`.
pub fn fuse_vlm(ref_img: &Embedding, mod_text: &Embedding, alpha: f64) -> Result<Embedding, FusionError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FusionError::AlphaOutOfRange(alpha));
    }
    check_dims(ref_img, mod_text)?;
    blend(&unit(ref_img)?, &unit(mod_text)?, alpha)
}

/// Caption augmentation: `norm((1 − β)·q_vlm + β·norm(caption))`.
///
/// `q_vlm` is renormalized as well, which is a no-op for the output of
/// [`fuse_vlm`].
pub fn fuse_final(q_vlm: &Embedding, caption: &Embedding, beta: f64) -> Result<Embedding, FusionError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(FusionError::BetaOutOfRange(beta));
    }
    check_dims(q_vlm, caption)?;
    blend(&unit(q_vlm)?, &unit(caption)?, beta)
}
