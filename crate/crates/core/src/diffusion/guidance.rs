use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separate guidance scales for the text delta and the style delta.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub s_text: f64,
    pub s_style: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { s_text: 12.5, s_style: 6.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_text.is_finite() && self.s_style.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("guidance scales must be finite".into()))
        }
    }
}

/// `ε_u + s_text·(ε_t − ε_u) + s_style·(ε_ts − ε_t)`.
pub fn cfg_combine<D: Dimension>(
    uncond: &Array<f64, D>,
    text: &Array<f64, D>,
    text_style: &Array<f64, D>,
    g: GuidanceConfig,
) -> Result<Array<f64, D>> {
    if uncond.shape() != text.shape() || text.shape() != text_style.shape() {
        return Err(Error::Shape("guidance branches differ in shape".into()));
    }
    // Expanded around the fully conditioned branch: identical algebra, and
    // unit scales return `ε_ts` without rounding.
    let (a, b) = (g.s_text - 1.0, g.s_style - 1.0);
    Ok(Zip::from(uncond).and(text).and(text_style).map_collect(|&u, &t, &ts| ts + a * (t - u) + b * (ts - t)))
}
