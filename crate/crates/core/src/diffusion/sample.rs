//! Guided sampling and style transfer.

use ndarray::{Array4, Dim};
use serde::{Deserialize, Serialize};

use crate::control::{self, ConditionConfig};
use crate::diffusion::guidance::{cfg_combine, GuidanceConfig};
use crate::diffusion::schedule::{ddim_loop, gaussian_like, to_pixels, DdimConfig, NoiseSchedule};
use crate::dit::{Conditioning, TextCond};
use crate::encoder::PromptIds;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::{self, Execution};
use crate::raster::{Image, Video};
use crate::rng;
use crate::tensor::Mat;

pub const DEFAULT_ALPHA_MOTION: f64 = -0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub frames: usize,
    pub guidance: GuidanceConfig,
    pub alpha_motion: f64,
    pub sampler: DdimConfig,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            frames: 6,
            guidance: GuidanceConfig::default(),
            alpha_motion: DEFAULT_ALPHA_MOTION,
            sampler: DdimConfig::default(),
            seed: 0,
        }
    }
}

/// Style tokens for a reference image under a prompt.
pub fn style_tokens(model: &Model, style: &Image, prompt: PromptIds) -> Result<Mat> {
    let ex = model.extractor()?;
    let bundle = model.encoder.encode_image(style)?;
    let text = model.text.encode_text(prompt)?;
    Ok(ex.extract(&model.params, &bundle, &text)?.into_tokens())
}

/// Guided noise estimate: one, two or three branch evaluations depending
/// on which conditions are present, combined with [`cfg_combine`].
#[allow(clippy::too_many_arguments)]
pub fn guided_noise(
    model: &Model,
    x: &Video,
    t: usize,
    text: &ndarray::Array1<f64>,
    style: Option<&Mat>,
    control: Option<&Video>,
    opts: &SampleOptions,
    exec: Execution,
) -> Result<Video> {
    let branches: Vec<(TextCond<'_>, Option<&Mat>)> = match style {
        Some(s) => vec![(TextCond::Null, None), (TextCond::Embedding(text), None), (TextCond::Embedding(text), Some(s))],
        None => vec![(TextCond::Null, None), (TextCond::Embedding(text), None)],
    };
    let preds = par::map(exec, &branches, |&(tc, st)| {
        let cond = Conditioning { text: tc, style: st, alpha_motion: opts.alpha_motion };
        control::predict_with_control(&model.dit, &model.params, x, t, cond, control)
    });
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let ts = preds.get(2).unwrap_or(&preds[1]);
    cfg_combine(&preds[0], &preds[1], ts, opts.guidance)
}

/// Deterministic reverse process; output mapped to pixels in `[0, 1]`.
pub fn sample(
    model: &Model,
    schedule: &NoiseSchedule,
    prompt: PromptIds,
    style: Option<&Image>,
    control: Option<&Video>,
    opts: &SampleOptions,
    exec: Execution,
) -> Result<Video> {
    opts.guidance.validate()?;
    if opts.frames == 0 {
        return Err(Error::Invalid("at least one frame is required".into()));
    }
    let size = model.arch.image_size;
    let shape = (opts.frames, size, size, model.arch.dit.channels);
    if let Some(c) = control {
        if c.dim() != shape {
            return Err(Error::Shape(format!("control condition {:?} does not match output {shape:?}", c.dim())));
        }
    }
    let text = model.text.encode_text(prompt)?;
    let tokens = style.map(|s| style_tokens(model, s, prompt)).transpose()?;
    let mut r = rng::child_rng(opts.seed, 0x5A3F);
    let x_init: Array4<f64> = gaussian_like(Dim(shape), &mut r);
    let out = ddim_loop(schedule, opts.sampler, x_init, |x, t| {
        guided_noise(model, x, t, text.pooled(), tokens.as_ref(), control, opts, exec)
    })?;
    Ok(to_pixels(&out))
}

/// Restyles `content` after `style`, guided by the chosen content condition.
#[allow(clippy::too_many_arguments)]
pub fn style_transfer(
    model: &Model,
    schedule: &NoiseSchedule,
    content: &Video,
    style: &Image,
    prompt: PromptIds,
    condition: &ConditionConfig,
    opts: &SampleOptions,
    exec: Execution,
) -> Result<Video> {
    let (t, h, w, _) = content.dim();
    let size = model.arch.image_size;
    if h != size || w != size {
        return Err(Error::Shape(format!("content is {h}x{w}, model generates {size}x{size}")));
    }
    if h % condition.tile_factor != 0 || w % condition.tile_factor != 0 {
        return Err(Error::Shape(format!("tile factor {} does not divide {h}x{w}", condition.tile_factor)));
    }
    let cond = control::condition_video(content, condition)?;
    let opts = SampleOptions { frames: t, ..opts.clone() };
    sample(model, schedule, prompt, Some(style), Some(&cond), &opts, exec)
}
