//! ε-prediction training, one parameter group per stage.
//!
//! | stage   | data                          | trainable          |
//! |---------|-------------------------------|--------------------|
//! | base    | moving clips, text dropout    | `dit.`             |
//! | motion  | still clips, `α_motion = 1`   | `motion.`          |
//! | style   | single frames + own style     | `sca.`, `tex.`     |
//! | control | single frames + gray tile     | `ctrl.`            |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::{self, ConditionConfig, ControlNet};
use crate::corpus::{self, StyleFamily};
use crate::diffusion::schedule::{gaussian_like, to_model_space, NoiseSchedule};
use crate::dit::TextCond;
use crate::encoder::PromptIds;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::{self, Execution};
use crate::raster::{self, Image, Video};
use crate::rng;
use crate::tensor::{Adam, Grads, Graph, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Motion,
    Style,
    Control,
}

impl Stage {
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Base => &["dit."],
            Stage::Motion => &["motion."],
            Stage::Style => &["sca.", "tex."],
            Stage::Control => &["ctrl."],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Motion => "motion",
            Stage::Style => "style",
            Stage::Control => "control",
        }
    }
}

pub fn trainable_ids(params: &ParamStore, stage: Stage) -> Vec<ParamId> {
    stage.prefixes().iter().flat_map(|p| params.ids_with_prefix(p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Clip length for the base and motion stages.
    pub frames: usize,
    pub text_dropout: f64,
    pub style_dropout: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, lr: 1e-3, frames: 6, text_dropout: 0.1, style_dropout: 0.1, seed: 0 }
    }
}

/// Bernoulli draw used for conditioning dropout.
pub fn dropped<R: Rng>(r: &mut R, p: f64) -> bool {
    r.random::<f64>() < p
}

/// One training example with its noise and timestep already drawn.
#[derive(Clone, Debug)]
pub struct TrainItem {
    /// Clean clip in pixel space.
    pub x0: Video,
    pub t: usize,
    pub noise: Video,
    pub prompt: PromptIds,
    /// Text condition replaced by the null token.
    pub drop_text: bool,
    /// Reference image for the style tokens; `None` means null tokens.
    pub style_image: Option<Image>,
    /// Control condition (three channels, same shape as `x0`).
    pub control: Option<Video>,
    pub alpha_motion: f64,
}

/// Draws a batch for `stage` from the procedural corpus.
pub fn make_batch<R: Rng>(model: &Model, schedule: &NoiseSchedule, stage: Stage, cfg: &StageConfig, r: &mut R) -> Vec<TrainItem> {
    let arch = &model.arch;
    let size = arch.image_size;
    (0..cfg.batch_size)
        .map(|_| {
            let ids = PromptIds { style: r.random_range(0..arch.n_styles) as u32, object: r.random_range(0..arch.n_objects) as u32 };
            let fam = StyleFamily::new(ids.style, arch.corpus_seed);
            let seed: u64 = r.random();
            let x0 = match stage {
                Stage::Base => corpus::render_video(&fam, ids.object, seed, cfg.frames, size, size),
                Stage::Motion => corpus::still_video(&corpus::render(&fam, ids.object, seed, size, size), cfg.frames),
                Stage::Style | Stage::Control => corpus::still_video(&corpus::render(&fam, ids.object, seed, size, size), 1),
            };
            let t = r.random_range(0..schedule.len());
            let noise = gaussian_like(x0.raw_dim(), r);
            let drop_text = dropped(r, cfg.text_dropout);
            let style_image = match stage {
                Stage::Style | Stage::Control => (!dropped(r, cfg.style_dropout)).then(|| raster::frame(&x0, 0)),
                _ => None,
            };
            let control = (stage == Stage::Control)
                .then(|| control::condition_video(&x0, &ConditionConfig::default()).expect("corpus frames tile evenly"));
            let alpha_motion = if stage == Stage::Motion { 1.0 } else { 0.0 };
            TrainItem { x0, t, noise, prompt: ids, drop_text, style_image, control, alpha_motion }
        })
        .collect()
}

/// Loss and gradients of one example.
pub fn item_loss(model: &Model, schedule: &NoiseSchedule, item: &TrainItem) -> Result<(f64, Grads)> {
    let params = &model.params;
    let dit = &model.dit;
    let x_t = schedule.q_sample(&to_model_space(&item.x0), item.t, &item.noise)?;
    let mut g = Graph::new();
    let tvec = dit.time_vector(&mut g, params, item.t);
    let emb = model.text.encode_text(item.prompt)?;
    let text = if item.drop_text {
        dit.text_token(&mut g, params, TextCond::Null)?
    } else {
        dit.text_token(&mut g, params, TextCond::Embedding(emb.pooled()))?
    };
    let style = match &item.style_image {
        Some(img) => {
            let ex = model.extractor()?;
            let bundle = model.encoder.encode_image(img)?;
            // Patch selection uses the prompt even when the text condition is dropped.
            ex.extract_graph(&mut g, params, &bundle, &emb)?
        }
        None => dit.style_input(&mut g, None)?,
    };
    let residuals = match &item.control {
        Some(c) => Some(ControlNet::new(dit)?.forward(&mut g, params, &x_t, c, tvec, text)?),
        None => None,
    };
    let (pred, grid) = dit.forward(&mut g, params, &x_t, tvec, text, style, item.alpha_motion, residuals.as_deref())?;
    let (target, _) = crate::dit::patchify(&item.noise, dit.config.patch)?;
    debug_assert_eq!(grid.tokens(), target.nrows());
    let tv = g.input(target);
    let diff = g.sub(pred, tv);
    let sq = g.square(diff);
    let loss = g.mean(sq);
    Ok((g.scalar(loss), g.backward(loss)))
}

/// Mean loss over the batch and one optimizer step on the trainable set.
pub fn training_step(
    model: &mut Model,
    schedule: &NoiseSchedule,
    batch: &[TrainItem],
    opt: &mut Adam,
    exec: Execution,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let results = par::map(exec, batch, |item| item_loss(model, schedule, item));
    let mut grads = Grads::default();
    let mut loss = 0.0;
    for r in results {
        let (l, gr) = r?;
        loss += l;
        grads.accumulate(&gr);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    loss *= inv;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    opt.step(&mut model.params, &grads);
    Ok(loss)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub losses: Vec<f64>,
}

impl StageLog {
    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Creates the stage's parameters if needed and checks its prerequisites.
pub fn prepare_stage(model: &mut Model, stage: Stage, seed: u64) -> Result<()> {
    match stage {
        Stage::Base => {}
        Stage::Motion => {
            if !model.params.contains("motion.b0.q.down") {
                model.dit.init_motion(seed, &mut model.params);
            }
        }
        Stage::Style => {
            model.extractor()?;
        }
        Stage::Control => {
            model.extractor()?;
            if !model.params.contains("ctrl.embed.w") {
                ControlNet::new(&model.dit)?.init(&mut model.params, seed)?;
            }
        }
    }
    Ok(())
}

/// Runs `cfg.steps` optimizer steps; everything outside the stage stays untouched.
pub fn train_stage(
    model: &mut Model,
    schedule: &NoiseSchedule,
    stage: Stage,
    cfg: &StageConfig,
    exec: Execution,
    mut on_step: impl FnMut(usize, f64),
) -> Result<StageLog> {
    prepare_stage(model, stage, cfg.seed)?;
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut opt = Adam::new(cfg.lr, trainable_ids(&model.params, stage));
    let mut r = rng::child_rng(cfg.seed, 0x57A6E);
    let mut log = StageLog::default();
    for step in 0..cfg.steps {
        let batch = make_batch(model, schedule, stage, cfg, &mut r);
        let loss = training_step(model, schedule, &batch, &mut opt, exec)?;
        on_step(step, loss);
        log.losses.push(loss);
    }
    Ok(log)
}
