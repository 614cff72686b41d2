//! Cheap stand-ins for the usual video stylization scores. They reproduce
//! trends between settings of this toolkit; the numbers are not comparable
//! with published tables, which is why every report carries `proxy: true`.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{ImageEncoder, PromptIds, TextEncoder};
use crate::error::{Error, Result};
use crate::extractor::{cosine, Projector};
use crate::par::{self, Execution};
use crate::raster::{self, Image, Video};

/// Mean over frames of the cosine between projected global embeddings of
/// each frame and of the reference.
pub fn style_similarity(frames: &Video, reference: &Image, encoder: &ImageEncoder, projector: &Projector) -> Result<f64> {
    let r = projector.global_project(&encoder.encode_image(reference)?.global)?;
    mean_over_frames(frames, |f| {
        let g = projector.global_project(&encoder.encode_image(f)?.global)?;
        Ok(cosine(g.view(), r.view()))
    })
}

/// Mean absolute first temporal difference.
pub fn dynamic_degree(video: &Video) -> Result<f64> {
    let t = video.len_of(Axis(0));
    if t < 2 {
        return Err(Error::Invalid(format!("dynamic degree needs at least 2 frames, got {t}")));
    }
    let a = video.slice_axis(Axis(0), (0..t - 1).into());
    let b = video.slice_axis(Axis(0), (1..t).into());
    Ok((&b - &a).mapv(f64::abs).mean().unwrap_or(0.0))
}

/// `1 / (1 + mean |x_{t+1} − 2x_t + x_{t−1}|)`.
pub fn motion_smoothness(video: &Video) -> Result<f64> {
    let t = video.len_of(Axis(0));
    if t < 3 {
        return Err(Error::Invalid(format!("motion smoothness needs at least 3 frames, got {t}")));
    }
    let a = video.slice_axis(Axis(0), (0..t - 2).into());
    let b = video.slice_axis(Axis(0), (1..t - 1).into());
    let c = video.slice_axis(Axis(0), (2..t).into());
    let second = &c - &(&b * 2.0) + a;
    Ok(1.0 / (1.0 + second.mapv(f64::abs).mean().unwrap_or(0.0)))
}

/// Mean over frames of the cosine between the pooled (mean patch) frame
/// embedding and the prompt embedding.
pub fn text_alignment(frames: &Video, prompt: PromptIds, encoder: &ImageEncoder, text: &TextEncoder) -> Result<f64> {
    let p = text.encode_text(prompt)?;
    mean_over_frames(frames, |f| {
        let pooled: Array1<f64> = encoder.encode_image(f)?.patches.mean_axis(Axis(0)).expect("encoder grid is nonempty");
        Ok(cosine(pooled.view(), p.pooled().view()))
    })
}

fn mean_over_frames(frames: &Video, f: impl Fn(&Image) -> Result<f64>) -> Result<f64> {
    let n = frames.len_of(Axis(0));
    if n == 0 {
        return Err(Error::Invalid("no frames to score".into()));
    }
    let mut acc = 0.0;
    for t in 0..n {
        acc += f(&raster::frame(frames, t))?;
    }
    Ok(acc / n as f64)
}

/// One scored clip. Scores that do not apply (no reference, too few frames)
/// are `None` and left out of the aggregate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub id: String,
    pub style_similarity: Option<f64>,
    pub text_alignment: Option<f64>,
    pub dynamic_degree: Option<f64>,
    pub motion_smoothness: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub style_similarity: Option<f64>,
    pub text_alignment: Option<f64>,
    pub dynamic_degree: Option<f64>,
    pub motion_smoothness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub proxy: bool,
    pub items: Vec<ItemScores>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn from_items(items: Vec<ItemScores>) -> Result<Self> {
        for it in &items {
            let vals = [it.style_similarity, it.text_alignment, it.dynamic_degree, it.motion_smoothness];
            if vals.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("score of item {}", it.id)));
            }
        }
        let mean = |f: fn(&ItemScores) -> Option<f64>| {
            let v: Vec<f64> = items.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let aggregate = Aggregate {
            style_similarity: mean(|i| i.style_similarity),
            text_alignment: mean(|i| i.text_alignment),
            dynamic_degree: mean(|i| i.dynamic_degree),
            motion_smoothness: mean(|i| i.motion_smoothness),
        };
        Ok(Self { proxy: true, items, aggregate })
    }
}

/// What to score for one clip.
pub struct EvalInput {
    pub id: String,
    pub video: Video,
    pub prompt: PromptIds,
    pub style: Option<Image>,
}

pub struct Scorer<'a> {
    pub encoder: &'a ImageEncoder,
    pub text: &'a TextEncoder,
    pub projector: Option<&'a Projector>,
}

impl Scorer<'_> {
    pub fn score(&self, input: &EvalInput) -> Result<ItemScores> {
        let frames = input.video.len_of(Axis(0));
        let style_similarity = match (&input.style, self.projector) {
            (Some(s), Some(p)) => Some(style_similarity(&input.video, s, self.encoder, p)?),
            (Some(_), None) => return Err(Error::Invalid("style similarity needs a trained projector".into())),
            (None, _) => None,
        };
        Ok(ItemScores {
            id: input.id.clone(),
            style_similarity,
            text_alignment: Some(text_alignment(&input.video, input.prompt, self.encoder, self.text)?),
            dynamic_degree: (frames >= 2).then(|| dynamic_degree(&input.video)).transpose()?,
            motion_smoothness: (frames >= 3).then(|| motion_smoothness(&input.video)).transpose()?,
        })
    }

    pub fn evaluate(&self, inputs: &[EvalInput], exec: Execution) -> Result<EvalReport> {
        let items = par::map(exec, inputs, |i| self.score(i)).into_iter().collect::<Result<Vec<_>>>()?;
        EvalReport::from_items(items)
    }
}

/// One line of an evaluation manifest (JSON Lines). Paths are relative to
/// the manifest's directory; `video` is a directory of numbered frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalEntry {
    pub id: String,
    pub video: PathBuf,
    pub style: u32,
    pub object: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_image: Option<PathBuf>,
}

pub fn read_eval_manifest(path: &Path) -> Result<Vec<EvalEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

impl EvalEntry {
    pub fn load(&self, base: &Path) -> Result<EvalInput> {
        Ok(EvalInput {
            id: self.id.clone(),
            video: raster::load_video(&base.join(&self.video))?,
            prompt: PromptIds { style: self.style, object: self.object },
            style: self.style_image.as_ref().map(|p| raster::load_png(&base.join(p))).transpose()?,
        })
    }
}
