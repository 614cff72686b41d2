//! Style-consistent image pairs from two-view denoising.
//!
//! At every reverse step the noisy image is seen through two views, each view
//! is denoised under its own prompt, the predictions are mapped back and
//! averaged. The finished image and its rearrangement under the second view
//! form a pair with identical pixel multisets.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, StyleFamily};
use crate::diffusion::schedule::{self, DdimConfig, NoiseSchedule};
use crate::dit::{Conditioning, Dit, TextCond};
use crate::encoder::{PromptIds, TextEncoder};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::raster::{self, Image};
use crate::rng;
use crate::tensor::ParamStore;
use crate::view::{ViewKind, ViewSpec, ViewTransform};

pub const DEFAULT_STYLES: &str = include_str!("../data/styles.txt");
pub const DEFAULT_OBJECTS: &str = include_str!("../data/objects.txt");

/// Non-empty trimmed lines of a list file.
pub fn parse_list(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

pub fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_list(&text))
}

pub fn prompt_text(style: &str, object: &str) -> String {
    format!("a {style} of {object}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub style: String,
    pub object_a: String,
    pub object_b: String,
    pub prompt_a: String,
    pub prompt_b: String,
    pub style_id: u32,
    pub object_a_id: u32,
    pub object_b_id: u32,
}

impl PromptPair {
    pub fn ids_a(&self) -> PromptIds {
        PromptIds { style: self.style_id, object: self.object_a_id }
    }

    pub fn ids_b(&self) -> PromptIds {
        PromptIds { style: self.style_id, object: self.object_b_id }
    }
}

/// One style uniformly, two distinct objects without replacement.
pub fn sample_prompt_pair<R: Rng>(styles: &[String], objects: &[String], r: &mut R) -> Result<PromptPair> {
    if styles.is_empty() {
        return Err(Error::Invalid("style list is empty".into()));
    }
    if objects.len() < 2 {
        return Err(Error::Invalid(format!("need at least two objects, got {}", objects.len())));
    }
    let s = r.random_range(0..styles.len());
    let picked = rand::seq::index::sample(r, objects.len(), 2);
    let (a, b) = (picked.index(0), picked.index(1));
    Ok(PromptPair {
        style: styles[s].clone(),
        object_a: objects[a].clone(),
        object_b: objects[b].clone(),
        prompt_a: prompt_text(&styles[s], &objects[a]),
        prompt_b: prompt_text(&styles[s], &objects[b]),
        style_id: s as u32,
        object_a_id: a as u32,
        object_b_id: b as u32,
    })
}

/// `ε̂(x, t, prompt)` on `H×W×3` images.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x: &Image, t: usize, prompt: PromptIds) -> Result<Image>;
}

/// `ε_t = ½·[v1⁻¹(ε̂(v1(x_t), t, p1)) + v2⁻¹(ε̂(v2(x_t), t, p2))]`.
pub fn illusion_noise<P: NoisePredictor + ?Sized>(
    x_t: &Image,
    t: usize,
    denoiser: &P,
    prompts: (PromptIds, PromptIds),
    views: (&ViewTransform, &ViewTransform),
) -> Result<Image> {
    let mut acc = Array3::zeros(x_t.raw_dim());
    for (p, v) in [(prompts.0, views.0), (prompts.1, views.1)] {
        let eps = denoiser.predict_noise(&v.apply(x_t)?, t, p)?;
        if eps.dim() != x_t.dim() {
            return Err(Error::Shape(format!("denoiser returned {:?} for input {:?}", eps.dim(), x_t.dim())));
        }
        acc += &v.invert().apply(&eps)?;
    }
    Ok(acc * 0.5)
}

/// Full reverse loop with two-view noise (`v1` = identity); returns
/// `(image_a, apply(v2, image_a))`, with `image_a` mapped back to pixels.
pub fn generate_pair<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    schedule: &NoiseSchedule,
    sampler: DdimConfig,
    pair: &PromptPair,
    v2: &ViewTransform,
    seed: u64,
) -> Result<(Image, Image)> {
    let (h, w) = (v2.height(), v2.width());
    let v1 = crate::view::make_view(ViewKind::Identity, h, w)?;
    let mut r = rng::child_rng(seed, 0x1A17);
    let x_init = schedule::gaussian_like(ndarray::Dim([h, w, 3]), &mut r);
    let x0 = schedule::ddim_loop(schedule, sampler, x_init, |x, t| {
        illusion_noise(x, t, denoiser, (pair.ids_a(), pair.ids_b()), (&v1, v2))
    })?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("illusion sample".into()));
    }
    let a = schedule::to_pixels(&x0);
    let b = v2.apply(&a)?;
    Ok((a, b))
}

/// `ε̂(x, p) = m_p ⊙ x`, independent of `t`.
#[derive(Clone, Debug)]
pub struct LinearMaskDenoiser {
    pub masks: Vec<Image>,
    pub n_objects: usize,
}

impl LinearMaskDenoiser {
    pub fn seeded(n_styles: usize, n_objects: usize, h: usize, w: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let masks = (0..n_styles * n_objects)
            .map(|_| Array3::from_shape_simple_fn((h, w, 3), || r.random_range(-1.0..1.0)))
            .collect();
        Self { masks, n_objects }
    }

    pub fn mask(&self, p: PromptIds) -> Result<&Image> {
        self.masks
            .get(p.style as usize * self.n_objects + p.object as usize)
            .filter(|_| (p.object as usize) < self.n_objects)
            .ok_or_else(|| Error::Invalid(format!("no mask for prompt {p:?}")))
    }
}

impl NoisePredictor for LinearMaskDenoiser {
    fn predict_noise(&self, x: &Image, _t: usize, prompt: PromptIds) -> Result<Image> {
        let m = self.mask(prompt)?;
        if m.dim() != x.dim() {
            return Err(Error::Shape("mask and input differ in shape".into()));
        }
        Ok(m * x)
    }
}

/// Posterior-mean noise predictor for an independent per-pixel Gaussian
/// fitted to procedural renders of each (style, object) prompt, in the
/// `[-1, 1]` diffusion space:
/// `ε̂ = √(1−ᾱ)·(x − √ᾱ·μ) / (ᾱ·σ² + 1−ᾱ)`.
#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    schedule: NoiseSchedule,
    n_objects: usize,
    means: Vec<Image>,
    vars: Vec<Image>,
}

impl GaussianDenoiser {
    pub fn fit(
        schedule: NoiseSchedule,
        n_styles: usize,
        n_objects: usize,
        size: usize,
        corpus_seed: u64,
        samples: usize,
        exec: Execution,
    ) -> Result<Self> {
        if n_styles == 0 || n_objects == 0 || samples == 0 {
            return Err(Error::Invalid("Gaussian prior needs styles, objects and samples".into()));
        }
        let stats = par::map_indexed(exec, n_styles * n_objects, |k| {
            let (s, o) = (k / n_objects, k % n_objects);
            let fam = StyleFamily::new(s as u32, corpus_seed);
            let renders: Vec<Image> = (0..samples)
                .map(|i| {
                    let seed = rng::mix(corpus_seed, (k * samples + i) as u64);
                    schedule::to_model_space(&corpus::render(&fam, o as u32, seed, size, size))
                })
                .collect();
            let stack = Array4::from_shape_fn((samples, size, size, 3), |(i, y, x, c)| renders[i][[y, x, c]]);
            let mean = stack.mean_axis(Axis(0)).unwrap();
            let var = stack.var_axis(Axis(0), 0.0).mapv(|v| v.max(1e-4));
            (mean, var)
        });
        let (means, vars) = stats.into_iter().unzip();
        Ok(Self { schedule, n_objects, means, vars })
    }

    pub fn mean(&self, p: PromptIds) -> Result<&Image> {
        self.index(p).map(|i| &self.means[i])
    }

    fn index(&self, p: PromptIds) -> Result<usize> {
        let i = p.style as usize * self.n_objects + p.object as usize;
        if (p.object as usize) < self.n_objects && i < self.means.len() {
            Ok(i)
        } else {
            Err(Error::Invalid(format!("prompt {p:?} outside the fitted vocabulary")))
        }
    }
}

impl NoisePredictor for GaussianDenoiser {
    fn predict_noise(&self, x: &Image, t: usize, prompt: PromptIds) -> Result<Image> {
        let i = self.index(prompt)?;
        let (mu, var) = (&self.means[i], &self.vars[i]);
        if mu.dim() != x.dim() {
            return Err(Error::Shape(format!("prior fitted at {:?}, input is {:?}", mu.dim(), x.dim())));
        }
        let a = self.schedule.alpha_bar(t)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let mut out = x.clone();
        ndarray::Zip::from(&mut out).and(mu).and(var).for_each(|o, &m, &v| {
            *o = sn * (*o - sa * m) / (a * v + 1.0 - a);
        });
        Ok(out)
    }
}

/// A trained backbone used as a single-frame text-conditioned denoiser.
pub struct DitDenoiser<'a> {
    pub dit: &'a Dit,
    pub params: &'a ParamStore,
    pub text: &'a TextEncoder,
}

impl NoisePredictor for DitDenoiser<'_> {
    fn predict_noise(&self, x: &Image, t: usize, prompt: PromptIds) -> Result<Image> {
        let emb = self.text.encode_text(prompt)?;
        let video = x.clone().insert_axis(Axis(0));
        let cond = Conditioning { text: TextCond::Embedding(emb.pooled()), style: None, alpha_motion: 0.0 };
        let eps = self.dit.predict(self.params, &video, t, cond, None)?;
        Ok(eps.index_axis_move(Axis(0), 0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub view: ViewKind,
    /// Jigsaw piece grid; ignored by the other view kinds.
    pub piece_grid: (usize, usize),
    pub sampler: DdimConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { image_size: 32, view: ViewKind::Jigsaw, piece_grid: (8, 8), sampler: DdimConfig { steps: 20, clip_x0: true } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: u64,
    pub prompts: PromptPair,
    pub seed: u64,
    pub view: ViewSpec,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Prompt pair and second view for pair `pair_id`, both derived from its seed.
pub fn pair_plan(
    pair_id: u64,
    master_seed: u64,
    styles: &[String],
    objects: &[String],
    config: &DatasetConfig,
) -> Result<(u64, PromptPair, ViewSpec)> {
    let seed = rng::mix(master_seed, pair_id);
    let pair = sample_prompt_pair(styles, objects, &mut rng::child_rng(seed, 1))?;
    let size = config.image_size;
    let view = match config.view {
        ViewKind::Jigsaw => ViewSpec::jigsaw(size, size, config.piece_grid, rng::mix(seed, 2)),
        kind => ViewSpec::new(kind, size, size),
    };
    Ok((seed, pair, view))
}

/// Generates one pair, quantised to the 8-bit grid used on disk.
pub fn render_pair<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    schedule: &NoiseSchedule,
    config: &DatasetConfig,
    pair: &PromptPair,
    view: &ViewSpec,
    seed: u64,
) -> Result<(Image, Image)> {
    let v2 = view.build()?;
    let (a, _) = generate_pair(denoiser, schedule, config.sampler, pair, &v2, seed)?;
    let a = raster::quantize_image(&a);
    let b = v2.apply(&a)?;
    Ok((a, b))
}

/// Writes `n_pairs` pairs and their manifest under `out_dir`; returns the
/// manifest path. Pairs are generated independently and written in id order.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset<P: NoisePredictor + ?Sized>(
    n_pairs: u64,
    styles: &[String],
    objects: &[String],
    denoiser: &P,
    schedule: &NoiseSchedule,
    config: &DatasetConfig,
    master_seed: u64,
    out_dir: &Path,
    exec: Execution,
) -> Result<PathBuf> {
    let manifest = out_dir.join(MANIFEST_NAME);
    if manifest.exists() {
        return Err(Error::Invalid(format!("{} already exists", manifest.display())));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records = par::map_indexed(exec, n_pairs as usize, |i| -> Result<PairRecord> {
        let pair_id = i as u64;
        let (seed, prompts, view) = pair_plan(pair_id, master_seed, styles, objects, config)?;
        let (a, b) = render_pair(denoiser, schedule, config, &prompts, &view, seed)?;
        let rel_a = PathBuf::from("images").join(format!("{pair_id:06}_a.png"));
        let rel_b = PathBuf::from("images").join(format!("{pair_id:06}_b.png"));
        raster::save_png(&a, &out_dir.join(&rel_a))?;
        raster::save_png(&b, &out_dir.join(&rel_b))?;
        Ok(PairRecord { pair_id, prompts, seed, view, image_a: rel_a, image_b: rel_b })
    });
    let mut records = records.into_iter().collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.pair_id);
    let mut file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for r in &records {
        let line = serde_json::to_string(r)?;
        writeln!(file, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>> {
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

/// Loads both images of a record relative to the manifest's directory.
pub fn load_pair(manifest_dir: &Path, record: &PairRecord) -> Result<(Image, Image)> {
    Ok((raster::load_png(&manifest_dir.join(&record.image_a))?, raster::load_png(&manifest_dir.join(&record.image_b))?))
}

/// Sorted RGB triples, for multiset comparisons.
pub fn pixel_multiset(img: &Image) -> Vec<[u64; 3]> {
    let mut px: Vec<[u64; 3]> =
        img.lanes(Axis(2)).into_iter().map(|l| [l[0].to_bits(), l[1].to_bits(), l[2].to_bits()]).collect();
    px.sort_unstable();
    px
}
