//! Content guidance for style transfer.
//!
//! The condition (grayscale tile by default) is patchified alongside `x_t`,
//! embedded, and run through `B/2` plain blocks copied from the base network.
//! Each block output passes a zero-initialised projection and is added to the
//! output of backbone block `2i`.

use image::{GrayImage, Luma};
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::dit::{patchify, positional_encoding, BlockOptions, Conditioning, Dit, TemporalMode};
use crate::error::{Error, Result};
use crate::raster::{self, Image, Video};
use crate::rng;
use crate::tensor::params::{fan_in, zeros};
use crate::tensor::{Graph, ParamStore, Var};

pub const CTRL_PREFIX: &str = "ctrl.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    #[default]
    GrayTile,
    RgbTile,
    Canny,
}

impl std::str::FromStr for ConditionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray_tile" => Ok(Self::GrayTile),
            "rgb_tile" => Ok(Self::RgbTile),
            "canny" => Ok(Self::Canny),
            other => Err(Error::Config(format!("unknown condition {other:?}; expected gray_tile, rgb_tile or canny"))),
        }
    }
}

/// Rec.601 luma, single channel.
pub fn to_gray(img: &Image) -> Result<Image> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    Ok(Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
        0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]]
    }))
}

/// `s×s` average pooling followed by nearest upsampling, per channel.
pub fn tile_blur(img: &Image, s: usize) -> Result<Image> {
    let (h, w, c) = img.dim();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!("tile factor {s} does not divide {h}x{w}")));
    }
    if s == 1 {
        return Ok(img.clone());
    }
    let mut out = Array3::zeros((h, w, c));
    let area = (s * s) as f64;
    for by in 0..h / s {
        for bx in 0..w / s {
            for ch in 0..c {
                let block = img.slice(ndarray::s![by * s..(by + 1) * s, bx * s..(bx + 1) * s, ch]);
                let first = block[[0, 0]];
                // A constant block keeps its value bit-for-bit, so a second pass is a no-op.
                let m = if block.iter().all(|v| *v == first) { first } else { block.sum() / area };
                for y in by * s..(by + 1) * s {
                    for x in bx * s..(bx + 1) * s {
                        out[[y, x, ch]] = m;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Two-threshold edge map (thresholds on the 0–255 gradient scale).
pub fn canny(img: &Image, low: f32, high: f32) -> Result<Image> {
    let gray = to_gray(img)?;
    let (h, w, _) = gray.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([raster::quantize(gray[[y as usize, x as usize, 0]])]));
    let edges = imageproc::edges::canny(&buf, low, high);
    Ok(Array3::from_shape_fn((h, w, 1), |(y, x, _)| f64::from(edges.get_pixel(x as u32, y as u32)[0]) / 255.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionConfig {
    pub kind: ConditionKind,
    pub tile_factor: usize,
    pub canny_low: f32,
    pub canny_high: f32,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self { kind: ConditionKind::GrayTile, tile_factor: 4, canny_low: 50.0, canny_high: 100.0 }
    }
}

/// One-channel (or RGB for `rgb_tile`) condition for a single frame.
pub fn condition_frame(frame: &Image, cfg: &ConditionConfig) -> Result<Image> {
    match cfg.kind {
        ConditionKind::GrayTile => tile_blur(&to_gray(frame)?, cfg.tile_factor),
        ConditionKind::RgbTile => tile_blur(frame, cfg.tile_factor),
        ConditionKind::Canny => canny(frame, cfg.canny_low, cfg.canny_high),
    }
}

/// Per-frame condition, replicated to three channels for the control input.
pub fn condition_video(content: &Video, cfg: &ConditionConfig) -> Result<Video> {
    let (t, h, w, _) = content.dim();
    let mut out = Array4::zeros((t, h, w, 3));
    for f in 0..t {
        let c = condition_frame(&raster::frame(content, f), cfg)?;
        let c = if c.dim().2 == 1 { raster::gray_to_rgb(&c) } else { c };
        out.index_axis_mut(Axis(0), f).assign(&c);
    }
    Ok(out)
}

/// Control branch bound to a backbone.
#[derive(Clone, Debug)]
pub struct ControlNet<'a> {
    pub dit: &'a Dit,
}

impl<'a> ControlNet<'a> {
    pub fn new(dit: &'a Dit) -> Result<Self> {
        let b = dit.config.blocks;
        if !b.is_multiple_of(2) {
            return Err(Error::Invalid(format!("control branch needs an even block count, backbone has {b}")));
        }
        Ok(Self { dit })
    }

    pub fn depth(&self) -> usize {
        self.dit.config.blocks / 2
    }

    /// Copies the first `B/2` base blocks and the patch embedding (condition
    /// rows fresh), with zero-initialised output projections.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let cfg = &self.dit.config;
        let (c, pd) = (cfg.width, cfg.patch_dim());
        let mut r = rng::child_rng(seed, 0xC791);
        let base_w = store.require("dit.embed.w")?.clone();
        let base_b = store.require("dit.embed.b")?.clone();
        let cond_w = fan_in(&mut r, pd, c) * 0.5;
        store.insert("ctrl.embed.w", ndarray::concatenate![Axis(0), base_w, cond_w]);
        store.insert("ctrl.embed.b", base_b);
        for j in 0..self.depth() {
            let src = format!("dit.b{j}.");
            let copies: Vec<(String, _)> = store
                .iter()
                .filter(|(_, n, _)| n.starts_with(&src))
                .map(|(_, n, v)| (format!("ctrl.b{j}.{}", &n[src.len()..]), v.clone()))
                .collect();
            for (n, v) in copies {
                store.insert(n, v);
            }
            store.insert(format!("ctrl.zero{j}.w"), zeros(c, c));
            store.insert(format!("ctrl.zero{j}.b"), zeros(1, c));
        }
        Ok(())
    }

    /// `B/2` residuals; residual `i` goes to backbone block `2i`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Video,
        cond: &Video,
        tvec: Var,
        text: Var,
    ) -> Result<Vec<Var>> {
        let cfg = &self.dit.config;
        if x.dim() != cond.dim() {
            return Err(Error::Shape(format!("condition {:?} does not match input {:?}", cond.dim(), x.dim())));
        }
        let (px, grid) = patchify(x, cfg.patch)?;
        let (pc, _) = patchify(cond, cfg.patch)?;
        let joined = g.input(ndarray::concatenate![Axis(1), px, pc]);
        let w = g.param(store, "ctrl.embed.w");
        let b = g.param(store, "ctrl.embed.b");
        let h = g.linear(joined, w, Some(b));
        let pos = g.input(positional_encoding(grid, cfg.width));
        let mut h = g.add(h, pos);
        let unused_style = g.input(zeros(1, cfg.width));
        let mut out = Vec::with_capacity(self.depth());
        for j in 0..self.depth() {
            let prefix = format!("ctrl.b{j}");
            let opts = BlockOptions {
                prefix: &prefix,
                sca_prefix: None,
                motion_prefix: None,
                alpha_motion: 0.0,
                temporal: TemporalMode::Attention,
            };
            h = self.dit.block(g, store, &opts, h, grid, tvec, text, unused_style, None)?;
            let zw = g.param(store, &format!("ctrl.zero{j}.w"));
            let zb = g.param(store, &format!("ctrl.zero{j}.b"));
            out.push(g.linear(h, zw, Some(zb)));
        }
        Ok(out)
    }
}

/// `ε̂` with the control branch active when `control` is given.
pub fn predict_with_control(
    dit: &Dit,
    store: &ParamStore,
    x: &Video,
    t: usize,
    cond: Conditioning<'_>,
    control: Option<&Video>,
) -> Result<Video> {
    let mut g = Graph::new();
    let tvec = dit.time_vector(&mut g, store, t);
    let text = dit.text_token(&mut g, store, cond.text)?;
    let style = dit.style_input(&mut g, cond.style)?;
    let residuals = match control {
        Some(c) => Some(ControlNet::new(dit)?.forward(&mut g, store, x, c, tvec, text)?),
        None => None,
    };
    let (out, grid) = dit.forward(&mut g, store, x, tvec, text, style, cond.alpha_motion, residuals.as_deref())?;
    crate::dit::unpatchify(g.value(out), grid, dit.config.patch, dit.config.channels)
}
