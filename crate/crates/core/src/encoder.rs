//! Frozen image and text encoders.
//!
//! The default image encoder computes, per cell of a `rows × cols` grid, a
//! handcrafted statistic vector (colour histogram, mean colour, gradient
//! orientation histogram, mean gradient magnitude) and projects it to `D`
//! with a seeded Gaussian matrix. Gradients are taken inside each cell, so a
//! cell's row depends only on that cell's pixels. The global embedding
//! projects the mean cell statistics concatenated with whole-image
//! statistics.

use ndarray::{s, Array1, Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, StyleFamily};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rng;
use crate::tensor::params::gaussian;

const COLOR_BINS: usize = 4;
const ORIENT_BINS: usize = 8;
/// Length of one statistic vector.
pub const STAT_DIM: usize = 3 * COLOR_BINS + 3 + ORIENT_BINS + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub seed: u64,
    pub dim: usize,
    pub grid: (usize, usize),
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { seed: 0, dim: 64, grid: (4, 4) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub global: Array1<f64>,
    /// One row per grid cell, row-major over the grid.
    pub patches: Array2<f64>,
    pub grid: (usize, usize),
}

impl EmbeddingBundle {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    spec: EncoderSpec,
    patch_proj: Array2<f64>,
    global_proj: Array2<f64>,
}

fn luma(img: &ArrayView3<f64>, y: usize, x: usize) -> f64 {
    0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]]
}

/// Statistic vector of an image region, with gradients clamped at its border.
fn region_stats(region: ArrayView3<f64>) -> Array1<f64> {
    let (h, w, _) = region.dim();
    let n = (h * w) as f64;
    let mut out = Array1::zeros(STAT_DIM);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = region[[y, x, c]];
                let bin = ((v * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1);
                out[c * COLOR_BINS + bin] += 1.0 / n;
                out[3 * COLOR_BINS + c] += v / n;
            }
            let gx = luma(&region, y, (x + 1).min(w - 1)) - luma(&region, y, x.saturating_sub(1));
            let gy = luma(&region, (y + 1).min(h - 1), x) - luma(&region, y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 1e-12 {
                let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                let bin = ((theta / std::f64::consts::PI * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
                out[3 * COLOR_BINS + 3 + bin] += mag / n;
            }
            out[STAT_DIM - 1] += mag / n;
        }
    }
    out
}

impl ImageEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.dim == 0 || spec.grid.0 == 0 || spec.grid.1 == 0 {
            return Err(Error::Invalid("encoder dims must be positive".into()));
        }
        let mut r = rng::child_rng(spec.seed, 0xE1C0);
        let patch_proj = gaussian(&mut r, STAT_DIM, spec.dim, 2.0 / (STAT_DIM as f64).sqrt());
        let global_proj = gaussian(&mut r, 2 * STAT_DIM, spec.dim, 2.0 / (2.0 * STAT_DIM as f64).sqrt());
        Ok(Self { spec, patch_proj, global_proj })
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn num_patches(&self) -> usize {
        self.spec.grid.0 * self.spec.grid.1
    }

    pub fn encode_image(&self, image: &Image) -> Result<EmbeddingBundle> {
        let (h, w, c) = image.dim();
        let (rows, cols) = self.spec.grid;
        if c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h % rows != 0 || w % cols != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by encoder grid {rows}x{cols}")));
        }
        if !image.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let (ch, cw) = (h / rows, w / cols);
        let mut stats = Array2::zeros((rows * cols, STAT_DIM));
        for r in 0..rows {
            for cc in 0..cols {
                let cell = image.slice(s![r * ch..(r + 1) * ch, cc * cw..(cc + 1) * cw, ..]);
                stats.row_mut(r * cols + cc).assign(&region_stats(cell));
            }
        }
        let patches = stats.dot(&self.patch_proj);
        let mean_stats = stats.mean_axis(ndarray::Axis(0)).expect("non-empty grid");
        let whole = region_stats(image.view());
        let joined = ndarray::concatenate![ndarray::Axis(0), mean_stats, whole];
        let global = joined.dot(&self.global_proj);
        Ok(EmbeddingBundle { global, patches, grid: self.spec.grid })
    }
}

/// A (style, object) prompt expressed as vocabulary ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptIds {
    pub style: u32,
    pub object: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pooled: Array1<f64>,
}

impl TextEmbedding {
    pub fn new(pooled: Array1<f64>) -> Result<Self> {
        if !pooled.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("text embedding".into()));
        }
        if pooled.iter().all(|v| *v == 0.0) {
            return Err(Error::Invalid("text embedding must be nonzero".into()));
        }
        Ok(Self { pooled })
    }

    pub fn pooled(&self) -> &Array1<f64> {
        &self.pooled
    }
}

/// Lookup-table text encoder: `embed(style, object) = style_row + object_row`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    styles: Array2<f64>,
    objects: Array2<f64>,
}

impl TextEncoder {
    pub fn from_tables(styles: Array2<f64>, objects: Array2<f64>) -> Result<Self> {
        if styles.ncols() != objects.ncols() {
            return Err(Error::Shape("style/object tables differ in width".into()));
        }
        if styles.nrows() == 0 || objects.nrows() == 0 {
            return Err(Error::Invalid("text tables must be nonempty".into()));
        }
        for i in 0..objects.nrows() {
            for j in 0..i {
                if objects.row(i) == objects.row(j) {
                    return Err(Error::Invalid(format!("object ids {j} and {i} share an embedding")));
                }
            }
        }
        let enc = Self { styles, objects };
        for s in 0..enc.styles.nrows() {
            for o in 0..enc.objects.nrows() {
                enc.encode_text(PromptIds { style: s as u32, object: o as u32 })?;
            }
        }
        Ok(enc)
    }

    /// Seeded Gaussian tables.
    pub fn seeded(n_styles: usize, n_objects: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut r = rng::child_rng(seed, 0x7E47);
        let scale = 1.0 / (dim as f64).sqrt();
        Self::from_tables(gaussian(&mut r, n_styles, dim, scale), gaussian(&mut r, n_objects, dim, scale))
    }

    /// Tables aligned with an image encoder on the procedural corpus: a style
    /// row is the mean patch embedding of that style's renders, and an object
    /// row is the mean embedding of cells covered by that shape minus the
    /// mean of all cells.
    pub fn aligned(
        encoder: &ImageEncoder,
        n_styles: usize,
        n_objects: usize,
        image_size: usize,
        corpus_seed: u64,
        samples: usize,
    ) -> Result<Self> {
        let d = encoder.dim();
        let (rows, cols) = encoder.spec().grid;
        let cell = (image_size / rows, image_size / cols);
        let mut styles = Array2::zeros((n_styles, d));
        let mut objects = Array2::zeros((n_objects, d));
        let mut object_counts = vec![0usize; n_objects];
        for s in 0..n_styles {
            let fam = StyleFamily::new(s as u32, corpus_seed);
            for i in 0..samples {
                let o = ((s * samples + i) % n_objects) as u32;
                let mut r = rng::child_rng(corpus_seed, (s * samples + i) as u64 + 0xA11);
                let p = corpus::random_placement(&mut r, image_size, image_size);
                let (img, mask) = corpus::render_with_mask(&fam, o, p, image_size, image_size);
                let b = encoder.encode_image(&img)?;
                let mean = b.patches.mean_axis(ndarray::Axis(0)).unwrap();
                styles.row_mut(s).scaled_add(1.0 / samples as f64, &mean);
                let mut covered = Array1::zeros(d);
                let mut n = 0.0;
                for (k, row) in b.patches.rows().into_iter().enumerate() {
                    let (cr, cc) = (k / cols, k % cols);
                    let m = mask.slice(s![cr * cell.0..(cr + 1) * cell.0, cc * cell.1..(cc + 1) * cell.1, 0]);
                    let frac = m.iter().filter(|v| **v).count() as f64 / m.len() as f64;
                    if frac >= 0.5 {
                        covered += &row;
                        n += 1.0;
                    }
                }
                if n > 0.0 {
                    let diff = covered / n - &mean;
                    objects.row_mut(o as usize).scaled_add(1.0, &diff);
                    object_counts[o as usize] += 1;
                }
            }
        }
        let mut fallback = rng::child_rng(corpus_seed, 0xFA11);
        for (o, n) in object_counts.iter().enumerate() {
            if *n > 0 {
                objects.row_mut(o).mapv_inplace(|v| v / *n as f64);
            } else {
                objects.row_mut(o).assign(&gaussian(&mut fallback, 1, d, 0.1).row(0));
            }
        }
        Self::from_tables(styles, objects)
    }

    pub fn dim(&self) -> usize {
        self.styles.ncols()
    }

    pub fn n_styles(&self) -> usize {
        self.styles.nrows()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.nrows()
    }

    pub fn encode_text(&self, ids: PromptIds) -> Result<TextEmbedding> {
        let (s, o) = (ids.style as usize, ids.object as usize);
        if s >= self.styles.nrows() {
            return Err(Error::Invalid(format!("unknown style id {s}")));
        }
        if o >= self.objects.nrows() {
            return Err(Error::Invalid(format!("unknown object id {o}")));
        }
        TextEmbedding::new(&self.styles.row(s) + &self.objects.row(o))
    }

    pub fn tables(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.styles, &self.objects)
    }
}
