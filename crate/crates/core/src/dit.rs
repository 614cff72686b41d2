//! Toy video diffusion transformer.
//!
//! Frames are cut into `p×p` patches and embedded to width `C`; tokens are
//! laid out frame-major, `(T·S) × C` with `S` spatial sites per frame. Each
//! block runs, with a residual around every sublayer and a timestep-driven
//! scale on each RMS-normalised input:
//!
//! 1. spatial self-attention within each frame,
//! 2. temporal self-attention across frames at each site (low-rank motion
//!    adapter on `W_Q`, `W_K`, `W_V`),
//! 3. text cross-attention plus style cross-attention on the same queries,
//! 4. a GELU feed-forward layer,
//!
//! followed by an optional control residual.
//!
//! Parameter prefixes: `dit.` (base), `sca.` (style cross-attention),
//! `motion.` (adapter factors), `ctrl.` (control branch).

use ndarray::{s, Array1, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Video;
use crate::rng;
use crate::tensor::params::{fan_in, gaussian, ones, zeros};
use crate::tensor::{AttnLayout, Graph, Mat, ParamStore, Var};

pub const BASE_PREFIX: &str = "dit.";
pub const SCA_PREFIX: &str = "sca.";
pub const MOTION_PREFIX: &str = "motion.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub ffn_mult: usize,
    pub lora_rank: usize,
    pub text_dim: usize,
    /// Rows of the style token matrix (`N + 1`).
    pub style_tokens: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self { blocks: 4, width: 64, heads: 4, patch: 4, channels: 3, ffn_mult: 4, lora_rank: 4, text_dim: 64, style_tokens: 5 }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 || self.patch == 0 || self.channels == 0 {
            return Err(Error::Invalid("backbone dims must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if self.lora_rank == 0 {
            return Err(Error::Invalid("adapter rank must be at least 1".into()));
        }
        if self.style_tokens == 0 {
            return Err(Error::Invalid("style token set must have at least one row".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Text conditioning for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum TextCond<'a> {
    Null,
    Embedding(&'a Array1<f64>),
}

/// Grid geometry of a patchified clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn sites(&self) -> usize {
        self.rows * self.cols
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.sites()
    }
}

/// `T×H×W×c` → `(T·S) × (p·p·c)`, frame-major, patches row-major.
pub fn patchify(x: &Video, patch: usize) -> Result<(Mat, TokenGrid)> {
    let (t, h, w, c) = x.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("frame {h}x{w} not divisible by patch size {patch}")));
    }
    let grid = TokenGrid { frames: t, rows: h / patch, cols: w / patch };
    let mut out = Array2::zeros((grid.tokens(), patch * patch * c));
    for f in 0..t {
        for r in 0..grid.rows {
            for q in 0..grid.cols {
                let row = f * grid.sites() + r * grid.cols + q;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            out[[row, (dy * patch + dx) * c + ch]] = x[[f, r * patch + dy, q * patch + dx, ch]];
                        }
                    }
                }
            }
        }
    }
    Ok((out, grid))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &Mat, grid: TokenGrid, patch: usize, channels: usize) -> Result<Video> {
    if tokens.dim() != (grid.tokens(), patch * patch * channels) {
        return Err(Error::Shape(format!("token matrix {:?} does not match grid {grid:?}", tokens.dim())));
    }
    let mut out = Array4::zeros((grid.frames, grid.rows * patch, grid.cols * patch, channels));
    for f in 0..grid.frames {
        for r in 0..grid.rows {
            for q in 0..grid.cols {
                let row = f * grid.sites() + r * grid.cols + q;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..channels {
                            out[[f, r * patch + dy, q * patch + dx, ch]] = tokens[[row, (dy * patch + dx) * channels + ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn sinusoid(pos: f64, width: usize, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(width) {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
        *o = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
    }
}

/// Fixed positional code: spatial site on the first half of the channels,
/// frame index on the second half.
pub fn positional_encoding(grid: TokenGrid, width: usize) -> Mat {
    let half = width / 2;
    let mut pos = Array2::zeros((grid.tokens(), width));
    for f in 0..grid.frames {
        for site in 0..grid.sites() {
            let mut row = pos.row_mut(f * grid.sites() + site);
            let slice = row.as_slice_mut().unwrap();
            sinusoid(site as f64, half, &mut slice[..half]);
            sinusoid(f as f64, width - half, &mut slice[half..]);
        }
    }
    pos
}

pub fn timestep_features(t: usize, width: usize) -> Mat {
    let mut row = vec![0.0; width];
    sinusoid(t as f64, width, &mut row);
    Array2::from_shape_vec((1, width), row).unwrap()
}

/// Rows reordering frame-major tokens into site-major order.
fn site_major(grid: TokenGrid) -> (Vec<usize>, Vec<usize>) {
    let (t, sn) = (grid.frames, grid.sites());
    let mut fwd = vec![0; t * sn];
    let mut inv = vec![0; t * sn];
    for site in 0..sn {
        for f in 0..t {
            fwd[site * t + f] = f * sn + site;
            inv[f * sn + site] = site * t + f;
        }
    }
    (fwd, inv)
}

/// Low-rank factors for one projection matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub down: Mat,
    pub up: Mat,
}

/// `y = x·W + α·(x·A_down)·A_up`, never materialising the merged weight.
pub fn lora_apply(x: &Mat, w: &Mat, adapter: Option<&LoraFactors>, alpha: f64) -> Result<Mat> {
    if x.ncols() != w.nrows() {
        return Err(Error::Shape(format!("x has {} columns, W has {} rows", x.ncols(), w.nrows())));
    }
    let base = x.dot(w);
    let Some(a) = adapter else { return Ok(base) };
    if a.down.nrows() != w.nrows() || a.up.ncols() != w.ncols() || a.down.ncols() != a.up.nrows() {
        return Err(Error::Shape("adapter factors do not match the weight".into()));
    }
    Ok(base + x.dot(&a.down).dot(&a.up) * alpha)
}

/// Graph form of [`lora_apply`] plus bias.
pub fn lora_linear(
    g: &mut Graph,
    x: Var,
    w: Var,
    b: Option<Var>,
    adapter: Option<(Var, Var)>,
    alpha: f64,
) -> Var {
    let y = g.linear(x, w, b);
    match adapter {
        Some((down, up)) => {
            let low = g.matmul(x, down);
            let low = g.matmul(low, up);
            let low = g.scale(low, alpha);
            g.add(y, low)
        }
        None => y,
    }
}

fn proj(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{prefix}.w"));
    let b = g.param(store, &format!("{prefix}.b"));
    g.linear(x, w, Some(b))
}

fn init_proj<R: Rng>(r: &mut R, store: &mut ParamStore, prefix: &str, din: usize, dout: usize, zero: bool) {
    let w = if zero { zeros(din, dout) } else { fan_in(r, din, dout) };
    store.insert(format!("{prefix}.w"), w);
    store.insert(format!("{prefix}.b"), zeros(1, dout));
}

/// Cross-attention of `queries` over `keys`, projections under `prefix.{q,k,v,o}`.
pub fn cross_attention(g: &mut Graph, store: &ParamStore, prefix: &str, queries: Var, keys: Var, heads: usize) -> Var {
    let (nq, _) = g.shape(queries);
    let (nk, _) = g.shape(keys);
    let q = proj(g, store, &format!("{prefix}.q"), queries);
    let k = proj(g, store, &format!("{prefix}.k"), keys);
    let v = proj(g, store, &format!("{prefix}.v"), keys);
    let a = g.attention(q, k, v, AttnLayout::single(nq, nk, heads));
    proj(g, store, &format!("{prefix}.o"), a)
}

/// `TCA(F_in, F_text) + SCA(F_in, F_style)`.
#[allow(clippy::too_many_arguments)]
pub fn dual_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    tca_prefix: &str,
    sca_prefix: &str,
    f_in: Var,
    text: Var,
    style: Var,
    heads: usize,
) -> Result<Var> {
    if g.shape(style).0 == 0 {
        return Err(Error::Invalid("style token set must contain at least one row".into()));
    }
    if g.shape(text).1 != g.shape(f_in).1 || g.shape(style).1 != g.shape(f_in).1 {
        return Err(Error::Shape("cross-attention widths disagree".into()));
    }
    let t = cross_attention(g, store, tca_prefix, f_in, text, heads);
    let sc = cross_attention(g, store, sca_prefix, f_in, style, heads);
    Ok(g.add(t, sc))
}

/// How the temporal sublayer mixes frames. `ValueOnly` skips the softmax and
/// passes each token's own value through, which is what attention over a
/// single frame reduces to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    Attention,
    ValueOnly,
}

/// Per-call options of one block.
#[derive(Clone, Debug)]
pub struct BlockOptions<'a> {
    pub prefix: &'a str,
    pub sca_prefix: Option<&'a str>,
    pub motion_prefix: Option<&'a str>,
    pub alpha_motion: f64,
    pub temporal: TemporalMode,
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub config: DitConfig,
}

impl Dit {
    pub fn new(config: DitConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Initialises a block's base parameters under `prefix`.
    pub fn init_block<R: Rng>(&self, r: &mut R, store: &mut ParamStore, prefix: &str) {
        let c = self.config.width;
        store.insert(format!("{prefix}.tscale.w"), zeros(c, 4 * c));
        store.insert(format!("{prefix}.tscale.b"), zeros(1, 4 * c));
        for n in 1..=4 {
            store.insert(format!("{prefix}.n{n}.g"), ones(1, c));
        }
        for layer in ["sa", "ta", "tca"] {
            for m in ["q", "k", "v", "o"] {
                init_proj(r, store, &format!("{prefix}.{layer}.{m}"), c, c, false);
            }
        }
        let hidden = c * self.config.ffn_mult;
        store.insert(format!("{prefix}.ffn.w1"), fan_in(r, c, hidden));
        store.insert(format!("{prefix}.ffn.b1"), zeros(1, hidden));
        store.insert(format!("{prefix}.ffn.w2"), fan_in(r, hidden, c));
        store.insert(format!("{prefix}.ffn.b2"), zeros(1, c));
    }

    /// Base network plus zero-output style cross-attention in every block.
    pub fn init_base(&self, seed: u64) -> ParamStore {
        let cfg = &self.config;
        let c = cfg.width;
        let mut r = rng::child_rng(seed, 0xD17);
        let mut store = ParamStore::new();
        init_proj(&mut r, &mut store, "dit.embed", cfg.patch_dim(), c, false);
        init_proj(&mut r, &mut store, "dit.time", c, c, false);
        init_proj(&mut r, &mut store, "dit.text", cfg.text_dim, c, false);
        store.insert("dit.text.null", gaussian(&mut r, 1, c, 0.5));
        for i in 0..cfg.blocks {
            self.init_block(&mut r, &mut store, &format!("dit.b{i}"));
        }
        store.insert("dit.final.g", ones(1, c));
        init_proj(&mut r, &mut store, "dit.final", c, cfg.patch_dim(), true);
        self.init_style_attention(seed, &mut store);
        store
    }

    /// Style cross-attention with a zero output projection.
    pub fn init_style_attention(&self, seed: u64, store: &mut ParamStore) {
        let c = self.config.width;
        let mut r = rng::child_rng(seed, 0x5CA);
        for i in 0..self.config.blocks {
            for m in ["q", "k", "v"] {
                init_proj(&mut r, store, &format!("sca.b{i}.{m}"), c, c, false);
            }
            init_proj(&mut r, store, &format!("sca.b{i}.o"), c, c, true);
        }
    }

    /// Motion adapter factors: small Gaussian `A_down`, zero `A_up`.
    pub fn init_motion(&self, seed: u64, store: &mut ParamStore) {
        let (c, rank) = (self.config.width, self.config.lora_rank);
        let mut r = rng::child_rng(seed, 0x3071);
        for i in 0..self.config.blocks {
            for m in ["q", "k", "v"] {
                store.insert(format!("motion.b{i}.{m}.down"), gaussian(&mut r, c, rank, 1.0 / (c as f64).sqrt()));
                store.insert(format!("motion.b{i}.{m}.up"), zeros(rank, c));
            }
        }
    }

    pub fn time_vector(&self, g: &mut Graph, store: &ParamStore, t: usize) -> Var {
        let tf = g.input(timestep_features(t, self.config.width));
        let h = proj(g, store, "dit.time", tf);
        g.silu(h)
    }

    pub fn text_token(&self, g: &mut Graph, store: &ParamStore, text: TextCond<'_>) -> Result<Var> {
        match text {
            TextCond::Null => Ok(g.param(store, "dit.text.null")),
            TextCond::Embedding(e) => {
                if e.len() != self.config.text_dim {
                    return Err(Error::Shape(format!(
                        "text embedding has width {}, backbone expects {}",
                        e.len(),
                        self.config.text_dim
                    )));
                }
                let x = g.input(e.clone().insert_axis(ndarray::Axis(0)));
                Ok(proj(g, store, "dit.text", x))
            }
        }
    }

    pub fn style_input(&self, g: &mut Graph, style: Option<&Mat>) -> Result<Var> {
        let (n, c) = (self.config.style_tokens, self.config.width);
        match style {
            None => Ok(g.input(Array2::zeros((n, c)))),
            Some(m) => {
                if m.nrows() == 0 {
                    return Err(Error::Invalid("style token set must contain at least one row".into()));
                }
                if m.ncols() != c {
                    return Err(Error::Shape(format!("style tokens have width {}, backbone expects {c}", m.ncols())));
                }
                Ok(g.input(m.clone()))
            }
        }
    }

    /// Patch embedding plus positional code.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, x: &Video, prefix: &str) -> Result<(Var, TokenGrid)> {
        let (patches, grid) = patchify(x, self.config.patch)?;
        let p = g.input(patches);
        let h = proj(g, store, &format!("{prefix}.embed"), p);
        let pos = g.input(positional_encoding(grid, self.config.width));
        Ok((g.add(h, pos), grid))
    }

    fn adaptive_norm(&self, g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, scales: Var, n: usize) -> Var {
        let c = self.config.width;
        let normed = g.rms_norm(x);
        let gain = g.param(store, &format!("{prefix}.n{n}.g"));
        let s = g.slice_cols(scales, (n - 1) * c, c);
        let s = g.add_scalar(s, 1.0);
        let gs = g.mul(gain, s);
        g.mul_row(normed, gs)
    }

    /// One transformer block.
    #[allow(clippy::too_many_arguments)]
    pub fn block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        opts: &BlockOptions<'_>,
        x: Var,
        grid: TokenGrid,
        tvec: Var,
        text: Var,
        style: Var,
        control: Option<Var>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let prefix = opts.prefix;
        let scales = proj(g, store, &format!("{prefix}.tscale"), tvec);
        let (t, sites) = (grid.frames, grid.sites());

        // Spatial self-attention within each frame.
        let h = self.adaptive_norm(g, store, prefix, x, scales, 1);
        let q = proj(g, store, &format!("{prefix}.sa.q"), h);
        let k = proj(g, store, &format!("{prefix}.sa.k"), h);
        let v = proj(g, store, &format!("{prefix}.sa.v"), h);
        let a = g.attention(q, k, v, AttnLayout { groups: t, q_len: sites, kv_len: sites, heads });
        let o = proj(g, store, &format!("{prefix}.sa.o"), a);
        let x = g.add(x, o);

        // Temporal self-attention at each site.
        let h = self.adaptive_norm(g, store, prefix, x, scales, 2);
        let (fwd, inv) = site_major(grid);
        let hs = g.gather_rows(h, fwd);
        let mut qkv = Vec::with_capacity(3);
        for m in ["q", "k", "v"] {
            let w = g.param(store, &format!("{prefix}.ta.{m}.w"));
            let b = g.param(store, &format!("{prefix}.ta.{m}.b"));
            let adapter = match opts.motion_prefix {
                Some(mp) if store.contains(&format!("{mp}.{m}.down")) => {
                    let d = g.param(store, &format!("{mp}.{m}.down"));
                    let u = g.param(store, &format!("{mp}.{m}.up"));
                    Some((d, u))
                }
                _ => None,
            };
            qkv.push(lora_linear(g, hs, w, Some(b), adapter, opts.alpha_motion));
        }
        let a = match opts.temporal {
            TemporalMode::Attention => g.attention(qkv[0], qkv[1], qkv[2], AttnLayout { groups: sites, q_len: t, kv_len: t, heads }),
            TemporalMode::ValueOnly => qkv[2],
        };
        let o = proj(g, store, &format!("{prefix}.ta.o"), a);
        let o = g.gather_rows(o, inv);
        let x = g.add(x, o);

        // Text and style cross-attention.
        let h = self.adaptive_norm(g, store, prefix, x, scales, 3);
        let o = match opts.sca_prefix {
            Some(sp) => dual_cross_attention(g, store, &format!("{prefix}.tca"), sp, h, text, style, heads)?,
            None => cross_attention(g, store, &format!("{prefix}.tca"), h, text, heads),
        };
        let x = g.add(x, o);

        // Feed-forward.
        let h = self.adaptive_norm(g, store, prefix, x, scales, 4);
        let w1 = g.param(store, &format!("{prefix}.ffn.w1"));
        let b1 = g.param(store, &format!("{prefix}.ffn.b1"));
        let w2 = g.param(store, &format!("{prefix}.ffn.w2"));
        let b2 = g.param(store, &format!("{prefix}.ffn.b2"));
        let f = g.linear(h, w1, Some(b1));
        let f = g.gelu(f);
        let f = g.linear(f, w2, Some(b2));
        let x = g.add(x, f);

        Ok(match control {
            Some(c) => {
                if g.shape(c) != g.shape(x) {
                    return Err(Error::Shape("control residual does not match token shape".into()));
                }
                g.add(x, c)
            }
            None => x,
        })
    }

    /// Noise prediction as patch rows, `(T·S) × (p·p·c)`.
    ///
    /// `controls`, when given, must hold `blocks / 2` residuals; residual `i`
    /// is added to the output of block `2i`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Video,
        tvec: Var,
        text: Var,
        style: Var,
        alpha_motion: f64,
        controls: Option<&[Var]>,
    ) -> Result<(Var, TokenGrid)> {
        let cfg = &self.config;
        if x.dim().3 != cfg.channels {
            return Err(Error::Shape(format!("input has {} channels, backbone expects {}", x.dim().3, cfg.channels)));
        }
        if let Some(c) = controls {
            if c.len() * 2 != cfg.blocks {
                return Err(Error::Invalid(format!(
                    "expected {} control residuals for {} blocks, got {}",
                    cfg.blocks / 2,
                    cfg.blocks,
                    c.len()
                )));
            }
        }
        let (mut h, grid) = self.embed(g, store, x, "dit")?;
        let has_sca = store.contains("sca.b0.q.w");
        for i in 0..cfg.blocks {
            let prefix = format!("dit.b{i}");
            let sca = format!("sca.b{i}");
            let motion = format!("motion.b{i}");
            let opts = BlockOptions {
                prefix: &prefix,
                sca_prefix: has_sca.then_some(sca.as_str()),
                motion_prefix: Some(motion.as_str()),
                alpha_motion,
                temporal: TemporalMode::Attention,
            };
            let control = controls.and_then(|c| (i % 2 == 0).then(|| c[i / 2]));
            h = self.block(g, store, &opts, h, grid, tvec, text, style, control)?;
        }
        let normed = g.rms_norm(h);
        let gain = g.param(store, "dit.final.g");
        let normed = g.mul_row(normed, gain);
        Ok((proj(g, store, "dit.final", normed), grid))
    }
}

/// Read-only evaluation of the backbone on plain arrays.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub text: TextCond<'a>,
    pub style: Option<&'a Mat>,
    pub alpha_motion: f64,
}

impl Dit {
    /// `ε̂(x_t, t, cond)` with optional precomputed control residual rows.
    pub fn predict(
        &self,
        store: &ParamStore,
        x: &Video,
        t: usize,
        cond: Conditioning<'_>,
        controls: Option<&[Mat]>,
    ) -> Result<Video> {
        let mut g = Graph::new();
        let tvec = self.time_vector(&mut g, store, t);
        let text = self.text_token(&mut g, store, cond.text)?;
        let style = self.style_input(&mut g, cond.style)?;
        let ctrl: Option<Vec<Var>> = controls.map(|c| c.iter().map(|m| g.input(m.clone())).collect());
        let (out, grid) = self.forward(&mut g, store, x, tvec, text, style, cond.alpha_motion, ctrl.as_deref())?;
        unpatchify(g.value(out), grid, self.config.patch, self.config.channels)
    }
}

/// Slices frame `t` out of a clip as a one-frame clip.
pub fn single_frame(x: &Video, t: usize) -> Video {
    x.slice(s![t..t + 1, .., .., ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn small() -> (Dit, ParamStore) {
        let cfg = DitConfig { blocks: 2, width: 8, heads: 2, patch: 2, channels: 3, ffn_mult: 2, lora_rank: 2, text_dim: 6, style_tokens: 3 };
        let dit = Dit::new(cfg).unwrap();
        let mut store = dit.init_base(1);
        dit.init_motion(2, &mut store);
        (dit, store)
    }

    fn clip(t: usize, h: usize, w: usize, seed: u64) -> Video {
        let mut r = rng::rng(seed);
        Array4::from_shape_simple_fn((t, h, w, 3), || r.random::<f64>())
    }

    fn randomize(store: &mut ParamStore, prefix: &str, seed: u64) {
        let mut r = rng::rng(seed);
        let ids: Vec<_> = store.ids_with_prefix(prefix).collect();
        for id in ids {
            let (a, b) = store.value(id).dim();
            *store.value_mut(id) = gaussian(&mut r, a, b, 0.4);
        }
    }

    #[test]
    fn patchify_round_trip() {
        let x = clip(2, 4, 6, 1);
        let (p, grid) = patchify(&x, 2).unwrap();
        assert_eq!(p.dim(), (12, 12));
        assert_eq!(unpatchify(&p, grid, 2, 3).unwrap(), x);
        assert!(patchify(&x, 4).is_err());
    }

    #[test]
    fn lora_examples() {
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i + 2 * j) as f64 * 0.1);
        let w = Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64) * 0.2);
        let ad = LoraFactors {
            down: Array2::from_shape_fn((4, 2), |(i, j)| (i * j) as f64 * 0.3 + 0.1),
            up: Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 * 0.2 - 0.3),
        };
        assert_eq!(lora_apply(&x, &w, Some(&ad), 0.0).unwrap(), x.dot(&w));
        let y0 = lora_apply(&x, &w, Some(&ad), 0.0).unwrap();
        let y1 = lora_apply(&x, &w, Some(&ad), 1.0).unwrap();
        let y2 = lora_apply(&x, &w, Some(&ad), 2.0).unwrap();
        assert!((&(&y2 - &y0) - &((&y1 - &y0) * 2.0)).iter().all(|d| d.abs() < 1e-6));
        assert!(lora_apply(&x, &Array2::zeros((3, 4)), None, 1.0).is_err());

        let mut e1 = Array2::zeros((1, 3));
        e1[[0, 0]] = 1.0;
        let rank1 = LoraFactors { down: e1.t().to_owned(), up: e1.clone() };
        let y = lora_apply(&e1, &Array2::zeros((3, 3)), Some(&rank1), 1.0).unwrap();
        assert_eq!(y, e1);
    }

    #[test]
    fn fully_zero_output_block_is_identity() {
        let (dit, mut store) = small();
        for name in ["sa.o", "ta.o", "tca.o"] {
            store.get_mut(&format!("dit.b0.{name}.w")).unwrap().fill(0.0);
            store.get_mut(&format!("dit.b0.{name}.b")).unwrap().fill(0.0);
        }
        store.get_mut("dit.b0.ffn.w2").unwrap().fill(0.0);
        store.get_mut("dit.b0.ffn.b2").unwrap().fill(0.0);
        let mut g = Graph::new();
        let x = g.input(gaussian(&mut rng::rng(3), 8, 8, 1.0));
        let grid = TokenGrid { frames: 2, rows: 2, cols: 2 };
        let tvec = dit.time_vector(&mut g, &store, 10);
        let text = dit.text_token(&mut g, &store, TextCond::Null).unwrap();
        let style = dit.style_input(&mut g, None).unwrap();
        let opts = BlockOptions { prefix: "dit.b0", sca_prefix: Some("sca.b0"), motion_prefix: Some("motion.b0"), alpha_motion: -0.3, temporal: TemporalMode::Attention };
        let y = dit.block(&mut g, &store, &opts, x, grid, tvec, text, style, None).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    fn run_block(dit: &Dit, store: &ParamStore, x: &Mat, grid: TokenGrid, temporal: TemporalMode, control: Option<&Mat>) -> Mat {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let tvec = dit.time_vector(&mut g, store, 321);
        let e = Array1::from_shape_fn(6, |i| i as f64 * 0.1 - 0.2);
        let text = dit.text_token(&mut g, store, TextCond::Embedding(&e)).unwrap();
        let st = gaussian(&mut rng::rng(5), 3, 8, 1.0);
        let style = dit.style_input(&mut g, Some(&st)).unwrap();
        let ctrl = control.map(|c| g.input(c.clone()));
        let opts = BlockOptions { prefix: "dit.b0", sca_prefix: Some("sca.b0"), motion_prefix: Some("motion.b0"), alpha_motion: 0.7, temporal };
        let y = dit.block(&mut g, store, &opts, xv, grid, tvec, text, style, ctrl).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn single_frame_temporal_attention_is_its_value_path() {
        let (dit, mut store) = small();
        randomize(&mut store, "motion.", 8);
        randomize(&mut store, "sca.", 9);
        let grid = TokenGrid { frames: 1, rows: 2, cols: 2 };
        let x = gaussian(&mut rng::rng(4), 4, 8, 1.0);
        let a = run_block(&dit, &store, &x, grid, TemporalMode::Attention, None);
        let b = run_block(&dit, &store, &x, grid, TemporalMode::ValueOnly, None);
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-6));
        let grid2 = TokenGrid { frames: 2, rows: 2, cols: 1 };
        let c = run_block(&dit, &store, &x, grid2, TemporalMode::Attention, None);
        let d = run_block(&dit, &store, &x, grid2, TemporalMode::ValueOnly, None);
        assert!((&c - &d).iter().any(|d| d.abs() > 1e-6));
    }

    #[test]
    fn zero_control_residual_is_a_no_op() {
        let (dit, store) = small();
        let grid = TokenGrid { frames: 2, rows: 2, cols: 1 };
        let x = gaussian(&mut rng::rng(4), 4, 8, 1.0);
        let a = run_block(&dit, &store, &x, grid, TemporalMode::Attention, None);
        let b = run_block(&dit, &store, &x, grid, TemporalMode::Attention, Some(&Array2::zeros((4, 8))));
        assert_eq!(a, b);
    }

    #[test]
    fn fresh_style_attention_leaves_text_only_output() {
        let (_, store) = small();
        let mut g = Graph::new();
        let f_in = g.input(gaussian(&mut rng::rng(1), 5, 8, 1.0));
        let text = g.input(gaussian(&mut rng::rng(2), 1, 8, 1.0));
        let style = g.input(gaussian(&mut rng::rng(3), 3, 8, 1.0));
        let dual = dual_cross_attention(&mut g, &store, "dit.b0.tca", "sca.b0", f_in, text, style, 2).unwrap();
        let tca = cross_attention(&mut g, &store, "dit.b0.tca", f_in, text, 2);
        assert_eq!(g.value(dual), g.value(tca));
        let empty = g.input(Array2::zeros((0, 8)));
        assert!(dual_cross_attention(&mut g, &store, "dit.b0.tca", "sca.b0", f_in, text, empty, 2).is_err());
    }

    #[test]
    fn duplicated_style_rows_match_single_row() {
        let (_, mut store) = small();
        randomize(&mut store, "sca.", 3);
        let mut g = Graph::new();
        let f_in = g.input(gaussian(&mut rng::rng(1), 5, 8, 1.0));
        let row = gaussian(&mut rng::rng(2), 1, 8, 1.0);
        let one = g.input(row.clone());
        let three = g.input(ndarray::concatenate![ndarray::Axis(0), row, row, row]);
        let a = cross_attention(&mut g, &store, "sca.b0", f_in, one, 2);
        let b = cross_attention(&mut g, &store, "sca.b0", f_in, three, 2);
        assert!((g.value(a) - g.value(b)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn style_attention_gradients_match_finite_differences() {
        let (_, mut store) = small();
        randomize(&mut store, "sca.", 6);
        let f_in = gaussian(&mut rng::rng(1), 5, 8, 1.0);
        let text = gaussian(&mut rng::rng(2), 1, 8, 1.0);
        let style = gaussian(&mut rng::rng(3), 3, 8, 1.0);
        // Key bias gradients are identically zero (softmax shift invariance).
        let ids: Vec<_> = store.ids_with_prefix("sca.b0").filter(|&id| store.name(id) != "sca.b0.k.b").collect();
        let report = gradcheck::check(&store, &ids, 1e-5, |g, s| {
            let (fi, t, st) = (g.input(f_in.clone()), g.input(text.clone()), g.input(style.clone()));
            let y = dual_cross_attention(g, s, "dit.b0.tca", "sca.b0", fi, t, st, 2).unwrap();
            let sq = g.square(y);
            g.sum(sq)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn control_count_is_checked() {
        let (dit, store) = small();
        let x = clip(1, 4, 4, 2);
        let ctrl = vec![Array2::zeros((4, 8)); 2];
        let cond = Conditioning { text: TextCond::Null, style: None, alpha_motion: 0.0 };
        assert!(dit.predict(&store, &x, 5, cond, Some(&ctrl)).is_err());
        let one = vec![Array2::zeros((4, 8))];
        let a = dit.predict(&store, &x, 5, cond, Some(&one)).unwrap();
        let b = dit.predict(&store, &x, 5, cond, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let (dit, mut store) = small();
        randomize(&mut store, "motion.", 4);
        randomize(&mut store, "sca.", 5);
        randomize(&mut store, "dit.final", 6);
        let x = clip(2, 4, 2, 9);
        let e = Array1::from_shape_fn(6, |i| 0.3 - i as f64 * 0.1);
        let st = gaussian(&mut rng::rng(5), 3, 8, 1.0);
        let ids: Vec<_> = ["motion.b1.q.up", "motion.b0.v.down", "dit.b1.tscale.w", "dit.b0.sa.q.w", "dit.embed.w", "sca.b1.v.w"]
            .iter()
            .map(|n| store.id(n).unwrap())
            .collect();
        let report = gradcheck::check(&store, &ids, 1e-5, |g, s| {
            let tvec = dit.time_vector(g, s, 77);
            let text = dit.text_token(g, s, TextCond::Embedding(&e)).unwrap();
            let style = dit.style_input(g, Some(&st)).unwrap();
            let (y, _) = dit.forward(g, s, &x, tvec, text, style, -0.6, None).unwrap();
            let sq = g.square(y);
            g.mean(sq)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }
}
