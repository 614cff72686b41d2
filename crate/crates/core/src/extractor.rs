//! Style extraction: a contrastively trained global projector, prompt-aware
//! texture patch selection, query-token aggregation and assembly of the
//! `(N + 1) × C` style token matrix (`[global; texture]`).

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingBundle, TextEmbedding};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;
use crate::tensor::params::{fan_in, ones, zeros};
use crate::tensor::{Adam, AttnLayout, Grads, Graph, Mat, ParamStore, Var};

pub const PROJ_PREFIX: &str = "proj.";
pub const TEX_PREFIX: &str = "tex.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub margin: f64,
    pub mse_weight: f64,
    pub zero_init_last: bool,
}

impl ProjectorConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self { input_dim, output_dim, hidden: vec![128], margin: 0.5, mse_weight: 1.0, zero_init_last: false }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// MLP mapping a global image embedding to a style-only description.
#[derive(Clone, Debug)]
pub struct Projector {
    pub config: ProjectorConfig,
    pub params: ParamStore,
}

impl Projector {
    pub fn init(config: ProjectorConfig, seed: u64) -> Self {
        let mut r = rng::child_rng(seed, 0x9205);
        let mut params = ParamStore::new();
        let layers = config.layer_dims();
        for (i, (din, dout)) in layers.iter().enumerate() {
            let w = if config.zero_init_last && i + 1 == layers.len() { zeros(*din, *dout) } else { fan_in(&mut r, *din, *dout) };
            params.insert(format!("{PROJ_PREFIX}l{i}.w"), w);
            params.insert(format!("{PROJ_PREFIX}l{i}.b"), zeros(1, *dout));
        }
        Self { config, params }
    }

    pub fn from_params(config: ProjectorConfig, params: &ParamStore) -> Result<Self> {
        let mut own = ParamStore::new();
        for (i, (din, dout)) in config.layer_dims().iter().enumerate() {
            for (suffix, shape) in [("w", (*din, *dout)), ("b", (1, *dout))] {
                let name = format!("{PROJ_PREFIX}l{i}.{suffix}");
                let v = params.require(&name)?;
                if v.dim() != shape {
                    return Err(Error::Checkpoint(format!(
                        "{name}: checkpoint shape {:?}, projector expects {shape:?}",
                        v.dim()
                    )));
                }
                own.insert(name, v.clone());
            }
        }
        Ok(Self { config, params: own })
    }

    pub fn num_layers(&self) -> usize {
        self.config.hidden.len() + 1
    }

    /// Graph form over a batch of rows (`n × D → n × C`).
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let n = self.num_layers();
        for i in 0..n {
            let w = g.param(store, &format!("{PROJ_PREFIX}l{i}.w"));
            let b = g.param(store, &format!("{PROJ_PREFIX}l{i}.b"));
            h = g.linear(h, w, Some(b));
            if i + 1 < n {
                h = g.gelu(h);
            }
        }
        h
    }

    /// `F_global = MLP(F_i)`.
    pub fn global_project(&self, f_i: &Array1<f64>) -> Result<Array1<f64>> {
        if f_i.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "projector expects input of length {}, got {}",
                self.config.input_dim,
                f_i.len()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(f_i.clone().insert_axis(Axis(0)));
        let y = self.forward_graph(&mut g, &self.params, x);
        Ok(g.value(y).row(0).to_owned())
    }

    pub fn project_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward_graph(&mut g, &self.params, xv);
        g.value(y).clone()
    }
}

/// `max(0, ‖a−p‖ − ‖a−n‖ + margin) + λ·mean((a−p)²)`.
pub fn contrastive_loss(a: &Array1<f64>, p: &Array1<f64>, n: &Array1<f64>, margin: f64, mse_weight: f64) -> f64 {
    let d_ap = (a - p).mapv(|v| v * v).sum().sqrt();
    let d_an = (a - n).mapv(|v| v * v).sum().sqrt();
    let mse = (a - p).mapv(|v| v * v).mean().unwrap_or(0.0);
    (d_ap - d_an + margin).max(0.0) + mse_weight * mse
}

/// Same loss on the tape, for `1×C` nodes.
pub fn contrastive_loss_graph(g: &mut Graph, a: Var, p: Var, n: Var, margin: f64, mse_weight: f64) -> Var {
    let ap = g.sub(a, p);
    let an = g.sub(a, n);
    let d_ap = g.norm(ap);
    let d_an = g.norm(an);
    let diff = g.sub(d_ap, d_an);
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    if mse_weight == 0.0 {
        return hinge;
    }
    let sq = g.square(ap);
    let mse = g.mean(sq);
    let mse = g.scale(mse, mse_weight);
    g.add(hinge, mse)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProjectorTraining {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 8, lr: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_loss: Vec<f64>,
}

/// Trains the projector on pairs of global embeddings `(F_i(a), F_i(b))`.
/// Anchors and positives come from within a pair; the negative is a random
/// member of a different pair.
pub fn train_projector(
    pairs: &[(Array1<f64>, Array1<f64>)],
    config: ProjectorConfig,
    training: &ProjectorTraining,
    exec: Execution,
) -> Result<(Projector, TrainingLog)> {
    if pairs.len() < 2 {
        return Err(Error::Invalid(format!("projector training needs at least 2 pairs, got {}", pairs.len())));
    }
    if training.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    for (a, b) in pairs {
        if a.len() != config.input_dim || b.len() != config.input_dim {
            return Err(Error::Shape("pair embedding width differs from projector input".into()));
        }
    }
    let mut proj = Projector::init(config, training.seed);
    let trainable: Vec<_> = proj.params.ids_with_prefix(PROJ_PREFIX).collect();
    let mut opt = Adam::new(training.lr, trainable);
    let mut r = rng::child_rng(training.seed, 0x7241);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = TrainingLog::default();
    let (margin, lambda) = (proj.config.margin, proj.config.mse_weight);

    for epoch in 0..training.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(training.batch_size) {
            let triplets: Vec<(usize, bool, usize, bool)> = chunk
                .iter()
                .map(|&i| {
                    let mut j = r.random_range(0..pairs.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    (i, r.random::<bool>(), j, r.random::<bool>())
                })
                .collect();
            let pick = |k: usize, first: bool| if first { &pairs[k].0 } else { &pairs[k].1 };
            let results: Vec<(f64, Grads)> = par::map(exec, &triplets, |&(i, swap, j, neg_first)| {
                let (a, p) = if swap { (&pairs[i].1, &pairs[i].0) } else { (&pairs[i].0, &pairs[i].1) };
                let x = ndarray::stack![Axis(0), a.view(), p.view(), pick(j, neg_first).view()];
                let mut g = Graph::new();
                let xin = g.input(x);
                let y = proj.forward_graph(&mut g, &proj.params, xin);
                let (ya, yp, yn) = (g.slice_rows(y, 0, 1), g.slice_rows(y, 1, 1), g.slice_rows(y, 2, 1));
                let loss = contrastive_loss_graph(&mut g, ya, yp, yn, margin, lambda);
                (g.scalar(loss), g.backward(loss))
            });
            let mut grads = Grads::default();
            let mut batch_loss = 0.0;
            for (l, gr) in &results {
                batch_loss += l;
                grads.accumulate(gr);
            }
            let inv = 1.0 / results.len() as f64;
            grads.scale(inv);
            batch_loss *= inv;
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!("projector loss diverged at epoch {epoch}")));
            }
            opt.step(&mut proj.params, &grads);
            total += batch_loss;
            batches += 1;
        }
        log.epoch_loss.push(total / batches as f64);
    }
    Ok((proj, log))
}

/// Fraction of triplets with `‖f(a) − f(p)‖ < ‖f(a) − f(n)‖`.
pub fn triplet_accuracy(
    project: impl Fn(&Array1<f64>) -> Array1<f64>,
    triplets: &[(Array1<f64>, Array1<f64>, Array1<f64>)],
) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let hits = triplets
        .iter()
        .filter(|(a, p, n)| {
            let (fa, fp, fn_) = (project(a), project(p), project(n));
            (&fa - &fp).mapv(|v| v * v).sum() < (&fa - &fn_).mapv(|v| v * v).sum()
        })
        .count();
    hits as f64 / triplets.len() as f64
}

pub fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Variance over patches of `cosine(global, patch_i)`.
pub fn patch_cosine_variance(global: &Array1<f64>, patches: &Array2<f64>) -> f64 {
    let sims: Vec<f64> = patches.rows().into_iter().map(|r| cosine(global.view(), r)).collect();
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n
}

/// Default number of kept patches: the same keep ratio as 15 of 256.
pub fn default_top_k(num_patches: usize) -> usize {
    ((0.06 * num_patches as f64).round() as usize).max(1)
}

/// Keeps the `k` patches least similar (cosine) to the prompt, ordered by
/// ascending similarity with ties broken by ascending patch index.
pub fn select_patches(patches: &Array2<f64>, text: &Array1<f64>, k: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let p = patches.nrows();
    if k == 0 || k > p {
        return Err(Error::Invalid(format!("k must be in 1..={p}, got {k}")));
    }
    if patches.ncols() != text.len() {
        return Err(Error::Shape(format!("patch width {} vs text width {}", patches.ncols(), text.len())));
    }
    if text.iter().all(|v| *v == 0.0) {
        return Err(Error::Invalid("text embedding has zero norm".into()));
    }
    let sims: Vec<f64> = patches.rows().into_iter().map(|r| cosine(r, text.view())).collect();
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok((patches.select(Axis(0), &idx), idx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub input_dim: usize,
    pub width: usize,
    pub queries: usize,
    pub heads: usize,
    pub positional: bool,
}

/// Query-token aggregation over selected patches: one pre-norm
/// self-attention block over `[queries; adapted patches]`, keeping the
/// first `N` outputs.
#[derive(Clone, Debug)]
pub struct TextureAggregator {
    pub config: TextureConfig,
}

fn sinusoid_row(pos: usize, width: usize) -> Array1<f64> {
    Array1::from_shape_fn(width, |i| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
        if i % 2 == 0 { (pos as f64 * freq).sin() } else { (pos as f64 * freq).cos() }
    })
}

impl TextureAggregator {
    pub fn new(config: TextureConfig) -> Result<Self> {
        if config.queries == 0 {
            return Err(Error::Invalid("texture aggregation needs at least one query token".into()));
        }
        if config.heads == 0 || !config.width.is_multiple_of(config.heads) {
            return Err(Error::Invalid("width must be divisible by heads".into()));
        }
        Ok(Self { config })
    }

    pub fn init_params<R: Rng>(&self, r: &mut R, store: &mut ParamStore) {
        let (d, c, n) = (self.config.input_dim, self.config.width, self.config.queries);
        store.insert("tex.adapter.w", fan_in(r, d, c));
        store.insert("tex.adapter.b", zeros(1, c));
        store.insert("tex.queries", crate::tensor::params::gaussian(r, n, c, 0.5));
        store.insert("tex.norm.g", ones(1, c));
        for m in ["q", "k", "v", "o"] {
            store.insert(format!("tex.attn.{m}.w"), fan_in(r, c, c));
            store.insert(format!("tex.attn.{m}.b"), zeros(1, c));
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, selected: Var) -> Var {
        let (k, _) = g.shape(selected);
        let n = self.config.queries;
        let aw = g.param(store, "tex.adapter.w");
        let ab = g.param(store, "tex.adapter.b");
        let mut adapted = g.linear(selected, aw, Some(ab));
        if self.config.positional {
            let pos = Array2::from_shape_fn((k, self.config.width), |(i, j)| sinusoid_row(i, self.config.width)[j]);
            let pv = g.input(pos);
            adapted = g.add(adapted, pv);
        }
        let queries = g.param(store, "tex.queries");
        let x = g.concat_rows(&[queries, adapted]);
        let norm = g.rms_norm(x);
        let gain = g.param(store, "tex.norm.g");
        let h = g.mul_row(norm, gain);
        let lin = |g: &mut Graph, m: &str, inp: Var| {
            let w = g.param(store, &format!("tex.attn.{m}.w"));
            let b = g.param(store, &format!("tex.attn.{m}.b"));
            g.linear(inp, w, Some(b))
        };
        let q = lin(g, "q", h);
        let kk = lin(g, "k", h);
        let v = lin(g, "v", h);
        let len = n + k;
        let a = g.attention(q, kk, v, AttnLayout::single(len, len, self.config.heads));
        let o = lin(g, "o", a);
        let out = g.add(x, o);
        g.slice_rows(out, 0, n)
    }

    /// `F_texture`: the first `N` rows after self-attention over `[F_query; F_p']`.
    pub fn texture_tokens(&self, store: &ParamStore, selected: &Array2<f64>) -> Result<Array2<f64>> {
        if selected.nrows() == 0 {
            return Err(Error::Invalid("texture aggregation needs at least one selected patch".into()));
        }
        if selected.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "selected patches have width {}, aggregator expects {}",
                selected.ncols(),
                self.config.input_dim
            )));
        }
        let mut g = Graph::new();
        let x = g.input(selected.clone());
        let y = self.forward_graph(&mut g, store, x);
        Ok(g.value(y).clone())
    }
}

/// `F_style = [F_global; F_texture]`, `(N + 1) × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTokens {
    tokens: Array2<f64>,
}

impl StyleTokens {
    pub fn assemble(global: &Array1<f64>, texture: &Array2<f64>) -> Result<Self> {
        if global.len() != texture.ncols() {
            return Err(Error::Shape(format!(
                "global width {} differs from texture width {}",
                global.len(),
                texture.ncols()
            )));
        }
        let mut tokens = Array2::zeros((texture.nrows() + 1, global.len()));
        tokens.row_mut(0).assign(global);
        tokens.slice_mut(s![1.., ..]).assign(texture);
        Ok(Self { tokens })
    }

    /// All-zero tokens, the null style condition.
    pub fn null(n_texture: usize, width: usize) -> Self {
        Self { tokens: Array2::zeros((n_texture + 1, width)) }
    }

    pub fn global(&self) -> Array1<f64> {
        self.tokens.row(0).to_owned()
    }

    pub fn texture(&self) -> Array2<f64> {
        self.tokens.slice(s![1.., ..]).to_owned()
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn into_tokens(self) -> Mat {
        self.tokens
    }
}

pub fn assemble_style(global: &Array1<f64>, texture: &Array2<f64>) -> Result<StyleTokens> {
    StyleTokens::assemble(global, texture)
}

/// Complete extractor: projector for the global token, selection plus
/// aggregation for the texture tokens.
#[derive(Clone, Debug)]
pub struct StyleExtractor {
    pub projector: Projector,
    pub texture: TextureAggregator,
    pub top_k: usize,
}

impl StyleExtractor {
    pub fn extract(&self, store: &ParamStore, bundle: &EmbeddingBundle, text: &TextEmbedding) -> Result<StyleTokens> {
        let global = self.projector.global_project(&bundle.global)?;
        let (selected, _) = select_patches(&bundle.patches, text.pooled(), self.top_k)?;
        let texture = self.texture.texture_tokens(store, &selected)?;
        StyleTokens::assemble(&global, &texture)
    }

    /// Style tokens on the tape: the projected global row is a constant, the
    /// texture rows stay differentiable in the aggregation parameters.
    pub fn extract_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bundle: &EmbeddingBundle,
        text: &TextEmbedding,
    ) -> Result<Var> {
        let global = self.projector.global_project(&bundle.global)?;
        let (selected, _) = select_patches(&bundle.patches, text.pooled(), self.top_k)?;
        let gv = g.input(global.insert_axis(Axis(0)));
        let sel = g.input(selected);
        let tex = self.texture.forward_graph(g, store, sel);
        Ok(g.concat_rows(&[gv, tex]))
    }
}
