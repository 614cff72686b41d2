//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough cached state to run the backward pass. Parameters enter the
//! tape through [`Graph::param`] and are deduplicated, so a parameter used
//! several times accumulates a single gradient.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row/column layout of a grouped multi-head attention call.
///
/// Query rows are split into `groups` contiguous blocks of `q_len` rows and
/// key/value rows into `groups` blocks of `kv_len` rows; block `g` of the
/// queries attends only to block `g` of the keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub groups: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
}

impl AttnLayout {
    pub fn single(q_len: usize, kv_len: usize, heads: usize) -> Self {
        Self { groups: 1, q_len, kv_len, heads }
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Silu(Var),
    Relu(Var),
    Square(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<Mat> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Norm(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar loss with respect to every parameter on the tape.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    pub by_param: BTreeMap<ParamId, Mat>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(&id)
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Grads) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    self.by_param.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const RMS_EPS: f64 = 1e-6;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.param_by_id(store, id)
    }

    pub fn param_by_id(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul shape mismatch: {ar}x{ac} · {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1x{n} row");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row expects a 1x{n} row");
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Row-wise RMS normalisation without gain.
    pub fn rms_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let inv_rms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| 1.0 / (r.iter().map(|v| v * v).sum::<f64>() / n + RMS_EPS).sqrt())
            .collect();
        let mut value = xv.clone();
        for (mut row, s) in value.rows_mut().into_iter().zip(&inv_rms) {
            row.mapv_inplace(|v| v * s);
        }
        self.push(value, Op::RmsNorm { x, inv_rms })
    }

    /// Grouped multi-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (qr, qc) = self.shape(q);
        let (kr, kc) = self.shape(k);
        let (vr, vc) = self.shape(v);
        let AttnLayout { groups, q_len, kv_len, heads } = layout;
        assert_eq!(qr, groups * q_len, "attention: query rows");
        assert_eq!(kr, groups * kv_len, "attention: key rows");
        assert_eq!(vr, kr, "attention: key/value rows");
        assert_eq!(qc, kc, "attention: query/key width");
        assert!(kv_len >= 1, "attention needs at least one key");
        assert!(heads >= 1 && qc % heads == 0 && vc % heads == 0, "attention: heads");
        let dh = qc / heads;
        let dv = vc / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros((qr, vc));
        let mut probs = Vec::with_capacity(groups * heads);
        for g in 0..groups {
            let qs = g * q_len..(g + 1) * q_len;
            let ks = g * kv_len..(g + 1) * kv_len;
            for h in 0..heads {
                let qh = qv.slice(s![qs.clone(), h * dh..(h + 1) * dh]);
                let kh = kv.slice(s![ks.clone(), h * dh..(h + 1) * dh]);
                let vh = vv.slice(s![ks.clone(), h * dv..(h + 1) * dv]);
                let mut p = qh.dot(&kh.t()) * scale;
                softmax_rows(&mut p);
                out.slice_mut(s![qs.clone(), h * dv..(h + 1) * dv]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, layout, probs })
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let value = xv.select(Axis(0), &index);
        self.push(value, Op::GatherRows { x, index })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Mat::from_elem((1, 1), xv.sum() / xv.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Frobenius norm as a `1×1` node.
    pub fn norm(&mut self, x: Var) -> Var {
        let n = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Mat::from_elem((1, 1), n), Op::Norm(x))
    }

    /// `x · w + b`, with `b` a `1×n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "expected a scalar node");
        m[[0, 0]]
    }

    /// Backpropagates from a `1×1` node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        let mut out = Grads::default();
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.by_param.insert(*id, dy);
                }
                Op::MatMul(a, b) => {
                    let ga = dy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&dy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&dy);
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let ga = &dy * self.value(*b);
                    let gb = &dy * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, dy);
                }
                Op::MulRow(a, row) => {
                    let gr = (&dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &dy * self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, dy * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, dy),
                Op::Gelu(a) => {
                    let ga = &dy * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let d = self.value(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *a, &dy * &d);
                }
                Op::Relu(a) => {
                    let d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &dy * &d);
                }
                Op::Square(a) => {
                    let ga = &dy * &(self.value(*a) * 2.0);
                    acc(&mut grads, *a, ga);
                }
                Op::RmsNorm { x, inv_rms } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut gx = Mat::zeros(y.dim());
                    for (i, r) in inv_rms.iter().enumerate() {
                        let dyr = dy.row(i);
                        let yr = y.row(i);
                        let m = dyr.dot(&yr) / n;
                        let mut gr = gx.row_mut(i);
                        for j in 0..yr.len() {
                            gr[j] = r * (dyr[j] - yr[j] * m);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *layout, probs, &dy);
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::GatherRows { x, index } => {
                    let mut gx = Mat::zeros(self.shape(*x));
                    for (i, &src) in index.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &dy.row(i);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        acc(&mut grads, *p, dy.slice(s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.shape(*p).1;
                        acc(&mut grads, *p, dy.slice(s![.., start..start + cols]).to_owned());
                        start += cols;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Mat::zeros(self.shape(*x));
                    let rows = dy.nrows();
                    gx.slice_mut(s![*start..*start + rows, ..]).assign(&dy);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Mat::zeros(self.shape(*x));
                    let cols = dy.ncols();
                    gx.slice_mut(s![.., *start..*start + cols]).assign(&dy);
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let g = dy[[0, 0]];
                    acc(&mut grads, *x, Mat::from_elem(self.shape(*x), g));
                }
                Op::Mean(x) => {
                    let (r, c) = self.shape(*x);
                    let g = dy[[0, 0]] / (r * c) as f64;
                    acc(&mut grads, *x, Mat::from_elem((r, c), g));
                }
                Op::Norm(x) => {
                    let n = node.value[[0, 0]];
                    let g = if n > 0.0 { self.value(*x) * (dy[[0, 0]] / n) } else { Mat::zeros(self.shape(*x)) };
                    acc(&mut grads, *x, g);
                }
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: &[Mat],
        dy: &Mat,
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttnLayout { groups, q_len, kv_len, heads } = layout;
        let dh = qv.ncols() / heads;
        let dv = vv.ncols() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Mat::zeros(qv.dim());
        let mut gk = Mat::zeros(kv.dim());
        let mut gv = Mat::zeros(vv.dim());
        for g in 0..groups {
            let qs = g * q_len..(g + 1) * q_len;
            let ks = g * kv_len..(g + 1) * kv_len;
            for h in 0..heads {
                let p = &probs[g * heads + h];
                let qc = h * dh..(h + 1) * dh;
                let vc = h * dv..(h + 1) * dv;
                let dout = dy.slice(s![qs.clone(), vc.clone()]);
                let vh = vv.slice(s![ks.clone(), vc.clone()]);
                gv.slice_mut(s![ks.clone(), vc.clone()]).assign(&p.t().dot(&dout));
                let dp = dout.dot(&vh.t());
                let mut ds = p * &dp;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let total: f64 = row.sum();
                    row.zip_mut_with(&prow, |d, &pv| *d -= pv * total);
                }
                ds.mapv_inplace(|x| x * scale);
                let kh = kv.slice(s![ks.clone(), qc.clone()]);
                let qh = qv.slice(s![qs.clone(), qc.clone()]);
                gq.slice_mut(s![qs.clone(), qc.clone()]).assign(&ds.dot(&kh));
                gk.slice_mut(s![ks.clone(), qc.clone()]).assign(&ds.t().dot(&qh));
            }
        }
        (gq, gk, gv)
    }
}
