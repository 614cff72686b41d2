//! Invertible pixel rearrangements ("views") used by the illusion sampler.
//!
//! A view is stored as an explicit permutation over flattened pixel indices
//! (`y * width + x`): output pixel `j` takes input pixel `permutation[j]`,
//! with all channels moved together.
//!
//! Jigsaw views cut the image into an equal `rows × cols` grid of pieces and
//! shuffle them. The shuffle is a Fisher–Yates pass driven directly by a
//! SplitMix64 stream seeded with the view seed, so a `(height, width,
//! piece_grid, seed)` tuple always yields the same permutation. If the
//! shuffle comes out as the identity it is redrawn from the continuing
//! stream. With `rotate_pieces` set (square pieces only), each piece is also
//! rotated by a stream-chosen multiple of 90°.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Identity,
    FlipVertical,
    Rotate180,
    Jigsaw,
}

impl std::str::FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ViewKind::Identity),
            "flip_vertical" => Ok(ViewKind::FlipVertical),
            "rotate180" => Ok(ViewKind::Rotate180),
            "jigsaw" => Ok(ViewKind::Jigsaw),
            other => Err(Error::Invalid(format!("unknown view kind `{other}`"))),
        }
    }
}

/// Serializable description of a view; enough to rebuild its permutation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub kind: ViewKind,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piece_grid: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rotate_pieces: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub inverse: bool,
}

impl ViewSpec {
    pub fn new(kind: ViewKind, height: usize, width: usize) -> Self {
        Self { kind, height, width, piece_grid: None, seed: None, rotate_pieces: false, inverse: false }
    }

    pub fn jigsaw(height: usize, width: usize, piece_grid: (usize, usize), seed: u64) -> Self {
        Self {
            piece_grid: Some(piece_grid),
            seed: Some(seed),
            ..Self::new(ViewKind::Jigsaw, height, width)
        }
    }

    pub fn build(&self) -> Result<ViewTransform> {
        let v = make_view_with(self.kind, self.height, self.width, self.piece_grid, self.seed, self.rotate_pieces)?;
        Ok(if self.inverse { v.invert() } else { v })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewTransform {
    spec: ViewSpec,
    permutation: Vec<usize>,
}

struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..bound` by rejection.
    fn below(&mut self, bound: u64) -> u64 {
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let r = self.next();
            if r < zone {
                return r % bound;
            }
        }
    }
}

pub fn make_view(kind: ViewKind, height: usize, width: usize) -> Result<ViewTransform> {
    make_view_with(kind, height, width, None, None, false)
}

pub fn make_view_with(
    kind: ViewKind,
    height: usize,
    width: usize,
    piece_grid: Option<(usize, usize)>,
    seed: Option<u64>,
    rotate_pieces: bool,
) -> Result<ViewTransform> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid(format!("view dims must be positive, got {height}x{width}")));
    }
    let n = height * width;
    let permutation: Vec<usize> = match kind {
        ViewKind::Identity => (0..n).collect(),
        ViewKind::FlipVertical => (0..n)
            .map(|j| {
                let (y, x) = (j / width, j % width);
                (height - 1 - y) * width + x
            })
            .collect(),
        ViewKind::Rotate180 => (0..n).map(|j| n - 1 - j).collect(),
        ViewKind::Jigsaw => {
            let (rows, cols) = piece_grid
                .ok_or_else(|| Error::Invalid("jigsaw view requires a piece grid".into()))?;
            let seed = seed.ok_or_else(|| Error::Invalid("jigsaw view requires a seed".into()))?;
            jigsaw_permutation(height, width, rows, cols, seed, rotate_pieces)?
        }
    };
    let spec = ViewSpec {
        kind,
        height,
        width,
        piece_grid: if kind == ViewKind::Jigsaw { piece_grid } else { None },
        seed: if kind == ViewKind::Jigsaw { seed } else { None },
        rotate_pieces: kind == ViewKind::Jigsaw && rotate_pieces,
        inverse: false,
    };
    Ok(ViewTransform { spec, permutation })
}

fn jigsaw_permutation(
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
    seed: u64,
    rotate_pieces: bool,
) -> Result<Vec<usize>> {
    if rows == 0 || cols == 0 || !height.is_multiple_of(rows) || !width.is_multiple_of(cols) {
        return Err(Error::Invalid(format!(
            "piece grid {rows}x{cols} does not divide image {height}x{width}"
        )));
    }
    let (ph, pw) = (height / rows, width / cols);
    if rotate_pieces && ph != pw {
        return Err(Error::Invalid(format!("piece rotation needs square pieces, got {ph}x{pw}")));
    }
    let pieces = rows * cols;
    let mut stream = SplitMix(seed);
    let mut order: Vec<usize> = (0..pieces).collect();
    loop {
        for i in (1..pieces).rev() {
            let j = stream.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        if pieces == 1 || order.iter().enumerate().any(|(i, &p)| i != p) {
            break;
        }
    }
    let turns: Vec<u64> = (0..pieces)
        .map(|_| if rotate_pieces { stream.below(4) } else { 0 })
        .collect();

    let mut perm = vec![0; height * width];
    for (dst_piece, &src_piece) in order.iter().enumerate() {
        let (dr, dc) = (dst_piece / cols, dst_piece % cols);
        let (sr, sc) = (src_piece / cols, src_piece % cols);
        for py in 0..ph {
            for px in 0..pw {
                // Destination (py, px) reads the source piece rotated by `turns` quarter turns.
                let (qy, qx) = match turns[dst_piece] {
                    0 => (py, px),
                    1 => (pw - 1 - px, py),
                    2 => (ph - 1 - py, pw - 1 - px),
                    _ => (px, ph - 1 - py),
                };
                let dst = (dr * ph + py) * width + dc * pw + px;
                let src = (sr * ph + qy) * width + sc * pw + qx;
                perm[dst] = src;
            }
        }
    }
    Ok(perm)
}

impl ViewTransform {
    pub fn spec(&self) -> &ViewSpec {
        &self.spec
    }

    pub fn kind(&self) -> ViewKind {
        self.spec.kind
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Inverse bijection: `invert(v).apply(v.apply(x)) == x`.
    pub fn invert(&self) -> ViewTransform {
        let mut inv = vec![0; self.permutation.len()];
        for (j, &src) in self.permutation.iter().enumerate() {
            inv[src] = j;
        }
        let mut spec = self.spec.clone();
        // Flips, half turns and the identity are involutions.
        spec.inverse = match spec.kind {
            ViewKind::Jigsaw => !spec.inverse,
            _ => false,
        };
        ViewTransform { spec, permutation: inv }
    }

    /// `self ∘ other`: applying the result equals applying `other` then `self`.
    pub fn compose(&self, other: &ViewTransform) -> Result<Vec<usize>> {
        if self.permutation.len() != other.permutation.len() {
            return Err(Error::Shape("composing views of different sizes".into()));
        }
        Ok(self.permutation.iter().map(|&p| other.permutation[p]).collect())
    }

    pub fn apply<T: Clone>(&self, x: &Array3<T>) -> Result<Array3<T>> {
        self.apply_view(x.view())
    }

    pub fn apply_view<T: Clone>(&self, x: ArrayView3<T>) -> Result<Array3<T>> {
        let (h, w, c) = x.dim();
        if (h, w) != (self.spec.height, self.spec.width) {
            return Err(Error::Shape(format!(
                "view is {}x{} but input is {h}x{w}",
                self.spec.height, self.spec.width
            )));
        }
        Ok(Array3::from_shape_fn((h, w, c), |(y, xx, ch)| {
            let src = self.permutation[y * w + xx];
            x[[src / w, src % w, ch]].clone()
        }))
    }
}
