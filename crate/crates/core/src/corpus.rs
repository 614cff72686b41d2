//! Procedural "styled shapes" corpus.
//!
//! A style id selects a family (palette plus a fixed background/foreground
//! texture); an object id selects a shape. Each render jitters the shape's
//! position and size from its own seed. Videos move the shape at a constant
//! velocity over a static textured background.

use std::f64::consts::PI;

use ndarray::{Array3, Array4};
use rand::Rng;

use crate::raster::{Image, Video};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Flat,
    Stripes { angle: f64, freq: f64 },
    Checker { size: f64 },
    Dots { spacing: f64, radius: f64 },
    Grain,
    Gradient { angle: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleFamily {
    pub id: u32,
    pub background: [f64; 3],
    pub foreground: [f64; 3],
    pub accent: [f64; 3],
    pub texture: Texture,
    pub amplitude: f64,
    grain_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    HBar,
    VBar,
}

const SHAPES: [ShapeKind; 8] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Diamond,
    ShapeKind::HBar,
    ShapeKind::VBar,
];

pub fn shape_for_object(object: u32) -> ShapeKind {
    SHAPES[object as usize % SHAPES.len()]
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl StyleFamily {
    /// Family for a style id; fully determined by the id and `corpus_seed`.
    pub fn new(id: u32, corpus_seed: u64) -> Self {
        let mut r = rng::child_rng(corpus_seed, 0x5747_0000 + u64::from(id));
        // Hues spread by the golden angle so consecutive ids stay far apart.
        let hue = (f64::from(id) * 0.618_033_988_75 + r.random::<f64>() * 0.05).fract();
        let dark_bg = id.is_multiple_of(2);
        let (bv, fv) = if dark_bg { (0.25, 0.85) } else { (0.85, 0.3) };
        let background = hsv(hue, 0.35 + 0.3 * r.random::<f64>(), bv);
        let foreground = hsv(hue + 0.45 + 0.1 * r.random::<f64>(), 0.7, fv);
        let accent = hsv(hue + 0.2, 0.9, 0.6 + 0.3 * r.random::<f64>());
        let texture = match id % 6 {
            0 => Texture::Stripes { angle: r.random::<f64>() * PI, freq: 3.0 + 4.0 * r.random::<f64>() },
            1 => Texture::Checker { size: 3.0 + 3.0 * r.random::<f64>() },
            2 => Texture::Dots { spacing: 5.0 + 3.0 * r.random::<f64>(), radius: 1.2 + r.random::<f64>() },
            3 => Texture::Grain,
            4 => Texture::Gradient { angle: r.random::<f64>() * 2.0 * PI },
            _ => Texture::Flat,
        };
        Self {
            id,
            background,
            foreground,
            accent,
            texture,
            amplitude: 0.5 + 0.4 * r.random::<f64>(),
            grain_seed: r.random(),
        }
    }

    /// Texture weight in `[0, 1]` at pixel `(y, x)` of an `h×w` canvas.
    pub fn texture_at(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let (fy, fx) = (y as f64, x as f64);
        match self.texture {
            Texture::Flat => 0.0,
            Texture::Stripes { angle, freq } => {
                let u = fx * angle.cos() + fy * angle.sin();
                0.5 + 0.5 * (2.0 * PI * u / freq).sin()
            }
            Texture::Checker { size } => {
                let a = (fx / size).floor() as i64 + (fy / size).floor() as i64;
                (a.rem_euclid(2)) as f64
            }
            Texture::Dots { spacing, radius } => {
                let dx = fx.rem_euclid(spacing) - spacing / 2.0;
                let dy = fy.rem_euclid(spacing) - spacing / 2.0;
                if dx * dx + dy * dy <= radius * radius { 1.0 } else { 0.0 }
            }
            Texture::Grain => {
                let z = rng::mix(self.grain_seed, (y * w + x) as u64);
                (z >> 11) as f64 / (1u64 << 53) as f64
            }
            Texture::Gradient { angle } => {
                let u = (fx / w as f64 - 0.5) * angle.cos() + (fy / h as f64 - 0.5) * angle.sin();
                (u + 0.71) / 1.42
            }
        }
    }
}

/// Placement of a shape on the canvas, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

pub fn shape_contains(shape: ShapeKind, p: Placement, y: f64, x: f64) -> bool {
    let (dy, dx) = ((y - p.cy) / p.radius, (x - p.cx) / p.radius);
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= 1.0,
        ShapeKind::Square => dx.abs() <= 0.8 && dy.abs() <= 0.8,
        ShapeKind::Triangle => (-0.9..=0.8).contains(&dy) && dx.abs() <= (dy + 0.9) * 0.55,
        ShapeKind::Cross => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
        ShapeKind::Ring => {
            let r2 = dx * dx + dy * dy;
            (0.36..=1.0).contains(&r2)
        }
        ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.0,
        ShapeKind::HBar => dx.abs() <= 1.0 && dy.abs() <= 0.35,
        ShapeKind::VBar => dy.abs() <= 1.0 && dx.abs() <= 0.35,
    }
}

pub fn random_placement<R: Rng>(r: &mut R, h: usize, w: usize) -> Placement {
    let scale = h.min(w) as f64;
    Placement {
        cy: h as f64 * (0.5 + 0.12 * (r.random::<f64>() - 0.5)),
        cx: w as f64 * (0.5 + 0.12 * (r.random::<f64>() - 0.5)),
        radius: scale * (0.28 + 0.06 * r.random::<f64>()),
    }
}

/// Renders one frame; also returns the shape coverage mask.
pub fn render_with_mask(
    style: &StyleFamily,
    object: u32,
    placement: Placement,
    h: usize,
    w: usize,
) -> (Image, Array3<bool>) {
    let shape = shape_for_object(object);
    let mut img = Array3::zeros((h, w, 3));
    let mut mask = Array3::from_elem((h, w, 1), false);
    for y in 0..h {
        for x in 0..w {
            let t = style.texture_at(y, x, h, w) * style.amplitude;
            let inside = shape_contains(shape, placement, y as f64 + 0.5, x as f64 + 0.5);
            let base = if inside { style.foreground } else { style.background };
            for c in 0..3 {
                let v = if inside {
                    // Foreground carries the texture at reduced strength.
                    base[c] * (1.0 - 0.5 * t) + style.accent[c] * 0.5 * t
                } else {
                    base[c] * (1.0 - t) + style.accent[c] * t
                };
                img[[y, x, c]] = v.clamp(0.0, 1.0);
            }
            mask[[y, x, 0]] = inside;
        }
    }
    (img, mask)
}

pub fn render(style: &StyleFamily, object: u32, seed: u64, h: usize, w: usize) -> Image {
    let mut r = rng::rng(seed);
    let p = random_placement(&mut r, h, w);
    render_with_mask(style, object, p, h, w).0
}

/// Moving-shape clip: the shape translates at a constant velocity.
pub fn render_video(style: &StyleFamily, object: u32, seed: u64, frames: usize, h: usize, w: usize) -> Video {
    let mut r = rng::rng(seed);
    let start = random_placement(&mut r, h, w);
    let angle = r.random::<f64>() * 2.0 * PI;
    let speed = h.min(w) as f64 * (0.04 + 0.04 * r.random::<f64>());
    let mut video = Array4::zeros((frames, h, w, 3));
    let mid = (frames as f64 - 1.0) / 2.0;
    for t in 0..frames {
        let dt = t as f64 - mid;
        let p = Placement {
            cy: start.cy + dt * speed * angle.sin(),
            cx: start.cx + dt * speed * angle.cos(),
            radius: start.radius,
        };
        let (img, _) = render_with_mask(style, object, p, h, w);
        video.slice_mut(ndarray::s![t, .., .., ..]).assign(&img);
    }
    video
}

/// Still clip: one rendered frame repeated.
pub fn still_video(frame: &Image, frames: usize) -> Video {
    let (h, w, c) = frame.dim();
    Array4::from_shape_fn((frames, h, w, c), |(_, y, x, ch)| frame[[y, x, ch]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_are_deterministic_and_in_range() {
        let s = StyleFamily::new(3, 11);
        let a = render(&s, 2, 5, 16, 16);
        assert_eq!(a, render(&s, 2, 5, 16, 16));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, render(&s, 2, 6, 16, 16));
    }

    #[test]
    fn families_differ() {
        let a = StyleFamily::new(0, 1);
        let b = StyleFamily::new(1, 1);
        assert_ne!(a.background, b.background);
    }

    #[test]
    fn video_moves_and_still_does_not() {
        let s = StyleFamily::new(1, 2);
        let v = render_video(&s, 0, 3, 4, 16, 16);
        assert_ne!(v.slice(ndarray::s![0, .., .., ..]), v.slice(ndarray::s![3, .., .., ..]));
        let f = render(&s, 0, 3, 16, 16);
        let still = still_video(&f, 3);
        assert_eq!(still.slice(ndarray::s![2, .., .., ..]), f);
    }
}
