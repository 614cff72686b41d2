//! Pixel containers and lossless 8-bit PNG I/O.
//!
//! Images are `H×W×C` arrays and videos `T×H×W×C` arrays of `f64` in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::{s, Array3, Array4, Axis};

use crate::error::{Error, Result};

pub type Image = Array3<f64>;
pub type Video = Array4<f64>;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f64 {
    f64::from(v) / 255.0
}

/// Snaps every value onto the 8-bit grid used at file boundaries.
pub fn quantize_image(img: &Image) -> Image {
    img.mapv(|v| dequantize(quantize(v)))
}

pub fn check_finite(img: &Image) -> Result<()> {
    if img.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("image contains NaN or infinity".into()))
    }
}

/// Replicates a single-channel image to three channels.
pub fn gray_to_rgb(img: &Image) -> Image {
    let (h, w, _) = img.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, _)| img[[y, x, 0]])
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 && c != 1 {
        return Err(Error::Shape(format!("cannot write {c}-channel image as PNG")));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if c == 1 {
            let g = quantize(img[[y, x, 0]]);
            Rgb([g, g, g])
        } else {
            Rgb([
                quantize(img[[y, x, 0]]),
                quantize(img[[y, x, 1]]),
                quantize(img[[y, x, 2]]),
            ])
        }
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        dequantize(img.get_pixel(x as u32, y as u32)[c])
    }))
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:04}.png"))
}

/// Writes a video as a directory of numbered PNG frames.
pub fn save_video(video: &Video, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in video.axis_iter(Axis(0)).enumerate() {
        save_png(&frame.to_owned(), &frame_path(dir, t))?;
    }
    Ok(())
}

pub fn load_video(dir: &Path) -> Result<Video> {
    let mut frames = Vec::new();
    loop {
        let p = frame_path(dir, frames.len());
        if !p.exists() {
            break;
        }
        frames.push(load_png(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::Invalid(format!("no frames found in {}", dir.display())));
    }
    stack_frames(&frames)
}

pub fn stack_frames(frames: &[Image]) -> Result<Video> {
    let (h, w, c) = frames[0].dim();
    let mut video = Array4::zeros((frames.len(), h, w, c));
    for (t, f) in frames.iter().enumerate() {
        if f.dim() != (h, w, c) {
            return Err(Error::Shape("frames differ in size".into()));
        }
        video.slice_mut(s![t, .., .., ..]).assign(f);
    }
    Ok(video)
}

pub fn frame(video: &Video, t: usize) -> Image {
    video.slice(s![t, .., .., ..]).to_owned()
}
