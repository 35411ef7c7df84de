//! 8-bit grayscale PNG conversion for images in `[−1, 1]` and binary masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `[1, H, W]` (or `[H, W]`-sized) tensor in `[−1, 1]` → 8-bit image.
pub fn to_gray(t: &Tensor, h: usize, w: usize) -> Result<GrayImage> {
    if t.numel() != h * w {
        return Err(Error::Shape(format!("image tensor {:?} is not {h}×{w}", t.shape())));
    }
    let px = t.data().iter().map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8).collect();
    GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| Error::Format("image buffer size".into()))
}

/// 8-bit image → `[1, H, W]` in `[−1, 1]`.
pub fn from_gray(img: &GrayImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f32 / 127.5 - 1.0).collect();
    Tensor::new([1, h as usize, w as usize], data).expect("image dims")
}

/// Binary mask `[1, H, W]` in `{0, 1}` → 0/255 image.
pub fn mask_to_gray(m: &Tensor, h: usize, w: usize) -> Result<GrayImage> {
    if m.numel() != h * w {
        return Err(Error::Shape(format!("mask tensor {:?} is not {h}×{w}", m.shape())));
    }
    let px = m.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| Error::Format("mask buffer size".into()))
}

/// Gray image → `{0, 1}` mask, thresholded at half intensity.
pub fn mask_from_gray(img: &GrayImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new([1, h as usize, w as usize], data).expect("mask dims")
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    Ok(image::load_from_memory(bytes)?.to_luma8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gray(&bytes)
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<Vec<u8>> {
    let bytes = encode_png(img)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Pads the shorter side symmetrically by replicating edge pixels (or with
/// `fill` when given) so the image becomes square.
pub fn letterbox(img: &GrayImage, fill: Option<u8>) -> GrayImage {
    let (w, h) = img.dimensions();
    let side = w.max(h);
    let (ox, oy) = ((side - w) / 2, (side - h) / 2);
    GrayImage::from_fn(side, side, |x, y| {
        let inside = x >= ox && x < ox + w && y >= oy && y < oy + h;
        match (inside, fill) {
            (true, _) => *img.get_pixel(x - ox, y - oy),
            (false, Some(v)) => Luma([v]),
            (false, None) => {
                let sx = x.saturating_sub(ox).min(w - 1);
                let sy = y.saturating_sub(oy).min(h - 1);
                *img.get_pixel(sx, sy)
            }
        }
    })
}

/// Otsu threshold over 8-bit intensities: the level maximizing between-class
/// variance. Pixels `> t` form the upper class.
pub fn otsu_threshold(values: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_t) = (0.0, 0.0, -1.0, 0u8);
    for t in 0..256 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    best_t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip_within_quantization() {
        let t = Tensor::from_fn([1, 4, 4], |i| i as f32 / 8.0 - 1.0);
        let back = from_gray(&to_gray(&t, 4, 4).unwrap());
        assert!(t.max_abs_diff(&back).unwrap() <= 1.0 / 127.5 + 1e-6);
        let png = encode_png(&to_gray(&t, 4, 4).unwrap()).unwrap();
        assert_eq!(from_gray(&decode_gray(&png).unwrap()), back);
    }

    #[test]
    fn mask_round_trip_exact() {
        let m = Tensor::from_fn([1, 3, 3], |i| (i % 2) as f32);
        assert_eq!(mask_from_gray(&mask_to_gray(&m, 3, 3).unwrap()), m);
    }

    #[test]
    fn letterbox_pads_edges() {
        let img = GrayImage::from_fn(4, 2, |x, _| Luma([x as u8 * 10]));
        let sq = letterbox(&img, None);
        assert_eq!(sq.dimensions(), (4, 4));
        assert_eq!(sq.get_pixel(3, 0).0[0], 30);
        assert_eq!(sq.get_pixel(0, 3).0[0], 0);
        let z = letterbox(&img, Some(0));
        assert_eq!(z.get_pixel(3, 0).0[0], 0);
        assert_eq!(z.get_pixel(3, 1).0[0], 30);
    }

    #[test]
    fn otsu_splits_bimodal() {
        let mut v = vec![20u8; 50];
        v.extend(vec![200u8; 50]);
        let t = otsu_threshold(&v);
        assert!((20..200).contains(&t));
    }
}
