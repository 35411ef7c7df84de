//! Agreement between a generated image's hypoechoic region and its mask.

use crate::error::{Error, Result};
use crate::imaging::{otsu_threshold, to_gray};
use crate::numerics::{PortableRng, Tensor};

/// Rows above this fraction of the height are ignored: they hold the bright
/// skin line and the dark subcutaneous fat band.
pub const TOP_EXCLUDED: f64 = 0.2;

fn side(t: &Tensor) -> Result<usize> {
    let s = (t.numel() as f64).sqrt() as usize;
    if s * s != t.numel() || s == 0 {
        return Err(Error::Shape(format!("expected a square single-channel image, got {:?}", t.shape())));
    }
    Ok(s)
}

/// Binary foreground of dark pixels: Otsu on the inverted 8-bit image over
/// rows `[⌊0.2·H⌋, H)`. A region with a single intensity has no foreground.
pub fn hypoechoic_region(image: &Tensor) -> Result<Vec<bool>> {
    let n = side(image)?;
    let inv: Vec<u8> = to_gray(image, n, n)?.into_raw().into_iter().map(|v| 255 - v).collect();
    let top = (TOP_EXCLUDED * n as f64).floor() as usize;
    let region = &inv[top * n..];
    let mut out = vec![false; n * n];
    if region.iter().all(|&v| v == region[0]) {
        return Ok(out);
    }
    let t = otsu_threshold(region);
    for (o, &v) in out[top * n..].iter_mut().zip(region) {
        *o = v > t;
    }
    Ok(out)
}

/// IoU between the Otsu hypoechoic region of `generated` and `mask`.
pub fn mask_adherence(generated: &Tensor, mask: &Tensor) -> Result<f64> {
    if side(mask)? != side(generated)? {
        return Err(Error::Shape(format!("image {:?} vs mask {:?}", generated.shape(), mask.shape())));
    }
    let m: Vec<bool> = mask.data().iter().map(|&v| v >= 0.5).collect();
    if !m.contains(&true) {
        return Err(Error::InvalidArgument("mask_adherence needs a nonempty mask".into()));
    }
    let r = hypoechoic_region(generated)?;
    let inter = r.iter().zip(&m).filter(|(a, b)| **a && **b).count();
    let union = r.iter().zip(&m).filter(|(a, b)| **a || **b).count();
    Ok(inter as f64 / union as f64)
}

/// Mean IoU of each image against a different image's mask (a random
/// derangement): the chance level for [`mask_adherence`].
pub fn shuffled_pair_null(images: &[Tensor], masks: &[Tensor], seed: u64) -> Result<f64> {
    let n = images.len();
    if n < 2 || masks.len() != n {
        return Err(Error::InvalidArgument("shuffled null needs ≥ 2 image/mask pairs".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = PortableRng::derive(seed, 0x5AF1);
    // Sattolo's algorithm yields a single n-cycle, so no index maps to itself.
    for i in (1..n).rev() {
        let j = rng.below(i);
        perm.swap(i, j);
    }
    let mut total = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        total += mask_adherence(&images[i], &masks[j])?;
    }
    Ok(total / n as f64)
}

pub fn flip_horizontal(t: &Tensor) -> Result<Tensor> {
    let n = side(t)?;
    let d = t.data();
    Tensor::new(t.shape().to_vec(), (0..n * n).map(|i| d[(i / n) * n + (n - 1 - i % n)]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disc(n: usize, cx: f64, cy: f64, r: f64) -> Tensor {
        Tensor::from_fn([1, n, n], |i| {
            let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
            if (x - cx).powi(2) + (y - cy).powi(2) <= r * r { 1.0 } else { 0.0 }
        })
    }

    fn smooth(t: &Tensor, n: usize) -> Tensor {
        let d = t.data();
        Tensor::from_fn([1, n, n], |i| {
            let (x, y) = ((i % n) as i64, (i / n) as i64);
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let xx = (x + dx).clamp(0, n as i64 - 1) as usize;
                    let yy = (y + dy).clamp(0, n as i64 - 1) as usize;
                    s += d[yy * n + xx];
                }
            }
            s / 9.0
        })
    }

    #[test]
    fn painted_mask_is_recovered() {
        let m = disc(64, 30.0, 34.0, 9.0);
        let img = smooth(&m.map(|v| 1.0 - 2.0 * v), 64);
        assert!(mask_adherence(&img, &m).unwrap() >= 0.9);
    }

    #[test]
    fn constant_image_scores_zero() {
        let m = disc(64, 30.0, 34.0, 9.0);
        assert_eq!(mask_adherence(&Tensor::full([1, 64, 64], 0.3), &m).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(mask_adherence(&Tensor::zeros([1, 64, 64]), &Tensor::zeros([1, 64, 64])).is_err());
    }

    #[test]
    fn shuffled_null_is_lower() {
        let masks: Vec<Tensor> =
            (0..6).map(|i| disc(64, 14.0 + 7.0 * i as f64, 20.0 + 5.0 * i as f64, 6.0)).collect();
        let images: Vec<Tensor> = masks.iter().map(|m| smooth(&m.map(|v| 1.0 - 2.0 * v), 64)).collect();
        let matched: f64 = images.iter().zip(&masks).map(|(i, m)| mask_adherence(i, m).unwrap()).sum::<f64>() / 6.0;
        let null = shuffled_pair_null(&images, &masks, 1).unwrap();
        assert!(matched > 2.0 * null, "matched {matched} null {null}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn flip_equivariance(seed in 0u64..1000, cx in 12.0f64..52.0, cy in 18.0f64..52.0, r in 3.0f64..10.0) {
            let m = disc(64, cx, cy, r);
            let noise: Tensor = PortableRng::new(seed).uniform_tensor(&[1, 64, 64], -0.4, 0.4);
            let img = m.map(|v| 0.6 - 1.4 * v).zip_map(&noise, |a, b| (a + b).clamp(-1.0, 1.0)).unwrap();
            let a = mask_adherence(&img, &m).unwrap();
            let b = mask_adherence(&flip_horizontal(&img).unwrap(), &flip_horizontal(&m).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
