//! Procedural breast-ultrasound phantoms.
//!
//! A tissue echogenicity map (skin band, fat, glandular tissue, pectoral
//! muscle) is multiplied by Rayleigh speckle, box-smoothed, log-compressed and
//! min-max normalized to `[−1, 1]`. Benign lesions are smooth hypoechoic
//! ellipses, malignant ones spiky star polygons.

use std::f64::consts::PI;

use crate::numerics::{PortableRng, Tensor};

pub const SIZE: usize = 64;
/// Fraction of images carrying bright measurement marks.
pub const MEASUREMENT_RATE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Tensor,
    pub mask: Tensor,
}

/// Lesion outline in pixel coordinates.
#[derive(Clone, Debug)]
enum Lesion {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, theta: f64 },
    Star { vertices: Vec<(f64, f64)> },
}

impl Lesion {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Lesion::Ellipse { cx, cy, a, b, theta } => {
                let (s, c) = theta.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Lesion::Star { vertices } => point_in_polygon(vertices, x, y),
        }
    }
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn benign(rng: &mut PortableRng) -> Lesion {
    let a = rng.uniform_range(5.0, 11.0);
    Lesion::Ellipse {
        cx: rng.uniform_range(20.0, 44.0),
        cy: rng.uniform_range(26.0, 42.0),
        a,
        b: a * rng.uniform_range(0.55, 0.9),
        theta: rng.uniform_range(-0.5, 0.5),
    }
}

/// Star polygon with 8–16 vertices whose radii alternate between spikes and
/// notches; every vertex deviates from the base radius by 25–60%.
fn malignant(rng: &mut PortableRng) -> Lesion {
    let k = 8 + rng.below(9);
    let (cx, cy) = (rng.uniform_range(20.0, 44.0), rng.uniform_range(26.0, 42.0));
    let r0 = rng.uniform_range(6.5, 10.5);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let vertices = (0..k)
        .map(|i| {
            let jitter = rng.uniform_range(0.25, 0.6);
            let r = if i % 2 == 0 { r0 * (1.0 + jitter) } else { r0 * (1.0 - jitter) };
            let ang = phase + 2.0 * PI * i as f64 / k as f64 + rng.uniform_range(-0.15, 0.15);
            (cx + r * ang.cos(), cy + r * ang.sin())
        })
        .collect();
    Lesion::Star { vertices }
}

/// Layer boundary: a base row with gentle sinusoidal undulation.
fn boundary(rng: &mut PortableRng, lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    let base = rng.uniform_range(lo, hi);
    let amp = rng.uniform_range(0.5, 2.5);
    let freq = rng.uniform_range(0.05, 0.15);
    let ph = rng.uniform_range(0.0, 2.0 * PI);
    move |x| base + amp * (freq * x + ph).sin()
}

/// One phantom of class `class_id` (0 normal, 1 benign, 2 malignant).
pub fn generate(class_id: usize, rng: &mut PortableRng) -> Phantom {
    let n = SIZE;
    let skin = boundary(rng, 3.0, 5.0);
    let fat = boundary(rng, 12.0, 20.0);
    let muscle = boundary(rng, 46.0, 54.0);
    let gland_level = rng.uniform_range(0.7, 0.95);
    let fat_level = rng.uniform_range(0.3, 0.45);
    let muscle_level = rng.uniform_range(0.45, 0.6);
    let striation = rng.uniform_range(0.6, 1.2);

    let lesion = match class_id {
        1 => Some(benign(rng)),
        2 => Some(malignant(rng)),
        _ => None,
    };
    let mut mask = vec![0f32; n * n];
    if let Some(l) = &lesion {
        for y in 0..n {
            for x in 0..n {
                if l.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[y * n + x] = 1.0;
                }
            }
        }
    }
    // Column extent of the lesion drives posterior enhancement or shadowing.
    let mut bottom = vec![None::<usize>; n];
    for x in 0..n {
        bottom[x] = (0..n).rev().find(|&y| mask[y * n + x] > 0.0);
    }
    let posterior = if class_id == 1 { 1.35 } else { 0.6 };

    let mut echo = vec![0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut e = if yf < skin(xf) {
                1.8
            } else if yf < fat(xf) {
                fat_level
            } else if yf < muscle(xf) {
                gland_level * (1.0 + 0.15 * (0.4 * yf + 0.3 * (0.2 * xf).sin()).sin())
            } else {
                muscle_level * (1.0 + 0.25 * (striation * yf).sin())
            };
            if mask[y * n + x] > 0.0 {
                e = 0.06;
            } else if let Some(b) = bottom[x] {
                if y > b {
                    e *= posterior;
                }
            }
            echo[y * n + x] = e;
        }
    }

    // Rayleigh speckle with unit scale.
    let speckle: Vec<f64> = (0..n * n).map(|_| (-2.0 * (1.0 - rng.uniform()).ln()).sqrt()).collect();
    let field: Vec<f64> = echo.iter().zip(&speckle).map(|(e, s)| e * s).collect();
    let smooth = box3(&field, n);
    let logged: Vec<f64> = smooth.iter().map(|v| (1.0 + 20.0 * v).ln()).collect();
    let lo = logged.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logged.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut img: Vec<f32> = logged.iter().map(|v| (2.0 * (v - lo) / span - 1.0) as f32).collect();

    if rng.uniform() < MEASUREMENT_RATE {
        draw_measurements(&mut img, &mask, lesion.is_some(), rng);
    }
    Phantom {
        image: Tensor::new([1, n, n], img).expect("phantom"),
        mask: Tensor::new([1, n, n], mask).expect("mask"),
    }
}

/// 3×3 box filter with edge clamping.
fn box3(v: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, n as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, n as i64 - 1) as usize;
                    s += v[yy * n + xx];
                }
            }
            out[y * n + x] = s / 9.0;
        }
    }
    out
}

/// Thin bright dashed lines and caliper crosses, never over lesion pixels.
fn draw_measurements(img: &mut [f32], mask: &[f32], around_lesion: bool, rng: &mut PortableRng) {
    let n = SIZE;
    let put = |img: &mut [f32], x: i64, y: i64| {
        if (0..n as i64).contains(&x) && (0..n as i64).contains(&y) {
            let i = y as usize * n + x as usize;
            if mask[i] == 0.0 {
                img[i] = 1.0;
            }
        }
    };
    let row = rng.uniform_range(8.0, 58.0) as i64;
    let (x0, len) = (rng.uniform_range(2.0, 20.0) as i64, rng.uniform_range(15.0, 40.0) as i64);
    for x in (x0..x0 + len).step_by(2) {
        put(img, x, row);
    }
    let crosses = if around_lesion { 2 } else { 1 };
    for _ in 0..crosses {
        let (cx, cy) = (rng.uniform_range(4.0, 60.0) as i64, rng.uniform_range(10.0, 60.0) as i64);
        for d in -1..=1 {
            put(img, cx + d, cy);
            put(img, cx, cy + d);
        }
    }
}

/// `perimeter² / (4π · area)` of a binary mask, with the perimeter counted as
/// pixel edges between mask and background. `None` for an empty mask.
pub fn boundary_roughness(mask: &Tensor) -> Option<f64> {
    let n = mask.shape().last().copied()?;
    let h = mask.numel() / n;
    let d = mask.data();
    let at = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < n && (y as usize) < h && d[y as usize * n + x as usize] > 0.5;
    let (mut area, mut perim) = (0usize, 0usize);
    for y in 0..h as i64 {
        for x in 0..n as i64 {
            if at(x, y) {
                area += 1;
                perim += [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().filter(|&&(dx, dy)| !at(x + dx, y + dy)).count();
            }
        }
    }
    (area > 0).then(|| (perim * perim) as f64 / (4.0 * PI * area as f64))
}
