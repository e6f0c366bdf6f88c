//! Procedural test corpora.
//!
//! Dead-leaves images (occluding shapes with power-law sizes) reproduce the
//! scale invariance and edge statistics of natural photographs well enough to
//! train and evaluate at desk scale without shipping a dataset. Each leaf is
//! flat, shaded, or textured, and the result is lightly blurred and carries
//! sensor-like noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct DeadLeaves {
    pub min_radius: f64,
    pub max_radius: f64,
    /// Exponent of the radius density `p(r) ~ r^-alpha`.
    pub alpha: f64,
    /// Fraction of leaves filled with a fine texture.
    pub texture_fraction: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for DeadLeaves {
    fn default() -> Self {
        DeadLeaves {
            min_radius: 2.0,
            max_radius: 80.0,
            alpha: 3.0,
            texture_fraction: 0.35,
            blur_sigma: 0.7,
            noise_sigma: 0.015,
        }
    }
}

enum Fill {
    Flat([f64; 3]),
    Shaded { base: [f64; 3], gx: f64, gy: f64 },
    Grating { base: [f64; 3], amp: f64, fx: f64, fy: f64, phase: f64 },
    Speckle { base: [f64; 3], amp: f64, seed: u64 },
}

fn hash_noise(seed: u64, x: usize, y: usize) -> f64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

impl Fill {
    fn sample(&self, c: usize, x: usize, y: usize, cx: f64, cy: f64) -> f64 {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        match self {
            Fill::Flat(rgb) => rgb[c],
            Fill::Shaded { base, gx, gy } => base[c] + gx * dx + gy * dy,
            Fill::Grating { base, amp, fx, fy, phase } => {
                base[c] + amp * (std::f64::consts::TAU * (fx * dx + fy * dy) + phase).sin()
            }
            Fill::Speckle { base, amp, seed } => base[c] + amp * hash_noise(*seed, x, y),
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let lum: f64 = rng.random_range(0.1..0.9);
    let sat: f64 = rng.random_range(0.0..0.35);
    [0, 1, 2].map(|_| (lum + sat * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[(y as isize + i as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
}

impl DeadLeaves {
    fn radius(&self, rng: &mut ChaCha8Rng) -> f64 {
        // Inverse CDF of r^-alpha on [min, max].
        let e = 1.0 - self.alpha;
        let (a, b) = (self.min_radius.powf(e), self.max_radius.powf(e));
        (a + rng.random::<f64>() * (b - a)).powf(1.0 / e)
    }

    fn fill(&self, rng: &mut ChaCha8Rng) -> Fill {
        let base = random_color(rng);
        if rng.random::<f64>() < self.texture_fraction {
            if rng.random::<bool>() {
                let freq = rng.random_range(0.08..0.45);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Fill::Grating {
                    base,
                    amp: rng.random_range(0.03..0.15),
                    fx: freq * theta.cos(),
                    fy: freq * theta.sin(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            } else {
                Fill::Speckle { base, amp: rng.random_range(0.05..0.25), seed: rng.random() }
            }
        } else if rng.random::<bool>() {
            Fill::Flat(base)
        } else {
            Fill::Shaded { base, gx: rng.random_range(-0.01..0.01), gy: rng.random_range(-0.01..0.01) }
        }
    }

    /// Renders an `h x w` image; identical seeds give identical images.
    pub fn render(&self, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bg = random_color(&mut rng);
        let mut planes: Vec<Vec<f64>> = (0..3).map(|c| vec![bg[c]; h * w]).collect();
        let leaves = ((h * w) as f64 / 350.0).ceil() as usize + 8;
        for _ in 0..leaves {
            let r = self.radius(&mut rng);
            let cx = rng.random_range(-r..w as f64 + r);
            let cy = rng.random_range(-r..h as f64 + r);
            let square = rng.random::<f64>() < 0.3;
            let fill = self.fill(&mut rng);
            let y0 = (cy - r).floor().max(0.0) as usize;
            let y1 = ((cy + r).ceil().max(0.0) as usize).min(h);
            let x0 = (cx - r).floor().max(0.0) as usize;
            let x1 = ((cx + r).ceil().max(0.0) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let inside = if square { dx.abs() < r && dy.abs() < r } else { dx * dx + dy * dy < r * r };
                    if inside {
                        for (c, plane) in planes.iter_mut().enumerate() {
                            plane[y * w + x] = fill.sample(c, x, y, cx, cy);
                        }
                    }
                }
            }
        }
        let noise = Normal::new(0.0, self.noise_sigma.max(1e-12)).expect("valid sigma");
        for plane in &mut planes {
            blur(plane, h, w, self.blur_sigma);
            if self.noise_sigma > 0.0 {
                for v in plane.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
        }
        let data = planes.concat().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(h, w, data).expect("consistent dimensions")
    }
}

/// `count` dead-leaves images with consecutive seeds starting at `seed`.
pub fn corpus(count: usize, h: usize, w: usize, seed: u64) -> Vec<Image> {
    let params = DeadLeaves::default();
    (0..count).map(|i| params.render(h, w, seed.wrapping_add(i as u64))).collect()
}

pub const GRATING_CLASSES: usize = 10;

/// Labeled images: a dead-leaves background with one textured patch whose
/// orientation (5 choices) and spatial frequency (2 choices) define the class.
pub fn grating_dataset(count: usize, size: usize, seed: u64) -> Vec<(Image, usize)> {
    let params = DeadLeaves { texture_fraction: 0.0, noise_sigma: 0.01, ..DeadLeaves::default() };
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5151);
            let label = rng.random_range(0..GRATING_CLASSES);
            let bg = params.render(size, size, s);
            let theta = (label % 5) as f64 * std::f64::consts::PI / 5.0 + rng.random_range(-0.08..0.08);
            let freq = if label < 5 { 0.16 } else { 0.33 } * rng.random_range(0.92..1.08);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.08..0.16);
            let half = size as f64 * rng.random_range(0.22..0.3);
            let cx = rng.random_range(half..size as f64 - half);
            let cy = rng.random_range(half..size as f64 - half);
            let base = rng.random_range(0.3..0.7);
            let img = Image::from_fn(size, size, |c, y, x| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx.abs() < half && dy.abs() < half {
                    let g = (std::f64::consts::TAU * freq * (dx * theta.cos() + dy * theta.sin()) + phase).sin();
                    (base + amp * g + 0.3 * (bg.get(c, y, x) - 0.5) * 0.3).clamp(0.0, 1.0)
                } else {
                    bg.get(c, y, x)
                }
            });
            (img, label)
        })
        .collect()
}
