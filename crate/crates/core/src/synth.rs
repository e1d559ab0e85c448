//! Seeded procedural scenes: smooth shaded background, overlapping flat and shaded
//! shapes with soft edges, and band-limited texture. Used where no photograph corpus
//! is available (desk-scale training, tests, demos).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::PlanarImage;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Number of foreground shapes.
    pub shapes: usize,
    /// Amplitude of the sinusoidal texture layer, in intensity units.
    pub texture: f64,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            shapes: 6,
            texture: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64, cos: f64, sin: f64 },
    HalfPlane { cy: f64, cx: f64, ny: f64, nx: f64 },
}

impl Shape {
    /// Signed distance, negative inside.
    fn distance(&self, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Disk { cy, cx, r } => ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r,
            Shape::Rect { cy, cx, hy, hx, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = (cos * dx + sin * dy).abs() - hx;
                let v = (-sin * dx + cos * dy).abs() - hy;
                let outside = (u.max(0.0).powi(2) + v.max(0.0).powi(2)).sqrt();
                outside + u.max(v).min(0.0)
            }
            Shape::HalfPlane { cy, cx, ny, nx } => (y - cy) * ny + (x - cx) * nx,
        }
    }
}

struct Layer {
    shape: Shape,
    base: Vec<f64>,
    /// Linear shading across the shape, per channel.
    slope: (f64, f64),
    edge: f64,
}

fn color(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    let luma: f64 = rng.random_range(30.0..225.0);
    (0..channels)
        .map(|_| {
            if channels == 1 {
                luma
            } else {
                (luma + rng.random_range(-60.0..60.0)).clamp(10.0, 245.0)
            }
        })
        .collect()
}

/// Renders one scene; identical `(cfg, seed)` give identical pixels.
pub fn scene<T: Real>(cfg: &SceneConfig, seed: u64) -> PlanarImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let size = h.max(w) as f64;

    let background = color(&mut rng, c);
    let bg_slope = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
    let mut layers = Vec::with_capacity(cfg.shapes);
    for _ in 0..cfg.shapes {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disk {
                cy,
                cx,
                r: rng.random_range(0.08..0.3) * size,
            },
            1 => {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Rect {
                    cy,
                    cx,
                    hy: rng.random_range(0.05..0.3) * size,
                    hx: rng.random_range(0.05..0.3) * size,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            }
            _ => {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Shape::HalfPlane {
                    cy,
                    cx,
                    ny: theta.sin(),
                    nx: theta.cos(),
                }
            }
        };
        layers.push(Layer {
            shape,
            base: color(&mut rng, c),
            slope: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            edge: rng.random_range(0.4..1.5),
        });
    }

    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.15..0.9);
            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.2..1.0))
        })
        .collect();
    let texture_gain: Vec<f64> = (0..c).map(|_| rng.random_range(0.6..1.0)).collect();

    let mut img = PlanarImage::zeros(h, w, c);
    for r in 0..h {
        for col in 0..w {
            let (y, x) = (r as f64, col as f64);
            let mut px: Vec<f64> = background
                .iter()
                .map(|b| b + bg_slope.0 * (y - h as f64 / 2.0) + bg_slope.1 * (x - w as f64 / 2.0))
                .collect();
            for layer in &layers {
                let d = layer.shape.distance(y, x);
                let cover = 1.0 / (1.0 + (d / layer.edge).exp());
                if cover < 1e-6 {
                    continue;
                }
                let shade = layer.slope.0 * (y - h as f64 / 2.0) + layer.slope.1 * (x - w as f64 / 2.0);
                for (p, b) in px.iter_mut().zip(&layer.base) {
                    *p = (1.0 - cover) * *p + cover * (b + shade);
                }
            }
            let tex: f64 = waves
                .iter()
                .map(|&(fy, fx, phase, amp)| amp * (fy * y + fx * x + phase).sin())
                .sum::<f64>()
                * cfg.texture
                / 2.0;
            for (ch, p) in px.iter().enumerate() {
                *img.at_mut(ch, r, col) = T::c((p + texture_gain[ch] * tex).clamp(0.0, 255.0));
            }
        }
    }
    img
}

/// `count` scenes with seeds derived from `seed`.
pub fn scenes<T: Real>(cfg: &SceneConfig, count: usize, seed: u64) -> Vec<PlanarImage<T>> {
    (0..count)
        .map(|i| scene(cfg, seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let cfg = SceneConfig::new(40, 50, 3);
        let a: PlanarImage<f64> = scene(&cfg, 7);
        let b: PlanarImage<f64> = scene(&cfg, 7);
        assert_eq!(a, b);
        assert_eq!((a.height, a.width, a.planes), (40, 50, 3));
        assert!(a.data.iter().all(|v| (0.0..=255.0).contains(v)));
        let c: PlanarImage<f64> = scene(&cfg, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn scenes_have_structure() {
        let imgs: Vec<PlanarImage<f64>> = scenes(&SceneConfig::new(48, 48, 1), 4, 1);
        for img in &imgs {
            let mean = img.data.iter().sum::<f64>() / img.len() as f64;
            let var = img.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.len() as f64;
            assert!(var > 25.0, "flat scene, variance {var}");
        }
    }

    #[test]
    fn signed_distances() {
        let d = Shape::Disk { cy: 0.0, cx: 0.0, r: 2.0 };
        assert!((d.distance(0.0, 3.0) - 1.0).abs() < 1e-12);
        assert!(d.distance(0.0, 0.0) < 0.0);
        let r = Shape::Rect { cy: 0.0, cx: 0.0, hy: 1.0, hx: 2.0, cos: 1.0, sin: 0.0 };
        assert!((r.distance(0.0, 3.0) - 1.0).abs() < 1e-12);
        assert!((r.distance(0.0, 0.0) + 1.0).abs() < 1e-12);
    }
}
