//! Learned potential gradient `ψ`: a per-channel mixture of Gaussian radial basis
//! functions on shared equidistant centers, preceded by a clipping layer.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::real::Real;

/// Closed interval `[lo, hi]` used by clipping layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRange {
    pub lo: f64,
    pub hi: f64,
}

impl ClipRange {
    pub const RBF: ClipRange = ClipRange {
        lo: -100.0,
        hi: 100.0,
    };
    pub const INTENSITY: ClipRange = ClipRange { lo: 0.0, hi: 255.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::BadArgument(format!("clip range [{lo}, {hi}] is empty")));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn clip<T: Real>(&self, v: T) -> T {
        v.max(T::c(self.lo)).min(T::c(self.hi))
    }

    /// Whether the clip passes gradient at `v` (strict interior only).
    #[inline]
    pub fn passes<T: Real>(&self, v: T) -> bool {
        v > T::c(self.lo) && v < T::c(self.hi)
    }
}

pub fn clip_forward<T: Real>(z: &FeatureMap<T>, range: ClipRange) -> FeatureMap<T> {
    z.map(|v| range.clip(v))
}

/// Routes `grad_out` through where `lo < z < hi`; zero at and beyond the bounds.
pub fn clip_backward<T: Real>(
    z: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
    range: ClipRange,
) -> Result<FeatureMap<T>> {
    z.check_same_shape(grad_out, "clip backward")?;
    let mut g = grad_out.clone();
    for (gv, &zv) in g.data.iter_mut().zip(&z.data) {
        if !range.passes(zv) {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// `m` centers equidistant on `[lo, hi]`, endpoints included.
pub fn make_centers(m: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::BadArgument(format!("need at least 2 centers, got {m}")));
    }
    let step = (hi - lo) / (m - 1) as f64;
    Ok((0..m)
        .map(|j| if j == m - 1 { hi } else { lo + j as f64 * step })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfMixture<T> {
    pub centers: Vec<T>,
    pub precision: T,
    /// Channel-major `D × M` expansion coefficients.
    pub coeffs: Vec<T>,
}

impl<T: Real> RbfMixture<T> {
    pub fn new(centers: Vec<T>, precision: T, coeffs: Vec<T>) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::BadArgument("mixture needs at least 2 centers".into()));
        }
        if !(precision > T::zero()) {
            return Err(Error::BadArgument(format!(
                "precision must be positive, got {precision:?}"
            )));
        }
        if coeffs.len() % centers.len() != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for {} centers",
                coeffs.len(),
                centers.len()
            )));
        }
        Ok(Self {
            centers,
            precision,
            coeffs,
        })
    }

    /// Mixture on `m` centers over `range` with precision `1 / (2 · spacing²)`, every
    /// channel fitted by least squares to the linear shrinkage curve `ψ(x) = slope · x`.
    pub fn shrinkage_init(channels: usize, m: usize, range: ClipRange, slope: f64) -> Result<Self> {
        let centers = make_centers(m, range.lo, range.hi)?;
        let spacing = centers[1] - centers[0];
        let precision = 1.0 / (2.0 * spacing * spacing);
        let fit = fit_curve(&centers, precision, range, |x| slope * x)?;
        let coeffs = (0..channels).flat_map(|_| fit.iter().copied()).map(T::c).collect();
        Self::new(
            centers.into_iter().map(T::c).collect(),
            T::c(precision),
            coeffs,
        )
    }

    pub fn kernels(&self) -> usize {
        self.centers.len()
    }

    pub fn channels(&self) -> usize {
        self.coeffs.len() / self.kernels()
    }

    pub fn channel_coeffs(&self, d: usize) -> &[T] {
        let m = self.kernels();
        &self.coeffs[d * m..(d + 1) * m]
    }

    /// `ψ_d(x) = Σ_j π_dj exp(−a (x − μ_j)²)`.
    #[inline]
    pub fn eval(&self, d: usize, x: T) -> T {
        let a = self.precision;
        self.channel_coeffs(d)
            .iter()
            .zip(&self.centers)
            .map(|(&p, &mu)| {
                let r = x - mu;
                p * (-a * r * r).exp()
            })
            .sum()
    }

    fn check(&self, z: &FeatureMap<T>) -> Result<()> {
        if z.planes != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature channels for a {}-channel mixture",
                z.planes,
                self.channels()
            )));
        }
        Ok(())
    }
}

fn fit_curve(
    centers: &[f64],
    precision: f64,
    range: ClipRange,
    target: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let samples = 20 * centers.len() + 1;
    let xs: Vec<f64> = (0..samples)
        .map(|i| range.lo + (range.hi - range.lo) * i as f64 / (samples - 1) as f64)
        .collect();
    let design = DMatrix::from_fn(samples, centers.len(), |i, j| {
        let r = xs[i] - centers[j];
        (-precision * r * r).exp()
    });
    let rhs = DVector::from_iterator(samples, xs.iter().map(|&x| target(x)));
    let sol = design
        .svd(true, true)
        .solve(&rhs, 1e-10)
        .map_err(|e| Error::BadArgument(format!("least-squares fit failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

/// Applies `ψ_d` to every entry of channel `d`; `z` is expected to be pre-clipped.
pub fn rbf_forward<T: Real>(z: &FeatureMap<T>, mix: &RbfMixture<T>) -> Result<FeatureMap<T>> {
    mix.check(z)?;
    let mut out = z.zeros_like();
    let n = z.plane_len();
    out.data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(d, dst)| {
            for (o, &x) in dst.iter_mut().zip(z.plane(d)) {
                *o = mix.eval(d, x);
            }
        });
    Ok(out)
}

/// Returns `(∂ℓ/∂z, ∂ℓ/∂π)` for `out = rbf_forward(z)` given `∂ℓ/∂out`.
///
/// `∂ψ_d/∂x = Σ_j π_dj (−2a (x − μ_j)) exp(−a (x − μ_j)²)` and
/// `∂ψ_d(x)/∂π_dj = exp(−a (x − μ_j)²)`, summed over every site of channel `d`.
pub fn rbf_backward<T: Real>(
    z: &FeatureMap<T>,
    mix: &RbfMixture<T>,
    grad_out: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, Vec<T>)> {
    mix.check(z)?;
    z.check_same_shape(grad_out, "rbf backward")?;
    let m = mix.kernels();
    let n = z.plane_len();
    let a = mix.precision;
    let two_a = a + a;
    let mut grad_z = z.zeros_like();
    let mut grad_pi = vec![T::zero(); mix.coeffs.len()];
    grad_z
        .data
        .par_chunks_mut(n)
        .zip(grad_pi.par_chunks_mut(m))
        .enumerate()
        .for_each(|(d, (gz, gp))| {
            let pi = mix.channel_coeffs(d);
            let mut acc = vec![0.0f64; m];
            let mut basis = vec![T::zero(); m];
            for ((g, &x), &go) in gz.iter_mut().zip(z.plane(d)).zip(grad_out.plane(d)) {
                let mut deriv = T::zero();
                for j in 0..m {
                    let r = x - mix.centers[j];
                    let e = (-a * r * r).exp();
                    basis[j] = e;
                    deriv -= pi[j] * two_a * r * e;
                }
                *g = go * deriv;
                let gof = go.f64();
                if gof != 0.0 {
                    for (acc_j, e) in acc.iter_mut().zip(&basis) {
                        *acc_j += gof * e.f64();
                    }
                }
            }
            for (p, v) in gp.iter_mut().zip(acc) {
                *p = T::c(v);
            }
        });
    Ok((grad_z, grad_pi))
}

/// `∂ℓ/∂a` for `out = rbf_forward(z)`, using `∂ψ_d(x)/∂a = −Σ_j π_dj (x − μ_j)² exp(−a (x − μ_j)²)`.
pub fn rbf_precision_grad<T: Real>(
    z: &FeatureMap<T>,
    mix: &RbfMixture<T>,
    grad_out: &FeatureMap<T>,
) -> Result<f64> {
    mix.check(z)?;
    z.check_same_shape(grad_out, "rbf backward")?;
    let a = mix.precision;
    let per_channel: Vec<f64> = (0..z.planes)
        .into_par_iter()
        .map(|d| {
            let pi = mix.channel_coeffs(d);
            let mut acc = 0.0f64;
            for (&x, &go) in z.plane(d).iter().zip(grad_out.plane(d)) {
                if go == T::zero() {
                    continue;
                }
                let mut deriv = T::zero();
                for (&p, &mu) in pi.iter().zip(&mix.centers) {
                    let r = x - mu;
                    let r2 = r * r;
                    deriv -= p * r2 * (-a * r2).exp();
                }
                acc += go.f64() * deriv.f64();
            }
            acc
        })
        .collect();
    Ok(per_channel.iter().sum())
}
