//! Orthogonal projection onto the noise ball `{x : ‖x − y‖₂ ≤ ε}` with a trainable
//! radius `ε = e^α σ √(N − 1)`.
//!
//! Backward passes use `sign(0) = −1`, so a point exactly on the sphere takes the
//! interior branch.

use crate::error::{Error, Result};
use crate::image::PlanarImage;
use crate::real::Real;

/// The network input and its noise level, shared by every projection layer.
#[derive(Debug, Clone)]
pub struct ProjectionContext<T> {
    pub y: PlanarImage<T>,
    pub sigma: f64,
}

impl<T: Real> ProjectionContext<T> {
    pub fn new(y: PlanarImage<T>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::BadArgument(format!("sigma must be positive, got {sigma}")));
        }
        if y.len() < 2 {
            return Err(Error::BadArgument("image must have at least 2 entries".into()));
        }
        Ok(Self { y, sigma })
    }

    /// Radius for the trainable log-scale `alpha`.
    pub fn epsilon(&self, alpha: f64) -> Result<f64> {
        epsilon(alpha, self.sigma, self.y.len())
    }
}

/// `ε = e^α σ √(N_t − 1)`.
pub fn epsilon(alpha: f64, sigma: f64, n_total: usize) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::BadArgument(format!("sigma must be positive, got {sigma}")));
    }
    if n_total < 2 {
        return Err(Error::BadArgument(format!("need N_t ≥ 2, got {n_total}")));
    }
    Ok(alpha.exp() * sigma * ((n_total - 1) as f64).sqrt())
}

/// Projects `v` onto the ball of radius `eps` around `y`; returns `q` and `‖v − y‖`.
pub fn project<T: Real>(
    v: &PlanarImage<T>,
    y: &PlanarImage<T>,
    eps: f64,
) -> Result<(PlanarImage<T>, f64)> {
    v.check_same_shape(y, "projection")?;
    let residual = v.sub(y);
    let rn = residual.norm();
    let scale = eps / rn.max(eps);
    let mut q = y.clone();
    if scale == 1.0 {
        q.clone_from(v);
    } else {
        for (qi, ri) in q.data.iter_mut().zip(&residual.data) {
            *qi = T::c(qi.f64() + scale * ri.f64());
        }
    }
    Ok((q, rn))
}

/// Whether `‖v − y‖ − ε > 0` under the `sign(0) = −1` convention.
#[inline]
fn outside(rn: f64, eps: f64) -> bool {
    rn > eps
}

/// `∇v = εγ (I − β⁺ γ² (v − y)(v − y)ᵀ) ∇q` with `γ = 1/max(‖v − y‖, ε)`.
pub fn project_input_backward<T: Real>(
    v: &PlanarImage<T>,
    y: &PlanarImage<T>,
    eps: f64,
    grad_q: &PlanarImage<T>,
) -> Result<PlanarImage<T>> {
    v.check_same_shape(y, "projection backward")?;
    v.check_same_shape(grad_q, "projection backward")?;
    let residual = v.sub(y);
    let rn = residual.norm();
    if !outside(rn, eps) {
        return Ok(grad_q.clone());
    }
    let gamma = 1.0 / rn;
    let eg = eps * gamma;
    let radial = gamma * gamma * residual.dot(grad_q);
    let mut g = grad_q.zeros_like();
    for ((gi, &qi), &ri) in g.data.iter_mut().zip(&grad_q.data).zip(&residual.data) {
        *gi = T::c(eg * (qi.f64() - radial * ri.f64()));
    }
    Ok(g)
}

/// `∇α = μ (v − y)ᵀ ∇q` with `μ = εγ (1 − εγ β⁻)`; `∂ε/∂α = ε` is already folded into `μ`.
pub fn project_param_backward<T: Real>(
    v: &PlanarImage<T>,
    y: &PlanarImage<T>,
    eps: f64,
    grad_q: &PlanarImage<T>,
) -> Result<f64> {
    v.check_same_shape(y, "projection backward")?;
    v.check_same_shape(grad_q, "projection backward")?;
    let residual = v.sub(y);
    let rn = residual.norm();
    // Inside the ball γ = 1/ε, so μ = 1·(1 − 1) vanishes identically.
    if !outside(rn, eps) {
        return Ok(0.0);
    }
    let mu = eps / rn;
    Ok(mu * residual.dot(grad_q))
}
