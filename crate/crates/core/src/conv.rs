//! Normalized-weight convolution: the local analysis operator `L` and its adjoint.
//!
//! Each filter is stored as raw weights `v` and a scale `s`; the kernel actually
//! applied is `w = s (v − mean(v)) / ‖v − mean(v)‖`, so every kernel is zero-mean
//! with norm `|s|`.
//!
//! The forward operator is a stride-1 *correlation* over a half-sample symmetric
//! padding of the input (`…, x1, x0 | x0, x1, …`), producing same-size output.
//! Under this convention the impulse response of a filter is its kernel flipped
//! in both spatial axes. [`conv_adjoint`] is the exact transpose of the padded
//! operator: it correlates back into the padded domain and folds the border
//! contributions onto the pixels they were mirrored from.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{FeatureMap, PlanarImage};
use crate::real::{dot, Real};

/// Spatial and channel extent of a filter bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterGeometry {
    pub kh: usize,
    pub kw: usize,
    pub in_channels: usize,
    pub filters: usize,
}

impl FilterGeometry {
    pub fn new(kh: usize, kw: usize, in_channels: usize, filters: usize) -> Self {
        Self {
            kh,
            kw,
            in_channels,
            filters,
        }
    }

    /// Number of taps in one filter, `kh · kw · in_channels`.
    pub fn support(&self) -> usize {
        self.kh * self.kw * self.in_channels
    }

    fn pad_top(&self) -> usize {
        (self.kh - 1) / 2
    }

    fn pad_left(&self) -> usize {
        (self.kw - 1) / 2
    }
}

/// Raw weights `v` (filter-major, taps ordered channel, row, column) and per-filter scale `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T> {
    pub geometry: FilterGeometry,
    pub raw: Vec<T>,
    pub scale: Vec<T>,
}

/// Materialized zero-mean kernels `w`, plus the centered norms needed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernels<T> {
    pub geometry: FilterGeometry,
    pub weights: Vec<T>,
}

impl<T: Real> Kernels<T> {
    pub fn filter(&self, f: usize) -> &[T] {
        let l = self.geometry.support();
        &self.weights[f * l..(f + 1) * l]
    }

    /// Wraps explicit kernel weights (not necessarily zero-mean).
    pub fn from_weights(geometry: FilterGeometry, weights: Vec<T>) -> Result<Self> {
        if weights.len() != geometry.support() * geometry.filters {
            return Err(Error::ShapeMismatch(format!(
                "{} kernel weights for {} filters of support {}",
                weights.len(),
                geometry.filters,
                geometry.support()
            )));
        }
        Ok(Self { geometry, weights })
    }
}

struct Centered {
    unit: Vec<f64>,
    norm: f64,
}

fn center(v: &[f64], filter: usize) -> Result<Centered> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateFilter(filter));
    }
    Ok(Centered {
        unit: c.into_iter().map(|x| x / norm).collect(),
        norm,
    })
}

impl<T: Real> FilterBank<T> {
    pub fn new(geometry: FilterGeometry, raw: Vec<T>, scale: Vec<T>) -> Result<Self> {
        if raw.len() != geometry.support() * geometry.filters || scale.len() != geometry.filters {
            return Err(Error::ShapeMismatch(format!(
                "bank with {} raw weights and {} scales for {} filters of support {}",
                raw.len(),
                scale.len(),
                geometry.filters,
                geometry.support()
            )));
        }
        Ok(Self {
            geometry,
            raw,
            scale,
        })
    }

    /// Initializes `v` with the lowest-frequency non-constant separable DCT-II atoms
    /// over (channel, row, column), all filters sharing the scale `scale`.
    ///
    /// Filters beyond the `support − 1` available atoms are drawn from a standard normal.
    pub fn dct_init<R: Rng>(geometry: FilterGeometry, scale: f64, rng: &mut R) -> Self {
        let FilterGeometry {
            kh,
            kw,
            in_channels,
            filters,
        } = geometry;
        let mut freqs: Vec<(usize, usize, usize)> = (0..in_channels)
            .flat_map(|p| (0..kh).flat_map(move |q| (0..kw).map(move |r| (p, q, r))))
            .filter(|&f| f != (0, 0, 0))
            .collect();
        freqs.sort_by_key(|&(p, q, r)| (p + q + r, p, q, r));

        let atom = |n: usize, k: usize, i: usize| -> f64 {
            let a = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
        };

        let l = geometry.support();
        let mut raw = Vec::with_capacity(l * filters);
        for f in 0..filters {
            match freqs.get(f) {
                Some(&(p, q, r)) => {
                    for ch in 0..in_channels {
                        for i in 0..kh {
                            for j in 0..kw {
                                raw.push(T::c(
                                    atom(in_channels, p, ch) * atom(kh, q, i) * atom(kw, r, j),
                                ));
                            }
                        }
                    }
                }
                None => {
                    for _ in 0..l {
                        let g: f64 = rng.sample(StandardNormal);
                        raw.push(T::c(g));
                    }
                }
            }
        }
        Self {
            geometry,
            raw,
            scale: vec![T::c(scale); filters],
        }
    }

    pub fn raw_filter(&self, f: usize) -> &[T] {
        let l = self.geometry.support();
        &self.raw[f * l..(f + 1) * l]
    }

    /// Computes `w = s (v − v̄) / ‖v − v̄‖` for every filter.
    pub fn materialize(&self) -> Result<Kernels<T>> {
        let l = self.geometry.support();
        let mut weights = Vec::with_capacity(l * self.geometry.filters);
        for f in 0..self.geometry.filters {
            let v: Vec<f64> = self.raw_filter(f).iter().map(|x| x.f64()).collect();
            let c = center(&v, f)?;
            let s = self.scale[f].f64();
            weights.extend(c.unit.iter().map(|&u| T::c(s * u)));
        }
        Ok(Kernels {
            geometry: self.geometry,
            weights,
        })
    }

    /// Maps a gradient with respect to the materialized kernels onto `(∇v, ∇s)`.
    ///
    /// `∇s = ⟨w/s, ∇w⟩` and `∇v = (s/‖c‖)(I − 11ᵀ/L)(I − ĉĉᵀ)∇w` with `c = v − v̄`,
    /// `ĉ = c/‖c‖`, applied per filter without forming the matrix.
    pub fn weight_backward(&self, grad_w: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let l = self.geometry.support();
        if grad_w.len() != l * self.geometry.filters {
            return Err(Error::ShapeMismatch(format!(
                "kernel gradient of length {} for {} weights",
                grad_w.len(),
                l * self.geometry.filters
            )));
        }
        let mut grad_v = Vec::with_capacity(grad_w.len());
        let mut grad_s = Vec::with_capacity(self.geometry.filters);
        for f in 0..self.geometry.filters {
            let v: Vec<f64> = self.raw_filter(f).iter().map(|x| x.f64()).collect();
            let c = center(&v, f)?;
            let g: Vec<f64> = grad_w[f * l..(f + 1) * l].iter().map(|x| x.f64()).collect();
            let along: f64 = c.unit.iter().zip(&g).map(|(u, g)| u * g).sum();
            grad_s.push(T::c(along));

            let t: Vec<f64> = g.iter().zip(&c.unit).map(|(g, u)| g - along * u).collect();
            let mean = t.iter().sum::<f64>() / l as f64;
            let factor = self.scale[f].f64() / c.norm;
            grad_v.extend(t.iter().map(|&x| T::c(factor * (x - mean))));
        }
        Ok((grad_v, grad_s))
    }
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
pub fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn check_geometry<T: Real>(height: usize, width: usize, k: &Kernels<T>) -> Result<()> {
    if height < k.geometry.kh || width < k.geometry.kw {
        return Err(Error::BadArgument(format!(
            "{height}x{width} raster smaller than {}x{} kernel",
            k.geometry.kh, k.geometry.kw
        )));
    }
    Ok(())
}

/// Symmetrically padded copy of every channel, `(H + kh − 1) × (W + kw − 1)` each.
fn pad<T: Real>(x: &PlanarImage<T>, g: &FilterGeometry) -> Vec<Vec<T>> {
    let (ph, pw) = (g.pad_top() as isize, g.pad_left() as isize);
    let (hp, wp) = (x.height + g.kh - 1, x.width + g.kw - 1);
    (0..x.planes)
        .map(|ch| {
            let plane = x.plane(ch);
            let mut out = Vec::with_capacity(hp * wp);
            for pr in 0..hp {
                let r = reflect(pr as isize - ph, x.height);
                for pc in 0..wp {
                    out.push(plane[r * x.width + reflect(pc as isize - pw, x.width)]);
                }
            }
            out
        })
        .collect()
}

/// Applies the analysis operator: `z[f] = Σ_ch w[f, ch] ⋆ pad(x[ch])`.
pub fn conv_forward<T: Real>(x: &PlanarImage<T>, k: &Kernels<T>) -> Result<FeatureMap<T>> {
    let g = &k.geometry;
    if x.planes != g.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "image has {} channels, filters expect {}",
            x.planes, g.in_channels
        )));
    }
    check_geometry(x.height, x.width, k)?;
    let padded = pad(x, g);
    let (h, w) = (x.height, x.width);
    let wp = w + g.kw - 1;
    let mut out = FeatureMap::zeros(h, w, g.filters);
    out.data
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(f, plane)| {
            let kernel = k.filter(f);
            for (ch, src) in padded.iter().enumerate() {
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let tap = kernel[(ch * g.kh + i) * g.kw + j];
                        for r in 0..h {
                            let row = &src[(r + i) * wp + j..(r + i) * wp + j + w];
                            for (o, &s) in plane[r * w..(r + 1) * w].iter_mut().zip(row) {
                                *o += tap * s;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Exact adjoint of [`conv_forward`]: `⟨conv_forward(x), z⟩ = ⟨x, conv_adjoint(z)⟩`.
pub fn conv_adjoint<T: Real>(z: &FeatureMap<T>, k: &Kernels<T>) -> Result<PlanarImage<T>> {
    let g = &k.geometry;
    if z.planes != g.filters {
        return Err(Error::ShapeMismatch(format!(
            "feature map has {} planes, bank has {} filters",
            z.planes, g.filters
        )));
    }
    check_geometry(z.height, z.width, k)?;
    let (h, w) = (z.height, z.width);
    let (hp, wp) = (h + g.kh - 1, w + g.kw - 1);
    let (ph, pw) = (g.pad_top() as isize, g.pad_left() as isize);

    let mut out = PlanarImage::zeros(h, w, g.in_channels);
    out.data
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ch, dst)| {
            // Transposed correlation into the padded domain.
            let mut acc = vec![T::zero(); hp * wp];
            for f in 0..g.filters {
                let kernel = k.filter(f);
                let src = z.plane(f);
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let tap = kernel[(ch * g.kh + i) * g.kw + j];
                        for r in 0..h {
                            let row = &mut acc[(r + i) * wp + j..(r + i) * wp + j + w];
                            for (a, &s) in row.iter_mut().zip(&src[r * w..(r + 1) * w]) {
                                *a += tap * s;
                            }
                        }
                    }
                }
            }
            // Fold the padding back onto the pixels it mirrors.
            for pr in 0..hp {
                let r = reflect(pr as isize - ph, h);
                for pc in 0..wp {
                    dst[r * w + reflect(pc as isize - pw, w)] += acc[pr * wp + pc];
                }
            }
        });
    Ok(out)
}

/// Gradient of `⟨conv_forward(x, w), z_grad⟩` with respect to the kernel taps `w`.
pub fn conv_kernel_grad<T: Real>(
    x: &PlanarImage<T>,
    z_grad: &FeatureMap<T>,
    geometry: FilterGeometry,
) -> Result<Vec<T>> {
    let g = &geometry;
    if x.planes != g.in_channels
        || z_grad.planes != g.filters
        || x.height != z_grad.height
        || x.width != z_grad.width
    {
        return Err(Error::ShapeMismatch(format!(
            "kernel gradient of {}x{}x{} image against {}x{}x{} features",
            x.height, x.width, x.planes, z_grad.height, z_grad.width, z_grad.planes
        )));
    }
    if x.height < g.kh || x.width < g.kw {
        return Err(Error::BadArgument("raster smaller than kernel".into()));
    }
    let padded = pad(x, g);
    let (h, w) = (x.height, x.width);
    let wp = w + g.kw - 1;
    let l = g.support();
    let mut grad = vec![T::zero(); l * g.filters];
    grad.par_chunks_mut(l).enumerate().for_each(|(f, gf)| {
        let zp = z_grad.plane(f);
        for (ch, src) in padded.iter().enumerate() {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let mut acc = 0.0f64;
                    for r in 0..h {
                        let row = &src[(r + i) * wp + j..(r + i) * wp + j + w];
                        acc += dot(row, &zp[r * w..(r + 1) * w]);
                    }
                    gf[(ch * g.kh + i) * g.kw + j] = T::c(acc);
                }
            }
        }
    });
    Ok(grad)
}

/// Input and kernel gradients of `z = conv_forward(x, w)` given `∂ℓ/∂z`.
pub fn conv_backward<T: Real>(
    x: &PlanarImage<T>,
    z_grad: &FeatureMap<T>,
    k: &Kernels<T>,
) -> Result<(PlanarImage<T>, Vec<T>)> {
    let grad_x = conv_adjoint(z_grad, k)?;
    let grad_k = conv_kernel_grad(x, z_grad, k.geometry)?;
    Ok((grad_x, grad_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn random_bank(rng: &mut ChaCha8Rng, g: FilterGeometry) -> FilterBank<f64> {
        let raw = random_vec(rng, g.support() * g.filters);
        let scale = (0..g.filters).map(|_| rng.random_range(0.5..2.0)).collect();
        FilterBank::new(g, raw, scale).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> PlanarImage<f64> {
        PlanarImage::from_vec(h, w, c, random_vec(rng, h * w * c)).unwrap()
    }

    #[test]
    fn materialize_symmetric_example() {
        let g = FilterGeometry::new(1, 3, 1, 1);
        let bank = FilterBank::new(g, vec![1.0, 2.0, 3.0], vec![1.0]).unwrap();
        let w = bank.materialize().unwrap().weights;
        let r = 1.0 / 2f64.sqrt();
        for (a, b) in w.iter().zip([-r, 0.0, r]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_filter_is_degenerate() {
        let g = FilterGeometry::new(1, 3, 1, 2);
        let bank = FilterBank::new(g, vec![1.0, 2.0, 4.0, 5.0, 5.0, 5.0], vec![1.0, 7.0]).unwrap();
        assert!(matches!(bank.materialize(), Err(Error::DegenerateFilter(1))));
        assert!(matches!(
            bank.weight_backward(&[0.0; 6]),
            Err(Error::DegenerateFilter(1))
        ));
    }

    #[test]
    fn materialized_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = FilterGeometry::new(7, 7, 1, 1);
        let bank = FilterBank::new(g, random_vec(&mut rng, 49), vec![2.0]).unwrap();
        let w = bank.materialize().unwrap().weights;
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mean = w.iter().sum::<f64>() / 49.0;
        assert!(mean.abs() <= 1e-12 * norm);
        assert!((norm - 2.0).abs() <= 1e-6 * 2.0);
    }

    #[test]
    fn negative_scale_keeps_norm() {
        let g = FilterGeometry::new(1, 4, 1, 1);
        let bank = FilterBank::new(g, vec![0.3, -1.0, 2.0, 0.1], vec![-3.0]).unwrap();
        let w = bank.materialize().unwrap().weights;
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 3.0).abs() < 1e-12);
    }

    #[test]
    fn weight_backward_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = FilterGeometry::new(3, 3, 1, 1);
        let bank = FilterBank::new(g, random_vec(&mut rng, 9), vec![3.0]).unwrap();
        let (gv, gs) = bank.weight_backward(&[0.0; 9]).unwrap();
        assert!(gv.iter().chain(&gs).all(|&x| x == 0.0));

        let w = bank.materialize().unwrap().weights;
        let (gv, gs) = bank.weight_backward(&w).unwrap();
        assert!((gs[0] - 3.0).abs() < 1e-12);
        // w lies along v − v̄, which M_v annihilates.
        assert!(gv.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn weight_backward_annihilates_constant_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = FilterGeometry::new(3, 3, 1, 2);
        let bank = random_bank(&mut rng, g);
        let gw = random_vec(&mut rng, 18);
        let (gv, _) = bank.weight_backward(&gw).unwrap();
        for f in 0..2 {
            let s: f64 = gv[f * 9..(f + 1) * 9].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = FilterGeometry::new(3, 3, 1, 1);
        let raw = random_vec(&mut rng, 9);
        let a = FilterBank::new(g, raw.clone(), vec![1.5]).unwrap();
        let b = FilterBank::new(g, raw, vec![1.5 * 2.5]).unwrap();
        let (wa, wb) = (a.materialize().unwrap(), b.materialize().unwrap());
        for (x, y) in wa.weights.iter().zip(&wb.weights) {
            assert!((2.5 * x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_image_is_annihilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = FilterGeometry::new(5, 5, 3, 4);
        let k = random_bank(&mut rng, g).materialize().unwrap();
        let x = PlanarImage::filled(9, 11, 3, 42.0);
        let z = conv_forward(&x, &k).unwrap();
        assert!(z.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        let g = FilterGeometry::new(3, 3, 1, 1);
        let taps: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let k = Kernels::from_weights(g, taps.clone()).unwrap();
        let mut x = PlanarImage::zeros(7, 7, 1);
        *x.at_mut(0, 3, 3) = 1.0;
        let z = conv_forward(&x, &k).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(z.at(0, 3 + 1 - i, 3 + 1 - j), taps[i * 3 + j]);
            }
        }
        let nonzero = z.data.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 9);
    }

    #[test]
    fn adjoint_impulse_scatters_kernel() {
        let g = FilterGeometry::new(3, 3, 1, 1);
        let taps: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let k = Kernels::from_weights(g, taps.clone()).unwrap();
        let mut z = FeatureMap::zeros(6, 6, 1);
        *z.at_mut(0, 2, 3) = 1.0;
        let x = conv_adjoint(&z, &k).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(x.at(0, 2 + i - 1, 3 + j - 1), taps[i * 3 + j]);
            }
        }
        // At the corner, mirrored taps fold back onto the border pixels.
        let mut z = FeatureMap::zeros(6, 6, 1);
        *z.at_mut(0, 0, 0) = 1.0;
        let x = conv_adjoint(&z, &k).unwrap();
        assert_eq!(x.at(0, 0, 0), 1.0 + 2.0 + 4.0 + 5.0);
        assert_eq!(x.at(0, 0, 1), 3.0 + 6.0);
        assert_eq!(x.at(0, 1, 0), 7.0 + 8.0);
        assert_eq!(x.at(0, 1, 1), 9.0);
        assert!((x.data.iter().sum::<f64>() - 45.0).abs() < 1e-12);
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = FilterGeometry::new(3, 3, 1, 2);
        let k = random_bank(&mut rng, g).materialize().unwrap();
        let z = FeatureMap::zeros(6, 6, 2);
        assert!(conv_adjoint(&z, &k).unwrap().data.iter().all(|v| *v == 0.0));
        let x = random_image(&mut rng, 6, 6, 1);
        let (gx, gk) = conv_backward(&x, &z, &k).unwrap();
        assert!(gx.data.iter().chain(&gk).all(|v| *v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let g = FilterGeometry::new(3, 3, 3, 1);
        let k = Kernels::from_weights(g, vec![0.0; 27]).unwrap();
        let x = PlanarImage::<f64>::zeros(5, 5, 1);
        assert!(matches!(conv_forward(&x, &k), Err(Error::ShapeMismatch(_))));
        let z = FeatureMap::<f64>::zeros(5, 5, 2);
        assert!(matches!(conv_adjoint(&z, &k), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-3, 5), 2);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(7, 5), 2);
        assert_eq!(reflect(-6, 5), 4);
    }

    #[test]
    fn dct_init_is_orthonormal_and_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = FilterGeometry::new(5, 5, 1, 24);
        let bank = FilterBank::<f64>::dct_init(g, 1.0, &mut rng);
        for a in 0..24 {
            let va = bank.raw_filter(a);
            assert!(va.iter().sum::<f64>().abs() < 1e-12);
            for b in 0..24 {
                let d = dot(va, bank.raw_filter(b));
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
        assert!(bank.materialize().is_ok());
    }
}
