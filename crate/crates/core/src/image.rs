use crate::error::{Error, Result};
use crate::real::{cast_slice, dot, Real};

/// A stack of equally sized 2-D planes stored plane-major, row-major within a plane.
///
/// Used both for images (planes = color channels) and for feature maps
/// (planes = filter responses).
#[derive(Debug, Clone, PartialEq)]
pub struct Planes<T> {
    pub height: usize,
    pub width: usize,
    pub planes: usize,
    pub data: Vec<T>,
}

/// An H×W×C raster with nominal intensity range [0, 255].
pub type PlanarImage<T> = Planes<T>;

/// The response of an analysis operator: one plane per filter.
pub type FeatureMap<T> = Planes<T>;

impl<T: Real> Planes<T> {
    pub fn zeros(height: usize, width: usize, planes: usize) -> Self {
        Self {
            height,
            width,
            planes,
            data: vec![T::zero(); height * width * planes],
        }
    }

    pub fn filled(height: usize, width: usize, planes: usize, value: T) -> Self {
        Self {
            height,
            width,
            planes,
            data: vec![value; height * width * planes],
        }
    }

    pub fn from_vec(height: usize, width: usize, planes: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * planes {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{planes} raster",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            planes,
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.height, self.width, self.planes)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Total number of scalar entries (the `N_t` of the noise-ball radius for images).
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self, p: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn plane_mut(&mut self, p: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[p * n..(p + 1) * n]
    }

    #[inline]
    pub fn at(&self, p: usize, r: usize, c: usize) -> T {
        self.data[(p * self.height + r) * self.width + c]
    }

    #[inline]
    pub fn at_mut(&mut self, p: usize, r: usize, c: usize) -> &mut T {
        &mut self.data[(p * self.height + r) * self.width + c]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.planes == other.planes
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.planes, other.height, other.width, other.planes
            )))
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Planes<U> {
        Planes {
            height: self.height,
            width: self.width,
            planes: self.planes,
            data: cast_slice(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            planes: self.planes,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        Self {
            height: self.height,
            width: self.width,
            planes: self.planes,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Extracts a `size`×`size` window with top-left corner at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::BadArgument(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Self::zeros(height, width, self.planes);
        for p in 0..self.planes {
            for r in 0..height {
                let src = (p * self.height + top + r) * self.width + left;
                let dst = (p * height + r) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        Ok(out)
    }
}

/// PSNR in dB of `estimate` against `reference` with peak 255.
pub fn psnr<T: Real>(estimate: &PlanarImage<T>, reference: &PlanarImage<T>) -> f64 {
    let err = estimate.sub(reference).norm();
    20.0 * (255.0 * (estimate.len() as f64).sqrt() / err).log10()
}
