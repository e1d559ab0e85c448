//! Non-local analysis operator: patch transform, block matching on the noisy
//! input, and a convex weighted sum across each group of similar patches.
//!
//! Patch sites coincide with pixel positions: the patch at site `k = r·W + c` is
//! the window the same-size convolution sees when producing output `(r, c)`,
//! taken from the symmetrically padded image. The group table therefore indexes
//! feature-map sites directly.

use rayon::prelude::*;

use crate::conv::{conv_adjoint, conv_forward, reflect, Kernels};
use crate::error::{Error, Result};
use crate::image::{FeatureMap, PlanarImage};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMatchConfig {
    /// Patch height and width.
    pub patch: (usize, usize),
    /// Search window height and width, both odd, centered on the reference site.
    pub window: (usize, usize),
    /// Group size `P`, reference included.
    pub group: usize,
}

/// For every reference site, the `P` site indices forming its group; column 0 is the reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndexTable {
    pub height: usize,
    pub width: usize,
    pub group: usize,
    pub indices: Vec<usize>,
}

impl GroupIndexTable {
    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn row(&self, k: usize) -> &[usize] {
        &self.indices[k * self.group..(k + 1) * self.group]
    }

    fn check<T: Real>(&self, f: &FeatureMap<T>) -> Result<()> {
        if f.height != self.height || f.width != self.width {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} feature sites for a {}x{} group table",
                f.height, f.width, self.height, self.width
            )));
        }
        Ok(())
    }
}

fn window_population(half: usize, n: usize) -> usize {
    (half + 1).min(n)
}

/// Groups every site with its `P − 1` nearest patches (squared Euclidean distance on
/// the raw pixels of `y`) inside the search window. Ties go to the smaller site index.
pub fn block_match<T: Real>(y: &PlanarImage<T>, cfg: BlockMatchConfig) -> Result<GroupIndexTable> {
    let (ph, pw) = cfg.patch;
    let (wh, ww) = cfg.window;
    let (h, w, ch) = (y.height, y.width, y.planes);
    if wh % 2 == 0 || ww % 2 == 0 {
        return Err(Error::BadArgument(format!("search window {wh}x{ww} must be odd")));
    }
    if cfg.group == 0 {
        return Err(Error::BadArgument("group size must be at least 1".into()));
    }
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(Error::BadArgument(format!(
            "patch {ph}x{pw} does not fit a {h}x{w} image"
        )));
    }
    let (half_h, half_w) = (wh / 2, ww / 2);
    let population = window_population(half_h, h) * window_population(half_w, w);
    if cfg.group > population {
        return Err(Error::BadArgument(format!(
            "group size {} exceeds the {population} sites available in a border window",
            cfg.group
        )));
    }

    // Padded channels in f64 so distances accumulate identically for every candidate.
    let (top, left) = ((ph - 1) / 2, (pw - 1) / 2);
    let (hp, wp) = (h + ph - 1, w + pw - 1);
    let padded: Vec<Vec<f64>> = (0..ch)
        .map(|c| {
            let plane = y.plane(c);
            let mut out = Vec::with_capacity(hp * wp);
            for pr in 0..hp {
                let r = reflect(pr as isize - top as isize, h);
                for pc in 0..wp {
                    out.push(plane[r * w + reflect(pc as isize - left as isize, w)].f64());
                }
            }
            out
        })
        .collect();

    let p = cfg.group;
    let mut indices = vec![0usize; h * w * p];
    indices.par_chunks_mut(p).enumerate().for_each(|(k, row)| {
        let (r0, c0) = (k / w, k % w);
        // Sorted ascending by (distance, index); holds at most P − 1 entries.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(p);
        let keep = p - 1;
        if keep > 0 {
            let rows = r0.saturating_sub(half_h)..(r0 + half_h + 1).min(h);
            for r in rows {
                for c in c0.saturating_sub(half_w)..(c0 + half_w + 1).min(w) {
                    let cand = r * w + c;
                    if cand == k {
                        continue;
                    }
                    let worst = if best.len() == keep {
                        best[keep - 1].0
                    } else {
                        f64::INFINITY
                    };
                    if let Some(d) = patch_distance(&padded, wp, (r0, c0), (r, c), cfg.patch, worst)
                    {
                        // Candidates arrive in ascending index order, so equal distances stay behind.
                        let pos = best.partition_point(|&(bd, _)| bd <= d);
                        if pos < keep {
                            if best.len() == keep {
                                best.pop();
                            }
                            best.insert(pos, (d, cand));
                        }
                    }
                }
            }
        }
        row[0] = k;
        for (slot, &(_, idx)) in row[1..].iter_mut().zip(&best) {
            *slot = idx;
        }
    });
    Ok(GroupIndexTable {
        height: h,
        width: w,
        group: p,
        indices,
    })
}

/// Squared distance between two padded patches, or `None` once it reaches `bound`.
#[inline]
fn patch_distance(
    padded: &[Vec<f64>],
    wp: usize,
    a: (usize, usize),
    b: (usize, usize),
    patch: (usize, usize),
    bound: f64,
) -> Option<f64> {
    let mut d = 0.0;
    for plane in padded {
        for i in 0..patch.0 {
            let ra = &plane[(a.0 + i) * wp + a.1..(a.0 + i) * wp + a.1 + patch.1];
            let rb = &plane[(b.0 + i) * wp + b.1..(b.0 + i) * wp + b.1 + patch.1];
            for (x, y) in ra.iter().zip(rb) {
                let t = x - y;
                d += t * t;
            }
        }
        if d >= bound {
            return None;
        }
    }
    Some(d)
}

/// Collaborative-filtering weights `g = u / ⟨1, u⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights<T> {
    pub raw: Vec<T>,
}

impl<T: Real> GroupWeights<T> {
    pub fn new(raw: Vec<T>) -> Self {
        Self { raw }
    }

    /// `u = (1, 1/2, …, 1/P)`.
    pub fn decaying(group: usize) -> Self {
        Self {
            raw: (0..group).map(|p| T::c(1.0 / (p + 1) as f64)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn normalizer(&self) -> f64 {
        self.raw.iter().map(|u| u.f64()).sum()
    }

    pub fn effective(&self) -> Result<Vec<T>> {
        let nu = self.normalizer();
        if nu == 0.0 || !nu.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        Ok(self.raw.iter().map(|u| T::c(u.f64() / nu)).collect())
    }

    fn check(&self, table: &GroupIndexTable) -> Result<()> {
        if self.raw.len() != table.group {
            return Err(Error::ShapeMismatch(format!(
                "{} group weights for groups of {}",
                self.raw.len(),
                table.group
            )));
        }
        Ok(())
    }
}

/// `out[k] = Σ_p g_p · features[indices[k][p]]`, per channel.
pub fn group_filter<T: Real>(
    features: &FeatureMap<T>,
    table: &GroupIndexTable,
    gw: &GroupWeights<T>,
) -> Result<FeatureMap<T>> {
    table.check(features)?;
    gw.check(table)?;
    let g = gw.effective()?;
    let mut out = features.zeros_like();
    let n = features.plane_len();
    out.data.par_chunks_mut(n).enumerate().for_each(|(d, dst)| {
        let src = features.plane(d);
        for (k, o) in dst.iter_mut().enumerate() {
            *o = table
                .row(k)
                .iter()
                .zip(&g)
                .map(|(&j, &gp)| gp * src[j])
                .sum();
        }
    });
    Ok(out)
}

/// Transpose of [`group_filter`]: `out[j] = Σ_{(k,p): indices[k][p] = j} g_p · z[k]`.
pub fn group_filter_adjoint<T: Real>(
    z: &FeatureMap<T>,
    table: &GroupIndexTable,
    gw: &GroupWeights<T>,
) -> Result<FeatureMap<T>> {
    table.check(z)?;
    gw.check(table)?;
    let g = gw.effective()?;
    let mut out = z.zeros_like();
    let n = z.plane_len();
    out.data.par_chunks_mut(n).enumerate().for_each(|(d, dst)| {
        let src = z.plane(d);
        for (k, &zk) in src.iter().enumerate() {
            for (&j, &gp) in table.row(k).iter().zip(&g) {
                dst[j] += gp * zk;
            }
        }
    });
    Ok(out)
}

/// Gradient with respect to the raw weights `u` of `out = group_filter(features)`.
///
/// Uses the Jacobian of `g = u/ν`: `∂g_i/∂u_j = (δ_ij − g_i)/ν`, hence
/// `∇u = (∇g − ⟨g, ∇g⟩·1)/ν`.
pub fn group_weight_backward<T: Real>(
    features: &FeatureMap<T>,
    table: &GroupIndexTable,
    gw: &GroupWeights<T>,
    grad_out: &FeatureMap<T>,
) -> Result<Vec<T>> {
    table.check(features)?;
    features.check_same_shape(grad_out, "group weight backward")?;
    gw.check(table)?;
    let g = gw.effective()?;
    let nu = gw.normalizer();
    let p = table.group;
    let per_channel: Vec<Vec<f64>> = (0..features.planes)
        .into_par_iter()
        .map(|d| {
            let (src, go) = (features.plane(d), grad_out.plane(d));
            let mut acc = vec![0.0f64; p];
            for (k, &gk) in go.iter().enumerate() {
                let gk = gk.f64();
                for (a, &j) in acc.iter_mut().zip(table.row(k)) {
                    *a += src[j].f64() * gk;
                }
            }
            acc
        })
        .collect();
    let mut grad_g = vec![0.0f64; p];
    for acc in &per_channel {
        for (t, a) in grad_g.iter_mut().zip(acc) {
            *t += a;
        }
    }
    let along: f64 = g.iter().zip(&grad_g).map(|(gi, t)| gi.f64() * t).sum();
    Ok(grad_g.iter().map(|t| T::c((t - along) / nu)).collect())
}

pub fn nonlocal_forward<T: Real>(
    x: &PlanarImage<T>,
    k: &Kernels<T>,
    table: &GroupIndexTable,
    gw: &GroupWeights<T>,
) -> Result<FeatureMap<T>> {
    group_filter(&conv_forward(x, k)?, table, gw)
}

pub fn nonlocal_adjoint<T: Real>(
    z: &FeatureMap<T>,
    k: &Kernels<T>,
    table: &GroupIndexTable,
    gw: &GroupWeights<T>,
) -> Result<PlanarImage<T>> {
    conv_adjoint(&group_filter_adjoint(z, table, gw)?, k)
}
