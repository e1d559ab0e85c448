//! Numerical verification suite: central finite differences against every analytic
//! backward pass, dot-product tests for every adjoint, an exhaustive block-matching
//! oracle, and projection invariants. All checks run in `f64`.
//!
//! Gradient agreement is measured as `‖g_analytic − g_fd‖₂ / max(‖g_analytic‖₂, ‖g_fd‖₂)`
//! over the checked coordinates, with step `h_i = 1e−4 · max(1, |θ_i|)`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conv::{
    conv_adjoint, conv_forward, conv_kernel_grad, reflect, FilterBank, FilterGeometry, Kernels,
};
use crate::image::PlanarImage;
use crate::network::{
    backward_stages, forward_stages, network_backward, network_forward, Architecture, InitConfig,
    NetworkParams, Variant,
};
use crate::nonlocal::{
    block_match, group_filter, group_filter_adjoint, group_weight_backward, nonlocal_adjoint,
    nonlocal_forward, BlockMatchConfig, GroupIndexTable, GroupWeights,
};
use crate::projection::{epsilon, project, project_input_backward, project_param_backward};
use crate::rbf::{
    clip_backward, clip_forward, make_centers, rbf_backward, rbf_forward, rbf_precision_grad, ClipRange,
    RbfMixture,
};
use crate::training::psnr_loss;

pub const LAYER_TOL: f64 = 1e-5;
pub const CHAIN_TOL: f64 = 1e-4;
pub const ADJOINT_TOL: f64 = 1e-10;
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} instances={:<5} max_err={:.3e} tol={:.0e} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.tolerance,
            self.seconds
        )
    }
}

/// Names accepted by [`run_module`].
pub const MODULES: &[&str] = &[
    "weight-norm",
    "conv",
    "rbf",
    "clip",
    "group-weights",
    "projection",
    "loss",
    "network",
    "adjoint",
    "block-matching",
    "projection-invariants",
];

pub fn run_module(name: &str) -> Option<Vec<CheckReport>> {
    let reports = match name {
        "weight-norm" => vec![check_weight_norm(20, 1)],
        "conv" => vec![check_conv_backward(20, 2)],
        "rbf" => vec![check_rbf(20, 3), check_rbf_precision(20, 18)],
        "clip" => vec![check_clip(20, 4)],
        "group-weights" => vec![check_group_weights(20, 5)],
        "projection" => vec![
            check_projection_input(20, 6),
            check_projection_alpha(20, 7),
        ],
        "loss" => vec![check_psnr_loss(20, 8)],
        "network" => vec![
            check_composite(Variant::Local, 20, 9),
            check_composite(Variant::NonLocal, 20, 10),
            check_network_chain(Variant::Local, 20, 11),
            check_network_chain(Variant::NonLocal, 20, 12),
        ],
        "adjoint" => vec![
            check_conv_adjoint(100, 13),
            check_group_filter_adjoint(100, 14),
            check_nonlocal_adjoint(100, 15),
        ],
        "block-matching" => vec![check_block_matching(50, 16)],
        "projection-invariants" => vec![check_projection_invariants(1000, 17)],
        _ => return None,
    };
    Some(reports)
}

pub fn run_all() -> Vec<CheckReport> {
    MODULES
        .iter()
        .flat_map(|m| run_module(m).expect("known module"))
        .collect()
}

/// Norm-wise relative discrepancy between two gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Central differences of `f` at `x` along the listed coordinates.
pub fn central_differences(f: &dyn Fn(&[f64]) -> f64, x: &[f64], coords: &[usize]) -> Vec<f64> {
    let steps: Vec<f64> = x.iter().map(|&v| step(v)).collect();
    central_differences_with_steps(f, x, coords, &steps)
}

/// As [`central_differences`] with an explicit step per coordinate.
pub fn central_differences_with_steps(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    steps: &[f64],
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let h = steps[i];
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    instances: usize,
    max_error: f64,
    failed: bool,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            instances: 0,
            max_error: 0.0,
            failed: false,
            start: Instant::now(),
        }
    }

    fn record(&mut self, err: f64) {
        self.instances += 1;
        if !(err <= self.tolerance) {
            self.failed = true;
        }
        if err.is_nan() {
            self.max_error = f64::NAN;
        } else if !self.max_error.is_nan() {
            self.max_error = self.max_error.max(err);
        }
    }

    fn fail(&mut self) {
        self.instances += 1;
        self.failed = true;
        self.max_error = f64::INFINITY;
    }

    fn finish(self) -> CheckReport {
        CheckReport {
            name: self.name.into(),
            instances: self.instances,
            max_error: self.max_error,
            tolerance: self.tolerance,
            passed: !self.failed,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn uniforms(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn raster(h: usize, w: usize, c: usize, data: &[f64]) -> PlanarImage<f64> {
    PlanarImage::from_vec(h, w, c, data.to_vec()).expect("raster shape")
}

fn random_geometry(rng: &mut ChaCha8Rng) -> FilterGeometry {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let kw = if k == 1 { 3 } else { k };
    FilterGeometry::new(k, kw, [1, 3][rng.random_range(0..2)], rng.random_range(1..4))
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn check_weight_norm(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("weight-norm (v, s)", LAYER_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let g = random_geometry(&mut rng);
        let (nv, nf) = (g.support() * g.filters, g.filters);
        let r = normals(&mut rng, nv);
        let mut theta = normals(&mut rng, nv);
        theta.extend(uniforms(&mut rng, nf, 0.3, 3.0).iter().map(|s| if rng.random_bool(0.2) { -s } else { *s }));
        // ℓ(w) = ⟨R, w⟩ + ¼ Σ w⁴, so ∇w = R + w³.
        let loss = |t: &[f64]| {
            let bank = FilterBank::new(g, t[..nv].to_vec(), t[nv..].to_vec()).unwrap();
            let w = bank.materialize().unwrap().weights;
            w.iter().zip(&r).map(|(w, r)| r * w + 0.25 * w.powi(4)).sum::<f64>()
        };
        let bank = FilterBank::new(g, theta[..nv].to_vec(), theta[nv..].to_vec()).unwrap();
        let w = bank.materialize().unwrap().weights;
        let grad_w: Vec<f64> = w.iter().zip(&r).map(|(w, r)| r + w.powi(3)).collect();
        let (gv, gs) = bank.weight_backward(&grad_w).unwrap();
        let analytic: Vec<f64> = gv.into_iter().chain(gs).collect();
        let fd = central_differences(&loss, &theta, &all(theta.len()));
        tally.record(relative_error(&analytic, &fd));
    }
    tally.finish()
}

pub fn check_conv_backward(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("conv (input, v, s)", LAYER_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let g = random_geometry(&mut rng);
        let (h, w) = (rng.random_range(5..10), rng.random_range(5..10));
        let (nv, nf, nx) = (g.support() * g.filters, g.filters, h * w * g.in_channels);
        let r = normals(&mut rng, h * w * g.filters);
        let mut theta = normals(&mut rng, nv);
        theta.extend(uniforms(&mut rng, nf, 0.3, 3.0));
        theta.extend(uniforms(&mut rng, nx, 0.0, 10.0));
        let split = |t: &[f64]| {
            let bank = FilterBank::new(g, t[..nv].to_vec(), t[nv..nv + nf].to_vec()).unwrap();
            let x = raster(h, w, g.in_channels, &t[nv + nf..]);
            (bank, x)
        };
        // ℓ = ⟨R, z⟩ + ½‖z‖²/10 with z = conv(x, w).
        let loss = |t: &[f64]| {
            let (bank, x) = split(t);
            let z = conv_forward(&x, &bank.materialize().unwrap()).unwrap();
            z.data.iter().zip(&r).map(|(z, r)| r * z + 0.05 * z * z).sum::<f64>()
        };
        let (bank, x) = split(&theta);
        let k = bank.materialize().unwrap();
        let z = conv_forward(&x, &k).unwrap();
        let gz = raster(h, w, g.filters, &z.data.iter().zip(&r).map(|(z, r)| r + 0.1 * z).collect::<Vec<_>>());
        let gx = conv_adjoint(&gz, &k).unwrap();
        let gk = conv_kernel_grad(&x, &gz, g).unwrap();
        let (gv, gs) = bank.weight_backward(&gk).unwrap();
        let analytic: Vec<f64> = gv.into_iter().chain(gs).chain(gx.data).collect();
        let fd = central_differences(&loss, &theta, &all(theta.len()));
        tally.record(relative_error(&analytic, &fd));
    }
    tally.finish()
}

pub fn check_rbf(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("rbf mixture (z, pi)", LAYER_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let m = [5, 11, 51][rng.random_range(0..3)];
        let d = rng.random_range(1..4);
        let (h, w) = (3, 4);
        let n = h * w * d;
        let centers = make_centers(m, -100.0, 100.0).unwrap();
        let spacing = centers[1] - centers[0];
        let a = rng.random_range(0.25..2.0) / (2.0 * spacing * spacing);
        let r = normals(&mut rng, n);
        let mut theta = uniforms(&mut rng, n, -95.0, 95.0);
        theta.extend(normals(&mut rng, d * m));
        let split = |t: &[f64]| {
            let z = raster(h, w, d, &t[..n]);
            let mix = RbfMixture::new(centers.clone(), a, t[n..].to_vec()).unwrap();
            (z, mix)
        };
        let loss = |t: &[f64]| {
            let (z, mix) = split(t);
            let p = rbf_forward(&z, &mix).unwrap();
            p.data.iter().zip(&r).map(|(p, r)| r * p + 0.5 * p * p).sum::<f64>()
        };
        let (z, mix) = split(&theta);
        let p = rbf_forward(&z, &mix).unwrap();
        let gp = raster(h, w, d, &p.data.iter().zip(&r).map(|(p, r)| r + p).collect::<Vec<_>>());
        let (gz, gpi) = rbf_backward(&z, &mix, &gp).unwrap();
        let analytic: Vec<f64> = gz.data.into_iter().chain(gpi).collect();
        let fd = central_differences(&loss, &theta, &all(theta.len()));
        tally.record(relative_error(&analytic, &fd));
    }
    tally.finish()
}

/// The shared precision `a` is tiny in absolute terms, so its step is relative: `h = 1e−4 · a`.
pub fn check_rbf_precision(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("rbf precision (a)", LAYER_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let m = [5, 11, 51][rng.random_range(0..3)];
        let d = rng.random_range(1..4);
        let n = 12 * d;
        let centers = make_centers(m, -100.0, 100.0).unwrap();
        let spacing = centers[1] - centers[0];
        let a = rng.random_range(0.25..2.0) / (2.0 * spacing * spacing);
        let z = raster(3, 4, d, &uniforms(&mut rng, n, -95.0, 95.0));
        let coeffs = normals(&mut rng, d * m);
        let r = normals(&mut rng, n);
        let loss = |a: f64| {
            let mix = RbfMixture::new(centers.clone(), a, coeffs.clone()).unwrap();
            let p = rbf_forward(&z, &mix).unwrap();
            p.data.iter().zip(&r).map(|(p, r)| r * p + 0.5 * p * p).sum::<f64>()
        };
        let mix = RbfMixture::new(centers.clone(), a, coeffs.clone()).unwrap();
        let p = rbf_forward(&z, &mix).unwrap();
        let gp = raster(3, 4, d, &p.data.iter().zip(&r).map(|(p, r)| r + p).collect::<Vec<_>>());
        let analytic = rbf_precision_grad(&z, &mix, &gp).unwrap();
        let h = 1e-4 * a;
        let fd = (loss(a + h) - loss(a - h)) / (2.0 * h);
        tally.record(relative_error(&[analytic], &[fd]));
    }
    tally.finish()
}

pub fn check_clip(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("clip layers", LAYER_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let range = if i % 2 == 0 { ClipRange::RBF } else { ClipRange::INTENSITY };
        let span = range.hi - range.lo;
        let n = 40;
        let mut z = Vec::with_capacity(n);
        while z.len() < n {
            let v: f64 = rng.random_range(range.lo - 0.5 * span..range.hi + 0.5 * span);
            // Stay more than 10 steps away from either kink.
            if (v - range.lo).abs() > 10.0 * step(v) && (v - range.hi).abs() > 10.0 * step(v) {
                z.push(v);
            }
        }
        let r = normals(&mut rng, n);
        let loss = |t: &[f64]| {
            let c = clip_forward(&raster(1, n, 1, t), range);
            c.data.iter().zip(&r).map(|(c, r)| r * c + 0.01 * c * c).sum::<f64>()
        };
        let zm = raster(1, n, 1, &z);
        let c = clip_forward(&zm, range);
        let gc = raster(1, n, 1, &c.data.iter().zip(&r).map(|(c, r)| r + 0.02 * c).collect::<Vec<_>>());
        let analytic = clip_backward(&zm, &gc, range).unwrap().data;
        let fd = central_differences(&loss, &z, &all(n));
        tally.record(relative_error(&analytic, &fd));
    }
    tally.finish()
}

fn random_table(rng: &mut ChaCha8Rng, h: usize, w: usize, group: usize) -> GroupIndexTable {
    let y = raster(h, w, 1, &uniforms(rng, h * w, 0.0, 255.0));
    block_match(
        &y,
        BlockMatchConfig {
            patch: (3, 3),
            window: (5, 5),
            group,
        },
    )
    .unwrap()
}

pub fn check_group_weights(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("group weights (u, features)", LAYER_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (h, w, d) = (7, 8, rng.random_range(1..4));
        let p = rng.random_range(2..6);
        let table = random_table(&mut rng, h, w, p);
        let n = h * w * d;
        let r = normals(&mut rng, n);
        let mut theta = uniforms(&mut rng, p, 0.2, 1.5);
        theta.extend(normals(&mut rng, n));
        let split = |t: &[f64]| (GroupWeights::new(t[..p].to_vec()), raster(h, w, d, &t[p..]));
        let loss = |t: &[f64]| {
            let (gw, f) = split(t);
            let o = group_filter(&f, &table, &gw).unwrap();
            o.data.iter().zip(&r).map(|(o, r)| r * o + 0.5 * o * o).sum::<f64>()
        };
        let (gw, f) = split(&theta);
        let o = group_filter(&f, &table, &gw).unwrap();
        let go = raster(h, w, d, &o.data.iter().zip(&r).map(|(o, r)| r + o).collect::<Vec<_>>());
        let gu = group_weight_backward(&f, &table, &gw, &go).unwrap();
        let gf = group_filter_adjoint(&go, &table, &gw).unwrap();
        let analytic: Vec<f64> = gu.into_iter().chain(gf.data).collect();
        let fd = central_differences(&loss, &theta, &all(theta.len()));
        tally.record(relative_error(&analytic, &fd));
    }
    tally.finish()
}

/// Random projection instance with `‖v − y‖ / ε` equal to `ratio` at `α = alpha`.
fn projection_instance(
    rng: &mut ChaCha8Rng,
    ratio: f64,
) -> (PlanarImage<f64>, PlanarImage<f64>, f64, f64, Vec<f64>) {
    let n = rng.random_range(8..40);
    let y = raster(1, n, 1, &uniforms(rng, n, 0.0, 255.0));
    let v = raster(1, n, 1, &y.data.iter().map(|y| y + 20.0 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>());
    let rn = v.sub(&y).norm();
    let alpha: f64 = rng.random_range(-1.0..1.0);
    let sigma = rn / ratio / (alpha.exp() * ((n - 1) as f64).sqrt());
    let r = normals(rng, n);
    (v, y, alpha, sigma, r)
}

pub fn check_projection_input(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("projection input", LAYER_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let ratio = if i % 2 == 0 { 2.0 } else { 0.5 };
        let (v, y, alpha, sigma, r) = projection_instance(&mut rng, ratio);
        let n = v.len();
        let eps = epsilon(alpha, sigma, n).unwrap();
        let loss = |t: &[f64]| {
            let (q, _) = project(&raster(1, n, 1, t), &y, eps).unwrap();
            q.data.iter().zip(&r).map(|(q, r)| r * q + 0.01 * q * q).sum::<f64>()
        };
        let (q, _) = project(&v, &y, eps).unwrap();
        let gq = raster(1, n, 1, &q.data.iter().zip(&r).map(|(q, r)| r + 0.02 * q).collect::<Vec<_>>());
        let analytic = project_input_backward(&v, &y, eps, &gq).unwrap().data;
        let fd = central_differences(&loss, &v.data, &all(n));
        tally.record(relative_error(&analytic, &fd));
    }
    tally.finish()
}

pub fn check_projection_alpha(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("projection alpha", LAYER_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let ratio = if i % 2 == 0 { 2.0 } else { 0.5 };
        let (v, y, alpha, sigma, r) = projection_instance(&mut rng, ratio);
        let n = v.len();
        let loss = |t: &[f64]| {
            let eps = epsilon(t[0], sigma, n).unwrap();
            let (q, _) = project(&v, &y, eps).unwrap();
            q.data.iter().zip(&r).map(|(q, r)| r * q + 0.01 * q * q).sum::<f64>()
        };
        let eps = epsilon(alpha, sigma, n).unwrap();
        let (q, _) = project(&v, &y, eps).unwrap();
        let gq = raster(1, n, 1, &q.data.iter().zip(&r).map(|(q, r)| r + 0.02 * q).collect::<Vec<_>>());
        let analytic = [project_param_backward(&v, &y, eps, &gq).unwrap()];
        let fd = central_differences(&loss, &[alpha], &[0]);
        tally.record(relative_error(&analytic, &fd));
    }
    tally.finish()
}

pub fn check_psnr_loss(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("psnr loss", LAYER_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let n = rng.random_range(4..50);
        let x = raster(1, n, 1, &uniforms(&mut rng, n, 0.0, 255.0));
        let est: Vec<f64> = x.data.iter().map(|v| v + rng.random_range(-30.0..30.0)).collect();
        let loss = |t: &[f64]| psnr_loss(&raster(1, n, 1, t), &x).unwrap().0;
        let (_, g) = psnr_loss(&raster(1, n, 1, &est), &x).unwrap();
        let fd = central_differences(&loss, &est, &all(n));
        tally.record(relative_error(&g.data, &fd));
    }
    tally.finish()
}

fn tiny_architecture(rng: &mut ChaCha8Rng, variant: Variant, stages: usize) -> Architecture {
    let channels = if rng.random_bool(0.3) { 3 } else { 1 };
    Architecture {
        variant,
        channels,
        kernel: (3, 3),
        filters: rng.random_range(2..5),
        stages,
        group: rng.random_range(2..5),
        window: (5, 5),
        rbf_kernels: [5, 7, 9][rng.random_range(0..3)],
        rbf_range: ClipRange::RBF,
        train_precision: rng.random_bool(0.5),
    }
}

/// A tiny random network and a noisy/clean pair whose forward pass stays clear of
/// every kink (RBF clip, projection sphere, output clip) by a relative margin.
struct NetworkInstance {
    params: NetworkParams<f64>,
    noisy: PlanarImage<f64>,
    clean: PlanarImage<f64>,
    sigma: f64,
}

fn network_instance(rng: &mut ChaCha8Rng, variant: Variant, stages: usize) -> NetworkInstance {
    loop {
        let arch = tiny_architecture(rng, variant, stages);
        let (h, w) = (rng.random_range(7..11), rng.random_range(7..11));
        let mut init = InitConfig::for_architecture(&arch);
        init.filter_scale = rng.random_range(0.3..1.5);
        init.seed = rng.random();
        let mut params = NetworkParams::<f64>::init(arch.clone(), &init).unwrap();
        for layer in &mut params.layers {
            for v in &mut layer.bank.raw {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            for c in &mut layer.rbf.coeffs {
                *c = 5.0 * rng.sample::<f64, _>(StandardNormal);
            }
            if let Some(g) = &mut layer.group {
                for u in &mut g.raw {
                    *u = rng.random_range(0.2..1.5);
                }
            }
            layer.alpha = rng.random_range(-1.5..0.5);
        }
        let n = h * w * arch.channels;
        let clean = raster(h, w, arch.channels, &uniforms(rng, n, 40.0, 215.0));
        let sigma = rng.random_range(5.0..30.0);
        let noisy = raster(
            h,
            w,
            arch.channels,
            &clean.data.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>(),
        );
        let Ok((_, tape)) = network_forward(&noisy, sigma, &params) else {
            continue;
        };
        let margin = 1e-3;
        let clear = tape.stages.iter().all(|s| {
            let sphere = (s.residual_norm / s.epsilon - 1.0).abs() > margin;
            let kinks = s.features.data.iter().all(|z| (z.abs() - 100.0).abs() > margin * 100.0);
            sphere && kinks
        }) && tape
            .last_output()
            .data
            .iter()
            .all(|x| x.abs() > 0.25 && (x - 255.0).abs() > 0.25);
        if clear {
            return NetworkInstance {
                params,
                noisy,
                clean,
                sigma,
            };
        }
    }
}

/// Single composite layer: gradient of the stage-1 loss for every parameter in Θ¹.
pub fn check_composite(variant: Variant, instances: usize, seed: u64) -> CheckReport {
    let name = match variant {
        Variant::Local => "composite layer (local)",
        Variant::NonLocal => "composite layer (non-local)",
    };
    let mut tally = Tally::new(name, CHAIN_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let inst = network_instance(&mut rng, variant, 1);
        let theta = inst.params.flatten();
        let loss = |t: &[f64]| {
            let mut p = inst.params.clone();
            p.unflatten(t).unwrap();
            let tape = forward_stages(&inst.noisy, inst.sigma, &p, 1).unwrap();
            psnr_loss(tape.last_output(), &inst.clean).unwrap().0
        };
        let tape = forward_stages(&inst.noisy, inst.sigma, &inst.params, 1).unwrap();
        let (_, g) = psnr_loss(tape.last_output(), &inst.clean).unwrap();
        let Ok(grads) = backward_stages(&inst.params, &tape, &g, 0) else {
            tally.fail();
            continue;
        };
        let fd = central_differences(&loss, &theta, &all(theta.len()));
        tally.record(relative_error(&grads.flatten(), &fd));
    }
    tally.finish()
}

/// Two-stage network with the output clip: gradient over a random parameter subset.
pub fn check_network_chain(variant: Variant, instances: usize, seed: u64) -> CheckReport {
    let name = match variant {
        Variant::Local => "network S=2 (local)",
        Variant::NonLocal => "network S=2 (non-local)",
    };
    let mut tally = Tally::new(name, CHAIN_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let inst = network_instance(&mut rng, variant, 2);
        let theta = inst.params.flatten();
        let loss = |t: &[f64]| {
            let mut p = inst.params.clone();
            p.unflatten(t).unwrap();
            let (out, _) = network_forward(&inst.noisy, inst.sigma, &p).unwrap();
            psnr_loss(&out, &inst.clean).unwrap().0
        };
        let (out, tape) = network_forward(&inst.noisy, inst.sigma, &inst.params).unwrap();
        let (_, g) = psnr_loss(&out, &inst.clean).unwrap();
        let Ok(grads) = network_backward(&inst.params, &tape, &g) else {
            tally.fail();
            continue;
        };
        let analytic_all = grads.flatten();
        let mut coords: Vec<usize> = (0..theta.len()).filter(|_| rng.random_bool(0.5)).collect();
        // Always include every α and every trained log-precision.
        for (t, layer) in inst.params.layers.iter().enumerate() {
            let end = inst.params.layer_range(t).end;
            coords.push(end - 1);
            if layer.train_precision {
                coords.push(end - 2);
            }
        }
        coords.sort_unstable();
        coords.dedup();
        let analytic: Vec<f64> = coords.iter().map(|&i| analytic_all[i]).collect();
        let fd = central_differences(&loss, &theta, &coords);
        tally.record(relative_error(&analytic, &fd));
    }
    tally.finish()
}

fn adjoint_gap(ax: &PlanarImage<f64>, z: &PlanarImage<f64>, x: &PlanarImage<f64>, atz: &PlanarImage<f64>) -> f64 {
    let lhs = ax.dot(z);
    let rhs = x.dot(atz);
    let scale = ax.norm() * z.norm();
    if scale == 0.0 {
        (lhs - rhs).abs()
    } else {
        (lhs - rhs).abs() / scale
    }
}

pub fn check_conv_adjoint(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("adjoint: conv", ADJOINT_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let g = random_geometry(&mut rng);
        let (h, w) = (rng.random_range(5..14), rng.random_range(5..14));
        let k = Kernels::from_weights(g, normals(&mut rng, g.support() * g.filters)).unwrap();
        let x = raster(h, w, g.in_channels, &normals(&mut rng, h * w * g.in_channels));
        let z = raster(h, w, g.filters, &normals(&mut rng, h * w * g.filters));
        let ax = conv_forward(&x, &k).unwrap();
        let atz = conv_adjoint(&z, &k).unwrap();
        tally.record(adjoint_gap(&ax, &z, &x, &atz));
    }
    tally.finish()
}

pub fn check_group_filter_adjoint(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("adjoint: group filter", ADJOINT_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while tally.instances < instances {
        let (h, w, d) = (rng.random_range(5..12), rng.random_range(5..12), rng.random_range(1..4));
        let p = rng.random_range(1..6);
        let table = random_table(&mut rng, h, w, p);
        let gw = GroupWeights::new(uniforms(&mut rng, table.group, -0.5, 1.5));
        if gw.normalizer().abs() < 0.1 {
            continue;
        }
        let x = raster(h, w, d, &normals(&mut rng, h * w * d));
        let z = raster(h, w, d, &normals(&mut rng, h * w * d));
        let ax = group_filter(&x, &table, &gw).unwrap();
        let atz = group_filter_adjoint(&z, &table, &gw).unwrap();
        tally.record(adjoint_gap(&ax, &z, &x, &atz));
    }
    tally.finish()
}

pub fn check_nonlocal_adjoint(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("adjoint: non-local operator", ADJOINT_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let g = random_geometry(&mut rng);
        let (h, w) = (rng.random_range(6..12), rng.random_range(6..12));
        let y = raster(h, w, g.in_channels, &uniforms(&mut rng, h * w * g.in_channels, 0.0, 255.0));
        let table = block_match(
            &y,
            BlockMatchConfig {
                patch: (g.kh, g.kw),
                window: (5, 5),
                group: rng.random_range(1..6),
            },
        )
        .unwrap();
        let gw = GroupWeights::new(uniforms(&mut rng, table.group, 0.1, 1.0));
        let k = Kernels::from_weights(g, normals(&mut rng, g.support() * g.filters)).unwrap();
        let x = raster(h, w, g.in_channels, &normals(&mut rng, h * w * g.in_channels));
        let z = raster(h, w, g.filters, &normals(&mut rng, h * w * g.filters));
        let ax = nonlocal_forward(&x, &k, &table, &gw).unwrap();
        let atz = nonlocal_adjoint(&z, &k, &table, &gw).unwrap();
        tally.record(adjoint_gap(&ax, &z, &x, &atz));
    }
    tally.finish()
}

/// Exhaustive search: every window candidate scored with explicit mirrored indexing,
/// fully sorted by `(distance, index)`.
pub fn brute_force_block_match(y: &PlanarImage<f64>, cfg: BlockMatchConfig) -> Vec<usize> {
    let (h, w) = (y.height, y.width);
    let (ph, pw) = cfg.patch;
    let (top, left) = (((ph - 1) / 2) as isize, ((pw - 1) / 2) as isize);
    let px = |c: usize, r: isize, col: isize| y.at(c, reflect(r, h), reflect(col, w));
    let mut table = Vec::with_capacity(h * w * cfg.group);
    for r0 in 0..h as isize {
        for c0 in 0..w as isize {
            let k = r0 as usize * w + c0 as usize;
            let mut cands = Vec::new();
            for r in r0 - (cfg.window.0 / 2) as isize..=r0 + (cfg.window.0 / 2) as isize {
                for c in c0 - (cfg.window.1 / 2) as isize..=c0 + (cfg.window.1 / 2) as isize {
                    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                        continue;
                    }
                    let idx = r as usize * w + c as usize;
                    if idx == k {
                        continue;
                    }
                    let mut d = 0.0;
                    for ch in 0..y.planes {
                        for i in 0..ph as isize {
                            for j in 0..pw as isize {
                                let t = px(ch, r0 + i - top, c0 + j - left) - px(ch, r + i - top, c + j - left);
                                d += t * t;
                            }
                        }
                    }
                    cands.push((d, idx));
                }
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            table.push(k);
            table.extend(cands.iter().take(cfg.group - 1).map(|c| c.1));
        }
    }
    table
}

pub fn check_block_matching(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("block matching vs oracle", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BlockMatchConfig {
        patch: (5, 5),
        window: (11, 11),
        group: 4,
    };
    for _ in 0..instances {
        let y = raster(16, 16, 1, &uniforms(&mut rng, 256, 0.0, 255.0));
        let table = block_match(&y, cfg).unwrap();
        let oracle = brute_force_block_match(&y, cfg);
        let mismatches = table.indices.iter().zip(&oracle).filter(|(a, b)| a != b).count();
        tally.record(mismatches as f64);
    }
    tally.finish()
}

/// Feasibility, idempotence and non-expansiveness of the ball projection.
pub fn check_projection_invariants(instances: usize, seed: u64) -> CheckReport {
    let mut tally = Tally::new("projection invariants", FEASIBILITY_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let n = rng.random_range(2..64);
        let y = raster(1, n, 1, &uniforms(&mut rng, n, 0.0, 255.0));
        let spread = 10f64.powf(rng.random_range(-1.0..2.5));
        let mut v1 = y.clone();
        let mut v2 = y.clone();
        for (a, b) in v1.data.iter_mut().zip(v2.data.iter_mut()) {
            *a += spread * rng.sample::<f64, _>(StandardNormal);
            *b += spread * rng.sample::<f64, _>(StandardNormal);
        }
        let eps = epsilon(rng.random_range(-2.0..1.0), rng.random_range(1.0..50.0), n).unwrap();
        let (q1, _) = project(&v1, &y, eps).unwrap();
        let (q2, _) = project(&v2, &y, eps).unwrap();
        let (qq, _) = project(&q1, &y, eps).unwrap();

        // Worst violation, expressed relative to the tolerance scale of each property.
        let feas = (q1.sub(&y).norm() / eps - 1.0).max(0.0);
        // One rounding of the re-scaled residual plus one of the addition to `y`.
        let idem_bound = 4.0 * f64::EPSILON * (q1.norm() + q1.sub(&y).norm());
        let idem_violation = (q1.sub(&qq).norm() / idem_bound - 1.0).max(0.0);
        let expand = (q1.sub(&q2).norm() / v1.sub(&v2).norm() - 1.0).max(0.0);
        tally.record(feas.max(expand).max(idem_violation));
    }
    tally.finish()
}
