//! Loss, noise synthesis, Adam, and the greedy-then-joint training procedure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{psnr, PlanarImage};
use crate::network::{backward_stages, forward_stages, network_backward, network_forward, NetworkParams};
use crate::real::Real;

/// Relative slack allowed on `‖x_t − y‖ ≤ ε_t` when activations are single precision.
pub const FEASIBILITY_TOL_F32: f64 = 1e-4;
pub const FEASIBILITY_TOL_F64: f64 = 1e-12;

/// Feasibility slack matching the precision of `T`.
pub fn feasibility_tol<T: Real>() -> f64 {
    if T::epsilon().f64() > 1e-10 {
        FEASIBILITY_TOL_F32
    } else {
        FEASIBILITY_TOL_F64
    }
}

/// Negative PSNR `ℓ = −20 log₁₀(255√N / ‖x̂ − x‖)` and its gradient
/// `(20 / ln 10) (x̂ − x) / ‖x̂ − x‖²` with respect to `x̂`.
pub fn psnr_loss<T: Real>(
    estimate: &PlanarImage<T>,
    target: &PlanarImage<T>,
) -> Result<(f64, PlanarImage<T>)> {
    estimate.check_same_shape(target, "psnr loss")?;
    let diff = estimate.sub(target);
    let sq = diff.dot(&diff);
    if sq == 0.0 {
        return Err(Error::DegenerateLoss);
    }
    let peak = 255.0 * (estimate.len() as f64).sqrt();
    let loss = -20.0 * (peak / sq.sqrt()).log10();
    let k = 20.0 / std::f64::consts::LN_10 / sq;
    Ok((loss, diff.map(|d| T::c(k * d.f64()))))
}

/// Adds i.i.d. zero-mean Gaussian noise of standard deviation `sigma`; no clipping or rounding.
pub fn awgn<T: Real>(x: &PlanarImage<T>, sigma: f64, seed: u64) -> PlanarImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in &mut out.data {
        let n: f64 = rng.sample(StandardNormal);
        *v = T::c(v.f64() + sigma * n);
    }
    out
}

/// σ = 5, 9, …, 29.
pub fn low_noise_grid() -> Vec<f64> {
    (0..7).map(|i| 5.0 + 4.0 * i as f64).collect()
}

/// σ = 30, 34, …, 54.
pub fn high_noise_grid() -> Vec<f64> {
    (0..7).map(|i| 30.0 + 4.0 * i as f64).collect()
}

pub fn sample_noise_grid<R: Rng>(grid: &[f64], rng: &mut R) -> f64 {
    grid[rng.random_range(0..grid.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam step over {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        let g = g.f64();
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        if update != 0.0 {
            *p = T::c(p.f64() - update);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Epochs spent on each layer during greedy training.
    pub greedy_epochs: usize,
    pub joint_epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch (1 = constant).
    pub lr_decay: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub noise_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::grayscale()
    }
}

impl TrainConfig {
    pub fn grayscale() -> Self {
        Self {
            greedy_epochs: 100,
            joint_epochs: 100,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            adam: AdamConfig::default(),
            batch_size: 32,
            noise_grid: low_noise_grid(),
            seed: 0,
        }
    }

    pub fn color() -> Self {
        Self {
            learning_rate: 1e-2,
            ..Self::grayscale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::BadArgument("learning rate and decay must be positive".into()));
        }
        if self.noise_grid.is_empty() || self.noise_grid.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::BadArgument("noise grid must be nonempty and positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::BadArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Greedy { stage: usize },
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean negative PSNR over the epoch's training pairs (dB).
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// Final-epoch loss of each greedy stage, in stage order.
    pub fn greedy_stage_losses(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for e in &self.epochs {
            if let Phase::Greedy { stage } = e.phase {
                match out.iter_mut().find(|(s, _)| *s == stage) {
                    Some(slot) => slot.1 = e.mean_loss,
                    None => out.push((stage, e.mean_loss)),
                }
            }
        }
        out.into_iter().map(|(_, l)| l).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,stage,epoch,mean_loss\n");
        for e in &self.epochs {
            let (phase, stage) = match e.phase {
                Phase::Greedy { stage } => ("greedy", stage.to_string()),
                Phase::Joint => ("joint", String::new()),
            };
            s.push_str(&format!("{phase},{stage},{},{:.6}\n", e.epoch, e.mean_loss));
        }
        s
    }
}

/// A clean image with the noise level and noise seed drawn for one epoch.
#[derive(Debug, Clone, Copy)]
struct Draw {
    image: usize,
    sigma: f64,
    noise_seed: u64,
}

fn epoch_draws(n: usize, cfg: &TrainConfig, phase_tag: u64, epoch: usize) -> Vec<Draw> {
    let mixed = cfg
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(phase_tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(epoch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|image| Draw {
            image,
            sigma: sample_noise_grid(&cfg.noise_grid, &mut rng),
            noise_seed: rng.random(),
        })
        .collect()
}

/// Runs one phase: `epochs` passes over `data`, updating only `trainable` (a range of
/// the flattened parameters) with Adam. `sample` maps a training pair to its loss and
/// full flattened gradient.
fn run_phase<T, F>(
    params: &mut NetworkParams<T>,
    data: &[PlanarImage<T>],
    cfg: &TrainConfig,
    epochs: usize,
    phase: Phase,
    trainable: std::ops::Range<usize>,
    log: &mut TrainingLog,
    sample: F,
) -> Result<()>
where
    T: Real,
    F: Fn(&NetworkParams<T>, &PlanarImage<T>, &PlanarImage<T>, f64) -> Result<Option<(f64, Vec<T>)>>
        + Sync,
{
    let tag = match phase {
        Phase::Greedy { stage } => stage as u64 + 1,
        Phase::Joint => 0,
    };
    let mut state = AdamState::new(trainable.len());
    let mut lr = cfg.learning_rate;
    for epoch in 0..epochs {
        let draws = epoch_draws(data.len(), cfg, tag, epoch);
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for batch in draws.chunks(cfg.batch_size) {
            let current = &*params;
            let results: Vec<Option<(f64, Vec<T>)>> = batch
                .par_iter()
                .map(|d| {
                    let clean = &data[d.image];
                    let noisy = awgn(clean, d.sigma, d.noise_seed);
                    sample(current, &noisy, clean, d.sigma)
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![T::zero(); trainable.len()];
            for (loss, g) in results.into_iter().flatten() {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss in {phase:?} epoch {epoch}")));
                }
                loss_sum += loss;
                counted += 1;
                for (acc, v) in grad.iter_mut().zip(&g[trainable.clone()]) {
                    *acc += *v;
                }
            }
            let mut flat = params.flatten();
            adam_step(&mut flat[trainable.clone()], &grad, &mut state, lr, &cfg.adam)?;
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters in {phase:?} epoch {epoch}")));
            }
            params.unflatten(&flat)?;
        }
        log.epochs.push(EpochLog {
            phase,
            epoch,
            mean_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
        });
        lr *= cfg.lr_decay;
    }
    Ok(())
}

/// Trains layers one at a time; layer `t` minimizes the loss of the stage-`t` output
/// with layers before it frozen.
pub fn greedy_train<T: Real>(
    init: NetworkParams<T>,
    data: &[PlanarImage<T>],
    cfg: &TrainConfig,
) -> Result<(NetworkParams<T>, TrainingLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::BadArgument("training set is empty".into()));
    }
    let mut params = init;
    let mut log = TrainingLog::default();
    for t in 0..params.layers.len() {
        let range = params.layer_range(t);
        run_phase(
            &mut params,
            data,
            cfg,
            cfg.greedy_epochs,
            Phase::Greedy { stage: t },
            range,
            &mut log,
            |p, noisy, clean, sigma| {
                let tape = forward_stages(noisy, sigma, p, t + 1)?;
                tape.check_feasible(feasibility_tol::<T>())?;
                let (loss, grad) = match psnr_loss(tape.last_output(), clean) {
                    Ok(v) => v,
                    Err(Error::DegenerateLoss) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let grads = backward_stages(p, &tape, &grad, t)?;
                Ok(Some((loss, grads.flatten())))
            },
        )?;
    }
    Ok((params, log))
}

/// Fine-tunes all layers jointly on the loss of the clipped network output.
pub fn joint_train<T: Real>(
    init: NetworkParams<T>,
    data: &[PlanarImage<T>],
    cfg: &TrainConfig,
) -> Result<(NetworkParams<T>, TrainingLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::BadArgument("training set is empty".into()));
    }
    let mut params = init;
    let mut log = TrainingLog::default();
    let all = 0..params.parameter_count();
    run_phase(
        &mut params,
        data,
        cfg,
        cfg.joint_epochs,
        Phase::Joint,
        all,
        &mut log,
        |p, noisy, clean, sigma| {
            let (out, tape) = network_forward(noisy, sigma, p)?;
            tape.check_feasible(feasibility_tol::<T>())?;
            let (loss, grad) = match psnr_loss(&out, clean) {
                Ok(v) => v,
                Err(Error::DegenerateLoss) => return Ok(None),
                Err(e) => return Err(e),
            };
            let grads = network_backward(p, &tape, &grad)?;
            Ok(Some((loss, grads.flatten())))
        },
    )?;
    Ok((params, log))
}

/// Greedy initialization followed by joint fine-tuning.
pub fn train<T: Real>(
    init: NetworkParams<T>,
    data: &[PlanarImage<T>],
    cfg: &TrainConfig,
) -> Result<(NetworkParams<T>, TrainingLog)> {
    let (greedy, mut log) = greedy_train(init, data, cfg)?;
    let (joint, joint_log) = joint_train(greedy, data, cfg)?;
    log.epochs.extend(joint_log.epochs);
    Ok((joint, log))
}

/// Average restoration quality at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sigma: f64,
    pub images: usize,
    pub noisy_psnr: f64,
    pub denoised_psnr: f64,
    /// Largest `‖x_t − y‖ / ε_t` over all images and stages.
    pub max_feasibility_ratio: f64,
}

/// Noise seed for image `index` at noise level `sigma`, derived from `seed` alone.
pub fn eval_noise_seed(seed: u64, sigma: f64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        ^ sigma.to_bits().rotate_left(17)
        ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Denoises every image at every σ with a single parameter set and reports mean PSNRs.
pub fn evaluate<T: Real>(
    params: &NetworkParams<T>,
    images: &[PlanarImage<T>],
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if images.is_empty() {
        return Err(Error::BadArgument("no evaluation images".into()));
    }
    sigmas
        .iter()
        .map(|&sigma| {
            let per_image: Vec<(f64, f64, f64)> = images
                .par_iter()
                .enumerate()
                .map(|(i, clean)| {
                    let noisy = awgn(clean, sigma, eval_noise_seed(seed, sigma, i));
                    let (out, tape) = network_forward(&noisy, sigma, params)?;
                    let ratio = tape.max_feasibility_ratio();
                    Ok((psnr(&noisy, clean), psnr(&out, clean), ratio))
                })
                .collect::<Result<_>>()?;
            let n = per_image.len() as f64;
            Ok(EvalRow {
                sigma,
                images: per_image.len(),
                noisy_psnr: per_image.iter().map(|r| r.0).sum::<f64>() / n,
                denoised_psnr: per_image.iter().map(|r| r.1).sum::<f64>() / n,
                max_feasibility_ratio: per_image.iter().map(|r| r.2).fold(0.0, f64::max),
            })
        })
        .collect()
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("sigma,images,noisy_psnr,denoised_psnr,max_feasibility_ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.4},{:.8}\n",
            r.sigma, r.images, r.noisy_psnr, r.denoised_psnr, r.max_feasibility_ratio
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_loss_reference_values() {
        let x = PlanarImage::<f64>::zeros(2, 3, 1);
        let n = 6.0f64;
        let full = PlanarImage::filled(2, 3, 1, 255.0);
        let (l, _) = psnr_loss(&full, &x).unwrap();
        assert!(l.abs() < 1e-12);
        let tenth = PlanarImage::filled(2, 3, 1, 25.5);
        let (l, g) = psnr_loss(&tenth, &x).unwrap();
        assert!((l + 20.0).abs() < 1e-12);
        let k = 20.0 / std::f64::consts::LN_10 / (25.5 * 25.5 * n);
        assert!(g.data.iter().all(|v| (v - k * 25.5).abs() < 1e-15));
        assert!(matches!(psnr_loss(&x, &x), Err(Error::DegenerateLoss)));
    }

    #[test]
    fn awgn_is_seeded() {
        let x = PlanarImage::filled(4, 4, 1, 10.0f32);
        assert_eq!(awgn(&x, 0.0, 1), x);
        assert_eq!(awgn(&x, 25.0, 7), awgn(&x, 25.0, 7));
        assert_ne!(awgn(&x, 25.0, 7), awgn(&x, 25.0, 8));
    }

    #[test]
    fn awgn_standard_deviation() {
        let x = PlanarImage::filled(256, 256, 1, 128.0f64);
        let y = awgn(&x, 25.0, 42);
        let d = y.sub(&x);
        let n = d.len() as f64;
        let mean = d.data.iter().sum::<f64>() / n;
        let var = d.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((24.5..=25.5).contains(&std), "std = {std}");
    }

    #[test]
    fn grids() {
        assert_eq!(low_noise_grid(), vec![5.0, 9.0, 13.0, 17.0, 21.0, 25.0, 29.0]);
        assert_eq!(high_noise_grid(), vec![30.0, 34.0, 38.0, 42.0, 46.0, 50.0, 54.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..20).all(|_| sample_noise_grid(&[17.0], &mut rng) == 17.0));
        let low = low_noise_grid();
        assert!((0..100).all(|_| low.contains(&sample_noise_grid(&low, &mut rng))));
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0f64, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[3.0], &mut st, 0.01, &cfg).unwrap();
        // m̂ = 3, v̂ = 9 ⇒ step = lr · 3 / (3 + 1e-4).
        assert!((p[0] + 0.01 * 3.0 / (3.0 + 1e-4)).abs() < 1e-15);
        assert!(adam_step(&mut p, &[1.0, 2.0], &mut st, 0.01, &cfg).is_err());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let cfg = AdamConfig::default();
        let mut theta = vec![1.0f64];
        let mut st = AdamState::new(1);
        for _ in 0..500 {
            let g = [2.0 * theta[0]];
            adam_step(&mut theta, &g, &mut st, 1e-2, &cfg).unwrap();
        }
        assert!(theta[0].abs() < 0.05, "theta = {}", theta[0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::grayscale().validate().is_ok());
        assert_eq!(TrainConfig::color().learning_rate, 1e-2);
        let mut c = TrainConfig::grayscale();
        c.noise_grid.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn epoch_draws_are_reproducible() {
        let cfg = TrainConfig::grayscale();
        let a = epoch_draws(10, &cfg, 1, 3);
        let b = epoch_draws(10, &cfg, 1, 3);
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image
            && x.sigma == y.sigma
            && x.noise_seed == y.noise_seed));
        let mut seen: Vec<usize> = a.iter().map(|d| d.image).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
