//! Composite layers and the S-stage cascade.
//!
//! Stage `t` computes `x_t = Π(x_{t−1} − Lᵀ ψ(clip(L x_{t−1})))`, where `Π` projects
//! onto the noise ball around the network input `y`. The operator and its transpose
//! share the same parameters. A final clip to [0, 255] produces the network output.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv_adjoint, conv_forward, conv_kernel_grad, FilterBank, FilterGeometry, Kernels};
use crate::error::{Error, Result};
use crate::image::{FeatureMap, PlanarImage};
use crate::nonlocal::{
    block_match, group_filter, group_filter_adjoint, group_weight_backward, BlockMatchConfig,
    GroupIndexTable, GroupWeights,
};
use crate::projection::{project, project_input_backward, project_param_backward, ProjectionContext};
use crate::rbf::{
    clip_backward, clip_forward, rbf_backward, rbf_forward, rbf_precision_grad, ClipRange, RbfMixture,
};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Local,
    NonLocal,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Local => "local",
            Variant::NonLocal => "nonlocal",
        }
    }
}

/// Structural constants of a network; everything that is not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub variant: Variant,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub filters: usize,
    pub stages: usize,
    /// Group size `P` (non-local only).
    pub group: usize,
    /// Block-matching search window (non-local only).
    pub window: (usize, usize),
    pub rbf_kernels: usize,
    pub rbf_range: ClipRange,
    /// Train the shared RBF precision `a` of each layer (off by default). It is
    /// optimized as `ln a`, which keeps it positive.
    pub train_precision: bool,
}

impl Architecture {
    /// Five stages of 48 zero-mean 7×7 filters.
    pub fn grayscale(variant: Variant) -> Self {
        Self {
            variant,
            channels: 1,
            kernel: (7, 7),
            filters: 48,
            stages: 5,
            group: 8,
            window: (31, 31),
            rbf_kernels: 51,
            rbf_range: ClipRange::RBF,
            train_precision: false,
        }
    }

    /// Five stages of 74 zero-mean 5×5×3 filters.
    pub fn color(variant: Variant) -> Self {
        Self {
            channels: 3,
            kernel: (5, 5),
            filters: 74,
            ..Self::grayscale(variant)
        }
    }

    pub fn geometry(&self) -> FilterGeometry {
        FilterGeometry::new(self.kernel.0, self.kernel.1, self.channels, self.filters)
    }

    pub fn block_match_config(&self) -> BlockMatchConfig {
        BlockMatchConfig {
            patch: self.kernel,
            window: self.window,
            group: self.group,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.filters == 0 || self.channels == 0 {
            return Err(Error::BadArgument("stages, filters and channels must be positive".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.kernel.0 * self.kernel.1 * self.channels < 2 {
            return Err(Error::BadArgument("filter support must have at least 2 taps".into()));
        }
        if self.rbf_kernels < 2 {
            return Err(Error::BadArgument("need at least 2 RBF kernels".into()));
        }
        if self.variant == Variant::NonLocal && self.group == 0 {
            return Err(Error::BadArgument("group size must be positive".into()));
        }
        Ok(())
    }

    /// Number of trainable scalars in one composite layer.
    pub fn layer_parameter_count(&self) -> usize {
        let f = self.filters;
        let group = match self.variant {
            Variant::Local => 0,
            Variant::NonLocal => self.group,
        };
        f * self.geometry().support() + f + group + f * self.rbf_kernels + usize::from(self.train_precision) + 1
    }

    pub fn parameter_count(&self) -> usize {
        self.stages * self.layer_parameter_count()
    }
}

/// Initial values for untrained parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    /// Initial filter scale `s` (kernel norm).
    pub filter_scale: f64,
    /// Slope of the linear curve the RBF mixtures are fitted to.
    pub shrinkage_slope: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl InitConfig {
    /// Filter scale `1/√L` so that a full transform sums to at most unit gain, and a
    /// `0.1·x` initial potential gradient.
    pub fn for_architecture(arch: &Architecture) -> Self {
        Self {
            filter_scale: 1.0 / (arch.geometry().support() as f64).sqrt(),
            shrinkage_slope: 0.1,
            alpha: 0.0,
            seed: 0,
        }
    }
}

/// Trainable parameters `{s, v, g, π, α}` of one composite layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub bank: FilterBank<T>,
    pub group: Option<GroupWeights<T>>,
    pub rbf: RbfMixture<T>,
    pub alpha: T,
    pub train_precision: bool,
}

impl<T: Real> LayerParams<T> {
    pub fn init(arch: &Architecture, init: &InitConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bank = FilterBank::dct_init(arch.geometry(), init.filter_scale, rng);
        let group = match arch.variant {
            Variant::Local => None,
            Variant::NonLocal => Some(GroupWeights::decaying(arch.group)),
        };
        let rbf =
            RbfMixture::shrinkage_init(arch.filters, arch.rbf_kernels, arch.rbf_range, init.shrinkage_slope)?;
        Ok(Self {
            bank,
            group,
            rbf,
            alpha: T::c(init.alpha),
            train_precision: arch.train_precision,
        })
    }

    /// Trainable values in the order raw weights, scales, group weights, RBF
    /// coefficients, `ln a` (when trained), α.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.bank.raw);
        out.extend_from_slice(&self.bank.scale);
        if let Some(g) = &self.group {
            out.extend_from_slice(&g.raw);
        }
        out.extend_from_slice(&self.rbf.coeffs);
        if self.train_precision {
            out.push(self.rbf.precision.ln());
        }
        out.push(self.alpha);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.bank.raw.len()
            + self.bank.scale.len()
            + self.group.as_ref().map_or(0, |g| g.len())
            + self.rbf.coeffs.len()
            + usize::from(self.train_precision)
            + 1
    }

    pub fn unflatten(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a layer with {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut rest = values;
        let mut take = |dst: &mut [T]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(&mut self.bank.raw);
        take(&mut self.bank.scale);
        if let Some(g) = &mut self.group {
            take(&mut g.raw);
        }
        take(&mut self.rbf.coeffs);
        if self.train_precision {
            let a = rest[0].exp();
            if !(a > T::zero() && a.is_finite()) {
                return Err(Error::NonFinite(format!("RBF precision exp({:?})", rest[0])));
            }
            self.rbf.precision = a;
            rest = &rest[1..];
        }
        self.alpha = rest[0];
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::c(x.f64())).collect::<Vec<U>>();
        LayerParams {
            bank: FilterBank {
                geometry: self.bank.geometry,
                raw: c(&self.bank.raw),
                scale: c(&self.bank.scale),
            },
            group: self.group.as_ref().map(|g| GroupWeights::new(c(&g.raw))),
            rbf: RbfMixture {
                centers: c(&self.rbf.centers),
                precision: U::c(self.rbf.precision.f64()),
                coeffs: c(&self.rbf.coeffs),
            },
            alpha: U::c(self.alpha.f64()),
            train_precision: self.train_precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub arch: Architecture,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> NetworkParams<T> {
    pub fn init(arch: Architecture, init: &InitConfig) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let layers = (0..arch.stages)
            .map(|_| LayerParams::init(&arch, init, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, layers })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.flatten()).collect()
    }

    pub fn unflatten(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a network with {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.parameter_count();
            layer.unflatten(&values[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    /// Position of layer `t`'s parameters inside [`NetworkParams::flatten`].
    pub fn layer_range(&self, t: usize) -> Range<usize> {
        let start: usize = self.layers[..t].iter().map(|l| l.parameter_count()).sum();
        start..start + self.layers[t].parameter_count()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Gradients for one layer, laid out like [`LayerParams::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub raw: Vec<T>,
    pub scale: Vec<T>,
    pub group: Option<Vec<T>>,
    pub coeffs: Vec<T>,
    pub precision: Option<T>,
    pub alpha: T,
}

impl<T: Real> LayerGrads<T> {
    pub fn zeros_like(layer: &LayerParams<T>) -> Self {
        Self {
            raw: vec![T::zero(); layer.bank.raw.len()],
            scale: vec![T::zero(); layer.bank.scale.len()],
            group: layer.group.as_ref().map(|g| vec![T::zero(); g.len()]),
            coeffs: vec![T::zero(); layer.rbf.coeffs.len()],
            precision: layer.train_precision.then(T::zero),
            alpha: T::zero(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.raw);
        out.extend_from_slice(&self.scale);
        if let Some(g) = &self.group {
            out.extend_from_slice(g);
        }
        out.extend_from_slice(&self.coeffs);
        out.extend(self.precision);
        out.push(self.alpha);
        out
    }
}

/// Per-layer gradients; layers that were not reached by a partial backward pass stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> NetworkGrads<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        Self {
            layers: params.layers.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.flatten()).collect()
    }
}

/// The analysis operator of one layer, with the kernels materialized once.
enum Operator<'a, T> {
    Local(&'a Kernels<T>),
    NonLocal(&'a Kernels<T>, &'a GroupIndexTable, &'a GroupWeights<T>),
}

impl<'a, T: Real> Operator<'a, T> {
    fn new(
        kernels: &'a Kernels<T>,
        layer: &'a LayerParams<T>,
        table: Option<&'a GroupIndexTable>,
    ) -> Result<Self> {
        match (&layer.group, table) {
            (None, _) => Ok(Operator::Local(kernels)),
            (Some(g), Some(t)) => Ok(Operator::NonLocal(kernels, t, g)),
            (Some(_), None) => Err(Error::BadArgument(
                "non-local layer requires a group index table".into(),
            )),
        }
    }

    /// Returns `(L x, C x)` where `C x` is the pre-grouping transform (non-local only).
    fn forward(&self, x: &PlanarImage<T>) -> Result<(FeatureMap<T>, Option<FeatureMap<T>>)> {
        match self {
            Operator::Local(k) => Ok((conv_forward(x, k)?, None)),
            Operator::NonLocal(k, t, g) => {
                let c = conv_forward(x, k)?;
                Ok((group_filter(&c, t, g)?, Some(c)))
            }
        }
    }

    fn adjoint(&self, z: &FeatureMap<T>) -> Result<PlanarImage<T>> {
        match self {
            Operator::Local(k) => conv_adjoint(z, k),
            Operator::NonLocal(k, t, g) => conv_adjoint(&group_filter_adjoint(z, t, g)?, k),
        }
    }

    /// Gradient of `⟨L x, z⟩` w.r.t. the kernels and the raw group weights,
    /// given `C x` when it is already known.
    fn param_grads(
        &self,
        x: &PlanarImage<T>,
        transformed: Option<&FeatureMap<T>>,
        z: &FeatureMap<T>,
    ) -> Result<(Vec<T>, Option<Vec<T>>)> {
        match self {
            Operator::Local(k) => Ok((conv_kernel_grad(x, z, k.geometry)?, None)),
            Operator::NonLocal(k, t, g) => {
                let spread = group_filter_adjoint(z, t, g)?;
                let kernel = conv_kernel_grad(x, &spread, k.geometry)?;
                let owned;
                let c = match transformed {
                    Some(c) => c,
                    None => {
                        owned = conv_forward(x, k)?;
                        &owned
                    }
                };
                Ok((kernel, Some(group_weight_backward(c, t, g, z)?)))
            }
        }
    }
}

/// Intermediates of one composite layer kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StageTape<T> {
    pub kernels: Kernels<T>,
    pub input: PlanarImage<T>,
    /// `C x_{t−1}` before grouping (non-local only).
    pub transformed: Option<FeatureMap<T>>,
    /// `L x_{t−1}` before the RBF clip.
    pub features: FeatureMap<T>,
    /// `x_{t−1} − h(x_{t−1})`, the projection input.
    pub pre_projection: PlanarImage<T>,
    pub residual_norm: f64,
    pub epsilon: f64,
    pub output: PlanarImage<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    pub ctx: ProjectionContext<T>,
    pub table: Option<GroupIndexTable>,
    pub stages: Vec<StageTape<T>>,
}

impl<T: Real> ForwardTape<T> {
    /// Output of the last recorded stage, before the output clip.
    /// Largest `‖x_t − y‖ / ε_t` over the taped stages.
    pub fn max_feasibility_ratio(&self) -> f64 {
        self.stages
            .iter()
            .map(|s| s.output.sub(&self.ctx.y).norm() / s.epsilon)
            .fold(0.0, f64::max)
    }

    /// Fails with the first stage whose ratio exceeds `1 + tol`.
    pub fn check_feasible(&self, tol: f64) -> Result<()> {
        for (t, s) in self.stages.iter().enumerate() {
            let ratio = s.output.sub(&self.ctx.y).norm() / s.epsilon;
            if !(ratio <= 1.0 + tol) {
                return Err(Error::Infeasible { stage: t, ratio });
            }
        }
        Ok(())
    }

    pub fn last_output(&self) -> &PlanarImage<T> {
        self.stages
            .last()
            .map(|s| &s.output)
            .unwrap_or(&self.ctx.y)
    }
}

/// Computes one composite layer.
pub fn composite_forward<T: Real>(
    x_prev: &PlanarImage<T>,
    ctx: &ProjectionContext<T>,
    layer: &LayerParams<T>,
    range: ClipRange,
    table: Option<&GroupIndexTable>,
) -> Result<(PlanarImage<T>, StageTape<T>)> {
    x_prev.check_same_shape(&ctx.y, "composite layer input")?;
    let kernels = layer.bank.materialize()?;
    let op = Operator::new(&kernels, layer, table)?;
    let (features, transformed) = op.forward(x_prev)?;
    let potential = rbf_forward(&clip_forward(&features, range), &layer.rbf)?;
    let noise = op.adjoint(&potential)?;
    let pre_projection = x_prev.sub(&noise);
    let eps = ctx.epsilon(layer.alpha.f64())?;
    let (output, residual_norm) = project(&pre_projection, &ctx.y, eps)?;
    if !output.all_finite() {
        return Err(Error::NonFinite("composite layer output".into()));
    }
    let tape = StageTape {
        kernels,
        input: x_prev.clone(),
        transformed,
        features,
        pre_projection,
        residual_norm,
        epsilon: eps,
        output: output.clone(),
    };
    Ok((output, tape))
}

/// Runs the first `stages` composite layers (no output clip).
pub fn forward_stages<T: Real>(
    y: &PlanarImage<T>,
    sigma: f64,
    params: &NetworkParams<T>,
    stages: usize,
) -> Result<ForwardTape<T>> {
    let table = match params.arch.variant {
        Variant::Local => None,
        Variant::NonLocal => Some(block_match(y, params.arch.block_match_config())?),
    };
    forward_stages_with_table(y, sigma, params, stages, table)
}

/// As [`forward_stages`] with a precomputed group table (non-local only).
pub fn forward_stages_with_table<T: Real>(
    y: &PlanarImage<T>,
    sigma: f64,
    params: &NetworkParams<T>,
    stages: usize,
    table: Option<GroupIndexTable>,
) -> Result<ForwardTape<T>> {
    if y.planes != params.arch.channels {
        return Err(Error::ShapeMismatch(format!(
            "{}-channel image for a {}-channel network",
            y.planes, params.arch.channels
        )));
    }
    if stages > params.layers.len() {
        return Err(Error::BadArgument(format!(
            "requested {stages} stages of a {}-stage network",
            params.layers.len()
        )));
    }
    let ctx = ProjectionContext::new(y.clone(), sigma)?;
    let mut x = y.clone();
    let mut tapes = Vec::with_capacity(stages);
    for layer in &params.layers[..stages] {
        let (next, tape) = composite_forward(&x, &ctx, layer, params.arch.rbf_range, table.as_ref())?;
        tapes.push(tape);
        x = next;
    }
    Ok(ForwardTape {
        ctx,
        table,
        stages: tapes,
    })
}

/// Full network: `S` composite layers followed by a clip to [0, 255].
pub fn network_forward<T: Real>(
    y: &PlanarImage<T>,
    sigma: f64,
    params: &NetworkParams<T>,
) -> Result<(PlanarImage<T>, ForwardTape<T>)> {
    let tape = forward_stages(y, sigma, params, params.layers.len())?;
    let out = clip_forward(tape.last_output(), ClipRange::INTENSITY);
    Ok((out, tape))
}

/// Backpropagates through one composite layer.
///
/// Returns `∂ℓ/∂x_{t−1}` and the layer's parameter gradients. The operator is used
/// twice (as `L` and as `Lᵀ`); both usages contribute to the shared kernel and
/// group-weight gradients.
pub fn composite_backward<T: Real>(
    layer: &LayerParams<T>,
    range: ClipRange,
    tape: &StageTape<T>,
    ctx: &ProjectionContext<T>,
    table: Option<&GroupIndexTable>,
    grad_out: &PlanarImage<T>,
) -> Result<(PlanarImage<T>, LayerGrads<T>)> {
    tape.output.check_same_shape(grad_out, "stage gradient")?;
    let op = Operator::new(&tape.kernels, layer, table)?;

    let grad_v = project_input_backward(&tape.pre_projection, &ctx.y, tape.epsilon, grad_out)?;
    let grad_alpha = project_param_backward(&tape.pre_projection, &ctx.y, tape.epsilon, grad_out)?;

    // v = x − Lᵀp with p = ψ(clip(z)).
    let grad_h = grad_v.map(|g| -g);
    let clipped = clip_forward(&tape.features, range);
    let potential = rbf_forward(&clipped, &layer.rbf)?;
    let (grad_p, transformed_h) = {
        let (lh, ch) = op.forward(&grad_h)?;
        (lh, ch)
    };
    let (kernel_t, group_t) = op.param_grads(&grad_h, transformed_h.as_ref(), &potential)?;

    let (grad_clipped, grad_coeffs) = rbf_backward(&clipped, &layer.rbf, &grad_p)?;
    let grad_precision = if layer.train_precision {
        // Chain rule through a = exp(ln a).
        Some(T::c(layer.rbf.precision.f64() * rbf_precision_grad(&clipped, &layer.rbf, &grad_p)?))
    } else {
        None
    };
    let grad_z = clip_backward(&tape.features, &grad_clipped, range)?;

    let (kernel_f, group_f) = op.param_grads(&tape.input, tape.transformed.as_ref(), &grad_z)?;
    let mut grad_x = op.adjoint(&grad_z)?;
    grad_x.add_assign(&grad_v);

    let grad_w: Vec<T> = kernel_t.iter().zip(&kernel_f).map(|(&a, &b)| a + b).collect();
    let (raw, scale) = layer.bank.weight_backward(&grad_w)?;
    let group = match (group_t, group_f) {
        (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(&x, &y)| x + y).collect()),
        _ => None,
    };
    Ok((
        grad_x,
        LayerGrads {
            raw,
            scale,
            group,
            coeffs: grad_coeffs,
            precision: grad_precision,
            alpha: T::c(grad_alpha),
        },
    ))
}

/// Backpropagates `∂ℓ/∂x_t` (gradient at the output of the last taped stage) down to
/// stage `first`; gradients of stages before `first` stay zero.
pub fn backward_stages<T: Real>(
    params: &NetworkParams<T>,
    tape: &ForwardTape<T>,
    grad_last: &PlanarImage<T>,
    first: usize,
) -> Result<NetworkGrads<T>> {
    let n = tape.stages.len();
    if n > params.layers.len() {
        return Err(Error::TapeMismatch(format!(
            "tape has {n} stages, network has {}",
            params.layers.len()
        )));
    }
    if params.arch.variant == Variant::NonLocal && tape.table.is_none() {
        return Err(Error::TapeMismatch("non-local network but tape has no group table".into()));
    }
    for (stage, layer) in tape.stages.iter().zip(&params.layers) {
        if stage.kernels.geometry != layer.bank.geometry {
            return Err(Error::TapeMismatch("filter geometry differs from the tape".into()));
        }
    }
    if !grad_last.same_shape(&tape.ctx.y) {
        return Err(Error::TapeMismatch("gradient shape differs from the network input".into()));
    }
    let mut grads = NetworkGrads::zeros_like(params);
    let mut grad = grad_last.clone();
    for t in (first..n).rev() {
        let (gx, lg) = composite_backward(
            &params.layers[t],
            params.arch.rbf_range,
            &tape.stages[t],
            &tape.ctx,
            tape.table.as_ref(),
            &grad,
        )?;
        grads.layers[t] = lg;
        grad = gx;
    }
    Ok(grads)
}

/// Gradients of all parameters given `∂ℓ/∂x̂` at the clipped network output.
pub fn network_backward<T: Real>(
    params: &NetworkParams<T>,
    tape: &ForwardTape<T>,
    grad_output: &PlanarImage<T>,
) -> Result<NetworkGrads<T>> {
    if tape.stages.len() != params.layers.len() {
        return Err(Error::TapeMismatch(format!(
            "tape has {} stages, network has {}",
            tape.stages.len(),
            params.layers.len()
        )));
    }
    let last = tape.last_output();
    if !last.same_shape(grad_output) {
        return Err(Error::TapeMismatch("output gradient shape differs from the tape".into()));
    }
    let grad = clip_backward(last, grad_output, ClipRange::INTENSITY)?;
    backward_stages(params, tape, &grad, 0)
}

/// Per-stage noise estimate `n^k = y − x^k` with its norm and the stage radius.
#[derive(Debug, Clone)]
pub struct NoiseEstimate<T> {
    pub residual: PlanarImage<T>,
    pub norm: f64,
    pub epsilon: f64,
}

pub fn noise_estimate_trace<T: Real>(
    y: &PlanarImage<T>,
    sigma: f64,
    params: &NetworkParams<T>,
) -> Result<Vec<NoiseEstimate<T>>> {
    let tape = forward_stages(y, sigma, params, params.layers.len())?;
    Ok(tape
        .stages
        .iter()
        .map(|s| {
            let residual = y.sub(&s.output);
            NoiseEstimate {
                norm: residual.norm(),
                residual,
                epsilon: s.epsilon,
            }
        })
        .collect())
}
