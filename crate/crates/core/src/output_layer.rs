//! Mixture-of-kernels softmax output layer.
//!
//! ```text
//! p(v | h) = Σ_k π_k(h) softmax_v(S_k(W_v, h̃_k))
//! π(h)     = softmax(Mᵀ h)
//! h̃_k      = tanh(C_kᵀ h)
//! ```
//!
//! `W` is shared by all components. With a single component there is no
//! gating matrix and no context transform: `π ≡ 1` and `h̃ = h`. Components
//! scored with `hpb` see their context projected into the open unit ball.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{batch_backward, batch_logits, KernelKind, KernelSpec};
use crate::model::{Parameters, TensorMut, TensorRef};
use crate::scalar::{log_softmax_into, log_sum_exp, softmax_into, Scalar};

/// Radius that `hpb` arguments are projected onto.
pub const BALL_RADIUS: f64 = 1.0 - 1e-5;

/// How the mixture-weight variance penalty is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Population variance of the `K` weights of each datum, averaged over data.
    #[default]
    PerDatum,
    /// Variance of each component's weight across the batch, averaged over components.
    AcrossData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureConfig<T> {
    pub components: Vec<KernelSpec<T>>,
    /// Hidden dimension.
    pub d: usize,
    /// Vocabulary size.
    pub vocab: usize,
    /// Scale of the mixture-weight variance penalty.
    pub rho: T,
    pub variance_mode: VarianceMode,
}

impl<T: Scalar> MixtureConfig<T> {
    pub fn new(components: Vec<KernelSpec<T>>, d: usize, vocab: usize) -> Self {
        Self {
            components,
            d,
            vocab,
            rho: T::lit(0.1),
            variance_mode: VarianceMode::PerDatum,
        }
    }

    pub fn with_rho(mut self, rho: T) -> Self {
        self.rho = rho;
        self
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// The projection matrix is always shared across components.
    pub fn tie_projection(&self) -> bool {
        true
    }

    pub fn transform_contexts(&self) -> bool {
        self.k() > 1
    }

    pub fn has_gaussian(&self) -> bool {
        self.components.iter().any(|s| s.kind.is_gaussian())
    }

    pub fn has_hpb(&self) -> bool {
        self.components.iter().any(|s| s.kind == KernelKind::Hpb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("a mixture needs at least one component".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config(format!(
                "vocabulary size must be at least 2, got {}",
                self.vocab
            )));
        }
        if !(self.rho.is_finite() && self.rho >= T::zero()) {
            return Err(Error::Config(format!("rho must be non-negative, got {}", self.rho)));
        }
        for spec in &self.components {
            spec.validate_dim(self.d)?;
        }
        Ok(())
    }
}

/// Trainable parameters of the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputParams<T> {
    /// Word matrix `W`, `d×V`.
    pub w: Array2<T>,
    /// `ln σ²` per word; present iff a component is Gaussian.
    pub word_log_vars: Option<Array1<T>>,
    /// Gating matrix `M`, `d×K`; present iff `K > 1`.
    pub gating: Option<Array2<T>>,
    /// Context transforms `C_k`, each `d×d`; empty iff `K = 1`.
    pub transforms: Vec<Array2<T>>,
    /// Context-side `ln σ²` per component; present iff a component is Gaussian.
    pub component_log_vars: Option<Array1<T>>,
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || T::lit(rng.random_range(-bound..bound)))
}

impl<T: Scalar> OutputParams<T> {
    /// Fan-in uniform initialization `U(-1/√d, 1/√d)`; log-variances start at 0.
    pub fn init<R: Rng>(config: &MixtureConfig<T>, rng: &mut R) -> Self {
        let (d, v, k) = (config.d, config.vocab, config.k());
        let bound = 1.0 / (d as f64).sqrt();
        let w = uniform(rng, (d, v), bound);
        let gating = config.transform_contexts().then(|| uniform(rng, (d, k), bound));
        let transforms = if config.transform_contexts() {
            (0..k).map(|_| uniform(rng, (d, d), bound)).collect()
        } else {
            Vec::new()
        };
        let gaussian = config.has_gaussian();
        let mut params = Self {
            w,
            word_log_vars: gaussian.then(|| Array1::zeros(v)),
            gating,
            transforms,
            component_log_vars: gaussian.then(|| Array1::zeros(k)),
        };
        params.project(config);
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            word_log_vars: self.word_log_vars.as_ref().map(|a| Array1::zeros(a.len())),
            gating: self.gating.as_ref().map(|a| Array2::zeros(a.dim())),
            transforms: self.transforms.iter().map(|a| Array2::zeros(a.dim())).collect(),
            component_log_vars: self.component_log_vars.as_ref().map(|a| Array1::zeros(a.len())),
        }
    }

    pub fn check_shapes(&self, config: &MixtureConfig<T>) -> Result<()> {
        let (d, v, k) = (config.d, config.vocab, config.k());
        let mismatch = |what: &str, got: String, want: String| {
            Err(Error::ShapeMismatch(format!("{what} is {got}, expected {want}")))
        };
        if self.w.dim() != (d, v) {
            return mismatch("W", format!("{:?}", self.w.dim()), format!("{:?}", (d, v)));
        }
        let gaussian = config.has_gaussian();
        match (&self.word_log_vars, gaussian) {
            (Some(a), true) if a.len() == v => {}
            (None, false) => {}
            (got, _) => {
                return mismatch(
                    "word variances",
                    format!("{:?}", got.as_ref().map(|a| a.len())),
                    format!("{:?}", gaussian.then_some(v)),
                )
            }
        }
        match (&self.component_log_vars, gaussian) {
            (Some(a), true) if a.len() == k => {}
            (None, false) => {}
            (got, _) => {
                return mismatch(
                    "component variances",
                    format!("{:?}", got.as_ref().map(|a| a.len())),
                    format!("{:?}", gaussian.then_some(k)),
                )
            }
        }
        if config.transform_contexts() {
            match &self.gating {
                Some(m) if m.dim() == (d, k) => {}
                got => {
                    return mismatch(
                        "M",
                        format!("{:?}", got.as_ref().map(|a| a.dim())),
                        format!("{:?}", (d, k)),
                    )
                }
            }
            if self.transforms.len() != k || self.transforms.iter().any(|c| c.dim() != (d, d)) {
                return mismatch(
                    "C",
                    format!("{} matrices", self.transforms.len()),
                    format!("{k} of {d}x{d}"),
                );
            }
        } else if self.gating.is_some() || !self.transforms.is_empty() {
            return mismatch("single-component layer", "gating parameters".into(), "none".into());
        }
        Ok(())
    }

    /// Keeps `W` inside the ball when any component is `hpb`.
    pub fn project(&mut self, config: &MixtureConfig<T>) {
        if config.has_hpb() {
            let radius = T::lit(BALL_RADIUS);
            for mut col in self.w.axis_iter_mut(Axis(1)) {
                let norm = col.iter().map(|&x| x * x).sum::<T>().sqrt();
                if norm > radius {
                    col.mapv_inplace(|x| x * radius / norm);
                }
            }
        }
    }
}

impl<T: Scalar> Parameters<T> for OutputParams<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = vec![TensorRef::matrix("output.W", &self.w)];
        if let Some(a) = &self.word_log_vars {
            out.push(TensorRef::vector("output.word_log_vars", a));
        }
        if let Some(m) = &self.gating {
            out.push(TensorRef::matrix("output.M", m));
        }
        for (k, c) in self.transforms.iter().enumerate() {
            out.push(TensorRef::matrix(format!("output.C.{}", k + 1), c));
        }
        if let Some(a) = &self.component_log_vars {
            out.push(TensorRef::vector("output.component_log_vars", a));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = vec![TensorMut::matrix("output.W", &mut self.w)];
        if let Some(a) = &mut self.word_log_vars {
            out.push(TensorMut::vector("output.word_log_vars", a));
        }
        if let Some(m) = &mut self.gating {
            out.push(TensorMut::matrix("output.M", m));
        }
        for (k, c) in self.transforms.iter_mut().enumerate() {
            out.push(TensorMut::matrix(format!("output.C.{}", k + 1), c));
        }
        if let Some(a) = &mut self.component_log_vars {
            out.push(TensorMut::vector("output.component_log_vars", a));
        }
        out
    }
}

/// Intermediate values of a forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input contexts `h`, `B×d`.
    pub inputs: Array2<T>,
    /// Per component, the transformed context before any ball projection.
    pub transformed: Vec<Array2<T>>,
    /// Per component, the context actually scored.
    pub contexts: Vec<Array2<T>>,
    /// Per component logits, `B×V`.
    pub logits: Vec<Array2<T>>,
    /// Per component log-softmax over the vocabulary, `B×V`.
    pub log_softmax: Vec<Array2<T>>,
    /// Mixture weights `π`, `B×K`.
    pub mixture: Array2<T>,
    /// `ln p(v | h)`, `B×V`.
    pub log_posterior: Array2<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn posterior(&self) -> Array2<T> {
        self.log_posterior.mapv(T::exp)
    }

    /// Mean over the batch of the population variance of each row of `π`.
    pub fn mean_mixture_variance(&self) -> T {
        let k = self.mixture.ncols();
        let inv_k = T::one() / T::from_count(k);
        let total: T = self
            .mixture
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|&p| (p - inv_k) * (p - inv_k)).sum::<T>() * inv_k)
            .sum();
        total / T::from_count(self.mixture.nrows())
    }
}

/// Value of the regularized loss and its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<T> {
    pub total: T,
    pub cross_entropy: T,
    pub regularizer: T,
}

/// Gradients of the loss with respect to the output parameters and inputs.
#[derive(Debug, Clone)]
pub struct OutputGrads<T> {
    pub params: OutputParams<T>,
    /// `∂L/∂h`, `B×d`.
    pub d_inputs: Array2<T>,
    /// Number of `(b, v, k)` triples that hit a kernel gradient singularity.
    pub singular: usize,
}

/// `π = softmax(Mᵀ h)` per row of `h`; `m` is `d×K`.
pub fn mixture_weights<T: Scalar>(m: ArrayView2<T>, h: ArrayView2<T>) -> Result<Array2<T>> {
    if m.nrows() != h.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: h.ncols(),
        });
    }
    let mut pi = h.dot(&m);
    let mut buf = vec![T::zero(); pi.ncols()];
    for mut row in pi.rows_mut() {
        let src = row.to_vec();
        softmax_into(&src, &mut buf);
        row.assign(&ArrayView1::from(&buf));
    }
    Ok(pi)
}

/// `h̃_k = tanh(C_kᵀ h)` for every transform `C_k`.
pub fn transform_contexts<T: Scalar>(c: &[Array2<T>], h: ArrayView2<T>) -> Result<Vec<Array2<T>>> {
    c.iter()
        .map(|ck| {
            if ck.nrows() != h.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: ck.nrows(),
                    found: h.ncols(),
                });
            }
            Ok(h.dot(ck).mapv(T::tanh))
        })
        .collect()
}

fn project_rows<T: Scalar>(h: &Array2<T>) -> Array2<T> {
    let radius = T::lit(BALL_RADIUS);
    let mut out = h.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > radius {
            row.mapv_inplace(|x| x * radius / norm);
        }
    }
    out
}

/// Backpropagates through [`project_rows`].
fn project_rows_backward<T: Scalar>(pre: &Array2<T>, grad: &mut Array2<T>) {
    let radius = T::lit(BALL_RADIUS);
    for (row, mut g) in pre.rows().into_iter().zip(grad.rows_mut()) {
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > radius {
            let along: T = row.iter().zip(g.iter()).map(|(&x, &gi)| x * gi).sum::<T>() / (norm * norm);
            for (gi, &x) in g.iter_mut().zip(row.iter()) {
                *gi = radius / norm * (*gi - x * along);
            }
        }
    }
}

fn check_inputs<T: Scalar>(config: &MixtureConfig<T>, params: &OutputParams<T>, h: &ArrayView2<T>) -> Result<()> {
    config.validate()?;
    params.check_shapes(config)?;
    if h.ncols() != config.d {
        return Err(Error::DimensionMismatch {
            expected: config.d,
            found: h.ncols(),
        });
    }
    if h.nrows() == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    Ok(())
}

fn context_log_var<T: Scalar>(params: &OutputParams<T>, k: usize) -> T {
    params.component_log_vars.as_ref().map_or(T::zero(), |a| a[k])
}

/// Forward pass: `p(v | h_b)` for every row of `h` (`B×d`).
pub fn posterior<T: Scalar>(
    config: &MixtureConfig<T>,
    params: &OutputParams<T>,
    h: ArrayView2<T>,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    let cache = forward(config, params, h)?;
    Ok((cache.posterior(), cache))
}

pub(crate) fn forward<T: Scalar>(
    config: &MixtureConfig<T>,
    params: &OutputParams<T>,
    h: ArrayView2<T>,
) -> Result<ForwardCache<T>> {
    check_inputs(config, params, &h)?;
    let (b_n, v_n, k_n) = (h.nrows(), config.vocab, config.k());
    let (mixture, transformed) = if config.transform_contexts() {
        let m = params.gating.as_ref().expect("checked by check_shapes");
        (
            mixture_weights(m.view(), h)?,
            transform_contexts(&params.transforms, h)?,
        )
    } else {
        (Array2::ones((b_n, 1)), vec![h.to_owned()])
    };
    let contexts: Vec<Array2<T>> = config
        .components
        .iter()
        .zip(&transformed)
        .map(|(spec, t)| {
            if spec.kind == KernelKind::Hpb {
                project_rows(t)
            } else {
                t.clone()
            }
        })
        .collect();

    let mut logits = Vec::with_capacity(k_n);
    let mut log_softmax = Vec::with_capacity(k_n);
    for (k, (spec, ctx)) in config.components.iter().zip(&contexts).enumerate() {
        let z = batch_logits(
            spec,
            params.w.view(),
            params.word_log_vars.as_ref().map(|a| a.view()),
            ctx.view(),
            context_log_var(params, k),
        )
        .map_err(|e| e.with_component(k))?;
        let mut ls = Array2::zeros(z.dim());
        for (src, mut dst) in z.rows().into_iter().zip(ls.rows_mut()) {
            log_softmax_into(
                src.as_slice().expect("standard layout"),
                dst.as_slice_mut().expect("standard layout"),
            );
        }
        logits.push(z);
        log_softmax.push(ls);
    }

    let log_posterior = if k_n == 1 {
        log_softmax[0].clone()
    } else {
        let log_pi = mixture.mapv(T::ln);
        let mut lp = Array2::zeros((b_n, v_n));
        let mut terms = vec![T::zero(); k_n];
        for ((b, v), out) in lp.indexed_iter_mut() {
            for (k, t) in terms.iter_mut().enumerate() {
                *t = log_pi[[b, k]] + log_softmax[k][[b, v]];
            }
            *out = log_sum_exp(terms.iter().copied());
        }
        lp
    };

    Ok(ForwardCache {
        inputs: h.to_owned(),
        transformed,
        contexts,
        logits,
        log_softmax,
        mixture,
        log_posterior,
    })
}

fn check_targets<T>(config: &MixtureConfig<T>, b_n: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != b_n {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for a batch of {b_n}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= config.vocab) {
        return Err(Error::TargetOutOfRange {
            target: t,
            vocab: config.vocab,
        });
    }
    Ok(())
}

fn regularizer<T: Scalar>(config: &MixtureConfig<T>, pi: &Array2<T>) -> T {
    let (b_n, k_n) = pi.dim();
    if k_n < 2 || config.rho == T::zero() {
        return T::zero();
    }
    let inv_k = T::one() / T::from_count(k_n);
    let inv_b = T::one() / T::from_count(b_n);
    match config.variance_mode {
        VarianceMode::PerDatum => {
            let total: T = pi.iter().map(|&p| (p - inv_k) * (p - inv_k)).sum();
            config.rho * inv_b * inv_k * total
        }
        VarianceMode::AcrossData => {
            let mean = pi.sum_axis(Axis(0)) * inv_b;
            let total: T = pi
                .indexed_iter()
                .map(|((_, k), &p)| (p - mean[k]) * (p - mean[k]))
                .sum();
            config.rho * inv_k * inv_b * total
        }
    }
}

/// `∂R/∂π`, same shape as `π`.
fn regularizer_grad<T: Scalar>(config: &MixtureConfig<T>, pi: &Array2<T>) -> Array2<T> {
    let (b_n, k_n) = pi.dim();
    if k_n < 2 || config.rho == T::zero() {
        return Array2::zeros(pi.dim());
    }
    let two = T::lit(2.0);
    let inv_k = T::one() / T::from_count(k_n);
    let inv_b = T::one() / T::from_count(b_n);
    let scale = config.rho * inv_b * inv_k * two;
    match config.variance_mode {
        VarianceMode::PerDatum => pi.mapv(|p| scale * (p - inv_k)),
        VarianceMode::AcrossData => {
            let mean = pi.sum_axis(Axis(0)) * inv_b;
            Array2::from_shape_fn(pi.dim(), |(b, k)| scale * (pi[[b, k]] - mean[k]))
        }
    }
}

/// Mean negative log-likelihood of `targets` plus the mixture-weight variance penalty.
pub fn loss<T: Scalar>(
    config: &MixtureConfig<T>,
    params: &OutputParams<T>,
    h: ArrayView2<T>,
    targets: &[usize],
) -> Result<(LossValue<T>, ForwardCache<T>)> {
    check_targets(config, h.nrows(), targets)?;
    let cache = forward(config, params, h)?;
    let value = loss_from_cache(config, &cache, targets);
    Ok((value, cache))
}

pub(crate) fn loss_from_cache<T: Scalar>(
    config: &MixtureConfig<T>,
    cache: &ForwardCache<T>,
    targets: &[usize],
) -> LossValue<T> {
    let b_n = T::from_count(targets.len());
    let nll: T = targets
        .iter()
        .enumerate()
        .map(|(b, &t)| -cache.log_posterior[[b, t]])
        .sum();
    let cross_entropy = nll / b_n;
    let regularizer = regularizer(config, &cache.mixture);
    LossValue {
        total: cross_entropy + regularizer,
        cross_entropy,
        regularizer,
    }
}

/// Analytic gradient of [`loss`] given the cache of the matching forward pass.
pub fn backward<T: Scalar>(
    config: &MixtureConfig<T>,
    params: &OutputParams<T>,
    cache: &ForwardCache<T>,
    targets: &[usize],
) -> Result<OutputGrads<T>> {
    let h = cache.inputs.view();
    check_inputs(config, params, &h)?;
    let (b_n, k_n) = (h.nrows(), config.k());
    check_targets(config, b_n, targets)?;
    let inv_b = T::one() / T::from_count(b_n);

    // responsibilities r_bk = π_bk softmax_k(target) / p(target)
    let mut resp = Array2::zeros((b_n, k_n));
    for ((b, k), r) in resp.indexed_iter_mut() {
        let t = targets[b];
        *r = (cache.mixture[[b, k]].ln() + cache.log_softmax[k][[b, t]] - cache.log_posterior[[b, t]]).exp();
    }

    let mut grads = params.zeros_like();
    let mut d_inputs = Array2::zeros(h.dim());
    let mut singular = 0;
    for (k, spec) in config.components.iter().enumerate() {
        // ∂L/∂z_kbv = r_bk / B (q_kbv - δ(v, t_b))
        let mut upstream = cache.log_softmax[k].mapv(T::exp);
        for (b, mut row) in upstream.rows_mut().into_iter().enumerate() {
            row[targets[b]] -= T::one();
            let scale = resp[[b, k]] * inv_b;
            row.mapv_inplace(|x| x * scale);
        }
        let g = batch_backward(
            spec,
            params.w.view(),
            params.word_log_vars.as_ref().map(|a| a.view()),
            cache.contexts[k].view(),
            context_log_var(params, k),
            upstream.view(),
        )?;
        singular += g.singular;
        grads.w += &g.d_w;
        if spec.learn_variances {
            if let (Some(dst), Some(src)) = (grads.word_log_vars.as_mut(), g.d_word_log_vars.as_ref()) {
                *dst += src;
            }
            if let Some(dst) = grads.component_log_vars.as_mut() {
                dst[k] += g.d_context_log_var;
            }
        }
        let mut d_ctx = g.d_h;
        if spec.kind == KernelKind::Hpb {
            project_rows_backward(&cache.transformed[k], &mut d_ctx);
        }
        if config.transform_contexts() {
            // through tanh(C_kᵀ h)
            let t = &cache.transformed[k];
            let d_pre = &d_ctx * &t.mapv(|x| T::one() - x * x);
            grads.transforms[k] = h.t().dot(&d_pre);
            d_inputs += &d_pre.dot(&params.transforms[k].t());
        } else {
            d_inputs += &d_ctx;
        }
    }

    if config.transform_contexts() {
        let pi = &cache.mixture;
        let reg = regularizer_grad(config, pi);
        let mut d_gate = Array2::zeros((b_n, k_n));
        for b in 0..b_n {
            let avg: T = (0..k_n).map(|k| reg[[b, k]] * pi[[b, k]]).sum();
            for k in 0..k_n {
                d_gate[[b, k]] = (pi[[b, k]] - resp[[b, k]]) * inv_b + pi[[b, k]] * (reg[[b, k]] - avg);
            }
        }
        let m = params.gating.as_ref().expect("checked by check_shapes");
        grads.gating = Some(h.t().dot(&d_gate));
        d_inputs += &d_gate.dot(&m.t());
    }

    Ok(OutputGrads {
        params: grads,
        d_inputs,
        singular,
    })
}
