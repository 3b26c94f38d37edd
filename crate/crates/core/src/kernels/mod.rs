//! Kernel scoring functions `S(w, h)` between a word vector and a context
//! vector, their analytic gradients, and a batched form for whole vocabularies.
//!
//! | kind  | score |
//! |-------|-------|
//! | `lin` | `w·h` |
//! | `log` | `-ln(‖w-h‖^p + 1)` |
//! | `pow` | `-‖w-h‖^p` |
//! | `pol` | `(α w·h + c)^p` |
//! | `rbf` | `exp(-γ‖w-h‖²)` |
//! | `ssg` | `ln ∫ N(μ_w, σ_w² I) N(μ_h, σ_h² I)` |
//! | `mog` | `Σ_ij ln ∫ N(μ_{w,i}, σ_w² I) N(μ_{h,j}, σ_h² I)` |
//! | `hpb` | `-arcosh(1 + 2‖w-h‖² / ((1-‖w‖²)(1-‖h‖²)))` |
//! | `wav` | `cos(‖w-h‖²/a) exp(-‖w-h‖²/b)` |
//!
//! Gaussian kernels carry spherical variances in the log domain. A `mog`
//! vector of dimension `d` holds `num_gauss` means of dimension
//! `d / num_gauss`, stored contiguously.

mod batch;
mod profile;
mod spec;

pub use batch::{batch_backward, batch_logits, BatchGrad};
pub use profile::{clamped_sq_distance, HyperGrad};
pub use spec::{parse_kernel_list, KernelKind, KernelSpec, MogMode};

pub(crate) use profile::{
    gaussian_log_overlap, gaussian_log_overlap_ds, hpb_slope, hpb_u, hpb_value, mog_combine, radial, radial_hyper,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A spherical Gaussian: mean vector and `ln σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<T> {
    pub mean: Vec<T>,
    pub log_var: T,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn new(mean: Vec<T>, log_var: T) -> Self {
        Self { mean, log_var }
    }

    pub fn variance(&self) -> T {
        self.log_var.exp()
    }
}

/// One kernel argument. `log_var` is only read by `ssg` and `mog`.
#[derive(Debug, Clone, Copy)]
pub struct KernelArg<'a, T> {
    pub vector: &'a [T],
    pub log_var: T,
}

impl<'a, T: Scalar> KernelArg<'a, T> {
    pub fn gaussian(vector: &'a [T], log_var: T) -> Self {
        Self { vector, log_var }
    }
}

impl<'a, T: Scalar> From<&'a [T]> for KernelArg<'a, T> {
    fn from(vector: &'a [T]) -> Self {
        Self {
            vector,
            log_var: T::zero(),
        }
    }
}

impl<'a, T: Scalar, const N: usize> From<&'a [T; N]> for KernelArg<'a, T> {
    fn from(vector: &'a [T; N]) -> Self {
        vector.as_slice().into()
    }
}

impl<'a, T: Scalar> From<&'a Vec<T>> for KernelArg<'a, T> {
    fn from(vector: &'a Vec<T>) -> Self {
        vector.as_slice().into()
    }
}

impl<'a, T: Scalar> From<&'a GaussianParams<T>> for KernelArg<'a, T> {
    fn from(g: &'a GaussianParams<T>) -> Self {
        Self {
            vector: &g.mean,
            log_var: g.log_var,
        }
    }
}

/// A finite kernel score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score<T> {
    pub value: T,
    pub finite: bool,
}

impl<T: Scalar> Score<T> {
    fn checked(value: T) -> Result<Self> {
        if value.is_finite() {
            Ok(Self { value, finite: true })
        } else {
            Err(Error::NonFiniteScore {
                component: None,
                row: None,
                word: None,
            })
        }
    }
}

/// Partial derivatives of one score.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad<T> {
    pub d_w: Vec<T>,
    pub d_h: Vec<T>,
    /// `∂S/∂ln σ_w²` (Gaussian kernels only).
    pub d_w_log_var: T,
    /// `∂S/∂ln σ_h²` (Gaussian kernels only).
    pub d_h_log_var: T,
    pub hyper: HyperGrad<T>,
    /// The gradient is undefined at this point (zero distance for `log`/`pow`
    /// with `p < 2`, or for `hpb`); a zero subgradient is returned.
    pub singular: bool,
}

impl<T: Scalar> KernelGrad<T> {
    fn zeros(d: usize) -> Self {
        Self {
            d_w: vec![T::zero(); d],
            d_h: vec![T::zero(); d],
            d_w_log_var: T::zero(),
            d_h_log_var: T::zero(),
            hyper: HyperGrad::default(),
            singular: false,
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn sq_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

fn sq_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = x - y;
            t * t
        })
        .sum()
}

fn check_args<T: Scalar>(spec: &KernelSpec<T>, w: &[T], h: &[T]) -> Result<usize> {
    if w.len() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: h.len(),
        });
    }
    spec.validate_dim(w.len())?;
    Ok(w.len())
}

fn check_ball<T: Scalar>(norm_sq: T) -> Result<()> {
    if norm_sq < T::one() {
        Ok(())
    } else {
        Err(Error::HpbOutsideBall {
            norm: norm_sq.sqrt().as_f64(),
        })
    }
}

/// Scores one `(w, h)` pair.
pub fn score<'a, T: Scalar>(
    spec: &KernelSpec<T>,
    w: impl Into<KernelArg<'a, T>>,
    h: impl Into<KernelArg<'a, T>>,
) -> Result<Score<T>> {
    let (w, h) = (w.into(), h.into());
    let d = check_args(spec, w.vector, h.vector)?;
    let value = match spec.kind {
        KernelKind::Lin => dot(w.vector, h.vector),
        KernelKind::Pol => {
            let t = dot(w.vector, h.vector);
            (spec.alpha_for(d) * t + spec.c).powi(spec.degree())
        }
        KernelKind::Log | KernelKind::Pow | KernelKind::Rbf | KernelKind::Wav => {
            radial(spec, spec.gamma_for(d), sq_distance(w.vector, h.vector)).value
        }
        KernelKind::Hpb => {
            let (nw, nh) = (sq_norm(w.vector), sq_norm(h.vector));
            check_ball(nw)?;
            check_ball(nh)?;
            hpb_value(hpb_u(sq_distance(w.vector, h.vector), nw, nh))
        }
        KernelKind::Ssg => {
            let s = w.log_var.exp() + h.log_var.exp();
            gaussian_log_overlap(d, s, sq_distance(w.vector, h.vector))
        }
        KernelKind::Mog => {
            let g = spec.num_gauss;
            let dc = d / g;
            let s = w.log_var.exp() + h.log_var.exp();
            let mut ell = Vec::with_capacity(g * g);
            for wi in w.vector.chunks(dc) {
                for hj in h.vector.chunks(dc) {
                    ell.push(gaussian_log_overlap(dc, s, sq_distance(wi, hj)));
                }
            }
            let mut weights = vec![T::zero(); ell.len()];
            mog_combine(spec.mog_mode, &ell, &mut weights)
        }
    };
    Score::checked(value)
}

/// Scores a distance-based kernel from `‖w‖²`, `‖h‖²` and `w·h` alone.
///
/// The squared distance `‖w‖² + ‖h‖² - 2 w·h` is clamped at zero before any
/// power is taken. An unset `gamma` resolves against `d = 1`; pass
/// [`KernelSpec::resolved`] to bind it to the vector dimension.
pub fn score_via_trick<T: Scalar>(spec: &KernelSpec<T>, w_norm_sq: T, h_norm_sq: T, dot: T) -> Result<Score<T>> {
    spec.validate()?;
    if !spec.kind.is_distance_based() {
        return Err(Error::WrongKernelKind(spec.kind));
    }
    if w_norm_sq < T::zero() || h_norm_sq < T::zero() {
        return Err(Error::InvalidArgument("squared norms must be non-negative".into()));
    }
    let x = clamped_sq_distance(w_norm_sq, h_norm_sq, dot);
    let value = if spec.kind == KernelKind::Hpb {
        check_ball(w_norm_sq)?;
        check_ball(h_norm_sq)?;
        hpb_value(hpb_u(x, w_norm_sq, h_norm_sq))
    } else {
        radial(spec, spec.gamma_for(1), x).value
    };
    Score::checked(value)
}

/// Analytic gradient of [`score`] with respect to both arguments, the
/// Gaussian log-variances and the kernel hyperparameters.
pub fn grad<'a, T: Scalar>(
    spec: &KernelSpec<T>,
    w: impl Into<KernelArg<'a, T>>,
    h: impl Into<KernelArg<'a, T>>,
) -> Result<KernelGrad<T>> {
    let (w, h) = (w.into(), h.into());
    let d = check_args(spec, w.vector, h.vector)?;
    let two = T::lit(2.0);
    let mut g = KernelGrad::zeros(d);
    match spec.kind {
        KernelKind::Lin => {
            g.d_w.copy_from_slice(h.vector);
            g.d_h.copy_from_slice(w.vector);
        }
        KernelKind::Pol => {
            let t = dot(w.vector, h.vector);
            let alpha = spec.alpha_for(d);
            let deg = spec.degree();
            let q = alpha * t + spec.c;
            let dq = T::from_count(deg as usize) * q.powi(deg - 1);
            for i in 0..d {
                g.d_w[i] = dq * alpha * h.vector[i];
                g.d_h[i] = dq * alpha * w.vector[i];
            }
            g.hyper.alpha = dq * t;
            g.hyper.c = dq;
        }
        KernelKind::Log | KernelKind::Pow | KernelKind::Rbf | KernelKind::Wav => {
            let gamma = spec.gamma_for(d);
            let x = sq_distance(w.vector, h.vector);
            let r = radial(spec, gamma, x);
            g.singular = r.singular;
            for i in 0..d {
                let v = two * r.slope * (w.vector[i] - h.vector[i]);
                g.d_w[i] = v;
                g.d_h[i] = -v;
            }
            g.hyper = radial_hyper(spec, gamma, x);
        }
        KernelKind::Hpb => {
            let (nw, nh) = (sq_norm(w.vector), sq_norm(h.vector));
            check_ball(nw)?;
            check_ball(nh)?;
            let x = sq_distance(w.vector, h.vector);
            if x == T::zero() {
                g.singular = true;
            } else {
                let (aw, ah) = (T::one() - nw, T::one() - nh);
                let u = hpb_u(x, nw, nh);
                let ds_du = hpb_slope(u);
                let four = T::lit(4.0);
                for i in 0..d {
                    let diff = w.vector[i] - h.vector[i];
                    g.d_w[i] = ds_du * (four * diff / (aw * ah) + two * u * w.vector[i] / aw);
                    g.d_h[i] = ds_du * (-four * diff / (aw * ah) + two * u * h.vector[i] / ah);
                }
            }
        }
        KernelKind::Ssg => {
            let (vw, vh) = (w.log_var.exp(), h.log_var.exp());
            let s = vw + vh;
            let x = sq_distance(w.vector, h.vector);
            for i in 0..d {
                let v = -(w.vector[i] - h.vector[i]) / s;
                g.d_w[i] = v;
                g.d_h[i] = -v;
            }
            let ds = gaussian_log_overlap_ds(d, s, x);
            g.d_w_log_var = ds * vw;
            g.d_h_log_var = ds * vh;
        }
        KernelKind::Mog => {
            let gauss = spec.num_gauss;
            let dc = d / gauss;
            let (vw, vh) = (w.log_var.exp(), h.log_var.exp());
            let s = vw + vh;
            let mut ell = Vec::with_capacity(gauss * gauss);
            let mut xs = Vec::with_capacity(gauss * gauss);
            for wi in w.vector.chunks(dc) {
                for hj in h.vector.chunks(dc) {
                    let x = sq_distance(wi, hj);
                    xs.push(x);
                    ell.push(gaussian_log_overlap(dc, s, x));
                }
            }
            let mut weights = vec![T::zero(); ell.len()];
            mog_combine(spec.mog_mode, &ell, &mut weights);
            let mut ds = T::zero();
            for i in 0..gauss {
                for j in 0..gauss {
                    let wt = weights[i * gauss + j];
                    ds += wt * gaussian_log_overlap_ds(dc, s, xs[i * gauss + j]);
                    for t in 0..dc {
                        let v = -wt * (w.vector[i * dc + t] - h.vector[j * dc + t]) / s;
                        g.d_w[i * dc + t] += v;
                        g.d_h[j * dc + t] -= v;
                    }
                }
            }
            g.d_w_log_var = ds * vw;
            g.d_h_log_var = ds * vh;
        }
    }
    Ok(g)
}
