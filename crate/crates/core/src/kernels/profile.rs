//! Scalar kernel profiles shared by the per-pair, batched and curve code paths.

use crate::scalar::Scalar;

use super::{KernelKind, KernelSpec, MogMode};

/// Value of a distance kernel and its derivative with respect to the squared
/// distance `x = ||w - h||²`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Radial<T> {
    pub value: T,
    pub slope: T,
    /// The derivative is unbounded at this point; `slope` is zeroed.
    pub singular: bool,
}

/// Partial derivatives of a score with respect to the kernel hyperparameters.
/// Entries that do not apply to the kernel are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HyperGrad<T> {
    pub p: T,
    pub alpha: T,
    pub c: T,
    pub gamma: T,
    pub a: T,
    pub b: T,
}

/// `||w - h||²` from squared norms and the inner product, clamped at zero.
#[inline]
pub fn clamped_sq_distance<T: Scalar>(w_norm_sq: T, h_norm_sq: T, dot: T) -> T {
    let x = w_norm_sq + h_norm_sq - T::lit(2.0) * dot;
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Profile of `log`, `pow`, `rbf` and `wav` as functions of the squared distance.
pub(crate) fn radial<T: Scalar>(spec: &KernelSpec<T>, gamma: T, x: T) -> Radial<T> {
    let half = T::lit(0.5);
    match spec.kind {
        KernelKind::Log | KernelKind::Pow => {
            let e = spec.p * half;
            let xp = x.powf(e);
            let singular = x == T::zero() && e < T::one();
            let raw_slope = if singular { T::zero() } else { -e * x.powf(e - T::one()) };
            if spec.kind == KernelKind::Log {
                Radial {
                    value: -xp.ln_1p(),
                    slope: raw_slope / (T::one() + xp),
                    singular,
                }
            } else {
                Radial {
                    value: -xp,
                    slope: raw_slope,
                    singular,
                }
            }
        }
        KernelKind::Rbf => {
            let value = (-gamma * x).exp();
            Radial {
                value,
                slope: -gamma * value,
                singular: false,
            }
        }
        KernelKind::Wav => {
            let decay = (-x / spec.b).exp();
            let phase = x / spec.a;
            let (sin, cos) = phase.sin_cos();
            Radial {
                value: cos * decay,
                slope: (-sin / spec.a - cos / spec.b) * decay,
                singular: false,
            }
        }
        _ => unreachable!("radial profile requested for `{}`", spec.kind),
    }
}

/// Hyperparameter derivatives of the radial kernels at squared distance `x`.
pub(crate) fn radial_hyper<T: Scalar>(spec: &KernelSpec<T>, gamma: T, x: T) -> HyperGrad<T> {
    let half = T::lit(0.5);
    let mut g = HyperGrad::default();
    match spec.kind {
        KernelKind::Log | KernelKind::Pow => {
            if x > T::zero() {
                let xp = x.powf(spec.p * half);
                let d_xp = xp * x.ln() * half;
                g.p = if spec.kind == KernelKind::Log {
                    -d_xp / (T::one() + xp)
                } else {
                    -d_xp
                };
            }
        }
        KernelKind::Rbf => g.gamma = -x * (-gamma * x).exp(),
        KernelKind::Wav => {
            let decay = (-x / spec.b).exp();
            let (sin, cos) = (x / spec.a).sin_cos();
            g.a = sin * x / (spec.a * spec.a) * decay;
            g.b = cos * decay * x / (spec.b * spec.b);
        }
        _ => {}
    }
    g
}

/// `u = 2x / ((1 - |w|²)(1 - |h|²))`, the argument of `arcosh(1 + u)`.
#[inline]
pub(crate) fn hpb_u<T: Scalar>(x: T, w_norm_sq: T, h_norm_sq: T) -> T {
    T::lit(2.0) * x / ((T::one() - w_norm_sq) * (T::one() - h_norm_sq))
}

/// `-arcosh(1 + u)`, evaluated as `-log1p(u + sqrt(u(u + 2)))` for accuracy near zero.
#[inline]
pub(crate) fn hpb_value<T: Scalar>(u: T) -> T {
    -(u + (u * (u + T::lit(2.0))).sqrt()).ln_1p()
}

/// `d(-arcosh(1 + u))/du`; unbounded at `u = 0`.
#[inline]
pub(crate) fn hpb_slope<T: Scalar>(u: T) -> T {
    -T::one() / (u * (u + T::lit(2.0))).sqrt()
}

/// Closed-form log of `∫ N(x; μ_w, s_w I) N(x; μ_h, s_h I) dx` with `s = s_w + s_h`
/// and `x = ||μ_w - μ_h||²` in `dim` dimensions.
#[inline]
pub(crate) fn gaussian_log_overlap<T: Scalar>(dim: usize, s: T, x: T) -> T {
    -T::from_count(dim) * T::lit(0.5) * (T::ln_two_pi() + s.ln()) - x / (T::lit(2.0) * s)
}

/// Derivative of [`gaussian_log_overlap`] with respect to `s`.
#[inline]
pub(crate) fn gaussian_log_overlap_ds<T: Scalar>(dim: usize, s: T, x: T) -> T {
    let two = T::lit(2.0);
    -T::from_count(dim) / (two * s) + x / (two * s * s)
}

/// Combines pairwise Gaussian log overlaps `ell` of a `mog` kernel; returns the
/// score and the weight each pair contributes to the derivative.
pub(crate) fn mog_combine<T: Scalar>(mode: MogMode, ell: &[T], weights: &mut [T]) -> T {
    match mode {
        MogMode::SumOfLogs => {
            weights.fill(T::one());
            ell.iter().copied().sum()
        }
        MogMode::LogOfSum => {
            let lse = crate::scalar::log_sum_exp(ell.iter().copied());
            for (w, &l) in weights.iter_mut().zip(ell) {
                *w = (l - lse).exp();
            }
            lse - T::from_count(ell.len()).ln()
        }
    }
}
