//! Test-only oracles shared by the integration tests.

#![allow(dead_code)]

use ksoftmax::kernels;
use ksoftmax::model::Parameters;
use ksoftmax::output_layer::{MixtureConfig, OutputParams};
use ndarray::Array2;

/// Central-difference gradient agreement: a pair passes when the relative
/// error is below `rel` or the absolute error is below `abs`.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

pub const GRAD_TOL: Tolerance = Tolerance { rel: 1e-4, abs: 1e-7 };

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        err <= self.rel * analytic.abs().max(numeric.abs()) || err <= self.abs
    }
}

#[derive(Debug)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares every entry of `analytic` against central differences of
/// `objective` evaluated at perturbed copies of `params`.
pub fn finite_difference_check<P, F>(
    params: &P,
    analytic: &impl Parameters<f64>,
    objective: F,
    eps: f64,
    tol: Tolerance,
) -> Vec<Mismatch>
where
    P: Parameters<f64> + Clone,
    F: Fn(&P) -> f64,
{
    let mut probe = params.clone();
    let mut out = Vec::new();
    for (ti, tensor) in analytic.tensors().iter().enumerate() {
        for (i, &a) in tensor.data.iter().enumerate() {
            let orig = probe.tensors()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + eps;
            let up = objective(&probe);
            probe.tensors_mut()[ti].data[i] = orig - eps;
            let down = objective(&probe);
            probe.tensors_mut()[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !tol.accepts(a, numeric) {
                out.push(Mismatch {
                    tensor: tensor.name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    out
}

/// Softmax by direct exponentiation after max subtraction.
pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Contexts of `hpb` components are scaled onto radius `1 - 1e-5` when they
/// reach it.
fn project_into_ball(v: Vec<f64>) -> Vec<f64> {
    let r = 1.0 - 1e-5;
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > r {
        v.into_iter().map(|x| x * r / n).collect()
    } else {
        v
    }
}

/// Direct double-loop evaluation of the mixture posterior.
pub fn brute_force_posterior(config: &MixtureConfig<f64>, params: &OutputParams<f64>, h: &Array2<f64>) -> Array2<f64> {
    let (b_n, d) = h.dim();
    let k_n = config.k();
    let mut out = Array2::zeros((b_n, config.vocab));
    for b in 0..b_n {
        let hb: Vec<f64> = h.row(b).to_vec();
        let pi = if k_n == 1 {
            vec![1.0]
        } else {
            let m = params.gating.as_ref().unwrap();
            naive_softmax(
                &(0..k_n)
                    .map(|k| (0..d).map(|i| m[[i, k]] * hb[i]).sum())
                    .collect::<Vec<f64>>(),
            )
        };
        for k in 0..k_n {
            let ctx: Vec<f64> = if k_n == 1 {
                hb.clone()
            } else {
                let c = &params.transforms[k];
                (0..d)
                    .map(|j| (0..d).map(|i| c[[i, j]] * hb[i]).sum::<f64>().tanh())
                    .collect()
            };
            let ctx = if config.components[k].kind == kernels::KernelKind::Hpb {
                project_into_ball(ctx)
            } else {
                ctx
            };
            let ctx_lv = params.component_log_vars.as_ref().map_or(0.0, |a| a[k]);
            let z: Vec<f64> = (0..config.vocab)
                .map(|v| {
                    let w: Vec<f64> = params.w.column(v).to_vec();
                    let w_lv = params.word_log_vars.as_ref().map_or(0.0, |a| a[v]);
                    kernels::score(
                        &config.components[k],
                        kernels::KernelArg::gaussian(&w, w_lv),
                        kernels::KernelArg::gaussian(&ctx, ctx_lv),
                    )
                    .unwrap()
                    .value
                })
                .collect();
            for (v, q) in naive_softmax(&z).into_iter().enumerate() {
                out[[b, v]] += pi[k] * q;
            }
        }
    }
    out
}
