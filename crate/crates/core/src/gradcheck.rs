//! Finite-difference audits of the analytic gradients.
//!
//! Every comparison passes when the relative error is below `rel` or the
//! absolute error is below `abs`. Points where a kernel reports a gradient
//! singularity are skipped and counted.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, KernelArg, KernelKind, KernelSpec};
use crate::model::Parameters;
use crate::output_layer::{self, MixtureConfig, OutputParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-7 }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        err <= self.rel * analytic.abs().max(numeric.abs()) || err <= self.abs
    }
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub trial: usize,
    /// Which gradient entry, e.g. `d_w[3]` or `output.W[7]`.
    pub entry: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub label: String,
    pub dim: usize,
    pub trials: usize,
    /// Scalar comparisons made.
    pub checks: usize,
    pub skipped_singular: usize,
    pub failures: Vec<Failure>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<28} d={:<3} trials={:<4} checks={:<6} singular={:<3} failures={} {}",
            self.label,
            self.dim,
            self.trials,
            self.checks,
            self.skipped_singular,
            self.failures.len(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A random point strictly inside the ball of radius 0.9.
fn random_ball_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = random_vec(rng, d);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let r: f64 = rng.random_range(0.05..0.9);
    v.into_iter().map(|x| x * r / norm).collect()
}

/// Audits `grad` against central differences of `score` for one kernel.
pub fn audit_kernel(
    spec: &KernelSpec<f64>,
    dim: usize,
    trials: usize,
    seed: u64,
    tol: Tolerance,
) -> Result<AuditReport> {
    spec.validate_dim(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AuditReport {
        label: spec.to_string(),
        dim,
        trials,
        checks: 0,
        skipped_singular: 0,
        failures: Vec::new(),
    };
    let gaussian = spec.kind.is_gaussian();
    for trial in 0..trials {
        let (w, h) = if spec.kind == KernelKind::Hpb {
            (random_ball_point(&mut rng, dim), random_ball_point(&mut rng, dim))
        } else {
            (random_vec(&mut rng, dim), random_vec(&mut rng, dim))
        };
        let (lw, lh) = if gaussian {
            (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))
        } else {
            (0.0, 0.0)
        };
        let g = kernels::grad(spec, KernelArg::gaussian(&w, lw), KernelArg::gaussian(&h, lh))?;
        if g.singular {
            report.skipped_singular += 1;
            continue;
        }
        let f = |w: &[f64], lw: f64, h: &[f64], lh: f64| -> Result<f64> {
            Ok(kernels::score(spec, KernelArg::gaussian(w, lw), KernelArg::gaussian(h, lh))?.value)
        };
        let mut check = |entry: String, analytic: f64, numeric: f64| {
            report.checks += 1;
            if !tol.accepts(analytic, numeric) {
                report.failures.push(Failure {
                    trial,
                    entry,
                    analytic,
                    numeric,
                });
            }
        };
        for i in 0..dim {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[i] += FD_STEP;
            down[i] -= FD_STEP;
            let n = (f(&up, lw, &h, lh)? - f(&down, lw, &h, lh)?) / (2.0 * FD_STEP);
            check(format!("d_w[{i}]"), g.d_w[i], n);
            let (mut up, mut down) = (h.clone(), h.clone());
            up[i] += FD_STEP;
            down[i] -= FD_STEP;
            let n = (f(&w, lw, &up, lh)? - f(&w, lw, &down, lh)?) / (2.0 * FD_STEP);
            check(format!("d_h[{i}]"), g.d_h[i], n);
        }
        if gaussian {
            let n = (f(&w, lw + FD_STEP, &h, lh)? - f(&w, lw - FD_STEP, &h, lh)?) / (2.0 * FD_STEP);
            check("d_w_log_var".into(), g.d_w_log_var, n);
            let n = (f(&w, lw, &h, lh + FD_STEP)? - f(&w, lw, &h, lh - FD_STEP)?) / (2.0 * FD_STEP);
            check("d_h_log_var".into(), g.d_h_log_var, n);
        }
    }
    Ok(report)
}

/// Audits every output-layer parameter gradient and `∂L/∂h` of `loss` on a
/// random instance of the given mixture.
pub fn audit_output_layer(
    components: Vec<KernelSpec<f64>>,
    batch: usize,
    vocab: usize,
    dim: usize,
    rho: f64,
    seed: u64,
    tol: Tolerance,
) -> Result<AuditReport> {
    let label = components.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+");
    let config = MixtureConfig::new(components, dim, vocab).with_rho(rho);
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = OutputParams::init(&config, &mut rng);
    for a in params
        .word_log_vars
        .iter_mut()
        .chain(params.component_log_vars.iter_mut())
    {
        a.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let h = Array2::from_shape_simple_fn((batch, dim), || rng.random_range(-0.9..0.9));
    let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..vocab)).collect();

    let (_, cache) = output_layer::loss(&config, &params, h.view(), &targets)?;
    let grads = output_layer::backward(&config, &params, &cache, &targets)?;
    let mut report = AuditReport {
        label,
        dim,
        trials: 1,
        checks: 0,
        skipped_singular: grads.singular,
        failures: Vec::new(),
    };
    if grads.singular > 0 {
        return Ok(report);
    }
    let objective = |p: &OutputParams<f64>, h: &Array2<f64>| -> Result<f64> {
        Ok(output_layer::loss(&config, p, h.view(), &targets)?.0.total)
    };

    let mut probe = params.clone();
    for (ti, tensor) in grads.params.tensors().iter().enumerate() {
        for (i, &a) in tensor.data.iter().enumerate() {
            let orig = probe.tensors()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + FD_STEP;
            let up = objective(&probe, &h)?;
            probe.tensors_mut()[ti].data[i] = orig - FD_STEP;
            let down = objective(&probe, &h)?;
            probe.tensors_mut()[ti].data[i] = orig;
            record(
                &mut report,
                tol,
                format!("{}[{i}]", tensor.name),
                a,
                (up - down) / (2.0 * FD_STEP),
            );
        }
    }
    for (i, &a) in grads.d_inputs.iter().enumerate() {
        let (mut up, mut down) = (h.clone(), h.clone());
        bump(&mut up, i, FD_STEP)?;
        bump(&mut down, i, -FD_STEP)?;
        let n = (objective(&params, &up)? - objective(&params, &down)?) / (2.0 * FD_STEP);
        record(&mut report, tol, format!("d_h[{i}]"), a, n);
    }
    Ok(report)
}

fn bump(a: &mut Array2<f64>, i: usize, by: f64) -> Result<()> {
    let s = a
        .as_slice_mut()
        .ok_or_else(|| Error::ShapeMismatch("non-contiguous input".into()))?;
    s[i] += by;
    Ok(())
}

fn record(report: &mut AuditReport, tol: Tolerance, entry: String, analytic: f64, numeric: f64) {
    report.checks += 1;
    if !tol.accepts(analytic, numeric) {
        report.failures.push(Failure {
            trial: 0,
            entry,
            analytic,
            numeric,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kernel_passes_a_short_audit() {
        for kind in KernelKind::ALL {
            let r = audit_kernel(&KernelSpec::new(kind), 4, 10, 1, Tolerance::default()).unwrap();
            assert!(r.passed(), "{}: {:?}", r.summary(), r.failures);
            assert!(r.checks >= 80);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        assert!(!Tolerance::default().accepts(1.0, 1.001));
        assert!(Tolerance::default().accepts(1e-9, 5e-8));
    }

    #[test]
    fn mixture_audit_passes() {
        let comps = crate::kernels::parse_kernel_list("lin,rbf,ssg").unwrap();
        let r = audit_output_layer(comps, 2, 5, 3, 0.1, 3, Tolerance::default()).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }
}
