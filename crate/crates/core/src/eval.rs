//! Perplexity, a unigram reference model, kernel profile curves and the
//! neighbor/disambiguation probe.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::data::{ordered_windows, BOS, RESERVED};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelKind, KernelSpec, MogMode};
use crate::model::LanguageModel;
use crate::output_layer::{self, ForwardCache};
use crate::scalar::Scalar;

/// Aggregate statistics of a model over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport<T> {
    /// `exp` of the mean negative log posterior of the targets.
    pub perplexity: T,
    /// Mean negative natural-log posterior per target.
    pub cross_entropy: T,
    pub tokens: usize,
    /// Mean mixture weight of each component.
    pub pi_mean: Vec<T>,
    /// Mean over targets of the population variance of the mixture weights.
    pub pi_variance: T,
}

/// Scores every target of `sentences` in corpus order.
pub fn evaluate<T: Scalar>(
    model: &LanguageModel<T>,
    sentences: &[Vec<usize>],
    batch_size: usize,
) -> Result<EvalReport<T>> {
    let k = model.config.mixture.k();
    let mut nll = T::zero();
    let mut pi_sum = vec![T::zero(); k];
    let mut var_sum = T::zero();
    let mut tokens = 0;
    for batch in ordered_windows(sentences, model.config.context, batch_size.max(1)) {
        let cache = model.forward(batch.windows.view())?;
        accumulate(
            &cache.output,
            &batch.targets,
            &mut nll,
            &mut pi_sum,
            &mut var_sum,
            model.vocab(),
        )?;
        tokens += batch.targets.len();
    }
    if tokens == 0 {
        return Err(Error::EmptySplit("evaluation"));
    }
    let n = T::from_count(tokens);
    let cross_entropy = nll / n;
    Ok(EvalReport {
        perplexity: cross_entropy.exp(),
        cross_entropy,
        tokens,
        pi_mean: pi_sum.into_iter().map(|s| s / n).collect(),
        pi_variance: var_sum / n,
    })
}

fn accumulate<T: Scalar>(
    cache: &ForwardCache<T>,
    targets: &[usize],
    nll: &mut T,
    pi_sum: &mut [T],
    var_sum: &mut T,
    vocab: usize,
) -> Result<()> {
    for (b, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::TargetOutOfRange { target: t, vocab });
        }
        *nll -= cache.log_posterior[[b, t]];
    }
    for (k, s) in pi_sum.iter_mut().enumerate() {
        *s += cache.mixture.column(k).sum();
    }
    *var_sum += cache.mean_mixture_variance() * T::from_count(targets.len());
    Ok(())
}

/// Perplexity of `model` on `sentences`.
pub fn perplexity<T: Scalar>(model: &LanguageModel<T>, sentences: &[Vec<usize>], batch_size: usize) -> Result<T> {
    evaluate(model, sentences, batch_size).map(|r| r.perplexity)
}

/// Perplexity from per-target natural-log probabilities.
pub fn perplexity_from_log_probs<T: Scalar>(log_probs: &[T]) -> Result<T> {
    if log_probs.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let nll: T = log_probs.iter().map(|&l| -l).sum();
    Ok((nll / T::from_count(log_probs.len())).exp())
}

/// Context-free unigram model estimated by add-one smoothed counts.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramModel {
    pub log_probs: Vec<f64>,
}

impl UnigramModel {
    /// Counts tokens of `train` over ids `[RESERVED, vocab)` plus `UNK`;
    /// `BOS` never occurs as a target and gets no mass.
    pub fn fit(train: &[Vec<usize>], vocab: usize) -> Result<Self> {
        let mut counts = vec![0.0f64; vocab];
        for &t in train.iter().flatten() {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
            counts[t] += 1.0;
        }
        let mut log_probs = vec![f64::NEG_INFINITY; vocab];
        let total: f64 = counts.iter().skip(1).sum::<f64>() + (vocab - 1) as f64;
        for (id, c) in counts.iter().enumerate().skip(1) {
            log_probs[id] = ((c + 1.0) / total).ln();
        }
        Ok(Self { log_probs })
    }

    pub fn perplexity(&self, sentences: &[Vec<usize>]) -> Result<f64> {
        let lp: Vec<f64> = sentences
            .iter()
            .flatten()
            .map(|&t| {
                self.log_probs.get(t).copied().ok_or(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.log_probs.len(),
                })
            })
            .collect::<Result<_>>()?;
        perplexity_from_log_probs(&lp)
    }
}

/// One sample of a kernel profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint<T> {
    /// Squared distance, or the dot product for `lin` and `pol`.
    pub x: T,
    pub score: T,
    /// `dS/dx`; `-inf` where the profile has a vertical tangent.
    pub slope: T,
}

/// Whether a kernel's curve is plotted against the dot product.
pub fn plotted_against_dot(kind: KernelKind) -> bool {
    matches!(kind, KernelKind::Lin | KernelKind::Pol)
}

/// Score and slope of the one-dimensional profile of `spec` at `x`.
///
/// Distance kernels are read along `‖w - h‖² = x` with unit variances for
/// the Gaussian kinds; a `mog` has every mean pair at squared distance `x`;
/// `hpb` places `h` at the origin so `x = ‖w‖²` must stay below 1.
/// Dimension-dependent defaults (`γ`, `α`) resolve with `d = 1`.
pub fn kernel_profile<T: Scalar>(spec: &KernelSpec<T>, x: T) -> Result<CurvePoint<T>> {
    spec.validate()?;
    let one = T::one();
    let two = T::lit(2.0);
    let (score, slope) = match spec.kind {
        KernelKind::Lin => (x, one),
        KernelKind::Pol => {
            let alpha = spec.alpha_for(1);
            let base = alpha * x + spec.c;
            (base.powf(spec.p), spec.p * alpha * base.powf(spec.p - one))
        }
        KernelKind::Log | KernelKind::Pow | KernelKind::Rbf | KernelKind::Wav => {
            check_nonneg(x)?;
            let r = kernels::radial(spec, spec.gamma_for(1), x);
            (r.value, if r.singular { T::neg_infinity() } else { r.slope })
        }
        KernelKind::Ssg => {
            check_nonneg(x)?;
            (kernels::gaussian_log_overlap(1, two, x), -one / (two * two))
        }
        KernelKind::Mog => {
            check_nonneg(x)?;
            let ell = kernels::gaussian_log_overlap(1, two, x);
            let slope = -one / (two * two);
            match spec.mog_mode {
                MogMode::SumOfLogs => {
                    let pairs = T::from_count(spec.num_gauss * spec.num_gauss);
                    (pairs * ell, pairs * slope)
                }
                MogMode::LogOfSum => (ell, slope),
            }
        }
        KernelKind::Hpb => {
            check_nonneg(x)?;
            if x >= one {
                return Err(Error::HpbOutsideBall {
                    norm: x.sqrt().as_f64(),
                });
            }
            let u = kernels::hpb_u(x, x, T::zero());
            let du = two / ((one - x) * (one - x));
            let slope = if u == T::zero() {
                T::neg_infinity()
            } else {
                kernels::hpb_slope(u) * du
            };
            (kernels::hpb_value(u), slope)
        }
    };
    Ok(CurvePoint { x, score, slope })
}

fn check_nonneg<T: Scalar>(x: T) -> Result<()> {
    if x < T::zero() {
        return Err(Error::InvalidArgument(format!("squared distance {x} is negative")));
    }
    Ok(())
}

/// `steps` evenly spaced samples of the profile of `spec` over `[x_min, x_max]`.
pub fn kernel_curve<T: Scalar>(spec: &KernelSpec<T>, x_min: T, x_max: T, steps: usize) -> Result<Vec<CurvePoint<T>>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 steps, got {steps}")));
    }
    if x_max.partial_cmp(&x_min) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument(format!("empty range [{x_min}, {x_max}]")));
    }
    let span = x_max - x_min;
    let last = T::from_count(steps - 1);
    (0..steps)
        .map(|i| {
            let x = if i + 1 == steps {
                x_max
            } else {
                x_min + span * T::from_count(i) / last
            };
            kernel_profile(spec, x)
        })
        .collect()
}

/// CSV text for one curve: header `x,score,dscore_dx`, or
/// `dot,score,dscore_ddot` for kernels plotted against the dot product.
pub fn curve_csv<T: Scalar>(kind: KernelKind, points: &[CurvePoint<T>]) -> String {
    let mut out = String::from(if plotted_against_dot(kind) {
        "dot,score,dscore_ddot\n"
    } else {
        "x,score,dscore_dx\n"
    });
    for p in points {
        writeln!(out, "{},{},{}", p.x, p.score, p.slope).expect("writing to a String");
    }
    out
}

/// Curves for several kernels over the same range, keyed by the kernel's spec string.
pub fn emit_kernel_curves<T: Scalar>(specs: &[KernelSpec<T>], x_max: T, steps: usize) -> Result<Vec<(String, String)>> {
    specs
        .iter()
        .map(|s| {
            let hi = if s.kind == KernelKind::Hpb && x_max >= T::one() {
                T::lit(0.99)
            } else {
                x_max
            };
            let lo = if plotted_against_dot(s.kind) { -x_max } else { T::zero() };
            Ok((s.to_string(), curve_csv(s.kind, &kernel_curve(s, lo, hi, steps)?)))
        })
        .collect()
}

/// A word near the query under the raw inner product of `W` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub score: f64,
}

/// One mixture component's view of a context.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentView {
    pub kernel: String,
    /// Mixture weight of the component for this context.
    pub weight: f64,
    /// Logit of the query followed by each neighbor.
    pub logits: Vec<f64>,
    /// Component softmax probability of the query followed by each neighbor.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextView {
    pub window: Vec<usize>,
    pub components: Vec<ComponentView>,
    /// Mixture posterior of the query followed by each neighbor.
    pub posterior: Vec<f64>,
}

impl ContextView {
    /// `p(query) - p(neighbor)` per neighbor.
    pub fn posterior_gaps(&self) -> Vec<f64> {
        self.posterior[1..].iter().map(|p| self.posterior[0] - p).collect()
    }

    /// Per component, `logit(query) - logit(neighbor)` per neighbor.
    pub fn logit_gaps(&self) -> Vec<Vec<f64>> {
        self.components
            .iter()
            .map(|c| c.logits[1..].iter().map(|l| c.logits[0] - l).collect())
            .collect()
    }
}

/// Neighbors of one query word and how each context separates them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub query: usize,
    /// Sorted by descending inner product; excludes the query itself.
    pub neighbors: Vec<Neighbor>,
    pub contexts: Vec<ContextView>,
}

/// Top-`m` inner-product neighbors of `query` among non-reserved ids, the
/// query included; ties go to the smaller id.
pub fn nearest_neighbors<T: Scalar>(w: &Array2<T>, query: usize, m: usize) -> Result<Vec<Neighbor>> {
    let vocab = w.ncols();
    if query >= vocab {
        return Err(Error::TokenOutOfRange { token: query, vocab });
    }
    let q = w.column(query);
    let mut all: Vec<Neighbor> = (0..vocab)
        .filter(|&v| v >= RESERVED || v == query)
        .map(|v| Neighbor {
            id: v,
            score: q.dot(&w.column(v)).as_f64(),
        })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    all.truncate(m);
    Ok(all)
}

/// For each query, reports its `top_m` inner-product neighbors and, for each
/// context window, the per-component logits and posteriors of the query and
/// those neighbors. Windows shorter than the model's context are left-padded
/// with `BOS`; longer ones keep their last tokens.
pub fn disambiguation_probe<T: Scalar>(
    model: &LanguageModel<T>,
    queries: &[usize],
    contexts: &[Vec<usize>],
    top_m: usize,
) -> Result<Vec<ProbeReport>> {
    let n = model.config.context;
    let vocab = model.vocab();
    let mut windows = Array2::from_elem((contexts.len(), n), BOS);
    for (row, ctx) in contexts.iter().enumerate() {
        if let Some(&t) = ctx.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token: t, vocab });
        }
        let tail = &ctx[ctx.len().saturating_sub(n)..];
        for (j, &t) in tail.iter().enumerate() {
            windows[[row, n - tail.len() + j]] = t;
        }
    }
    let cache = if contexts.is_empty() {
        None
    } else {
        Some(model.forward(windows.view())?.output)
    };
    let mixture = &model.config.mixture;

    queries
        .iter()
        .map(|&q| {
            let mut neighbors = nearest_neighbors(&model.output.w, q, top_m + 1)?;
            neighbors.retain(|nb| nb.id != q);
            neighbors.truncate(top_m);
            let ids: Vec<usize> = std::iter::once(q).chain(neighbors.iter().map(|nb| nb.id)).collect();
            let contexts = match &cache {
                None => Vec::new(),
                Some(c) => (0..contexts.len())
                    .map(|b| ContextView {
                        window: windows.row(b).to_vec(),
                        components: (0..mixture.k())
                            .map(|k| ComponentView {
                                kernel: mixture.components[k].to_string(),
                                weight: c.mixture[[b, k]].as_f64(),
                                logits: ids.iter().map(|&v| c.logits[k][[b, v]].as_f64()).collect(),
                                probs: ids.iter().map(|&v| c.log_softmax[k][[b, v]].exp().as_f64()).collect(),
                            })
                            .collect(),
                        posterior: ids.iter().map(|&v| c.log_posterior[[b, v]].exp().as_f64()).collect(),
                    })
                    .collect(),
            };
            Ok(ProbeReport {
                query: q,
                neighbors,
                contexts,
            })
        })
        .collect()
}

/// Indented plain-text rendering; `name` maps ids to tokens.
pub fn render_probe_text(reports: &[ProbeReport], name: impl Fn(usize) -> String) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "query {}", name(r.query));
        let _ = writeln!(out, "  neighbors (inner product)");
        for (i, nb) in r.neighbors.iter().enumerate() {
            let _ = writeln!(out, "    {:>3}. {:<20} {:.6}", i + 1, name(nb.id), nb.score);
        }
        for c in &r.contexts {
            let window: Vec<String> = c.window.iter().map(|&t| name(t)).collect();
            let _ = writeln!(out, "  context [{}]", window.join(" "));
            let _ = writeln!(out, "    posterior {:<20} {:.6}", name(r.query), c.posterior[0]);
            for (nb, gap) in r.neighbors.iter().zip(c.posterior_gaps()) {
                let _ = writeln!(out, "    posterior gap vs {:<13} {:+.6}", name(nb.id), gap);
            }
            for (comp, gaps) in c.components.iter().zip(c.logit_gaps()) {
                let _ = writeln!(out, "    component {} weight {:.4}", comp.kernel, comp.weight);
                for (nb, gap) in r.neighbors.iter().zip(gaps) {
                    let _ = writeln!(out, "      logit gap vs {:<15} {:+.6}", name(nb.id), gap);
                }
            }
        }
    }
    out
}

/// Tab-separated rendering, one record per line. Records are either
/// `neighbor query rank token score` or
/// `context query window token component kernel weight logit prob posterior`.
pub fn render_probe_tsv(reports: &[ProbeReport], name: impl Fn(usize) -> String) -> String {
    let mut out = String::new();
    for r in reports {
        let q = name(r.query);
        for (i, nb) in r.neighbors.iter().enumerate() {
            let _ = writeln!(out, "neighbor\t{q}\t{}\t{}\t{}", i + 1, name(nb.id), nb.score);
        }
        let ids: Vec<usize> = std::iter::once(r.query)
            .chain(r.neighbors.iter().map(|n| n.id))
            .collect();
        for c in &r.contexts {
            let window: Vec<String> = c.window.iter().map(|&t| name(t)).collect();
            let window = window.join(" ");
            for (j, &v) in ids.iter().enumerate() {
                for (k, comp) in c.components.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "context\t{q}\t{window}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        name(v),
                        k + 1,
                        comp.kernel,
                        comp.weight,
                        comp.logits[j],
                        comp.probs[j],
                        c.posterior[j]
                    );
                }
            }
        }
    }
    out
}

/// Mean negative log-likelihood via the loss function with the regularizer off.
pub fn cross_entropy_via_loss<T: Scalar>(
    model: &LanguageModel<T>,
    sentences: &[Vec<usize>],
    batch_size: usize,
) -> Result<T> {
    let mut config = model.config.mixture.clone();
    config.rho = T::zero();
    let mut total = T::zero();
    let mut tokens = 0;
    for batch in ordered_windows(sentences, model.config.context, batch_size.max(1)) {
        let h = crate::encoder::encode(&model.encoder, batch.windows.view())?;
        let (value, _) = output_layer::loss(&config, &model.output, h.view(), &batch.targets)?;
        total += value.total * T::from_count(batch.targets.len());
        tokens += batch.targets.len();
    }
    Ok(total / T::from_count(tokens.max(1)))
}
