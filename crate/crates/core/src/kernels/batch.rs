//! Whole-vocabulary scoring. Pairwise squared distances come from one
//! `B×V` inner-product matrix plus squared norms, so no `B×V×d` difference
//! tensor is ever built.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{
    clamped_sq_distance, gaussian_log_overlap, gaussian_log_overlap_ds, hpb_slope, hpb_u, hpb_value, mog_combine,
    radial, KernelKind, KernelSpec, MogMode,
};

/// Gradients of `Σ_bv G_bv S(W_v, h_b)` for an upstream matrix `G`.
#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    /// `d×V`
    pub d_w: Array2<T>,
    /// `B×d`
    pub d_h: Array2<T>,
    /// Per-word `∂/∂ln σ_w²` (Gaussian kernels only).
    pub d_word_log_vars: Option<Array1<T>>,
    /// `∂/∂ln σ_h²` (Gaussian kernels only).
    pub d_context_log_var: T,
    /// Number of `(b, v)` pairs that hit a gradient singularity.
    pub singular: usize,
}

fn check_shapes<T: Scalar>(
    spec: &KernelSpec<T>,
    w: &ArrayView2<T>,
    word_log_vars: Option<&ArrayView1<T>>,
    h: &ArrayView2<T>,
) -> Result<()> {
    let d = w.nrows();
    if h.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: h.ncols(),
        });
    }
    if w.ncols() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary must hold at least 2 words, got {}",
            w.ncols()
        )));
    }
    if let Some(lv) = word_log_vars {
        if lv.len() != w.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{} word variances for {} words",
                lv.len(),
                w.ncols()
            )));
        }
    }
    spec.validate_dim(d)
}

fn col_sq_norms<T: Scalar>(m: &ArrayView2<T>) -> Array1<T> {
    m.map_axis(Axis(0), |c| c.iter().map(|&x| x * x).sum())
}

fn row_sq_norms<T: Scalar>(m: &ArrayView2<T>) -> Array1<T> {
    m.map_axis(Axis(1), |r| r.iter().map(|&x| x * x).sum())
}

/// `x_bv = ‖W_v - h_b‖²` for the given row/column blocks.
fn sq_distances<T: Scalar>(w: &ArrayView2<T>, h: &ArrayView2<T>) -> Array2<T> {
    let mut x = h.dot(w);
    let wn = col_sq_norms(w);
    let hn = row_sq_norms(h);
    for (b, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        for (v, e) in row.iter_mut().enumerate() {
            *e = clamped_sq_distance(wn[v], hn[b], *e);
        }
    }
    x
}

fn check_ball<T: Scalar>(norms: &Array1<T>) -> Result<()> {
    match norms.iter().find(|&&n| n >= T::one()) {
        Some(&n) => Err(Error::HpbOutsideBall {
            norm: n.sqrt().as_f64(),
        }),
        None => Ok(()),
    }
}

fn word_vars<T: Scalar>(word_log_vars: Option<&ArrayView1<T>>, v: usize) -> Array1<T> {
    match word_log_vars {
        Some(lv) => lv.mapv(T::exp),
        None => Array1::from_elem(v, T::one()),
    }
}

/// Pairwise Gaussian log overlaps of every (word-chunk i, context-chunk j) pair.
fn mog_pair_terms<T: Scalar>(
    g: usize,
    w: &ArrayView2<T>,
    h: &ArrayView2<T>,
    s: &Array2<T>,
) -> (Vec<Array2<T>>, Vec<Array2<T>>) {
    let dc = w.nrows() / g;
    let mut xs = Vec::with_capacity(g * g);
    let mut ells = Vec::with_capacity(g * g);
    for i in 0..g {
        let wi = w.slice(s![i * dc..(i + 1) * dc, ..]);
        for j in 0..g {
            let hj = h.slice(s![.., j * dc..(j + 1) * dc]);
            let x = sq_distances(&wi, &hj);
            let mut ell = x.clone();
            Zip::from(&mut ell)
                .and(&x)
                .and(s)
                .for_each(|e, &x, &s| *e = gaussian_log_overlap(dc, s, x));
            xs.push(x);
            ells.push(ell);
        }
    }
    (xs, ells)
}

/// Scores every context row of `h` (`B×d`) against every word column of `w`
/// (`d×V`), returning a `B×V` logit matrix.
///
/// `word_log_vars` (length `V`) and `context_log_var` are read by the Gaussian
/// kernels; missing word variances default to `σ² = 1`.
pub fn batch_logits<T: Scalar>(
    spec: &KernelSpec<T>,
    w: ArrayView2<T>,
    word_log_vars: Option<ArrayView1<T>>,
    h: ArrayView2<T>,
    context_log_var: T,
) -> Result<Array2<T>> {
    check_shapes(spec, &w, word_log_vars.as_ref(), &h)?;
    let d = w.nrows();
    let logits = match spec.kind {
        KernelKind::Lin => h.dot(&w),
        KernelKind::Pol => {
            let alpha = spec.alpha_for(d);
            let deg = spec.degree();
            h.dot(&w).mapv(|t| (alpha * t + spec.c).powi(deg))
        }
        KernelKind::Log | KernelKind::Pow | KernelKind::Rbf | KernelKind::Wav => {
            let gamma = spec.gamma_for(d);
            sq_distances(&w, &h).mapv(|x| radial(spec, gamma, x).value)
        }
        KernelKind::Hpb => {
            let wn = col_sq_norms(&w);
            let hn = row_sq_norms(&h);
            check_ball(&wn)?;
            check_ball(&hn)?;
            let mut x = sq_distances(&w, &h);
            for ((b, v), e) in x.indexed_iter_mut() {
                *e = hpb_value(hpb_u(*e, wn[v], hn[b]));
            }
            x
        }
        KernelKind::Ssg => {
            let vw = word_vars(word_log_vars.as_ref(), w.ncols());
            let vh = context_log_var.exp();
            let mut x = sq_distances(&w, &h);
            for ((_, v), e) in x.indexed_iter_mut() {
                *e = gaussian_log_overlap(d, vw[v] + vh, *e);
            }
            x
        }
        KernelKind::Mog => {
            let g = spec.num_gauss;
            let vw = word_vars(word_log_vars.as_ref(), w.ncols());
            let vh = context_log_var.exp();
            let s = Array2::from_shape_fn((h.nrows(), w.ncols()), |(_, v)| vw[v] + vh);
            let (_, ells) = mog_pair_terms(g, &w, &h, &s);
            let mut out = Array2::zeros((h.nrows(), w.ncols()));
            let mut ell = vec![T::zero(); g * g];
            let mut weights = vec![T::zero(); g * g];
            for ((b, v), e) in out.indexed_iter_mut() {
                for (slot, m) in ell.iter_mut().zip(&ells) {
                    *slot = m[[b, v]];
                }
                *e = mog_combine(spec.mog_mode, &ell, &mut weights);
            }
            out
        }
    };
    if let Some(((b, v), _)) = logits.indexed_iter().find(|(_, x)| !x.is_finite()) {
        return Err(Error::NonFiniteScore {
            component: None,
            row: Some(b),
            word: Some(v),
        });
    }
    Ok(logits)
}

/// Adds the gradient of `Σ_bv A_bv ‖W_v - h_b‖²` to `d_w` and `d_h`.
fn accumulate_sq_distance<T: Scalar>(
    a: &Array2<T>,
    w: &ArrayView2<T>,
    h: &ArrayView2<T>,
    mut d_w: ArrayViewMut2<T>,
    mut d_h: ArrayViewMut2<T>,
) {
    let two = T::lit(2.0);
    let col = a.sum_axis(Axis(0));
    let row = a.sum_axis(Axis(1));
    let hta = h.t().dot(a);
    let aw = a.dot(&w.t());
    Zip::indexed(&mut d_w).for_each(|(i, v), g| {
        *g += two * (w[[i, v]] * col[v] - hta[[i, v]]);
    });
    Zip::indexed(&mut d_h).for_each(|(b, i), g| {
        *g += two * (h[[b, i]] * row[b] - aw[[b, i]]);
    });
}

/// Backpropagates an upstream gradient `G = ∂L/∂logits` (`B×V`) through
/// [`batch_logits`].
pub fn batch_backward<T: Scalar>(
    spec: &KernelSpec<T>,
    w: ArrayView2<T>,
    word_log_vars: Option<ArrayView1<T>>,
    h: ArrayView2<T>,
    context_log_var: T,
    upstream: ArrayView2<T>,
) -> Result<BatchGrad<T>> {
    check_shapes(spec, &w, word_log_vars.as_ref(), &h)?;
    if upstream.dim() != (h.nrows(), w.ncols()) {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient is {:?}, expected {:?}",
            upstream.dim(),
            (h.nrows(), w.ncols())
        )));
    }
    let (d, v_count) = w.dim();
    let mut out = BatchGrad {
        d_w: Array2::zeros((d, v_count)),
        d_h: Array2::zeros((h.nrows(), d)),
        d_word_log_vars: None,
        d_context_log_var: T::zero(),
        singular: 0,
    };
    let two = T::lit(2.0);
    match spec.kind {
        KernelKind::Lin => {
            out.d_w = h.t().dot(&upstream);
            out.d_h = upstream.dot(&w.t());
        }
        KernelKind::Pol => {
            let alpha = spec.alpha_for(d);
            let deg = spec.degree();
            let mut a = h.dot(&w);
            Zip::from(&mut a).and(&upstream).for_each(|t, &g| {
                *t = g * T::from_count(deg as usize) * (alpha * *t + spec.c).powi(deg - 1) * alpha;
            });
            out.d_w = h.t().dot(&a);
            out.d_h = a.dot(&w.t());
        }
        KernelKind::Log | KernelKind::Pow | KernelKind::Rbf | KernelKind::Wav => {
            let gamma = spec.gamma_for(d);
            let mut a = sq_distances(&w, &h);
            let mut singular = 0;
            Zip::from(&mut a).and(&upstream).for_each(|x, &g| {
                let r = radial(spec, gamma, *x);
                singular += r.singular as usize;
                *x = g * r.slope;
            });
            out.singular = singular;
            accumulate_sq_distance(&a, &w, &h, out.d_w.view_mut(), out.d_h.view_mut());
        }
        KernelKind::Hpb => {
            let wn = col_sq_norms(&w);
            let hn = row_sq_norms(&h);
            check_ball(&wn)?;
            check_ball(&hn)?;
            let x = sq_distances(&w, &h);
            // a: coefficient on ‖w - h‖², e: coefficient on the norm terms
            let mut a = Array2::zeros(x.dim());
            let mut e = Array2::zeros(x.dim());
            for ((b, v), &xbv) in x.indexed_iter() {
                if xbv == T::zero() {
                    out.singular += 1;
                    continue;
                }
                let (aw, ah) = (T::one() - wn[v], T::one() - hn[b]);
                let u = hpb_u(xbv, wn[v], hn[b]);
                let gd = upstream[[b, v]] * hpb_slope(u);
                a[[b, v]] = gd * two / (aw * ah);
                e[[b, v]] = gd * u;
            }
            accumulate_sq_distance(&a, &w, &h, out.d_w.view_mut(), out.d_h.view_mut());
            for ((b, v), &ebv) in e.indexed_iter() {
                if ebv == T::zero() {
                    continue;
                }
                let (aw, ah) = (T::one() - wn[v], T::one() - hn[b]);
                for i in 0..d {
                    out.d_w[[i, v]] += two * ebv * w[[i, v]] / aw;
                    out.d_h[[b, i]] += two * ebv * h[[b, i]] / ah;
                }
            }
        }
        KernelKind::Ssg => {
            let vw = word_vars(word_log_vars.as_ref(), v_count);
            let vh = context_log_var.exp();
            let x = sq_distances(&w, &h);
            let mut a = Array2::zeros(x.dim());
            let mut d_lv = Array1::zeros(v_count);
            let mut d_ctx = T::zero();
            for ((b, v), &xbv) in x.indexed_iter() {
                let g = upstream[[b, v]];
                let s = vw[v] + vh;
                a[[b, v]] = -g / (two * s);
                let ds = g * gaussian_log_overlap_ds(d, s, xbv);
                d_lv[v] += ds * vw[v];
                d_ctx += ds * vh;
            }
            accumulate_sq_distance(&a, &w, &h, out.d_w.view_mut(), out.d_h.view_mut());
            out.d_word_log_vars = Some(d_lv);
            out.d_context_log_var = d_ctx;
        }
        KernelKind::Mog => {
            let g = spec.num_gauss;
            let dc = d / g;
            let vw = word_vars(word_log_vars.as_ref(), v_count);
            let vh = context_log_var.exp();
            let s = Array2::from_shape_fn((h.nrows(), v_count), |(_, v)| vw[v] + vh);
            let (xs, ells) = mog_pair_terms(g, &w, &h, &s);
            // pair weights per (b, v): all ones, or mixture responsibilities
            let weights: Vec<Array2<T>> = match spec.mog_mode {
                MogMode::SumOfLogs => vec![Array2::ones(s.dim()); g * g],
                MogMode::LogOfSum => {
                    let mut ws = vec![Array2::zeros(s.dim()); g * g];
                    let mut ell = vec![T::zero(); g * g];
                    let mut wt = vec![T::zero(); g * g];
                    for ((b, v), _) in s.indexed_iter() {
                        for (slot, m) in ell.iter_mut().zip(&ells) {
                            *slot = m[[b, v]];
                        }
                        mog_combine(spec.mog_mode, &ell, &mut wt);
                        for (m, &x) in ws.iter_mut().zip(&wt) {
                            m[[b, v]] = x;
                        }
                    }
                    ws
                }
            };
            let mut d_lv = Array1::zeros(v_count);
            let mut d_ctx = T::zero();
            for i in 0..g {
                let wi = w.slice(s![i * dc..(i + 1) * dc, ..]);
                for j in 0..g {
                    let hj = h.slice(s![.., j * dc..(j + 1) * dc]);
                    let pair = i * g + j;
                    let mut a = Array2::zeros(s.dim());
                    for ((b, v), &sbv) in s.indexed_iter() {
                        let gw = upstream[[b, v]] * weights[pair][[b, v]];
                        a[[b, v]] = -gw / (two * sbv);
                        let ds = gw * gaussian_log_overlap_ds(dc, sbv, xs[pair][[b, v]]);
                        d_lv[v] += ds * vw[v];
                        d_ctx += ds * vh;
                    }
                    accumulate_sq_distance(
                        &a,
                        &wi,
                        &hj,
                        out.d_w.slice_mut(s![i * dc..(i + 1) * dc, ..]),
                        out.d_h.slice_mut(s![.., j * dc..(j + 1) * dc]),
                    );
                }
            }
            out.d_word_log_vars = Some(d_lv);
            out.d_context_log_var = d_ctx;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{grad, score, KernelArg};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-scale..scale))
    }

    fn specs() -> Vec<KernelSpec<f64>> {
        vec![
            KernelSpec::new(KernelKind::Lin),
            KernelSpec::new(KernelKind::Log).with_p(1.5),
            KernelSpec::new(KernelKind::Pow),
            KernelSpec::new(KernelKind::Pol).with_p(3.0),
            KernelSpec::new(KernelKind::Rbf),
            KernelSpec::new(KernelKind::Ssg),
            KernelSpec::new(KernelKind::Mog),
            KernelSpec::new(KernelKind::Mog).with_mog_mode(MogMode::LogOfSum),
            KernelSpec::new(KernelKind::Hpb),
            KernelSpec::new(KernelKind::Wav).with_wavelet(2.0, 3.0),
        ]
    }

    #[test]
    fn basis_vectors_with_lin() {
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let h = array![[1.0, 0.0]];
        let l = batch_logits(&KernelSpec::new(KernelKind::Lin), w.view(), None, h.view(), 0.0).unwrap();
        assert_eq!(l, array![[1.0, 0.0]]);
    }

    #[test]
    fn distant_rbf_flushes_to_zero() {
        let w = array![[0.0, 20.0], [0.0, 20.0]];
        let h = array![[0.0, 0.0]];
        let spec = KernelSpec::new(KernelKind::Rbf).with_gamma(1.0);
        let l = batch_logits(&spec, w.view(), None, h.view(), 0.0).unwrap();
        assert_eq!(l[[0, 0]], 1.0);
        assert_eq!(l[[0, 1]], 0.0);
    }

    #[test]
    fn rejects_single_word_vocabulary() {
        let w = array![[1.0], [0.0]];
        let h = array![[1.0, 0.0]];
        let r = batch_logits(&KernelSpec::new(KernelKind::Lin), w.view(), None, h.view(), 0.0);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn reports_offending_pair() {
        let w = array![[1.0, 1e200], [0.0, 0.0]];
        let h = array![[1.0, 0.0], [1e200, 0.0]];
        let spec = KernelSpec::new(KernelKind::Pol).with_p(3.0).with_alpha(1.0);
        let r = batch_logits(&spec, w.view(), None, h.view(), 0.0);
        assert!(matches!(
            r,
            Err(Error::NonFiniteScore {
                row: Some(0),
                word: Some(1),
                ..
            })
        ));
    }

    // per-pair loop oracle for both directions
    #[test]
    fn matches_per_pair_scores_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b_n, v_n, d) = (3, 5, 4);
        for spec in specs() {
            let scale = if spec.kind == KernelKind::Hpb { 0.4 } else { 1.0 };
            let w = random(&mut rng, (d, v_n), scale);
            let h = random(&mut rng, (b_n, d), scale);
            let lv = Array1::from_shape_fn(v_n, |_| rng.random_range(-0.5..0.5));
            let ctx_lv = 0.3;
            let up = random(&mut rng, (b_n, v_n), 1.0);
            let logits = batch_logits(&spec, w.view(), Some(lv.view()), h.view(), ctx_lv).unwrap();
            let bg = batch_backward(&spec, w.view(), Some(lv.view()), h.view(), ctx_lv, up.view()).unwrap();
            let mut d_w = Array2::<f64>::zeros((d, v_n));
            let mut d_h = Array2::<f64>::zeros((b_n, d));
            let mut d_lv = Array1::<f64>::zeros(v_n);
            let mut d_ctx = 0.0;
            for b in 0..b_n {
                for v in 0..v_n {
                    let wv = w.column(v).to_vec();
                    let hb = h.row(b).to_vec();
                    let wa = KernelArg::gaussian(&wv, lv[v]);
                    let ha = KernelArg::gaussian(&hb, ctx_lv);
                    let sc = score(&spec, wa, ha).unwrap().value;
                    assert!((sc - logits[[b, v]]).abs() < 1e-10, "{spec} score");
                    let g = grad(&spec, wa, ha).unwrap();
                    for i in 0..d {
                        d_w[[i, v]] += up[[b, v]] * g.d_w[i];
                        d_h[[b, i]] += up[[b, v]] * g.d_h[i];
                    }
                    d_lv[v] += up[[b, v]] * g.d_w_log_var;
                    d_ctx += up[[b, v]] * g.d_h_log_var;
                }
            }
            let close =
                |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9 * (1.0 + x.abs()));
            assert!(close(&bg.d_w, &d_w), "{spec} d_w");
            assert!(close(&bg.d_h, &d_h), "{spec} d_h");
            if spec.kind.is_gaussian() {
                let got = bg.d_word_log_vars.as_ref().unwrap();
                assert!(got.iter().zip(&d_lv).all(|(x, y)| (x - y).abs() < 1e-9), "{spec} d_lv");
                assert!((bg.d_context_log_var - d_ctx).abs() < 1e-9, "{spec} d_ctx");
            }
        }
    }
}
