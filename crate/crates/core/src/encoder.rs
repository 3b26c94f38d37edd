//! Feedforward n-gram context encoder.
//!
//! `h = tanh(Fᵀ [E_{t1}; …; E_{tn}] + bias)`, so every context vector lies in
//! the open cube `(-1, 1)^d`.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Parameters, TensorMut, TensorRef};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// Input embeddings `E`, `d_e×V`.
    pub e: Array2<T>,
    /// Projection `F`, `(n·d_e)×d`.
    pub f: Array2<T>,
    pub bias: Array1<T>,
    /// Context length.
    pub n: usize,
    /// Embedding size.
    pub d_e: usize,
}

/// Forward intermediates needed by [`backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    /// Concatenated window embeddings, `B×(n·d_e)`.
    pub inputs: Array2<T>,
    /// Encoded contexts, `B×d`.
    pub h: Array2<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init<R: Rng>(n: usize, d_e: usize, d: usize, vocab: usize, rng: &mut R) -> Result<Self> {
        if n == 0 || d_e == 0 || d == 0 {
            return Err(Error::Config(format!(
                "encoder sizes must be positive (n={n}, d_e={d_e}, d={d})"
            )));
        }
        let be = 1.0 / (d_e as f64).sqrt();
        let bf = 1.0 / ((n * d_e) as f64).sqrt();
        Ok(Self {
            e: Array2::from_shape_simple_fn((d_e, vocab), || T::lit(rng.random_range(-be..be))),
            f: Array2::from_shape_simple_fn((n * d_e, d), || T::lit(rng.random_range(-bf..bf))),
            bias: Array1::zeros(d),
            n,
            d_e,
        })
    }

    pub fn vocab(&self) -> usize {
        self.e.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            e: Array2::zeros(self.e.dim()),
            f: Array2::zeros(self.f.dim()),
            bias: Array1::zeros(self.bias.len()),
            n: self.n,
            d_e: self.d_e,
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::ShapeMismatch("context length must be at least 1".into()));
        }
        if self.e.nrows() != self.d_e || self.f.nrows() != self.n * self.d_e || self.bias.len() != self.f.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "encoder E {:?}, F {:?}, bias {} inconsistent with n={} d_e={}",
                self.e.dim(),
                self.f.dim(),
                self.bias.len(),
                self.n,
                self.d_e
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for EncoderParams<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        vec![
            TensorRef::matrix("encoder.E", &self.e),
            TensorRef::matrix("encoder.F", &self.f),
            TensorRef::vector("encoder.bias", &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        vec![
            TensorMut::matrix("encoder.E", &mut self.e),
            TensorMut::matrix("encoder.F", &mut self.f),
            TensorMut::vector("encoder.bias", &mut self.bias),
        ]
    }
}

fn check_windows<T: Scalar>(params: &EncoderParams<T>, windows: &ArrayView2<usize>) -> Result<()> {
    params.check_shapes()?;
    if windows.ncols() != params.n {
        return Err(Error::DimensionMismatch {
            expected: params.n,
            found: windows.ncols(),
        });
    }
    let vocab = params.vocab();
    if let Some(&token) = windows.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token, vocab });
    }
    Ok(())
}

/// Encodes `B×n` token windows into `B×d` context vectors.
pub fn encode<T: Scalar>(params: &EncoderParams<T>, windows: ArrayView2<usize>) -> Result<Array2<T>> {
    forward(params, windows).map(|c| c.h)
}

pub fn forward<T: Scalar>(params: &EncoderParams<T>, windows: ArrayView2<usize>) -> Result<EncoderCache<T>> {
    check_windows(params, &windows)?;
    let d_e = params.d_e;
    let mut inputs = Array2::zeros((windows.nrows(), params.n * d_e));
    for (row, mut x) in windows.rows().into_iter().zip(inputs.rows_mut()) {
        for (i, &t) in row.iter().enumerate() {
            x.slice_mut(s![i * d_e..(i + 1) * d_e]).assign(&params.e.column(t));
        }
    }
    let mut h = inputs.dot(&params.f);
    h += &params.bias;
    h.mapv_inplace(T::tanh);
    Ok(EncoderCache { inputs, h })
}

/// Gradients of the encoder parameters given `∂L/∂h`.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    windows: ArrayView2<usize>,
    cache: &EncoderCache<T>,
    d_h: ArrayView2<T>,
) -> Result<EncoderParams<T>> {
    check_windows(params, &windows)?;
    if d_h.dim() != cache.h.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} does not match encoder output {:?}",
            d_h.dim(),
            cache.h.dim()
        )));
    }
    let d_pre = &d_h * &cache.h.mapv(|x| T::one() - x * x);
    let mut grads = params.zeros_like();
    grads.f = cache.inputs.t().dot(&d_pre);
    grads.bias = d_pre.sum_axis(ndarray::Axis(0));
    let d_x = d_pre.dot(&params.f.t());
    let d_e = params.d_e;
    for (row, dx) in windows.rows().into_iter().zip(d_x.rows()) {
        for (i, &t) in row.iter().enumerate() {
            let mut col = grads.e.column_mut(t);
            col += &dx.slice(s![i * d_e..(i + 1) * d_e]);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> EncoderParams<f64> {
        EncoderParams::init(2, 3, 4, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn zero_projection_gives_zero_context() {
        let mut p = params();
        p.f.fill(0.0);
        let h = encode(&p, array![[0, 4], [2, 2]].view()).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn outputs_bounded_and_deterministic() {
        let mut p = params();
        p.f.mapv_inplace(|x| x * 1e4);
        let w = array![[0, 1], [3, 4], [0, 1]];
        let h = encode(&p, w.view()).unwrap();
        assert!(h.iter().all(|x| x.abs() <= 1.0 && x.is_finite()));
        assert_eq!(h.row(0), h.row(2));
    }

    #[test]
    fn rejects_unknown_token() {
        let r = encode(&params(), array![[0, 5]].view());
        assert!(matches!(r, Err(Error::TokenOutOfRange { token: 5, vocab: 5 })));
    }

    #[test]
    fn rejects_wrong_window_length() {
        let r = encode(&params(), array![[0, 1, 2]].view());
        assert!(matches!(r, Err(Error::DimensionMismatch { expected: 2, found: 3 })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = params();
        let windows = array![[0, 3], [3, 3]];
        let upstream = array![[0.3, -1.0, 0.5, 2.0], [1.0, 0.1, -0.4, 0.0]];
        let objective = |q: &EncoderParams<f64>| -> f64 { (&encode(q, windows.view()).unwrap() * &upstream).sum() };
        let cache = forward(&p, windows.view()).unwrap();
        let g = backward(&p, windows.view(), &cache, upstream.view()).unwrap();
        let eps = 1e-6;
        let mut probe = p.clone();
        let analytic = g.tensors();
        for (ti, tensor) in analytic.iter().enumerate() {
            for (i, &a) in tensor.data.iter().enumerate() {
                let orig = probe.tensors()[ti].data[i];
                probe.tensors_mut()[ti].data[i] = orig + eps;
                let up = objective(&probe);
                probe.tensors_mut()[ti].data[i] = orig - eps;
                let down = objective(&probe);
                probe.tensors_mut()[ti].data[i] = orig;
                let n = (up - down) / (2.0 * eps);
                assert!((a - n).abs() < 1e-7, "{} [{i}]: {a} vs {n}", tensor.name);
            }
        }
    }
}
