use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Plain SGD or Adam with bias correction. Adam keeps one first- and one
/// second-moment slot per parameter tensor, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    /// Number of updates applied so far.
    pub steps: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(
        kind: OptimizerKind,
        learning_rate: T,
        beta1: T,
        beta2: T,
        epsilon: T,
        params: &impl Parameters<T>,
    ) -> Self {
        let slots = || -> Vec<Vec<T>> {
            match kind {
                OptimizerKind::Sgd => Vec::new(),
                OptimizerKind::Adam => params.tensors().iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
            }
        };
        Self {
            kind,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            steps: 0,
            first_moment: slots(),
            second_moment: slots(),
        }
    }

    /// Applies one update of `params` along `grads`.
    pub fn step(&mut self, params: &mut impl Parameters<T>, grads: &impl Parameters<T>) -> Result<()> {
        let g = grads.tensors();
        let mut p = params.tensors_mut();
        if g.len() != p.len() || g.iter().zip(&p).any(|(a, b)| a.data.len() != b.data.len()) {
            return Err(Error::ShapeMismatch("gradients do not match parameters".into()));
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (pt, gt) in p.iter_mut().zip(&g) {
                    for (x, &d) in pt.data.iter_mut().zip(gt.data) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != p.len() {
                    return Err(Error::ShapeMismatch("optimizer slots do not match parameters".into()));
                }
                let one = T::one();
                let t = self.steps as i32;
                let c1 = one - self.beta1.powi(t);
                let c2 = one - self.beta2.powi(t);
                for (i, (pt, gt)) in p.iter_mut().zip(&g).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for (j, (x, &d)) in pt.data.iter_mut().zip(gt.data).enumerate() {
                        m[j] = self.beta1 * m[j] + (one - self.beta1) * d;
                        v[j] = self.beta2 * v[j] + (one - self.beta2) * d * d;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut impl Parameters<T>, max_norm: T) -> T {
    let norm = grads.sq_norm().sqrt();
    if max_norm > T::zero() && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TensorMut, TensorRef};
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    #[derive(Clone)]
    struct Vec1(Array1<f64>);

    impl Parameters<f64> for Vec1 {
        fn tensors(&self) -> Vec<TensorRef<'_, f64>> {
            vec![TensorRef::vector("x", &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<TensorMut<'_, f64>> {
            vec![TensorMut::vector("x", &mut self.0)]
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = Vec1(array![1.0, 2.0]);
        let mut o = Optimizer::new(OptimizerKind::Sgd, 0.5, 0.9, 0.999, 1e-8, &p);
        o.step(&mut p, &Vec1(array![2.0, -2.0])).unwrap();
        assert_eq!(p.0, array![0.0, 3.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Vec1(array![1.0, 2.0]);
        let mut o = Optimizer::new(OptimizerKind::Adam, 0.1, 0.9, 0.999, 0.0, &p);
        o.step(&mut p, &Vec1(array![3.0, -0.5])).unwrap();
        assert!((p.0[0] - 0.9).abs() < 1e-12 && (p.0[1] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Vec1(array![1.0, 2.0]);
        let mut o = Optimizer::new(OptimizerKind::Adam, 0.0, 0.9, 0.999, 1e-8, &p);
        o.step(&mut p, &Vec1(array![3.0, -0.5])).unwrap();
        assert_eq!(p.0, array![1.0, 2.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Vec1(array![3.0, -4.0]);
        let mut o = Optimizer::new(OptimizerKind::Adam, 0.05, 0.9, 0.999, 1e-8, &p);
        for _ in 0..2000 {
            let g = Vec1(p.0.clone() * 2.0);
            o.step(&mut p, &g).unwrap();
        }
        assert!(p.0.iter().all(|x| x.abs() < 1e-2), "{:?}", p.0);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(xs in prop::collection::vec(-1e6f64..1e6, 1..50), clip in 1e-3f64..100.0) {
            let mut g = Vec1(Array1::from(xs));
            let before = clip_global_norm(&mut g, clip);
            let after = g.sq_norm().sqrt();
            prop_assert!(after <= clip + 1e-12 || (before <= clip && after == before));
        }
    }
}
