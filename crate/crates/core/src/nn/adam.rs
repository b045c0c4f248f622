//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One update of every parameter. The whole step is rejected, with
    /// nothing modified, if any gradient is non-finite.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "adam tracks {} tensors, got {} params and {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    detail: "gradient length differs from parameter".into(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (i, p) in params.iter_mut().enumerate() {
            for (((w, g), m), v) in p
                .data
                .iter_mut()
                .zip(&grads[i])
                .zip(self.m[i].iter_mut())
                .zip(self.v[i].iter_mut())
            {
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), [&w]);
        for _ in 0..10 {
            s.update(&mut [&mut w], &[vec![0.0; 3]], &[]).unwrap();
        }
        assert_eq!(w, before);
        assert!(s.m[0].iter().chain(&s.v[0]).all(|v| *v == 0.0));
    }

    #[test]
    fn minimizes_quadratic() {
        let mut w = Tensor::<f64>::scalar(1.0);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), [&w]);
        for _ in 0..200 {
            let g = vec![2.0 * w.data[0]];
            s.update(&mut [&mut w], &[g], &[]).unwrap();
        }
        assert!(w.data[0].abs() < 0.05, "{}", w.data[0]);
    }

    /// Independent scalar simulation of the update rule.
    #[test]
    fn matches_scalar_reference() {
        let mut w = Tensor::<f64>::scalar(0.7);
        let mut s = AdamState::new(AdamConfig::with_lr(0.01), [&w]);
        let (mut rw, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=25 {
            let g = (3.0 * w.data[0]).sin();
            s.update(&mut [&mut w], &[vec![g]], &[]).unwrap();
            let rg = (3.0 * rw).sin();
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            rw -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((w.data[0] - rw).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut w = Tensor::<f32>::zeros(vec![2]);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), [&w]);
        let err = s
            .update(&mut [&mut w], &[vec![0.0, f32::NAN]], &["dec.3.w".into()])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "dec.3.w"));
        assert_eq!(s.step, 0);
    }
}
