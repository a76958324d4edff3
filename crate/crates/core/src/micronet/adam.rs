use crate::error::{Error, Result};
use crate::micronet::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Vec<T>], config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update. Nothing is modified when the gradients are invalid.
    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("parameter, gradient and state counts differ".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::Shape(format!("tensor {i}: parameter and gradient sizes differ")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in tensor {i}")));
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / corr1;
                let v_hat = v[k] / corr2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = vec![vec![0.5f64, -1.0]];
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![vec![0.5, -1.0]]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_unit_step_moves_by_learning_rate() {
        let mut p = vec![vec![0.0f64; 4]];
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &[vec![1.0; 4]]).unwrap();
        for v in &p[0] {
            assert!((v + 0.001).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = vec![vec![1.0f64, 1.0]];
        let mut s = AdamState::new(&p, AdamConfig::default());
        let g = vec![vec![2.0, -3.0]];
        s.step(&mut p, &g).unwrap();
        let after1 = p[0].clone();
        s.step(&mut p, &g).unwrap();
        assert!(after1[0] < 1.0 && p[0][0] < after1[0]);
        assert!(after1[1] > 1.0 && p[0][1] > after1[1]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![vec![1.0f32]];
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(s.step(&mut p, &[vec![f32::NAN]]), Err(Error::Numerical(_))));
        assert_eq!(s.t, 0);
        assert_eq!(p[0][0], 1.0);
        assert!(s.step(&mut p, &[vec![1.0, 2.0]]).is_err());
    }
}
