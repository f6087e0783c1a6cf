//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// Moment buffers for a fixed list of variables.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, vars: &[Tensor<T>]) -> Self {
        AdamState {
            config,
            m: vars.iter().map(|x| Tensor::zeros(x.shape())).collect(),
            v: vars.iter().map(|x| Tensor::zeros(x.shape())).collect(),
            t: 0,
        }
    }

    /// One in-place update `x -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, vars: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if vars.len() != self.m.len() || grads.len() != vars.len() {
            return Err(Error::Invalid(format!(
                "adam: {} vars, {} grads, state for {}",
                vars.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (x, g)) in vars.iter().zip(grads).enumerate() {
            if x.shape() != g.shape() || x.shape() != self.m[i].shape() {
                return Err(Error::Invalid(format!(
                    "adam: variable {i} shape {:?}, grad {:?}, state {:?}",
                    x.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    node: format!("adam gradient {i}"),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.t as f64));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let one = T::one();
        for ((x, g), (m, v)) in vars
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((xi, &gi), mi), vi) in x
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *xi = *xi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_var(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_grad_leaves_vars_and_counts_step() {
        let mut x = vec![Tensor::<f32>::full(&[3], 1.5)];
        let mut st = AdamState::new(AdamConfig::default(), &x);
        st.step(&mut x, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(x[0].data(), &[1.5, 1.5, 1.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        for &g in &[0.5, -3.0, 0.02] {
            let cfg = AdamConfig::default();
            let mut x = scalar_var(0.0);
            let mut st = AdamState::new(cfg, &x);
            st.step(&mut x, &scalar_var(g)).unwrap();
            let update = x[0].item();
            assert!((update + cfg.lr * g.signum()).abs() <= 1e-6 * cfg.lr, "g={g}: {update}");
        }
    }

    #[test]
    fn two_step_trace_matches_hand_computation() {
        let cfg = AdamConfig::default();
        let g = 0.3f64;
        let mut x = scalar_var(1.0);
        let mut st = AdamState::new(cfg, &x);
        st.step(&mut x, &scalar_var(g)).unwrap();
        st.step(&mut x, &scalar_var(g)).unwrap();
        // step 1: m=0.03, v=0.00009, m_hat=0.3, v_hat=0.09 -> dx = 0.01*0.3/(0.3+1e-8)
        // step 2: m=0.057, v=0.00017991, m_hat=0.057/0.19=0.3, v_hat=0.00017991/0.001999=0.09
        let s1 = 0.01 * 0.3 / (0.3 + 1e-8);
        let m2: f64 = 0.9 * 0.03 + 0.1 * 0.3;
        let v2: f64 = 0.999 * 0.00009 + 0.001 * 0.09;
        let s2 = 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expected = 1.0 - s1 - s2;
        assert!((x[0].item() - expected).abs() < 1e-12, "{} vs {expected}", x[0].item());
        assert!((s2 - 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_grad_rejected() {
        let mut x = scalar_var(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &x);
        assert!(st.step(&mut x, &scalar_var(f64::NAN)).is_err());
        assert_eq!(st.t, 0);
    }

    #[test]
    fn permutation_invariant() {
        let a = Tensor::<f32>::from_fn(&[4], |i| i as f32 * 0.1);
        let b = Tensor::<f32>::from_fn(&[2, 2], |i| 1.0 - i as f32 * 0.3);
        let ga = Tensor::<f32>::from_fn(&[4], |i| (i as f32 - 1.5) * 0.7);
        let gb = Tensor::<f32>::from_fn(&[2, 2], |i| (i as f32).sin());
        let mut fwd = vec![a.clone(), b.clone()];
        let mut rev = vec![b, a];
        let mut s1 = AdamState::new(AdamConfig::default(), &fwd);
        let mut s2 = AdamState::new(AdamConfig::default(), &rev);
        for _ in 0..5 {
            s1.step(&mut fwd, &[ga.clone(), gb.clone()]).unwrap();
            s2.step(&mut rev, &[gb.clone(), ga.clone()]).unwrap();
        }
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
        assert!(s1.v.iter().all(|v| v.data().iter().all(|&x| x >= 0.0)));
    }
}
