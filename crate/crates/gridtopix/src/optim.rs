//! Adam optimizer.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers parallel the parameter slots.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamSet<S>, config: AdamConfig) -> Self {
        let m = (0..params.len())
            .map(|s| vec![S::zero(); params.get(s).numel()])
            .collect();
        let v = (0..params.len())
            .map(|s| vec![S::zero(); params.get(s).numel()])
            .collect();
        Adam {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients stored in `params`. Halts with a
    /// non-finite error (naming the parameter and element) if any gradient
    /// is NaN/Inf.
    pub fn step(&mut self, params: &mut ParamSet<S>) -> Result<()> {
        for slot in 0..params.len() {
            if let Some(g) = params.get(slot).grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "adam gradient",
                        detail: format!("{}[{}] = {}", params.name(slot), i, g[i]),
                    });
                }
            }
        }
        self.step += 1;
        let b1 = S::from_f64_lossy(self.config.beta1);
        let b2 = S::from_f64_lossy(self.config.beta2);
        let lr = S::from_f64_lossy(self.config.lr);
        let eps = S::from_f64_lossy(self.config.eps);
        let one = S::one();
        let bc1 = one - S::from_f64_lossy(self.config.beta1.powi(self.step as i32));
        let bc2 = one - S::from_f64_lossy(self.config.beta2.powi(self.step as i32));

        for slot in 0..params.len() {
            let t = params.get_mut(slot);
            if t.grad().is_none() {
                continue;
            }
            let n = t.numel();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..n {
                let g = t.grad().unwrap()[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                t.data_mut()[i] = t.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Drop accumulated moments and the step counter (used when the training
    /// objective changes, e.g. at an imitation-to-reward switch).
    pub fn reset(&mut self) {
        self.step = 0;
        for m in &mut self.m {
            m.iter_mut().for_each(|x| *x = S::zero());
        }
        for v in &mut self.v {
            v.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    /// Moments as named tensors, for sidecar persistence next to checkpoints.
    pub fn state_tensors(&self, params: &ParamSet<S>) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for slot in 0..params.len() {
            let shape = params.get(slot).shape();
            out.push((
                format!("adam.m.{}", params.name(slot)),
                Tensor::new(shape, self.m[slot].clone()).unwrap(),
            ));
            out.push((
                format!("adam.v.{}", params.name(slot)),
                Tensor::new(shape, self.v[slot].clone()).unwrap(),
            ));
        }
        out.push((
            "adam.step".to_string(),
            Tensor::scalar(S::from_f64_lossy(self.step as f64)),
        ));
        out
    }

    pub fn load_state_tensors(
        &mut self,
        params: &ParamSet<S>,
        tensors: &[(String, Tensor<S>)],
    ) -> Result<()> {
        let find = |name: &str| -> Result<&Tensor<S>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Usage(format!("optimizer state missing tensor {name}")))
        };
        for slot in 0..params.len() {
            let m = find(&format!("adam.m.{}", params.name(slot)))?;
            let v = find(&format!("adam.v.{}", params.name(slot)))?;
            if m.numel() != self.m[slot].len() || v.numel() != self.v[slot].len() {
                return Err(Error::Usage(format!(
                    "optimizer state shape mismatch for {}",
                    params.name(slot)
                )));
            }
            self.m[slot].copy_from_slice(m.data());
            self.v[slot].copy_from_slice(v.data());
        }
        self.step = find("adam.step")?.item().to_f64_lossy() as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = one_param(1.5);
        params.get_mut(0).grad_mut();
        let mut opt = Adam::new(&params, AdamConfig::default());
        for _ in 0..3 {
            opt.step(&mut params).unwrap();
        }
        assert_eq!(params.get(0).item(), 1.5);
    }

    #[test]
    fn first_step_magnitude_is_lr_times_sign() {
        for &g in &[0.003f32, 4.0, -250.0] {
            let mut params = one_param(1.0);
            params.get_mut(0).grad_mut()[0] = g;
            let cfg = AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            };
            let mut opt = Adam::new(&params, cfg);
            opt.step(&mut params).unwrap();
            let delta = params.get(0).item() - 1.0;
            assert!(
                (delta + 0.1 * g.signum()).abs() < 1e-4,
                "grad {g}: delta {delta}"
            );
        }
    }

    #[test]
    fn quadratic_descent_reaches_near_zero() {
        // 100 steps on f(x) = x^2 from x = 1 with lr 0.05.
        let mut params = one_param(1.0);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(&params, cfg);
        for _ in 0..100 {
            let x = params.get(0).item();
            params.zero_grad();
            params.get_mut(0).grad_mut()[0] = 2.0 * x;
            opt.step(&mut params).unwrap();
        }
        assert!(params.get(0).item().abs() < 0.05);
    }

    #[test]
    fn nan_gradient_halts_with_diagnostics() {
        let mut params = one_param(1.0);
        params.get_mut(0).grad_mut()[0] = f32::NAN;
        let mut opt = Adam::new(&params, AdamConfig::default());
        match opt.step(&mut params) {
            Err(Error::NonFinite { detail, .. }) => assert!(detail.contains('x')),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn state_roundtrip() {
        let mut params = one_param(1.0);
        params.get_mut(0).grad_mut()[0] = 0.5;
        let mut opt = Adam::new(&params, AdamConfig::default());
        opt.step(&mut params).unwrap();
        let state = opt.state_tensors(&params);
        let mut opt2 = Adam::new(&params, AdamConfig::default());
        opt2.load_state_tensors(&params, &state).unwrap();
        assert_eq!(opt2.step_count(), 1);
    }
}
