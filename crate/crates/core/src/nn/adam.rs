use serde::{Deserialize, Serialize};

use super::{Gradient, MlpModel};
use crate::error::{Error, Result};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Zeroed moments with the usual defaults β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self::with_hyper(n_params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn for_model(model: &MlpModel, lr: f64) -> Self {
        Self::new(model.n_params(), lr)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "Adam hyperparameters out of range: lr={} beta1={} beta2={} eps={}",
                self.lr, self.beta1, self.beta2, self.eps
            )))
        }
    }

    /// In-place update of `params`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        if grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form: returns the updated model and optimizer state.
pub fn adam_step(state: &AdamState, model: &MlpModel, grad: &Gradient) -> Result<(MlpModel, AdamState)> {
    let mut s = state.clone();
    let mut m = model.clone();
    s.update(m.params_mut(), grad.as_slice())?;
    Ok((m, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpArch;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let m = MlpModel::init(MlpArch::new(2, 5), 1).unwrap();
        let s = AdamState::for_model(&m, 1e-3);
        let (m2, s2) = adam_step(&s, &m, &m.zero_grad()).unwrap();
        assert_eq!(m2, m);
        assert_eq!(s2.step, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        for g in [3.7, -0.002, 1e4] {
            let mut p = [1.0];
            let mut s = AdamState::new(1, 1e-3);
            s.update(&mut p, &[g]).unwrap();
            let step = 1.0 - p[0];
            assert!((step.abs() - 1e-3).abs() < 1e-6, "{step}");
            assert_eq!(step.signum(), g.signum());
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = [1.0];
        let mut s = AdamState::new(1, 0.1);
        for _ in 0..100 {
            let g = 2.0 * p[0];
            s.update(&mut p, &[g]).unwrap();
        }
        // scripted reference run: 0.002936675681102549
        assert!((p[0] - 0.002_936_675_681_102_549).abs() < 1e-12);
        assert!(p[0].abs() < 0.05);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = AdamState::new(2, 0.1);
        let mut p = [0.0, 0.0];
        assert!(matches!(s.update(&mut p, &[1.0]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(s.update(&mut p, &[1.0, f64::NAN]), Err(Error::NonFiniteGradient)));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let m = MlpModel::init(MlpArch::new(1, 3), 2).unwrap();
        let g = Gradient::from_vec((0..m.n_params()).map(|i| (i as f64).sin()).collect());
        let s = AdamState::for_model(&m, 0.01);
        let a = adam_step(&s, &m, &g).unwrap();
        let b = adam_step(&s, &m, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.n_params(), m.n_params());
    }
}
