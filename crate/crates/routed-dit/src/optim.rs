//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 3e-2 }
    }
}

/// First and second moment buffers for one parameter array.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

impl AdamW {
    /// One update of `params` in place. `step` is 1-based. `decay` toggles the
    /// decoupled weight-decay term (off for biases, gains, and ratio tables).
    pub fn step(
        &self,
        params: &mut [f64],
        grads: &[f64],
        state: &mut AdamState,
        step: u64,
        decay: bool,
    ) -> Result<()> {
        if params.len() != grads.len()
            || state.m.len() != params.len()
            || state.v.len() != params.len()
        {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let wd = if decay { self.weight_decay } else { 0.0 };
        for i in 0..params.len() {
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * grads[i];
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * params[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut p = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::zeros(3);
        opt.step(&mut p, &[0.0; 3], &mut s, 1, false).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn one_step_on_quadratic_descends() {
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut p = vec![1.0];
        let mut s = AdamState::zeros(1);
        // f(w) = w^2, grad = 2w
        let g = vec![2.0 * p[0]];
        opt.step(&mut p, &g, &mut s, 1, false).unwrap();
        assert!(p[0].abs() < 1.0);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let opt = AdamW::default();
        let mut p = vec![0.0; 2];
        let mut s = AdamState::zeros(2);
        assert!(opt.step(&mut p, &[0.0; 3], &mut s, 1, true).is_err());
    }

    /// Independent scalar AdamW trace, written directly from the update rule,
    /// used as the oracle for ten optimizer steps on f(w) = (w - 3)^2 / 2.
    #[test]
    fn ten_steps_match_scalar_reference_trace() {
        let (lr, b1, b2, eps, wd) = (1e-3, 0.9, 0.999, 1e-8, 3e-2);

        // Reference: plain scalar arithmetic, no shared code with AdamW::step.
        let mut w_ref = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut trace = Vec::new();
        for t in 1..=10 {
            let g = w_ref - 3.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w_ref -= lr * (mh / (vh.sqrt() + eps) + wd * w_ref);
            trace.push(w_ref);
        }

        let opt = AdamW { lr, beta1: b1, beta2: b2, eps, weight_decay: wd };
        let mut p = vec![1.0];
        let mut s = AdamState::zeros(1);
        for t in 1..=10u64 {
            let g = vec![p[0] - 3.0];
            opt.step(&mut p, &g, &mut s, t, true).unwrap();
            assert!(
                (p[0] - trace[(t - 1) as usize]).abs() < 1e-15,
                "step {t}: {} vs {}",
                p[0],
                trace[(t - 1) as usize]
            );
        }
    }
}
