use crate::error::{Error, Result};

/// Adam moment accumulators for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: usize) -> Self {
        Self::with_lr(params, 0.001)
    }

    pub fn with_lr(params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], state: &mut OptimizerState, grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = OptimizerState::new(3);
        adam_step(&mut p, &mut s, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut s = OptimizerState::new(3);
        adam_step(&mut p, &mut s, &[0.5, -3.0, 1e3]).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε).
        for (x, g) in p.iter().zip([0.5f64, -3.0, 1e3]) {
            let expected = -0.001 * g / (g.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
        }
    }

    #[test]
    fn scalar_recurrence() {
        let mut p = vec![0.0];
        let mut s = OptimizerState::new(1);
        let g = 0.2;
        adam_step(&mut p, &mut s, &[g]).unwrap();
        adam_step(&mut p, &mut s, &[g]).unwrap();
        let m = 0.9 * 0.1 * g + 0.1 * g;
        let v = 0.999 * 0.001 * g * g + 0.001 * g * g;
        assert!((s.m[0] - m).abs() < 1e-15);
        assert!((s.v[0] - v).abs() < 1e-18);
        // Constant gradient: both bias-corrected moments equal g and g², so each step is the same.
        let step = 0.001 * g / (g + 1e-8);
        assert!((p[0] + 2.0 * step).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = OptimizerState::new(2);
        assert!(adam_step(&mut [0.0; 2], &mut s, &[0.0; 3]).is_err());
    }
}
