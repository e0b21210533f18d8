//! Adam optimizer over a [`ParamStore`].

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Step counter plus hyperparameters; the per-parameter moments live with
/// their parameters in the store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

/// One Adam update with bias correction, consuming the accumulated grads.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for p in store.iter() {
        if p.grad().iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: state.step,
                msg: format!("non-finite gradient in parameter {}", p.name()),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for p in store.iter_mut() {
        let n = p.numel();
        for i in 0..n {
            let g = p.grad()[i];
            p.m[i] = state.beta1 * p.m[i] + (1.0 - state.beta1) * g;
            p.v[i] = state.beta2 * p.v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            p.values_mut()[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>, grads: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let idx = s.add("p", &[values.len()], values);
        s.entry_mut(idx).accumulate_grad(&grads);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store_with(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut st = AdamState::new(1e-3);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.entry(0).values(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with(vec![0.0, 0.0], vec![3.0, -0.5]);
        let mut st = AdamState::new(1e-2);
        adam_step(&mut s, &mut st).unwrap();
        let v = s.entry(0).values();
        assert!((v[0] + 1e-2).abs() < 1e-6, "{}", v[0]);
        assert!((v[1] - 1e-2).abs() < 1e-6, "{}", v[1]);
    }

    #[test]
    fn nan_gradient_is_a_training_error_naming_the_param() {
        let mut s = ParamStore::new();
        let idx = s.add("w.conv", &[1], vec![0.0]);
        s.entry_mut(idx).accumulate_grad(&[f64::NAN]);
        let mut st = AdamState::new(1e-3);
        let err = adam_step(&mut s, &mut st).unwrap_err();
        assert!(err.to_string().contains("w.conv"), "{err}");
    }

    /// Independent scalar Adam used as an oracle.
    fn scalar_adam_trajectory(mut x: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * x; // d/dx x^2
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn three_steps_on_quadratic_match_scalar_oracle() {
        let lr = 0.05;
        let mut s = ParamStore::new();
        s.add("x", &[1], vec![1.0]);
        let mut st = AdamState::new(lr);
        for _ in 0..3 {
            let x = s.entry(0).values()[0];
            s.zero_grads();
            s.entry_mut(0).accumulate_grad(&[2.0 * x]);
            adam_step(&mut s, &mut st).unwrap();
        }
        let want = scalar_adam_trajectory(1.0, lr, 3);
        let got = s.entry(0).values()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
