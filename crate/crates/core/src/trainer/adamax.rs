//! AdaMax: Adam with the second moment replaced by an exponentially weighted
//! infinity norm.
//!
//! ```text
//! m ← β1 m + (1 - β1) g
//! u ← max(β2 u, |g|)
//! θ ← θ - (lr / (1 - β1^t)) · m / (u + ε)
//! ```

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            u: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One update of every parameter in store order.
pub fn adamax_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(
            "adamax_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for ((_, p), g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::dim(
                "adamax_step",
                "gradient length differs from its parameter",
            ));
        }
    }
    state.t += 1;
    let step = lr / (1.0 - state.beta1.powi(state.t as i32));
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let (m, u, g) = (&mut state.m[i], &mut state.u[i], &grads[i]);
        if g.iter().all(|&x| x == 0.0) && m.iter().all(|&x| x == 0.0) {
            // Nothing would move; avoid a copy-on-write of shared values.
            for u in u.iter_mut() {
                *u *= b2;
            }
            continue;
        }
        let theta = p.values_mut();
        for c in 0..theta.len() {
            m[c] = b1 * m[c] + (1.0 - b1) * g[c];
            u[c] = (b2 * u[c]).max(g[c].abs());
            theta[c] -= step * m[c] / (u[c] + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::DenseTensor;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", DenseTensor::vector(&[v]));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut st = OptimizerState::new(&p);
        adamax_step(&mut p, &[vec![0.0]], &mut st, 0.1).unwrap();
        assert_eq!(p.get("x").unwrap().values(), &[0.7]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = single(0.0);
        let mut st = OptimizerState::new(&p);
        adamax_step(&mut p, &[vec![1.0]], &mut st, 0.1).unwrap();
        assert!((st.m[0][0] - 0.1).abs() < 1e-15);
        assert_eq!(st.u[0][0], 1.0);
        let expected = -(0.1 / 0.1) * 0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_descend_a_quadratic() {
        // f(x) = (x - 3)^2, f'(x) = 2(x - 3)
        let f = |x: f64| (x - 3.0).powi(2);
        let mut p = single(0.0);
        let mut st = OptimizerState::new(&p);
        let mut last = f(0.0);
        for _ in 0..2 {
            let x = p.get("x").unwrap().values()[0];
            adamax_step(&mut p, &[vec![2.0 * (x - 3.0)]], &mut st, 0.5).unwrap();
            let now = f(p.get("x").unwrap().values()[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn infinity_norm_never_shrinks_below_gradient() {
        let mut p = single(0.0);
        let mut st = OptimizerState::new(&p);
        for g in [3.0, -1.0, 0.5, -4.0] {
            adamax_step(&mut p, &[vec![g]], &mut st, 0.01).unwrap();
            assert!(st.u[0][0] >= f64::abs(g));
        }
    }

    #[test]
    fn clip_scales_to_bound() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = single(0.0);
        let mut st = OptimizerState::new(&p);
        assert!(adamax_step(&mut p, &[vec![1.0, 2.0]], &mut st, 0.1).is_err());
    }
}
