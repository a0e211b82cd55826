//! SGD with momentum, operating on flat parameter/gradient/velocity slices.

use crate::error::{Error, Result};

/// One momentum step: v ← momentum·v + grad; θ ← θ − lr·v.
///
/// Velocities must be zero-initialized at the start of training. Gradients
/// are consumed (zeroed) by the step.
pub fn sgd_momentum_step(
    params: &mut [f32],
    grads: &mut [f32],
    velocities: &mut [f32],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocities.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_momentum_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len().min(velocities.len()), grads.len().max(velocities.len())],
        });
    }
    if !(lr > 0.0) && lr != 0.0 {
        return Err(Error::invalid(format!("sgd_momentum_step: lr must be >= 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!("sgd_momentum_step: momentum must be in [0,1), got {momentum}")));
    }
    for i in 0..params.len() {
        velocities[i] = momentum * velocities[i] + grads[i];
        params[i] -= lr * velocities[i];
        grads[i] = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_plain_sgd() {
        let mut p = [1.0f32];
        let mut g = [2.0f32];
        let mut v = [0.0f32];
        sgd_momentum_step(&mut p, &mut g, &mut v, 0.1, 0.9).unwrap();
        assert_eq!(v[0], 2.0);
        assert!((p[0] - 0.8).abs() < 1e-7);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = [1.5f32];
        let mut g = [3.0f32];
        let mut v = [0.0f32];
        sgd_momentum_step(&mut p, &mut g, &mut v, 0.0, 0.9).unwrap();
        assert_eq!(p[0], 1.5);
    }

    #[test]
    fn momentum_accumulates_over_steps() {
        let mut p = [1.0f32];
        let mut v = [0.0f32];
        let mut g = [1.0f32];
        sgd_momentum_step(&mut p, &mut g, &mut v, 0.1, 0.9).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        g = [1.0];
        sgd_momentum_step(&mut p, &mut g, &mut v, 0.1, 0.9).unwrap();
        // v = 0.9*1 + 1 = 1.9, step 0.19
        assert!((p[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_is_error() {
        let mut p = [1.0f32, 2.0];
        let mut g = [1.0f32];
        let mut v = [0.0f32, 0.0];
        assert!(sgd_momentum_step(&mut p, &mut g, &mut v, 0.1, 0.9).is_err());
    }
}
