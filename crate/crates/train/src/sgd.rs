//! Plain SGD with momentum.

/// Optimizer settings. Learning rate, momentum, and batch size are
/// artifact defaults, not tuned constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.01, momentum: 0.9, batch_size: 64 }
    }
}

/// One momentum step over a flat parameter slice:
/// `v = momentum * v + g; p -= lr * v`.
pub fn sgd_step(params: &mut [f64], velocity: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
    debug_assert_eq!(params.len(), velocity.len());
    debug_assert_eq!(params.len(), grads.len());
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Scalar form of [`sgd_step`], for parameters that live in structs.
#[inline]
pub fn sgd_step_scalar(param: &mut f64, velocity: &mut f64, grad: f64, lr: f64, momentum: f64) {
    *velocity = momentum * *velocity + grad;
    *param -= lr * *velocity;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_velocity_is_a_fixed_point() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut v = vec![0.0; 3];
        sgd_step(&mut p, &mut v, &[0.0; 3], 0.1, 0.9);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(v, vec![0.0; 3]);
    }

    #[test]
    fn zero_momentum_is_plain_gradient_descent() {
        let mut p = vec![1.0];
        let mut v = vec![0.5]; // stale velocity must be wiped by momentum 0
        sgd_step(&mut p, &mut v, &[2.0], 0.1, 0.0);
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let (lr, mu) = (0.05, 0.9);
        let (g1, g2) = (1.5, -0.75);
        let mut p = vec![2.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &mut v, &[g1], lr, mu);
        sgd_step(&mut p, &mut v, &[g2], lr, mu);
        // v1 = g1; p1 = p0 - lr*v1; v2 = mu*g1 + g2; p2 = p1 - lr*v2
        let expect = 2.0 - lr * g1 - lr * (mu * g1 + g2);
        assert!((p[0] - expect).abs() < 1e-12);
    }
}
