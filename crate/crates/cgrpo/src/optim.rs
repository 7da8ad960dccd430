//! Adam with bias correction, over flat f64 slices.
//!
//! Both the policy optimizer and the multiplier optimizer use this update;
//! they differ only in learning rate and in how parameters are blocked.

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update on a parameter slice.
///
/// `t_next` is the step count *after* this update (first call passes 1);
/// moments are updated in place.
pub fn adam_step_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t_next: u64,
    h: &AdamHyper,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), m.len());
    debug_assert_eq!(params.len(), v.len());
    let bc1 = 1.0 - h.beta1.powi(t_next as i32);
    let bc2 = 1.0 - h.beta2.powi(t_next as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![0.3, -0.7];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_step_slice(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &AdamHyper::with_lr(1e-3));
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn first_step_from_zero_moments_matches_closed_form() {
        // With zero moments, bias correction gives m_hat = g and v_hat = g^2,
        // so the first step is -lr * g / (|g| + eps).
        let h = AdamHyper::with_lr(5e-4);
        let g = 2.0;
        let mut p = vec![0.5];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_step_slice(&mut p, &[g], &mut m, &mut v, 1, &h);
        let expected = 0.5 - h.lr * g / (g.abs() + h.eps);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        let h = AdamHyper::with_lr(1e-2);
        let g = 3.0;
        let mut p = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let mut last = p[0];
        let mut delta = 0.0;
        for t in 1..=5_000u64 {
            adam_step_slice(&mut p, &[g], &mut m, &mut v, t, &h);
            delta = (p[0] - last).abs();
            last = p[0];
        }
        assert!(delta > 0.99 * h.lr && delta <= h.lr * (1.0 + 1e-9), "delta {delta}");
    }
}
