//! AdamW with linear warmup and global-norm clipping.

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S], lr: f64) {
        self.t += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let c1 = S::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = S::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr_s, eps, wd) = (S::of(lr), S::of(self.eps), S::of(lr * self.weight_decay));
        let one = S::one();
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= wd * *p + lr_s * mh / (vh.sqrt() + eps);
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before and after.
pub fn clip_global_norm<S: Scalar>(grads: &mut [S], max_norm: f64) -> (f64, f64) {
    let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::of(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
        let after = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
        (norm, after)
    } else {
        (norm, norm)
    }
}

/// Linear warmup from `lr / warmup` to `lr`, then constant.
pub fn warmup_lr(lr: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        lr
    } else {
        lr * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_bound() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0).0, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1f64];
        assert_eq!(clip_global_norm(&mut small, 1.0), (0.1, 0.1));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g)
        let mut p = vec![1.0f64, -1.0];
        let mut opt = AdamW::new(2, 0.9, 0.999, 1e-12, 0.0);
        opt.step(&mut p, &[2.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-9 && (p[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn warmup_shape() {
        assert_eq!(warmup_lr(1.0, 4, 0), 0.25);
        assert_eq!(warmup_lr(1.0, 4, 3), 1.0);
        assert_eq!(warmup_lr(1.0, 4, 100), 1.0);
        assert_eq!(warmup_lr(1.0, 0, 0), 1.0);
    }
}
