use super::{ParamSet, Tensor};
use crate::{Error, Result};

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>(),
    );
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Adaptive-moment optimizer with optional global-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl Adam {
    pub fn with_clip(clip_norm: f64) -> Self {
        Self {
            clip_norm: Some(clip_norm),
            ..Self::default()
        }
    }

    /// Applies the accumulated gradients of `params` with learning rate `lr`,
    /// then clears them. Returns the gradient norm measured before clipping.
    pub fn step(&self, params: &mut ParamSet, lr: f64) -> Result<f64> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!("learning rate must be positive, got {lr}")));
        }
        if params.grads_mut().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("optimizer gradient"));
        }
        let norm = match self.clip_norm {
            Some(max) => clip_global_norm(params.grads_mut(), max),
            None => libm::sqrt(params.grads_mut().iter().flat_map(|g| g.data()).map(|x| x * x).sum()),
        };
        params.step += 1;
        let t = params.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (values, grads, m1, m2) = params.split_for_update();
        for (((value, grad), m), v) in values.iter_mut().zip(grads).zip(m1.iter_mut()).zip(m2.iter_mut()) {
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        params.zero_grad();
        Ok(norm)
    }
}
