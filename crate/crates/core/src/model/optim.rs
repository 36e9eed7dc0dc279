use crate::error::{Error, Result};

use super::graph::{Grads, Params, Scalar};

/// Inverse-square-root schedule with linear warmup:
/// `factor · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, warmup: u64, factor: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("learning-rate step is 1-based".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup must be at least 1".into()));
    }
    let s = step as f64;
    Ok(factor * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Adam with per-parameter learning rates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Scalar>(params: &Params<F>) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-9,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `lr(i)` gives the rate for parameter `i`, `None` freezes it.
    pub fn update<F: Scalar>(&mut self, params: &mut Params<F>, grads: &Grads<F>, lr: impl Fn(usize) -> Option<f64>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(rate) = lr(id.0) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let g = grads.get(id);
            let p = params.get_mut(id);
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let upd = rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p = F::of(p.as_f64() - upd);
            }
        }
    }
}
