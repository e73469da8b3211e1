//! AdamW with linear warmup.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore};
use crate::tensor::{Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear warmup from 0 to `lr`.
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup_steps: 0 }
    }
}

/// Decoupled-weight-decay Adam. Frozen parameters are skipped entirely,
/// weight decay included. Single-row parameters (biases, norm gains) are
/// not decayed.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: usize,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.ids().map(|id| Mat::zeros(params.get(id).rows(), params.get(id).cols())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.lr
        } else {
            self.config.lr * ((self.step + 1) as f64 / w as f64).min(1.0)
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - lr * c.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if params.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id);
            let decays = p.rows() > 1 && c.weight_decay > 0.0;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                if decays {
                    *pv = *pv * decay;
                }
                *pv = *pv - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic_and_skips_frozen() {
        let mut store = ParamStore::<f64>::default();
        let x = store.add("x", Mat::from_f64(2, 1, &[3.0, -2.0]));
        let y = store.add("y", Mat::from_f64(1, 1, &[5.0]));
        store.set_frozen(y, true);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..500 {
            let mut grads = Gradients::empty(2);
            // Gradient of ½‖x‖² is x.
            grads.set(x, store.get(x).clone());
            grads.set(y, Mat::from_f64(1, 1, &[1.0]));
            opt.step(&mut store, &grads);
        }
        assert!(store.get(x).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.get(y).data(), &[5.0]);
    }

    #[test]
    fn warmup_is_linear() {
        let store = ParamStore::<f64>::default();
        let mut opt = AdamW::new(AdamWConfig { lr: 1.0, warmup_steps: 4, ..AdamWConfig::default() }, &store);
        let mut seen = vec![];
        let mut s = store.clone();
        for _ in 0..6 {
            seen.push(opt.current_lr());
            opt.step(&mut s, &Gradients::empty(0));
        }
        assert_eq!(seen, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

}
