use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments share the parameter layout.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<F>) -> Self {
        Adam { cfg, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One update. Rejects a non-finite gradient before touching any state.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &ParamStore<F>) -> Result<()> {
        if !grads.same_layout(params) || !self.m.same_layout(params) {
            return Err(Error::Shape("gradient layout does not match parameters".into()));
        }
        if !grads.all_finite() {
            return Err(Error::NonFiniteGradient { step: self.step as usize });
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let step_size = F::of(lr / c1);
        let c2_sqrt = F::of(c2.sqrt());
        let eps = F::of(eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.data(id);
            let m = self.m.data_mut(id);
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + one_b1 * gi;
            }
            let v = self.v.data_mut(id);
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + one_b2 * gi * gi;
            }
            let (m, v) = (self.m.data(id), self.v.data(id));
            for ((p, &mi), &vi) in params.data_mut(id).iter_mut().zip(m).zip(v) {
                *p -= step_size * mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
