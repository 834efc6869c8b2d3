use pirt_tensor::{cst, Real, Tensor};

use super::config::OptimConfig;
use crate::error::{PirtError, Result};
use crate::nn::{Gradients, ParamStore};

/// Adam with decoupled weight decay. Moment buffers are kept per store entry;
/// non-trainable entries have none.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: OptimConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| e.trainable.then(|| Tensor::zeros(e.value.shape())))
                .collect::<Vec<_>>()
        };
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update at rate `lr`. A missing gradient counts as zero.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(PirtError::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let shrink = cst::<T>(1.0 - lr * c.weight_decay);
        let (b1t, b2t) = (cst::<T>(b1), cst::<T>(b2));
        let (g1, g2) = (cst::<T>(1.0 - b1), cst::<T>(1.0 - b2));
        let step = cst::<T>(lr / bc1);
        let inv_bc2 = cst::<T>(1.0 / bc2);
        let eps = cst::<T>(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let p = store.get_mut(id);
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(PirtError::Contract(format!(
                        "gradient shape {:?} for parameter of shape {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                md[j] = b1t * md[j] + g1 * gj;
                vd[j] = b2t * vd[j] + g2 * gj * gj;
                pd[j] = pd[j] * shrink - step * md[j] / ((vd[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
