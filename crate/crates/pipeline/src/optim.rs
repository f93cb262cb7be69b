//! Adam, global-norm clipping and the plateau learning-rate schedule.

use std::collections::HashMap;

use avsep_core::tensor::{ParamId, ParamStore};
use avsep_core::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, indexed like the parameter store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub step: u64,
    pub m: Vec<Option<ArrayD<T>>>,
    pub v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: usize) -> Self {
        Self {
            step: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &HashMap<ParamId, ArrayD<T>>, lr: f64) {
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort_by_key(|id| id.index());
        for id in ids {
            if store.param(id).frozen {
                continue;
            }
            let g = &grads[&id];
            let k = id.index();
            let m = self.m[k].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[k].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let (tb1, tb2) = (T::lit(b1), T::lit(b2));
            m.zip_mut_with(g, |m, &g| *m = tb1 * *m + (T::one() - tb1) * g);
            v.zip_mut_with(g, |v, &g| *v = tb2 * *v + (T::one() - tb2) * g * g);
            let (lr_t, c1, c2, eps) = (T::lit(lr), T::lit(c1), T::lit(c2), T::lit(ADAM_EPS));
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr_t * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norms before and after clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut HashMap<ParamId, ArrayD<T>>, max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let f = T::lit(max_norm / norm);
        grads.values_mut().for_each(|g| g.mapv_inplace(|v| v * f));
        (norm, global_norm(grads))
    } else {
        (norm, norm)
    }
}

pub fn global_norm<T: Scalar>(grads: &HashMap<ParamId, ArrayD<T>>) -> f64 {
    let mut ids: Vec<&ParamId> = grads.keys().collect();
    ids.sort_by_key(|id| id.index());
    ids.iter()
        .map(|id| grads[id].iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs fail to improve on the best validation loss, then starts counting
/// again from zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub stagnant: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: None,
            stagnant: 0,
        }
    }

    /// Records one validation loss; returns true if it is a new best.
    pub fn observe(&mut self, val: f64) -> bool {
        if self.best.map_or(true, |b| val < b) {
            self.best = Some(val);
            self.stagnant = 0;
            return true;
        }
        self.stagnant += 1;
        if self.stagnant >= self.patience {
            self.lr *= self.factor;
            self.stagnant = 0;
        }
        false
    }
}
