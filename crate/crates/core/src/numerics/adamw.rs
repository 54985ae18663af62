use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub step_count: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step_count: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One decoupled-weight-decay Adam update over every trainable entry.
///
/// Each trainable parameter must carry an accumulated gradient; frozen
/// entries are skipped entirely. All gradients are cleared afterwards.
pub fn adamw_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamWState<T>) -> Result<()> {
    if let Some(missing) = params
        .iter()
        .find(|(name, t)| !params.is_frozen(name) && t.grad.is_none())
        .map(|(name, _)| name.to_string())
    {
        return Err(Error::State(format!("trainable parameter {missing:?} has no gradient")));
    }
    let c = state.config;
    let t = (state.step_count + 1) as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let lr = T::lit(c.lr);
    let eps = T::lit(c.eps);
    let decay = T::lit(1.0 - c.lr * c.weight_decay);
    let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
    for name in names {
        let p = params.get_mut(&name)?;
        let g = p.grad.take().expect("checked above");
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name).or_insert_with(|| vec![T::zero(); n]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    params.zero_grads();
    state.step_count += 1;
    Ok(())
}
