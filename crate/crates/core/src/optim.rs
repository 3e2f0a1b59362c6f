//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{HvedError, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            weight_decay,
        }
    }
}

/// One Adam update over every parameter in `params`.
///
/// Parameters without an entry in `grads` are treated as having a zero
/// gradient. Decay is applied as `p -= lr·wd·p` before the Adam delta.
pub fn adam_step<T: Real>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(HvedError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    for (name, p) in params.iter() {
        if let Some(g) = grads.get(name) {
            if g.shape() != p.shape() {
                return Err(HvedError::shape(
                    "adam_step",
                    format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape()),
                ));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (tb1, tb2, eps) = (T::lit(b1), T::lit(b2), T::lit(state.eps));
    let (lr_t, decay) = (T::lit(lr), T::lit(lr * state.weight_decay));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));

    for (name, p) in params.iter_mut() {
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(HvedError::shape("adam_step", format!("{name}: moment shape drift")));
        }
        let grad = grads.get(name);
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let g = grad.map_or(T::zero(), |g| g.data()[i]);
            md[i] = tb1 * md[i] + (T::one() - tb1) * g;
            vd[i] = tb2 * vd[i] + (T::one() - tb2) * g * g;
            let m_hat = md[i] * inv_bc1;
            let v_hat = vd[i] * inv_bc2;
            pd[i] -= decay * pd[i];
            pd[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
