//! AdamW with decoupled weight decay and global-norm clipping.

use crate::config::TrainConfig;
use crate::tensor::{ParamStore, Scalar, Tensor};

/// First and second moments per parameter, in store order. `None` until a
/// parameter first receives a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }
}

/// L2 norm over every stored gradient of a trainable parameter, summed in
/// store order.
pub fn global_grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    let mut ss = 0.0f64;
    for (_, p) in store.iter() {
        if let (true, Some(g)) = (p.requires_grad, &p.grad) {
            for &x in g.data() {
                let x = x.to_f64();
                ss += x * x;
            }
        }
    }
    ss.sqrt()
}

/// One AdamW step over every trainable parameter holding a gradient.
/// Returns the gradient norm before clipping.
pub fn adamw_update<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &TrainConfig) -> f64 {
    let norm = global_grad_norm(store);
    let clip = if norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (id, p) in store.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let Some(g) = &p.grad else { continue };
        let i = id.index();
        let shape = p.value.shape().to_vec();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
        for (((w, &gr), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = gr.to_f64() * clip;
            let mn = b1 * mi.to_f64() + (1.0 - b1) * g;
            let vn = b2 * vi.to_f64() + (1.0 - b2) * g * g;
            *mi = T::from_f64(mn);
            *vi = T::from_f64(vn);
            let (mh, vh) = (mi.to_f64() / bc1, vi.to_f64() / bc2);
            let w64 = w.to_f64() * decay - cfg.lr * mh / (vh.sqrt() + cfg.eps);
            *w = T::from_f64(w64);
        }
    }
    norm
}
