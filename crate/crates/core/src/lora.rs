//! Low-rank adapters for frozen linear weights.
//!
//! Weights are stored `[out, in]`; an adapter adds `scaling · B·A` with
//! `A: [r, in]` and `B: [out, r]`, `scaling = alpha / r`.

use crate::error::{GladError, Result};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LoRAAdapter<T> {
    /// Frozen base weight `[out, in]`.
    pub base: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
}

/// A linear weight, either plain or carrying an adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear<T> {
    Dense(Tensor<T>),
    Adapted(LoRAAdapter<T>),
}

impl<T: Scalar> Linear<T> {
    /// Adapter entries that would be trained.
    pub fn adapter_params(&self) -> usize {
        match self {
            Linear::Dense(_) => 0,
            Linear::Adapted(a) => a.trainable_count(),
        }
    }
}

impl<T: Scalar> LoRAAdapter<T> {
    pub fn d_out(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn scaling(&self) -> T {
        T::from_f64(self.alpha / self.rank as f64)
    }

    pub fn trainable_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }
}

/// Checks `1 <= r <= min(d_in, d_out)`.
pub fn check_rank(r: usize, d_out: usize, d_in: usize) -> Result<()> {
    if r == 0 || r > d_in.min(d_out) {
        return Err(GladError::Config(format!(
            "LoRA rank {r} outside [1, {}] for a {d_out}x{d_in} weight",
            d_in.min(d_out)
        )));
    }
    Ok(())
}

/// `A` drawn from N(0, 1/d_in).
pub fn init_a<T: Scalar>(rng: &mut Rng, r: usize, d_in: usize) -> Tensor<T> {
    let std = 1.0 / (d_in as f64).sqrt();
    let data = (0..r * d_in).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(&[r, d_in], data).expect("shape matches data")
}

/// Attach an adapter to a dense weight. `B` starts at zero so the adapted
/// layer initially computes exactly what the base does.
pub fn wrap_linear<T: Scalar>(layer: &Linear<T>, r: usize, alpha: f64, rng: &mut Rng) -> Result<Linear<T>> {
    let w = match layer {
        Linear::Dense(w) => w,
        Linear::Adapted(_) => return Err(GladError::Contract("layer already carries an adapter".into())),
    };
    if w.shape().len() != 2 {
        return Err(GladError::dim("wrap_linear", w.shape(), &[0, 0]));
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    check_rank(r, d_out, d_in)?;
    if !(alpha > 0.0) {
        return Err(GladError::Config(format!("LoRA alpha {alpha} must be positive")));
    }
    Ok(Linear::Adapted(LoRAAdapter {
        base: w.clone(),
        a: init_a(rng, r, d_in),
        b: Tensor::zeros(&[d_out, r]),
        rank: r,
        alpha,
    }))
}

/// `x·Wᵀ + bias + scaling · (x·Aᵀ)·Bᵀ` on a tape.
pub fn lora_linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
    scaling: T,
) -> Result<Var> {
    let base = tape.linear(x, w, bias)?;
    let down = tape.linear(x, a, None)?;
    let up = tape.linear(down, b, None)?;
    let up = tape.scale(up, scaling);
    tape.add(base, up)
}

/// Adapter output for a batch of rows `x: [n, d_in]`.
pub fn lora_forward<T: Scalar>(adapter: &LoRAAdapter<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = x.dims2();
    if cols != adapter.d_in() {
        return Err(GladError::dim("lora_forward", x.shape(), adapter.base.shape()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(adapter.base.clone());
    let a = tape.constant(adapter.a.clone());
    let b = tape.constant(adapter.b.clone());
    let y = lora_linear(&mut tape, xv, w, None, a, b, adapter.scaling())?;
    Ok(tape.value(y).clone())
}

/// Dense weight `W + scaling · B·A`.
pub fn merge<T: Scalar>(adapter: &LoRAAdapter<T>) -> Tensor<T> {
    let ba = adapter.b.matmul(&adapter.a).expect("adapter shapes agree");
    let s = adapter.scaling();
    let data = adapter
        .base
        .data()
        .iter()
        .zip(ba.data())
        .map(|(&w, &d)| w + s * d)
        .collect();
    Tensor::new(adapter.base.shape(), data).expect("same shape as base")
}
