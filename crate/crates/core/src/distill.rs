//! Geometry distillation: the alignment MLP, the feature-matching loss, the
//! combined objective and the early weighted-fusion variant.

use std::cell::Cell;

use crate::error::{GladError, Result};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

thread_local! {
    static ALIGN_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of alignment-network evaluations on this thread so far.
pub fn align_evaluations() -> usize {
    ALIGN_CALLS.with(|c| c.get())
}

/// Two linear layers with a GELU between: `d_llm → d_hidden → d_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentNetwork<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> AlignmentNetwork<T> {
    pub fn zeros(d_llm: usize, d_hidden: usize, d_t: usize) -> Self {
        AlignmentNetwork {
            w1: Tensor::zeros(&[d_hidden, d_llm]),
            b1: Tensor::zeros(&[d_hidden]),
            w2: Tensor::zeros(&[d_t, d_hidden]),
            b2: Tensor::zeros(&[d_t]),
        }
    }

    pub fn random(d_llm: usize, d_hidden: usize, d_t: usize, rng: &mut Rng) -> Self {
        let mut n = |shape: &[usize]| {
            let len = shape.iter().product();
            let scale = 1.0 / (*shape.last().unwrap() as f64).sqrt();
            Tensor::new(shape, (0..len).map(|_| T::from_f64(rng.normal() * scale)).collect())
                .expect("shape matches data")
        };
        AlignmentNetwork {
            w1: n(&[d_hidden, d_llm]),
            b1: n(&[1, d_hidden]).reshape(&[d_hidden]).expect("same size"),
            w2: n(&[d_t, d_hidden]),
            b2: n(&[1, d_t]).reshape(&[d_t]).expect("same size"),
        }
    }

    pub fn d_llm(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn d_t(&self) -> usize {
        self.w2.shape()[0]
    }
}

/// Row-wise alignment MLP on a tape; gradients reach both the weights and
/// `h`.
pub fn align_vars<T: Scalar>(tape: &mut Tape<T>, h: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    ALIGN_CALLS.with(|c| c.set(c.get() + 1));
    let z = tape.linear(h, w1, Some(b1))?;
    let z = tape.gelu(z);
    tape.linear(z, w2, Some(b2))
}

/// `H_aligned = MLP(H_img)` for a tensor of image-token states.
pub fn align<T: Scalar>(h_img: &Tensor<T>, net: &AlignmentNetwork<T>) -> Result<Tensor<T>> {
    let (_, cols) = h_img.dims2();
    if cols != net.d_llm() {
        return Err(GladError::dim("align", h_img.shape(), net.w1.shape()));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h_img.clone());
    let w1 = tape.constant(net.w1.clone());
    let b1 = tape.constant(net.b1.clone());
    let w2 = tape.constant(net.w2.clone());
    let b2 = tape.constant(net.b2.clone());
    let out = align_vars(&mut tape, h, w1, b1, w2, b2)?;
    Ok(tape.value(out).clone())
}

/// Mean squared difference between aligned states and teacher features.
pub fn distill_loss<T: Scalar>(tape: &mut Tape<T>, aligned: Var, teacher: Var) -> Result<Var> {
    tape.mse(aligned, teacher)
}

/// The three loss terms of one step and the weight that combined them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_vla: f64,
    pub l_distill: f64,
    pub lambda: f64,
    pub l_total: f64,
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(GladError::Config(format!(
            "lambda {lambda} must be finite and non-negative"
        )));
    }
    Ok(())
}

/// `l_total = l_vla + lambda · l_distill`.
pub fn total_loss(l_vla: f64, l_distill: f64, lambda: f64) -> Result<LossBundle> {
    check_lambda(lambda)?;
    Ok(LossBundle {
        l_vla,
        l_distill,
        lambda,
        l_total: l_vla + lambda * l_distill,
    })
}

/// The combined objective on a tape.
pub fn total_loss_var<T: Scalar>(tape: &mut Tape<T>, l_vla: Var, l_distill: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let weighted = tape.scale(l_distill, T::from_f64(lambda));
    tape.add(l_vla, weighted)
}

/// `σ(w)·teacher_proj + (1 − σ(w))·vision`.
pub fn weighted_fusion<T: Scalar>(tape: &mut Tape<T>, vision: Var, teacher_proj: Var, w: Var) -> Result<Var> {
    let (sv, st) = (
        tape.value(vision).shape().to_vec(),
        tape.value(teacher_proj).shape().to_vec(),
    );
    if sv != st {
        return Err(GladError::dim("weighted_fusion", &sv, &st));
    }
    let gate = tape.sigmoid(w);
    let one = tape.constant(Tensor::scalar(T::ONE));
    let rest = tape.sub(one, gate)?;
    let a = tape.mul_scalar_var(teacher_proj, gate)?;
    let b = tape.mul_scalar_var(vision, rest)?;
    tape.add(a, b)
}
