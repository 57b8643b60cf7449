//! Numerical substrate: tensors, reverse-mode differentiation, Gumbel-Softmax
//! sampling, the Adam optimiser and the `NDT1` file format.

mod gumbel;
pub mod io;
mod optim;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gumbel::{binary_gumbel_softmax, gumbel_softmax, GumbelOptions};
pub use optim::{adam_step, OptimState};
pub use params::{Bindings, Param, ParamId, ParamSet};
pub use rng::{mix_seed, Rng};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, softplus};

use crate::error::Result;

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb)?;
    Ok(tape.tensor(c))
}

/// Softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = tape.softmax(v, axis)?;
    Ok(tape.tensor(y))
}
