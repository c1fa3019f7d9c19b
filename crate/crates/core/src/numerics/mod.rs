//! Dense tensors, a differentiable tape, flat gradient vectors and the
//! finite-difference oracle used to check them.

mod fd;
mod grad_vector;
mod tape;
mod tensor;

pub use fd::{fd_oracle, relative_error};
pub use grad_vector::{GradVector, Layout, Segment};
pub use tape::{Tape, Var, PAD};
pub use tensor::Tensor;

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A recorded forward pass: the tape, the input handles and the scalar loss.
#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    pub inputs: Vec<Var>,
    pub loss: Var,
}

impl Forward {
    pub fn value(&self) -> f64 {
        self.tape
            .value(self.loss)
            .and_then(Tensor::item)
            .expect("forward loss is a scalar")
    }

    /// Gradient of the loss with respect to every input, flattened in order.
    pub fn grad(&mut self) -> Result<GradVector> {
        let inputs = self.inputs.clone();
        let grads = self.tape.grad(self.loss, &inputs)?;
        let mut segments = Vec::with_capacity(inputs.len());
        let mut values = Vec::new();
        for (k, g) in grads.into_iter().enumerate() {
            let t = self.tape.value(g)?;
            segments.push(Segment {
                name: alloc::format!("input{k}"),
                shape: t.shape().to_vec(),
            });
            values.extend_from_slice(t.data());
        }
        GradVector::new(Layout::new(segments), values)
    }
}

/// Records `build` on a fresh tape with `inputs` as differentiable leaves.
pub fn forward(
    inputs: &[Tensor],
    build: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Forward> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let v = tape.value(loss)?;
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(Forward {
        tape,
        inputs: vars,
        loss,
    })
}
