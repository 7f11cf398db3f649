//! Two-layer perceptron with scored hidden units: `σ(X·W₁·diag(α))·W₂`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T: Element = f32> {
    /// `[d × d_hidden]`
    pub w1: Tensor<T>,
    /// `[d_hidden × d]`
    pub w2: Tensor<T>,
}

impl<T: Element> MlpParams<T> {
    pub fn new(w1: Tensor<T>, w2: Tensor<T>) -> Result<Self> {
        let (d, hidden) = w1.dims2()?;
        if w2.shape() != [hidden, d] {
            return Err(Error::dim("mlp params", w1.shape(), w2.shape()));
        }
        Ok(MlpParams { w1, w2 })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.numel() + self.w2.numel()
    }

    pub fn cast<U: Element>(&self) -> MlpParams<U> {
        MlpParams {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, prefix: &str) -> MlpVars<'t, T> {
        MlpVars {
            w1: tape.param(format!("{prefix}.w1"), &self.w1),
            w2: tape.param(format!("{prefix}.w2"), &self.w2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars<'t, T: Element = f32> {
    pub w1: Var<'t, T>,
    pub w2: Var<'t, T>,
}

/// The activation is applied after scoring.
pub fn mlp_forward<'t, T: Element>(
    x: &Var<'t, T>,
    p: &MlpVars<'t, T>,
    scores: Option<&Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let mut hidden = x.matmul(&p.w1)?;
    if let Some(a) = scores {
        let width = hidden.shape()[1];
        if a.shape() != [width] {
            return Err(Error::Config(format!(
                "mlp score length {:?} does not match hidden dim {width}",
                a.shape()
            )));
        }
        hidden = hidden.mul_row(a)?;
    }
    hidden.gelu().matmul(&p.w2)
}
