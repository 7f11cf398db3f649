use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T: Element = f32> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> NormParams<T> {
    /// Unit gain, zero bias.
    pub fn identity(dim: usize) -> Result<Self> {
        Ok(NormParams {
            gain: Tensor::ones(&[dim])?.with_grad(),
            bias: Tensor::zeros(&[dim])?.with_grad(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.gain.numel() + self.bias.numel()
    }

    pub fn cast<U: Element>(&self) -> NormParams<U> {
        NormParams {
            gain: self.gain.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, prefix: &str) -> NormVars<'t, T> {
        NormVars {
            gain: tape.param(format!("{prefix}.gain"), &self.gain),
            bias: tape.param(format!("{prefix}.bias"), &self.bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormVars<'t, T: Element = f32> {
    pub gain: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Element> NormVars<'t, T> {
    pub fn apply(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&self.gain, &self.bias, LAYER_NORM_EPS)
    }
}
