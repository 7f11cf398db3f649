//! Pre-norm transformer block: `x + WMSA(LN(x))`, then `+ MLP(LN(·))`.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::attention::{wmsa_forward, AttentionParams, AttentionVars};
use crate::nn::mlp::{mlp_forward, MlpParams, MlpVars};
use crate::nn::norm::{NormParams, NormVars};
use crate::nn::window::WindowSpec;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Element = f32> {
    pub norm1: NormParams<T>,
    pub attn: AttentionParams<T>,
    pub norm2: NormParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Element> BlockParams<T> {
    pub fn parameter_count(&self) -> usize {
        self.norm1.parameter_count()
            + self.attn.parameter_count()
            + self.norm2.parameter_count()
            + self.mlp.parameter_count()
    }

    pub fn cast<U: Element>(&self) -> BlockParams<U> {
        BlockParams {
            norm1: self.norm1.cast(),
            attn: self.attn.cast(),
            norm2: self.norm2.cast(),
            mlp: self.mlp.cast(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, prefix: &str) -> BlockVars<'t, T> {
        BlockVars {
            norm1: self.norm1.bind(tape, &format!("{prefix}.norm1")),
            attn: self.attn.bind(tape, &format!("{prefix}.attn")),
            norm2: self.norm2.bind(tape, &format!("{prefix}.norm2")),
            mlp: self.mlp.bind(tape, &format!("{prefix}.mlp")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars<'t, T: Element = f32> {
    pub norm1: NormVars<'t, T>,
    pub attn: AttentionVars<'t, T>,
    pub norm2: NormVars<'t, T>,
    pub mlp: MlpVars<'t, T>,
}

/// Matrix products are attributed to `attn_scope` / `mlp_scope` on the tape.
pub fn block_forward_scoped<'t, T: Element>(
    x: &Var<'t, T>,
    p: &BlockVars<'t, T>,
    scores_attn: Option<&Var<'t, T>>,
    scores_mlp: Option<&Var<'t, T>>,
    w: &WindowSpec,
    attn_scope: &str,
    mlp_scope: &str,
) -> Result<Var<'t, T>> {
    let tape = x.tape();
    let attn = tape.scoped(attn_scope, || wmsa_forward(&p.norm1.apply(x)?, &p.attn, scores_attn, w))?;
    let x = x.add(&attn)?;
    let mlp = tape.scoped(mlp_scope, || mlp_forward(&p.norm2.apply(&x)?, &p.mlp, scores_mlp))?;
    x.add(&mlp)
}

pub fn block_forward<'t, T: Element>(
    x: &Var<'t, T>,
    p: &BlockVars<'t, T>,
    scores_attn: Option<&Var<'t, T>>,
    scores_mlp: Option<&Var<'t, T>>,
    w: &WindowSpec,
) -> Result<Var<'t, T>> {
    block_forward_scoped(x, p, scores_attn, scores_mlp, w, "attn", "mlp")
}
