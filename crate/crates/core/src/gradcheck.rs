//! Central finite-difference checks of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per input.
    pub points: usize,
    pub rel_tol: f64,
    /// Magnitude below which the error is measured against this floor
    /// instead of the gradient itself.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            points: 10,
            rel_tol: 1e-3,
            floor: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::Usage("gradient check needs a scalar function".into()));
    }
    Ok(out.value().item())
}

/// Compares backward-pass gradients of `f` against central differences at
/// `opts.points` random coordinates of every input with `requires_grad`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let ids: Vec<_> = vars.iter().map(|v| v.id()).collect();
    let out = f(&tape, &vars)?;
    let loss = out.id();
    drop(vars);
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic = grads
            .get(ids[i])
            .ok_or_else(|| Error::Internal("missing gradient for trainable input".into()))?
            .to_f64_vec();
        let count = opts.points.min(input.numel());
        let mut coords = sample(&mut rng, input.numel(), count).into_vec();
        coords.sort_unstable();
        for idx in coords {
            let mut shifted = inputs.to_vec();
            let x0 = input.data()[idx];
            shifted[i].data_mut()[idx] = x0 + opts.step;
            let plus = eval(&shifted, &f)?;
            shifted[i].data_mut()[idx] = x0 - opts.step;
            let minus = eval(&shifted, &f)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel_error = relative_error(analytic[idx], numeric, opts.floor);
            probes.push(Probe {
                input: i,
                index: idx,
                analytic: analytic[idx],
                numeric,
                rel_error,
            });
        }
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < opts.rel_tol,
        max_rel_error,
        probes,
    })
}
