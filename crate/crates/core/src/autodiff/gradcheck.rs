//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Run the analytic pass on a tape with deliberately wrong backward
    /// rules (negative control).
    pub corrupt_backward: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            corrupt_backward: false,
        }
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::Tape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Normwise relative error between the analytic gradient of scalar `f` at
/// `x` and its central-difference estimate with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let opts = GradCheckOptions {
        step: h,
        ..Default::default()
    };
    let errs = grad_check_inputs(|tape, v| f(tape, v[0]), std::slice::from_ref(x), &opts)?;
    Ok(errs[0])
}

/// Per-input normwise relative gradient error of a scalar function of
/// several tensors: `max|a - n| / max(max|a|, max|n|)` over the checked
/// coordinates, where `a` is analytic and `n` the central difference.
/// Elementwise ratios are not used because components many orders below
/// the tensor's scale are dominated by rounding in the difference quotient.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = if opts.corrupt_backward {
        Tape::with_corrupted_backward(1.5)
    } else {
        Tape::new()
    };
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::Tape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for i in coords {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + opts.step;
            let plus = eval_scalar(&f, &work)?;
            work[which].data_mut()[i] = orig - opts.step;
            let minus = eval_scalar(&f, &work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            diff = diff.max((analytic[which][i] - numeric).abs());
            scale = scale.max(analytic[which][i].abs()).max(numeric.abs());
        }
        errors.push(diff / scale.max(1e-8));
    }
    Ok(errors)
}
