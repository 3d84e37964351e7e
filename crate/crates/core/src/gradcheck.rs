//! Central finite-difference gradient checking.
//!
//! The function under test maps input vars to an output var of any shape.
//! Non-scalar outputs are contracted with fixed pseudo-random weights so
//! that every output coordinate contributes with a distinct coefficient;
//! a plain sum would hide errors in ops whose outputs sum to a constant
//! (softmax rows, normalized vectors).

use rand::seq::index::sample;

use crate::rng::{self, normal_vec};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// At most this many coordinates per input are perturbed; larger
    /// inputs are subsampled with a seeded draw.
    pub max_coords: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. `1.0` in normal
    /// use; `-1.0` injects a sign fault to prove the check can fail.
    pub analytic_scale: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            max_coords: 40,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Inputs whose gradient is below this fraction of the largest gradient
/// in the check are compared against that floor instead of their own
/// scale; a structurally zero gradient then tolerates difference noise.
pub const SCALE_FLOOR: f64 = 1e-3;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Relative error of two gradient samples:
/// `max_i |a_i - n_i| / max(|a|_inf, |n|_inf, floor, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let denom = inf_norm(analytic)
        .max(inf_norm(numeric))
        .max(floor)
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / denom
}

fn reduce(tape: &mut Tape, out: Var, weights: &Option<Tensor>) -> Result<Var> {
    match weights {
        None => Ok(out),
        Some(w) => {
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv)?;
            Ok(tape.sum(prod)?)
        }
    }
}

fn evaluate<F>(inputs: &[Tensor], f: &F, weights: &Option<Tensor>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let r = reduce(&mut tape, out, weights)?;
    Ok(tape.item(r)?)
}

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences for every input tensor.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(Error::config("gradcheck", "no inputs"));
    }
    let mut rng = rng::seeded(opts.seed, 0x6772_6164);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let weights = if tape.shape(out).iter().product::<usize>() == 1 && tape.shape(out).len() <= 1 {
        None
    } else {
        let shape = tape.shape(out).to_vec();
        let n = shape.iter().product();
        Some(Tensor::new(shape, normal_vec(&mut rng, n, 1.0))?)
    };
    let loss = reduce(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let mut samples = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let zeros = vec![0.0; n];
        let full = grads.get(vars[k]).unwrap_or(&zeros);
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        let mut probe = inputs.to_vec();
        for &i in &coords {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let up = evaluate(&probe, &f, &weights)?;
            probe[k].data_mut()[i] = orig - opts.step;
            let down = evaluate(&probe, &f, &weights)?;
            probe[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * opts.step));
            analytic.push(opts.analytic_scale * full[i]);
        }
        checked += coords.len();
        samples.push((analytic, numeric));
    }
    let scale = samples.iter().map(|(a, _)| inf_norm(a)).fold(0.0, f64::max);
    let per_input: Vec<f64> = samples
        .iter()
        .map(|(a, n)| relative_error(a, n, SCALE_FLOOR * scale))
        .collect();
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_error <= opts.tolerance,
        per_input,
        max_rel_error,
        coords_checked: checked,
    })
}
