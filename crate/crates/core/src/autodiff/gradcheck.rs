//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::Rng as _;

use super::{ParamSet, Tape, Tensor, TensorError, Var};
use crate::rng;

/// Options for [`check_params`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (sampled); `None`
    /// checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Largest relative error found, and where.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

impl CheckReport {
    fn record(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.coords_checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), coord));
        }
    }
}

/// `|a - n| / max(1e-8, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights,
/// so every output coordinate contributes a distinct amount.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let n: usize = tape.shape(out).iter().product();
    if n == 1 {
        return Ok(out);
    }
    let mut r = rng::stream(seed, "gradcheck/projection");
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.5..1.5)).collect();
    let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

fn coords(len: usize, opts: &CheckOptions, salt: &str) -> Vec<usize> {
    match opts.max_coords {
        Some(m) if m < len => {
            let mut r = rng::stream(opts.seed, salt);
            let mut v = sample(&mut r, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks the gradient of `f` with respect to each tensor in `inputs`.
/// Returns the maximum relative error over all coordinates.
pub fn finite_diff_check<F>(mut f: F, inputs: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |f: &mut F, xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let out = project(&mut tape, out, 17)?;
        Ok(tape.value(out)[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let out = project(&mut tape, out, 17)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for t in 0..xs.len() {
        for c in 0..xs[t].numel() {
            let orig = xs[t].data()[c];
            xs[t].data_mut()[c] = orig + eps;
            let plus = eval(&mut f, &xs)?;
            xs[t].data_mut()[c] = orig - eps;
            let minus = eval(&mut f, &xs)?;
            xs[t].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[t][c], numeric));
        }
    }
    Ok(worst)
}

/// Checks the gradient of a scalar built by `f` with respect to every
/// trainable parameter in `params`. `f` must be deterministic.
pub fn check_params<F, E>(params: &mut ParamSet, mut f: F, opts: &CheckOptions) -> Result<CheckReport, E>
where
    F: FnMut(&mut Tape) -> Result<Var, E>,
    E: From<TensorError>,
{
    let analytic = {
        let mut tape = Tape::with_params(params);
        let out = f(&mut tape)?;
        let out = project(&mut tape, out, opts.seed)?;
        tape.backward(out)?;
        tape.param_grads()
    };
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<_> = params.ids().filter(|&id| params.get(id).trainable).collect();
    for id in ids {
        let name = params.get(id).name.clone();
        let len = params.value(id).numel();
        for c in coords(len, opts, &name) {
            let orig = params.value(id).data()[c];
            params.get_mut(id).value.data_mut()[c] = orig + opts.eps;
            let plus = eval_params(params, &mut f, opts.seed)?;
            params.get_mut(id).value.data_mut()[c] = orig - opts.eps;
            let minus = eval_params(params, &mut f, opts.seed)?;
            params.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(id).map_or(0.0, |g| g[c]);
            report.record(&name, c, a, numeric);
        }
    }
    Ok(report)
}

fn eval_params<F, E>(params: &ParamSet, f: &mut F, seed: u64) -> Result<f64, E>
where
    F: FnMut(&mut Tape) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::with_params(params);
    let out = f(&mut tape)?;
    let out = project(&mut tape, out, seed)?;
    Ok(tape.value(out)[0])
}
