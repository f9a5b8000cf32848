//! Central finite-difference checks of reverse-mode gradients.
//!
//! The relative error of an analytic component `a` against its numerical
//! estimate `n` is `|a - n| / max(|a|, |n|, FLOOR)`; the floor keeps
//! components that are zero up to round-off from dominating the maximum.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParameterStore, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub max_rel_err: f64,
    pub components: usize,
}

/// Checks the gradient of the scalar `f(inputs)` with respect to every
/// entry of every input.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };

    let mut worst = 0.0f64;
    let mut components = 0;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, v);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + step;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - step;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
            components += 1;
        }
    }
    Ok(CheckResult {
        max_rel_err: worst,
        components,
    })
}

/// Checks `samples` randomly chosen scalar entries drawn across all
/// parameters of `store` accepted by `filter`.
pub fn check_params<F, R>(
    store: &ParameterStore,
    samples: usize,
    step: f64,
    rng: &mut R,
    filter: impl Fn(&str) -> bool,
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
    R: Rng,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let mut entries: Vec<(String, usize)> = Vec::new();
    for (name, p) in store.iter().filter(|(n, _)| filter(n)) {
        entries.extend((0..p.value.numel()).map(|i| (name.to_string(), i)));
    }
    let picks = sample(rng, entries.len(), samples.min(entries.len()));

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = tape.no_grad(|t| f(t, s))?;
        Ok(tape.value(l).item())
    };

    let mut work = store.clone();
    let mut worst = 0.0f64;
    for idx in picks.iter() {
        let (name, i) = &entries[idx];
        let analytic = tape
            .param_var(name)
            .and_then(|v| grads.get(v))
            .map_or(0.0, |g| g[*i]);
        let x0 = store.value(name).expect("sampled from store").data()[*i];
        work.value_mut(name).unwrap().data_mut()[*i] = x0 + step;
        let fp = eval(&work)?;
        work.value_mut(name).unwrap().data_mut()[*i] = x0 - step;
        let fm = eval(&work)?;
        work.value_mut(name).unwrap().data_mut()[*i] = x0;
        let numeric = (fp - fm) / (2.0 * step);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(CheckResult {
        max_rel_err: worst,
        components: picks.len(),
    })
}
