//! Central finite-difference gradient checking for tape-built scalars.

use super::param::ParamSet;
use super::rng::SplitMix64;
use super::tape::{Graph, Var};
use crate::error::{Error, Result};

/// Coordinates beyond this count are subsampled (deterministically).
pub const MAX_CHECKED_COORDS: usize = 512;

/// Compares the tape gradient of `f` against central differences.
///
/// `f` builds a scalar from the bound parameters of `params` (group 0).
/// Returns the max over checked coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::contract(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |set: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let vars = g.bind(0, set);
        let out = f(&mut g, &vars);
        let v = g.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numeric("non-finite objective in grad_check"))
        }
    };

    let mut analytic = params.clone();
    analytic.zero_grads();
    {
        let mut g = Graph::new();
        let vars = g.bind(0, params);
        let out = f(&mut g, &vars);
        if !g.scalar(out).is_finite() {
            return Err(Error::numeric("non-finite objective in grad_check"));
        }
        g.backward(out);
        g.accumulate(0, &mut analytic);
    }

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.len()).map(move |k| (i, k)))
        .collect();
    if coords.len() > MAX_CHECKED_COORDS {
        let mut rng = SplitMix64::new(0x6772_6164);
        rng.shuffle(&mut coords);
        coords.truncate(MAX_CHECKED_COORDS);
    }

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (i, k) in coords {
        let base = params.get(i).value.data()[k];
        work.get_mut(i).value.data_mut()[k] = base + eps;
        let up = eval(&work)?;
        work.get_mut(i).value.data_mut()[k] = base - eps;
        let down = eval(&work)?;
        work.get_mut(i).value.data_mut()[k] = base;
        let numeric = (up - down) / (2.0 * eps);
        let exact = analytic.get(i).grad.data()[k];
        let rel = (exact - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
