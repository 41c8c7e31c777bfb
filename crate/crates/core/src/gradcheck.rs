//! Central finite-difference verification of tape gradients for any
//! parameter set, sampling entries per tensor. Probes run data-parallel,
//! each on its own clone of the model.

use std::collections::HashMap;


use crate::error::Result;
use crate::nn::ParamSet;
use crate::par;
use crate::rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub class: String,
    pub checked: usize,
    pub failures: Vec<GradCheckEntry>,
    pub worst_abs_err: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} probes, {} failures, worst abs err {:.3e}",
            self.class,
            self.checked,
            self.failures.len(),
            self.worst_abs_err
        )
    }
}

fn passes(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= ABS_FLOOR + REL_TOL * analytic.abs().max(numeric.abs())
}

/// Compare tape gradients against central finite differences.
///
/// `eval` runs a full forward/backward and returns the scalar loss plus
/// gradients keyed by parameter path. Only parameters accepted by `filter`
/// and flagged `requires_grad` are probed; `samples_per_tensor` entries are
/// drawn per tensor (all entries when the tensor is smaller).
pub fn check_gradients<M, F>(
    model: &M,
    eval: F,
    filter: impl Fn(&str) -> bool,
    samples_per_tensor: usize,
    seed: u64,
    class: &str,
) -> Result<GradCheckReport>
where
    M: ParamSet + Clone + Sync + Send,
    F: Fn(&M) -> Result<(f64, HashMap<String, Vec<f64>>)> + Sync + Send,
{
    let (_, grads) = eval(model)?;

    // deterministic probe list
    let mut probes: Vec<(String, usize)> = Vec::new();
    let mut r = rng::stream(seed);
    model.for_each("", &mut |name, t| {
        if !t.requires_grad || !filter(name) {
            return;
        }
        let numel = t.numel();
        if numel <= samples_per_tensor {
            probes.extend((0..numel).map(|i| (name.to_string(), i)));
        } else {
            let picked = rng::sample_without_replacement(&mut r, numel, samples_per_tensor);
            probes.extend(picked.into_iter().map(|i| (name.to_string(), i)));
        }
    });

    let results: Vec<Result<GradCheckEntry>> = par::map_indexed(probes.len(), |p| {
        let (name, index) = &probes[p];
        let mut probe_model = model.clone();
        let perturb = |m: &mut M, delta: f64| {
            m.for_each_mut("", &mut |nm, t| {
                if nm == name {
                    t.data_mut()[*index] += delta;
                }
            });
        };
        perturb(&mut probe_model, FD_STEP);
        let (loss_plus, _) = eval(&probe_model)?;
        perturb(&mut probe_model, -2.0 * FD_STEP);
        let (loss_minus, _) = eval(&probe_model)?;
        let numeric = (loss_plus - loss_minus) / (2.0 * FD_STEP);
        let analytic = grads.get(name).map_or(0.0, |g| g[*index]);
        Ok(GradCheckEntry {
            name: name.clone(),
            index: *index,
            analytic,
            numeric,
            pass: passes(analytic, numeric),
        })
    });

    let mut checked = 0;
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for entry in results {
        let entry = entry?;
        checked += 1;
        worst = worst.max((entry.analytic - entry.numeric).abs());
        if !entry.pass {
            failures.push(entry);
        }
    }
    Ok(GradCheckReport {
        class: class.to_string(),
        checked,
        failures,
        worst_abs_err: worst,
    })
}
