//! Central finite-difference checks of tape gradients in 64-bit precision.

pub mod layers;
pub mod model;
pub mod primitives;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Which suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Layers,
    MicroModel,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Primitives, Scope::Layers, Scope::MicroModel];

    pub fn name(self) -> &'static str {
        match self {
            Self::Primitives => "primitives",
            Self::Layers => "layers",
            Self::MicroModel => "micro-model",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Largest accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Self::Primitives | Self::Layers => 1e-4,
            Self::MicroModel => 1e-3,
        }
    }

    pub fn run(self, seed: u64) -> Result<Vec<CheckReport>> {
        match self {
            Self::Primitives => primitives::suite(seed),
            Self::Layers => layers::suite(seed),
            Self::MicroModel => model::suite(seed),
        }
    }
}

/// Outcome of comparing one input's analytic gradient with finite differences.
#[derive(Debug, Clone)]
pub struct InputCheck {
    pub name: String,
    pub rel_error: f64,
    pub checked: usize,
    /// Probes dropped because a relu kink lies within the step.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub inputs: Vec<InputCheck>,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&InputCheck> {
        self.inputs.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Floor on the relative-error denominator: below it the central
/// difference is rounding noise and the error is effectively absolute.
pub const SCALE_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖ + ‖n‖, SCALE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(SCALE_FLOOR)
}

/// One-sided differences that disagree beyond what curvature over one step
/// explains mean a non-differentiable point sits inside the step.
fn is_kink(forward: f64, backward: f64) -> bool {
    (forward - backward).abs() > 1e-6 + 1e-3 * (forward.abs() + backward.abs())
}

/// Evenly spaced subset of `0..len` of at most `limit` indices.
pub fn probe_indices(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    (0..limit).map(|i| i * len / limit).collect()
}

/// Checks `f(inputs)` against central differences on every input tensor.
///
/// `f` must be deterministic. At most `max_probes` entries per input are
/// perturbed.
pub fn check_fn<F>(name: &str, inputs: &[(&str, Tensor<f64>)], max_probes: usize, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let base = tape.value(loss).item();
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = CheckReport { name: name.to_string(), inputs: Vec::new() };
    for (k, (label, _)) in inputs.iter().enumerate() {
        let analytic_full = grads.wrt(&tape, vars[k]);
        let probes = probe_indices(values[k].len(), max_probes);
        let mut analytic = Vec::with_capacity(probes.len());
        let mut numeric = Vec::with_capacity(probes.len());
        let mut skipped = 0;
        for &i in &probes {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&values)?;
            values[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let forward = (up - base) / FD_STEP;
            let backward = (base - down) / FD_STEP;
            if is_kink(forward, backward) {
                skipped += 1;
                continue;
            }
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(analytic_full.data()[i]);
        }
        report.inputs.push(InputCheck {
            name: label.to_string(),
            rel_error: if skipped * 4 > probes.len() { f64::INFINITY } else { relative_error(&analytic, &numeric) },
            checked: probes.len() - skipped,
            skipped,
        });
    }
    Ok(report)
}
