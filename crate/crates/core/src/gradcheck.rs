//! Central-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    /// Largest relative error seen inside each input tensor (0 when none of
    /// its coordinates were probed).
    pub per_input_errors: Vec<f64>,
    pub checked: usize,
    pub pass: bool,
}

/// Configuration for a gradient check run.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Probe only this many randomly chosen coordinates across all inputs.
    pub sample: Option<(usize, u64)>,
}

impl GradCheck {
    pub fn new(epsilon: f64, tolerance: f64) -> Self {
        GradCheck {
            epsilon,
            tolerance,
            sample: None,
        }
    }

    pub fn sampled(mut self, count: usize, seed: u64) -> Self {
        self.sample = Some((count, seed));
        self
    }

    /// Compares tape gradients of `builder` against central differences
    /// `(f(x+e) - f(x-e)) / 2e`, using `|a - n| / max(|a|, |n|, 1e-8)`.
    pub fn run<F>(&self, op_name: &str, params: &[Tensor], builder: F) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::GradCheck(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        let mut report = GradCheckReport {
            op_name: op_name.to_string(),
            max_relative_error: 0.0,
            per_input_errors: vec![0.0; params.len()],
            checked: 0,
            pass: true,
        };
        if params.is_empty() {
            return Ok(report);
        }

        let analytic = analytic_grads(params, &builder)?;
        let base = evaluate(params, &builder)?;
        let again = evaluate(params, &builder)?;
        if base.to_bits() != again.to_bits() {
            return Err(Error::GradCheck(format!(
                "{op_name}: builder is not deterministic ({base} vs {again})"
            )));
        }

        let coords = self.coordinates(params);
        let mut work: Vec<Tensor> = params.to_vec();
        for (p, i) in coords {
            let x0 = work[p].data()[i];
            work[p].data_mut()[i] = x0 + self.epsilon;
            let fp = evaluate(&work, &builder)?;
            work[p].data_mut()[i] = x0 - self.epsilon;
            let fm = evaluate(&work, &builder)?;
            work[p].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * self.epsilon);
            let a = analytic[p].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.per_input_errors[p] = report.per_input_errors[p].max(rel);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
        report.pass = report.max_relative_error <= self.tolerance;
        Ok(report)
    }

    fn coordinates(&self, params: &[Tensor]) -> Vec<(usize, usize)> {
        let all: Vec<(usize, usize)> = params
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
            .collect();
        match self.sample {
            Some((count, seed)) if count < all.len() => {
                let mut r = rng::seeded(seed);
                let mut picked: Vec<usize> = sample(&mut r, all.len(), count).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|k| all[k]).collect()
            }
            _ => all,
        }
    }
}

fn evaluate<F>(params: &[Tensor], builder: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = builder(&tape, &vars)?;
    out.value().item()
}

fn analytic_grads<F>(params: &[Tensor], builder: &F) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = builder(&tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_tightly() {
        let x = Tensor::new(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let report = GradCheck::new(1e-5, 1e-6)
            .run("quadratic", &[x], |_, v| {
                let sq = v[0].mul(v[0])?;
                Ok(sq.scale(1.5).add(v[0])?.sum())
            })
            .unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_relative_error < 1e-6);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn zero_parameter_builder_passes_empty() {
        let report = GradCheck::new(1e-5, 1e-4)
            .run("none", &[], |tape, _| Ok(tape.constant(Tensor::scalar(1.0))))
            .unwrap();
        assert!(report.pass);
        assert!(report.per_input_errors.is_empty());
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn nondeterministic_builder_is_diagnosed() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = GradCheck::new(1e-5, 1e-4)
            .run("flaky", &[x], |_, v| {
                calls.set(calls.get() + 1);
                Ok(v[0].scale(calls.get() as f64).sum())
            })
            .unwrap_err();
        assert!(err.to_string().contains("not deterministic"), "{err}");
    }

    #[test]
    fn smooth_op_passes() {
        let x = Tensor::new(&[2], vec![0.3, 0.7]).unwrap();
        let report = GradCheck::new(1e-5, 1e-4)
            .run("sigmoid", &[x], |_, v| Ok(v[0].sigmoid().sum()))
            .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn bad_epsilon_rejected() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(GradCheck::new(0.0, 1e-4)
            .run("q", &[x], |_, v| Ok(v[0].sum()))
            .is_err());
    }
}
