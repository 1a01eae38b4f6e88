//! Central finite-difference checks of reverse-mode gradients (double precision).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per input; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Lower bound of the relative-error denominator, so that gradients that are zero
    /// up to rounding compare absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

/// Something with perturbable inputs and a scalar loss.
pub trait GradCheckTarget {
    /// `(name, element count)` of each input, in order.
    fn inputs(&self) -> Vec<(String, usize)>;
    fn get(&self, input: usize, index: usize) -> f64;
    fn set(&mut self, input: usize, index: usize, value: f64);
    /// Evaluates the loss; with a tape, every input must be registered on it by name.
    fn loss(&self, tape: Option<&Tape<f64>>) -> Result<Var<f64>>;
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn check<G: GradCheckTarget>(target: &mut G, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let loss = target.loss(Some(&tape))?;
    let grads = tape.gradients(&loss)?;
    drop(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (i, (name, len)) in target.inputs().into_iter().enumerate() {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| TensorError::Usage(format!("input {name} was not registered on the tape")))?
            .clone();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for j in coords {
            let orig = target.get(i, j);
            target.set(i, j, orig + opts.step);
            let plus = target.loss(None)?.value().item()?;
            target.set(i, j, orig - opts.step);
            let minus = target.loss(None)?.value().item()?;
            target.set(i, j, orig);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    input: name.clone(),
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

struct FnTarget<'a, F> {
    names: Vec<String>,
    values: Vec<Tensor<f64>>,
    f: &'a F,
}

impl<F> GradCheckTarget for FnTarget<'_, F>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    fn inputs(&self) -> Vec<(String, usize)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(Tensor::numel))
            .collect()
    }

    fn get(&self, input: usize, index: usize) -> f64 {
        self.values[input].data()[index]
    }

    fn set(&mut self, input: usize, index: usize, value: f64) {
        self.values[input].data_mut()[index] = value;
    }

    fn loss(&self, tape: Option<&Tape<f64>>) -> Result<Var<f64>> {
        let vars: Vec<Var<f64>> = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| match tape {
                Some(t) => t.param(n, || v.clone()),
                None => Var::constant(v.clone()),
            })
            .collect();
        (self.f)(&vars)
    }
}

/// Checks a closure over named inputs.
pub fn check_fn<F>(inputs: &[(&str, Tensor<f64>)], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let mut target = FnTarget {
        names: inputs.iter().map(|(n, _)| n.to_string()).collect(),
        values: inputs.iter().map(|(_, t)| t.clone()).collect(),
        f: &f,
    };
    check(&mut target, opts)
}
