//! Central finite-difference verification of reverse-mode gradients.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use super::loss::{objective_graph, LossReport, LossSettings, TrainingSample};
use super::matrix::Matrix;
use super::weights::{BppModel, ModelDims};
use super::PrototypeError;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("objective is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("gradient has shape {found:?}, expected {expected:?}")]
    Shape { expected: (usize, usize), found: (usize, usize) },
    #[error("non-finite loss while perturbing {name}[{index}]")]
    NonFinite { name: String, index: usize },
    #[error(transparent)]
    Model(#[from] PrototypeError),
}

/// A scalar function of one matrix with an analytic gradient.
pub trait Objective {
    fn loss(&self, point: &Matrix) -> f64;
    fn gradient(&self, point: &Matrix) -> Matrix;
}

/// [`Objective`] from a pair of closures.
pub struct FnObjective<L, G> {
    pub loss: L,
    pub gradient: G,
}

impl<L, G> Objective for FnObjective<L, G>
where
    L: Fn(&Matrix) -> f64,
    G: Fn(&Matrix) -> Matrix,
{
    fn loss(&self, point: &Matrix) -> f64 {
        (self.loss)(point)
    }

    fn gradient(&self, point: &Matrix) -> Matrix {
        (self.gradient)(point)
    }
}

/// Comparison result for one matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixCheck {
    pub name: String,
    pub shape: (usize, usize),
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
    /// Analytic and numeric values at `worst_index`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub max_abs_gradient: f64,
}

/// Per-matrix results for a whole model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub epsilon: f64,
    pub loss: LossReport,
    pub matrices: Vec<MatrixCheck>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.matrices.iter().map(|m| m.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.matrices.iter().all(|m| m.max_rel_error < threshold)
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn check_epsilon(epsilon: f64) -> Result<(), GradCheckError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(GradCheckError::Epsilon(epsilon));
    }
    Ok(())
}

fn compare(name: &str, analytic: &Matrix, numeric: &[f64]) -> MatrixCheck {
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.as_slice().iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    MatrixCheck {
        name: name.to_string(),
        shape: analytic.shape(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        worst_analytic: analytic.as_slice().get(worst.1).copied().unwrap_or(0.0),
        worst_numeric: numeric.get(worst.1).copied().unwrap_or(0.0),
        max_abs_gradient: analytic.as_slice().iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// Compares `objective.gradient` with central differences at `point`.
pub fn gradient_check(objective: &dyn Objective, point: &Matrix, epsilon: f64) -> Result<MatrixCheck, GradCheckError> {
    check_epsilon(epsilon)?;
    let first = objective.loss(point);
    let second = objective.loss(point);
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }
    let analytic = objective.gradient(point);
    if analytic.shape() != point.shape() {
        return Err(GradCheckError::Shape {
            expected: point.shape(),
            found: analytic.shape(),
        });
    }
    let mut probe = point.clone();
    let mut numeric = Vec::with_capacity(point.as_slice().len());
    for i in 0..point.as_slice().len() {
        let orig = point.as_slice()[i];
        probe.as_mut_slice()[i] = orig + epsilon;
        let plus = objective.loss(&probe);
        probe.as_mut_slice()[i] = orig - epsilon;
        let minus = objective.loss(&probe);
        probe.as_mut_slice()[i] = orig;
        numeric.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(compare("point", &analytic, &numeric))
}

fn total(model: &BppModel, sample: &TrainingSample, settings: &LossSettings) -> Result<f64, PrototypeError> {
    Ok(objective_graph(model, sample, settings)?.3.total)
}

/// Checks the gradient of the total loss with respect to every entry of
/// every named parameter matrix of `model`.
pub fn check_model(
    model: &BppModel,
    sample: &TrainingSample,
    settings: &LossSettings,
    epsilon: f64,
) -> Result<GradCheck, GradCheckError> {
    check_epsilon(epsilon)?;
    model.validate()?;
    let (graph, vars, out, report) = objective_graph(model, sample, settings)?;
    let again = total(model, sample, settings)?;
    if report.total.to_bits() != again.to_bits() {
        return Err(GradCheckError::NonDeterministic {
            first: report.total,
            second: again,
        });
    }
    let grads = graph.backward(out);

    let named = model.named();
    let probes: Vec<(usize, usize)> = named
        .iter()
        .enumerate()
        .flat_map(|(m, (_, value))| (0..value.as_slice().len()).map(move |i| (m, i)))
        .collect();
    let numeric: Vec<f64> = probes
        .par_iter()
        .map(|&(m, i)| {
            let (name, value) = &named[m];
            let mut probe_model = model.clone();
            let eval = |delta: f64, probe_model: &mut BppModel| -> Result<f64, GradCheckError> {
                let mut v = value.clone();
                v.as_mut_slice()[i] += delta;
                probe_model.set(name, v)?;
                let l = total(probe_model, sample, settings)?;
                if !l.is_finite() {
                    return Err(GradCheckError::NonFinite { name: name.clone(), index: i });
                }
                Ok(l)
            };
            let plus = eval(epsilon, &mut probe_model)?;
            let minus = eval(-epsilon, &mut probe_model)?;
            Ok((plus - minus) / (2.0 * epsilon))
        })
        .collect::<Result<_, GradCheckError>>()?;

    let mut matrices = Vec::with_capacity(named.len());
    let mut offset = 0;
    for (name, value) in &named {
        let var = BppModel::var_of(&vars, name).expect("bound parameter");
        let n = value.as_slice().len();
        matrices.push(compare(name, &grads.get(var), &numeric[offset..offset + n]));
        offset += n;
    }
    Ok(GradCheck {
        epsilon,
        loss: report,
        matrices,
    })
}

/// Initialisation std of [`fixture`]. Large enough that every attention
/// path carries gradients well above the finite-difference roundoff floor.
pub const FIXTURE_INIT_STD: f64 = 0.3;

/// Patch-token counts of the fixture's three individuals.
pub const FIXTURE_TOKENS: [usize; 3] = [3, 2, 4];

/// Seed of the default fixture.
pub const FIXTURE_SEED: u64 = 1;

/// A seeded model and a three-individual, two-group sample for
/// [`check_model`].
pub fn fixture(dims: ModelDims, seed: u64, init_std: f64) -> Result<(BppModel, TrainingSample), PrototypeError> {
    let model = BppModel::seeded_with_std(dims, seed, init_std)?;
    let sample = TrainingSample::synthetic(&dims, seed, &FIXTURE_TOKENS, &[vec![0, 2], vec![1]])?;
    Ok((model, sample))
}
