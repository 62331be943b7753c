//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The graph is define-by-run: every op call appends a node and computes its
//! value eagerly, and [`Graph::backward`] sweeps the nodes in reverse creation
//! order. Nodes only carry gradient bookkeeping when some ancestor leaf
//! requires a gradient, so frozen parameters skip their weight-gradient work.

mod graph;
mod tensor;

pub use graph::{log_sum_exp, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid shape {shape:?}: dimensions must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("non-finite input value at flat index {index}")]
    NonFiniteInput { index: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{op} needs at least one input")]
    EmptyInput { op: &'static str },
    #[error("backward called before the seed node was computed")]
    BackwardBeforeForward,
    #[error("backward seed must be a scalar, got shape {shape:?}")]
    SeedNotScalar { shape: Vec<usize> },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}

/// Central differences of a scalar function at `point`.
pub fn central_differences<F>(mut f: F, point: &Tensor, step: f64) -> Result<Vec<f64>, AutodiffError>
where
    F: FnMut(&Tensor) -> Result<f64, AutodiffError>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// `max_i |analytic_i - numeric_i| / max(|analytic_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1e-8))
        .fold(0.0, f64::max)
}

fn evaluate<F>(f: &F, point: &Tensor) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.shape().to_vec(), point.data().to_vec(), false)?;
    let y = f(&mut g, x)?;
    if g.value(y).len() != 1 {
        return Err(AutodiffError::SeedNotScalar {
            shape: g.shape(y).to_vec(),
        });
    }
    Ok(g.scalar_value(y))
}

/// Compares the graph gradient of `f` at `point` against central differences
/// and returns the maximum relative error over coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.shape().to_vec(), point.data().to_vec(), true)?;
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x).expect("leaf requires grad").to_vec();

    let first = g.scalar_value(y);
    let second = evaluate(&f, point)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }
    let numeric = central_differences(|p| evaluate(&f, p), point, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests;
