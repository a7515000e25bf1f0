//! Dense-matrix arithmetic with reverse-mode automatic differentiation.

mod matrix;
mod tape;

pub use matrix::{Matrix, Shape};
pub use tape::{NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("cannot build a {rows}x{cols} matrix from {len} values")]
    BadConstruction { rows: usize, cols: usize, len: usize },
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("pow_const domain error: base {base} with non-integer exponent {exponent}")]
    PowDomain { base: f64, exponent: f64 },
    #[error("backward requires a 1x1 loss, got {shape}")]
    NonScalarLoss { shape: Shape },
    #[error("concat_rows requires a non-empty list")]
    EmptyConcat,
    #[error("class index {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },
}

/// Default step for central finite differences.
pub const FD_STEP: f64 = 1e-5;

/// Central finite differences (f(x+heᵢ) − f(x−heᵢ)) / (2h) per element.
///
/// Testing oracle: deliberately independent of the tape's backward pass.
pub fn finite_difference_gradient(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}
