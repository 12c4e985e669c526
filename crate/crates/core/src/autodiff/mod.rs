// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The primitive set is exactly what the toy transformer and the editing
//! losses need: matrix products, elementwise arithmetic, embedding gathers,
//! layer norm, (log-)softmax, GELU, causal masking, row/column slicing and
//! the two losses (mean NLL and detached-reference KL).

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
///
/// Test oracle for the analytic backward pass; evaluates `f` twice per
/// coordinate listed in `coords`.
pub fn finite_difference(
    x: &Tensor,
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
