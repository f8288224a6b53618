//! Minimal differentiable-computation substrate: a reverse-mode tape over
//! dense tensors, the layers built from it, Adam, and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
pub mod io;
mod graph;
pub mod layers;
mod params;
mod real;

pub use adam::AdamState;
pub use gradcheck::{grad_check, op_report};
pub use graph::{Gradients, Graph, Segments, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;

pub(crate) use graph::{gelu_fwd, softmax_in_place, LN_EPS};
pub(crate) use real::{gemm, View, ViewMut};

/// Segments covering `lens` packed back to back.
pub fn segments(lens: &[usize]) -> Segments {
    let mut start = 0;
    lens.iter()
        .map(|&l| {
            let s = (start, l);
            start += l;
            s
        })
        .collect::<Vec<_>>()
        .into()
}
