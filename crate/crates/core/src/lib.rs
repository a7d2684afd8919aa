//! Numerical toolkit for multi-bump solutions of `-Δu + u = u^p`.

// `!(x > 0.0)` rejects NaN as well; index loops mirror the stencil formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ground_state;
pub mod kernels;
pub mod linalg;
pub mod ode;
pub mod particles;
pub mod pde;
pub mod pipeline;
pub mod quadrature;
pub mod reduction;
