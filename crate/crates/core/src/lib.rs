//! Desk-scale single-stream flow transformer with stream-gated low-rank
//! adapters for concept erasure, plus the constrained-optimization machinery
//! that trades erasure strength against preservation of everything else.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff on a flat tape (f64, row-major).
//! - [`model`]: the unified-sequence transformer, gated low-rank adapters,
//!   attention recording.
//! - [`flow`]: linear-path flow matching, base training, Euler sampling.
//! - [`objectives`]: erasure / attention-suppression / preservation losses.
//! - [`controller`]: the dual-variable controller and its convergence
//!   diagnostics.
//! - [`quadratic`]: an analytic two-objective quadratic testbed where every
//!   bound in [`controller`] can be checked exactly.
//! - [`qp`]: an independent numeric solver for the direction subproblem,
//!   used to cross-check the closed form.
//! - [`intervene`]: attention-column zeroing, bypass demonstration,
//!   per-layer/head localization.
//! - [`merge`]: exact multi-adapter merging by factor concatenation.
//! - [`energy`]: energy-distance metric between sample clouds.
//! - [`checkpoint`]: integrity-checked model/adapter persistence.

pub mod checkpoint;
pub mod controller;
pub mod energy;
pub mod error;
pub mod flow;
pub mod intervene;
pub mod merge;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod qp;
pub mod quadratic;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
