//! Adjustable robust polynomial optimization.
//!
//! The crate builds two-stage robust programs whose second stage is described
//! by polynomial equalities, eliminates the state through a first-order model,
//! certifies robust constraint satisfaction with conic programs (LP duality,
//! S-lemma, sum-of-squares), and solves the resulting problems with a bundled
//! primal-dual interior-point solver. A complete robust AC optimal power flow
//! application sits on top.
//!
//! Start with [`acopf`] for the power-flow application or [`aro`] for the
//! generic robust pipeline; the `examples/` directory shows one runnable
//! program per capability.

pub mod algorithms;
pub mod aro;
pub mod conic;
pub mod exp;
pub mod poly;
pub mod uncertainty;
pub mod verify;

pub mod acopf;
