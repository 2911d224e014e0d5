//! Flash-ontology collapse processes on desk-scale Hilbert spaces.
//!
//! The nonrelativistic side ([`grw`], [`fock`], [`multitime`]) works on
//! finite position grids with exact densities and a Monte Carlo sampler.
//! The relativistic side ([`dirac`], [`relflash`]) uses free Dirac spinors in
//! 1+1 dimensions expanded in plane waves, with hyperboloid collapse
//! operators and surface-indexed conditional states.
//!
//! Everything numerical is generic over [`Real`]; the `*64` aliases below
//! are the instantiations the tests and the command-line tool use.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0)` is the NaN-rejecting form

pub mod dirac;
pub mod error;
pub mod experiments;
pub mod fock;
pub mod grw;
pub mod hilbert;
pub mod multitime;
pub mod quadrature;
pub mod relflash;
pub mod rng;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type StateVector64 = hilbert::StateVector<f64>;
pub type OperatorMatrix64 = hilbert::OperatorMatrix<f64>;
pub type DensityMatrix64 = hilbert::DensityMatrix<f64>;
pub type GrwModel64 = grw::GrwModel<f64>;
pub type DenseFlashModel64 = grw::DenseFlashModel<f64>;
pub type SpacetimePoint64 = dirac::SpacetimePoint<f64>;
pub type ModeGrid64 = dirac::ModeGrid<f64>;
pub type DiracState64 = dirac::DiracState<f64>;
pub type Surface64 = dirac::Surface<f64>;
pub type TensorState64 = relflash::TensorState<f64>;
pub type RelFlashModel64 = relflash::RelFlashModel<f64>;
pub type RelFlashHistory64 = relflash::RelFlashHistory<f64>;
