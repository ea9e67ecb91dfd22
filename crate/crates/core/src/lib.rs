//! Modeling and data analysis for cascade-decay four-wave-mixing photon-pair
//! sources in cold atomic ensembles.
//!
//! * [`model`]: steady state of the driven three-level ladder atom, closed form
//!   and numerical master-equation solve.
//! * [`lineshape`]: pump-noise convolution and the rate/heralding fit models.
//! * [`correlation`]: time tags to G² histograms, coherence time, rates,
//!   heralding efficiencies, CAR and spectral brightness.
//! * [`ensemble`]: optical-density fits and atom-number scaling laws.
//! * [`simulator`]: synthetic two-channel detector streams with ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlation;
pub mod ensemble;
pub mod lineshape;
pub mod lm;
pub mod measure;
pub mod model;
pub mod quadrature;
pub mod simulator;
pub mod timetag;

pub use measure::Estimate;
pub use model::{SteadyState, ThreeLevelParams};
