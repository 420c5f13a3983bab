//! Work statistics of a driven spin coupled to a random-matrix bath.
//!
//! The crate builds the model Hamiltonian, propagates its eigenstates through
//! a cyclic resonant drive, and turns the resulting two-point-measurement
//! transition probabilities into work distributions and Jarzynski-relation
//! deviations for microcanonical and eigenstate initial states.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the precision used by the command-line tool.

// Negated comparisons in validation reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
pub mod fit;
pub mod model;
pub mod propagator;
mod scalar;
pub mod store;
pub mod sweep;
pub mod theory;
pub mod workstats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ModelParams64 = model::ModelParams<f64>;
pub type BathSpectrum64 = model::BathSpectrum<f64>;
pub type HamiltonianSet64 = model::HamiltonianSet<f64>;
pub type PropagatedSet64 = propagator::PropagatedSet<f64>;
pub type TransitionTable64 = workstats::TransitionTable<f64>;
pub type WorkPdf64 = workstats::WorkPdf<f64>;
pub type DeviationRecord64 = workstats::DeviationRecord<f64>;
pub type SyntheticEnsemble64 = theory::SyntheticEnsemble<f64>;

/// Formats a float with 17 significant decimal digits, the precision every
/// CSV output uses.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        // Keeps the sign of negative zero out of the files.
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}
