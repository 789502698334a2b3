//! Simulation and analysis toolkit for heterogeneously integrated diamond
//! micro-chiplets on photonic integrated circuits.
//!
//! The crate is organised along the integration pipeline:
//!
//! * [`emitters`] – colour-centre photophysics, photon statistics and the
//!   waveguide-QED inversion from resonant extinction to coupling figures.
//! * [`implant`] – stochastic implantation-spot emitter populations.
//! * [`chiplet`] – waveguide arrays over implant grids and defect-free yield.
//! * [`assembly`] – pick-and-place statistics and taper coupling budgets.
//! * [`spectra`] – synthetic PLE / transmission / g² data and their fits.
//! * [`tuning`] – electrostatic strain tuning and resonant-set planning.
//!
//! Every stochastic routine takes an explicit `u64` seed and draws from
//! counter-addressed ChaCha substreams ([`rng`]), so results are identical
//! regardless of how work is split across threads.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod chiplet;
pub mod emitters;
mod error;
pub mod implant;
pub mod io;
pub mod lm;
pub mod rng;
pub mod spectra;
pub mod tuning;

pub use error::{Error, Result};

pub use assembly::{PlacementModel, TaperModel};
pub use chiplet::{AlignmentModel, ChipletDesign};
pub use emitters::{CouplingFigures, Emitter, Species, SpeciesParams};
pub use implant::{ImplantSpec, ImplantSpot};
pub use spectra::{CorrelationHistogram, FitResult, ScanConfig, Spectrum};
pub use tuning::{ActuatorConfig, TuningPlan};
