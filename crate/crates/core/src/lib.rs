//! Simulation and fitting of ODMR spectra of NV centers with nearest-shell 13C nuclei.
//!
//! The crate is organized bottom-up:
//!
//! * [`spin`] builds spin operators, the lattice geometry and the ground-state Hamiltonian.
//! * [`transitions`] diagonalizes it and tabulates microwave transitions.
//! * [`spectrum`] turns transition tables into ensemble spectra.
//! * [`fitting`] estimates the 13C fraction (and friends) from measured spectra.
//! * [`concentration`] holds the closed-form Raman, strain, IR and contrast calculators.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod concentration;
pub mod constants;
pub mod error;
pub mod fitting;
pub mod lsq;
pub mod spectrum;
pub mod spin;
pub mod transitions;

pub use concentration::{raman_to_concentration, RamanMeasurement};
pub use constants::PhysicalConstants;
pub use error::{Error, Result};
pub use fitting::{fit_full, fit_gauss7, FitParams, FitResult, ModelKind};
pub use spectrum::{
    bath_shift_distribution, binomial_weights, synthesize_spectrum, BathConfigurationSet,
    IsotopologueWeights, LineShape, LineShapeParams, SpectrumCurve,
};
pub use spin::{
    assemble_hamiltonian, build_spin_operators, carbon_site_tensor, field_in_nv_frame, CMatrix,
    HamiltonianTerms, SpinOperators, SpinSystemConfig,
};
pub use transitions::{
    diagonalize, field_sensitivity, mw_coupling_operator, transition_table, EigenSystem, Transition,
    TransitionOptions, TransitionSelector,
};
