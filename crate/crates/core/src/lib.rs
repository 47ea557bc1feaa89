//! Simulation and analysis of cold-atom loading into a hollow-core
//! photonic-crystal fiber and of stroboscopic in-fiber absorption
//! spectroscopy.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atomic;
pub mod constants;
pub mod fitting;
pub mod io;
pub mod loading;
pub mod optics;
pub mod spectroscopy;

pub use fitting::{fit_spectrum, FitError, FitOptions, FitProblem, FitResult};
pub use atomic::{AtomSpecies, HyperfineLevel, Manifold, PolarizationModel, SpeciesError, TransitionStrength};
pub use loading::{
    Ensemble, Fate, LoadingError, LoadingOptions, LoadingResult, MotCloud, StepPolicy, TerminationRules,
    TrajectoryOutcome,
};
pub use optics::{BeamGeometry, DivergenceModel, OpticsError, TrapConfig};
pub use spectroscopy::{ProbeSequenceConfig, SpectrumModel, SpectroscopyError};
