//! Mean-field level on a 4-D phase-space grid.

pub mod checkpoint;
pub mod force;
pub mod grid;
pub(crate) mod semilagrangian;
pub mod solver;
pub(crate) mod transport;
pub(crate) mod velocity;

pub use checkpoint::{plan_storage, StorageConfig, StoragePlan};
pub use force::{convolve_force, ConvolutionTable};
pub use transport::TransportScheme;
pub use grid::{sample_initial_density, DensityField, PhaseGrid, SpatialMoments, VelocityProfile};
pub use solver::{
    assemble_mf_gradient, evaluate_mf_cost, integrate_mf_adjoint, integrate_mf_forward, reduced_gradient_mf,
    AdjointMF, ForwardRecordMF, MeanFieldSystem, MfConfig, MfProblem, MfState,
};
