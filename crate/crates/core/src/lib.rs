//! Shape-matching deformation energy for point clouds.
//!
//! The crate provides the potential, its analytic gradient and Hessian
//! (including first- and second-order derivatives of the polar rotation),
//! Rayleigh damping terms, a finite-difference oracle for checking all of
//! them, and an implicit integrator that consumes them.

pub mod checks;
pub mod energy;
pub mod error;
pub mod fd;
pub mod integrator;
pub mod kinematics;
pub mod linalg;
pub mod polar;
pub mod random;
pub mod rotation;

pub use checks::{check_derivatives, CheckOptions, CheckResult, CheckStatus, CheckSuite};
pub use energy::{
    damping_energy, damping_force, damping_position_hessian, damping_velocity_hessian, deviation_jacobian,
    deviations, energy, gradient, hessian, total_force, total_position_hessian, DampingEnergy, EnergyParams,
    EnergyReport, Frame, HessianBlocks, HessianVariant,
};
pub use error::{Error, Result};
pub use integrator::{
    mechanical_energy, residual, simulate, step, system_matrix, Discretization, Integrator, IntegratorConfig,
    Scheme, StepStats, Trajectory,
};
pub use fd::{compare, fd_gradient, fd_hessian, fd_jacobian, ComparisonReport, FdConfig, FdHessian, FdScheme};
pub use kinematics::{center_of_mass, covariance_asym, KinematicState, RestShape};
pub use linalg::{hat, hat2, skew2, skew_vec, Dim, Mat3, Vec3};
pub use polar::{polar_decompose, PolarPair};
pub use rotation::{
    omega_first, omega_second, rotation_hessian_contract, rotation_jacobian_apply, s_derivative,
    GSolver, OmegaFirst, SecondOrder,
};
