//! Finite-difference verification suites for every analytic derivative.

use std::fmt;

use nalgebra::DMatrix;

use crate::energy::{EnergyParams, Frame, HessianVariant};
use crate::error::Result;
use crate::fd::{compare, fd_gradient, fd_jacobian, ComparisonReport, FdConfig, DEFAULT_ABS_FLOOR};
use crate::kinematics::{covariance_asym, KinematicState, RestShape};
use crate::linalg::{skew_vec, Dim, Mat3, Vec3};
use crate::polar::polar_decompose;
use crate::rotation::{omega_first, SecondOrder};

pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_TOL: f64 = 1e-6;
pub const HESSIAN_STEP: f64 = 1e-4;
pub const HESSIAN_TOL: f64 = 1e-5;
pub const SYMMETRY_TOL: f64 = 1e-8;
pub const OMEGA_FIRST_STEP: f64 = 1e-5;
pub const OMEGA_FIRST_TOL: f64 = 1e-6;
pub const OMEGA_SECOND_STEP: f64 = 1e-4;
pub const OMEGA_SECOND_TOL: f64 = 1e-5;
pub const DAMPING_FORCE_STEP: f64 = 1e-5;
pub const DAMPING_FORCE_TOL: f64 = 1e-7;
pub const DAMPING_VELOCITY_TOL: f64 = 1e-6;
pub const DAMPING_POSITION_STEP: f64 = 1e-4;
pub const DAMPING_POSITION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Passed,
    Failed,
    /// Not applicable to this configuration (e.g. rotation terms at `gamma = 1`).
    Skipped,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Passed => "pass",
            CheckStatus::Failed => "fail",
            CheckStatus::Skipped => "skipped",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
}

impl CheckResult {
    fn from_report(name: &'static str, report: &ComparisonReport) -> Self {
        CheckResult {
            name,
            max_error: report.max_error,
            tolerance: report.tolerance,
            status: if report.passed {
                CheckStatus::Passed
            } else {
                CheckStatus::Failed
            },
        }
    }

    fn bound(name: &'static str, value: f64, tolerance: f64) -> Self {
        CheckResult {
            name,
            max_error: value,
            tolerance,
            status: if value <= tolerance {
                CheckStatus::Passed
            } else {
                CheckStatus::Failed
            },
        }
    }

    fn skipped(name: &'static str, tolerance: f64) -> Self {
        CheckResult {
            name,
            max_error: f64::NAN,
            tolerance,
            status: CheckStatus::Skipped,
        }
    }
}

/// One line: `name max_error tolerance status`.
impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:e} {:e} {}", self.name, self.max_error, self.tolerance, self.status)
    }
}

/// Options for [`check_derivatives`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckOptions {
    /// Corrupts the second-order rotation solve to prove the suite can fail.
    #[doc(hidden)]
    pub fault: bool,
}

fn floor_for(analytic: &[f64]) -> f64 {
    DEFAULT_ABS_FLOOR * analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

fn compare_scaled(analytic: &[f64], numeric: &[f64], tol: f64) -> Result<ComparisonReport> {
    compare(analytic, numeric, tol, floor_for(analytic))
}

fn flat(points: &[Vec3], dim: Dim) -> Vec<f64> {
    dim.flatten(points)
}

/// Analytic gradient against central differences of the energy.
pub fn check_gradient(shape: &RestShape, state: &KinematicState, params: &EnergyParams) -> Result<ComparisonReport> {
    let dim = shape.dim();
    let frame = Frame::new(shape, *params, &state.positions)?;
    let analytic = flat(&frame.gradient().gradient, dim);
    let numeric = fd_gradient(
        |x| Frame::new(shape, *params, &dim.unflatten(x)).map(|f| f.energy()),
        &flat(&state.positions, dim),
        &FdConfig::central(GRADIENT_STEP),
    )?;
    compare_scaled(&analytic, numeric.as_slice(), GRADIENT_TOL)
}

/// Analytic Hessian against central differences of the analytic gradient,
/// plus the relative asymmetry `|H - H^T| / |H|`.
pub fn check_hessian(
    shape: &RestShape,
    state: &KinematicState,
    params: &EnergyParams,
    fault: bool,
) -> Result<(ComparisonReport, f64)> {
    let dim = shape.dim();
    let frame = Frame::new(shape, *params, &state.positions)?.with_fault(fault);
    let analytic = frame.hessian(HessianVariant::Full)?;
    let numeric = fd_jacobian(
        |x| Frame::new(shape, *params, &dim.unflatten(x)).map(|f| flat(&f.gradient().gradient, dim)),
        &flat(&state.positions, dim),
        &FdConfig::central(HESSIAN_STEP),
    )?;
    let report = compare_scaled(analytic.matrix().as_slice(), numeric.as_slice(), HESSIAN_TOL)?;
    Ok((report, analytic.asymmetry()))
}

fn rotation_of(dim: Dim, shape: &RestShape, x: &[f64]) -> Result<Mat3> {
    let a = covariance_asym(&dim.unflatten(x), shape);
    Ok(*polar_decompose(dim, &a)?.r_mat())
}

/// `hat(w_ij) R` against central differences of the polar rotation.
pub fn check_omega_first(shape: &RestShape, state: &KinematicState) -> Result<ComparisonReport> {
    let dim = shape.dim();
    let d = dim.size();
    let polar = polar_decompose(dim, &covariance_asym(&state.positions, shape))?;
    let omega = omega_first(shape, &polar)?;
    let x = flat(&state.positions, dim);
    let numeric = fd_jacobian(
        |p| {
            let r = rotation_of(dim, shape, p)?;
            Ok((0..d).flat_map(|a| (0..d).map(move |b| r[(a, b)])).collect())
        },
        &x,
        &FdConfig::central(OMEGA_FIRST_STEP),
    )?;
    let mut analytic = DMatrix::zeros(d * d, shape.dof());
    for i in 0..shape.len() {
        for j in 0..d {
            let dr = crate::linalg::hat(omega.get(i, j)) * polar.r_mat();
            for a in 0..d {
                for b in 0..d {
                    analytic[(a * d + b, i * d + j)] = dr[(a, b)];
                }
            }
        }
    }
    compare_scaled(analytic.as_slice(), numeric.as_slice(), OMEGA_FIRST_TOL)
}

/// Every `w_{ls,ij}` against central differences of `w_ij` along `q_ls`.
pub fn check_omega_second(shape: &RestShape, state: &KinematicState, fault: bool) -> Result<ComparisonReport> {
    let dim = shape.dim();
    let d = dim.size();
    let polar = polar_decompose(dim, &covariance_asym(&state.positions, shape))?;
    let omega = omega_first(shape, &polar)?;
    let second = SecondOrder::new(shape, &polar, &omega).with_fault(fault);
    let comps: Vec<usize> = match dim {
        Dim::Two => vec![2],
        Dim::Three => vec![0, 1, 2],
    };
    let table = |p: &[f64]| -> Result<Vec<f64>> {
        let polar = polar_decompose(dim, &covariance_asym(&dim.unflatten(p), shape))?;
        let omega = omega_first(shape, &polar)?;
        let mut out = Vec::with_capacity(shape.dof() * comps.len());
        for i in 0..shape.len() {
            for j in 0..d {
                out.extend(comps.iter().map(|&c| omega.get(i, j)[c]));
            }
        }
        Ok(out)
    };
    let numeric = fd_jacobian(table, &flat(&state.positions, dim), &FdConfig::central(OMEGA_SECOND_STEP))?;
    let mut analytic = DMatrix::zeros(numeric.nrows(), numeric.ncols());
    for l in 0..shape.len() {
        for s in 0..d {
            for i in 0..shape.len() {
                for j in 0..d {
                    let w = second.omega((l, s), (i, j));
                    for (k, &c) in comps.iter().enumerate() {
                        analytic[((i * d + j) * comps.len() + k, l * d + s)] = w[c];
                    }
                }
            }
        }
    }
    compare_scaled(analytic.as_slice(), numeric.as_slice(), OMEGA_SECOND_TOL)
}

/// Largest `|w_{ls,ij} - w_{ij,ls}|` relative to the largest `|w_{ls,ij}|`.
pub fn exchange_asymmetry(shape: &RestShape, state: &KinematicState) -> Result<f64> {
    let dim = shape.dim();
    let d = dim.size();
    let polar = polar_decompose(dim, &covariance_asym(&state.positions, shape))?;
    let omega = omega_first(shape, &polar)?;
    let second = SecondOrder::new(shape, &polar, &omega);
    let coords: Vec<(usize, usize)> = (0..shape.len()).flat_map(|i| (0..d).map(move |j| (i, j))).collect();
    let (mut diff, mut size) = (0.0f64, 0.0f64);
    for &a in &coords {
        for &b in &coords {
            let wab = second.omega(a, b);
            diff = diff.max((wab - second.omega(b, a)).amax());
            size = size.max(wab.amax());
        }
    }
    Ok(if size == 0.0 { 0.0 } else { diff / size })
}

/// Planar only: `w_ij = rhs / tr(S)` against a general LU solve with the
/// embedded `G`, as the largest relative difference.
pub fn planar_closed_form_error(shape: &RestShape, state: &KinematicState) -> Result<f64> {
    let dim = shape.dim();
    let polar = polar_decompose(dim, &covariance_asym(&state.positions, shape))?;
    let omega = omega_first(shape, &polar)?;
    let lu = polar.g_mat().lu();
    let mut worst = 0.0f64;
    for i in 0..shape.len() {
        let mu = shape.masses()[i] / shape.total_mass();
        for j in 0..dim.size() {
            let da = Vec3::ith(j, mu) * shape.rest_positions()[i].transpose();
            let rhs = skew_vec(&(polar.r_mat().transpose() * da)) * 2.0;
            let generic = lu.solve(&rhs).unwrap_or_else(|| Vec3::repeat(f64::NAN));
            let closed = omega.get(i, j);
            let err = (generic - closed).amax() / closed.amax().max(f64::MIN_POSITIVE);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    Ok(worst)
}

/// Damping force against central differences of `V_d` in the velocities.
pub fn check_damping_force(shape: &RestShape, state: &KinematicState, params: &EnergyParams) -> Result<ComparisonReport> {
    let dim = shape.dim();
    let frame = Frame::new(shape, *params, &state.positions)?;
    let analytic = flat(&frame.damping_force(&state.velocities), dim);
    let numeric = fd_gradient(
        |v| Ok(frame.damping_energy(&dim.unflatten(v)).total),
        &flat(&state.velocities, dim),
        &FdConfig::central(DAMPING_FORCE_STEP),
    )?;
    compare_scaled(&analytic, numeric.as_slice(), DAMPING_FORCE_TOL)
}

/// Velocity Hessian against central differences of the damping force, and
/// its smallest eigenvalue relative to its largest.
pub fn check_damping_velocity_hessian(
    shape: &RestShape,
    state: &KinematicState,
    params: &EnergyParams,
) -> Result<(ComparisonReport, f64)> {
    let dim = shape.dim();
    let frame = Frame::new(shape, *params, &state.positions)?;
    let analytic = frame.damping_velocity_hessian()?;
    let numeric = fd_jacobian(
        |v| Ok(flat(&frame.damping_force(&dim.unflatten(v)), dim)),
        &flat(&state.velocities, dim),
        &FdConfig::central(DAMPING_FORCE_STEP),
    )?;
    let report = compare_scaled(analytic.matrix().as_slice(), numeric.as_slice(), DAMPING_VELOCITY_TOL)?;
    let (min, max) = analytic.extreme_eigenvalues();
    let relative_min = if max > 0.0 { min / max } else { min };
    Ok((report, relative_min))
}

/// Mixed damping Hessian against central differences of the damping force in positions.
pub fn check_damping_position_hessian(
    shape: &RestShape,
    state: &KinematicState,
    params: &EnergyParams,
    fault: bool,
) -> Result<ComparisonReport> {
    let dim = shape.dim();
    let frame = Frame::new(shape, *params, &state.positions)?.with_fault(fault);
    let analytic = frame.damping_position_hessian(&state.velocities)?;
    let numeric = fd_jacobian(
        |x| Frame::new(shape, *params, &dim.unflatten(x)).map(|f| flat(&f.damping_force(&state.velocities), dim)),
        &flat(&state.positions, dim),
        &FdConfig::central(DAMPING_POSITION_STEP),
    )?;
    compare_scaled(analytic.matrix().as_slice(), numeric.as_slice(), DAMPING_POSITION_TOL)
}

/// Results of a full derivative suite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckSuite {
    pub results: Vec<CheckResult>,
}

impl CheckSuite {
    /// True when nothing failed; skipped checks do not count as failures.
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.status != CheckStatus::Failed)
    }

    fn extend(&mut self, other: CheckSuite) {
        self.results.extend(other.results);
    }
}

impl fmt::Display for CheckSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

/// Runs every derivative comparison on one state. Rotation-branch checks are
/// reported as skipped when `gamma == 1`.
pub fn check_derivatives(
    shape: &RestShape,
    state: &KinematicState,
    params: &EnergyParams,
    options: CheckOptions,
) -> Result<CheckSuite> {
    state.validate(shape)?;
    params.validate()?;
    let rotation = params.has_rotation_branch();
    let mut out = Vec::new();

    out.push(CheckResult::from_report("gradient", &check_gradient(shape, state, params)?));
    let (hess, asym) = check_hessian(shape, state, params, options.fault)?;
    out.push(CheckResult::from_report("hessian", &hess));
    out.push(CheckResult::bound("hessian_symmetry", asym, SYMMETRY_TOL));

    if rotation {
        out.push(CheckResult::from_report("omega_first", &check_omega_first(shape, state)?));
        out.push(CheckResult::from_report(
            "omega_second",
            &check_omega_second(shape, state, options.fault)?,
        ));
    } else {
        out.push(CheckResult::skipped("omega_first", OMEGA_FIRST_TOL));
        out.push(CheckResult::skipped("omega_second", OMEGA_SECOND_TOL));
    }

    out.push(CheckResult::from_report(
        "damping_force",
        &check_damping_force(shape, state, params)?,
    ));
    let (vh, min_eig) = check_damping_velocity_hessian(shape, state, params)?;
    out.push(CheckResult::from_report("damping_velocity_hessian", &vh));
    out.push(CheckResult::bound("damping_velocity_psd", (-min_eig).max(0.0), 1e-10));
    if rotation && params.alpha > 0.0 {
        out.push(CheckResult::from_report(
            "damping_position_hessian",
            &check_damping_position_hessian(shape, state, params, options.fault)?,
        ));
    } else {
        out.push(CheckResult::skipped("damping_position_hessian", DAMPING_POSITION_TOL));
    }
    Ok(CheckSuite { results: out })
}

/// [`check_derivatives`] over several states, concatenated.
pub fn check_many<'a, I>(shape: &RestShape, states: I, params: &EnergyParams, options: CheckOptions) -> Result<CheckSuite>
where
    I: IntoIterator<Item = &'a KinematicState>,
{
    let mut suite = CheckSuite::default();
    for s in states {
        suite.extend(check_derivatives(shape, s, params, options)?);
    }
    Ok(suite)
}
