//! Shape-matching potential, Rayleigh damping and their analytic derivatives.
//!
//! With goal positions `B q0_r + t`, where `B = gamma A_a A_s^-1 + (1 - gamma) R`,
//! the deviations are `d_r = q_r - B q0_r - t` and the potential is
//! `V = 1/2 sum_r k_r |d_r|^2`. Damping uses the velocity deviations
//! `dd_r = sum_j (dd_r/dq_j) v_j` with `V_d = alpha/2 sum_r k_r |dd_r|^2 +
//! beta/2 sum_r m_r |v_r|^2`.
//!
//! Hessians are stored as dense `nd x nd` matrices whose entry
//! `((i, a), (l, b))` is the derivative of force component `(i, a)` with
//! respect to coordinate `(l, b)`; block `H_li` is the `(i, l)` tile.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kinematics::{center_of_mass, covariance_asym, KinematicState, RestShape};
use crate::linalg::{hat, Dim, Mat3, Vec3};
use crate::polar::{polar_decompose, PolarPair};
use crate::rotation::{omega_first, rotation_jacobian_apply, OmegaFirst, SecondOrder};

/// Dense Hessians above this particle count are refused unless the limit is raised.
pub const DEFAULT_MAX_DENSE_PARTICLES: usize = 4096;

/// Blend weight and Rayleigh damping coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    /// Weight of the linear fit `A_a A_s^-1` against the rigid fit `R`.
    pub gamma: f64,
    /// Stiffness-proportional damping (time units).
    pub alpha: f64,
    /// Mass-proportional damping (1/time units).
    pub beta: f64,
}

impl EnergyParams {
    pub fn new(gamma: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = EnergyParams { gamma, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    /// Undamped parameters.
    pub fn undamped(gamma: f64) -> Result<Self> {
        EnergyParams::new(gamma, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", format!("must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("must be non-negative, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", format!("must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }

    /// Whether the rigid (rotation) branch contributes at all.
    #[inline]
    pub fn has_rotation_branch(&self) -> bool {
        self.gamma < 1.0
    }
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            gamma: 0.0,
            alpha: 0.0,
            beta: 0.0,
        }
    }
}

/// Which Hessian of the potential to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianVariant {
    /// Gauss-Newton term plus the second derivative of the rotation.
    #[default]
    Full,
    /// Only `sum_r k_r (dd_r/dq_i)^T (dd_r/dq_l)`.
    GaussNewton,
}

/// Value, gradient and deviations of the potential at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub value: f64,
    pub gradient: Vec<Vec3>,
    pub deviations: Vec<Vec3>,
    pub velocity_deviations: Option<Vec<Vec3>>,
}

/// The three Rayleigh damping pseudo-potentials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingEnergy {
    /// `alpha/2 sum_r k_r |dd_r|^2`.
    pub stiffness: f64,
    /// `beta/2 sum_r m_r |v_r|^2`.
    pub mass: f64,
    pub total: f64,
}

/// An `n x n` grid of `d x d` blocks held as one dense `nd x nd` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    dim: Dim,
    n: usize,
    matrix: DMatrix<f64>,
}

impl HessianBlocks {
    pub fn zeros(dim: Dim, n: usize) -> Self {
        let nd = n * dim.size();
        HessianBlocks {
            dim,
            n,
            matrix: DMatrix::zeros(nd, nd),
        }
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    /// Number of particles.
    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// `H_li`: derivative of the force on particle `i` with respect to `q_l`.
    pub fn block(&self, l: usize, i: usize) -> Mat3 {
        let d = self.dim.size();
        let mut m = Mat3::zeros();
        for a in 0..d {
            for b in 0..d {
                m[(a, b)] = self.matrix[(i * d + a, l * d + b)];
            }
        }
        m
    }

    fn set_block(&mut self, l: usize, i: usize, block: &Mat3) {
        let d = self.dim.size();
        for a in 0..d {
            for b in 0..d {
                self.matrix[(i * d + a, l * d + b)] = block[(a, b)];
            }
        }
    }

    /// `|H - H^T|_F / |H|_F` (zero for the zero matrix).
    pub fn asymmetry(&self) -> f64 {
        let norm = self.matrix.norm();
        if norm == 0.0 {
            0.0
        } else {
            (&self.matrix - self.matrix.transpose()).norm() / norm
        }
    }

    /// Largest entry of `sum_l H_li` over all `i`.
    pub fn block_row_sum_error(&self) -> f64 {
        (0..self.n)
            .map(|i| (0..self.n).fold(Mat3::zeros(), |acc, l| acc + self.block(l, i)).amax())
            .fold(0.0, f64::max)
    }

    /// Smallest and largest eigenvalue of the symmetric part.
    pub fn extreme_eigenvalues(&self) -> (f64, f64) {
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym).eigenvalues;
        (eig.min(), eig.max())
    }
}

struct RotationFrame {
    polar: PolarPair,
    omega: OmegaFirst,
    /// `R q0_r`.
    rotated: Vec<Vec3>,
}

/// Everything derived from one set of positions: center, covariance, polar
/// factors, first-order rotation coefficients and deviations.
///
/// When `gamma == 1` the rotation branch carries zero weight and is not
/// computed, so no polar decomposition is required.
pub struct Frame<'a> {
    shape: &'a RestShape,
    params: EnergyParams,
    center: Vec3,
    a_a: Mat3,
    deviations: Vec<Vec3>,
    rotation: Option<RotationFrame>,
    max_dense_particles: usize,
    fault: bool,
}

impl<'a> Frame<'a> {
    pub fn new(shape: &'a RestShape, params: EnergyParams, positions: &[Vec3]) -> Result<Self> {
        params.validate()?;
        if positions.len() != shape.len() {
            return Err(Error::DimensionMismatch {
                what: "positions",
                expected: shape.len(),
                found: positions.len(),
            });
        }
        let a_a = covariance_asym(positions, shape);
        let rotation = if params.has_rotation_branch() {
            let polar = polar_decompose(shape.dim(), &a_a)?;
            let omega = omega_first(shape, &polar)?;
            let rotated = shape.rest_positions().iter().map(|q0| polar.r_mat() * q0).collect();
            Some(RotationFrame {
                polar,
                omega,
                rotated,
            })
        } else {
            None
        };
        let center = center_of_mass(positions, shape);
        let deviations = compute_deviations(
            positions,
            shape,
            &params,
            &center,
            &a_a,
            rotation.as_ref().map(|r| &r.polar),
        );
        Ok(Frame {
            shape,
            params,
            center,
            a_a,
            deviations,
            rotation,
            max_dense_particles: DEFAULT_MAX_DENSE_PARTICLES,
            fault: false,
        })
    }

    /// Raises or lowers the particle-count limit for dense Hessians.
    pub fn with_capacity_limit(mut self, max_particles: usize) -> Self {
        self.max_dense_particles = max_particles;
        self
    }

    /// Test hook: corrupts the second-order rotation solve (sign of its
    /// `tr(dS) I - dS` term) so that derivative checks can be seen to fail.
    #[doc(hidden)]
    pub fn with_fault(mut self, fault: bool) -> Self {
        self.fault = fault;
        self
    }

    #[inline]
    pub fn shape(&self) -> &RestShape {
        self.shape
    }

    #[inline]
    pub fn params(&self) -> &EnergyParams {
        &self.params
    }

    #[inline]
    pub fn center(&self) -> &Vec3 {
        &self.center
    }

    #[inline]
    pub fn covariance(&self) -> &Mat3 {
        &self.a_a
    }

    #[inline]
    pub fn polar(&self) -> Option<&PolarPair> {
        self.rotation.as_ref().map(|r| &r.polar)
    }

    #[inline]
    pub fn omega(&self) -> Option<&OmegaFirst> {
        self.rotation.as_ref().map(|r| &r.omega)
    }

    #[inline]
    pub fn deviations(&self) -> &[Vec3] {
        &self.deviations
    }

    /// `V = 1/2 sum_r k_r |d_r|^2`.
    pub fn energy(&self) -> f64 {
        0.5 * self
            .deviations
            .iter()
            .zip(self.shape.stiffness())
            .map(|(d, k)| k * d.norm_squared())
            .sum::<f64>()
    }

    #[inline]
    fn mu(&self, i: usize) -> f64 {
        self.shape.masses()[i] / self.shape.total_mass()
    }

    /// Scalar part of `dd_r/dq_i`: `delta_ri - mu_i - gamma mu_i q0_i^T A_s^-1 q0_r`.
    fn scalar_coefficient(&self, r: usize, i: usize) -> f64 {
        let q0 = self.shape.rest_positions();
        let delta = if r == i { 1.0 } else { 0.0 };
        let mu = self.mu(i);
        delta - mu - self.params.gamma * mu * q0[i].dot(&(self.shape.a_s_inv() * q0[r]))
    }

    /// `dd_r/dq_i`.
    pub fn deviation_jacobian(&self, r: usize, i: usize) -> Mat3 {
        let mut jac = self.shape.dim().identity() * self.scalar_coefficient(r, i);
        if let Some(rot) = &self.rotation {
            let q0 = &self.shape.rest_positions()[r];
            jac -= rotation_jacobian_apply(&rot.omega, &rot.polar, q0, i) * (1.0 - self.params.gamma);
        }
        jac
    }

    /// `dd_r = sum_i (dd_r/dq_i) u_i` for a velocity field `u`.
    pub fn velocity_deviations(&self, velocities: &[Vec3]) -> Vec<Vec3> {
        let shape = self.shape;
        let gamma = self.params.gamma;
        let mean = center_of_mass(velocities, shape);
        let rate = covariance_rate(velocities, shape);
        let linear = rate * shape.a_s_inv() * gamma;
        let spin = self.omega().map(|o| o.rate(velocities));
        (0..shape.len())
            .map(|r| {
                let q0 = &shape.rest_positions()[r];
                let mut dd = velocities[r] - mean - linear * q0;
                if let (Some(w), Some(rot)) = (&spin, &self.rotation) {
                    dd -= w.cross(&rot.rotated[r]) * (1.0 - gamma);
                }
                dd
            })
            .collect()
    }

    /// `sum_r (dd_r/dq_i)^T f_r` for every `i`.
    pub fn apply_jacobian_transpose(&self, field: &[Vec3]) -> Vec<Vec3> {
        let shape = self.shape;
        let gamma = self.params.gamma;
        let dim = shape.dim();
        let sum = field.iter().fold(Vec3::zeros(), |acc, f| acc + f);
        let moment = field
            .iter()
            .zip(shape.rest_positions())
            .fold(Mat3::zeros(), |acc, (f, q0)| acc + f * q0.transpose())
            * shape.a_s_inv();
        let torque = self.rotation.as_ref().map(|rot| {
            rot.rotated
                .iter()
                .zip(field)
                .fold(Vec3::zeros(), |acc, (y, f)| acc + y.cross(f))
        });
        (0..shape.len())
            .map(|i| {
                let mu = self.mu(i);
                let mut g = field[i] - sum * mu - moment * shape.rest_positions()[i] * (gamma * mu);
                if let (Some(tau), Some(omega)) = (&torque, self.omega()) {
                    g -= omega.columns(i).transpose() * tau * (1.0 - gamma);
                }
                project(dim, g)
            })
            .collect()
    }

    /// Per-particle `k_r d_r`.
    fn weighted(&self, field: &[Vec3]) -> Vec<Vec3> {
        field.iter().zip(self.shape.stiffness()).map(|(f, k)| f * *k).collect()
    }

    /// Value, deviations and gradient of the potential.
    pub fn gradient(&self) -> EnergyReport {
        EnergyReport {
            value: self.energy(),
            gradient: self.apply_jacobian_transpose(&self.weighted(&self.deviations)),
            deviations: self.deviations.clone(),
            velocity_deviations: None,
        }
    }

    pub fn damping_energy(&self, velocities: &[Vec3]) -> DampingEnergy {
        let dd = self.velocity_deviations(velocities);
        let stiffness = 0.5
            * self.params.alpha
            * dd.iter()
                .zip(self.shape.stiffness())
                .map(|(d, k)| k * d.norm_squared())
                .sum::<f64>();
        let mass = 0.5
            * self.params.beta
            * velocities
                .iter()
                .zip(self.shape.masses())
                .map(|(v, m)| m * v.norm_squared())
                .sum::<f64>();
        DampingEnergy {
            stiffness,
            mass,
            total: stiffness + mass,
        }
    }

    /// `dV_d/dv_i = beta m_i v_i + alpha sum_r k_r (dd_r/dq_i)^T dd_r`.
    pub fn damping_force(&self, velocities: &[Vec3]) -> Vec<Vec3> {
        let dd = self.velocity_deviations(velocities);
        let jt = self.apply_jacobian_transpose(&self.weighted(&dd));
        jt.iter()
            .zip(velocities)
            .zip(self.shape.masses())
            .map(|((g, v), m)| v * (self.params.beta * m) + g * self.params.alpha)
            .collect()
    }

    /// `beta m_i v_i + sum_r k_r (dd_r/dq_i)^T (d_r + alpha dd_r)`.
    pub fn total_force(&self, velocities: &[Vec3]) -> Vec<Vec3> {
        let dd = self.velocity_deviations(velocities);
        let combined: Vec<Vec3> = self
            .deviations
            .iter()
            .zip(&dd)
            .zip(self.shape.stiffness())
            .map(|((d, v), k)| (d + v * self.params.alpha) * *k)
            .collect();
        self.apply_jacobian_transpose(&combined)
            .iter()
            .zip(velocities)
            .zip(self.shape.masses())
            .map(|((g, v), m)| g + v * (self.params.beta * m))
            .collect()
    }

    fn check_capacity(&self) -> Result<()> {
        if self.shape.len() > self.max_dense_particles {
            return Err(Error::CapacityExceeded {
                particles: self.shape.len(),
                limit: self.max_dense_particles,
            });
        }
        Ok(())
    }

    fn jacobian_table(&self) -> Vec<Mat3> {
        let n = self.shape.len();
        let mut table = Vec::with_capacity(n * n);
        for r in 0..n {
            for i in 0..n {
                table.push(self.deviation_jacobian(r, i));
            }
        }
        table
    }

    /// `sum_r k_r (dd_r/dq_i)^T X_rl` for every `(l, i)` with `X_rl` given by `right(r, l)`.
    fn gram<F>(&self, jac: &[Mat3], right: F) -> HessianBlocks
    where
        F: Fn(usize, usize) -> Mat3,
    {
        let n = self.shape.len();
        let mut out = HessianBlocks::zeros(self.shape.dim(), n);
        for l in 0..n {
            for i in 0..n {
                let mut block = Mat3::zeros();
                for r in 0..n {
                    block += jac[r * n + i].transpose() * right(r, l) * self.shape.stiffness()[r];
                }
                out.set_block(l, i, &block);
            }
        }
        out
    }

    /// `sum_r k_r (dd_r/dq_i)^T (dd_r/dq_l)`.
    fn gauss_newton(&self, jac: &[Mat3]) -> HessianBlocks {
        let n = self.shape.len();
        self.gram(jac, |r, l| jac[r * n + l])
    }

    fn second_order(&self) -> Option<SecondOrder<'_>> {
        self.rotation
            .as_ref()
            .map(|rot| SecondOrder::new(self.shape, &rot.polar, &rot.omega).with_fault(self.fault))
    }

    /// `sum_r k_r R q0_r f_r^T`.
    fn rotated_moment(&self, field: &[Vec3]) -> Mat3 {
        let rot = self.rotation.as_ref().expect("rotation branch present");
        rot.rotated
            .iter()
            .zip(field)
            .zip(self.shape.stiffness())
            .fold(Mat3::zeros(), |acc, ((y, f), k)| acc + y * f.transpose() * *k)
    }

    /// Adds `-(1 - gamma) sum_r k_r (d2(R q0_r)/dq_l dq_i)^T f_r` to every block.
    fn add_rotation_curvature(&self, out: &mut HessianBlocks, second: &SecondOrder<'_>, field: &[Vec3], weight: f64) {
        let moment = self.rotated_moment(field);
        let n = self.shape.len();
        let scale = -(1.0 - self.params.gamma) * weight;
        for l in 0..n {
            for i in 0..n {
                let block = out.block(l, i) + second.contract_moment(l, i, &moment) * scale;
                out.set_block(l, i, &block);
            }
        }
    }

    /// Potential Hessian `H_li = sum_r k_r (-(1 - gamma) (d2(R q0_r)/dq_l dq_i)^T d_r +
    /// (dd_r/dq_i)^T (dd_r/dq_l))`.
    pub fn hessian(&self, variant: HessianVariant) -> Result<HessianBlocks> {
        self.check_capacity()?;
        let jac = self.jacobian_table();
        let mut out = self.gauss_newton(&jac);
        if variant == HessianVariant::Full {
            if let Some(second) = self.second_order() {
                self.add_rotation_curvature(&mut out, &second, &self.deviations, 1.0);
            }
        }
        Ok(out)
    }

    /// `beta m_i I delta_li + alpha sum_r k_r (dd_r/dq_i)^T (dd_r/dq_l)`.
    pub fn damping_velocity_hessian(&self) -> Result<HessianBlocks> {
        self.check_capacity()?;
        Ok(self.velocity_hessian_from(&self.jacobian_table()))
    }

    fn velocity_hessian_from(&self, jac: &[Mat3]) -> HessianBlocks {
        let mut out = self.gauss_newton(jac);
        out.matrix *= self.params.alpha;
        let d = self.shape.dim().size();
        for (i, m) in self.shape.masses().iter().enumerate() {
            for a in 0..d {
                out.matrix[(i * d + a, i * d + a)] += self.params.beta * m;
            }
        }
        out
    }

    /// Blocks `Z_lb = hat(dW/dq_lb) + hat(W) hat(w_lb)` for the rotation rate
    /// `W` of `velocities`; column `b` of `d(dd_r)/dq_l` is
    /// `-(1 - gamma) Z_lb R q0_r`.
    fn spin_curvature(&self, second: &SecondOrder<'_>, velocities: &[Vec3]) -> Vec<Mat3> {
        let omega = self.omega().expect("rotation branch present");
        let d = self.shape.dim().size();
        let rate = covariance_rate(velocities, self.shape);
        let spin = omega.rate(velocities);
        let hat_spin = hat(&spin);
        let mut z = Vec::with_capacity(self.shape.dof());
        for l in 0..self.shape.len() {
            for b in 0..d {
                let dspin = second.directional((l, b), &rate, &spin);
                z.push(hat(&dspin) + hat_spin * hat(omega.get(l, b)));
            }
        }
        z
    }

    /// `P_rl` with column `b` equal to `Z_lb R q0_r`.
    fn spin_block(&self, z: &[Mat3], r: usize, l: usize) -> Mat3 {
        let rot = self.rotation.as_ref().expect("rotation branch present");
        let d = self.shape.dim().size();
        let mut p = Mat3::zeros();
        for b in 0..d {
            p.set_column(b, &(z[l * d + b] * rot.rotated[r]));
        }
        p
    }

    /// Mixed derivative `d2 V_d / dq_l dv_i`; generally not symmetric.
    pub fn damping_position_hessian(&self, velocities: &[Vec3]) -> Result<HessianBlocks> {
        self.check_capacity()?;
        let n = self.shape.len();
        let (Some(second), true) = (self.second_order(), self.params.alpha > 0.0) else {
            return Ok(HessianBlocks::zeros(self.shape.dim(), n));
        };
        let jac = self.jacobian_table();
        let z = self.spin_curvature(&second, velocities);
        let scale = -self.params.alpha * (1.0 - self.params.gamma);
        let mut out = self.gram(&jac, |r, l| self.spin_block(&z, r, l) * scale);
        let dd = self.velocity_deviations(velocities);
        self.add_rotation_curvature(&mut out, &second, &dd, self.params.alpha);
        Ok(out)
    }

    /// Fused positional Hessian of `V + V_d`:
    /// `sum_r k_r (-(1 - gamma) (d2(R q0_r)/dq_l dq_i)^T (d_r + alpha dd_r) +
    /// (dd_r/dq_i)^T (dd_r/dq_l - (1 - gamma) alpha P_rl))`.
    ///
    /// The Gauss-Newton variant keeps only `(dd_r/dq_i)^T (dd_r/dq_l)`.
    pub fn total_position_hessian(&self, velocities: &[Vec3], variant: HessianVariant) -> Result<HessianBlocks> {
        self.check_capacity()?;
        Ok(self.position_hessian_from(&self.jacobian_table(), velocities, variant))
    }

    /// Positional and velocity Hessians of `V + V_d` sharing one Jacobian table.
    pub fn implicit_blocks(&self, velocities: &[Vec3], variant: HessianVariant) -> Result<(HessianBlocks, HessianBlocks)> {
        self.check_capacity()?;
        let jac = self.jacobian_table();
        Ok((
            self.position_hessian_from(&jac, velocities, variant),
            self.velocity_hessian_from(&jac),
        ))
    }

    fn position_hessian_from(&self, jac: &[Mat3], velocities: &[Vec3], variant: HessianVariant) -> HessianBlocks {
        let second = match variant {
            HessianVariant::Full => self.second_order(),
            HessianVariant::GaussNewton => None,
        };
        let Some(second) = second else {
            return self.gauss_newton(jac);
        };
        let n = self.shape.len();
        let alpha = self.params.alpha;
        let damp = alpha * (1.0 - self.params.gamma);
        let z = if alpha > 0.0 {
            self.spin_curvature(&second, velocities)
        } else {
            Vec::new()
        };
        let mut out = self.gram(jac, |r, l| {
            let mut x = jac[r * n + l];
            if alpha > 0.0 {
                x -= self.spin_block(&z, r, l) * damp;
            }
            x
        });
        let dd = self.velocity_deviations(velocities);
        let combined: Vec<Vec3> = self.deviations.iter().zip(&dd).map(|(d, v)| d + v * alpha).collect();
        self.add_rotation_curvature(&mut out, &second, &combined, 1.0);
        out
    }
}

fn project(dim: Dim, mut v: Vec3) -> Vec3 {
    if dim == Dim::Two {
        v.z = 0.0;
    }
    v
}

/// `sum_i (m_i/M) u_i q0_i^T`, the rate of `A_a` along the field `u`.
pub(crate) fn covariance_rate(field: &[Vec3], shape: &RestShape) -> Mat3 {
    field
        .iter()
        .zip(shape.rest_positions())
        .zip(shape.masses())
        .fold(Mat3::zeros(), |acc, ((u, q0), m)| acc + u * q0.transpose() * *m)
        / shape.total_mass()
}

fn compute_deviations(
    positions: &[Vec3],
    shape: &RestShape,
    params: &EnergyParams,
    center: &Vec3,
    a_a: &Mat3,
    polar: Option<&PolarPair>,
) -> Vec<Vec3> {
    let mut blend = a_a * shape.a_s_inv() * params.gamma;
    if let Some(p) = polar {
        blend += p.r_mat() * (1.0 - params.gamma);
    }
    positions
        .iter()
        .zip(shape.rest_positions())
        .map(|(q, q0)| q - blend * q0 - center)
        .collect()
}

/// `d_r = q_r - B q0_r - t` for a given polar factorization of `A_a`.
pub fn deviations(
    state: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
    polar: &PolarPair,
) -> Vec<Vec3> {
    let center = center_of_mass(&state.positions, shape);
    let a_a = covariance_asym(&state.positions, shape);
    compute_deviations(&state.positions, shape, params, &center, &a_a, Some(polar))
}

/// `dd_r/dq_i` from explicitly supplied polar factors and rotation coefficients.
pub fn deviation_jacobian(
    shape: &RestShape,
    params: &EnergyParams,
    polar: &PolarPair,
    omega: &OmegaFirst,
    r: usize,
    i: usize,
) -> Mat3 {
    let q0 = shape.rest_positions();
    let mu = shape.masses()[i] / shape.total_mass();
    let delta = if r == i { 1.0 } else { 0.0 };
    let c = delta - mu - params.gamma * mu * q0[i].dot(&(shape.a_s_inv() * q0[r]));
    shape.dim().identity() * c - rotation_jacobian_apply(omega, polar, &q0[r], i) * (1.0 - params.gamma)
}

fn frame<'a>(state: &KinematicState, shape: &'a RestShape, params: &EnergyParams) -> Result<Frame<'a>> {
    state.validate(shape)?;
    Frame::new(shape, *params, &state.positions)
}

/// Shape-matching potential of the state's positions.
pub fn energy(state: &KinematicState, shape: &RestShape, params: &EnergyParams) -> Result<f64> {
    Ok(frame(state, shape, params)?.energy())
}

pub fn gradient(state: &KinematicState, shape: &RestShape, params: &EnergyParams) -> Result<EnergyReport> {
    let f = frame(state, shape, params)?;
    let mut report = f.gradient();
    report.velocity_deviations = Some(f.velocity_deviations(&state.velocities));
    Ok(report)
}

pub fn hessian(
    state: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
    variant: HessianVariant,
) -> Result<HessianBlocks> {
    frame(state, shape, params)?.hessian(variant)
}

pub fn damping_energy(state: &KinematicState, shape: &RestShape, params: &EnergyParams) -> Result<DampingEnergy> {
    Ok(frame(state, shape, params)?.damping_energy(&state.velocities))
}

pub fn damping_force(state: &KinematicState, shape: &RestShape, params: &EnergyParams) -> Result<Vec<Vec3>> {
    Ok(frame(state, shape, params)?.damping_force(&state.velocities))
}

pub fn damping_velocity_hessian(
    state: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
) -> Result<HessianBlocks> {
    frame(state, shape, params)?.damping_velocity_hessian()
}

pub fn damping_position_hessian(
    state: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
) -> Result<HessianBlocks> {
    frame(state, shape, params)?.damping_position_hessian(&state.velocities)
}

pub fn total_force(state: &KinematicState, shape: &RestShape, params: &EnergyParams) -> Result<Vec<Vec3>> {
    Ok(frame(state, shape, params)?.total_force(&state.velocities))
}

pub fn total_position_hessian(
    state: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
    variant: HessianVariant,
) -> Result<HessianBlocks> {
    frame(state, shape, params)?.total_position_hessian(&state.velocities, variant)
}
