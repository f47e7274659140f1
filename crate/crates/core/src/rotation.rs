//! First- and second-order derivatives of the polar rotation with respect to
//! particle coordinates.
//!
//! Conventions: `q_ij` is coordinate `j` of particle `i`, and
//! `dR/dq_ij = hat(w_ij) R` (world-frame, left-multiplied). The coefficients
//! solve `G w_ij = 2 skew(R^T dA_a/dq_ij)` with `G = (tr(S) I - S) R^T` and
//! `dA_a/dq_ij = (m_i/M) e_j q0_i^T`. The second-order coefficient
//! `w_{ls,ij}` is the derivative of `w_ij` along `q_ls`, so
//! `d2R/dq_ls dq_ij = (hat(w_{ls,ij}) + hat(w_ij) hat(w_ls)) R`.
//!
//! `w_{ls,ij}` is not symmetric under exchange of the index pairs in 3D:
//! equality of mixed partials of `R` gives
//! `w_{ls,ij} - w_{ij,ls} = w_ls x w_ij`, which vanishes only in the plane.

use nalgebra::{LU, U3};

use crate::error::{Error, Result};
use crate::kinematics::RestShape;
use crate::linalg::{hat, skew_vec, Dim, Mat3, Vec3};
use crate::polar::PolarPair;

/// `G` is rejected when its pivot ratio exceeds this.
pub const MAX_G_CONDITION: f64 = 1e12;

/// A `(particle, axis)` pair indexing one scalar coordinate.
pub type Coord = (usize, usize);

/// Factorization of `G`, computed once per state and reused for every solve.
#[derive(Debug, Clone)]
pub struct GSolver {
    dim: Dim,
    lu: Option<LU<f64, U3, U3>>,
    trace: f64,
    condition: f64,
}

impl GSolver {
    pub fn new(polar: &PolarPair) -> Result<Self> {
        let dim = polar.dim();
        let trace = polar.trace_s();
        match dim {
            // G^-1 = tr(S)^-1 on planar rotation coefficients.
            Dim::Two => {
                if trace <= 0.0 || !trace.is_finite() {
                    return Err(Error::SingularG {
                        condition: f64::INFINITY,
                    });
                }
                Ok(GSolver {
                    dim,
                    lu: None,
                    trace,
                    condition: 1.0,
                })
            }
            Dim::Three => {
                let lu = polar.g_mat().lu();
                let diag = lu.u().diagonal().map(f64::abs);
                let condition = if diag.min() > 0.0 {
                    diag.max() / diag.min()
                } else {
                    f64::INFINITY
                };
                if condition.is_nan() || condition > MAX_G_CONDITION {
                    return Err(Error::SingularG { condition });
                }
                Ok(GSolver {
                    dim,
                    lu: Some(lu),
                    trace,
                    condition,
                })
            }
        }
    }

    /// Pivot-ratio condition estimate of `G`.
    #[inline]
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Solves `G w = rhs`. In 2D only the z-component is meaningful.
    #[inline]
    pub fn solve(&self, rhs: &Vec3) -> Vec3 {
        match &self.lu {
            Some(lu) => lu.solve(rhs).expect("G factorization checked at construction"),
            None => Vec3::new(0.0, 0.0, rhs.z / self.trace),
        }
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }
}

/// All first-order rotation coefficients `w_ij` of one state.
#[derive(Debug, Clone)]
pub struct OmegaFirst {
    dim: Dim,
    table: Vec<Vec3>,
    solver: GSolver,
}

impl OmegaFirst {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &Vec3 {
        &self.table[i * self.dim.size() + j]
    }

    /// Number of particles.
    #[inline]
    pub fn len(&self) -> usize {
        self.table.len() / self.dim.size()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    #[inline]
    pub fn solver(&self) -> &GSolver {
        &self.solver
    }

    /// The matrix whose column `j` is `w_ij`, so that for a displacement `u`
    /// of particle `i` the rotation rate is `columns(i) * u`.
    pub fn columns(&self, i: usize) -> Mat3 {
        let mut m = Mat3::zeros();
        for j in 0..self.dim.size() {
            m.set_column(j, self.get(i, j));
        }
        m
    }

    /// Rotation rate `sum_ij u_ij w_ij` of a velocity or displacement field.
    pub fn rate(&self, field: &[Vec3]) -> Vec3 {
        field
            .iter()
            .enumerate()
            .fold(Vec3::zeros(), |acc, (i, u)| acc + self.columns(i) * u)
    }
}

/// `2 skew(R^T c)` where `c` is a rate of change of `A_a`.
#[inline]
fn first_order_rhs(polar: &PolarPair, da: &Mat3) -> Vec3 {
    skew_vec(&(polar.r_mat().transpose() * da)) * 2.0
}

/// Solves for every `w_ij` of the current state.
pub fn omega_first(shape: &RestShape, polar: &PolarPair) -> Result<OmegaFirst> {
    let dim = shape.dim();
    let solver = GSolver::new(polar)?;
    let mut table = Vec::with_capacity(shape.dof());
    for (i, q0) in shape.rest_positions().iter().enumerate() {
        let mu = shape.masses()[i] / shape.total_mass();
        for j in 0..dim.size() {
            let da = Vec3::ith(j, mu) * q0.transpose();
            table.push(solver.solve(&first_order_rhs(polar, &da)));
        }
    }
    Ok(OmegaFirst { dim, table, solver })
}

/// `d(R q0)/dq_i`: column `j` is `hat(w_ij) R q0`.
pub fn rotation_jacobian_apply(omega: &OmegaFirst, polar: &PolarPair, q0: &Vec3, i: usize) -> Mat3 {
    let y = polar.r_mat() * q0;
    let mut m = Mat3::zeros();
    for j in 0..omega.dim.size() {
        m.set_column(j, &omega.get(i, j).cross(&y));
    }
    m
}

/// `dS/dq_ls = R^T ((m_l/M) e_s q0_l^T - hat(w_ls) R S)`.
pub fn s_derivative(
    shape: &RestShape,
    polar: &PolarPair,
    omega: &OmegaFirst,
    l: usize,
    s: usize,
) -> Mat3 {
    let mu = shape.masses()[l] / shape.total_mass();
    let da = Vec3::ith(s, mu) * shape.rest_positions()[l].transpose();
    let r = polar.r_mat();
    r.transpose() * (da - hat(omega.get(l, s)) * r * polar.s_mat())
}

/// Right-hand side of the second-order solve for a first-order direction with
/// covariance rate `da` and rotation rate `w`, differentiated along `q_ls`.
fn second_order_rhs(
    polar: &PolarPair,
    w_ls: &Vec3,
    ds_ls: &Mat3,
    da: &Mat3,
    w: &Vec3,
    flip_trace_term: bool,
) -> Vec3 {
    let r = polar.r_mat();
    let hat_ls = hat(w_ls);
    let mut rhs = -skew_vec(&(r.transpose() * hat_ls * da)) * 2.0;
    let trace_term = (Mat3::identity() * ds_ls.trace() - ds_ls) * r.transpose() * w;
    if flip_trace_term {
        rhs += trace_term;
    } else {
        rhs -= trace_term;
    }
    if polar.dim() == Dim::Three {
        let s = polar.s_mat();
        rhs += (Mat3::identity() * s.trace() - s) * r.transpose() * (hat_ls * w);
    }
    rhs
}

/// `w_{ls,ij}`, the derivative of `w_ij` along `q_ls`.
pub fn omega_second(
    shape: &RestShape,
    polar: &PolarPair,
    omega: &OmegaFirst,
    ls: Coord,
    ij: Coord,
) -> Vec3 {
    let ds = s_derivative(shape, polar, omega, ls.0, ls.1);
    let (i, j) = ij;
    let mu = shape.masses()[i] / shape.total_mass();
    let da = Vec3::ith(j, mu) * shape.rest_positions()[i].transpose();
    let rhs = second_order_rhs(polar, omega.get(ls.0, ls.1), &ds, &da, omega.get(i, j), false);
    omega.solver.solve(&rhs)
}

/// `(d2(R q0)/dq_l dq_i)^T v`: entry `(a, b)` is
/// `q0^T R^T (hat(w_lb) hat(w_ia) - hat(w_{lb,ia})) v`.
pub fn rotation_hessian_contract(
    polar: &PolarPair,
    omega: &OmegaFirst,
    shape: &RestShape,
    l: usize,
    i: usize,
    q0: &Vec3,
    v: &Vec3,
) -> Mat3 {
    let d = shape.dim().size();
    let y = polar.r_mat() * q0;
    let mut out = Mat3::zeros();
    for a in 0..d {
        for b in 0..d {
            let w2 = omega_second(shape, polar, omega, (l, b), (i, a));
            let m = hat(omega.get(l, b)) * hat(omega.get(i, a)) - hat(&w2);
            out[(a, b)] = y.dot(&(m * v));
        }
    }
    out
}

/// Per-state cache for assembling many second-order blocks: holds `dS/dq_ls`
/// for every coordinate so each `w_{ls,ij}` costs one solve.
#[derive(Debug, Clone)]
pub struct SecondOrder<'a> {
    shape: &'a RestShape,
    polar: &'a PolarPair,
    omega: &'a OmegaFirst,
    ds: Vec<Mat3>,
    flip_trace_term: bool,
}

impl<'a> SecondOrder<'a> {
    pub fn new(shape: &'a RestShape, polar: &'a PolarPair, omega: &'a OmegaFirst) -> Self {
        let d = shape.dim().size();
        let ds = (0..shape.len())
            .flat_map(|l| (0..d).map(move |s| (l, s)))
            .map(|(l, s)| s_derivative(shape, polar, omega, l, s))
            .collect();
        SecondOrder {
            shape,
            polar,
            omega,
            ds,
            flip_trace_term: false,
        }
    }

    /// Test hook: flips the sign of the `tr(dS) I - dS` term of the
    /// second-order solve so derivative checks can be shown to fail.
    #[doc(hidden)]
    pub fn with_fault(mut self, flip: bool) -> Self {
        self.flip_trace_term = flip;
        self
    }

    #[inline]
    fn ds(&self, ls: Coord) -> &Mat3 {
        &self.ds[ls.0 * self.shape.dim().size() + ls.1]
    }

    /// `w_{ls,ij}`.
    pub fn omega(&self, ls: Coord, ij: Coord) -> Vec3 {
        let (i, j) = ij;
        let mu = self.shape.masses()[i] / self.shape.total_mass();
        let da = Vec3::ith(j, mu) * self.shape.rest_positions()[i].transpose();
        self.directional(ls, &da, self.omega.get(i, j))
    }

    /// Derivative along `q_ls` of the rotation rate of a fixed field `u`,
    /// given its covariance rate `da = sum_i (m_i/M) u_i q0_i^T` and rotation
    /// rate `w = sum_ij u_ij w_ij`.
    pub fn directional(&self, ls: Coord, da: &Mat3, w: &Vec3) -> Vec3 {
        let rhs = second_order_rhs(
            self.polar,
            self.omega.get(ls.0, ls.1),
            self.ds(ls),
            da,
            w,
            self.flip_trace_term,
        );
        self.omega.solver.solve(&rhs)
    }

    /// `sum_r k_r (d2(R q0_r)/dq_l dq_i)^T v_r` for the moment
    /// `moment = sum_r k_r (R q0_r) v_r^T`: entry `(a, b)` is `tr(X W)` with
    /// `X = hat(w_{lb,ia}) + hat(w_ia) hat(w_lb)`.
    pub fn contract_moment(&self, l: usize, i: usize, moment: &Mat3) -> Mat3 {
        let d = self.shape.dim().size();
        let mut out = Mat3::zeros();
        for a in 0..d {
            let hat_ia = hat(self.omega.get(i, a));
            for b in 0..d {
                let x = hat(&self.omega((l, b), (i, a))) + hat_ia * hat(self.omega.get(l, b));
                out[(a, b)] = (x * moment).trace();
            }
        }
        out
    }
}
