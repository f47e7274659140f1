//! Seeded procedural clouds and deformed states for tests, checks and demos.

use nalgebra::{Rotation3, Unit, UnitQuaternion};
use rand::Rng;

use crate::kinematics::{covariance_asym, KinematicState, RestShape};
use crate::linalg::{Dim, Mat3, Vec3};
use crate::polar::polar_decompose;

/// Rest clouds with a covariance condition number above this are redrawn.
const MAX_SAMPLED_CONDITION: f64 = 30.0;

fn uniform_point<R: Rng>(rng: &mut R, dim: Dim, half_width: f64) -> Vec3 {
    let mut p = Vec3::zeros();
    for a in 0..dim.size() {
        p[a] = rng.random_range(-half_width..half_width);
    }
    p
}

/// A uniformly distributed proper rotation (about z in 2D).
pub fn random_rotation<R: Rng>(rng: &mut R, dim: Dim) -> Mat3 {
    match dim {
        Dim::Two => {
            let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            Rotation3::from_axis_angle(&Vec3::z_axis(), angle).into_inner()
        }
        Dim::Three => loop {
            let v = nalgebra::Vector4::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(v / n));
                break q.to_rotation_matrix().into_inner();
            }
        },
    }
}

/// Rotation about a fixed axis, convenient for hand-built scenes.
pub fn axis_rotation(axis: Vec3, angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

/// `n` points in `[-1, 1]^d` with masses and stiffness in `[0.5, 2]`.
///
/// Clouds whose rest covariance is poorly conditioned are redrawn, so the
/// result is always a usable shape.
pub fn random_cloud<R: Rng>(rng: &mut R, dim: Dim, n: usize) -> RestShape {
    assert!(n > dim.size(), "need at least d + 1 particles");
    loop {
        let pts: Vec<Vec3> = (0..n).map(|_| uniform_point(rng, dim, 1.0)).collect();
        let masses: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let stiffness: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let Ok(shape) = RestShape::new(dim, &pts, &masses, &stiffness) else {
            continue;
        };
        let cond = shape.a_s().norm() * shape.a_s_inv().norm();
        if cond <= MAX_SAMPLED_CONDITION {
            return shape;
        }
    }
}

/// A rigidly moved, linearly deformed and jittered copy of the rest shape with
/// random velocities.
///
/// `amplitude` scales both the affine deformation and the per-particle
/// jitter. The returned configuration keeps the polar decomposition well
/// away from inversion (smallest stretch at least 0.3).
pub fn random_state<R: Rng>(rng: &mut R, shape: &RestShape, amplitude: f64) -> KinematicState {
    let dim = shape.dim();
    loop {
        let rot = random_rotation(rng, dim);
        let mut deform = dim.identity();
        for a in 0..dim.size() {
            for b in 0..dim.size() {
                deform[(a, b)] += amplitude * rng.random_range(-1.0..1.0);
            }
        }
        let shift = uniform_point(rng, dim, 2.0);
        let positions: Vec<Vec3> = shape
            .rest_positions()
            .iter()
            .map(|q0| rot * deform * q0 + shift + uniform_point(rng, dim, amplitude))
            .collect();
        let velocities: Vec<Vec3> = (0..shape.len()).map(|_| uniform_point(rng, dim, 1.0)).collect();

        let a = covariance_asym(&positions, shape) * shape.a_s_inv();
        let Ok(polar) = polar_decompose(dim, &a) else {
            continue;
        };
        let s = polar.s_mat();
        let min_stretch = match dim {
            Dim::Two => crate::linalg::block2(s).symmetric_eigenvalues().min(),
            Dim::Three => s.symmetric_eigenvalues().min(),
        };
        if min_stretch >= 0.3 {
            return KinematicState::new(positions, velocities);
        }
    }
}

/// Regular `nx x ny` lattice in the plane with the given spacing, row by row
/// from the bottom.
pub fn grid_2d(nx: usize, ny: usize, spacing: f64) -> Vec<Vec3> {
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| Vec3::new(i as f64 * spacing, j as f64 * spacing, 0.0)))
        .collect()
}
