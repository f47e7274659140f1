//! Small fixed-size matrix helpers shared by every module.
//!
//! Planar problems are embedded in the xy-plane of 3-space: points have a
//! zero z-component, a planar rotation is a rotation about the z-axis, and
//! its rotation coefficient is the z-component of a [`Vec3`]. This keeps one
//! code path for both dimensions while the planar specializations (scalar
//! rotation coefficient, closed-form inverse of `G`) stay explicit.

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Spatial dimension of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    Two,
    Three,
}

impl Dim {
    pub fn from_size(d: usize) -> Result<Self> {
        match d {
            2 => Ok(Dim::Two),
            3 => Ok(Dim::Three),
            _ => Err(Error::invalid("dim", format!("must be 2 or 3, got {d}"))),
        }
    }

    #[inline]
    pub fn size(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    /// Identity on the active subspace (zero `zz` entry in 2D).
    #[inline]
    pub fn identity(self) -> Mat3 {
        match self {
            Dim::Two => Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0),
            Dim::Three => Mat3::identity(),
        }
    }

    /// Builds a point from `d` coordinates.
    pub fn point(self, coords: &[f64]) -> Result<Vec3> {
        if coords.len() != self.size() {
            return Err(Error::DimensionMismatch {
                what: "point",
                expected: self.size(),
                found: coords.len(),
            });
        }
        let mut p = Vec3::zeros();
        p.as_mut_slice()[..coords.len()].copy_from_slice(coords);
        Ok(p)
    }

    /// Whether `v` lies in the active subspace.
    #[inline]
    pub fn contains(self, v: &Vec3) -> bool {
        self == Dim::Three || v.z == 0.0
    }

    /// Flattens points into `n * d` coordinates.
    pub fn flatten(self, points: &[Vec3]) -> Vec<f64> {
        let d = self.size();
        let mut out = Vec::with_capacity(points.len() * d);
        for p in points {
            out.extend_from_slice(&p.as_slice()[..d]);
        }
        out
    }

    /// Inverse of [`Dim::flatten`]. Panics if `flat.len()` is not a multiple of `d`.
    pub fn unflatten(self, flat: &[f64]) -> Vec<Vec3> {
        let d = self.size();
        assert_eq!(flat.len() % d, 0, "flat length must be a multiple of d");
        flat.chunks(d)
            .map(|c| {
                let mut p = Vec3::zeros();
                p.as_mut_slice()[..d].copy_from_slice(c);
                p
            })
            .collect()
    }

    /// Determinant of the active `d x d` block.
    pub fn det(self, m: &Mat3) -> f64 {
        match self {
            Dim::Two => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
            Dim::Three => m.determinant(),
        }
    }

    /// Frobenius norm of the active `d x d` block.
    pub fn norm(self, m: &Mat3) -> f64 {
        match self {
            Dim::Two => block2(m).norm(),
            Dim::Three => m.norm(),
        }
    }
}

/// Cross-product matrix: `hat(w) * x == w.cross(x)`.
#[inline]
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// The vector `w` with `hat(w) == (m - m^T) / 2`.
#[inline]
pub fn skew_vec(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Planar cross-product matrix `[[0, -w], [w, 0]]`.
#[inline]
pub fn hat2(w: f64) -> Matrix2<f64> {
    Matrix2::new(0.0, -w, w, 0.0)
}

/// Planar skew scalar: `w` with `(m - m^T) / 2 == [[0, -w], [w, 0]]`.
#[inline]
pub fn skew2(m: &Matrix2<f64>) -> f64 {
    0.5 * (m[(1, 0)] - m[(0, 1)])
}

#[inline]
pub(crate) fn block2(m: &Mat3) -> Matrix2<f64> {
    m.fixed_view::<2, 2>(0, 0).into_owned()
}

#[inline]
pub(crate) fn embed2(m: &Matrix2<f64>, zz: f64) -> Mat3 {
    Mat3::new(
        m[(0, 0)],
        m[(0, 1)],
        0.0,
        m[(1, 0)],
        m[(1, 1)],
        0.0,
        0.0,
        0.0,
        zz,
    )
}
