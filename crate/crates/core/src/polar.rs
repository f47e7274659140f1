//! Polar decomposition `A = R S` by scaled Newton iteration.

use nalgebra::{Const, SMatrix};

use crate::error::{Error, Result};
use crate::linalg::{block2, embed2, Dim, Mat3};

/// Relative step size at which the Newton iteration is considered converged.
pub const POLAR_TOLERANCE: f64 = 1e-14;
pub const POLAR_MAX_ITERATIONS: usize = 64;
/// `det(A)` must exceed this fraction of `|A|_F^d`.
pub const DET_EPSILON: f64 = 1e-10;

/// Rotation `R`, symmetric factor `S` and the operator `G = (tr(S) I - S) R^T`.
///
/// In planar scenes the matrices are embedded in 3x3 storage: `R` carries a
/// unit `zz` entry, `S` a zero `zz` entry, and the `zz` entry of `G` is
/// `tr(S)`, which is exactly the scalar operator acting on planar rotation
/// coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarPair {
    dim: Dim,
    r_mat: Mat3,
    s_mat: Mat3,
    g_mat: Mat3,
}

impl PolarPair {
    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn r_mat(&self) -> &Mat3 {
        &self.r_mat
    }

    #[inline]
    pub fn s_mat(&self) -> &Mat3 {
        &self.s_mat
    }

    #[inline]
    pub fn g_mat(&self) -> &Mat3 {
        &self.g_mat
    }

    #[cfg(test)]
    pub(crate) fn from_parts(dim: Dim, r_mat: Mat3, s_mat: Mat3) -> Self {
        let g_mat = (Mat3::identity() * s_mat.trace() - s_mat) * r_mat.transpose();
        PolarPair {
            dim,
            r_mat,
            s_mat,
            g_mat,
        }
    }

    /// `tr(S)` over the active block.
    #[inline]
    pub fn trace_s(&self) -> f64 {
        self.s_mat.trace()
    }
}

/// Factors the active `d x d` block of `a` into a proper rotation and a
/// symmetric matrix. Fails when `det(a) <= 1e-10 |a|_F^d`.
pub fn polar_decompose(dim: Dim, a: &Mat3) -> Result<PolarPair> {
    let norm = dim.norm(a);
    let det = dim.det(a);
    let threshold = DET_EPSILON * norm.powi(dim.size() as i32);
    if det.is_nan() || det <= threshold || !norm.is_finite() {
        return Err(Error::InvertedOrDegenerate { det, threshold });
    }

    let (r_mat, s_mat) = match dim {
        Dim::Two => {
            let b = block2(a);
            let r = newton_rotation(&b);
            let s = symmetrize(&(r.transpose() * b));
            (embed2(&r, 1.0), embed2(&s, 0.0))
        }
        Dim::Three => {
            let r = newton_rotation(a);
            (r, symmetrize(&(r.transpose() * a)))
        }
    };
    let trace = s_mat.trace();
    let g_mat = (Mat3::identity() * trace - s_mat) * r_mat.transpose();
    Ok(PolarPair {
        dim,
        r_mat,
        s_mat,
        g_mat,
    })
}

fn symmetrize<const D: usize>(m: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

/// Scaled Newton iteration `X <- (z X + X^-T / z) / 2` (Higham), with
/// Frobenius-norm scaling switched off once the iterates settle.
fn newton_rotation<const D: usize>(a: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D>
where
    Const<D>: nalgebra::DimMin<Const<D>, Output = Const<D>>,
{
    let mut x = *a;
    let mut scaled = true;
    for _ in 0..POLAR_MAX_ITERATIONS {
        let Some(inv) = x.try_inverse() else {
            break;
        };
        let zeta = if scaled {
            (inv.norm() / x.norm()).sqrt()
        } else {
            1.0
        };
        let next = (x * zeta + inv.transpose() / zeta) * 0.5;
        let step = (next - x).norm();
        let size = x.norm();
        x = next;
        if step <= POLAR_TOLERANCE * size {
            break;
        }
        if step < 1e-2 * size {
            scaled = false;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vec3;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn mat3(entries: [f64; 9]) -> Mat3 {
        Mat3::from_row_slice(&entries)
    }

    #[test]
    fn identity_factors_trivially() {
        let p = polar_decompose(Dim::Three, &Mat3::identity()).unwrap();
        assert_eq!(*p.r_mat(), Mat3::identity());
        assert_eq!(*p.s_mat(), Mat3::identity());
        assert_eq!(*p.g_mat(), Mat3::identity() * 2.0);

        let p = polar_decompose(Dim::Two, &Dim::Two.identity()).unwrap();
        assert_eq!(block2(p.r_mat()), block2(&Mat3::identity()));
        assert_eq!(*p.s_mat(), Dim::Two.identity());
        // (d - 1) I on the active block
        assert_eq!(block2(p.g_mat()), block2(&Mat3::identity()));
    }

    #[test]
    fn scaled_planar_rotation() {
        let a = embed2(&nalgebra::Matrix2::new(0.0, -2.0, 2.0, 0.0), 0.0);
        let p = polar_decompose(Dim::Two, &a).unwrap();
        let r = nalgebra::Matrix2::new(0.0, -1.0, 1.0, 0.0);
        assert!((block2(p.r_mat()) - r).amax() < 1e-15);
        assert!((p.s_mat() - Dim::Two.identity() * 2.0).amax() < 1e-15);
        assert!((block2(p.g_mat()) - r.transpose() * 2.0).amax() < 1e-15);
    }

    #[test]
    fn reflection_is_rejected() {
        let a = mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            polar_decompose(Dim::Three, &a),
            Err(Error::InvertedOrDegenerate { .. })
        ));
        let flat = mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(polar_decompose(Dim::Three, &flat).is_err());
        let a2 = embed2(&nalgebra::Matrix2::new(1.0, 0.0, 0.0, -1.0), 0.0);
        assert!(polar_decompose(Dim::Two, &a2).is_err());
    }

    #[test]
    fn matches_eigen_oracle() {
        let a = mat3([1.3, -0.4, 0.2, 0.5, 0.9, -0.3, -0.1, 0.6, 1.1]);
        let p = polar_decompose(Dim::Three, &a).unwrap();
        let eig = SymmetricEigen::new(a.transpose() * a);
        let sqrt = Mat3::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        let s = eig.eigenvectors * sqrt * eig.eigenvectors.transpose();
        let r = a * s.try_inverse().unwrap();
        assert!((p.s_mat() - s).amax() < 1e-9);
        assert!((p.r_mat() - r).amax() < 1e-9);
    }

    #[test]
    fn bitwise_deterministic() {
        let a = mat3([1.3, -0.4, 0.2, 0.5, 0.9, -0.3, -0.1, 0.6, 1.1]);
        let p = polar_decompose(Dim::Three, &a).unwrap();
        let q = polar_decompose(Dim::Three, &a).unwrap();
        assert_eq!(p, q);
    }

    fn arb_positive_matrix() -> impl Strategy<Value = Mat3> {
        proptest::array::uniform9(-1.0..1.0f64).prop_filter_map("needs det > 0.05", |e| {
            let m = Mat3::from_row_slice(&e) + Mat3::identity();
            (m.determinant() > 0.05).then_some(m)
        })
    }

    proptest! {
        #[test]
        fn factors_are_valid(a in arb_positive_matrix()) {
            let p = polar_decompose(Dim::Three, &a).unwrap();
            let r = p.r_mat();
            let s = p.s_mat();
            prop_assert!((r.transpose() * r - Mat3::identity()).amax() < 1e-10);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
            prop_assert!((s - s.transpose()).amax() < 1e-10);
            prop_assert!((r * s - a).norm() <= 1e-8 * a.norm());
            let rta = r.transpose() * a;
            prop_assert!((rta - rta.transpose()).amax() < 1e-9);
            let g = (Mat3::identity() * s.trace() - s) * r.transpose();
            prop_assert_eq!(*p.g_mat(), g);
        }

        #[test]
        fn planar_factors_are_valid(e in proptest::array::uniform4(-0.8..0.8f64)) {
            let b = nalgebra::Matrix2::from_row_slice(&e) + nalgebra::Matrix2::identity();
            prop_assume!(b.determinant() > 0.05);
            let p = polar_decompose(Dim::Two, &embed2(&b, 0.0)).unwrap();
            let r = block2(p.r_mat());
            prop_assert!((r.transpose() * r - nalgebra::Matrix2::identity()).amax() < 1e-10);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
            prop_assert!((r * block2(p.s_mat()) - b).norm() <= 1e-8 * b.norm());
            prop_assert_eq!(p.r_mat()[(2, 2)], 1.0);
            prop_assert_eq!(p.s_mat().column(2).into_owned(), Vec3::zeros());
        }
    }
}
