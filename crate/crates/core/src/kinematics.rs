//! Rest-shape precomputation and the instantaneous covariance of a point cloud.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::linalg::{block2, embed2, Dim, Mat3, Vec3};

/// Rest condition numbers above this are rejected as degenerate.
pub const MAX_REST_CONDITION: f64 = 1e12;

/// Immutable rest-pose data of a shape-matched point cloud.
///
/// Rest coordinates are stored relative to their center of mass, so
/// `sum_r m_r q0_r == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RestShape {
    dim: Dim,
    rest_positions: Vec<Vec3>,
    masses: Vec<f64>,
    total_mass: f64,
    stiffness: Vec<f64>,
    a_s: Mat3,
    a_s_inv: Mat3,
}

impl RestShape {
    /// Centers `raw_positions` on their center of mass and precomputes the
    /// rest covariance `A_s` and its inverse.
    pub fn new(
        dim: Dim,
        raw_positions: &[Vec3],
        masses: &[f64],
        stiffness: &[f64],
    ) -> Result<Self> {
        let n = raw_positions.len();
        if masses.len() != n {
            return Err(Error::DimensionMismatch {
                what: "masses",
                expected: n,
                found: masses.len(),
            });
        }
        if stiffness.len() != n {
            return Err(Error::DimensionMismatch {
                what: "stiffness",
                expected: n,
                found: stiffness.len(),
            });
        }
        for (r, p) in raw_positions.iter().enumerate() {
            if !p.iter().all(|x| x.is_finite()) || !dim.contains(p) {
                return Err(Error::invalid(
                    format!("rest position {r}"),
                    "must be finite and lie in the active subspace",
                ));
            }
        }
        for (r, &m) in masses.iter().enumerate() {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::invalid(format!("mass {r}"), format!("must be positive, got {m}")));
            }
        }
        for (r, &k) in stiffness.iter().enumerate() {
            if !(k.is_finite() && k >= 0.0) {
                return Err(Error::invalid(
                    format!("stiffness {r}"),
                    format!("must be non-negative, got {k}"),
                ));
            }
        }
        if n < dim.size() + 1 {
            return Err(Error::DegenerateRestShape {
                condition: f64::INFINITY,
            });
        }

        let total_mass: f64 = masses.iter().sum();
        let center = raw_positions
            .iter()
            .zip(masses)
            .fold(Vec3::zeros(), |acc, (p, &m)| acc + p * m)
            / total_mass;
        let rest_positions: Vec<Vec3> = raw_positions.iter().map(|p| p - center).collect();

        let a_s = rest_positions
            .iter()
            .zip(masses)
            .fold(Mat3::zeros(), |acc, (q, &m)| acc + q * q.transpose() * m)
            / total_mass;

        let (condition, a_s_inv) = match dim {
            Dim::Two => {
                let b = block2(&a_s);
                let eig = SymmetricEigen::new(b).eigenvalues;
                let cond = condition_of(eig.as_slice());
                (cond, b.try_inverse().map(|inv| embed2(&inv, 0.0)))
            }
            Dim::Three => {
                let eig = SymmetricEigen::new(a_s).eigenvalues;
                (condition_of(eig.as_slice()), a_s.try_inverse())
            }
        };
        let a_s_inv = match a_s_inv {
            Some(inv) if condition <= MAX_REST_CONDITION => inv,
            _ => return Err(Error::DegenerateRestShape { condition }),
        };

        Ok(RestShape {
            dim,
            rest_positions,
            masses: masses.to_vec(),
            total_mass,
            stiffness: stiffness.to_vec(),
            a_s,
            a_s_inv,
        })
    }

    /// Same as [`RestShape::new`] with unit stiffness on every particle.
    pub fn with_unit_stiffness(dim: Dim, raw_positions: &[Vec3], masses: &[f64]) -> Result<Self> {
        RestShape::new(dim, raw_positions, masses, &vec![1.0; raw_positions.len()])
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rest_positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rest_positions.is_empty()
    }

    /// Number of scalar coordinates, `n * d`.
    #[inline]
    pub fn dof(&self) -> usize {
        self.len() * self.dim.size()
    }

    /// Center-of-mass-relative rest coordinates `q0_r`.
    #[inline]
    pub fn rest_positions(&self) -> &[Vec3] {
        &self.rest_positions
    }

    #[inline]
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    #[inline]
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    #[inline]
    pub fn stiffness(&self) -> &[f64] {
        &self.stiffness
    }

    /// Rest covariance `A_s = (1/M) sum_r m_r q0_r q0_r^T`.
    #[inline]
    pub fn a_s(&self) -> &Mat3 {
        &self.a_s
    }

    #[inline]
    pub fn a_s_inv(&self) -> &Mat3 {
        &self.a_s_inv
    }

    /// Largest distance between the rest center and a rest particle, times two.
    pub fn diameter(&self) -> f64 {
        2.0 * self
            .rest_positions
            .iter()
            .map(|q| q.norm())
            .fold(0.0, f64::max)
    }
}

fn condition_of(eigenvalues: &[f64]) -> f64 {
    let max = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Current positions and velocities of all particles.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl KinematicState {
    pub fn new(positions: Vec<Vec3>, velocities: Vec<Vec3>) -> Self {
        KinematicState {
            positions,
            velocities,
        }
    }

    /// Positions with zero velocities.
    pub fn at_rest(positions: Vec<Vec3>) -> Self {
        let velocities = vec![Vec3::zeros(); positions.len()];
        KinematicState::new(positions, velocities)
    }

    /// The rest pose of `shape` (centered at the origin), motionless.
    pub fn rest(shape: &RestShape) -> Self {
        KinematicState::at_rest(shape.rest_positions().to_vec())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks lengths, finiteness, and that planar states stay planar.
    pub fn validate(&self, shape: &RestShape) -> Result<()> {
        for (what, list) in [("positions", &self.positions), ("velocities", &self.velocities)] {
            if list.len() != shape.len() {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: shape.len(),
                    found: list.len(),
                });
            }
            for (r, v) in list.iter().enumerate() {
                if !v.iter().all(|x| x.is_finite()) || !shape.dim().contains(v) {
                    return Err(Error::invalid(
                        format!("{what}[{r}]"),
                        "must be finite and lie in the active subspace",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Mass-weighted center `t = (1/M) sum_r m_r q_r`.
pub fn center_of_mass(positions: &[Vec3], shape: &RestShape) -> Vec3 {
    positions
        .iter()
        .zip(shape.masses())
        .fold(Vec3::zeros(), |acc, (q, &m)| acc + q * m)
        / shape.total_mass()
}

/// Asymmetric covariance `A_a = (1/M) sum_r m_r (q_r - t) q0_r^T`.
pub fn covariance_asym(positions: &[Vec3], shape: &RestShape) -> Mat3 {
    let t = center_of_mass(positions, shape);
    positions
        .iter()
        .zip(shape.rest_positions())
        .zip(shape.masses())
        .fold(Mat3::zeros(), |acc, ((q, q0), &m)| {
            acc + (q - t) * q0.transpose() * m
        })
        / shape.total_mass()
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::testutil::{random_cloud, random_rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square() -> RestShape {
        let pts = [(0.0, 0.0), (2.0, 0.0), (0.0, 2.0), (2.0, 2.0)]
            .map(|(x, y)| Vec3::new(x, y, 0.0));
        RestShape::with_unit_stiffness(Dim::Two, &pts, &[1.0; 4]).unwrap()
    }

    #[test]
    fn square_is_centered_with_unit_covariance() {
        let s = square();
        for q in s.rest_positions() {
            assert_eq!(q.x.abs(), 1.0);
            assert_eq!(q.y.abs(), 1.0);
        }
        assert_eq!(*s.a_s(), Dim::Two.identity());
        assert_eq!(*s.a_s_inv(), Dim::Two.identity());
    }

    #[test]
    fn collinear_cloud_is_degenerate() {
        let pts: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let err = RestShape::with_unit_stiffness(Dim::Three, &pts, &[1.0; 4]).unwrap_err();
        assert!(matches!(err, Error::DegenerateRestShape { .. }));
    }

    #[test]
    fn too_few_points_is_degenerate() {
        let pts = [Vec3::zeros(), Vec3::x(), Vec3::y()];
        let err = RestShape::with_unit_stiffness(Dim::Three, &pts, &[1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::DegenerateRestShape { .. }));
    }

    #[test]
    fn ragged_input_is_rejected() {
        let pts = [Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        let err = RestShape::with_unit_stiffness(Dim::Three, &pts, &[1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { what: "masses", .. }));
        let err = RestShape::new(Dim::Three, &pts, &[1.0; 4], &[1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { what: "stiffness", .. }));
    }

    #[test]
    fn non_positive_mass_is_rejected() {
        let pts = [Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        let err = RestShape::with_unit_stiffness(Dim::Three, &pts, &[1.0, 0.0, 1.0, 1.0]);
        assert!(matches!(err, Err(Error::InvalidInput { .. })));
    }

    #[test]
    fn rest_covariance_inverse_matches_independent_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = random_cloud(&mut rng, Dim::Three, 10);
        // weighted centering
        let c = shape
            .rest_positions()
            .iter()
            .zip(shape.masses())
            .fold(Vec3::zeros(), |a, (q, m)| a + q * *m);
        assert!(c.amax() < 1e-13);
        let lu = shape.a_s().lu();
        for k in 0..3 {
            let e = Vec3::ith(k, 1.0);
            let col = lu.solve(&e).unwrap();
            assert!((shape.a_s_inv().column(k) - col).amax() < 1e-12);
        }
        assert!((shape.a_s() * shape.a_s_inv() - Mat3::identity()).amax() < 1e-12);
    }

    #[test]
    fn center_of_mass_examples() {
        let pts = [Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), Vec3::y(), Vec3::z()];
        let shape = RestShape::with_unit_stiffness(Dim::Three, &pts, &[1.0; 4]).unwrap();
        let t = center_of_mass(&[Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)], &{
            // two-particle weighted mean only needs masses
            let mut s = shape.clone();
            s.masses = vec![1.0, 1.0];
            s.total_mass = 2.0;
            s
        });
        assert_eq!(t, Vec3::new(1.0, 0.0, 0.0));

        let mut s = shape;
        s.masses = vec![1.0, 3.0];
        s.total_mass = 4.0;
        let t = center_of_mass(&[Vec3::zeros(), Vec3::new(4.0, 0.0, 0.0)], &s);
        assert_eq!(t, Vec3::new(3.0, 0.0, 0.0));
    }

    #[test]
    fn center_of_mass_matches_reverse_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = random_cloud(&mut rng, Dim::Three, 9);
        let q: Vec<Vec3> = (0..9)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let t = center_of_mass(&q, &shape);
        let mut acc = [0.0f64; 3];
        for r in (0..9).rev() {
            for a in 0..3 {
                acc[a] += shape.masses()[r] * q[r][a];
            }
        }
        for a in 0..3 {
            assert!((t[a] - acc[a] / shape.total_mass()).abs() < 1e-14);
        }
    }

    #[test]
    fn covariance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = random_cloud(&mut rng, Dim::Three, 6);
        let rest = shape.rest_positions().to_vec();
        assert!((covariance_asym(&rest, &shape) - shape.a_s()).amax() < 1e-15);

        let r0 = random_rotation(&mut rng, Dim::Three);
        let c = Vec3::new(0.3, -2.0, 5.0);
        let moved: Vec<Vec3> = rest.iter().map(|q| r0 * q + c).collect();
        assert!((covariance_asym(&moved, &shape) - r0 * shape.a_s()).amax() < 1e-12);
    }

    #[test]
    fn covariance_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = random_cloud(&mut rng, Dim::Three, 8);
        let q: Vec<Vec3> = (0..8)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let t = center_of_mass(&q, &shape);
        let a = covariance_asym(&q, &shape);
        for row in 0..3 {
            for col in 0..3 {
                let mut sum = 0.0;
                for r in 0..8 {
                    sum += shape.masses()[r] * (q[r][row] - t[row]) * shape.rest_positions()[r][col];
                }
                assert!((a[(row, col)] - sum / shape.total_mass()).abs() < 1e-14);
            }
        }
    }
}
