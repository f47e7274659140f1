//! Implicit time stepping driven by the analytic forces and Hessians.
//!
//! Backward Euler and BDF2 share one form. With step weight `h`, anchor
//! positions `q_a` and anchor velocities `v_a`, the end-of-step velocity is
//! `v = (q - q_a) / h` and the residual is
//!
//! `r(q) = M (v - v_a) / h + F(q, v) - M g`,
//!
//! where `F` is the total shape-matching plus damping force. Backward Euler
//! uses `h = dt`, `q_a = q_n`, `v_a = v_n`; BDF2 uses `h = 2 dt / 3`,
//! `q_a = (4 q_n - q_{n-1}) / 3`, `v_a = (4 v_n - v_{n-1}) / 3`.
//!
//! Newton runs on the end-of-step velocities. Since `q = q_a + h v` the
//! iterates are those of Newton on positions scaled by `h`, but velocities
//! stay exact where the closed form is representable.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::energy::{EnergyParams, Frame, HessianVariant};
use crate::error::{Error, Result};
use crate::kinematics::{KinematicState, RestShape};
use crate::linalg::Vec3;

pub const DEFAULT_NEWTON_MAX_ITERS: usize = 32;
pub const MAX_LINE_SEARCH_HALVINGS: usize = 16;
const MAX_SHIFT_ATTEMPTS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    BackwardEuler,
    /// Second-order backward differentiation; the first step is backward Euler.
    Bdf2,
    /// Explicit reference integrator.
    SymplecticEuler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub scheme: Scheme,
    /// Residual norm at which Newton stops; `None` selects [`IntegratorConfig::default_tolerance`].
    pub newton_tol: Option<f64>,
    pub newton_max_iters: usize,
    /// Full Hessian, or the Gauss-Newton part only.
    pub use_full_hessian: bool,
    pub gravity: Vec3,
    pub pinned: BTreeSet<usize>,
}

impl IntegratorConfig {
    pub fn new(dt: f64) -> Self {
        IntegratorConfig {
            dt,
            scheme: Scheme::BackwardEuler,
            newton_tol: None,
            newton_max_iters: DEFAULT_NEWTON_MAX_ITERS,
            use_full_hessian: true,
            gravity: Vec3::zeros(),
            pinned: BTreeSet::new(),
        }
    }

    pub fn validate(&self, shape: &RestShape) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.newton_max_iters == 0 {
            return Err(Error::invalid("newton_max_iters", "must be at least 1"));
        }
        if let Some(tol) = self.newton_tol {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(Error::invalid("newton_tol", format!("must be positive, got {tol}")));
            }
        }
        if !self.gravity.iter().all(|g| g.is_finite()) || !shape.dim().contains(&self.gravity) {
            return Err(Error::invalid("gravity", "must be finite and lie in the scene's dimension"));
        }
        if let Some(&bad) = self.pinned.iter().find(|&&p| p >= shape.len()) {
            return Err(Error::invalid("pinned", format!("particle {bad} out of range")));
        }
        Ok(())
    }

    /// `1e-9 sqrt(n) max(1, k_max diameter, m_max |g|)`.
    pub fn default_tolerance(&self, shape: &RestShape) -> f64 {
        1e-9 * (shape.len() as f64).sqrt() * force_scale(shape, &self.gravity)
    }

    pub fn tolerance(&self, shape: &RestShape) -> f64 {
        self.newton_tol.unwrap_or_else(|| self.default_tolerance(shape))
    }

    fn variant(&self) -> HessianVariant {
        if self.use_full_hessian {
            HessianVariant::Full
        } else {
            HessianVariant::GaussNewton
        }
    }
}

/// Characteristic force magnitude of a scene.
pub fn force_scale(shape: &RestShape, gravity: &Vec3) -> f64 {
    let k_max = shape.stiffness().iter().fold(0.0f64, |m, k| m.max(*k));
    let m_max = shape.masses().iter().fold(0.0f64, |m, k| m.max(*k));
    1.0f64.max(k_max * shape.diameter()).max(m_max * gravity.norm())
}

/// Diagnostics of one time step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepStats {
    /// Linear solves performed.
    pub newton_iters: usize,
    pub residual_norm: f64,
    /// Residual norm at every Newton iterate, starting with the initial guess.
    pub residual_history: Vec<f64>,
    /// Pivot-ratio estimate of the last linear system.
    pub condition_estimate: f64,
    pub line_search_halvings: usize,
    /// Largest diagonal shift the fallback had to apply.
    pub diagonal_shift: f64,
    pub energy_before: f64,
    pub energy_after: f64,
}

/// Kinetic energy plus shape-matching potential plus gravitational potential.
pub fn mechanical_energy(state: &KinematicState, shape: &RestShape, params: &EnergyParams, gravity: &Vec3) -> Result<f64> {
    let potential = Frame::new(shape, *params, &state.positions)?.energy();
    let mut other = 0.0;
    for ((q, v), m) in state.positions.iter().zip(&state.velocities).zip(shape.masses()) {
        other += 0.5 * m * v.norm_squared() - m * gravity.dot(q);
    }
    Ok(potential + other)
}

/// `v = (q - q_a) / h` and the residual built on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    h: f64,
    anchor_positions: Vec<Vec3>,
    anchor_velocities: Vec<Vec3>,
}

impl Discretization {
    pub fn backward_euler(prev: &KinematicState, dt: f64) -> Self {
        Discretization {
            h: dt,
            anchor_positions: prev.positions.clone(),
            anchor_velocities: prev.velocities.clone(),
        }
    }

    /// `prev` is the state at `t_n`, `older` the one at `t_{n-1}`.
    pub fn bdf2(prev: &KinematicState, older: &KinematicState, dt: f64) -> Self {
        let blend = |a: &[Vec3], b: &[Vec3]| -> Vec<Vec3> { a.iter().zip(b).map(|(a, b)| (a * 4.0 - b) / 3.0).collect() };
        Discretization {
            h: 2.0 * dt / 3.0,
            anchor_positions: blend(&prev.positions, &older.positions),
            anchor_velocities: blend(&prev.velocities, &older.velocities),
        }
    }

    #[inline]
    pub fn step_weight(&self) -> f64 {
        self.h
    }

    pub fn velocities_of(&self, positions: &[Vec3]) -> Vec<Vec3> {
        positions
            .iter()
            .zip(&self.anchor_positions)
            .map(|(q, qa)| (q - qa) / self.h)
            .collect()
    }

    pub fn positions_of(&self, velocities: &[Vec3]) -> Vec<Vec3> {
        velocities
            .iter()
            .zip(&self.anchor_positions)
            .map(|(v, qa)| qa + v * self.h)
            .collect()
    }

    /// Residual over the free particles at end-of-step velocities `v`.
    fn residual_at(&self, frame: &Frame<'_>, v: &[Vec3], cfg: &IntegratorConfig, free: &[usize]) -> DVector<f64> {
        let shape = frame.shape();
        let d = shape.dim().size();
        let force = frame.total_force(v);
        let mut r = DVector::zeros(free.len() * d);
        for (k, &i) in free.iter().enumerate() {
            let m = shape.masses()[i];
            let ri = (v[i] - self.anchor_velocities[i]) * (m / self.h) + force[i] - cfg.gravity * m;
            for a in 0..d {
                r[k * d + a] = ri[a];
            }
        }
        r
    }

    /// `c_m M + c_v D_v + c_q H_q` over the free particles.
    fn combine(
        &self,
        frame: &Frame<'_>,
        v: &[Vec3],
        cfg: &IntegratorConfig,
        free: &[usize],
        (c_m, c_v, c_q): (f64, f64, f64),
    ) -> Result<DMatrix<f64>> {
        let shape = frame.shape();
        let d = shape.dim().size();
        let (pos, vel) = frame.implicit_blocks(v, cfg.variant())?;
        let (pos, vel) = (pos.matrix(), vel.matrix());
        let nf = free.len() * d;
        let mut jac = DMatrix::zeros(nf, nf);
        for (kr, &i) in free.iter().enumerate() {
            for (kc, &l) in free.iter().enumerate() {
                for a in 0..d {
                    for b in 0..d {
                        let (gr, gc) = (i * d + a, l * d + b);
                        jac[(kr * d + a, kc * d + b)] = c_q * pos[(gr, gc)] + c_v * vel[(gr, gc)];
                    }
                }
            }
            for a in 0..d {
                jac[(kr * d + a, kr * d + a)] += c_m * shape.masses()[i];
            }
        }
        Ok(jac)
    }

    /// `dr/dq = M / h^2 + D_v / h + H_q`.
    fn position_jacobian_at(&self, frame: &Frame<'_>, v: &[Vec3], cfg: &IntegratorConfig, free: &[usize]) -> Result<DMatrix<f64>> {
        let h = self.h;
        self.combine(frame, v, cfg, free, (1.0 / (h * h), 1.0 / h, 1.0))
    }

    /// `dr/dv = M / h + D_v + h H_q`.
    fn velocity_jacobian_at(&self, frame: &Frame<'_>, v: &[Vec3], cfg: &IntegratorConfig, free: &[usize]) -> Result<DMatrix<f64>> {
        self.combine(frame, v, cfg, free, (1.0 / self.h, 1.0, self.h))
    }

    pub fn residual(
        &self,
        positions: &[Vec3],
        shape: &RestShape,
        params: &EnergyParams,
        cfg: &IntegratorConfig,
    ) -> Result<DVector<f64>> {
        let frame = Frame::new(shape, *params, positions)?;
        let free = free_particles(shape, cfg);
        Ok(self.residual_at(&frame, &self.velocities_of(positions), cfg, &free))
    }

    pub fn system_matrix(
        &self,
        positions: &[Vec3],
        shape: &RestShape,
        params: &EnergyParams,
        cfg: &IntegratorConfig,
    ) -> Result<DMatrix<f64>> {
        let frame = Frame::new(shape, *params, positions)?;
        let free = free_particles(shape, cfg);
        self.position_jacobian_at(&frame, &self.velocities_of(positions), cfg, &free)
    }
}

fn free_particles(shape: &RestShape, cfg: &IntegratorConfig) -> Vec<usize> {
    (0..shape.len()).filter(|i| !cfg.pinned.contains(i)).collect()
}

/// Backward Euler residual at `state_next`'s positions, flattened over free particles.
pub fn residual(
    state_next: &KinematicState,
    state_prev: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    cfg.validate(shape)?;
    state_next.validate(shape)?;
    state_prev.validate(shape)?;
    Discretization::backward_euler(state_prev, cfg.dt).residual(&state_next.positions, shape, params, cfg)
}

/// Derivative of [`residual`] with respect to the free positions.
pub fn system_matrix(
    state_next: &KinematicState,
    state_prev: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate(shape)?;
    state_next.validate(shape)?;
    state_prev.validate(shape)?;
    Discretization::backward_euler(state_prev, cfg.dt).system_matrix(&state_next.positions, shape, params, cfg)
}

struct Solve {
    delta: DVector<f64>,
    condition: f64,
    shift: f64,
}

/// LU solve with a growing diagonal shift when the factorization fails.
fn solve_shifted(matrix: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<Solve> {
    let base = matrix.norm().max(f64::MIN_POSITIVE);
    let mut shift = 0.0;
    for attempt in 0..=MAX_SHIFT_ATTEMPTS {
        let mut m = matrix.clone();
        if shift > 0.0 {
            for k in 0..m.nrows() {
                m[(k, k)] += shift;
            }
        }
        let lu = m.lu();
        if let Some(delta) = lu.solve(rhs).filter(|x| x.iter().all(|v| v.is_finite())) {
            let diag = lu.u().diagonal().map(f64::abs);
            let condition = if diag.is_empty() { 1.0 } else { diag.max() / diag.min() };
            return Some(Solve { delta, condition, shift });
        }
        shift = if attempt == 0 { 1e-8 * base } else { shift * 10.0 };
    }
    None
}

/// One implicit step from an already built discretization.
fn newton(
    disc: &Discretization,
    start: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
    cfg: &IntegratorConfig,
) -> (KinematicState, StepStats, Option<Error>) {
    let d = shape.dim().size();
    let free = free_particles(shape, cfg);
    let tol = cfg.tolerance(shape);
    let mut stats = StepStats::default();

    let mut v: Vec<Vec3> = start.velocities.clone();
    for &p in &cfg.pinned {
        v[p] = Vec3::zeros();
    }
    let assemble = |v: &[Vec3]| -> KinematicState {
        let mut q = disc.positions_of(v);
        for &p in &cfg.pinned {
            q[p] = start.positions[p];
        }
        KinematicState::new(q, v.to_vec())
    };
    let evaluate = |v: &[Vec3]| -> Result<(Frame<'_>, DVector<f64>)> {
        let state = assemble(v);
        let frame = Frame::new(shape, *params, &state.positions)?;
        let r = disc.residual_at(&frame, v, cfg, &free);
        Ok((frame, r))
    };

    let (mut frame, mut r) = match evaluate(&v) {
        Ok(x) => x,
        Err(e) => {
            let err = Error::DegenerateAlongPath {
                iteration: 0,
                source: Box::new(e),
            };
            return (assemble(&v), stats, Some(err));
        }
    };
    let mut norm = r.norm();
    stats.residual_history.push(norm);

    while norm > tol {
        if stats.newton_iters >= cfg.newton_max_iters {
            stats.residual_norm = norm;
            let err = Error::NewtonDiverged {
                iterations: stats.newton_iters,
                residual: norm,
            };
            return (assemble(&v), stats, Some(err));
        }
        let iteration = stats.newton_iters;
        let along = |e: Error| Error::DegenerateAlongPath {
            iteration,
            source: Box::new(e),
        };
        let jac = match disc.velocity_jacobian_at(&frame, &v, cfg, &free) {
            Ok(j) => j,
            Err(e) => return (assemble(&v), stats, Some(along(e))),
        };
        let Some(solve) = solve_shifted(&jac, &(-&r)) else {
            let err = along(Error::invalid("newton system", "singular even after diagonal shifts"));
            return (assemble(&v), stats, Some(err));
        };
        stats.newton_iters += 1;
        stats.condition_estimate = solve.condition;
        stats.diagonal_shift = stats.diagonal_shift.max(solve.shift);

        let mut scale = 1.0;
        let mut accepted = None;
        let mut fallback = None;
        let mut failure = None;
        for halving in 0..=MAX_LINE_SEARCH_HALVINGS {
            let mut trial = v.clone();
            for (k, &i) in free.iter().enumerate() {
                for (a, delta) in solve.delta.as_slice()[k * d..(k + 1) * d].iter().enumerate() {
                    trial[i][a] += scale * delta;
                }
            }
            match evaluate(&trial) {
                Ok((f, rt)) => {
                    let nt = rt.norm();
                    if nt < norm {
                        stats.line_search_halvings += halving;
                        accepted = Some((trial, f, rt, nt));
                        break;
                    }
                    if nt.is_finite() {
                        fallback = Some((trial, f, rt, nt));
                    }
                }
                Err(e) => failure = Some(e),
            }
            scale *= 0.5;
        }
        let Some((nv, nf, nr, nn)) = accepted.or_else(|| {
            stats.line_search_halvings += MAX_LINE_SEARCH_HALVINGS;
            fallback
        }) else {
            let cause = failure.unwrap_or_else(|| Error::invalid("newton step", "residual is not finite"));
            let err = along(cause);
            return (assemble(&v), stats, Some(err));
        };
        v = nv;
        frame = nf;
        r = nr;
        norm = nn;
        stats.residual_history.push(norm);
    }
    stats.residual_norm = norm;
    (assemble(&v), stats, None)
}

fn explicit_step(
    state: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
    cfg: &IntegratorConfig,
) -> Result<(KinematicState, StepStats)> {
    let frame = Frame::new(shape, *params, &state.positions).map_err(|e| Error::DegenerateAlongPath {
        iteration: 0,
        source: Box::new(e),
    })?;
    let force = frame.total_force(&state.velocities);
    let mut next = state.clone();
    for (i, (f, m)) in force.iter().zip(shape.masses()).enumerate() {
        if cfg.pinned.contains(&i) {
            next.velocities[i] = Vec3::zeros();
            continue;
        }
        next.velocities[i] = state.velocities[i] + (cfg.gravity - f / *m) * cfg.dt;
        next.positions[i] = state.positions[i] + next.velocities[i] * cfg.dt;
    }
    Ok((next, StepStats::default()))
}

/// Stateful stepper; keeps the history BDF2 needs.
#[derive(Debug, Clone)]
pub struct Integrator<'a> {
    shape: &'a RestShape,
    params: EnergyParams,
    cfg: IntegratorConfig,
    previous: Option<KinematicState>,
    best: Option<(KinematicState, StepStats)>,
}

impl<'a> Integrator<'a> {
    pub fn new(shape: &'a RestShape, params: EnergyParams, cfg: IntegratorConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate(shape)?;
        Ok(Integrator {
            shape,
            params,
            cfg,
            previous: None,
            best: None,
        })
    }

    #[inline]
    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    /// Forgets the BDF2 history.
    pub fn reset(&mut self) {
        self.previous = None;
    }

    /// The last Newton iterate of a step that failed to converge.
    pub fn best_iterate(&self) -> Option<&(KinematicState, StepStats)> {
        self.best.as_ref()
    }

    pub fn step(&mut self, state: &KinematicState) -> Result<(KinematicState, StepStats)> {
        state.validate(self.shape)?;
        self.best = None;
        let (shape, params, cfg) = (self.shape, &self.params, &self.cfg);
        let energy_before = mechanical_energy(state, shape, params, &cfg.gravity).unwrap_or(f64::NAN);
        let (next, mut stats) = match cfg.scheme {
            Scheme::SymplecticEuler => explicit_step(state, shape, params, cfg)?,
            Scheme::BackwardEuler | Scheme::Bdf2 => {
                let disc = match (&self.previous, cfg.scheme) {
                    (Some(older), Scheme::Bdf2) => Discretization::bdf2(state, older, cfg.dt),
                    _ => Discretization::backward_euler(state, cfg.dt),
                };
                let (next, stats, err) = newton(&disc, state, shape, params, cfg);
                if let Some(err) = err {
                    self.best = Some((next, stats));
                    return Err(err);
                }
                (next, stats)
            }
        };
        stats.energy_before = energy_before;
        stats.energy_after = mechanical_energy(&next, shape, params, &cfg.gravity).unwrap_or(f64::NAN);
        self.previous = Some(state.clone());
        Ok((next, stats))
    }
}

/// A single step without history (BDF2 therefore falls back to backward Euler).
pub fn step(
    state: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
    cfg: &IntegratorConfig,
) -> Result<(KinematicState, StepStats)> {
    Integrator::new(shape, *params, cfg.clone())?.step(state)
}

/// Frames `0..=n_steps` and the statistics of each step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub frames: Vec<KinematicState>,
    pub stats: Vec<StepStats>,
}

impl Trajectory {
    pub fn total_newton_iters(&self) -> usize {
        self.stats.iter().map(|s| s.newton_iters).sum()
    }

    pub fn mean_newton_iters(&self) -> f64 {
        if self.stats.is_empty() {
            0.0
        } else {
            self.total_newton_iters() as f64 / self.stats.len() as f64
        }
    }
}

pub fn simulate(
    initial: &KinematicState,
    shape: &RestShape,
    params: &EnergyParams,
    cfg: &IntegratorConfig,
    n_steps: usize,
) -> Result<Trajectory> {
    let mut integrator = Integrator::new(shape, *params, cfg.clone())?;
    initial.validate(shape)?;
    let mut traj = Trajectory {
        frames: Vec::with_capacity(n_steps + 1),
        stats: Vec::with_capacity(n_steps),
    };
    traj.frames.push(initial.clone());
    for frame in 1..=n_steps {
        let current = traj.frames.last().expect("initial frame present");
        let (next, stats) = integrator.step(current).map_err(|e| Error::StepFailed {
            frame,
            source: Box::new(e),
        })?;
        traj.frames.push(next);
        traj.stats.push(stats);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{compare, fd_jacobian, FdConfig, DEFAULT_ABS_FLOOR};
    use crate::linalg::Dim;
    use crate::random::axis_rotation;
    use crate::testutil::{grid_2d, random_cloud, random_state};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_shape(nx: usize, ny: usize, k: f64) -> RestShape {
        let pts = grid_2d(nx, ny, 1.0);
        let n = pts.len();
        RestShape::new(Dim::Two, &pts, &vec![1.0; n], &vec![k; n]).unwrap()
    }

    fn raw_grid(nx: usize, ny: usize) -> KinematicState {
        KinematicState::at_rest(grid_2d(nx, ny, 1.0))
    }

    /// Stretched, rotated and jittered grid at rest velocity.
    fn deformed_grid(nx: usize, ny: usize) -> KinematicState {
        let rot = axis_rotation(Vec3::z(), 0.7);
        let positions = grid_2d(nx, ny, 1.0)
            .iter()
            .enumerate()
            .map(|(r, p)| {
                let jitter = Vec3::new(((r * 7) % 5) as f64 * 0.06, ((r * 3) % 4) as f64 * -0.05, 0.0);
                rot * Vec3::new(1.6 * p.x, 0.8 * p.y, 0.0) + jitter
            })
            .collect();
        KinematicState::at_rest(positions)
    }

    fn momentum(state: &KinematicState, shape: &RestShape) -> Vec3 {
        state.velocities.iter().zip(shape.masses()).fold(Vec3::zeros(), |a, (v, m)| a + v * *m)
    }

    #[test]
    fn config_validation() {
        let shape = grid_shape(3, 3, 1.0);
        assert!(IntegratorConfig::new(0.0).validate(&shape).is_err());
        let mut cfg = IntegratorConfig::new(0.1);
        cfg.newton_max_iters = 0;
        assert!(cfg.validate(&shape).is_err());
        let mut cfg = IntegratorConfig::new(0.1);
        cfg.pinned.insert(9);
        assert!(cfg.validate(&shape).is_err());
        let mut cfg = IntegratorConfig::new(0.1);
        cfg.gravity = Vec3::new(0.0, -1.0, 1.0);
        assert!(cfg.validate(&shape).is_err());
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let shape = grid_shape(3, 3, 50.0);
        let state = raw_grid(3, 3);
        let params = EnergyParams::new(0.5, 0.1, 0.01).unwrap();
        let cfg = IntegratorConfig::new(1.0 / 60.0);
        let r = residual(&state, &state, &shape, &params, &cfg).unwrap();
        assert_eq!(r.amax(), 0.0);
        let (next, stats) = step(&state, &shape, &params, &cfg).unwrap();
        assert!(stats.newton_iters <= 1);
        assert_eq!(next, state);
        let traj = simulate(&state, &shape, &params, &cfg, 5).unwrap();
        assert!(traj.frames.iter().all(|f| *f == state));
        let empty = simulate(&state, &shape, &params, &cfg, 0).unwrap();
        assert_eq!(empty.frames, vec![state]);
        assert!(empty.stats.is_empty());
    }

    #[test]
    fn free_fall_is_exact() {
        let shape = RestShape::new(Dim::Two, &grid_2d(2, 2, 1.0), &[1.0; 4], &[0.0; 4]).unwrap();
        let params = EnergyParams::undamped(0.5).unwrap();
        let mut cfg = IntegratorConfig::new(0.1);
        cfg.gravity = Vec3::new(0.0, -10.0, 0.0);
        let start = raw_grid(2, 2);
        let (next, _) = step(&start, &shape, &params, &cfg).unwrap();
        assert!(next.velocities.iter().all(|v| v.x == 0.0 && v.y == -1.0));

        let mut exact = start.clone();
        exact.velocities = vec![Vec3::new(0.0, -1.0, 0.0); 4];
        exact.positions = start.positions.iter().map(|p| p + exact.velocities[0] * 0.1).collect();
        assert!(residual(&exact, &start, &shape, &params, &cfg).unwrap().amax() < 1e-12);
        let mut off = exact.clone();
        off.positions[0].y += 1e-3;
        assert!(residual(&off, &start, &shape, &params, &cfg).unwrap().amax() > 1e-3);

        let m = system_matrix(&exact, &start, &shape, &EnergyParams::undamped(0.0).unwrap(), &cfg).unwrap();
        assert!((m - DMatrix::identity(8, 8) * 100.0).amax() < 1e-9);
    }

    #[test]
    fn system_matrix_matches_fd_of_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (dim, pins) in [(Dim::Two, vec![]), (Dim::Three, vec![]), (Dim::Two, vec![0, 3]), (Dim::Three, vec![2])] {
            let shape = random_cloud(&mut rng, dim, 7);
            let prev = random_state(&mut rng, &shape, 0.15);
            let next = random_state(&mut rng, &shape, 0.15);
            let params = EnergyParams::new(0.3, 0.2, 0.1).unwrap();
            for full in [true, false] {
                let mut cfg = IntegratorConfig::new(0.05);
                cfg.gravity = dim.point(&[0.0, -9.8, 0.0][..dim.size()]).unwrap();
                cfg.pinned = pins.iter().copied().collect();
                cfg.use_full_hessian = full;
                let d = dim.size();
                let free: Vec<usize> = (0..shape.len()).filter(|i| !cfg.pinned.contains(i)).collect();
                let x: Vec<f64> = free.iter().flat_map(|&i| (0..d).map(move |a| (i, a))).map(|(i, a)| next.positions[i][a]).collect();
                let at = |p: &[f64]| {
                    let mut s = next.clone();
                    for (k, &i) in free.iter().enumerate() {
                        for a in 0..d {
                            s.positions[i][a] = p[k * d + a];
                        }
                    }
                    s
                };
                let numeric = fd_jacobian(
                    |p| residual(&at(p), &prev, &shape, &params, &cfg).map(|r| r.as_slice().to_vec()),
                    &x,
                    &FdConfig::central(1e-5),
                )
                .unwrap();
                let analytic = system_matrix(&next, &prev, &shape, &params, &cfg).unwrap();
                assert_eq!(analytic.nrows(), free.len() * d);
                if full {
                    let floor = DEFAULT_ABS_FLOOR * analytic.amax();
                    let report = compare(analytic.as_slice(), numeric.as_slice(), 1e-5, floor).unwrap();
                    assert!(report.passed, "{dim:?} {report:?}");
                }
            }
        }
    }

    #[test]
    fn momentum_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let shape = random_cloud(&mut rng, Dim::Three, 8);
        let start = random_state(&mut rng, &shape, 0.2);
        let params = EnergyParams::new(0.5, 0.05, 0.0).unwrap();
        let mut cfg = IntegratorConfig::new(0.02);
        cfg.newton_tol = Some(1e-12);
        let traj = simulate(&start, &shape, &params, &cfg, 100).unwrap();
        let p0 = momentum(&start, &shape);
        for f in &traj.frames {
            assert!((momentum(f, &shape) - p0).norm() <= 1e-10 * p0.norm());
        }
    }

    #[test]
    fn damped_energy_does_not_increase() {
        let shape = grid_shape(3, 3, 200.0);
        let mut start = deformed_grid(3, 3);
        start.velocities = (0..9).map(|r| Vec3::new((r as f64 * 0.7).sin(), (r as f64 * 1.3).cos(), 0.0)).collect();
        for scheme in [Scheme::BackwardEuler] {
            let params = EnergyParams::new(0.3, 0.1, 0.01).unwrap();
            let mut cfg = IntegratorConfig::new(1.0 / 60.0);
            cfg.scheme = scheme;
            let traj = simulate(&start, &shape, &params, &cfg, 200).unwrap();
            for s in &traj.stats {
                assert!(s.energy_after <= s.energy_before + 1e-10, "{} > {}", s.energy_after, s.energy_before);
            }
        }
    }

    #[test]
    fn implicit_step_matches_fine_explicit_reference() {
        let shape = grid_shape(3, 3, 400.0);
        let params = EnergyParams::new(0.5, 0.1, 0.01).unwrap();
        let mut start = deformed_grid(3, 3);
        start.velocities = vec![Vec3::new(0.2, -0.1, 0.0); 9];
        let dt = 1e-3;
        let (implicit, _) = step(&start, &shape, &params, &IntegratorConfig::new(dt)).unwrap();

        let mut fine = IntegratorConfig::new(dt / 1e4);
        fine.scheme = Scheme::SymplecticEuler;
        let mut explicit = Integrator::new(&shape, params, fine).unwrap();
        let mut state = start.clone();
        for _ in 0..10_000 {
            state = explicit.step(&state).unwrap().0;
        }
        let gap = implicit
            .positions
            .iter()
            .zip(&state.positions)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(gap <= 1e-3 * shape.diameter(), "gap {gap}");
    }

    #[test]
    fn bdf2_is_more_accurate_than_backward_euler() {
        let shape = grid_shape(3, 3, 100.0);
        let params = EnergyParams::new(0.5, 0.0, 0.0).unwrap();
        let start = deformed_grid(3, 3);
        let (dt, steps) = (0.01, 20);
        let mut fine = IntegratorConfig::new(dt / 200.0);
        fine.scheme = Scheme::SymplecticEuler;
        let reference = simulate(&start, &shape, &params, &fine, steps * 200).unwrap();
        let target = reference.frames.last().unwrap();
        let error = |scheme| {
            let mut cfg = IntegratorConfig::new(dt);
            cfg.scheme = scheme;
            let traj = simulate(&start, &shape, &params, &cfg, steps).unwrap();
            traj.frames
                .last()
                .unwrap()
                .positions
                .iter()
                .zip(&target.positions)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max)
        };
        let (be, bdf) = (error(Scheme::BackwardEuler), error(Scheme::Bdf2));
        assert!(bdf < 0.5 * be, "bdf2 {bdf} vs be {be}");
    }

    #[test]
    fn newton_converges_quadratically_with_full_hessian() {
        let shape = grid_shape(4, 4, 100.0);
        let params = EnergyParams::new(0.0, 0.1, 0.01).unwrap();
        let mut start = deformed_grid(4, 4);
        start.velocities = start.positions.iter().map(|p| Vec3::new(-p.y, p.x, 0.0) * 4.0).collect();
        let mut cfg = IntegratorConfig::new(0.1);
        let scale = force_scale(&shape, &cfg.gravity);
        let (_, full) = step(&start, &shape, &params, &cfg).unwrap();
        let h = &full.residual_history;
        for pair in h.windows(2) {
            if pair[0] < 1e-3 * scale && pair[1] > 0.0 {
                assert!(pair[1] / (pair[0] * pair[0]) <= 1e3 / scale, "{h:?}");
            }
        }
        cfg.use_full_hessian = false;
        cfg.newton_max_iters = 200;
        let (_, gn) = step(&start, &shape, &params, &cfg).unwrap();
        assert!(gn.newton_iters > full.newton_iters);
    }

    #[test]
    fn pinned_particles_stay_put() {
        let shape = grid_shape(3, 3, 50.0);
        let start = raw_grid(3, 3);
        let params = EnergyParams::new(0.5, 0.1, 0.01).unwrap();
        let mut cfg = IntegratorConfig::new(1.0 / 60.0);
        cfg.gravity = Vec3::new(0.0, -9.8, 0.0);
        cfg.pinned = [6, 7, 8].into_iter().collect();
        let traj = simulate(&start, &shape, &params, &cfg, 30).unwrap();
        let last = traj.frames.last().unwrap();
        for p in [6, 7, 8] {
            assert_eq!(last.positions[p], start.positions[p]);
            assert_eq!(last.velocities[p], Vec3::zeros());
        }
        assert!(last.positions[0].y < start.positions[0].y);
        assert_eq!(system_matrix(&start, &start, &shape, &params, &cfg).unwrap().nrows(), 12);
    }

    #[test]
    fn trajectories_are_deterministic() {
        let shape = grid_shape(3, 3, 80.0);
        let params = EnergyParams::new(0.2, 0.1, 0.01).unwrap();
        let mut cfg = IntegratorConfig::new(1.0 / 60.0);
        cfg.scheme = Scheme::Bdf2;
        let a = simulate(&deformed_grid(3, 3), &shape, &params, &cfg, 20).unwrap();
        let b = simulate(&deformed_grid(3, 3), &shape, &params, &cfg, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_convergence_keeps_best_iterate() {
        let shape = grid_shape(3, 3, 100.0);
        let params = EnergyParams::undamped(0.0).unwrap();
        let mut cfg = IntegratorConfig::new(0.05);
        cfg.newton_max_iters = 1;
        cfg.newton_tol = Some(1e-300);
        let mut integrator = Integrator::new(&shape, params, cfg).unwrap();
        let err = integrator.step(&deformed_grid(3, 3)).unwrap_err();
        assert!(matches!(err, Error::NewtonDiverged { iterations: 1, .. }));
        let (_, stats) = integrator.best_iterate().unwrap();
        assert_eq!(stats.residual_history.len(), 2);
        assert!(stats.residual_history[1] < stats.residual_history[0]);
    }
}
