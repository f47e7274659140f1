//! JSON scene files.
//!
//! A scene lists its particles explicitly or asks for a procedural layout:
//!
//! ```json
//! {
//!   "dim": 2,
//!   "particles": [
//!     { "rest_position": [0, 0], "mass": 1, "stiffness": 100, "pinned": true },
//!     { "rest_position": [1, 0], "mass": 1, "stiffness": 100, "initial_velocity": [0, 1] }
//!   ],
//!   "params": { "gamma": 0.5, "alpha": 0.1, "beta": 0.01 },
//!   "integrator": { "dt": 0.0166, "scheme": "backward-euler", "gravity": [0, -9.8] }
//! }
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapematch::integrator::DEFAULT_NEWTON_MAX_ITERS;
use shapematch::random::{grid_2d, random_cloud, random_state};
use shapematch::{Dim, EnergyParams, IntegratorConfig, KinematicState, RestShape, Scheme, Vec3};
use thiserror::Error;

use crate::bundled;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot read scene {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scene: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scene key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<Vec<ParticleSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub procedural: Option<Procedural>,
    pub params: ParamsSpec,
    pub integrator: IntegratorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub rest_position: Vec<f64>,
    pub mass: f64,
    #[serde(default = "unit")]
    pub stiffness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_position: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_velocity: Option<Vec<f64>>,
    #[serde(default)]
    pub pinned: bool,
}

fn unit() -> f64 {
    1.0
}

/// Generated particle layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Procedural {
    /// Planar `nx x ny` lattice, optionally with its top row pinned.
    Grid(GridSpec),
    /// Seeded random cloud in a randomly deformed, moving state.
    RandomCloud(RandomCloudSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    #[serde(default = "unit")]
    pub mass: f64,
    #[serde(default = "unit")]
    pub stiffness: f64,
    #[serde(default)]
    pub pin_top_row: bool,
    /// Initial positions are `(I + deformation) p + jitter(r)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deformation: Option<[[f64; 2]; 2]>,
    /// Amplitude of a seeded per-particle displacement.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomCloudSpec {
    pub count: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub gamma: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    #[default]
    BackwardEuler,
    Bdf2,
    SymplecticEuler,
}

impl From<SchemeName> for Scheme {
    fn from(s: SchemeName) -> Scheme {
        match s {
            SchemeName::BackwardEuler => Scheme::BackwardEuler,
            SchemeName::Bdf2 => Scheme::Bdf2,
            SchemeName::SymplecticEuler => Scheme::SymplecticEuler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    pub dt: f64,
    #[serde(default)]
    pub scheme: SchemeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_tol: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub use_full_hessian: bool,
}

fn default_max_iters() -> usize {
    DEFAULT_NEWTON_MAX_ITERS
}

fn yes() -> bool {
    true
}

/// A scene converted into library types.
#[derive(Debug, Clone)]
pub struct Scene {
    pub shape: RestShape,
    pub state: KinematicState,
    pub params: EnergyParams,
    pub integrator: IntegratorConfig,
}

impl SceneFile {
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn build(&self) -> Result<Scene, SceneError> {
        let dim = Dim::from_size(self.dim).map_err(|_| invalid("dim", format!("must be 2 or 3, got {}", self.dim)))?;
        let params = EnergyParams::new(self.params.gamma, self.params.alpha, self.params.beta)
            .map_err(|e| core_invalid("params", e))?;
        let (shape, state, pinned) = match (&self.particles, &self.procedural) {
            (Some(ps), None) => explicit(dim, ps)?,
            (None, Some(Procedural::Grid(g))) => grid(dim, g, self.seed.unwrap_or(0))?,
            (None, Some(Procedural::RandomCloud(c))) => cloud(dim, c, self.seed.unwrap_or(0))?,
            (Some(_), Some(_)) => return Err(invalid("procedural", "cannot be combined with `particles`")),
            (None, None) => return Err(invalid("particles", "missing (or give `procedural`)")),
        };

        let spec = &self.integrator;
        let mut cfg = IntegratorConfig::new(spec.dt);
        cfg.scheme = spec.scheme.into();
        cfg.newton_tol = spec.newton_tol;
        cfg.newton_max_iters = spec.max_iters;
        cfg.use_full_hessian = spec.use_full_hessian;
        if let Some(g) = &spec.gravity {
            cfg.gravity = point(dim, g, "integrator.gravity")?;
        }
        cfg.pinned = pinned;
        cfg.validate(&shape).map_err(|e| core_invalid("integrator", e))?;
        Ok(Scene {
            shape,
            state,
            params,
            integrator: cfg,
        })
    }
}

fn core_invalid(key: &str, err: shapematch::Error) -> SceneError {
    match err {
        shapematch::Error::InvalidInput { what, reason } => invalid(format!("{key}.{what}"), reason),
        other => invalid(key, other.to_string()),
    }
}

fn point(dim: Dim, coords: &[f64], key: &str) -> Result<Vec3, SceneError> {
    if coords.len() != dim.size() {
        return Err(invalid(key, format!("expected {} coordinates, got {}", dim.size(), coords.len())));
    }
    if !coords.iter().all(|c| c.is_finite()) {
        return Err(invalid(key, "coordinates must be finite"));
    }
    dim.point(coords).map_err(|e| invalid(key, e.to_string()))
}

type Built = (RestShape, KinematicState, BTreeSet<usize>);

fn explicit(dim: Dim, particles: &[ParticleSpec]) -> Result<Built, SceneError> {
    let mut rest = Vec::with_capacity(particles.len());
    let mut positions = Vec::with_capacity(particles.len());
    let mut velocities = Vec::with_capacity(particles.len());
    let mut pinned = BTreeSet::new();
    for (r, p) in particles.iter().enumerate() {
        let q0 = point(dim, &p.rest_position, &format!("particles[{r}].rest_position"))?;
        rest.push(q0);
        positions.push(match &p.initial_position {
            Some(q) => point(dim, q, &format!("particles[{r}].initial_position"))?,
            None => q0,
        });
        velocities.push(match &p.initial_velocity {
            Some(v) => point(dim, v, &format!("particles[{r}].initial_velocity"))?,
            None => Vec3::zeros(),
        });
        if p.pinned {
            pinned.insert(r);
        }
    }
    let masses: Vec<f64> = particles.iter().map(|p| p.mass).collect();
    let stiffness: Vec<f64> = particles.iter().map(|p| p.stiffness).collect();
    let shape = RestShape::new(dim, &rest, &masses, &stiffness).map_err(|e| core_invalid("particles", e))?;
    Ok((shape, KinematicState::new(positions, velocities), pinned))
}

fn grid(dim: Dim, g: &GridSpec, seed: u64) -> Result<Built, SceneError> {
    use rand::Rng;
    if dim != Dim::Two {
        return Err(invalid("procedural.kind", "grid scenes are planar (dim = 2)"));
    }
    if g.nx < 2 || g.ny < 2 {
        return Err(invalid("procedural.nx", "grid needs at least 2 x 2 particles"));
    }
    if !(g.spacing > 0.0 && g.spacing.is_finite()) {
        return Err(invalid("procedural.spacing", "must be positive"));
    }
    let rest = grid_2d(g.nx, g.ny, g.spacing);
    let n = rest.len();
    let shape = RestShape::new(dim, &rest, &vec![g.mass; n], &vec![g.stiffness; n])
        .map_err(|e| core_invalid("procedural", e))?;
    let deform = g.deformation.unwrap_or([[0.0; 2]; 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = rest
        .iter()
        .map(|p| {
            let mut q = Vec3::new(
                p.x + deform[0][0] * p.x + deform[0][1] * p.y,
                p.y + deform[1][0] * p.x + deform[1][1] * p.y,
                0.0,
            );
            if g.jitter > 0.0 {
                q.x += g.jitter * rng.random_range(-1.0..1.0);
                q.y += g.jitter * rng.random_range(-1.0..1.0);
            }
            q
        })
        .collect();
    let pinned = if g.pin_top_row {
        ((g.ny - 1) * g.nx..n).collect()
    } else {
        BTreeSet::new()
    };
    Ok((shape, KinematicState::at_rest(positions), pinned))
}

fn cloud(dim: Dim, c: &RandomCloudSpec, seed: u64) -> Result<Built, SceneError> {
    if c.count <= dim.size() {
        return Err(invalid("procedural.count", format!("need more than {} particles", dim.size())));
    }
    if !(c.amplitude >= 0.0 && c.amplitude < 1.0) {
        return Err(invalid("procedural.amplitude", "must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = random_cloud(&mut rng, dim, c.count);
    let state = random_state(&mut rng, &shape, c.amplitude);
    Ok((shape, state, BTreeSet::new()))
}

/// Reads a scene from `source`, falling back to a bundled scene of that name
/// when no such file exists.
pub fn load(source: &str) -> Result<(SceneFile, Scene), SceneError> {
    let text = if Path::new(source).exists() {
        std::fs::read_to_string(source).map_err(|e| SceneError::Io {
            path: source.to_string(),
            source: e,
        })?
    } else if let Some(text) = bundled::get(source) {
        text.to_string()
    } else {
        return Err(SceneError::Io {
            path: source.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or bundled scene"),
        });
    };
    let file = SceneFile::from_json(&text)?;
    let scene = file.build()?;
    Ok((file, scene))
}
