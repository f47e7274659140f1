//! Subcommands and exit codes.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapematch::random::{random_cloud, random_state};
use shapematch::{
    check_derivatives, CheckOptions, Dim, EnergyParams, Frame, HessianVariant, Integrator, KinematicState, RestShape,
};

use crate::output::TrajectoryWriter;
use crate::scene::{self, Scene, SchemeName};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    /// Malformed input or unusable paths.
    Input = 1,
    /// The integrator failed.
    Solver = 2,
    /// A derivative check failed.
    Check = 3,
}

#[derive(Debug, Parser)]
#[command(name = "shapematch", version, about = "Shape-matching simulator and derivative checker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the integrator and write the trajectory as CSV.
    Simulate(SimulateArgs),
    /// Compare every analytic derivative with finite differences.
    CheckDerivatives(CheckArgs),
    /// Print energies, gradient norm and Hessian eigenvalue range of the initial state.
    EnergyReport(EnergyArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene file, or the name of a bundled scene.
    #[arg(long)]
    pub scene: String,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Write every `stride`-th frame.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub stride: u64,
    /// Override the scene's integration scheme.
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeName>,
    /// Use only the Gauss-Newton part of the Hessian.
    #[arg(long)]
    pub gauss_newton: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Scene file, or the name of a bundled scene.
    #[arg(long, required_unless_present = "random", conflicts_with = "random")]
    pub scene: Option<String>,
    /// Random cloud with N particles in DIM dimensions from SEED.
    #[arg(long, num_args = 3, value_names = ["N", "DIM", "SEED"])]
    pub random: Option<Vec<u64>>,
    /// Report path; standard output when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Blend weight for random clouds.
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// Stiffness damping for random clouds.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Mass damping for random clouds.
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    /// Scene file, or the name of a bundled scene.
    #[arg(long)]
    pub scene: String,
    /// Report eigenvalues of the Gauss-Newton Hessian instead of the full one.
    #[arg(long)]
    pub gauss_newton: bool,
}

/// Parses `args` and runs the selected command; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Input } else { Exit::Ok };
            let text = e.render().to_string();
            let _ = if code == Exit::Ok {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code as i32;
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(&a, out),
        Command::CheckDerivatives(a) => check(&a, out),
        Command::EnergyReport(a) => energy_report(&a, out),
    };
    match result {
        Ok(()) => Exit::Ok as i32,
        Err((code, message)) => {
            let _ = writeln!(err, "error: {message}");
            code as i32
        }
    }
}

type Outcome = Result<(), (Exit, String)>;

fn input<E: std::fmt::Display>(e: E) -> (Exit, String) {
    (Exit::Input, e.to_string())
}

fn load(source: &str) -> Result<Scene, (Exit, String)> {
    scene::load(source).map(|(_, s)| s).map_err(input)
}

fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Outcome {
    let mut scene = load(&args.scene)?;
    if let Some(s) = args.scheme {
        scene.integrator.scheme = s.into();
    }
    if args.gauss_newton {
        scene.integrator.use_full_hessian = false;
    }
    let file = File::create(&args.out).map_err(|e| input(format!("cannot create {}: {e}", args.out.display())))?;
    let mut writer = TrajectoryWriter::new(BufWriter::new(file), scene.shape.dim()).map_err(input)?;
    let mut integrator = Integrator::new(&scene.shape, scene.params, scene.integrator.clone()).map_err(input)?;

    let started = Instant::now();
    let mut state = scene.state.clone();
    let mut newton_iters = 0;
    writer.frame(0, &state).map_err(input)?;
    for frame in 1..=args.steps {
        match integrator.step(&state) {
            Ok((next, stats)) => {
                newton_iters += stats.newton_iters;
                state = next;
            }
            Err(e) => {
                let residual = integrator
                    .best_iterate()
                    .and_then(|(_, s)| s.residual_history.last().copied())
                    .unwrap_or(f64::NAN);
                let _ = writer.finish();
                return Err((
                    Exit::Solver,
                    format!("solver failed at frame {frame} (residual {residual:e}): {e}"),
                ));
            }
        }
        if (frame as u64).is_multiple_of(args.stride) {
            writer.frame(frame, &state).map_err(input)?;
        }
    }
    writer.finish().map_err(input)?;
    writeln!(
        out,
        "steps={} newton_iters={} wall_time={:.3}s",
        args.steps,
        newton_iters,
        started.elapsed().as_secs_f64()
    )
    .map_err(input)?;
    Ok(())
}

fn random_scene(spec: &[u64], params: EnergyParams) -> Result<(RestShape, KinematicState, EnergyParams), (Exit, String)> {
    let (n, dim, seed) = (spec[0] as usize, spec[1] as usize, spec[2]);
    let dim = Dim::from_size(dim).map_err(|_| input(format!("--random DIM must be 2 or 3, got {dim}")))?;
    if n <= dim.size() {
        return Err(input(format!("--random N must exceed {}, got {n}", dim.size())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = random_cloud(&mut rng, dim, n);
    let state = random_state(&mut rng, &shape, 0.2);
    Ok((shape, state, params))
}

fn check(args: &CheckArgs, out: &mut dyn Write) -> Outcome {
    let (shape, state, params) = match (&args.scene, &args.random) {
        (Some(path), _) => {
            let s = load(path)?;
            (s.shape, s.state, s.params)
        }
        (None, Some(spec)) => {
            let params = EnergyParams::new(args.gamma, args.alpha, args.beta).map_err(input)?;
            random_scene(spec, params)?
        }
        (None, None) => return Err(input("one of --scene or --random is required")),
    };
    let suite = check_derivatives(&shape, &state, &params, CheckOptions { fault: args.inject_fault }).map_err(input)?;
    let text = suite.to_string();
    match &args.report {
        Some(path) => std::fs::write(path, &text).map_err(|e| input(format!("cannot write {}: {e}", path.display())))?,
        None => out.write_all(text.as_bytes()).map_err(input)?,
    }
    if suite.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = suite
            .results
            .iter()
            .filter(|r| r.status == shapematch::CheckStatus::Failed)
            .map(|r| r.name)
            .collect();
        Err((Exit::Check, format!("derivative checks failed: {}", failed.join(", "))))
    }
}

fn energy_report(args: &EnergyArgs, out: &mut dyn Write) -> Outcome {
    let scene = load(&args.scene)?;
    let frame = Frame::new(&scene.shape, scene.params, &scene.state.positions).map_err(input)?;
    let report = frame.gradient();
    let damping = frame.damping_energy(&scene.state.velocities);
    let grad_norm = report.gradient.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    let variant = if args.gauss_newton {
        HessianVariant::GaussNewton
    } else {
        HessianVariant::Full
    };
    let (min, max) = frame.hessian(variant).map_err(input)?.extreme_eigenvalues();
    let lines = [
        ("V", report.value),
        ("V_da", damping.stiffness),
        ("V_db", damping.mass),
        ("V_d", damping.total),
        ("grad_norm", grad_norm),
        ("hessian_min_eig", min),
        ("hessian_max_eig", max),
    ];
    for (key, value) in lines {
        writeln!(out, "{key}={value}").map_err(input)?;
    }
    Ok(())
}
