use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapematch::random::{grid_2d, random_cloud, random_state};
use shapematch::{
    check_derivatives, simulate, CheckOptions, CheckStatus, Dim, EnergyParams, IntegratorConfig, KinematicState,
    RestShape, Scheme, Vec3,
};

fn patch() -> (RestShape, KinematicState, IntegratorConfig) {
    let (nx, ny) = (5, 4);
    let raw = grid_2d(nx, ny, 0.25);
    let shape = RestShape::new(Dim::Two, &raw, &vec![0.2; raw.len()], &vec![400.0; raw.len()]).unwrap();
    let mut cfg = IntegratorConfig::new(1.0 / 60.0);
    cfg.gravity = Vec3::new(0.0, -9.8, 0.0);
    cfg.pinned = ((ny - 1) * nx..ny * nx).collect();
    (shape, KinematicState::at_rest(raw), cfg)
}

#[test]
fn pinned_patch_reaches_steady_state() {
    let (shape, start, cfg) = patch();
    let params = EnergyParams::new(0.5, 0.1, 0.01).unwrap();
    let traj = simulate(&start, &shape, &params, &cfg, 2000).unwrap();
    let last = traj.frames.last().unwrap();
    let speed = last.velocities.iter().map(|v| v.norm()).fold(0.0, f64::max);
    assert!(speed < 1e-6, "max |v| = {speed}");
    let sag = start.positions[0].y - last.positions[0].y;
    assert!(sag > 0.0);
    for &p in &cfg.pinned {
        assert_eq!(last.positions[p], start.positions[p]);
    }
}

#[test]
fn bdf2_and_gauss_newton_agree_on_the_patch() {
    let (shape, start, mut cfg) = patch();
    let params = EnergyParams::new(0.5, 0.1, 0.01).unwrap();
    cfg.newton_tol = Some(1e-10);
    let full = simulate(&start, &shape, &params, &cfg, 60).unwrap();
    cfg.use_full_hessian = false;
    let gn = simulate(&start, &shape, &params, &cfg, 60).unwrap();
    for (a, b) in full.frames.iter().zip(&gn.frames) {
        for (p, q) in a.positions.iter().zip(&b.positions) {
            assert!((p - q).norm() < 1e-9);
        }
    }
    assert!(gn.total_newton_iters() >= full.total_newton_iters());

    cfg.use_full_hessian = true;
    cfg.scheme = Scheme::Bdf2;
    let bdf = simulate(&start, &shape, &params, &cfg, 60).unwrap();
    assert_eq!(bdf.frames.len(), 61);
    let drift = (bdf.frames[60].positions[0] - full.frames[60].positions[0]).norm();
    assert!(drift < 0.05, "{drift}");
}

#[test]
fn derivative_suite_on_seeded_clouds() {
    for seed in 0..6u64 {
        let dim = if seed % 2 == 0 { Dim::Two } else { Dim::Three };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_cloud(&mut rng, dim, 5 + seed as usize);
        let state = random_state(&mut rng, &shape, 0.2);
        for gamma in [0.0, 0.5, 1.0] {
            let params = EnergyParams::new(gamma, 0.1, 0.01).unwrap();
            let suite = check_derivatives(&shape, &state, &params, CheckOptions::default()).unwrap();
            assert!(suite.all_passed(), "seed {seed} gamma {gamma}\n{suite}");
            let skipped = suite.results.iter().filter(|r| r.status == CheckStatus::Skipped).count();
            assert_eq!(skipped > 0, gamma == 1.0);
        }
    }
}
