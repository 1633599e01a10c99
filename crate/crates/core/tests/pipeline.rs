use hjlab::analysis::{pipeline_row, InitialData, PipelineOptions, COUPLING_PAIR, I1, I2, II};
use hjlab::ergodic::{discounted_constant, solve_system_ergodic};
use hjlab::{
    CouplingMatrix, DiffusionSpec, ErgodicOptions, HamiltonianSpec, PeriodicGrid, ProblemSpec, Profile, TrigPoly,
};

fn manufactured(grid_bound: f64) -> ProblemSpec {
    let a = DiffusionSpec::SinSquared { amplitude: 1.0 };
    let h = HamiltonianSpec::Manufactured {
        corrector: TrigPoly::sin(0.15, [1, 0]),
        diffusion: a.clone(),
        shift: 0.0,
        discrete_correction: true,
    };
    ProblemSpec::scalar(h, a, 1.0).with_gradient_bound(grid_bound)
}

#[test]
fn manufactured_corrector_is_recovered() {
    let grid = PeriodicGrid::new(1, 128).unwrap();
    let problem = manufactured(2.0).with_eta(0.0);
    let s = hjlab::solve_ergodic(&problem, grid, ErgodicOptions::default()).unwrap();
    assert!(s.ergodic_constant.abs() < 1e-9, "{}", s.ergodic_constant);
    // The corrector is unique only up to a constant.
    let exact = TrigPoly::sin(0.15, [1, 0]).sample(grid);
    let diff: Vec<f64> = s.corrector[0].values().iter().zip(exact.values()).map(|(a, b)| a - b).collect();
    let mean = diff.iter().sum::<f64>() / diff.len() as f64;
    assert!(diff.iter().all(|d| (d - mean).abs() < 1e-7));
}

#[test]
fn discounted_constant_approaches_ergodic_constant() {
    let grid = PeriodicGrid::new(1, 64).unwrap();
    let problem = ProblemSpec::scalar(
        HamiltonianSpec::quadratic(TrigPoly::cos(0.3, [1, 0])),
        DiffusionSpec::SinSquared { amplitude: 0.5 },
        1.0,
    )
    .with_gradient_bound(2.0)
    .with_eta(0.0);
    let c = hjlab::solve_ergodic(&problem, grid, ErgodicOptions::default()).unwrap().ergodic_constant;
    let gaps: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&d| (discounted_constant(&problem, grid, d, 1e-10, 5000.0).unwrap() - c).abs())
        .collect();
    // First order in the discount.
    assert!(gaps.windows(2).all(|w| w[1] < 0.7 * w[0]), "{gaps:?}");
}

#[test]
fn scalar_pipeline_conserves_mass_and_energy() {
    let grid = PeriodicGrid::new(1, 128).unwrap();
    let initial = InitialData::Profiles(vec![Profile::trig(TrigPoly::cos(0.1, [1, 0]))]);
    let row = pipeline_row(&manufactured(2.0), grid, 0.25, &initial, PipelineOptions::default()).unwrap();
    assert!(row.max_mass_error < 1e-10);
    assert!(row.min_density >= -1e-12);
    assert!(row.energy_drift < 1e-8);
    assert!(row.representation.gap < 1e-8 * row.representation.lhs.abs().max(1.0));
    for q in [I1, I2, II] {
        assert!(row.estimates.get(q).is_some_and(f64::is_finite), "{q}");
    }

    // Started at the corrector nothing moves.
    let steady =
        pipeline_row(&manufactured(2.0), grid, 0.25, &InitialData::Corrector, PipelineOptions::default()).unwrap();
    for q in [I1, I2, II] {
        assert!(steady.estimates.get(q).unwrap() < 1e-10, "{q}");
    }
}

#[test]
fn identical_equations_have_no_coupling_term() {
    let grid = PeriodicGrid::new(1, 64).unwrap();
    let h = HamiltonianSpec::quadratic(TrigPoly::cos(0.3, [1, 0]));
    let family = ProblemSpec::system(
        vec![h.clone(), h.clone()],
        DiffusionSpec::SinSquared { amplitude: 1.0 },
        CouplingMatrix::new(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap(),
        1.0,
    )
    .with_gradient_bound(2.0);
    // Oracle: the scalar problem with the same Hamiltonian.
    let scalar = ProblemSpec::scalar(h, DiffusionSpec::SinSquared { amplitude: 1.0 }, 0.5).with_gradient_bound(2.0);
    let single = hjlab::solve_ergodic(&scalar.with_eta(0.0625), grid, ErgodicOptions::default()).unwrap();
    let system = solve_system_ergodic(&family.clone().at_epsilon(0.5), grid, ErgodicOptions::default()).unwrap();
    assert!((system.ergodic_constant - single.ergodic_constant).abs() < 1e-9);

    let u0 = Profile::trig(TrigPoly::sin(0.1, [1, 0]));
    let initial = InitialData::Profiles(vec![u0.clone(), u0]);
    let row = pipeline_row(&family, grid, 0.5, &initial, PipelineOptions::default()).unwrap();
    assert!(row.max_mass_error < 1e-10);
    assert!(row.estimates.get(COUPLING_PAIR).unwrap() < 1e-10);
}

#[test]
fn general_case_drift_tracks_solver_tolerance() {
    let grid = PeriodicGrid::new(2, 24).unwrap();
    let family = ProblemSpec::scalar(
        HamiltonianSpec::quadratic(TrigPoly::cos(0.3, [1, 0]).plus(TrigPoly::sin(0.2, [0, 1]))),
        DiffusionSpec::SigmaSigmaT { amplitude: 1.0 },
        1.0,
    )
    .with_gradient_bound(2.0);
    let initial = InitialData::Profiles(vec![Profile::trig(TrigPoly::cos(0.1, [1, 1]))]);
    let drift = |tol: f64| {
        let mut opts = PipelineOptions::default();
        opts.solve = opts.solve.with_tolerance(tol);
        let row = pipeline_row(&family, grid, 0.25, &initial, opts).unwrap();
        assert!(row.max_mass_error < 1e-10 && row.min_density >= -1e-12);
        assert!(row.estimates.get(hjlab::analysis::GENERAL_1).is_some_and(f64::is_finite));
        row.energy_drift
    };
    let tight = drift(1e-12);
    let loose = drift(1e-6);
    assert!(tight < 1e-8, "{tight}");
    assert!(tight < loose, "{tight} vs {loose}");
}
