use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hjlab::forward::{SpatialOperator, Stepper, DEFAULT_SOLVER_TOLERANCE};
use hjlab::{
    linearize, solve_cauchy, solve_ergodic, DiffusionSpec, ErgodicOptions, HamiltonianSpec, PeriodicGrid, ProblemSpec,
    ScalarField, SolveOptions, TrigPoly,
};

fn problem(diffusion: DiffusionSpec) -> ProblemSpec {
    let potential = TrigPoly::cos(0.3, [1, 0]).plus(TrigPoly::sin(0.2, [0, 1]));
    ProblemSpec::scalar(HamiltonianSpec::quadratic(potential), diffusion, 0.125).with_gradient_bound(2.0)
}

fn initial(grid: PeriodicGrid) -> ScalarField {
    ScalarField::from_fn(grid, |x| 0.1 * (std::f64::consts::TAU * (x[0] + x[1])).cos())
}

fn forward_step(c: &mut Criterion) {
    let cases = [
        ("forward_step_1d_n256", PeriodicGrid::new(1, 256).unwrap(), DiffusionSpec::SinSquared { amplitude: 1.0 }),
        ("forward_step_2d_n64", PeriodicGrid::new(2, 64).unwrap(), DiffusionSpec::SigmaSigmaT { amplitude: 1.0 }),
    ];
    for (name, grid, diffusion) in cases {
        let op = SpatialOperator::new(&problem(diffusion), grid).unwrap();
        let dt = op.cfl_time_step();
        let stepper = Stepper::new(op, dt, DEFAULT_SOLVER_TOLERANCE).unwrap();
        let w = initial(grid).into_values();
        c.bench_function(name, |b| b.iter(|| stepper.step(black_box(&w), 0).unwrap()));
    }
}

fn adjoint_step(c: &mut Criterion) {
    let grid = PeriodicGrid::new(1, 256).unwrap();
    let p = problem(DiffusionSpec::SinSquared { amplitude: 1.0 });
    let (traj, _) = solve_cauchy(&p, &initial(grid), 0.01, SolveOptions::default()).unwrap();
    let lin = linearize(&traj).unwrap();
    let step = lin.step(0);
    let sigma = vec![1.0; grid.len()];
    c.bench_function("adjoint_step_1d_n256", |b| b.iter(|| step.apply_transpose(black_box(&sigma)).unwrap()));
}

fn ergodic_solve(c: &mut Criterion) {
    let grid = PeriodicGrid::new(1, 64).unwrap();
    let p = problem(DiffusionSpec::Constant { value: 0.05 });
    let mut group = c.benchmark_group("ergodic");
    group.sample_size(10);
    group.bench_function("solve_1d_n64", |b| {
        b.iter_batched(
            || p.clone(),
            |p| solve_ergodic(&p, grid, ErgodicOptions::default()).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, forward_step, adjoint_step, ergodic_solve);
criterion_main!(benches);
