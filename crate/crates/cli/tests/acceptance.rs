//! Acceptance suite: runs the presets and a few variants, then checks every
//! criterion at its stated tolerance and prints one line per criterion.
//! Exits nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::process::ExitCode;
use std::time::Instant;

use hjlab::analysis::{no_doubling, COUPLING_CHAIN, COUPLING_PAIR, GENERAL_1, I1, I2, II};
use hjlab::problem::{CHECK_ENTRY_GRADIENT, CHECK_TRACE};
use hjlab::{DiffusionSpec, HamiltonianSpec, Profile, TrigPoly};
use hjlab_cli::presets::SWEEP;
use hjlab_cli::{
    preset, run_experiment, ExperimentConfig, GridConfig, InitialConfig, RunOutcome, StageConfig, StageKind,
    StageStatus, StageSummary,
};

const MASS_TOL: f64 = 1e-10;
const POSITIVITY_TOL: f64 = -1e-12;
const DRIFT_TOL: f64 = 1e-8;
const GAP_RATIO: f64 = 3.5;
const SWEEP_SLOPE: f64 = 1.7;
const GRADIENT_VARIATION: f64 = 0.2;
const BENCHMARK_TOL: f64 = 1e-2;
const VANISH_TOL: f64 = 1e-10;
const RATE_SLOPE: f64 = 0.25 - 0.05;
const CHAIN_SLOPE: f64 = 0.8;
const LONGTIME_TOL: f64 = 1e-2;

struct Run {
    outcome: Result<RunOutcome, String>,
    seconds: f64,
}

type Runs = BTreeMap<&'static str, Run>;

type Criterion = fn(&Runs) -> Result<Verdict, String>;

fn run(name: &'static str, mut config: ExperimentConfig, dir: &std::path::Path, runs: &mut Runs) {
    config.output.directory = dir.join(name);
    eprintln!("running {name} ...");
    let start = Instant::now();
    let outcome = run_experiment(&config).map_err(|e| e.to_string());
    let seconds = start.elapsed().as_secs_f64();
    eprintln!("  {name} finished in {seconds:.1} s");
    runs.insert(name, Run { outcome, seconds });
}

fn outcome<'a>(runs: &'a Runs, name: &str) -> Result<&'a RunOutcome, String> {
    let run = runs.get(name).ok_or_else(|| format!("{name} was not run"))?;
    run.outcome.as_ref().map_err(|e| format!("{name}: {e}"))
}

/// Summary of a stage that ran and passed.
fn stage<'a>(runs: &'a Runs, name: &str, stage: &str) -> Result<&'a StageSummary, String> {
    let o = outcome(runs, name)?;
    let record = o.manifest.record(stage).ok_or_else(|| format!("{name}/{stage} missing"))?;
    if record.status != StageStatus::Passed {
        return Err(format!("{name}/{stage} {:?}: {}", record.status, record.error.clone().unwrap_or_default()));
    }
    o.summary.stage(stage).ok_or_else(|| format!("{name}/{stage} has no summary"))
}

fn metric(runs: &Runs, name: &str, stage_name: &str, key: &str) -> Result<f64, String> {
    stage(runs, name, stage_name)?.metric(key).ok_or_else(|| format!("{name}/{stage_name} has no metric {key}"))
}

fn series(runs: &Runs, name: &str, stage_name: &str, quantity: &str) -> Result<Vec<(f64, f64)>, String> {
    let s = stage(runs, name, stage_name)?.series(quantity);
    if s.is_empty() {
        return Err(format!("{name}/{stage_name} has no series {quantity}"));
    }
    Ok(s)
}

fn flag(runs: &Runs, name: &str, stage: &str, key: &str) -> Result<bool, String> {
    metric(runs, name, stage, key).map(|v| v == 1.0)
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict, String> {
    Ok(Verdict { pass, detail })
}

fn profiles(polys: Vec<TrigPoly>) -> InitialConfig {
    InitialConfig::Profiles { profiles: polys.into_iter().map(Profile::trig).collect() }
}

/// Both equations identical, with identical data: the coupling term vanishes.
fn symmetric_system() -> ExperimentConfig {
    let mut c = preset("rate-system").unwrap();
    c.name = "symmetric-system".into();
    let h = c.problem.hamiltonians[0].clone();
    c.problem.hamiltonians = vec![h.clone(), h];
    let eps = &SWEEP[..3];
    c.stages = vec![
        StageConfig::new("cell", StageKind::ErgodicSweep).with_epsilons(eps),
        StageConfig::new("estimates", StageKind::Estimates)
            .after("cell")
            .with_epsilons(eps)
            .with_initial(profiles(vec![TrigPoly::cos(0.1, [1, 0]), TrigPoly::cos(0.1, [1, 0])])),
    ];
    c
}

/// Three equations coupled in a chain.
fn chain_system() -> ExperimentConfig {
    let mut c = preset("rate-system").unwrap();
    c.name = "chain-system".into();
    c.problem.coupling = Some(vec![vec![1.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 1.0]]);
    c.problem.hamiltonians.push(HamiltonianSpec::quadratic(TrigPoly::cos(0.1, [2, 0])));
    c.stages = vec![
        StageConfig::new("cell", StageKind::ErgodicSweep).with_epsilons(&SWEEP),
        StageConfig::new("estimates", StageKind::Estimates)
            .after("cell")
            .with_epsilons(&SWEEP)
            .with_initial(profiles(vec![TrigPoly::cos(0.1, [1, 0]), TrigPoly::sin(0.1, [1, 0]), TrigPoly::zero()])),
    ];
    c
}

/// Two dimensions with the rank-one matrix diffusion `σσᵀ`.
fn general_case() -> ExperimentConfig {
    let mut c = preset("energy-audit").unwrap();
    c.name = "general-case".into();
    c.grid = GridConfig { dim: 2, n: 64 };
    c.problem.gradient_bound = 2.0;
    c.problem.normalize = true;
    c.problem.diffusion = DiffusionSpec::SigmaSigmaT { amplitude: 1.0 };
    c.problem.hamiltonians =
        vec![HamiltonianSpec::quadratic(TrigPoly::cos(0.3, [1, 0]).plus(TrigPoly::sin(0.2, [0, 1])))];
    let eps = [0.25, 0.125, 0.0625];
    let u0 = || profiles(vec![TrigPoly::cos(0.1, [1, 1])]);
    c.stages = vec![
        StageConfig { samples: 10_000, ..StageConfig::new("validate", StageKind::Validate) },
        StageConfig::new("cell", StageKind::ErgodicSweep).with_epsilons(&eps),
        StageConfig { dt_refinements: 1, ..StageConfig::new("audit", StageKind::AdjointAudit) }
            .with_epsilons(&[0.125])
            .with_initial(u0()),
        StageConfig::new("estimates", StageKind::Estimates).after("cell").with_epsilons(&eps).with_initial(u0()),
    ];
    c
}

fn criterion_1(runs: &Runs) -> Result<Verdict, String> {
    let scalar = metric(runs, "energy-audit", "audit", "max_mass_error")?;
    let system = metric(runs, "rate-system", "estimates", "max_mass_error")?;
    let seconds = runs["energy-audit"].seconds;
    verdict(
        scalar <= MASS_TOL && system <= MASS_TOL && seconds < 60.0,
        format!("max |mass - 1|: scalar {scalar:.2e}, 2-system {system:.2e} (tol {MASS_TOL:.0e}); scalar run {seconds:.1} s"),
    )
}

fn criterion_2(runs: &Runs) -> Result<Verdict, String> {
    let mut min = f64::INFINITY;
    let mut count = 0;
    for (name, run) in runs {
        let o = run.outcome.as_ref().map_err(|e| format!("{name}: {e}"))?;
        for s in &o.summary.stages {
            if let Some(v) = s.metric("min_density") {
                min = min.min(v);
                count += 1;
            }
        }
    }
    verdict(
        count > 0 && min >= POSITIVITY_TOL,
        format!("min node density {min:.2e} over {count} stages (tol {POSITIVITY_TOL:.0e})"),
    )
}

fn criterion_3(runs: &Runs) -> Result<Verdict, String> {
    let drift = metric(runs, "energy-audit", "audit", "max_energy_drift")?;
    verdict(drift <= DRIFT_TOL, format!("energy drift {drift:.2e} (tol {DRIFT_TOL:.0e})"))
}

fn criterion_4(runs: &Runs) -> Result<Verdict, String> {
    let allowance = metric(runs, "energy-audit", "audit", "representation_allowance_ratio")?;
    let gap = metric(runs, "energy-audit", "audit", "max_representation_gap")?;
    let ratio = metric(runs, "energy-audit", "audit", "min_gap_ratio")?;
    verdict(
        allowance <= 1.0 && ratio >= GAP_RATIO,
        format!(
            "gap {gap:.2e} at {allowance:.2e} of allowance max(1e-6, 5 dt^2) max(1, |lhs|); halving dt shrinks it {ratio:.2}x (need {GAP_RATIO})"
        ),
    )
}

fn criterion_5(runs: &Runs) -> Result<Verdict, String> {
    let slope = metric(runs, "ergodic-sweep", "cell", "slope")?;
    let variation = metric(runs, "ergodic-sweep", "cell", "gradient_variation")?;
    verdict(
        slope >= SWEEP_SLOPE && variation <= GRADIENT_VARIATION,
        format!(
            "slope of |Hbar| {slope:.3} (need {SWEEP_SLOPE}); gradient variation {:.2}% (max 20%)",
            100.0 * variation
        ),
    )
}

fn criterion_6(runs: &Runs) -> Result<Verdict, String> {
    // With a ≡ 0 and H = ½p² + V the constant is max V; sample V densely.
    let oracle = (0..1_000_000).map(|i| (TAU * i as f64 / 1e6).cos()).fold(f64::NEG_INFINITY, f64::max);
    let hbar = metric(runs, "longtime", "benchmark", "hbar")?;
    verdict(
        (hbar - oracle).abs() <= BENCHMARK_TOL,
        format!("Hbar {hbar:.5} vs oracle {oracle:.5}, |diff| {:.2e} (tol {BENCHMARK_TOL:.0e})", (hbar - oracle).abs()),
    )
}

fn criterion_7(runs: &Runs) -> Result<Verdict, String> {
    let r = "rate-scalar";
    let bounded = flag(runs, r, "estimates", &format!("{I1}_no_doubling"))?
        && flag(runs, r, "estimates", &format!("{I2}_no_doubling"))?
        && flag(runs, r, "estimates", &format!("{II}_no_doubling"))?;
    let i1 = metric(runs, r, "estimates", &format!("{I1}_max"))?;
    let i2 = metric(runs, r, "estimates", &format!("{I2}_max"))?;
    let c_ii = metric(runs, r, "estimates", &format!("{II}_bound"))?;
    let steady =
        [I1, I2, II].iter().map(|q| metric(runs, r, "steady", &format!("{q}_max"))).collect::<Result<Vec<_>, _>>()?;
    let steady_max = steady.iter().copied().fold(0.0, f64::max);
    verdict(
        bounded && [i1, i2, c_ii].iter().all(|v| v.is_finite()) && steady_max <= VANISH_TOL,
        format!(
            "max I1 {i1:.3e}, max I2 {i2:.3e}, II <= {c_ii:.3e} sqrt(eps), no doubling {bounded}; from the corrector max {steady_max:.2e} (tol {VANISH_TOL:.0e})"
        ),
    )
}

fn criterion_8(runs: &Runs) -> Result<Verdict, String> {
    let c = metric(runs, "rate-scalar", "rate", "envelope_constant")?;
    let slope = metric(runs, "rate-scalar", "rate", "slope")?;
    verdict(
        c.is_finite() && slope >= RATE_SLOPE,
        format!("value <= {c:.4e} eps^(1/4) on every row; fitted slope {slope:.3} (need {RATE_SLOPE})"),
    )
}

fn criterion_9(runs: &Runs) -> Result<Verdict, String> {
    let c = metric(runs, "rate-scalar", "closeness", "bound_constant")?;
    let bounded = flag(runs, "rate-scalar", "closeness", "no_doubling")?;
    verdict(c.is_finite() && bounded, format!("distance/eps <= {c:.4e} on every row, no doubling {bounded}"))
}

fn criterion_10(runs: &Runs) -> Result<Verdict, String> {
    let mass = metric(runs, "rate-system", "estimates", "max_mass_error")?;
    let pair_bound = metric(runs, "coupling-audit", "estimates", &format!("{COUPLING_PAIR}_bound"))?;
    let pair_bounded = flag(runs, "coupling-audit", "estimates", &format!("{COUPLING_PAIR}_no_doubling"))?;
    let symmetric = metric(runs, "symmetric-system", "estimates", &format!("{COUPLING_PAIR}_max"))?;
    let rate = series(runs, "rate-system", "rate", "rate")?;
    let scaled: Vec<f64> = rate.iter().map(|(e, v)| v / e.sqrt()).collect();
    let rate_bound = scaled.iter().copied().fold(0.0, f64::max);
    let rate_bounded = no_doubling(&scaled);
    let decreasing = flag(runs, "chain-system", "estimates", &format!("{COUPLING_CHAIN}_decreasing"))?;
    let chain_slope = metric(runs, "chain-system", "estimates", &format!("{COUPLING_CHAIN}_slope"))?;
    verdict(
        mass <= MASS_TOL
            && pair_bound.is_finite()
            && pair_bounded
            && symmetric <= VANISH_TOL
            && rate_bound.is_finite()
            && rate_bounded
            && decreasing
            && chain_slope >= CHAIN_SLOPE,
        format!(
            "mass {mass:.2e}; pair/eps <= {pair_bound:.3e} (no doubling {pair_bounded}); symmetric pair {symmetric:.2e}; rate <= {rate_bound:.3e} sqrt(eps) (no doubling {rate_bounded}); chain decreasing {decreasing}, slope {chain_slope:.3} (need {CHAIN_SLOPE})"
        ),
    )
}

fn criterion_11(runs: &Runs) -> Result<Verdict, String> {
    let d = metric(runs, "longtime", "longtime", "final_adjusted_distance")?;
    let monotone = flag(runs, "longtime", "longtime", "non_increasing")?;
    verdict(
        d <= LONGTIME_TOL && monotone,
        format!(
            "adjusted distance at t = 100 {d:.2e} (tol {LONGTIME_TOL:.0e}); non-increasing at integer times {monotone}"
        ),
    )
}

fn criterion_12(runs: &Runs) -> Result<Verdict, String> {
    let g = "general-case";
    let mass = metric(runs, g, "audit", "max_mass_error")?.max(metric(runs, g, "estimates", "max_mass_error")?);
    let density = metric(runs, g, "audit", "min_density")?.min(metric(runs, g, "estimates", "min_density")?);
    let drift = metric(runs, g, "audit", "max_energy_drift")?;
    let allowance = metric(runs, g, "audit", "representation_allowance_ratio")?;
    let ratio = metric(runs, g, "audit", "min_gap_ratio")?;
    let general = metric(runs, g, "estimates", &format!("{GENERAL_1}_max"))?;
    let general_bounded = flag(runs, g, "estimates", &format!("{GENERAL_1}_no_doubling"))?;
    let sv1 = metric(runs, g, "validate", &format!("H1/{CHECK_ENTRY_GRADIENT}"))?;
    let sv2 = metric(runs, g, "validate", &format!("H1/{CHECK_TRACE}"))?;
    let failed = metric(runs, g, "validate", "failed_checks")?;
    verdict(
        mass <= MASS_TOL
            && density >= POSITIVITY_TOL
            && drift <= DRIFT_TOL
            && allowance <= 1.0
            && ratio >= GAP_RATIO
            && general.is_finite()
            && general_bounded
            && failed == 0.0,
        format!(
            "mass {mass:.2e}, min density {density:.2e}, drift {drift:.2e}, gap allowance {allowance:.2e}, gap ratio {ratio:.2}; max general_1 {general:.3e} (no doubling {general_bounded}); validator constants {sv1:.3e}, {sv2:.3e}, failed checks {failed}"
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary output directory");
    let mut runs = Runs::new();
    for name in ["energy-audit", "ergodic-sweep", "rate-scalar", "rate-system", "coupling-audit", "longtime"] {
        run(name, preset(name).unwrap(), dir.path(), &mut runs);
    }
    run("symmetric-system", symmetric_system(), dir.path(), &mut runs);
    run("chain-system", chain_system(), dir.path(), &mut runs);
    run("general-case", general_case(), dir.path(), &mut runs);

    let criteria: [(&str, Criterion); 12] = [
        ("adjoint mass conservation", criterion_1),
        ("adjoint positivity", criterion_2),
        ("conservation of energy", criterion_3),
        ("representation formula", criterion_4),
        ("ergodic-constant rate", criterion_5),
        ("first-order benchmark", criterion_6),
        ("key estimates", criterion_7),
        ("rate envelope", criterion_8),
        ("closeness", criterion_9),
        ("systems", criterion_10),
        ("large-time convergence", criterion_11),
        ("general case", criterion_12),
    ];
    let mut failures = 0;
    for (i, (title, check)) in criteria.iter().enumerate() {
        let (pass, detail) = match check(&runs) {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!("criterion {:>2} {} {title}: {detail}", i + 1, if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
