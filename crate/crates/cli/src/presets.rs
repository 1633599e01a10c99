//! Built-in experiments, each sized to finish in minutes on one workstation.
//! The annotated TOML form of each lives in `configs/<name>.toml`.

use hjlab::{DiffusionSpec, HamiltonianSpec, Profile, TrigPoly};

use crate::config::{ExperimentConfig, GridConfig, InitialConfig, OutputConfig, ProblemConfig, StageConfig, StageKind};
use crate::CliError;

pub const PRESET_NAMES: [&str; 6] =
    ["rate-scalar", "rate-system", "energy-audit", "ergodic-sweep", "coupling-audit", "longtime"];

/// `ε = 2⁻², …, 2⁻⁶`.
pub const SWEEP: [f64; 5] = [0.25, 0.125, 0.0625, 0.03125, 0.015625];

pub fn preset(name: &str) -> Result<ExperimentConfig, CliError> {
    match name {
        "rate-scalar" => Ok(rate_scalar()),
        "rate-system" => Ok(rate_system()),
        "energy-audit" => Ok(energy_audit()),
        "ergodic-sweep" => Ok(ergodic_sweep()),
        "coupling-audit" => Ok(coupling_audit()),
        "longtime" => Ok(longtime()),
        other => Err(CliError::UnknownPreset(other.into())),
    }
}

fn config(name: &str, n: usize, problem: ProblemConfig, stages: Vec<StageConfig>) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        grid: GridConfig { dim: 1, n },
        problem,
        output: OutputConfig { directory: format!("out/{name}").into(), ..OutputConfig::default() },
        stages,
    }
}

fn degenerate() -> DiffusionSpec {
    DiffusionSpec::SinSquared { amplitude: 1.0 }
}

/// Known corrector `0.15 sin(2πx)` with constant 0, corrected so that the
/// sampled corrector is an exact discrete steady state.
pub fn manufactured_problem() -> ProblemConfig {
    ProblemConfig {
        gradient_bound: 2.0,
        normalize: false,
        coupling: None,
        diffusion: degenerate(),
        hamiltonians: vec![HamiltonianSpec::Manufactured {
            corrector: TrigPoly::sin(0.15, [1, 0]),
            diffusion: degenerate(),
            shift: 0.0,
            discrete_correction: true,
        }],
    }
}

/// Two quadratic Hamiltonians with different potentials, normalized so the
/// limit constant is zero.
pub fn system_problem(coupling: Vec<Vec<f64>>) -> ProblemConfig {
    ProblemConfig {
        gradient_bound: 2.0,
        normalize: true,
        coupling: Some(coupling),
        diffusion: degenerate(),
        hamiltonians: vec![
            HamiltonianSpec::quadratic(TrigPoly::cos(0.3, [1, 0])),
            HamiltonianSpec::quadratic(TrigPoly::sin(0.2, [1, 0])),
        ],
    }
}

fn profiles(polys: Vec<TrigPoly>) -> InitialConfig {
    InitialConfig::Profiles { profiles: polys.into_iter().map(Profile::trig).collect() }
}

fn scalar_initial() -> InitialConfig {
    profiles(vec![TrigPoly::cos(0.1, [1, 0]).plus(TrigPoly::sin(0.05, [2, 0]))])
}

fn system_initial() -> InitialConfig {
    profiles(vec![TrigPoly::cos(0.1, [1, 0]), TrigPoly::sin(0.1, [1, 0])])
}

fn validate() -> StageConfig {
    StageConfig::new("validate", StageKind::Validate)
}

fn manufactured_sweep() -> StageConfig {
    StageConfig {
        reference_constant: Some(0.0),
        ..StageConfig::new("cell", StageKind::ErgodicSweep).with_epsilons(&SWEEP)
    }
}

fn rate_scalar() -> ExperimentConfig {
    let stages = vec![
        validate(),
        manufactured_sweep(),
        StageConfig::new("estimates", StageKind::Estimates)
            .after("cell")
            .with_epsilons(&SWEEP)
            .with_initial(scalar_initial()),
        StageConfig::new("steady", StageKind::Estimates)
            .after("cell")
            .with_epsilons(&SWEEP)
            .with_initial(InitialConfig::Corrector),
        StageConfig { exponent: Some(0.25), ..StageConfig::new("rate", StageKind::Rate) }
            .with_epsilons(&SWEEP)
            .with_initial(scalar_initial()),
        StageConfig::new("closeness", StageKind::Closeness).with_epsilons(&SWEEP).with_initial(scalar_initial()),
    ];
    config("rate-scalar", 256, manufactured_problem(), stages)
}

fn ergodic_sweep() -> ExperimentConfig {
    config("ergodic-sweep", 256, manufactured_problem(), vec![validate(), manufactured_sweep()])
}

fn energy_audit() -> ExperimentConfig {
    let problem = ProblemConfig {
        gradient_bound: 3.0,
        normalize: false,
        coupling: None,
        diffusion: degenerate(),
        hamiltonians: vec![HamiltonianSpec::quadratic(TrigPoly::cos(0.5, [1, 0]))],
    };
    let audit = StageConfig {
        dt_refinements: 1,
        solver_tolerance: 1e-12,
        ..StageConfig::new("audit", StageKind::AdjointAudit)
            .with_epsilons(&[0.125])
            .with_initial(profiles(vec![TrigPoly::cos(0.2, [1, 0])]))
    };
    config("energy-audit", 256, problem, vec![validate(), audit])
}

fn system_stages(rate: bool) -> Vec<StageConfig> {
    let mut stages = vec![
        validate(),
        StageConfig::new("cell", StageKind::ErgodicSweep).with_epsilons(&SWEEP),
        StageConfig::new("estimates", StageKind::Estimates)
            .after("cell")
            .with_epsilons(&SWEEP)
            .with_initial(system_initial()),
    ];
    if rate {
        stages.push(
            StageConfig { exponent: Some(0.5), ..StageConfig::new("rate", StageKind::Rate) }
                .with_epsilons(&SWEEP)
                .with_initial(system_initial()),
        );
    }
    stages
}

fn rate_system() -> ExperimentConfig {
    config("rate-system", 256, system_problem(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]), system_stages(true))
}

fn coupling_audit() -> ExperimentConfig {
    config("coupling-audit", 256, system_problem(vec![vec![1.0, -1.0], vec![-2.0, 2.0]]), system_stages(false))
}

fn longtime() -> ExperimentConfig {
    let problem = ProblemConfig {
        gradient_bound: 3.0,
        normalize: false,
        coupling: None,
        diffusion: DiffusionSpec::Zero,
        hamiltonians: vec![HamiltonianSpec::quadratic(TrigPoly::cos(1.0, [1, 0]))],
    };
    let eps = [0.03125];
    let stages = vec![
        validate(),
        StageConfig {
            local_box: Some(1.5),
            reference_constant: Some(1.0),
            ..StageConfig::new("benchmark", StageKind::ErgodicSweep).with_epsilons(&eps)
        },
        StageConfig::new("cell", StageKind::ErgodicSweep).with_epsilons(&eps),
        StageConfig { t_final: 100, ..StageConfig::new("longtime", StageKind::Longtime) }
            .after("cell")
            .with_epsilons(&eps)
            .with_initial(profiles(vec![TrigPoly::zero()])),
    ];
    config("longtime", 512, problem, stages)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in PRESET_NAMES {
            let c = preset(name).unwrap();
            assert_eq!(c.name, name);
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(matches!(preset("unknown"), Err(CliError::UnknownPreset(_))));
    }
}
