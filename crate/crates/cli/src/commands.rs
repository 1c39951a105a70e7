//! Command implementations. Each command loads and validates its scenario,
//! runs the corresponding core workflow, writes its artifacts under the
//! configured output directory, and records them in a run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use sepctl::lti::{Dims, QuadraticCostSpec, TimeVaryingLinearSystem};
use sepctl::noise::NoiseSpec;
use sepctl::oracle::example::{reproduce_example, CovarianceSign, ExampleOptions};
use sepctl::sim::{
    closed_loop_learn, evaluate_strategy, run_monte_carlo, write_episode_csv,
    DisturbanceConditioner, LearnOptions, SimOptions, SimSetup, SlotPolicy,
};
use sepctl::solver::{solve_tracking_lq, CostReport, StrategyParameterization};

use crate::config::{Scenario, ScenarioConfig};
use crate::manifest::RunManifest;
use crate::CliError;

/// Flag overrides shared by the config-driven commands. `None` keeps the
/// value from the config's `[run]` section.
#[derive(Debug, Default, Clone, Copy)]
pub struct RunOverrides {
    pub episodes: Option<u64>,
    pub outer: Option<usize>,
    pub seed: Option<u64>,
    pub beta: Option<f64>,
}

/// Translates a core failure into the exit-code contract: validation and
/// format problems are configuration errors (2), a stalled iteration is a
/// convergence failure (4), and everything numeric is a solver failure (3).
fn core_err(e: sepctl::Error) -> CliError {
    use sepctl::Error::*;
    match &e {
        DimensionMismatch { .. } | HorizonMismatch { .. } | IndexOutOfHorizon { .. }
        | InvalidMatrix { .. } | Config(_) | Format(_) | Io(_) | LengthMismatch { .. }
        | AlreadyBound | NotBound | EmptyDensity => CliError::config(e.to_string()),
        NonConvergence { .. } => CliError::convergence(e.to_string()),
        NumericalFailure(_) | SingularRiccati { .. } | RankDeficient { .. }
        | SingularNormalEquations | SingularObservationCovariance => {
            CliError::solver(e.to_string())
        }
    }
}

fn load(config: &Path) -> Result<Scenario, CliError> {
    ScenarioConfig::load(config)?.build()
}

fn apply_beta(cost: &QuadraticCostSpec, beta: Option<f64>) -> Result<QuadraticCostSpec, CliError> {
    let mut out = cost.clone();
    if let Some(b) = beta {
        if b < 0.0 {
            return Err(CliError::config("--beta must be nonnegative".into()));
        }
        out.beta = b;
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| {
                CliError::config(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    fs::write(path, contents)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

/// Expected state trajectory of the model run open loop (zero control),
/// the default binding for a freshly synthesized strategy.
fn open_loop_targets(
    model: &TimeVaryingLinearSystem,
    noise: &NoiseSpec,
    dims: &Dims,
) -> Result<StrategyParameterization, CliError> {
    let (mut mean, _) = noise.x0_prior();
    let mut targets = Vec::with_capacity(dims.horizon + 1);
    targets.push(mean.clone());
    for t in 0..dims.horizon {
        let step = noise.step_noise(t).map_err(core_err)?;
        mean = &model.a[t] * &mean + &model.d[t] * &step.w_mean;
        targets.push(mean.clone());
    }
    Ok(StrategyParameterization::new(targets))
}

fn zero_targets(dims: &Dims) -> StrategyParameterization {
    StrategyParameterization::new(vec![DVector::zeros(dims.n); dims.horizon + 1])
}

fn synthesis_label(beta: f64) -> String {
    if beta > 0.0 {
        format!("penalized matching construction (beta {beta})")
    } else {
        "certainty-equivalent tracking (beta 0)".to_string()
    }
}

fn cost_line(name: &str, report: &CostReport) -> String {
    format!(
        "{name}: j1 {:.6} ± {:.6}   j2 {:.6} ± {:.6}   penalty {:.6}",
        report.j1_mean, report.j1_stderr, report.j2_mean, report.j2_stderr, report.penalty_mean
    )
}

pub fn cmd_solve(
    config: &Path,
    beta: Option<f64>,
    json: Option<PathBuf>,
) -> Result<(), CliError> {
    let scenario = load(config)?;
    let cost = apply_beta(&scenario.cost, beta)?;
    let mut manifest = RunManifest::begin("solve", Some(scenario.digest.clone()), scenario.run.seed);

    let strategy = solve_tracking_lq(&scenario.model, &cost, &scenario.dims).map_err(core_err)?;

    let strategy_path = scenario.output_dir.join("strategy.txt");
    write_file(&strategy_path, &strategy.export_text())?;
    manifest.record(&strategy_path);

    if let Some(json_path) = json {
        let summary = serde_json::json!({
            "command": "solve",
            "config_digest": scenario.digest,
            "beta": cost.beta,
            "synthesis": synthesis_label(cost.beta),
            "horizon": scenario.dims.horizon,
            "strategy_file": strategy_path.display().to_string(),
        });
        write_file(&json_path, &(serde_json::to_string_pretty(&summary).unwrap() + "\n"))?;
        manifest.record(&json_path);
    }
    let manifest_path = manifest.finish(&scenario.output_dir)?;

    println!("config digest: {}", scenario.digest);
    println!("synthesis: {}", synthesis_label(cost.beta));
    println!("strategy written to {}", strategy_path.display());
    println!("manifest written to {}", manifest_path.display());
    Ok(())
}

pub fn cmd_simulate(
    config: &Path,
    overrides: RunOverrides,
    json: Option<PathBuf>,
    dump_episodes: Option<PathBuf>,
) -> Result<(), CliError> {
    let scenario = load(config)?;
    let plant = scenario.require_plant("simulate")?;
    let cost = apply_beta(&scenario.cost, overrides.beta)?;
    let episodes = overrides.episodes.unwrap_or(scenario.run.episodes);
    let seed = overrides.seed.unwrap_or(scenario.run.seed);
    let mut manifest = RunManifest::begin("simulate", Some(scenario.digest.clone()), seed);

    let strategy = solve_tracking_lq(&scenario.model, &cost, &scenario.dims).map_err(core_err)?;
    let bound = strategy
        .bind_parameters(&open_loop_targets(&scenario.model, &scenario.noise, &scenario.dims)?)
        .map_err(core_err)?;
    let conditioner = DisturbanceConditioner::new(&scenario.model, &scenario.noise, &scenario.dims)
        .map_err(core_err)?;
    let setup = SimSetup {
        plant,
        model: &scenario.model,
        noise: &scenario.noise,
        conditioner: &conditioner,
        strategy: &bound,
        slot_policy: SlotPolicy::None,
        dims: scenario.dims,
    };
    let options = SimOptions {
        seed,
        ..SimOptions::default()
    };
    let report = run_monte_carlo(&setup, &cost, episodes, &options).map_err(core_err)?;

    let report_path = json.unwrap_or_else(|| scenario.output_dir.join("report.json"));
    write_file(&report_path, &(report.canonical_json() + "\n"))?;
    manifest.record(&report_path);

    if let Some(dump_path) = dump_episodes {
        let dump_count = episodes.min(256);
        let dump_options = SimOptions {
            seed,
            keep_outputs: true,
            ..SimOptions::default()
        };
        let dump = run_monte_carlo(&setup, &cost, dump_count, &dump_options).map_err(core_err)?;
        let mut buffer = Vec::new();
        write_episode_csv(&mut buffer, dump.outputs.as_deref().unwrap_or(&[]), &scenario.dims)
            .map_err(core_err)?;
        write_file(&dump_path, &String::from_utf8(buffer).expect("csv is utf-8"))?;
        manifest.record(&dump_path);
    }
    let manifest_path = manifest.finish(&scenario.output_dir)?;

    println!("config digest: {}", scenario.digest);
    println!("episodes: {episodes} (seed {seed})");
    println!("{}", cost_line("cost", &report.cost));
    let final_gap = report
        .discrepancy_max
        .last()
        .map(|row| row.iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
        .unwrap_or(0.0);
    println!("largest final model/plant state gap: {final_gap:.3e}");
    println!("report written to {}", report_path.display());
    println!("manifest written to {}", manifest_path.display());
    Ok(())
}

pub fn cmd_learn(
    config: &Path,
    overrides: RunOverrides,
    strict: bool,
    json: Option<PathBuf>,
    dump_episodes: Option<PathBuf>,
) -> Result<(), CliError> {
    let scenario = load(config)?;
    let plant = scenario.require_plant("learn")?;
    let cost = apply_beta(&scenario.cost, overrides.beta)?;
    let seed = overrides.seed.unwrap_or(scenario.run.seed);
    let mut manifest = RunManifest::begin("learn", Some(scenario.digest.clone()), seed);

    let strategy = solve_tracking_lq(&scenario.model, &cost, &scenario.dims).map_err(core_err)?;
    let conditioner = DisturbanceConditioner::new(&scenario.model, &scenario.noise, &scenario.dims)
        .map_err(core_err)?;
    let learn_options = LearnOptions {
        outer_iterations: overrides.outer.unwrap_or(scenario.run.outer_iterations),
        inner_episodes: overrides.episodes.unwrap_or(scenario.run.episodes),
        seed,
        tol: scenario.run.tolerance,
        ..LearnOptions::default()
    };
    let (report, learned) = closed_loop_learn(
        plant,
        &scenario.model,
        &strategy,
        &scenario.noise,
        &conditioner,
        &cost,
        &scenario.dims,
        &learn_options,
    )
    .map_err(core_err)?;

    let report_path = json.unwrap_or_else(|| scenario.output_dir.join("learn_report.json"));
    write_file(
        &report_path,
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    manifest.record(&report_path);

    let strategy_path = scenario.output_dir.join("learned_strategy.txt");
    write_file(&strategy_path, &learned.export_text())?;
    manifest.record(&strategy_path);

    let trace_path = scenario.output_dir.join("xhat_trace.csv");
    let mut trace = String::from("round,state_time,component,target\n");
    for (round, targets) in report.target_trace.iter().enumerate() {
        for (t, target) in targets.iter().enumerate() {
            for (component, value) in target.iter().enumerate() {
                trace.push_str(&format!("{round},{t},{component},{value}\n"));
            }
        }
    }
    write_file(&trace_path, &trace)?;
    manifest.record(&trace_path);

    if let Some(dump_path) = dump_episodes {
        let setup = SimSetup {
            plant,
            model: &scenario.model,
            noise: &scenario.noise,
            conditioner: &conditioner,
            strategy: &learned,
            slot_policy: SlotPolicy::None,
            dims: scenario.dims,
        };
        let dump_options = SimOptions {
            seed,
            keep_outputs: true,
            ..SimOptions::default()
        };
        let dump_count = learn_options.inner_episodes.min(256);
        let dump = run_monte_carlo(&setup, &cost, dump_count, &dump_options).map_err(core_err)?;
        let mut buffer = Vec::new();
        write_episode_csv(&mut buffer, dump.outputs.as_deref().unwrap_or(&[]), &scenario.dims)
            .map_err(core_err)?;
        write_file(&dump_path, &String::from_utf8(buffer).expect("csv is utf-8"))?;
        manifest.record(&dump_path);
    }
    let manifest_path = manifest.finish(&scenario.output_dir)?;

    println!("config digest: {}", scenario.digest);
    println!(
        "rounds: {}   episodes per round: {}   episodes used: {}",
        report.outer_iterations, report.inner_episodes, report.episodes_used
    );
    let last_delta = report.target_deltas.last().copied();
    match report.converged {
        Some(true) => println!(
            "targets converged (last drift {:.3e} ≤ tolerance {:.3e})",
            last_delta.unwrap_or(0.0),
            learn_options.tol
        ),
        Some(false) => {
            let message = format!(
                "targets still drifting after {} rounds (last drift {:.3e} > tolerance {:.3e})",
                report.outer_iterations,
                last_delta.unwrap_or(f64::NAN),
                learn_options.tol
            );
            if strict {
                return Err(CliError::convergence(message));
            }
            println!("warning: {message}");
        }
        None => println!("convergence not assessed (single round)"),
    }
    println!(
        "learned law from {}",
        if report.used_response_map {
            "fitted one-step response"
        } else {
            "directly bound targets"
        }
    );
    println!("{}", cost_line("learned strategy", &report.final_cost));
    println!("report written to {}", report_path.display());
    println!("strategy written to {}", strategy_path.display());
    println!("target trace written to {}", trace_path.display());
    println!("manifest written to {}", manifest_path.display());
    Ok(())
}

pub fn cmd_reproduce_example(
    episodes: Option<u64>,
    seed: Option<u64>,
    cov_sign: Option<CovarianceSign>,
    json: Option<PathBuf>,
) -> Result<(), CliError> {
    let options = ExampleOptions {
        episodes: episodes.unwrap_or(ExampleOptions::default().episodes),
        seed: seed.unwrap_or(0),
        cov_sign,
        ..ExampleOptions::default()
    };
    let report = reproduce_example(&options).map_err(core_err)?;
    print!("{}", report.render_text());
    if let Some(json_path) = json {
        write_file(
            &json_path,
            &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
        )?;
        println!("report written to {}", json_path.display());
    }
    if !report.passed() {
        return Err(CliError::reproduction(format!(
            "failed checks: {}",
            report.failed_flags().join(", ")
        )));
    }
    Ok(())
}

pub fn cmd_compare(
    config: &Path,
    overrides: RunOverrides,
    strict: bool,
    json: Option<PathBuf>,
) -> Result<(), CliError> {
    let scenario = load(config)?;
    let plant = scenario.require_plant("compare")?;
    let cost = apply_beta(&scenario.cost, overrides.beta)?;
    let episodes = overrides.episodes.unwrap_or(scenario.run.episodes);
    let seed = overrides.seed.unwrap_or(scenario.run.seed);
    let mut manifest = RunManifest::begin("compare", Some(scenario.digest.clone()), seed);
    let conditioner = DisturbanceConditioner::new(&scenario.model, &scenario.noise, &scenario.dims)
        .map_err(core_err)?;

    // Plain tracking weights for the two reference strategies: the
    // discrepancy penalty only matters to the learned route's synthesis.
    let tracking_cost = QuadraticCostSpec {
        beta: 0.0,
        ..cost.clone()
    };

    // (a) Knows the actual system: synthesize directly on the plant and feed
    // back the plant-side belief.
    let known_plant = solve_tracking_lq(plant, &tracking_cost, &scenario.dims)
        .map_err(core_err)?
        .with_gains_on_plant_belief()
        .bind_parameters(&zero_targets(&scenario.dims))
        .map_err(core_err)?;

    // (b) Trusts the model as if it were the actual system.
    let model_only = solve_tracking_lq(&scenario.model, &tracking_cost, &scenario.dims)
        .map_err(core_err)?
        .bind_parameters(&open_loop_targets(&scenario.model, &scenario.noise, &scenario.dims)?)
        .map_err(core_err)?;

    // (c) Learns the plant's expected trajectory from realized outputs only.
    let inner = solve_tracking_lq(&scenario.model, &cost, &scenario.dims).map_err(core_err)?;
    let learn_options = LearnOptions {
        outer_iterations: overrides.outer.unwrap_or(scenario.run.outer_iterations),
        inner_episodes: (episodes / 4).max(50),
        seed,
        tol: scenario.run.tolerance,
        ..LearnOptions::default()
    };
    let (learn_report, learned) = closed_loop_learn(
        plant,
        &scenario.model,
        &inner,
        &scenario.noise,
        &conditioner,
        &cost,
        &scenario.dims,
        &learn_options,
    )
    .map_err(core_err)?;
    if learn_report.converged == Some(false) {
        let last = learn_report.target_deltas.last().copied().unwrap_or(f64::NAN);
        let message = format!(
            "learned route: targets still drifting (last drift {last:.3e} > tolerance {:.3e})",
            learn_options.tol
        );
        if strict {
            return Err(CliError::convergence(message));
        }
        println!("warning: {message}");
    }

    // Paired evaluation: all three strategies see the same episodes, on
    // streams disjoint from everything the learning rounds consumed.
    let eval_options = SimOptions {
        seed,
        stream_offset: 1 << 32,
        ..SimOptions::default()
    };
    let mut rows: Vec<(&str, CostReport)> = Vec::new();
    for (name, strategy) in [
        ("known-plant", &known_plant),
        ("model-only", &model_only),
        ("learned-separated", &learned),
    ] {
        let report = evaluate_strategy(
            plant,
            &scenario.model,
            strategy,
            &scenario.noise,
            &conditioner,
            &cost,
            &scenario.dims,
            episodes,
            &eval_options,
        )
        .map_err(core_err)?;
        rows.push((name, report));
    }

    let csv_path = scenario.output_dir.join("compare.csv");
    let mut csv = String::from("strategy,j1_mean,j1_stderr,j2_mean,j2_stderr,penalty_mean\n");
    for (name, r) in &rows {
        csv.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            r.j1_mean, r.j1_stderr, r.j2_mean, r.j2_stderr, r.penalty_mean
        ));
    }
    write_file(&csv_path, &csv)?;
    manifest.record(&csv_path);

    let json_path = json.unwrap_or_else(|| scenario.output_dir.join("compare.json"));
    let payload = serde_json::json!({
        "command": "compare",
        "config_digest": scenario.digest,
        "episodes": episodes,
        "seed": seed,
        "strategies": rows
            .iter()
            .map(|(name, r)| serde_json::json!({ "name": name, "cost": r }))
            .collect::<Vec<_>>(),
    });
    write_file(&json_path, &(serde_json::to_string_pretty(&payload).unwrap() + "\n"))?;
    manifest.record(&json_path);
    let manifest_path = manifest.finish(&scenario.output_dir)?;

    println!("config digest: {}", scenario.digest);
    println!("paired evaluation over {episodes} episodes (seed {seed})");
    println!("{:<20} {:>14} {:>14}", "strategy", "j1_mean", "j1_stderr");
    for (name, r) in &rows {
        println!("{:<20} {:>14.6} {:>14.6}", name, r.j1_mean, r.j1_stderr);
    }
    println!("table written to {}", csv_path.display());
    println!("summary written to {}", json_path.display());
    println!("manifest written to {}", manifest_path.display());
    Ok(())
}

/// Parses the `--cov-sign` flag value.
pub fn parse_cov_sign(value: &str) -> Result<CovarianceSign, String> {
    match value {
        "+" => Ok(CovarianceSign::Positive),
        "-" => Ok(CovarianceSign::Negative),
        other => Err(format!("expected `+` or `-`, got `{other}`")),
    }
}
