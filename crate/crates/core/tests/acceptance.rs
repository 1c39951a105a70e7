//! Acceptance gate: eight end-to-end criteria, printed one PASS/FAIL line
//! each, exiting nonzero if any criterion fails.
//!
//! Every tolerance is pinned here next to the check it guards. The suite is
//! fully deterministic — all randomness flows from fixed seeds — so a PASS
//! is reproducible bit for bit.
//!
//! Run with `cargo test --test acceptance` (or as part of
//! `cargo test --workspace`).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sepctl::estimator::{info_state_update, GaussianBelief, InformationState, OutputDensityEstimate};
use sepctl::lti::{Dims, QuadraticCostSpec, TimeVaryingLinearSystem};
use sepctl::noise::NoiseSpec;
use sepctl::oracle::example::{
    example_basis, example_cost, example_dims, example_model, example_noise, example_plant,
    reproduce_example, CovarianceSign, ExampleOptions,
};
use sepctl::oracle::{batch_gaussian_conditioning, exact_linear_strategy};
use sepctl::sim::{
    run_episode, run_episode_with_primitives, run_monte_carlo, DisturbanceConditioner, ExecMode,
    SimOptions, SimSetup, SlotPolicy,
};
use sepctl::solver::{
    matching_strategy, solve_tracking_lq, SeparatedStrategy, StrategyParameterization,
};

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 8] = [
        ("two-step reproduction", criterion_two_step_reproduction),
        ("matched final state", criterion_matched_final_state),
        ("penalty netting", criterion_penalty_netting),
        ("filter cross-check", criterion_filter_cross_check),
        ("data-determined information state", criterion_data_determined_state),
        ("classical agreement", criterion_classical_agreement),
        ("convergence and determinism", criterion_convergence_determinism),
        ("oracle optimality", criterion_oracle_optimality),
    ];
    let mut failures = 0usize;
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} ({name}): PASS — {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {} ({name}): FAIL — {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        checks.len() - failures,
        checks.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn err<T: std::fmt::Display>(e: T) -> String {
    format!("error: {e}")
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn rand_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-scale..scale))
}

fn rand_diag(rng: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { rng.gen_range(lo..hi) } else { 0.0 })
}

/// `width × len` selector picking `width` consecutive coordinates starting
/// at `start`.
fn block_selector(len: usize, start: usize, width: usize) -> DMatrix<f64> {
    let mut sel = DMatrix::zeros(width, len);
    for k in 0..width {
        sel[(k, start + k)] = 1.0;
    }
    sel
}

fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

fn max_abs_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn bits_equal(a: &GaussianBelief, b: &GaussianBelief) -> bool {
    a.mean().len() == b.mean().len()
        && a.cov().nrows() == b.cov().nrows()
        && a.mean()
            .iter()
            .zip(b.mean().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
        && a.cov()
            .iter()
            .zip(b.cov().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// A randomly drawn multi-dimensional instance: time-varying dynamics, an
/// everywhere-invertible sensor map (so no observation is redundant), and
/// independent primitive noise blocks with diagonal covariances. The sensor
/// dimension never exceeds the state dimension, which keeps the noiseless
/// final observation informative rather than degenerate.
struct RandomInstance {
    dims: Dims,
    system: TimeVaryingLinearSystem,
    noise: NoiseSpec,
}

fn random_instance(rng: &mut ChaCha8Rng) -> RandomInstance {
    let n = rng.gen_range(1..=4usize);
    let p = rng.gen_range(1..=3usize.min(n));
    let m = rng.gen_range(1..=2usize);
    let r = rng.gen_range(1..=3usize);
    let s = p;
    let horizon = rng.gen_range(1..=6usize);
    let dims = Dims { n, m, p, r, s, horizon };

    let a: Vec<_> = (0..horizon).map(|_| rand_matrix(rng, n, n, 1.0)).collect();
    let b: Vec<_> = (0..horizon).map(|_| rand_matrix(rng, n, m, 1.0)).collect();
    let d: Vec<_> = (0..horizon).map(|_| rand_matrix(rng, n, r, 1.0)).collect();
    let c: Vec<_> = (0..=horizon).map(|_| rand_matrix(rng, p, n, 1.0)).collect();
    let e: Vec<_> = (0..=horizon)
        .map(|_| DMatrix::identity(p, s) * 1.5 + rand_matrix(rng, p, s, 0.3))
        .collect();
    let system = TimeVaryingLinearSystem::new(a, b, d, c, e, &dims).expect("valid random system");

    let mx0 = rand_vector(rng, n, 0.5);
    let px0 = rand_diag(rng, n, 0.5, 1.5);
    let mw: Vec<_> = (0..horizon).map(|_| rand_vector(rng, r, 0.3)).collect();
    let pw: Vec<_> = (0..horizon).map(|_| rand_diag(rng, r, 0.4, 1.2)).collect();
    let mz: Vec<_> = (0..horizon).map(|_| rand_vector(rng, s, 0.3)).collect();
    let pz: Vec<_> = (0..horizon).map(|_| rand_diag(rng, s, 0.3, 1.0)).collect();
    let noise = NoiseSpec::independent(mx0, px0, mw, pw, mz, pz, &dims).expect("valid noise");

    RandomInstance { dims, system, noise }
}

fn zero_binding(dims: &Dims) -> StrategyParameterization {
    StrategyParameterization::new(vec![DVector::zeros(dims.n); dims.horizon + 1])
}

// ---------------------------------------------------------------------------
// criterion 1 — two-step reproduction
// ---------------------------------------------------------------------------

/// The bundled two-step instance is reproduced across every pipeline at the
/// full episode budget: the exact oracle adjudicates the correlation sign,
/// the analytic pipelines agree with it to 1e-6, the learned pipeline lands
/// within four standard errors, and the whole run stays under 60 seconds.
fn criterion_two_step_reproduction() -> Result<String, String> {
    const BUDGET_SECS: f64 = 60.0;
    let options = ExampleOptions::default(); // 100_000 episodes, seed 0
    let report = reproduce_example(&options).map_err(err)?;
    if !report.passed() {
        return Err(format!(
            "failed sub-checks: {:?} (analytic disagreement {:.2e}, learned {:.2} sigma, identity gap {:.2e})",
            report.failed_flags(),
            report.analytic_max_disagreement,
            report.learned_max_sigma,
            report.identity_max_gap,
        ));
    }
    if report.elapsed_secs >= BUDGET_SECS {
        return Err(format!(
            "run took {:.1} s, budget {BUDGET_SECS} s",
            report.elapsed_secs
        ));
    }
    Ok(format!(
        "sign {:+.1} adjudicated; analytic pipelines within {:.1e} (tol 1e-6); learned within {:.2} sigma (limit 4); {} episodes in {:.1} s (budget {BUDGET_SECS} s)",
        report.adjudicated_covariance,
        report.analytic_max_disagreement,
        report.learned_max_sigma,
        report.episodes,
        report.elapsed_secs,
    ))
}

// ---------------------------------------------------------------------------
// criterion 2 — matched final state
// ---------------------------------------------------------------------------

/// Under the self-consistent binding of the matching law, the two systems'
/// final states coincide in **every** sampled episode, not merely on
/// average: the worst final-state gap over 10_000 episodes stays below 1e-9
/// while mid-episode states visibly differ.
fn criterion_matched_final_state() -> Result<String, String> {
    const EPISODES: u64 = 10_000;
    const GAP_TOL: f64 = 1e-9;
    let dims = example_dims();
    let model = example_model();
    let plant = example_plant();
    let noise = example_noise(CovarianceSign::Negative);
    let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).map_err(err)?;
    let inner = matching_strategy(&model, &dims).map_err(err)?;
    let setup = SimSetup {
        plant: &plant,
        model: &model,
        noise: &noise,
        conditioner: &conditioner,
        strategy: &inner,
        slot_policy: SlotPolicy::SelfConsistent,
        dims,
    };
    let options = SimOptions {
        seed: 11,
        ..SimOptions::default()
    };
    let report =
        run_monte_carlo(&setup, &example_cost(1.0), EPISODES, &options).map_err(err)?;
    let final_step = dims.horizon - 1;
    let worst_final = report.discrepancy_max[final_step]
        .iter()
        .fold(0.0f64, |acc, v| acc.max(*v));
    if worst_final > GAP_TOL {
        return Err(format!(
            "worst final-state gap {worst_final:.3e} exceeds {GAP_TOL:.0e} over {EPISODES} episodes"
        ));
    }
    let worst_mid = report.discrepancy_max[0]
        .iter()
        .fold(0.0f64, |acc, v| acc.max(*v));
    if worst_mid < 0.1 {
        return Err(format!(
            "mid-episode states never separated (worst gap {worst_mid:.3e}); the check would be vacuous"
        ));
    }
    Ok(format!(
        "worst final-state gap {worst_final:.2e} <= {GAP_TOL:.0e} across {EPISODES} episodes (mid-episode gaps reach {worst_mid:.2})"
    ))
}

// ---------------------------------------------------------------------------
// criterion 3 — penalty netting
// ---------------------------------------------------------------------------

/// On a large matched run, per-step mean state gaps vanish within their CLT
/// bands, and the model-side cost net of the discrepancy penalty agrees
/// with the other system's cost within combined standard errors.
fn criterion_penalty_netting() -> Result<String, String> {
    const EPISODES: u64 = 100_000;
    const BAND_SIGMA: f64 = 4.0;
    const BAND_FLOOR: f64 = 1e-12;
    let dims = example_dims();
    let model = example_model();
    let plant = example_plant();
    let noise = example_noise(CovarianceSign::Negative);
    let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).map_err(err)?;
    let inner = matching_strategy(&model, &dims).map_err(err)?;
    let setup = SimSetup {
        plant: &plant,
        model: &model,
        noise: &noise,
        conditioner: &conditioner,
        strategy: &inner,
        slot_policy: SlotPolicy::SelfConsistent,
        dims,
    };
    let options = SimOptions {
        seed: 23,
        ..SimOptions::default()
    };
    let report =
        run_monte_carlo(&setup, &example_cost(1.0), EPISODES, &options).map_err(err)?;

    let sqrt_n = (EPISODES as f64).sqrt();
    let mut worst_ratio = 0.0f64;
    for (t, means) in report.discrepancy_mean.iter().enumerate() {
        for (i, mean) in means.iter().enumerate() {
            let band = BAND_SIGMA * report.discrepancy_std[t][i] / sqrt_n + BAND_FLOOR;
            if mean.abs() > band {
                return Err(format!(
                    "mean state gap at time {} component {i} is {mean:.3e}, outside band {band:.3e}",
                    t + 1
                ));
            }
            worst_ratio = worst_ratio.max(mean.abs() / band);
        }
    }

    let cost = &report.cost;
    let netted_gap = ((cost.j2_mean - cost.penalty_mean) - cost.j1_mean).abs();
    let cost_band = BAND_SIGMA * (cost.j1_stderr.powi(2) + cost.j2_stderr.powi(2)).sqrt()
        + BAND_FLOOR;
    if netted_gap > cost_band {
        return Err(format!(
            "|(J2 - penalty) - J1| = {netted_gap:.3e} exceeds band {cost_band:.3e}"
        ));
    }
    Ok(format!(
        "mean state gaps within {BAND_SIGMA}-sigma bands (worst at {:.0}% of band); |(J2 - penalty) - J1| = {netted_gap:.1e} <= {cost_band:.1e} at N = {EPISODES}",
        100.0 * worst_ratio
    ))
}

// ---------------------------------------------------------------------------
// criterion 4 — filter cross-check
// ---------------------------------------------------------------------------

/// On 50 random multi-dimensional instances, the sequential filter chain
/// agrees with one-shot Gaussian conditioning on all observations so far —
/// mean and covariance within 1e-8 at every time, including the noiseless
/// final observation — in under 30 seconds.
fn criterion_filter_cross_check() -> Result<String, String> {
    const INSTANCES: usize = 50;
    const TOL: f64 = 1e-8;
    const BUDGET_SECS: f64 = 30.0;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    let mut comparisons = 0usize;

    for instance_idx in 0..INSTANCES {
        let RandomInstance { dims, system, noise } = random_instance(&mut rng);
        let horizon = dims.horizon;
        let len = noise.len();

        // Known control inputs, drawn once per instance.
        let controls: Vec<DVector<f64>> =
            (0..horizon).map(|_| rand_vector(&mut rng, dims.m, 1.0)).collect();

        // One realized trajectory of the system.
        let xi = noise.sample(&mut rng);
        let (x0, w_seq, z_seq) = noise.split(&xi).map_err(err)?;
        let zero_z = DVector::zeros(dims.s);
        let mut states = vec![x0];
        for t in 0..horizon {
            let next = system
                .step(t, &states[t], &controls[t], &w_seq[t])
                .map_err(err)?;
            states.push(next);
        }
        let outputs: Vec<DVector<f64>> = (0..=horizon)
            .map(|t| {
                let z = if t < horizon { &z_seq[t] } else { &zero_z };
                system.observe(t, &states[t], z).map_err(err)
            })
            .collect::<Result<_, _>>()?;

        // Affine description of each state over the primitive vector:
        // x_t = psi_t * xi + shift_t, folding the known controls into the
        // shift. Observations become affine functionals of xi as well.
        let mut psis: Vec<DMatrix<f64>> = vec![block_selector(len, 0, dims.n).transpose() * 0.0];
        psis[0] = {
            let mut m = DMatrix::zeros(dims.n, len);
            m.view_mut((0, 0), (dims.n, dims.n))
                .copy_from(&DMatrix::identity(dims.n, dims.n));
            m
        };
        let mut shifts: Vec<DVector<f64>> = vec![DVector::zeros(dims.n)];
        for t in 0..horizon {
            let w_sel = block_selector(len, dims.n + t * dims.r, dims.r);
            let psi_next = &system.a[t] * &psis[t] + &system.d[t] * w_sel;
            let shift_next = &system.a[t] * &shifts[t] + &system.b[t] * &controls[t];
            psis.push(psi_next);
            shifts.push(shift_next);
        }
        let mut obs_maps: Vec<DMatrix<f64>> = Vec::with_capacity(horizon + 1);
        let mut observed: Vec<DVector<f64>> = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let mut map = &system.c[t] * &psis[t];
            if t < horizon {
                let z_sel = block_selector(len, dims.n + horizon * dims.r + t * dims.s, dims.s);
                map += &system.e[t] * z_sel;
            }
            obs_maps.push(map);
            observed.push(&outputs[t] - &system.c[t] * &shifts[t]);
        }

        // Sequential side: the information-state chain, fed the same
        // realized outputs on both channels.
        let density = OutputDensityEstimate::new(dims.n, dims.p, dims.m, horizon);
        let mut info =
            InformationState::initial(&system, &noise, &outputs[0], &outputs[0], density)
                .map_err(err)?;
        for t in 0..=horizon {
            if t > 0 {
                info = info_state_update(
                    &info,
                    &outputs[t],
                    &outputs[t],
                    &controls[t - 1],
                    &system,
                    &system,
                    &noise,
                )
                .map_err(err)?;
            }
            let oracle = batch_gaussian_conditioning(
                &noise,
                &psis[t],
                &obs_maps[..=t],
                &observed[..=t],
            )
            .map_err(|e| format!("instance {instance_idx}, time {t}: {e}"))?;
            let oracle_mean = oracle.mean() + &shifts[t];
            let mean_gap = max_abs_diff_vec(info.model_belief.mean(), &oracle_mean);
            let cov_gap = max_abs_diff_mat(info.model_belief.cov(), oracle.cov());
            let gap = mean_gap.max(cov_gap);
            worst = worst.max(gap);
            comparisons += 1;
            if gap > TOL {
                return Err(format!(
                    "instance {instance_idx} (n={}, p={}, T={horizon}) time {t}: filter vs conditioning gap {gap:.3e} exceeds {TOL:.0e}",
                    dims.n, dims.p
                ));
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= BUDGET_SECS {
        return Err(format!("took {elapsed:.1} s, budget {BUDGET_SECS} s"));
    }
    Ok(format!(
        "{INSTANCES} random instances, {comparisons} belief comparisons, worst gap {worst:.1e} (tol {TOL:.0e}) in {elapsed:.1} s (budget {BUDGET_SECS} s)"
    ))
}

// ---------------------------------------------------------------------------
// criterion 5 — data-determined information state
// ---------------------------------------------------------------------------

/// The information state is a function of the realized data alone: two
/// distinct strategies fed identical realized output/control prefixes
/// produce bitwise-identical belief chains, which also match the chain the
/// simulator computed while the data was generated.
fn criterion_data_determined_state() -> Result<String, String> {
    const INSTANCES: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut control_divergence_seen = 0usize;
    let mut times_compared = 0usize;

    for instance_idx in 0..INSTANCES {
        let RandomInstance { dims, system: model, noise } = random_instance(&mut rng);
        let horizon = dims.horizon;

        // A distinct actual system sharing the model's sensor maps.
        let plant = TimeVaryingLinearSystem::new(
            (0..horizon).map(|_| rand_matrix(&mut rng, dims.n, dims.n, 1.0)).collect(),
            (0..horizon).map(|_| rand_matrix(&mut rng, dims.n, dims.m, 1.0)).collect(),
            (0..horizon).map(|_| rand_matrix(&mut rng, dims.n, dims.r, 1.0)).collect(),
            model.c.clone(),
            model.e.clone(),
            &dims,
        )
        .map_err(err)?;

        // Strategy A: a tracking synthesis on the model. Strategy B: the
        // matching construction bound to random targets. Different laws.
        let cost = QuadraticCostSpec::quadratic(
            (0..horizon).map(|_| rand_diag(&mut rng, dims.n, 0.0, 1.0)).collect(),
            (0..horizon).map(|_| rand_diag(&mut rng, dims.m, 0.3, 1.2)).collect(),
            rand_diag(&mut rng, dims.n, 0.2, 1.0),
        );
        let strat_a = solve_tracking_lq(&model, &cost, &dims)
            .map_err(err)?
            .bind_parameters(&zero_binding(&dims))
            .map_err(err)?;
        let targets: Vec<DVector<f64>> =
            (0..=horizon).map(|_| rand_vector(&mut rng, dims.n, 1.0)).collect();
        let strat_b = matching_strategy(&model, &dims)
            .map_err(err)?
            .bind_parameters(&StrategyParameterization::new(targets))
            .map_err(err)?;

        // Generate one episode under strategy A.
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).map_err(err)?;
        let setup = SimSetup {
            plant: &plant,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &strat_a,
            slot_policy: SlotPolicy::None,
            dims,
        };
        setup.validate().map_err(err)?;
        let mut episode_rng = ChaCha8Rng::seed_from_u64(9000 + instance_idx as u64);
        let out = run_episode(&setup, instance_idx as u64, &mut episode_rng).map_err(err)?;
        let record = &out.record;

        // Replay the recorded data through two chains, querying a different
        // strategy along each. The queries' results are compared (to show
        // the strategies really disagree) but never fed back.
        let replay_chain = |strategy: &SeparatedStrategy| -> Result<
            (Vec<InformationState>, Vec<DVector<f64>>),
            String,
        > {
            let density = OutputDensityEstimate::new(dims.n, dims.p, dims.m, horizon);
            let mut info = InformationState::initial(
                &model,
                &noise,
                &record.y[0],
                &record.yhat[0],
                density,
            )
            .map_err(err)?;
            let mut chain = vec![info.clone()];
            let mut queried = Vec::with_capacity(horizon);
            let w_zero = DVector::zeros(dims.r);
            for t in 0..horizon {
                let u_query = strategy
                    .control(
                        t,
                        info.model_belief.mean(),
                        info.plant_belief.mean(),
                        &w_zero,
                        &[],
                    )
                    .map_err(err)?;
                queried.push(u_query);
                info = info_state_update(
                    &info,
                    &record.y[t + 1],
                    &record.yhat[t + 1],
                    &record.u[t],
                    &model,
                    &model,
                    &noise,
                )
                .map_err(err)?;
                chain.push(info.clone());
            }
            Ok((chain, queried))
        };
        let (chain_a, queries_a) = replay_chain(&strat_a)?;
        let (chain_b, queries_b) = replay_chain(&strat_b)?;

        if queries_a
            .iter()
            .zip(&queries_b)
            .any(|(ua, ub)| (ua - ub).amax() > 1e-12)
        {
            control_divergence_seen += 1;
        }

        for t in 0..=horizon {
            times_compared += 1;
            let a = &chain_a[t];
            let b = &chain_b[t];
            if !bits_equal(&a.model_belief, &b.model_belief)
                || !bits_equal(&a.plant_belief, &b.plant_belief)
                || a.t != b.t
            {
                return Err(format!(
                    "instance {instance_idx}: chains diverge at time {t} despite identical data"
                ));
            }
            // The replay must also reproduce the chain computed while the
            // episode was generated, bit for bit.
            if !bits_equal(&a.model_belief, &out.model_beliefs[t])
                || !bits_equal(&a.plant_belief, &out.plant_beliefs[t])
            {
                return Err(format!(
                    "instance {instance_idx}: replayed chain differs from the in-episode chain at time {t}"
                ));
            }
        }
    }
    if control_divergence_seen == 0 {
        return Err(
            "the two strategies never produced different controls; the comparison was vacuous"
                .into(),
        );
    }
    Ok(format!(
        "{INSTANCES} instances, {times_compared} time points bitwise-identical across strategies (strategies disagreed on {control_divergence_seen}/{INSTANCES} instances)"
    ))
}

// ---------------------------------------------------------------------------
// criterion 6 — classical agreement
// ---------------------------------------------------------------------------

/// Where the problem degenerates to a classical one, the machinery agrees
/// with the textbook: on random scalar instances the tracking synthesis
/// (penalty weight zero) matches an independently coded backward recursion
/// and the exact affine oracle to 1e-8; and on the two-step instance the
/// penalized synthesis bound at the true means realizes the same controls
/// as the matching construction.
fn criterion_classical_agreement() -> Result<String, String> {
    const INSTANCES: usize = 25;
    const TOL: f64 = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut worst_gain = 0.0f64;
    let mut worst_cost = 0.0f64;

    for instance_idx in 0..INSTANCES {
        let horizon = rng.gen_range(1..=3usize);
        let dims = Dims { n: 1, m: 1, p: 1, r: 1, s: 1, horizon };
        let a: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let b: Vec<f64> = (0..horizon)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.3..1.5)
            })
            .collect();
        let d: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-1.2..1.2)).collect();
        let qx: Vec<f64> = (0..horizon).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ru: Vec<f64> = (0..horizon).map(|_| rng.gen_range(0.2..1.5)).collect();
        let qt = rng.gen_range(0.2..1.5);
        let px0 = rng.gen_range(0.5..1.5);
        let pw: Vec<f64> = (0..horizon).map(|_| rng.gen_range(0.4..1.2)).collect();

        let scalar = |v: f64| DMatrix::from_element(1, 1, v);
        let system = TimeVaryingLinearSystem::new(
            a.iter().copied().map(scalar).collect(),
            b.iter().copied().map(scalar).collect(),
            d.iter().copied().map(scalar).collect(),
            vec![scalar(1.0); horizon + 1],
            vec![scalar(0.0); horizon + 1],
            &dims,
        )
        .map_err(err)?;
        let cost = QuadraticCostSpec {
            qx: qx.iter().copied().map(scalar).collect(),
            ru: ru.iter().copied().map(scalar).collect(),
            qt: scalar(qt),
            lx: None,
            lu: None,
            lt: None,
            beta: 0.0,
        };
        let noise = NoiseSpec::independent(
            DVector::zeros(1),
            scalar(px0),
            vec![DVector::zeros(1); horizon],
            pw.iter().copied().map(scalar).collect(),
            vec![DVector::zeros(1); horizon],
            vec![scalar(1.0); horizon],
            &dims,
        )
        .map_err(err)?;

        // Independently coded backward recursion, value function
        // V_t(x) = p_t x^2 + const.
        let mut p = qt;
        let mut p_trace = vec![0.0; horizon + 1];
        p_trace[horizon] = p;
        let mut k_ref = vec![0.0; horizon];
        let mut kw_ref = vec![0.0; horizon];
        for t in (0..horizon).rev() {
            let s = ru[t] + b[t] * b[t] * p;
            k_ref[t] = -b[t] * p * a[t] / s;
            kw_ref[t] = -b[t] * p * d[t] / s;
            p = qx[t] + ru[t] * k_ref[t] * k_ref[t] + (a[t] + b[t] * k_ref[t]).powi(2) * p;
            p_trace[t] = p;
        }
        let cost_ref: f64 = p_trace[0] * px0
            + (0..horizon)
                .map(|t| p_trace[t + 1] * d[t] * d[t] * pw[t])
                .sum::<f64>();

        // The solver's law.
        let strategy = solve_tracking_lq(&system, &cost, &dims).map_err(err)?;
        for t in 0..horizon {
            let law = strategy.step(t).map_err(err)?;
            let gain_gap = (law.k_model[(0, 0)] - k_ref[t])
                .abs()
                .max((law.k_w[(0, 0)] - kw_ref[t]).abs())
                .max(law.offset[0].abs());
            worst_gain = worst_gain.max(gain_gap);
            if gain_gap > TOL {
                return Err(format!(
                    "instance {instance_idx} step {t}: solver law differs from the backward recursion by {gain_gap:.3e}"
                ));
            }
        }

        // The exact affine oracle over the full-information basis, compared
        // through the state-feedback law's primitive-coordinate expansion
        // u_t = k_t x_t with x_t = rep over [1, x0, w_0..w_{t-1}].
        let basis: Vec<Vec<usize>> = (0..horizon)
            .map(|t| {
                let mut coords = vec![0usize];
                coords.extend((0..t).map(|k| 1 + k));
                coords
            })
            .collect();
        let exact = exact_linear_strategy(&system, &cost, &noise, &dims, &basis).map_err(err)?;
        let cost_gap = (exact.optimal_cost - cost_ref).abs();
        worst_cost = worst_cost.max(cost_gap);
        if cost_gap > TOL {
            return Err(format!(
                "instance {instance_idx}: oracle optimal cost {:.10} vs recursion {:.10} (gap {cost_gap:.3e})",
                exact.optimal_cost, cost_ref
            ));
        }
        // x_t representation over [1, x0, w_0 .. w_{horizon-1}].
        let mut x_rep = DVector::zeros(2 + horizon);
        x_rep[1] = 1.0;
        for t in 0..horizon {
            let u_rep = &x_rep * k_ref[t];
            let coef = &exact.coefficients.coefficients[t];
            let mut gap = (coef[0] - u_rep[0]).abs().max((coef[1] - u_rep[1]).abs());
            for k in 0..t {
                gap = gap.max((coef[2 + k] - u_rep[2 + k]).abs());
            }
            worst_gain = worst_gain.max(gap);
            if gap > TOL {
                return Err(format!(
                    "instance {instance_idx} step {t}: oracle coefficients differ from the recursion's law by {gap:.3e}"
                ));
            }
            x_rep = &x_rep * (a[t] + b[t] * k_ref[t]);
            x_rep[2 + t] += d[t];
        }
    }

    // Two-step instance: the penalized synthesis and the matching
    // construction, bound to the same (true-mean, all-zero) targets, must
    // realize identical controls on shared primitive draws; a second
    // nonzero binding guards against the comparison passing vacuously.
    let dims = example_dims();
    let model = example_model();
    let plant = example_plant();
    let noise = example_noise(CovarianceSign::Negative);
    let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).map_err(err)?;
    let penalized = solve_tracking_lq(&model, &example_cost(1.0), &dims).map_err(err)?;
    let matching = matching_strategy(&model, &dims).map_err(err)?;
    let mut worst_control = 0.0f64;
    let bindings = [
        vec![DVector::zeros(1), DVector::zeros(1), DVector::zeros(1)],
        vec![
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 0.7),
            DVector::from_element(1, -0.4),
        ],
    ];
    let primitives = [
        (0.9, -0.3, 0.5),
        (-1.1, 0.8, -0.2),
        (0.2, 1.4, 0.0),
        (-0.6, -0.9, 1.3),
    ];
    for binding in &bindings {
        let params = StrategyParameterization::new(binding.clone());
        let bound_p = penalized.bind_parameters(&params).map_err(err)?;
        let bound_m = matching.bind_parameters(&params).map_err(err)?;
        for (idx, (x0, w0, w1)) in primitives.iter().enumerate() {
            let x0v = DVector::from_element(1, *x0);
            let w = vec![DVector::from_element(1, *w0), DVector::from_element(1, *w1)];
            let z = vec![DVector::zeros(1), DVector::zeros(1)];
            let run = |strategy: &SeparatedStrategy| -> Result<Vec<DVector<f64>>, String> {
                let setup = SimSetup {
                    plant: &plant,
                    model: &model,
                    noise: &noise,
                    conditioner: &conditioner,
                    strategy,
                    slot_policy: SlotPolicy::None,
                    dims,
                };
                Ok(run_episode_with_primitives(&setup, idx as u64, &x0v, &w, &z)
                    .map_err(err)?
                    .record
                    .u)
            };
            let u_p = run(&bound_p)?;
            let u_m = run(&bound_m)?;
            for t in 0..dims.horizon {
                let gap = (&u_p[t] - &u_m[t]).amax();
                worst_control = worst_control.max(gap);
                if gap > TOL {
                    return Err(format!(
                        "two-step instance: penalized vs matching controls differ by {gap:.3e} at step {t}"
                    ));
                }
            }
        }
    }

    Ok(format!(
        "{INSTANCES} scalar instances: laws within {worst_gain:.1e}, optimal costs within {worst_cost:.1e} of the backward recursion (tol {TOL:.0e}); penalized and matching controls agree within {worst_control:.1e} on the two-step instance"
    ))
}

// ---------------------------------------------------------------------------
// criterion 7 — convergence and determinism
// ---------------------------------------------------------------------------

/// Monte Carlo behaves like Monte Carlo and scheduling never leaks into
/// results: the cost standard error shrinks like 1/sqrt(N) between 10k and
/// 40k episodes (ratio within 20% of 2), and the canonical report of a 20k
/// run is byte-identical across sequential execution and thread pools of
/// 1, 2, and 4 workers.
fn criterion_convergence_determinism() -> Result<String, String> {
    const RATIO_LO: f64 = 1.6;
    const RATIO_HI: f64 = 2.4;
    let dims = example_dims();
    let model = example_model();
    let plant = example_plant();
    let noise = example_noise(CovarianceSign::Negative);
    let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).map_err(err)?;
    // The known-plant tracking law, gains applied to the plant-side belief.
    let strategy = solve_tracking_lq(&plant, &example_cost(0.0), &dims)
        .map_err(err)?
        .with_gains_on_plant_belief()
        .bind_parameters(&zero_binding(&dims))
        .map_err(err)?;
    let setup = SimSetup {
        plant: &plant,
        model: &model,
        noise: &noise,
        conditioner: &conditioner,
        strategy: &strategy,
        slot_policy: SlotPolicy::None,
        dims,
    };
    let cost = example_cost(1.0);

    let small = run_monte_carlo(
        &setup,
        &cost,
        10_000,
        &SimOptions {
            seed: 101,
            ..SimOptions::default()
        },
    )
    .map_err(err)?;
    let large = run_monte_carlo(
        &setup,
        &cost,
        40_000,
        &SimOptions {
            seed: 101,
            stream_offset: 10_000,
            ..SimOptions::default()
        },
    )
    .map_err(err)?;
    let ratio = small.cost.j1_stderr / large.cost.j1_stderr;
    if !(RATIO_LO..=RATIO_HI).contains(&ratio) {
        return Err(format!(
            "stderr ratio between 10k and 40k episodes is {ratio:.3}, outside [{RATIO_LO}, {RATIO_HI}]"
        ));
    }

    // Determinism across scheduling.
    let run_with = |mode: ExecMode| -> Result<String, String> {
        let report = run_monte_carlo(
            &setup,
            &cost,
            20_000,
            &SimOptions {
                mode,
                seed: 303,
                ..SimOptions::default()
            },
        )
        .map_err(err)?;
        Ok(report.canonical_json())
    };
    let reference = run_with(ExecMode::Sequential)?;
    let mut variants = vec![("parallel/default-pool", run_with(ExecMode::Parallel)?)];
    #[cfg(feature = "parallel")]
    for threads in [1usize, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(err)?;
        let json = pool.install(|| run_with(ExecMode::Parallel))?;
        variants.push(("parallel/fixed-pool", json));
    }
    let mut compared = 1usize;
    for (label, json) in &variants {
        compared += 1;
        if json.as_bytes() != reference.as_bytes() {
            return Err(format!(
                "canonical report under {label} differs from the sequential report"
            ));
        }
    }
    Ok(format!(
        "stderr ratio 10k/40k = {ratio:.3} (expected 2 ± 20%); canonical reports byte-identical across {compared} scheduling variants"
    ))
}

// ---------------------------------------------------------------------------
// criterion 8 — oracle optimality
// ---------------------------------------------------------------------------

/// The exact oracle's solution on the two-step instance really is a
/// minimum: 10_000 random coefficient perturbations at scales from 1e-3 to
/// 10 never score below the reported optimum (within 1e-12), at either
/// correlation sign.
fn criterion_oracle_optimality() -> Result<String, String> {
    const PERTURBATIONS_PER_SIGN: usize = 5_000;
    const SLACK: f64 = 1e-12;
    const SCALES: [f64; 5] = [1e-3, 1e-2, 0.1, 1.0, 10.0];
    let dims = example_dims();
    let model = example_model();
    let cost = example_cost(0.0);
    let basis = example_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut worst_margin = f64::INFINITY;

    for sign in [CovarianceSign::Negative, CovarianceSign::Positive] {
        let noise = example_noise(sign);
        let exact = exact_linear_strategy(&model, &cost, &noise, &dims, &basis).map_err(err)?;
        let theta = exact.theta();
        let at_optimum = exact.expected_cost(&theta).map_err(err)?;
        if (at_optimum - exact.optimal_cost).abs() > SLACK {
            return Err(format!(
                "cost model inconsistent at the optimum: {at_optimum:.15} vs {:.15}",
                exact.optimal_cost
            ));
        }
        for k in 0..PERTURBATIONS_PER_SIGN {
            let scale = SCALES[k % SCALES.len()];
            let delta = DVector::from_fn(theta.len(), |_, _| rng.gen_range(-1.0..1.0)) * scale;
            let perturbed = exact.expected_cost(&(&theta + delta)).map_err(err)?;
            let margin = perturbed - exact.optimal_cost;
            worst_margin = worst_margin.min(margin);
            if margin < -SLACK {
                return Err(format!(
                    "perturbation {k} at sign {:+.1} beat the optimum by {:.3e}",
                    sign.value(),
                    -margin
                ));
            }
        }
    }
    Ok(format!(
        "{} perturbations at two correlation signs never beat the optimum (closest margin {worst_margin:.1e}, slack {SLACK:.0e})",
        2 * PERTURBATIONS_PER_SIGN
    ))
}
