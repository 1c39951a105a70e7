//! Episode simulation and Monte Carlo aggregation.
//!
//! One strategy is applied in parallel to two linear systems — the known
//! model and the plant — which share the initial state, the disturbance and
//! sensor-noise draws, and every control. The harness filters an information
//! state alongside the trajectories, supplies conditional disturbance means
//! through a precomputed [`DisturbanceConditioner`], and fills strategy
//! parameter slots according to a [`SlotPolicy`].
//!
//! Monte Carlo runs aggregate episodes in fixed-size chunks whose partial
//! statistics are merged in chunk order, so reported numbers are
//! bit-identical whether chunks are processed sequentially or by a thread
//! pool (the `parallel` feature).

use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{
    factorize, info_state_update, GaussianBelief, InformationState, OutputDensityEstimate,
};
use crate::linalg;
use crate::lti::{
    discrepancy_penalty, problem1_cost, problem2_cost, Dims, EpisodeRecord, QuadraticCostSpec,
    TimeVaryingLinearSystem,
};
use crate::noise::NoiseSpec;
use crate::rng::RngStreamSpec;
use crate::solver::{
    solve_lq_with_drift, BindingMode, CostReport, SeparatedStrategy, StrategyParameterization,
};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Episodes per aggregation chunk. Fixed so that the merge tree — and hence
/// every floating-point result — is independent of the worker count.
pub const EPISODE_CHUNK: u64 = 4096;

/// How Monte Carlo chunks are dispatched.
///
/// `Parallel` uses the rayon thread pool when the crate is built with the
/// `parallel` feature (the default) and silently degrades to sequential
/// execution otherwise. Either way the results are bit-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        ExecMode::Parallel
    }
}

/// Deterministic zero-mean exploration offsets added to parameter slots.
///
/// The table sums to zero, so any window of five consecutive episodes
/// contributes no net displacement to a slot while still exercising five
/// distinct control levels — enough to separate the control's effect from
/// the state's in a one-step response regression.
const PROBE_TABLE: [f64; 5] = [0.0, 1.0, -1.0, 2.0, -2.0];

/// The exploration offset applied to the slot for state time `slot` during
/// `episode`. Slots are staggered (`episode + 3·slot`) so simultaneous slots
/// do not move in lockstep.
pub fn probe_offset(episode: u64, slot: usize) -> f64 {
    PROBE_TABLE[((episode as usize).wrapping_add(3usize.wrapping_mul(slot))) % PROBE_TABLE.len()]
}

/// How the harness fills a parameterized strategy's slots each step.
#[derive(Debug, Clone)]
pub enum SlotPolicy {
    /// The strategy is already bound; no slots are supplied.
    None,
    /// Diagnostic binding that closes the loop through the plant's own
    /// matrices: the first slot is required to equal the one-step image of
    /// the current plant-belief mean under the *simulated plant*, and the
    /// control solving that fixed point is applied. This peeks at the plant
    /// description — something a deployed controller cannot do — and exists
    /// to verify the per-step state-agreement identity that an exact
    /// matching law induces.
    SelfConsistent,
    /// Compose with an outer bound strategy: its control `u*` defines the
    /// first slot as the model-forward image `A_t·m + B_t·u* + D_t·w̄`, so a
    /// matching inner law reproduces `u*` exactly on the actuated subspace.
    OuterTargets(SeparatedStrategy),
    /// Fixed expected-trajectory targets (one per state time, `x̂_0 … x̂_T`;
    /// the leading entry is carried for honest indexing and never consumed),
    /// plus [`probe_offset`] exploration scaled by `amplitude`.
    ProbedConstants {
        targets: Vec<DVector<f64>>,
        amplitude: f64,
    },
    /// Re-derive targets every step by propagating the factorized plant
    /// marginal through the model open loop, with the same exploration
    /// offsets. A heavier per-step alternative to `ProbedConstants`.
    PerStepRefresh { amplitude: f64 },
}

/// Conditional disturbance means from the data observed so far.
///
/// Ahead of simulation this precomputes, for every step `t`, the linear map
/// from the stacked *noise parts* of the model-side observations `y_0 … y_t`
/// (what remains after the known control contribution is subtracted) to
/// `E[w_t | y_0 … y_t]` under the joint primitive law. At runtime a single
/// affine evaluation per step remains.
#[derive(Debug, Clone)]
pub struct DisturbanceConditioner {
    /// `gains[t]` is `r × p·(t+1)`: weights on the stacked noise parts.
    gains: Vec<DMatrix<f64>>,
    /// `offsets[t] = E[w_t] − gains[t]·E[stacked noise parts]`.
    offsets: Vec<DVector<f64>>,
    trivial: bool,
    p: usize,
    horizon: usize,
}

impl DisturbanceConditioner {
    /// Precomputes conditioning maps for `model_sys` against `noise`.
    ///
    /// Internally propagates the control-free response of the model to the
    /// primitive vector, stacks the induced observation rows, and solves one
    /// symmetric system per step for the conditional-mean gain.
    pub fn new(
        model_sys: &TimeVaryingLinearSystem,
        noise: &NoiseSpec,
        dims: &Dims,
    ) -> Result<Self> {
        model_sys.validate(dims)?;
        if noise.horizon() != dims.horizon {
            return Err(Error::HorizonMismatch {
                what: "noise specification".into(),
                expected: dims.horizon,
                got: noise.horizon(),
            });
        }
        let horizon = dims.horizon;
        let len = noise.len();
        let sigma = noise.cov();
        let mu = noise.mean();

        // psi maps the primitive vector to the control-free state at time t.
        let mut psi = DMatrix::<f64>::zeros(dims.n, len);
        psi.view_mut((0, 0), (dims.n, dims.n))
            .copy_from(&DMatrix::identity(dims.n, dims.n));
        // Row blocks of the map from the primitive vector to the stacked
        // observation noise parts o_0 … o_T.
        let mut rows: Vec<DMatrix<f64>> = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let mut row = &model_sys.c[t] * &psi;
            if t < horizon {
                let zr = noise.z_indices(t)?;
                row.view_mut((0, zr.start), (dims.p, dims.s))
                    .copy_from(&model_sys.e[t]);
            }
            rows.push(row);
            if t < horizon {
                let mut next = &model_sys.a[t] * &psi;
                let wr = noise.w_indices(t)?;
                let mut block = next.view_mut((0, wr.start), (dims.n, dims.r));
                block += &model_sys.d[t];
                psi = next;
            }
        }

        let mut gains = Vec::with_capacity(horizon);
        let mut offsets = Vec::with_capacity(horizon);
        let mut trivial = true;
        let mut phi = DMatrix::<f64>::zeros(0, len);
        for t in 0..horizon {
            let mut stacked = DMatrix::zeros(phi.nrows() + dims.p, len);
            stacked.view_mut((0, 0), (phi.nrows(), len)).copy_from(&phi);
            stacked
                .view_mut((phi.nrows(), 0), (dims.p, len))
                .copy_from(&rows[t]);
            phi = stacked;

            let obs_cov = linalg::symmetrize(&(&phi * sigma * phi.transpose()));
            let wr = noise.w_indices(t)?;
            // Cov(w_t, o_{0..t}) = Σ[w rows] Φ'.
            let cross = sigma.rows(wr.start, dims.r) * phi.transpose();
            let gain_t = linalg::solve_spd(&obs_cov, &cross.transpose(), "observation covariance")?
                .transpose();
            if gain_t.amax() > 1e-14 {
                trivial = false;
            }
            let offset = mu.rows(wr.start, dims.r) - &gain_t * (&phi * mu);
            gains.push(gain_t);
            offsets.push(offset);
        }
        Ok(Self {
            gains,
            offsets,
            trivial,
            p: dims.p,
            horizon,
        })
    }

    /// A conditioner that ignores observations and always returns the
    /// unconditional disturbance means.
    pub fn unconditional(noise: &NoiseSpec, dims: &Dims) -> Result<Self> {
        let horizon = noise.horizon();
        let mut gains = Vec::with_capacity(horizon);
        let mut offsets = Vec::with_capacity(horizon);
        for t in 0..horizon {
            gains.push(DMatrix::zeros(dims.r, dims.p * (t + 1)));
            offsets.push(noise.step_noise(t)?.w_mean);
        }
        Ok(Self {
            gains,
            offsets,
            trivial: true,
            p: dims.p,
            horizon,
        })
    }

    /// True when every gain is numerically zero, i.e. observations carry no
    /// information about disturbances (independent primitives).
    pub fn is_trivial(&self) -> bool {
        self.trivial
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `E[w_t | o_0 … o_t]` given the realized observation noise parts.
    /// `noise_parts` must hold at least `t + 1` entries of dimension `p`.
    pub fn conditional_mean(&self, t: usize, noise_parts: &[DVector<f64>]) -> Result<DVector<f64>> {
        if t >= self.horizon {
            return Err(Error::IndexOutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        if noise_parts.len() < t + 1 {
            return Err(Error::LengthMismatch {
                expected: t + 1,
                got: noise_parts.len(),
            });
        }
        if self.trivial {
            return Ok(self.offsets[t].clone());
        }
        let mut stacked = DVector::zeros(self.p * (t + 1));
        for (i, o) in noise_parts.iter().take(t + 1).enumerate() {
            if o.len() != self.p {
                return Err(Error::dim(
                    format!("observation noise part {i}"),
                    format!("{}", self.p),
                    format!("{}", o.len()),
                ));
            }
            stacked.rows_mut(i * self.p, self.p).copy_from(o);
        }
        Ok(&self.offsets[t] + &self.gains[t] * stacked)
    }
}

/// Everything an episode needs, borrowed from the caller.
#[derive(Clone)]
pub struct SimSetup<'a> {
    pub plant: &'a TimeVaryingLinearSystem,
    pub model: &'a TimeVaryingLinearSystem,
    pub noise: &'a NoiseSpec,
    pub conditioner: &'a DisturbanceConditioner,
    pub strategy: &'a SeparatedStrategy,
    pub slot_policy: SlotPolicy,
    pub dims: Dims,
}

impl SimSetup<'_> {
    /// Checks dimensional consistency and the strategy/policy pairing: a
    /// bound strategy takes no slot values, a parameterized one requires a
    /// policy that supplies them.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.plant.validate(&self.dims)?;
        self.model.validate(&self.dims)?;
        if self.noise.horizon() != self.dims.horizon {
            return Err(Error::HorizonMismatch {
                what: "noise specification".into(),
                expected: self.dims.horizon,
                got: self.noise.horizon(),
            });
        }
        if self.conditioner.horizon() != self.dims.horizon {
            return Err(Error::HorizonMismatch {
                what: "disturbance conditioner".into(),
                expected: self.dims.horizon,
                got: self.conditioner.horizon(),
            });
        }
        if self.strategy.horizon() != self.dims.horizon {
            return Err(Error::HorizonMismatch {
                what: "strategy".into(),
                expected: self.dims.horizon,
                got: self.strategy.horizon(),
            });
        }
        if self.strategy.state_dim() != self.dims.n || self.strategy.control_dim() != self.dims.m {
            return Err(Error::dim(
                "strategy state/control dimensions",
                format!("{}x{}", self.dims.n, self.dims.m),
                format!("{}x{}", self.strategy.state_dim(), self.strategy.control_dim()),
            ));
        }
        match (&self.slot_policy, self.strategy.mode()) {
            (SlotPolicy::None, BindingMode::Parameterized) => return Err(Error::NotBound),
            (SlotPolicy::None, BindingMode::Bound) => {}
            (_, BindingMode::Bound) => return Err(Error::AlreadyBound),
            (_, BindingMode::Parameterized) => {}
        }
        if let SlotPolicy::OuterTargets(outer) = &self.slot_policy {
            if outer.mode() != BindingMode::Bound {
                return Err(Error::NotBound);
            }
            if outer.horizon() != self.dims.horizon || outer.state_dim() != self.dims.n {
                return Err(Error::HorizonMismatch {
                    what: "outer strategy".into(),
                    expected: self.dims.horizon,
                    got: outer.horizon(),
                });
            }
        }
        if let SlotPolicy::ProbedConstants { targets, .. } = &self.slot_policy {
            if targets.len() != self.dims.horizon + 1 {
                return Err(Error::LengthMismatch {
                    expected: self.dims.horizon + 1,
                    got: targets.len(),
                });
            }
        }
        Ok(())
    }
}

/// One simulated episode: the realized trajectories, the final information
/// state, and the filtered beliefs at every time.
#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub record: EpisodeRecord,
    pub info: InformationState,
    pub model_beliefs: Vec<GaussianBelief>,
    pub plant_beliefs: Vec<GaussianBelief>,
}

fn control_for_step(
    setup: &SimSetup,
    t: usize,
    episode: u64,
    model_mean: &DVector<f64>,
    plant_mean: &DVector<f64>,
    w_bar: &DVector<f64>,
    info: &InformationState,
) -> Result<DVector<f64>> {
    let dims = &setup.dims;
    let horizon = dims.horizon;
    match &setup.slot_policy {
        SlotPolicy::None => setup
            .strategy
            .control(t, model_mean, plant_mean, w_bar, &[]),
        SlotPolicy::SelfConsistent => {
            let law = setup.strategy.step(t)?;
            let zero_slots = vec![DVector::zeros(dims.n); horizon - t];
            let base = setup
                .strategy
                .control(t, model_mean, plant_mean, w_bar, &zero_slots)?;
            // u = base + G (Â pm + B̂ u + D̂ w̄)  with G the first slot block.
            let g = law.slot_gain.columns(0, dims.n).clone_owned();
            let rhs = &base + &g * (&setup.plant.a[t] * plant_mean + &setup.plant.d[t] * w_bar);
            let lhs = DMatrix::identity(dims.m, dims.m) - &g * &setup.plant.b[t];
            lhs.lu().solve(&rhs).ok_or_else(|| {
                Error::NumericalFailure(format!(
                    "self-consistent slot binding is singular at step {t}"
                ))
            })
        }
        SlotPolicy::OuterTargets(outer) => {
            let u_ref = outer.control(t, model_mean, plant_mean, w_bar, &[])?;
            let target = &setup.model.a[t] * model_mean
                + &setup.model.b[t] * &u_ref
                + &setup.model.d[t] * w_bar;
            let mut slots = vec![DVector::zeros(dims.n); horizon - t];
            slots[0] = target;
            setup
                .strategy
                .control(t, model_mean, plant_mean, w_bar, &slots)
        }
        SlotPolicy::ProbedConstants { targets, amplitude } => {
            let mut slots = Vec::with_capacity(horizon - t);
            for s in (t + 1)..=horizon {
                slots.push(targets[s].add_scalar(amplitude * probe_offset(episode, s)));
            }
            setup
                .strategy
                .control(t, model_mean, plant_mean, w_bar, &slots)
        }
        SlotPolicy::PerStepRefresh { amplitude } => {
            let (_, plant_marginal) = factorize(info)?;
            let mut mean = plant_marginal.mean().clone();
            let mut slots = Vec::with_capacity(horizon - t);
            for s in t..horizon {
                let w_mean_s = if s == t {
                    w_bar.clone()
                } else {
                    setup.noise.step_noise(s)?.w_mean
                };
                mean = &setup.model.a[s] * &mean + &setup.model.d[s] * &w_mean_s;
                slots.push(mean.add_scalar(amplitude * probe_offset(episode, s + 1)));
            }
            setup
                .strategy
                .control(t, model_mean, plant_mean, w_bar, &slots)
        }
    }
}

/// Simulates one episode with primitives drawn from `rng`.
///
/// Both systems consume the same primitive draw — initial state, disturbance
/// sequence, sensor noises — and the same controls; only their matrices
/// differ. The information state is filtered from the realized outputs, and
/// the same conditional disturbance mean handed to the strategy also feeds
/// its `Kw` channel. `episode` keys the exploration offsets of probing slot
/// policies and is echoed by Monte Carlo drivers as the global stream index.
pub fn run_episode<R: Rng + ?Sized>(
    setup: &SimSetup,
    episode: u64,
    rng: &mut R,
) -> Result<EpisodeOutput> {
    let xi = setup.noise.sample(rng);
    let (x0, w_seq, z_seq) = setup.noise.split(&xi)?;
    run_episode_with_primitives(setup, episode, &x0, &w_seq, &z_seq)
}

/// Simulates one episode on explicitly supplied primitives.
///
/// Everything the strategy sees still flows through the information state
/// and the disturbance conditioner, which treat the primitives as draws from
/// `setup.noise`; fixing them instead isolates the strategy's exact affine
/// response (two runs differing in one primitive coordinate differ in each
/// control by that coordinate's coefficient).
pub fn run_episode_with_primitives(
    setup: &SimSetup,
    episode: u64,
    x0: &DVector<f64>,
    w_seq: &[DVector<f64>],
    z_seq: &[DVector<f64>],
) -> Result<EpisodeOutput> {
    let dims = &setup.dims;
    let horizon = dims.horizon;
    if x0.len() != dims.n {
        return Err(Error::dim(
            "initial state",
            format!("{}", dims.n),
            format!("{}", x0.len()),
        ));
    }
    if w_seq.len() != horizon || z_seq.len() != horizon {
        return Err(Error::LengthMismatch {
            expected: horizon,
            got: w_seq.len().min(z_seq.len()),
        });
    }
    let zero_z = DVector::zeros(dims.s);

    let mut x = x0.clone();
    let mut xhat = x0.clone();
    let y0 = setup.model.observe(0, &x, &z_seq[0])?;
    let yhat0 = setup.plant.observe(0, &xhat, &z_seq[0])?;
    let density = OutputDensityEstimate::new(dims.n, dims.p, dims.m, horizon);
    let mut info = InformationState::initial(setup.model, setup.noise, &y0, &yhat0, density)?;
    let mut model_beliefs = vec![info.model_belief.clone()];
    let mut plant_beliefs = vec![info.plant_belief.clone()];

    let mut record = EpisodeRecord {
        x: vec![x.clone()],
        xhat: vec![xhat.clone()],
        y: vec![y0.clone()],
        yhat: vec![yhat0.clone()],
        u: Vec::with_capacity(horizon),
        w: w_seq.to_vec(),
        z: z_seq.to_vec(),
    };

    // Control-free model response, used to strip the known control
    // contribution off the model-side observations for conditioning.
    let mut free = DVector::zeros(dims.n);
    let mut noise_parts: Vec<DVector<f64>> = Vec::with_capacity(horizon + 1);
    noise_parts.push(y0.clone());

    for t in 0..horizon {
        let w_bar = setup.conditioner.conditional_mean(t, &noise_parts)?;
        let model_mean = info.model_belief.mean().clone();
        let plant_mean = info.plant_belief.mean().clone();
        let u = control_for_step(setup, t, episode, &model_mean, &plant_mean, &w_bar, &info)?;

        let x_next = setup.model.step(t, &x, &u, &w_seq[t])?;
        let xhat_next = setup.plant.step(t, &xhat, &u, &w_seq[t])?;
        let z_next = if t + 1 < horizon { &z_seq[t + 1] } else { &zero_z };
        let y_next = setup.model.observe(t + 1, &x_next, z_next)?;
        let yhat_next = setup.plant.observe(t + 1, &xhat_next, z_next)?;

        // The plant belief is filtered with the model matrices — the
        // controller's hypothesis — driven by the realized plant outputs.
        info = info_state_update(
            &info,
            &y_next,
            &yhat_next,
            &u,
            setup.model,
            setup.model,
            setup.noise,
        )?;
        model_beliefs.push(info.model_belief.clone());
        plant_beliefs.push(info.plant_belief.clone());

        free = &setup.model.a[t] * &free + &setup.model.b[t] * &u;
        noise_parts.push(&y_next - &setup.model.c[t + 1] * &free);

        record.x.push(x_next.clone());
        record.xhat.push(xhat_next.clone());
        record.y.push(y_next.clone());
        record.yhat.push(yhat_next.clone());
        record.u.push(u);
        x = x_next;
        xhat = xhat_next;
    }
    record.validate(dims)?;
    Ok(EpisodeOutput {
        record,
        info,
        model_beliefs,
        plant_beliefs,
    })
}

/// Running scalar moments (Welford), mergeable in a fixed order.
#[derive(Debug, Clone, Default)]
struct ScalarMoments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl ScalarMoments {
    fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    fn merge(&mut self, other: &ScalarMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let delta = other.mean - self.mean;
        let total = na + nb;
        self.mean += delta * (nb / total);
        self.m2 += other.m2 + delta * delta * (na * nb / total);
        self.count += other.count;
    }

    fn variance(&self) -> f64 {
        if self.count > 1 {
            self.m2 / (self.count - 1) as f64
        } else {
            0.0
        }
    }

    fn stderr(&self) -> f64 {
        if self.count > 0 {
            (self.variance() / self.count as f64).sqrt()
        } else {
            0.0
        }
    }
}

/// Componentwise vector moments with the same merge discipline.
#[derive(Debug, Clone)]
struct VectorMoments {
    count: u64,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl VectorMoments {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
        }
    }

    fn push(&mut self, v: &DVector<f64>) {
        self.count += 1;
        let n = self.count as f64;
        for i in 0..self.mean.len() {
            let delta = v[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (v[i] - self.mean[i]);
        }
    }

    fn merge(&mut self, other: &VectorMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let total = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * (nb / total);
            self.m2[i] += other.m2[i] + delta * delta * (na * nb / total);
        }
        self.count += other.count;
    }

    fn std(&self) -> DVector<f64> {
        if self.count > 1 {
            self.m2.map(|v| (v / (self.count - 1) as f64).sqrt())
        } else {
            DVector::zeros(self.mean.len())
        }
    }
}

/// Monte Carlo execution options.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub mode: ExecMode,
    /// Master seed; episode `i` draws from stream `stream_offset + i`.
    pub seed: u64,
    /// Added to every episode index, so successive batches of one experiment
    /// consume disjoint random streams.
    pub stream_offset: u64,
    /// Accumulate cross-episode output statistics into the report.
    pub collect_density: bool,
    /// Keep every episode's full output in the report (memory-heavy; meant
    /// for dumps and diagnostics, not large runs).
    pub keep_outputs: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            mode: ExecMode::default(),
            seed: 0,
            stream_offset: 0,
            collect_density: false,
            keep_outputs: false,
        }
    }
}

/// Aggregated results of a Monte Carlo run.
///
/// Serialized form is canonical: it omits wall-clock time and bulky
/// attachments, so two runs over the same episode streams produce identical
/// JSON regardless of thread count or elapsed time.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub episodes: u64,
    pub cost: CostReport,
    /// Mean model-minus-plant state gap at times `1..=horizon`
    /// (`discrepancy_mean[t]` is the gap at time `t + 1`, one entry per
    /// state component).
    pub discrepancy_mean: Vec<Vec<f64>>,
    pub discrepancy_std: Vec<Vec<f64>>,
    /// Largest absolute gap seen in any episode, per step and component.
    pub discrepancy_max: Vec<Vec<f64>>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub density: Option<OutputDensityEstimate>,
    #[serde(skip)]
    pub outputs: Option<Vec<EpisodeOutput>>,
}

impl MonteCarloReport {
    /// Deterministic JSON rendering of the aggregate statistics.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct ChunkStats {
    j1: ScalarMoments,
    j2: ScalarMoments,
    penalty: ScalarMoments,
    gaps: Vec<VectorMoments>,
    gap_max: Vec<DVector<f64>>,
    density: Option<OutputDensityEstimate>,
    outputs: Option<Vec<EpisodeOutput>>,
}

impl ChunkStats {
    fn new(dims: &Dims, options: &SimOptions) -> Self {
        Self {
            j1: ScalarMoments::default(),
            j2: ScalarMoments::default(),
            penalty: ScalarMoments::default(),
            gaps: vec![VectorMoments::new(dims.n); dims.horizon],
            gap_max: vec![DVector::zeros(dims.n); dims.horizon],
            density: options.collect_density.then(|| {
                OutputDensityEstimate::new(dims.n, dims.p, dims.m, dims.horizon)
            }),
            outputs: options.keep_outputs.then(Vec::new),
        }
    }

    fn merge(&mut self, other: ChunkStats) -> Result<()> {
        self.j1.merge(&other.j1);
        self.j2.merge(&other.j2);
        self.penalty.merge(&other.penalty);
        for (mine, theirs) in self.gaps.iter_mut().zip(other.gaps.iter()) {
            mine.merge(theirs);
        }
        for (mine, theirs) in self.gap_max.iter_mut().zip(other.gap_max.iter()) {
            mine.zip_apply(theirs, |m, t| *m = m.max(t));
        }
        if let (Some(mine), Some(theirs)) = (self.density.as_mut(), other.density.as_ref()) {
            mine.merge(theirs)?;
        }
        if let (Some(mine), Some(theirs)) = (self.outputs.as_mut(), other.outputs) {
            mine.extend(theirs);
        }
        Ok(())
    }
}

fn process_chunk(
    setup: &SimSetup,
    cost: &QuadraticCostSpec,
    options: &SimOptions,
    range: Range<u64>,
) -> Result<ChunkStats> {
    let mut stats = ChunkStats::new(&setup.dims, options);
    for i in range {
        let stream = options.stream_offset + i;
        let mut rng = RngStreamSpec::for_episode(options.seed, stream).rng();
        let out = run_episode(setup, stream, &mut rng)?;
        stats.j1.push(problem1_cost(cost, &out.record));
        stats.j2.push(problem2_cost(cost, &out.record));
        stats.penalty.push(discrepancy_penalty(cost, &out.record));
        for t in 0..setup.dims.horizon {
            let gap = &out.record.x[t + 1] - &out.record.xhat[t + 1];
            stats.gap_max[t].zip_apply(&gap, |m, g| *m = m.max(g.abs()));
            stats.gaps[t].push(&gap);
        }
        if let Some(density) = stats.density.as_mut() {
            density.absorb(&out.record.yhat, &out.record.u)?;
            for (t, belief) in out.plant_beliefs.iter().enumerate() {
                density.absorb_step_belief(t, belief)?;
            }
        }
        if let Some(outputs) = stats.outputs.as_mut() {
            outputs.push(out);
        }
    }
    Ok(stats)
}

#[cfg(feature = "parallel")]
fn map_chunks<F>(parallel: bool, ranges: Vec<Range<u64>>, f: F) -> Result<Vec<ChunkStats>>
where
    F: Fn(Range<u64>) -> Result<ChunkStats> + Sync + Send,
{
    if parallel {
        ranges.into_par_iter().map(f).collect()
    } else {
        ranges.into_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn map_chunks<F>(_parallel: bool, ranges: Vec<Range<u64>>, f: F) -> Result<Vec<ChunkStats>>
where
    F: Fn(Range<u64>) -> Result<ChunkStats> + Sync + Send,
{
    ranges.into_iter().map(f).collect()
}

/// Runs `episodes` independent episodes and aggregates costs, per-step
/// model/plant gaps, and (optionally) cross-episode output statistics.
///
/// Episode `i` draws from random stream `stream_offset + i` of the master
/// seed, independent of scheduling. Episodes are processed in fixed chunks
/// of [`EPISODE_CHUNK`] and partial moments are merged in chunk order, so
/// the report is bit-identical across [`ExecMode`]s and thread counts.
pub fn run_monte_carlo(
    setup: &SimSetup,
    cost: &QuadraticCostSpec,
    episodes: u64,
    options: &SimOptions,
) -> Result<MonteCarloReport> {
    setup.validate()?;
    cost.validate(&setup.dims)?;
    if episodes == 0 {
        return Err(Error::Config("episode count must be positive".into()));
    }
    let started = Instant::now();
    let mut ranges = Vec::new();
    let mut begin = 0u64;
    while begin < episodes {
        let end = (begin + EPISODE_CHUNK).min(episodes);
        ranges.push(begin..end);
        begin = end;
    }
    let parallel = options.mode == ExecMode::Parallel;
    let chunks = map_chunks(parallel, ranges, |range| {
        process_chunk(setup, cost, options, range)
    })?;

    let mut total = ChunkStats::new(&setup.dims, options);
    for chunk in chunks {
        total.merge(chunk)?;
    }

    let cost_report = CostReport {
        j1_mean: total.j1.mean,
        j1_stderr: total.j1.stderr(),
        j2_mean: total.j2.mean,
        j2_stderr: total.j2.stderr(),
        penalty_mean: total.penalty.mean,
        episodes: episodes as usize,
    };
    Ok(MonteCarloReport {
        episodes,
        cost: cost_report,
        discrepancy_mean: total
            .gaps
            .iter()
            .map(|g| g.mean.as_slice().to_vec())
            .collect(),
        discrepancy_std: total.gaps.iter().map(|g| g.std().as_slice().to_vec()).collect(),
        discrepancy_max: total
            .gap_max
            .iter()
            .map(|g| g.as_slice().to_vec())
            .collect(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        density: total.density,
        outputs: total.outputs,
    })
}

/// Monte Carlo cost estimate for a bound strategy — the standard way to
/// score one executable strategy against a plant/model pair.
pub fn evaluate_strategy(
    plant: &TimeVaryingLinearSystem,
    model: &TimeVaryingLinearSystem,
    strategy: &SeparatedStrategy,
    noise: &NoiseSpec,
    conditioner: &DisturbanceConditioner,
    cost: &QuadraticCostSpec,
    dims: &Dims,
    episodes: u64,
    options: &SimOptions,
) -> Result<CostReport> {
    let setup = SimSetup {
        plant,
        model,
        noise,
        conditioner,
        strategy,
        slot_policy: SlotPolicy::None,
        dims: *dims,
    };
    Ok(run_monte_carlo(&setup, cost, episodes, options)?.cost)
}

/// Closed-loop learning options.
#[derive(Debug, Clone)]
pub struct LearnOptions {
    /// Target-refinement rounds. The final round runs without exploration
    /// offsets (unless it is the only round, where exploration is kept so a
    /// response can be identified at all).
    pub outer_iterations: usize,
    /// Episodes per round.
    pub inner_episodes: u64,
    pub seed: u64,
    /// Base exploration amplitude, halved every round.
    pub probe_amplitude: f64,
    /// Convergence threshold on the max target drift between rounds.
    pub tol: f64,
    pub mode: ExecMode,
    /// Use the per-step refresh slot policy instead of fixed per-round
    /// targets.
    pub rebind_per_step: bool,
    /// Ridge added when inverting regressor second moments.
    pub ridge: f64,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self {
            outer_iterations: 3,
            inner_episodes: 2000,
            seed: 0,
            probe_amplitude: 1.0,
            tol: 1e-3,
            mode: ExecMode::default(),
            rebind_per_step: false,
            ridge: 1e-9,
        }
    }
}

/// Closed-loop learning summary.
#[derive(Debug, Clone, Serialize)]
pub struct LearnReport {
    pub outer_iterations: usize,
    pub inner_episodes: u64,
    /// Slot targets after each round, `target_trace[round][state time]`.
    pub target_trace: Vec<Vec<Vec<f64>>>,
    /// Max-norm target drift per round.
    pub target_deltas: Vec<f64>,
    /// Whether the last drift fell below tolerance.
    pub converged: Option<bool>,
    /// True when the final strategy came from the fitted one-step response;
    /// false when it fell back to binding the last targets directly.
    pub used_response_map: bool,
    pub episodes_used: u64,
    /// Cost of the learned strategy on a fresh evaluation batch.
    pub final_cost: CostReport,
}

/// Learns an executable strategy against a plant whose matrices are never
/// read — only its realized outputs are.
///
/// Each round binds the parameterized `strategy` to the current expected
/// plant-trajectory targets (plus decaying zero-mean exploration offsets),
/// simulates a batch on fresh random streams, and refreshes the targets from
/// the accumulated per-step plant statistics. After the last round a
/// one-step input/output response is fitted to everything observed and a
/// certainty-equivalent synthesis on that response — intercepts folded in as
/// drift — yields the learned strategy, its gains applied to the
/// plant-belief channel. If too few episodes accumulated to identify a
/// response, the last targets are bound directly instead. The returned cost
/// comes from a final exploration-free evaluation batch on disjoint streams.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_learn(
    plant: &TimeVaryingLinearSystem,
    model: &TimeVaryingLinearSystem,
    strategy: &SeparatedStrategy,
    noise: &NoiseSpec,
    conditioner: &DisturbanceConditioner,
    cost: &QuadraticCostSpec,
    dims: &Dims,
    options: &LearnOptions,
) -> Result<(LearnReport, SeparatedStrategy)> {
    if strategy.mode() != BindingMode::Parameterized {
        return Err(Error::AlreadyBound);
    }
    if options.outer_iterations == 0 || options.inner_episodes == 0 {
        return Err(Error::Config(
            "learning needs at least one round and one episode per round".into(),
        ));
    }

    // Initial targets: the model's open-loop mean trajectory.
    let (x0_mean, _) = noise.x0_prior();
    let mut targets: Vec<DVector<f64>> = Vec::with_capacity(dims.horizon + 1);
    targets.push(x0_mean);
    for t in 0..dims.horizon {
        let w_mean = noise.step_noise(t)?.w_mean;
        let next = &model.a[t] * &targets[t] + &model.d[t] * &w_mean;
        targets.push(next);
    }

    let mut cumulative = OutputDensityEstimate::new(dims.n, dims.p, dims.m, dims.horizon);
    let mut target_trace = Vec::with_capacity(options.outer_iterations);
    let mut target_deltas = Vec::with_capacity(options.outer_iterations);
    let mut converged = None;

    for round in 0..options.outer_iterations {
        let last = round + 1 == options.outer_iterations;
        let amplitude = if last && options.outer_iterations > 1 {
            0.0
        } else {
            options.probe_amplitude * 0.5f64.powi(round as i32)
        };
        let slot_policy = if options.rebind_per_step {
            SlotPolicy::PerStepRefresh { amplitude }
        } else {
            SlotPolicy::ProbedConstants {
                targets: targets.clone(),
                amplitude,
            }
        };
        let setup = SimSetup {
            plant,
            model,
            noise,
            conditioner,
            strategy,
            slot_policy,
            dims: *dims,
        };
        let run_options = SimOptions {
            mode: options.mode,
            seed: options.seed,
            stream_offset: round as u64 * options.inner_episodes,
            collect_density: true,
            keep_outputs: false,
        };
        let report = run_monte_carlo(&setup, cost, options.inner_episodes, &run_options)?;
        let batch = report
            .density
            .expect("monte carlo collects a density when asked");
        cumulative.merge(&batch)?;

        let mut delta: f64 = 0.0;
        for s in 1..=dims.horizon {
            if cumulative.step_count(s) > 0 {
                let collapsed = cumulative.collapse_step(s)?;
                delta = delta.max((collapsed.mean() - &targets[s]).amax());
                targets[s] = collapsed.mean().clone();
            }
        }
        target_trace.push(targets.iter().map(|v| v.as_slice().to_vec()).collect());
        target_deltas.push(delta);
        converged = Some(delta <= options.tol);
    }

    // Certainty-equivalent synthesis on the fitted response, with the
    // regression intercepts entering the backward pass as drift.
    let predictors = 1 + dims.n + dims.m;
    let enough = cumulative.count() >= (predictors + 2).max(4);
    let fitted = if enough {
        cumulative.response_map(options.ridge).ok()
    } else {
        None
    };
    let (learned, used_response_map) = match fitted {
        Some(response) => {
            let learned_sys = TimeVaryingLinearSystem::new(
                response.a,
                response.b,
                vec![DMatrix::zeros(dims.n, dims.r); dims.horizon],
                model.c.clone(),
                model.e.clone(),
                dims,
            )?;
            let synthesized =
                solve_lq_with_drift(&learned_sys, cost, dims, &response.intercept)?
                    .with_gains_on_plant_belief()
                    .bind_parameters(&StrategyParameterization::new(vec![
                        DVector::zeros(dims.n);
                        dims.horizon + 1
                    ]))?;
            (synthesized, true)
        }
        None => {
            let bound = strategy.bind_parameters(&StrategyParameterization::new(targets.clone()))?;
            (bound, false)
        }
    };

    // Exploration-free scoring on disjoint streams.
    let eval_setup = SimSetup {
        plant,
        model,
        noise,
        conditioner,
        strategy: &learned,
        slot_policy: SlotPolicy::None,
        dims: *dims,
    };
    let eval_options = SimOptions {
        mode: options.mode,
        seed: options.seed,
        stream_offset: options.outer_iterations as u64 * options.inner_episodes,
        collect_density: false,
        keep_outputs: false,
    };
    let eval = run_monte_carlo(&eval_setup, cost, options.inner_episodes, &eval_options)?;

    let report = LearnReport {
        outer_iterations: options.outer_iterations,
        inner_episodes: options.inner_episodes,
        target_trace,
        target_deltas,
        converged,
        used_response_map,
        episodes_used: (options.outer_iterations as u64 + 1) * options.inner_episodes,
        final_cost: eval.cost,
    };
    Ok((report, learned))
}

fn csv_row(out: &mut dyn std::io::Write, fields: &[String]) -> Result<()> {
    writeln!(out, "{}", fields.join(",")).map_err(Error::from)
}

fn push_vector(fields: &mut Vec<String>, v: &DVector<f64>) {
    for value in v.iter() {
        fields.push(format!("{value}"));
    }
}

fn push_empty(fields: &mut Vec<String>, count: usize) {
    for _ in 0..count {
        fields.push(String::new());
    }
}

/// Writes per-step trajectories of every episode as CSV.
///
/// Columns: `episode,t`, then the model state, plant state, model output,
/// plant output, control, disturbance, and sensor draw, each component
/// getting its own column. Control, disturbance, and sensor columns are
/// empty on the terminal row.
pub fn write_episode_csv(
    out: &mut dyn std::io::Write,
    outputs: &[EpisodeOutput],
    dims: &Dims,
) -> Result<()> {
    let mut header = vec!["episode".to_string(), "t".to_string()];
    let blocks: [(&str, usize); 7] = [
        ("x", dims.n),
        ("xhat", dims.n),
        ("y", dims.p),
        ("yhat", dims.p),
        ("u", dims.m),
        ("w", dims.r),
        ("z", dims.s),
    ];
    for (name, width) in blocks {
        for i in 0..width {
            header.push(format!("{name}{i}"));
        }
    }
    csv_row(out, &header)?;
    for (episode, output) in outputs.iter().enumerate() {
        let record = &output.record;
        for t in 0..=dims.horizon {
            let mut fields = vec![episode.to_string(), t.to_string()];
            push_vector(&mut fields, &record.x[t]);
            push_vector(&mut fields, &record.xhat[t]);
            push_vector(&mut fields, &record.y[t]);
            push_vector(&mut fields, &record.yhat[t]);
            if t < dims.horizon {
                push_vector(&mut fields, &record.u[t]);
                push_vector(&mut fields, &record.w[t]);
                push_vector(&mut fields, &record.z[t]);
            } else {
                push_empty(&mut fields, dims.m + dims.r + dims.s);
            }
            csv_row(out, &fields)?;
        }
    }
    Ok(())
}

/// Writes the filtered beliefs of every episode as CSV: means then
/// row-major covariances for the model belief, then the plant belief.
pub fn write_belief_csv(
    out: &mut dyn std::io::Write,
    outputs: &[EpisodeOutput],
    dims: &Dims,
) -> Result<()> {
    let n = dims.n;
    let mut header = vec!["episode".to_string(), "t".to_string()];
    for side in ["model", "plant"] {
        for i in 0..n {
            header.push(format!("{side}_mean{i}"));
        }
        for i in 0..n {
            for j in 0..n {
                header.push(format!("{side}_cov{i}{j}"));
            }
        }
    }
    csv_row(out, &header)?;
    for (episode, output) in outputs.iter().enumerate() {
        for t in 0..=dims.horizon {
            let mut fields = vec![episode.to_string(), t.to_string()];
            for belief in [&output.model_beliefs[t], &output.plant_beliefs[t]] {
                push_vector(&mut fields, belief.mean());
                for i in 0..n {
                    for j in 0..n {
                        fields.push(format!("{}", belief.cov()[(i, j)]));
                    }
                }
            }
            csv_row(out, &fields)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{matching_strategy, solve_tracking_lq};

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    /// The worked two-step scalar pair: fast model, slow plant, full state
    /// observation, initial state and first disturbance correlated -1/2.
    fn example() -> (
        TimeVaryingLinearSystem,
        TimeVaryingLinearSystem,
        NoiseSpec,
        QuadraticCostSpec,
        Dims,
    ) {
        let dims = Dims {
            n: 1,
            m: 1,
            p: 1,
            r: 1,
            s: 1,
            horizon: 2,
        };
        let model = TimeVaryingLinearSystem::new(
            vec![m1(3.0), m1(3.0)],
            vec![m1(2.0), m1(3.0)],
            vec![m1(2.0), m1(0.0)],
            vec![m1(1.0); 3],
            vec![m1(0.0); 3],
            &dims,
        )
        .unwrap();
        let plant = TimeVaryingLinearSystem::new(
            vec![m1(1.0), m1(1.0)],
            vec![m1(1.0), m1(1.0)],
            vec![m1(1.0), m1(0.0)],
            vec![m1(1.0); 3],
            vec![m1(0.0); 3],
            &dims,
        )
        .unwrap();
        let mut cov = DMatrix::zeros(5, 5);
        cov[(0, 0)] = 1.0;
        cov[(1, 1)] = 1.0;
        cov[(0, 1)] = -0.5;
        cov[(1, 0)] = -0.5;
        let noise = NoiseSpec::zero_mean(cov, &dims).unwrap();
        let cost = QuadraticCostSpec {
            qx: vec![DMatrix::zeros(1, 1); 2],
            ru: vec![DMatrix::zeros(1, 1), m1(0.5)],
            qt: m1(0.5),
            lx: None,
            lu: None,
            lt: None,
            beta: 1.0,
        };
        (model, plant, noise, cost, dims)
    }

    #[test]
    fn probe_offsets_are_zero_sum_over_any_five_consecutive_episodes() {
        for slot in 0..7 {
            for start in 0..11u64 {
                let sum: f64 = (start..start + 5).map(|e| probe_offset(e, slot)).sum();
                assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn identical_systems_never_diverge() {
        let (model, _, noise, _, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let zero = SeparatedStrategy::zero(&dims);
        let setup = SimSetup {
            plant: &model,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &zero,
            slot_policy: SlotPolicy::None,
            dims,
        };
        for episode in 0..32u64 {
            let mut rng = RngStreamSpec::for_episode(7, episode).rng();
            let out = run_episode(&setup, episode, &mut rng).unwrap();
            for t in 0..=dims.horizon {
                assert_eq!(out.record.x[t], out.record.xhat[t]);
                assert_eq!(out.record.y[t], out.record.yhat[t]);
            }
        }
    }

    #[test]
    fn same_stream_reproduces_the_episode_bitwise() {
        let (model, plant, noise, _, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let zero = SeparatedStrategy::zero(&dims);
        let setup = SimSetup {
            plant: &plant,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &zero,
            slot_policy: SlotPolicy::None,
            dims,
        };
        let mut rng_a = RngStreamSpec::for_episode(11, 5).rng();
        let mut rng_b = RngStreamSpec::for_episode(11, 5).rng();
        let a = run_episode(&setup, 5, &mut rng_a).unwrap();
        let b = run_episode(&setup, 5, &mut rng_b).unwrap();
        assert_eq!(a.record, b.record);
    }

    #[test]
    fn records_respect_shared_primitives_and_dynamics() {
        let (model, plant, noise, _, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let zero = SeparatedStrategy::zero(&dims);
        let setup = SimSetup {
            plant: &plant,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &zero,
            slot_policy: SlotPolicy::None,
            dims,
        };
        let mut rng = RngStreamSpec::for_episode(3, 0).rng();
        let out = run_episode(&setup, 0, &mut rng).unwrap();
        let r = &out.record;
        assert_eq!(r.x[0], r.xhat[0]);
        for t in 0..dims.horizon {
            let x_next = model.step(t, &r.x[t], &r.u[t], &r.w[t]).unwrap();
            let xhat_next = plant.step(t, &r.xhat[t], &r.u[t], &r.w[t]).unwrap();
            assert_eq!(r.x[t + 1], x_next);
            assert_eq!(r.xhat[t + 1], xhat_next);
        }
        let zero_z = DVector::zeros(dims.s);
        for t in 0..=dims.horizon {
            let z = if t < dims.horizon { &r.z[t] } else { &zero_z };
            assert_eq!(r.y[t], model.observe(t, &r.x[t], z).unwrap());
            assert_eq!(r.yhat[t], plant.observe(t, &r.xhat[t], z).unwrap());
        }
    }

    #[test]
    fn conditioner_hand_values_on_the_example() {
        let (model, _, noise, _, dims) = example();
        let cond = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        assert!(!cond.is_trivial());
        // E[w_0 | y_0] = -x_0 / 2 under the -1/2 correlation.
        let o0 = DVector::from_element(1, 0.8);
        let w0 = cond.conditional_mean(0, &[o0.clone()]).unwrap();
        assert!((w0[0] + 0.4).abs() < 1e-12);
        // The second disturbance is degenerate (variance zero): mean stays 0.
        let w1 = cond
            .conditional_mean(1, &[o0, DVector::from_element(1, -2.3)])
            .unwrap();
        assert!(w1[0].abs() < 1e-12);
    }

    #[test]
    fn conditioner_is_trivial_for_independent_primitives() {
        let dims = Dims {
            n: 1,
            m: 1,
            p: 1,
            r: 1,
            s: 1,
            horizon: 2,
        };
        let sys = TimeVaryingLinearSystem::time_invariant(
            m1(0.9),
            m1(1.0),
            m1(1.0),
            m1(1.0),
            m1(0.1),
            &dims,
        )
        .unwrap();
        let noise = NoiseSpec::zero_mean(DMatrix::identity(5, 5), &dims).unwrap();
        let cond = DisturbanceConditioner::new(&sys, &noise, &dims).unwrap();
        assert!(cond.is_trivial());
        let parts = vec![DVector::from_element(1, 4.0); 3];
        assert!(cond.conditional_mean(1, &parts).unwrap()[0].abs() < 1e-12);

        let uncond = DisturbanceConditioner::unconditional(&noise, &dims).unwrap();
        assert!(uncond.is_trivial());
        assert_eq!(uncond.conditional_mean(0, &parts).unwrap()[0], 0.0);
    }

    #[test]
    fn setup_validation_rejects_mismatched_strategy_and_policy() {
        let (model, plant, noise, _, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let parameterized = matching_strategy(&model, &dims).unwrap();
        let bound = SeparatedStrategy::zero(&dims);

        let needs_slots = SimSetup {
            plant: &plant,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &parameterized,
            slot_policy: SlotPolicy::None,
            dims,
        };
        assert!(matches!(needs_slots.validate(), Err(Error::NotBound)));

        let already_bound = SimSetup {
            slot_policy: SlotPolicy::SelfConsistent,
            strategy: &bound,
            ..needs_slots.clone()
        };
        assert!(matches!(already_bound.validate(), Err(Error::AlreadyBound)));
    }

    #[test]
    fn self_consistent_binding_closes_the_final_state_gap() {
        let (model, plant, noise, cost, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let strategy = matching_strategy(&model, &dims).unwrap();
        let setup = SimSetup {
            plant: &plant,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &strategy,
            slot_policy: SlotPolicy::SelfConsistent,
            dims,
        };
        let options = SimOptions {
            keep_outputs: true,
            ..SimOptions::default()
        };
        let report = run_monte_carlo(&setup, &cost, 200, &options).unwrap();
        for out in report.outputs.as_ref().unwrap() {
            let r = &out.record;
            let gap = (r.x[2][0] - r.xhat[2][0]).abs();
            assert!(gap <= 1e-9, "final-state gap {gap}");
            // The closing control solves u = (xhat_1 - 3 x_1) / 2 here.
            let expected = (r.xhat[1][0] - 3.0 * r.x[1][0]) / 2.0;
            assert!((r.u[1][0] - expected).abs() <= 1e-9);
        }
        // The aggregated worst case agrees with the per-episode scan.
        assert!(report.discrepancy_max[1][0] <= 1e-9);
        assert!(report.discrepancy_max[0][0] > 0.1, "states differ mid-episode");
    }

    #[test]
    fn composing_with_a_zero_outer_law_reproduces_zero_controls() {
        let (model, plant, noise, cost, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let strategy = matching_strategy(&model, &dims).unwrap();
        let setup = SimSetup {
            plant: &plant,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &strategy,
            slot_policy: SlotPolicy::OuterTargets(SeparatedStrategy::zero(&dims)),
            dims,
        };
        let options = SimOptions {
            keep_outputs: true,
            ..SimOptions::default()
        };
        let report = run_monte_carlo(&setup, &cost, 50, &options).unwrap();
        for out in report.outputs.as_ref().unwrap() {
            for u in &out.record.u {
                assert!(u[0].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_episode_report_equals_direct_episode_costs() {
        let (model, plant, noise, cost, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let zero = SeparatedStrategy::zero(&dims);
        let setup = SimSetup {
            plant: &plant,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &zero,
            slot_policy: SlotPolicy::None,
            dims,
        };
        let options = SimOptions {
            keep_outputs: true,
            seed: 21,
            ..SimOptions::default()
        };
        let report = run_monte_carlo(&setup, &cost, 1, &options).unwrap();
        let record = &report.outputs.as_ref().unwrap()[0].record;
        assert_eq!(report.cost.j1_mean, problem1_cost(&cost, record));
        assert_eq!(report.cost.j2_mean, problem2_cost(&cost, record));
        assert_eq!(report.cost.penalty_mean, discrepancy_penalty(&cost, record));
        assert_eq!(report.cost.j1_stderr, 0.0);
    }

    #[test]
    fn reports_are_identical_across_execution_modes_and_reruns() {
        let (model, plant, noise, cost, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let strategy = matching_strategy(&model, &dims).unwrap();
        let render = |mode: ExecMode| {
            let setup = SimSetup {
                plant: &plant,
                model: &model,
                noise: &noise,
                conditioner: &conditioner,
                strategy: &strategy,
                slot_policy: SlotPolicy::SelfConsistent,
                dims,
            };
            let options = SimOptions {
                mode,
                seed: 4,
                ..SimOptions::default()
            };
            // Crosses two chunk boundaries so the merge order matters.
            run_monte_carlo(&setup, &cost, 9000, &options)
                .unwrap()
                .canonical_json()
        };
        let parallel_a = render(ExecMode::Parallel);
        let parallel_b = render(ExecMode::Parallel);
        let sequential = render(ExecMode::Sequential);
        assert_eq!(parallel_a, parallel_b);
        assert_eq!(parallel_a, sequential);
    }

    #[test]
    fn stderr_shrinks_like_the_square_root_of_the_episode_count() {
        let (model, plant, noise, cost, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let zero = SeparatedStrategy::zero(&dims);
        let setup = SimSetup {
            plant: &plant,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &zero,
            slot_policy: SlotPolicy::None,
            dims,
        };
        let run = |episodes: u64| {
            run_monte_carlo(&setup, &cost, episodes, &SimOptions::default())
                .unwrap()
                .cost
                .j1_stderr
        };
        let ratio = run(2000) / run(8000);
        assert!(
            (1.6..=2.4).contains(&ratio),
            "stderr ratio {ratio} outside the expected band"
        );
    }

    #[test]
    fn learning_smoke_run_yields_an_executable_strategy() {
        let (model, plant, noise, cost, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let strategy = matching_strategy(&model, &dims).unwrap();
        let options = LearnOptions {
            outer_iterations: 1,
            inner_episodes: 64,
            ..LearnOptions::default()
        };
        let (report, learned) = closed_loop_learn(
            &plant,
            &model,
            &strategy,
            &noise,
            &conditioner,
            &cost,
            &dims,
            &options,
        )
        .unwrap();
        assert_eq!(learned.mode(), BindingMode::Bound);
        assert_eq!(report.episodes_used, 128);
        assert_eq!(report.target_trace.len(), 1);

        // The per-step refresh variant also runs end to end.
        let per_step = LearnOptions {
            rebind_per_step: true,
            ..options
        };
        let (_, refreshed) = closed_loop_learn(
            &plant,
            &model,
            &strategy,
            &noise,
            &conditioner,
            &cost,
            &dims,
            &per_step,
        )
        .unwrap();
        assert_eq!(refreshed.mode(), BindingMode::Bound);
    }

    #[test]
    fn learning_without_mismatch_recovers_the_classical_law() {
        // Plant and model coincide and primitives are independent, so the
        // fitted response should reproduce the true dynamics and the learned
        // gains should match the backward-pass synthesis.
        let dims = Dims {
            n: 1,
            m: 1,
            p: 1,
            r: 1,
            s: 1,
            horizon: 2,
        };
        let sys = TimeVaryingLinearSystem::time_invariant(
            m1(0.9),
            m1(1.0),
            m1(1.0),
            m1(1.0),
            m1(0.0),
            &dims,
        )
        .unwrap();
        let noise = NoiseSpec::zero_mean(DMatrix::identity(5, 5), &dims).unwrap();
        let conditioner = DisturbanceConditioner::new(&sys, &noise, &dims).unwrap();
        let cost = QuadraticCostSpec {
            qx: vec![DMatrix::identity(1, 1); 2],
            ru: vec![DMatrix::identity(1, 1); 2],
            qt: DMatrix::identity(1, 1),
            lx: None,
            lu: None,
            lt: None,
            beta: 0.0,
        };
        let strategy = matching_strategy(&sys, &dims).unwrap();
        let options = LearnOptions {
            outer_iterations: 3,
            inner_episodes: 2000,
            seed: 9,
            ..LearnOptions::default()
        };
        let (report, learned) = closed_loop_learn(
            &sys, &sys, &strategy, &noise, &conditioner, &cost, &dims, &options,
        )
        .unwrap();
        assert!(report.used_response_map);
        let reference = solve_tracking_lq(&sys, &cost, &dims).unwrap();
        for t in 0..dims.horizon {
            let got = learned.step(t).unwrap().k_plant[(0, 0)];
            let want = reference.step(t).unwrap().k_model[(0, 0)];
            assert!(
                (got - want).abs() < 0.05,
                "step {t}: learned gain {got} vs reference {want}"
            );
            assert!(learned.step(t).unwrap().offset[0].abs() < 0.05);
        }
    }

    #[test]
    fn csv_writers_produce_well_formed_tables() {
        let (model, plant, noise, cost, dims) = example();
        let conditioner = DisturbanceConditioner::new(&model, &noise, &dims).unwrap();
        let zero = SeparatedStrategy::zero(&dims);
        let setup = SimSetup {
            plant: &plant,
            model: &model,
            noise: &noise,
            conditioner: &conditioner,
            strategy: &zero,
            slot_policy: SlotPolicy::None,
            dims,
        };
        let options = SimOptions {
            keep_outputs: true,
            ..SimOptions::default()
        };
        let report = run_monte_carlo(&setup, &cost, 3, &options).unwrap();
        let outputs = report.outputs.as_ref().unwrap();

        let mut episodes = Vec::new();
        write_episode_csv(&mut episodes, outputs, &dims).unwrap();
        let text = String::from_utf8(episodes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * (dims.horizon + 1));
        assert_eq!(lines[0], "episode,t,x0,xhat0,y0,yhat0,u0,w0,z0");
        let columns = lines[0].split(',').count();
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), columns);
        }
        // Terminal rows leave the control/disturbance/sensor cells empty.
        assert!(lines[1 + dims.horizon].ends_with(",,,"));

        let mut beliefs = Vec::new();
        write_belief_csv(&mut beliefs, outputs, &dims).unwrap();
        let text = String::from_utf8(beliefs).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * (dims.horizon + 1));
        assert_eq!(
            lines[0],
            "episode,t,model_mean0,model_cov00,plant_mean0,plant_cov00"
        );
    }
}
