//! Online estimation: Gaussian beliefs, Kalman stepping, output-trajectory
//! statistics, and the information-state recursion.
//!
//! The controller tracks three things while an episode unfolds:
//!
//! 1. a Gaussian belief over the model state given past outputs and controls,
//! 2. a Gaussian belief over the plant state, filtered with the *model*
//!    matrices as hypothesized dynamics (the true plant matrices are unknown;
//!    observations correct the hypothesis, and what filtering cannot explain
//!    is absorbed by the learned output statistics),
//! 3. running statistics of realized plant output trajectories per control
//!    sequence, accumulated across episodes.
//!
//! Together these form the [`InformationState`]. Its update is a deterministic
//! function of the previous state and the new data `(y, yhat, u)` alone — no
//! strategy object enters — so any two strategies producing the same realized
//! data produce bit-identical information states.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg;
use crate::lti::TimeVaryingLinearSystem;
use crate::noise::{NoiseSpec, StepNoise};

/// Ridge added to a singular innovation covariance (perfect measurements
/// make it exactly singular).
const INNOVATION_RIDGE: f64 = 1e-12;

/// Gaussian belief over a state: mean and covariance.
///
/// Construction symmetrizes the covariance (asymmetry beyond `1e-10` is an
/// error) and clips round-off-negative eigenvalues to zero (below `-1e-9` is
/// an error), so a held value is always symmetric PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::dim(
                "belief covariance",
                format!("{n}x{n}"),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        let asym = linalg::asymmetry(&cov);
        if asym > 1e-10 {
            return Err(Error::matrix(
                "belief covariance",
                format!("asymmetry {asym:.3e} exceeds 1e-10"),
            ));
        }
        let cov = linalg::clip_psd(&linalg::symmetrize(&cov), 1e-9, "belief covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Measurement update of a Gaussian belief with output `y = C x + E z`,
/// `z ~ (z_mean, z_cov)` independent of the state.
///
/// Uses the Joseph-form covariance update, which stays PSD for any gain, and
/// rides out singular innovation covariances (perfect measurements) with a
/// tiny diagonal ridge.
pub fn measurement_update(
    belief: &GaussianBelief,
    c: &DMatrix<f64>,
    e: &DMatrix<f64>,
    z_mean: &DVector<f64>,
    z_cov: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    let n = belief.dim();
    let p = c.nrows();
    if c.ncols() != n {
        return Err(Error::dim("C", format!("{p}x{n}"), format!("{p}x{}", c.ncols())));
    }
    if y.len() != p {
        return Err(Error::dim("observation", format!("{p}"), format!("{}", y.len())));
    }
    let sensor_cov = e * z_cov * e.transpose();
    let innovation_cov =
        linalg::symmetrize(&(c * belief.cov() * c.transpose() + &sensor_cov));
    let min_eig = linalg::min_eigenvalue(&innovation_cov);
    if min_eig < -1e-9 {
        return Err(Error::NumericalFailure(format!(
            "innovation covariance indefinite (min eigenvalue {min_eig:.3e})"
        )));
    }
    let mut ridged = innovation_cov.clone();
    for i in 0..p {
        ridged[(i, i)] += INNOVATION_RIDGE;
    }
    // K = P C' S^{-1}, computed as the solution of S K' = C P.
    let cp = c * belief.cov();
    let gain_t = linalg::solve_spd(&ridged, &cp, "innovation covariance")?;
    let gain = gain_t.transpose();
    let innovation = y - c * belief.mean() - e * z_mean;
    let mean = belief.mean() + &gain * innovation;
    let closed = DMatrix::identity(n, n) - &gain * c;
    let cov = &closed * belief.cov() * closed.transpose()
        + &gain * &sensor_cov * gain.transpose();
    GaussianBelief::new(mean, cov)
}

/// One predict/update cycle of the Kalman filter.
///
/// Predicts through the transition at `t` of `sys` (mean `A x + B u + D w̄`,
/// covariance `A P A' + D W D'`, with `(w̄, W)` the marginal disturbance law
/// for the step), then measurement-updates against the observation taken at
/// `t + 1`. When this filters the plant, `sys` carries the *hypothesized*
/// dynamics — the model matrices — and `y_next` is the realized plant output.
pub fn kalman_step(
    sys: &TimeVaryingLinearSystem,
    noise: &StepNoise,
    belief: &GaussianBelief,
    t: usize,
    u: &DVector<f64>,
    y_next: &DVector<f64>,
) -> Result<GaussianBelief> {
    if t >= sys.a.len() {
        return Err(Error::IndexOutOfHorizon {
            t,
            horizon: sys.a.len(),
        });
    }
    let mean = &sys.a[t] * belief.mean() + &sys.b[t] * u + &sys.d[t] * &noise.w_mean;
    let cov = &sys.a[t] * belief.cov() * sys.a[t].transpose()
        + &sys.d[t] * &noise.w_cov * sys.d[t].transpose();
    let predicted = GaussianBelief::new(mean, cov)?;
    measurement_update(
        &predicted,
        &sys.c[t + 1],
        &sys.e[t + 1],
        &noise.z_next_mean,
        &noise.z_next_cov,
        y_next,
    )
}

/// Affine one-step input/output response fitted from episode statistics:
/// `yhat[t+1] ≈ a[t] yhat[t] + b[t] u[t] + intercept[t]`.
///
/// This is what the learning loop hands to the certainty-equivalent control
/// synthesis when the plant matrices are unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub intercept: Vec<DVector<f64>>,
}

impl ResponseMap {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }
}

/// Running statistics of realized plant-output trajectories per control
/// sequence, plus per-step plant-belief accumulators.
///
/// Two layers:
///
/// - **episode prefix** — the current episode's realized `(yhat, u)` prefix,
///   carried inside the information state as it grows;
/// - **cross-episode statistics** — a Welford mean/covariance over completed
///   stacked vectors `[yhat_0 .. yhat_T | u_0 .. u_{T-1}]`, per-step belief
///   sums for the mixture collapse, and (optionally) a diagnostic histogram
///   of quantized control sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputDensityEstimate {
    n: usize,
    p: usize,
    m: usize,
    horizon: usize,
    count: usize,
    mean: DVector<f64>,
    /// Welford co-moment matrix; covariance = m2 / (count - 1).
    m2: DMatrix<f64>,
    step_counts: Vec<usize>,
    step_mean_sum: Vec<DVector<f64>>,
    /// Per-step sums of second moments `cov + mean mean'`.
    step_second_sum: Vec<DMatrix<f64>>,
    yhat_prefix: Vec<DVector<f64>>,
    u_prefix: Vec<DVector<f64>>,
    /// Bin width for the diagnostic control-sequence histogram; `None`
    /// disables binning (the default — conditioning on controls is done by
    /// affine regression, not by binning).
    bin_width: Option<f64>,
    bins: BTreeMap<Vec<i64>, u64>,
}

impl OutputDensityEstimate {
    /// `n` is the plant-state dimension (step-belief accumulators), `p` the
    /// output dimension, `m` the control dimension.
    pub fn new(n: usize, p: usize, m: usize, horizon: usize) -> Self {
        let len = (horizon + 1) * p + horizon * m;
        Self {
            n,
            p,
            m,
            horizon,
            count: 0,
            mean: DVector::zeros(len),
            m2: DMatrix::zeros(len, len),
            step_counts: vec![0; horizon + 1],
            step_mean_sum: vec![DVector::zeros(n); horizon + 1],
            step_second_sum: vec![DMatrix::zeros(n, n); horizon + 1],
            yhat_prefix: Vec::new(),
            u_prefix: Vec::new(),
            bin_width: None,
            bins: BTreeMap::new(),
        }
    }

    /// Enables the diagnostic histogram over quantized control sequences.
    pub fn with_bin_width(mut self, width: f64) -> Self {
        self.bin_width = Some(width);
        self
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn stacked_len(&self) -> usize {
        self.mean.len()
    }

    /// Number of steps recorded in the current episode prefix (the step
    /// index the containing information state is at).
    pub fn prefix_steps(&self) -> usize {
        self.yhat_prefix.len().saturating_sub(1)
    }

    pub fn yhat_prefix(&self) -> &[DVector<f64>] {
        &self.yhat_prefix
    }

    pub fn u_prefix(&self) -> &[DVector<f64>] {
        &self.u_prefix
    }

    /// Records the episode's first observation (no control taken yet).
    pub fn start_episode(&mut self, yhat0: &DVector<f64>) -> Result<()> {
        if !self.yhat_prefix.is_empty() {
            return Err(Error::matrix(
                "episode prefix",
                "previous episode prefix not cleared".to_string(),
            ));
        }
        self.check_output(yhat0)?;
        self.yhat_prefix.push(yhat0.clone());
        Ok(())
    }

    /// Appends one realized `(u_t, yhat_{t+1})` pair to the episode prefix.
    pub fn push_step(&mut self, u: &DVector<f64>, yhat_next: &DVector<f64>) -> Result<()> {
        if u.len() != self.m {
            return Err(Error::dim("control", format!("{}", self.m), format!("{}", u.len())));
        }
        self.check_output(yhat_next)?;
        if self.yhat_prefix.len() > self.horizon {
            return Err(Error::IndexOutOfHorizon {
                t: self.yhat_prefix.len(),
                horizon: self.horizon,
            });
        }
        self.u_prefix.push(u.clone());
        self.yhat_prefix.push(yhat_next.clone());
        Ok(())
    }

    fn check_output(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.p {
            return Err(Error::dim("output", format!("{}", self.p), format!("{}", y.len())));
        }
        Ok(())
    }

    /// Absorbs one completed trajectory into the cross-episode statistics
    /// (Welford update: exact running mean, co-moment accumulated for the
    /// unbiased covariance).
    pub fn absorb(&mut self, yhat_traj: &[DVector<f64>], u_seq: &[DVector<f64>]) -> Result<()> {
        if yhat_traj.len() != self.horizon + 1 {
            return Err(Error::HorizonMismatch {
                what: "output trajectory".into(),
                expected: self.horizon + 1,
                got: yhat_traj.len(),
            });
        }
        if u_seq.len() != self.horizon {
            return Err(Error::HorizonMismatch {
                what: "control sequence".into(),
                expected: self.horizon,
                got: u_seq.len(),
            });
        }
        for y in yhat_traj {
            self.check_output(y)?;
        }
        let mut stacked = DVector::zeros(self.stacked_len());
        for (t, y) in yhat_traj.iter().enumerate() {
            stacked.rows_mut(t * self.p, self.p).copy_from(y);
        }
        let u_base = (self.horizon + 1) * self.p;
        for (t, u) in u_seq.iter().enumerate() {
            if u.len() != self.m {
                return Err(Error::dim("control", format!("{}", self.m), format!("{}", u.len())));
            }
            stacked.rows_mut(u_base + t * self.m, self.m).copy_from(u);
        }
        self.count += 1;
        let delta = &stacked - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = &stacked - &self.mean;
        self.m2 += &delta * delta2.transpose();
        if let Some(width) = self.bin_width {
            let key: Vec<i64> = u_seq
                .iter()
                .flat_map(|u| u.iter().map(|v| (v / width).round() as i64))
                .collect();
            *self.bins.entry(key).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Absorbs the estimate's own completed episode prefix, then clears it.
    pub fn absorb_prefix(&mut self) -> Result<()> {
        let yhat = std::mem::take(&mut self.yhat_prefix);
        let u = std::mem::take(&mut self.u_prefix);
        self.absorb(&yhat, &u)
    }

    /// Clears the episode prefix without absorbing (start of a fresh episode
    /// reusing carried statistics).
    pub fn clear_prefix(&mut self) {
        self.yhat_prefix.clear();
        self.u_prefix.clear();
    }

    /// Accumulates one episode's plant belief at step `t` for the mixture
    /// collapse.
    pub fn absorb_step_belief(&mut self, t: usize, belief: &GaussianBelief) -> Result<()> {
        if t >= self.step_counts.len() {
            return Err(Error::IndexOutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        if belief.dim() != self.n {
            return Err(Error::dim(
                "step belief",
                format!("{}", self.n),
                format!("{}", belief.dim()),
            ));
        }
        self.step_counts[t] += 1;
        self.step_mean_sum[t] += belief.mean();
        self.step_second_sum[t] += belief.cov() + belief.mean() * belief.mean().transpose();
        Ok(())
    }

    /// Episodes absorbed into the step-`t` belief accumulator.
    pub fn step_count(&self, t: usize) -> usize {
        self.step_counts.get(t).copied().unwrap_or(0)
    }

    /// Collapses the accumulated step-`t` beliefs to one moment-matched
    /// Gaussian: mean of means, covariance by the law of total variance
    /// (equally weighted mixture components, population convention).
    pub fn collapse_step(&self, t: usize) -> Result<GaussianBelief> {
        if t >= self.step_counts.len() {
            return Err(Error::IndexOutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        let k = self.step_counts[t];
        if k == 0 {
            return Err(Error::EmptyDensity);
        }
        let mean = &self.step_mean_sum[t] / k as f64;
        let cov = &self.step_second_sum[t] / k as f64 - &mean * mean.transpose();
        GaussianBelief::new(mean, cov)
    }

    /// Running mean of the stacked trajectory vector.
    pub fn mean(&self) -> Result<&DVector<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyDensity);
        }
        Ok(&self.mean)
    }

    /// Unbiased covariance of the stacked trajectory vector (zero for a
    /// single sample).
    pub fn cov(&self) -> Result<DMatrix<f64>> {
        match self.count {
            0 => Err(Error::EmptyDensity),
            1 => Ok(DMatrix::zeros(self.stacked_len(), self.stacked_len())),
            k => Ok(linalg::symmetrize(&(&self.m2 / (k as f64 - 1.0)))),
        }
    }

    /// Diagnostic histogram (empty unless binning was enabled).
    pub fn bins(&self) -> &BTreeMap<Vec<i64>, u64> {
        &self.bins
    }

    /// Merges another estimate's cross-episode statistics into this one
    /// (exact Welford combination; episode prefixes are not merged). Merge
    /// order is part of the floating-point result, so aggregation pipelines
    /// must fix it independently of scheduling.
    pub fn merge(&mut self, other: &OutputDensityEstimate) -> Result<()> {
        if (self.n, self.p, self.m, self.horizon) != (other.n, other.p, other.m, other.horizon) {
            return Err(Error::dim(
                "density merge",
                format!("n={} p={} m={} T={}", self.n, self.p, self.m, self.horizon),
                format!("n={} p={} m={} T={}", other.n, other.p, other.m, other.horizon),
            ));
        }
        if other.count > 0 {
            let na = self.count as f64;
            let nb = other.count as f64;
            let nab = na + nb;
            let delta = &other.mean - &self.mean;
            self.mean += &delta * (nb / nab);
            self.m2 += &other.m2 + (&delta * delta.transpose()) * (na * nb / nab);
            self.count += other.count;
        }
        for t in 0..=self.horizon {
            self.step_counts[t] += other.step_counts[t];
            self.step_mean_sum[t] += &other.step_mean_sum[t];
            self.step_second_sum[t] += &other.step_second_sum[t];
        }
        for (key, v) in &other.bins {
            *self.bins.entry(key.clone()).or_insert(0) += v;
        }
        Ok(())
    }

    /// Mean of a single output block.
    pub fn output_block_mean(&self, t: usize) -> Result<DVector<f64>> {
        if t > self.horizon {
            return Err(Error::IndexOutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        Ok(self.mean()?.rows(t * self.p, self.p).into_owned())
    }

    /// Fits the one-step affine response `yhat_{t+1} ~ [yhat_t, u_t]` per
    /// step by Gaussian conditioning on the accumulated joint statistics
    /// (equivalently, least squares with intercept). `ridge` regularizes the
    /// predictor Gram matrix.
    pub fn response_map(&self, ridge: f64) -> Result<ResponseMap> {
        if self.count < 2 {
            return Err(Error::EmptyDensity);
        }
        let cov = self.cov()?;
        let mu = self.mean()?;
        let u_base = (self.horizon + 1) * self.p;
        let np = self.p;
        let nm = self.m;
        let mut a = Vec::with_capacity(self.horizon);
        let mut b = Vec::with_capacity(self.horizon);
        let mut intercept = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let pred: Vec<usize> = (t * np..(t + 1) * np)
                .chain(u_base + t * nm..u_base + (t + 1) * nm)
                .collect();
            let targ: Vec<usize> = ((t + 1) * np..(t + 2) * np).collect();
            let k = pred.len();
            let mut s_jj = DMatrix::zeros(k, k);
            let mut s_ij = DMatrix::zeros(np, k);
            let mut mu_j = DVector::zeros(k);
            let mut mu_i = DVector::zeros(np);
            for (ri, &gi) in pred.iter().enumerate() {
                mu_j[ri] = mu[gi];
                for (ci, &gj) in pred.iter().enumerate() {
                    s_jj[(ri, ci)] = cov[(gi, gj)];
                }
            }
            for (ri, &gi) in targ.iter().enumerate() {
                mu_i[ri] = mu[gi];
                for (ci, &gj) in pred.iter().enumerate() {
                    s_ij[(ri, ci)] = cov[(gi, gj)];
                }
            }
            for i in 0..k {
                s_jj[(i, i)] += ridge;
            }
            // coef' solves S_jj coef' = S_ij'.
            let coef_t = linalg::solve_spd(&s_jj, &s_ij.transpose(), "response regression")?;
            let coef = coef_t.transpose();
            let icpt = &mu_i - &coef * &mu_j;
            a.push(coef.columns(0, np).into_owned());
            b.push(coef.columns(np, nm).into_owned());
            intercept.push(icpt);
        }
        Ok(ResponseMap { a, b, intercept })
    }
}

/// The information state: everything the controller is allowed to condition
/// on at step `t`, compressed into sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct InformationState {
    pub t: usize,
    pub model_belief: GaussianBelief,
    pub plant_belief: GaussianBelief,
    pub output_density: OutputDensityEstimate,
}

impl InformationState {
    /// Constructs the step-0 information state from the shared initial-state
    /// prior and the first observations of both systems.
    ///
    /// Both beliefs start from the model's initial-state prior (the systems
    /// share the initial state) and are measurement-updated with their own
    /// first output. `carried_density` supplies statistics learned in
    /// earlier episodes; its episode prefix is reset and seeded with `yhat0`.
    pub fn initial(
        model_sys: &TimeVaryingLinearSystem,
        noise: &NoiseSpec,
        y0: &DVector<f64>,
        yhat0: &DVector<f64>,
        carried_density: OutputDensityEstimate,
    ) -> Result<Self> {
        let (m0, p0) = noise.x0_prior();
        let prior = GaussianBelief::new(m0, p0)?;
        let (z_mean, z_cov) = noise.z0_marginal()?;
        let model_belief = measurement_update(
            &prior,
            &model_sys.c[0],
            &model_sys.e[0],
            &z_mean,
            &z_cov,
            y0,
        )?;
        let plant_belief = measurement_update(
            &prior,
            &model_sys.c[0],
            &model_sys.e[0],
            &z_mean,
            &z_cov,
            yhat0,
        )?;
        let mut output_density = carried_density;
        output_density.clear_prefix();
        output_density.start_episode(yhat0)?;
        Ok(Self {
            t: 0,
            model_belief,
            plant_belief,
            output_density,
        })
    }

    pub fn horizon(&self) -> usize {
        self.output_density.horizon
    }
}

/// Advances the information state by one step.
///
/// Consumes only `(Π_t, y_{t+1}, ŷ_{t+1}, u_t)` plus the fixed system/noise
/// descriptions: both beliefs advance through [`kalman_step`] — the plant
/// belief through `plant_belief_sys`, the hypothesized dynamics (in this
/// architecture the model matrices) — and the realized `(u_t, ŷ_{t+1})` pair
/// is appended to the output statistics' episode prefix.
pub fn info_state_update(
    pi: &InformationState,
    y_next: &DVector<f64>,
    yhat_next: &DVector<f64>,
    u: &DVector<f64>,
    model_sys: &TimeVaryingLinearSystem,
    plant_belief_sys: &TimeVaryingLinearSystem,
    noise: &NoiseSpec,
) -> Result<InformationState> {
    let horizon = noise.horizon();
    if pi.t >= horizon {
        return Err(Error::IndexOutOfHorizon { t: pi.t, horizon });
    }
    let step = noise.step_noise(pi.t)?;
    let model_belief = kalman_step(model_sys, &step, &pi.model_belief, pi.t, u, y_next)?;
    let plant_belief = kalman_step(plant_belief_sys, &step, &pi.plant_belief, pi.t, u, yhat_next)?;
    let mut output_density = pi.output_density.clone();
    output_density.push_step(u, yhat_next)?;
    Ok(InformationState {
        t: pi.t + 1,
        model_belief,
        plant_belief,
        output_density,
    })
}

/// Factors the information state into its two Gaussian components: the model
/// belief, and the plant belief marginalized over the accumulated output
/// statistics (moment-matched mixture collapse). With no absorbed episodes
/// the in-episode plant belief itself is the configured prior and is
/// returned unchanged.
pub fn factorize(pi: &InformationState) -> Result<(GaussianBelief, GaussianBelief)> {
    let plant_marginal = if pi.output_density.step_count(pi.t) == 0 {
        pi.plant_belief.clone()
    } else {
        pi.output_density.collapse_step(pi.t)?
    };
    Ok((pi.model_belief.clone(), plant_marginal))
}
