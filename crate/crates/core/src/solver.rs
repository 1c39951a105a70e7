//! Offline strategy synthesis and binding.
//!
//! A separated strategy is a sequence of affine laws over information-state
//! statistics:
//!
//! ```text
//! u_t = K_t·E[x_t | data]  +  H_t·E[x̂_t | data]  +  Kw_t·E[w_t | data]
//!       +  L_t·[x̂_{t+1} … x̂_T slots]  +  k_t
//! ```
//!
//! The slot block `L_t` is what makes the strategy *parameterized*: it acts
//! on expected plant states that are unknown offline and are bound later —
//! either to constants (learned trajectory expectations) or per step by the
//! simulation harness. Binding folds slot contributions into the offsets and
//! produces an executable law.
//!
//! Two synthesis routes are provided. With a zero discrepancy weight,
//! [`solve_tracking_lq`] is the classical backward Riccati pass over the
//! model dynamics (plus a one-step conditional-disturbance feedforward).
//! With a positive weight it returns the *matching* construction: the
//! minimum-norm control law that drives the expected model successor onto
//! the plant-trajectory slot exactly, which is how the discrepancy penalty
//! is made to vanish rather than merely traded off.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lti::{Dims, QuadraticCostSpec, TimeVaryingLinearSystem};

/// Whether a strategy still has open parameter slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindingMode {
    Parameterized,
    Bound,
}

/// One step's affine control law.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLaw {
    /// Gain on the model-belief mean (m×n).
    pub k_model: DMatrix<f64>,
    /// Gain on the plant-belief mean (m×n).
    pub k_plant: DMatrix<f64>,
    /// Gain on the conditional disturbance mean for the step (m×r).
    pub k_w: DMatrix<f64>,
    /// Gain on the stacked parameter slots `x̂_{t+1} … x̂_T` (m × n·(T−t));
    /// zero-width once bound.
    pub slot_gain: DMatrix<f64>,
    /// Constant offset (m).
    pub offset: DVector<f64>,
}

impl StepLaw {
    /// A law with every channel zero (slots of width `n·slots`).
    pub fn zeros(n: usize, m: usize, r: usize, slots: usize) -> Self {
        Self {
            k_model: DMatrix::zeros(m, n),
            k_plant: DMatrix::zeros(m, n),
            k_w: DMatrix::zeros(m, r),
            slot_gain: DMatrix::zeros(m, n * slots),
            offset: DVector::zeros(m),
        }
    }
}

/// A sequence of per-step affine laws plus the binding state.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedStrategy {
    mode: BindingMode,
    steps: Vec<StepLaw>,
    n: usize,
    m: usize,
    r: usize,
    horizon: usize,
}

/// Numeric values for the parameter slots: expected plant states
/// `x̂_0 … x̂_T` (the leading entry is the shared initial mean; slots only
/// consume `x̂_{t+1} …`, but carrying the full trajectory keeps indexing
/// honest).
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyParameterization {
    pub xhat_means: Vec<DVector<f64>>,
}

impl StrategyParameterization {
    pub fn new(xhat_means: Vec<DVector<f64>>) -> Self {
        Self { xhat_means }
    }
}

impl SeparatedStrategy {
    pub fn new(mode: BindingMode, steps: Vec<StepLaw>, dims: &Dims) -> Result<Self> {
        let s = Self {
            mode,
            steps,
            n: dims.n,
            m: dims.m,
            r: dims.r,
            horizon: dims.horizon,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.steps.len() != self.horizon {
            return Err(Error::HorizonMismatch {
                what: "strategy steps".into(),
                expected: self.horizon,
                got: self.steps.len(),
            });
        }
        for (t, law) in self.steps.iter().enumerate() {
            let checks = [
                ("model gain", law.k_model.nrows(), law.k_model.ncols(), self.m, self.n),
                ("plant gain", law.k_plant.nrows(), law.k_plant.ncols(), self.m, self.n),
                ("disturbance gain", law.k_w.nrows(), law.k_w.ncols(), self.m, self.r),
            ];
            for (name, rows, cols, er, ec) in checks {
                if rows != er || cols != ec {
                    return Err(Error::dim(
                        format!("{name} at step {t}"),
                        format!("{er}x{ec}"),
                        format!("{rows}x{cols}"),
                    ));
                }
            }
            let expected_slots = match self.mode {
                BindingMode::Parameterized => self.n * (self.horizon - t),
                BindingMode::Bound => 0,
            };
            if law.slot_gain.nrows() != self.m || law.slot_gain.ncols() != expected_slots {
                return Err(Error::dim(
                    format!("slot gain at step {t}"),
                    format!("{}x{}", self.m, expected_slots),
                    format!("{}x{}", law.slot_gain.nrows(), law.slot_gain.ncols()),
                ));
            }
            if law.offset.len() != self.m {
                return Err(Error::dim(
                    format!("offset at step {t}"),
                    format!("{}", self.m),
                    format!("{}", law.offset.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> BindingMode {
        self.mode
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn step(&self, t: usize) -> Result<&StepLaw> {
        self.steps.get(t).ok_or(Error::IndexOutOfHorizon {
            t,
            horizon: self.horizon,
        })
    }

    /// Evaluates the law at step `t`. `slots` supplies the values for
    /// `x̂_{t+1} … x̂_T` in order; a bound strategy takes an empty slice.
    pub fn control(
        &self,
        t: usize,
        model_mean: &DVector<f64>,
        plant_mean: &DVector<f64>,
        w_mean: &DVector<f64>,
        slots: &[DVector<f64>],
    ) -> Result<DVector<f64>> {
        let law = self.step(t)?;
        let expected = law.slot_gain.ncols() / self.n.max(1);
        if slots.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: slots.len(),
            });
        }
        let mut u = &law.k_model * model_mean
            + &law.k_plant * plant_mean
            + &law.k_w * w_mean
            + &law.offset;
        for (i, s) in slots.iter().enumerate() {
            if s.len() != self.n {
                return Err(Error::dim(
                    format!("slot {i} at step {t}"),
                    format!("{}", self.n),
                    format!("{}", s.len()),
                ));
            }
            u += law.slot_gain.columns(i * self.n, self.n) * s;
        }
        Ok(u)
    }

    /// Folds numeric slot values into the offsets, producing an executable
    /// (bound) strategy.
    pub fn bind_parameters(&self, params: &StrategyParameterization) -> Result<SeparatedStrategy> {
        if self.mode == BindingMode::Bound {
            return Err(Error::AlreadyBound);
        }
        if params.xhat_means.len() != self.horizon + 1 {
            return Err(Error::LengthMismatch {
                expected: self.horizon + 1,
                got: params.xhat_means.len(),
            });
        }
        for (i, v) in params.xhat_means.iter().enumerate() {
            if v.len() != self.n {
                return Err(Error::dim(
                    format!("parameter x̂_{i}"),
                    format!("{}", self.n),
                    format!("{}", v.len()),
                ));
            }
        }
        let mut steps = Vec::with_capacity(self.horizon);
        for (t, law) in self.steps.iter().enumerate() {
            let mut offset = law.offset.clone();
            for (i, xs) in params.xhat_means[t + 1..].iter().enumerate() {
                offset += law.slot_gain.columns(i * self.n, self.n) * xs;
            }
            steps.push(StepLaw {
                k_model: law.k_model.clone(),
                k_plant: law.k_plant.clone(),
                k_w: law.k_w.clone(),
                slot_gain: DMatrix::zeros(self.m, 0),
                offset,
            });
        }
        Ok(SeparatedStrategy {
            mode: BindingMode::Bound,
            steps,
            n: self.n,
            m: self.m,
            r: self.r,
            horizon: self.horizon,
        })
    }

    /// The same laws with the model-belief gains moved onto the plant-belief
    /// channel. Used when a law synthesized on one system's dynamics should
    /// feed back on the *other* system's state estimate (e.g. evaluating a
    /// known-plant law, or a model-only law driving the real plant).
    pub fn with_gains_on_plant_belief(&self) -> SeparatedStrategy {
        let mut out = self.clone();
        for law in &mut out.steps {
            law.k_plant = law.k_model.clone() + &law.k_plant;
            law.k_model = DMatrix::zeros(self.m, self.n);
        }
        out
    }

    /// An all-zero bound strategy (useful as a probe or baseline).
    pub fn zero(dims: &Dims) -> Self {
        SeparatedStrategy {
            mode: BindingMode::Bound,
            steps: (0..dims.horizon)
                .map(|_| StepLaw {
                    k_model: DMatrix::zeros(dims.m, dims.n),
                    k_plant: DMatrix::zeros(dims.m, dims.n),
                    k_w: DMatrix::zeros(dims.m, dims.r),
                    slot_gain: DMatrix::zeros(dims.m, 0),
                    offset: DVector::zeros(dims.m),
                })
                .collect(),
            n: dims.n,
            m: dims.m,
            r: dims.r,
            horizon: dims.horizon,
        }
    }

    /// Serializes the strategy as a line-oriented text document with 17
    /// significant digits (exact f64 round-trip).
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        out.push_str("separated-strategy v1\n");
        out.push_str(&format!(
            "mode {}\n",
            match self.mode {
                BindingMode::Parameterized => "parameterized",
                BindingMode::Bound => "bound",
            }
        ));
        out.push_str(&format!(
            "dims {} {} {} {}\n",
            self.n, self.m, self.r, self.horizon
        ));
        let fmt_mat = |name: &str, m: &DMatrix<f64>| {
            let mut line = format!("{name} {} {}", m.nrows(), m.ncols());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    line.push_str(&format!(" {:.16e}", m[(i, j)]));
                }
            }
            line.push('\n');
            line
        };
        for (t, law) in self.steps.iter().enumerate() {
            out.push_str(&format!("step {t}\n"));
            out.push_str(&fmt_mat("k_model", &law.k_model));
            out.push_str(&fmt_mat("k_plant", &law.k_plant));
            out.push_str(&fmt_mat("k_w", &law.k_w));
            out.push_str(&fmt_mat("slot_gain", &law.slot_gain));
            let mut line = format!("offset {}", law.offset.len());
            for v in law.offset.iter() {
                line.push_str(&format!(" {v:.16e}"));
            }
            line.push('\n');
            out.push_str(&line);
        }
        out.push_str("end\n");
        out
    }

    /// Parses a document produced by [`export_text`](Self::export_text).
    pub fn import_text(text: &str) -> Result<SeparatedStrategy> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let fmt = |msg: &str| Error::Format(msg.to_string());
        let header = lines.next().ok_or_else(|| fmt("empty document"))?;
        if header.trim() != "separated-strategy v1" {
            return Err(fmt("unrecognized header"));
        }
        let mode_line = lines.next().ok_or_else(|| fmt("missing mode line"))?;
        let mode = match mode_line.trim() {
            "mode parameterized" => BindingMode::Parameterized,
            "mode bound" => BindingMode::Bound,
            other => return Err(Error::Format(format!("bad mode line: {other}"))),
        };
        let dims_line = lines.next().ok_or_else(|| fmt("missing dims line"))?;
        let toks: Vec<&str> = dims_line.split_whitespace().collect();
        if toks.len() != 5 || toks[0] != "dims" {
            return Err(fmt("bad dims line"));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad integer: {s}")))
        };
        let (n, m, r, horizon) = (
            parse_usize(toks[1])?,
            parse_usize(toks[2])?,
            parse_usize(toks[3])?,
            parse_usize(toks[4])?,
        );
        let parse_mat = |line: &str, name: &str| -> Result<DMatrix<f64>> {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 3 || toks[0] != name {
                return Err(Error::Format(format!("expected {name} line, got: {line}")));
            }
            let rows = parse_usize(toks[1])?;
            let cols = parse_usize(toks[2])?;
            if toks.len() != 3 + rows * cols {
                return Err(Error::Format(format!("{name}: wrong value count")));
            }
            let mut mat = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    mat[(i, j)] = toks[3 + i * cols + j]
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad float in {name}")))?;
                }
            }
            Ok(mat)
        };
        let mut steps = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let step_line = lines.next().ok_or_else(|| fmt("missing step line"))?;
            if step_line.trim() != format!("step {t}") {
                return Err(Error::Format(format!("expected 'step {t}', got: {step_line}")));
            }
            let k_model = parse_mat(lines.next().ok_or_else(|| fmt("truncated step"))?, "k_model")?;
            let k_plant = parse_mat(lines.next().ok_or_else(|| fmt("truncated step"))?, "k_plant")?;
            let k_w = parse_mat(lines.next().ok_or_else(|| fmt("truncated step"))?, "k_w")?;
            let slot_gain = parse_mat(lines.next().ok_or_else(|| fmt("truncated step"))?, "slot_gain")?;
            let offset_line = lines.next().ok_or_else(|| fmt("truncated step"))?;
            let toks: Vec<&str> = offset_line.split_whitespace().collect();
            if toks.len() < 2 || toks[0] != "offset" {
                return Err(fmt("expected offset line"));
            }
            let len = parse_usize(toks[1])?;
            if toks.len() != 2 + len {
                return Err(fmt("offset: wrong value count"));
            }
            let mut offset = DVector::zeros(len);
            for i in 0..len {
                offset[i] = toks[2 + i]
                    .parse::<f64>()
                    .map_err(|_| Error::Format("bad float in offset".to_string()))?;
            }
            steps.push(StepLaw {
                k_model,
                k_plant,
                k_w,
                slot_gain,
                offset,
            });
        }
        match lines.next() {
            Some(l) if l.trim() == "end" => {}
            _ => return Err(fmt("missing end marker")),
        }
        let dims = Dims {
            n,
            m,
            p: 1, // observation dimension is not part of a strategy
            r,
            s: 1,
            horizon,
        };
        SeparatedStrategy::new(mode, steps, &dims)
    }
}

/// Derives the offline strategy for the penalized tracking problem.
///
/// - `cost.beta == 0`: classical finite-horizon backward Riccati pass over
///   the model dynamics. Gains land on the model-belief mean; a one-step
///   conditional-disturbance feedforward `Kw_t` is included (exact when
///   disturbances are independent across time, or when only the current
///   disturbance is correlated with already-observed data). Parameter slots
///   are present but zero — binding is a no-op.
/// - `cost.beta > 0`: the discrepancy penalty is enforced *exactly* rather
///   than traded off: the returned strategy is the matching construction of
///   [`matching_strategy`], which zeroes the expected model/plant gap along
///   the actuated subspace and leaves the slot block free for the outer
///   optimization over plant-trajectory expectations. The magnitude of a
///   positive `beta` does not change the law.
pub fn solve_tracking_lq(
    model_sys: &TimeVaryingLinearSystem,
    cost: &QuadraticCostSpec,
    dims: &Dims,
) -> Result<SeparatedStrategy> {
    cost.validate(dims)?;
    model_sys.validate(dims)?;
    if cost.beta > 0.0 {
        return matching_strategy(model_sys, dims);
    }
    let drift = vec![DVector::zeros(dims.n); dims.horizon];
    solve_lq_with_drift(model_sys, cost, dims, &drift)
}

/// Finite-horizon LQ synthesis against dynamics with a known per-step
/// additive drift, `x_{t+1} = A_t x + B_t u + δ_t (+ D_t w)`.
///
/// The backward pass carries `V_t(x) = x' P_t x + b_t' x + const` and folds
/// `δ_t` into the affine control component and the linear value term, so the
/// returned offsets pre-compensate the drift. Disturbances enter only through
/// the one-step feedforward gain `Kw_t`; the synthesis otherwise assumes
/// zero-mean disturbances — a nonzero unconditional mean can be handed in by
/// adding `D_t · E[w_t]` to `drift[t]`. The learning loop calls this with the
/// intercepts of a fitted one-step response as the drift; `cost.beta` is
/// ignored here because a fitted response has no model/plant pair to match.
pub fn solve_lq_with_drift(
    model_sys: &TimeVaryingLinearSystem,
    cost: &QuadraticCostSpec,
    dims: &Dims,
    drift: &[DVector<f64>],
) -> Result<SeparatedStrategy> {
    cost.validate(dims)?;
    model_sys.validate(dims)?;
    let horizon = dims.horizon;
    let n = dims.n;
    let m = dims.m;
    if drift.len() != horizon {
        return Err(Error::LengthMismatch {
            expected: horizon,
            got: drift.len(),
        });
    }
    for (t, d) in drift.iter().enumerate() {
        if d.len() != n {
            return Err(Error::dim(
                format!("drift at step {t}"),
                format!("{n}"),
                format!("{}", d.len()),
            ));
        }
    }
    // Backward pass: V_t(x) = x' P_t x + b_t' x + const.
    let mut p_next = linalg::symmetrize(&cost.qt);
    let mut b_next = cost.lt.clone().unwrap_or_else(|| DVector::zeros(n));
    let mut rev_laws: Vec<StepLaw> = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let a = &model_sys.a[t];
        let b = &model_sys.b[t];
        let d = &model_sys.d[t];
        let delta = &drift[t];
        let ru = &cost.ru[t];
        let lu = cost
            .lu
            .as_ref()
            .map(|v| v[t].clone())
            .unwrap_or_else(|| DVector::zeros(m));
        let lx = cost
            .lx
            .as_ref()
            .map(|v| v[t].clone())
            .unwrap_or_else(|| DVector::zeros(n));
        let s = linalg::symmetrize(&(ru + b.transpose() * &p_next * b));
        let chol = s.clone().cholesky().ok_or(Error::SingularRiccati { t })?;
        let bpa = b.transpose() * &p_next * a;
        let bpd = b.transpose() * &p_next * d;
        let k = -chol.solve(&bpa);
        let kw = -chol.solve(&bpd);
        let k_const =
            -chol.solve(&(b.transpose() * &p_next * delta + 0.5 * &lu + 0.5 * (b.transpose() * &b_next)));
        let closed = a + b * &k;
        let p_t = linalg::symmetrize(
            &(&cost.qx[t] + k.transpose() * ru * &k + closed.transpose() * &p_next * &closed),
        );
        // Linear-term recursion with the synthesis-time constant successor
        // displacement B k_const + δ (the current-step conditional
        // disturbance mean is handled at runtime through the Kw channel).
        let bc = b * &k_const + delta;
        let b_t = &lx
            + 2.0 * k.transpose() * ru * &k_const
            + k.transpose() * &lu
            + 2.0 * closed.transpose() * &p_next * &bc
            + closed.transpose() * &b_next;
        let law = StepLaw {
            k_model: k,
            k_plant: DMatrix::zeros(m, n),
            k_w: kw,
            slot_gain: DMatrix::zeros(m, n * (horizon - t)),
            offset: k_const,
        };
        rev_laws.push(law);
        p_next = p_t;
        b_next = b_t;
    }
    rev_laws.reverse();
    SeparatedStrategy::new(BindingMode::Parameterized, rev_laws, dims)
}

/// The matching construction: per step, the minimum-norm control that makes
/// the expected model successor hit the `x̂_{t+1}` slot,
///
/// ```text
/// u_t = B_t⁺ ( x̂_{t+1} − A_t·E[x_t|data] − D_t·E[w_t|data] ).
/// ```
///
/// Gains: `K_t = −B⁺A`, `Kw_t = −B⁺D`, slot gain `[B⁺ 0 … 0]`. When `B_t`
/// lacks full row rank the law is still the least-squares/minimum-norm
/// solution; the residual diagnostics live in [`matching_control`].
pub fn matching_strategy(
    model_sys: &TimeVaryingLinearSystem,
    dims: &Dims,
) -> Result<SeparatedStrategy> {
    model_sys.validate(dims)?;
    let horizon = dims.horizon;
    let n = dims.n;
    let m = dims.m;
    let mut steps = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let pinv_b = linalg::pseudo_inverse(&model_sys.b[t])?;
        let mut slot_gain = DMatrix::zeros(m, n * (horizon - t));
        slot_gain.view_mut((0, 0), (m, n)).copy_from(&pinv_b);
        steps.push(StepLaw {
            k_model: -&pinv_b * &model_sys.a[t],
            k_plant: DMatrix::zeros(m, n),
            k_w: -&pinv_b * &model_sys.d[t],
            slot_gain,
            offset: DVector::zeros(m),
        });
    }
    SeparatedStrategy::new(BindingMode::Parameterized, steps, dims)
}

/// Evaluates the matching law at one step against an explicit target and
/// reports the left-over expected gap. Errors with [`Error::RankDeficient`]
/// when the gap is materially nonzero — the actuation cannot reach the
/// target (e.g. `B_t = 0`).
pub fn matching_control(
    model_sys: &TimeVaryingLinearSystem,
    t: usize,
    model_mean: &DVector<f64>,
    w_mean: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    if t >= model_sys.b.len() {
        return Err(Error::IndexOutOfHorizon {
            t,
            horizon: model_sys.b.len(),
        });
    }
    let rhs = target - &model_sys.a[t] * model_mean - &model_sys.d[t] * w_mean;
    let (u, residual) = linalg::lstsq_min_norm(&model_sys.b[t], &rhs)?;
    let scale = 1.0 + target.amax().max(rhs.amax());
    if residual > 1e-9 * scale {
        return Err(Error::RankDeficient { t, residual });
    }
    Ok((u, residual))
}

/// Monte Carlo cost estimates for one bound strategy.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    /// Plant-side cost mean (the objective the controller actually cares about).
    pub j1_mean: f64,
    pub j1_stderr: f64,
    /// Penalized model-side cost mean.
    pub j2_mean: f64,
    pub j2_stderr: f64,
    /// Mean of the discrepancy penalty component alone.
    pub penalty_mean: f64,
    pub episodes: usize,
}
