//! Finite-horizon time-varying linear system primitives.
//!
//! Two systems share one episode: a nominal *model* and the actual *plant*,
//! driven by the same control sequence, the same process disturbances and the
//! same sensor draws:
//!
//! ```text
//! x[t+1]  = A[t] x[t]  + B[t] u[t]  + D[t] w[t]        (model)
//! xh[t+1] = Ah[t] xh[t] + Bh[t] u[t] + Dh[t] w[t]      (plant)
//! y[t]  = C[t] x[t]  + E[t] z[t]                        (model output)
//! yh[t] = C[t] xh[t] + E[t] z[t]                        (plant output)
//! ```
//!
//! Both systems start from the same initial state and are observed through
//! the same output map. The cost structures for the two evaluation problems
//! (plant-side cost, and model-side cost with a trajectory-discrepancy
//! penalty) live here as well.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Problem dimensions.
///
/// `n` states, `m` controls, `p` outputs, `r` process disturbances,
/// `s` sensor noises, and `horizon` decision steps (states exist at
/// `0..=horizon`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub r: usize,
    pub s: usize,
    pub horizon: usize,
}

impl Dims {
    /// Checks that every dimension is usable.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n", self.n),
            ("m", self.m),
            ("p", self.p),
            ("r", self.r),
            ("s", self.s),
            ("horizon", self.horizon),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("dimension {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Length of the stacked primitive vector `[x0 | w_0..w_{T-1} | z_0..z_{T-1}]`.
    pub fn primitive_len(&self) -> usize {
        self.n + self.horizon * self.r + self.horizon * self.s
    }
}

/// One linear system with time-varying coefficients.
///
/// `a`, `b`, `d` have `horizon` entries (one per transition); `c`, `e` have
/// `horizon + 1` entries (one per observation instant).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVaryingLinearSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub e: Vec<DMatrix<f64>>,
}

impl TimeVaryingLinearSystem {
    /// Builds a system and validates every matrix shape against `dims`.
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        e: Vec<DMatrix<f64>>,
        dims: &Dims,
    ) -> Result<Self> {
        let sys = Self { a, b, d, c, e };
        sys.validate(dims)?;
        Ok(sys)
    }

    /// Validates sequence lengths and per-entry shapes.
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        dims.validate()?;
        let t = dims.horizon;
        let checks: [(&str, usize, usize); 5] = [
            ("A", self.a.len(), t),
            ("B", self.b.len(), t),
            ("D", self.d.len(), t),
            ("C", self.c.len(), t + 1),
            ("E", self.e.len(), t + 1),
        ];
        for (name, got, expected) in checks {
            if got != expected {
                return Err(Error::HorizonMismatch {
                    what: format!("{name} sequence"),
                    expected,
                    got,
                });
            }
        }
        let shapes: [(&str, &Vec<DMatrix<f64>>, usize, usize); 5] = [
            ("A", &self.a, dims.n, dims.n),
            ("B", &self.b, dims.n, dims.m),
            ("D", &self.d, dims.n, dims.r),
            ("C", &self.c, dims.p, dims.n),
            ("E", &self.e, dims.p, dims.s),
        ];
        for (name, seq, rows, cols) in shapes {
            for (t, m) in seq.iter().enumerate() {
                if m.nrows() != rows || m.ncols() != cols {
                    return Err(Error::dim(
                        format!("{name}[{t}]"),
                        format!("{rows}x{cols}"),
                        format!("{}x{}", m.nrows(), m.ncols()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Advances the state one step: `A[t] x + B[t] u + D[t] w`.
    pub fn step(
        &self,
        t: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if t >= self.a.len() {
            return Err(Error::IndexOutOfHorizon {
                t,
                horizon: self.a.len(),
            });
        }
        Ok(&self.a[t] * x + &self.b[t] * u + &self.d[t] * w)
    }

    /// Produces the output at time `t`: `C[t] x + E[t] z`.
    ///
    /// The terminal observation (`t == horizon`) is taken with a zero sensor
    /// draw by the simulation harness: the primitive layout carries sensor
    /// noises only for `t < horizon`.
    pub fn observe(&self, t: usize, x: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
        if t >= self.c.len() {
            return Err(Error::IndexOutOfHorizon {
                t,
                horizon: self.c.len(),
            });
        }
        Ok(&self.c[t] * x + &self.e[t] * z)
    }

    /// A system with identical coefficients at every step.
    pub fn time_invariant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        c: DMatrix<f64>,
        e: DMatrix<f64>,
        dims: &Dims,
    ) -> Result<Self> {
        Self::new(
            vec![a; dims.horizon],
            vec![b; dims.horizon],
            vec![d; dims.horizon],
            vec![c; dims.horizon + 1],
            vec![e; dims.horizon + 1],
            dims,
        )
    }
}

/// Everything realized during one simulated episode.
///
/// States and outputs have `horizon + 1` entries; controls, disturbances and
/// sensor draws have `horizon`. Model and plant share `w`, `z`, `u` and the
/// initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub x: Vec<DVector<f64>>,
    pub xhat: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub yhat: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
}

impl EpisodeRecord {
    /// Validates lengths, per-entry dimensions, and the shared-start invariant
    /// `x[0] == xhat[0]`.
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let t = dims.horizon;
        let lens: [(&str, usize, usize); 7] = [
            ("x", self.x.len(), t + 1),
            ("xhat", self.xhat.len(), t + 1),
            ("y", self.y.len(), t + 1),
            ("yhat", self.yhat.len(), t + 1),
            ("u", self.u.len(), t),
            ("w", self.w.len(), t),
            ("z", self.z.len(), t),
        ];
        for (name, got, expected) in lens {
            if got != expected {
                return Err(Error::HorizonMismatch {
                    what: format!("episode {name}"),
                    expected,
                    got,
                });
            }
        }
        let sizes: [(&str, &Vec<DVector<f64>>, usize); 7] = [
            ("x", &self.x, dims.n),
            ("xhat", &self.xhat, dims.n),
            ("y", &self.y, dims.p),
            ("yhat", &self.yhat, dims.p),
            ("u", &self.u, dims.m),
            ("w", &self.w, dims.r),
            ("z", &self.z, dims.s),
        ];
        for (name, seq, len) in sizes {
            for (i, v) in seq.iter().enumerate() {
                if v.len() != len {
                    return Err(Error::dim(
                        format!("episode {name}[{i}]"),
                        format!("{len}"),
                        format!("{}", v.len()),
                    ));
                }
            }
        }
        if (&self.x[0] - &self.xhat[0]).norm() > 0.0 {
            return Err(Error::matrix(
                "episode initial state",
                "model and plant must share x[0]".to_string(),
            ));
        }
        Ok(())
    }
}

/// Quadratic cost specification for a finite-horizon problem.
///
/// Stage cost `x' Qx[t] x + u' Ru[t] u (+ lx[t]'x + lu[t]'u)` for
/// `t < horizon` and terminal cost `x' QT x (+ lt'x)`. The scalar `beta`
/// weights the squared model/plant trajectory discrepancy in the
/// penalized evaluation problem. No implicit 1/2 anywhere: carry such
/// factors in the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCostSpec {
    pub qx: Vec<DMatrix<f64>>,
    pub ru: Vec<DMatrix<f64>>,
    pub qt: DMatrix<f64>,
    /// Optional linear stage terms on the state, `horizon` entries.
    pub lx: Option<Vec<DVector<f64>>>,
    /// Optional linear stage terms on the control, `horizon` entries.
    pub lu: Option<Vec<DVector<f64>>>,
    /// Optional linear terminal term.
    pub lt: Option<DVector<f64>>,
    pub beta: f64,
}

impl QuadraticCostSpec {
    /// Purely quadratic cost with `beta = 1`.
    pub fn quadratic(qx: Vec<DMatrix<f64>>, ru: Vec<DMatrix<f64>>, qt: DMatrix<f64>) -> Self {
        Self {
            qx,
            ru,
            qt,
            lx: None,
            lu: None,
            lt: None,
            beta: 1.0,
        }
    }

    /// Validates shapes, symmetry and positive semidefiniteness.
    ///
    /// `Ru` entries are allowed to be PSD rather than strictly definite:
    /// problems that pin the control through a matching constraint or through
    /// the next-step value curvature are well-posed with singular `Ru`, and
    /// the backward pass reports `SingularRiccati` when the actual curvature
    /// degenerates.
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let t = dims.horizon;
        if self.qx.len() != t {
            return Err(Error::HorizonMismatch {
                what: "Qx sequence".into(),
                expected: t,
                got: self.qx.len(),
            });
        }
        if self.ru.len() != t {
            return Err(Error::HorizonMismatch {
                what: "Ru sequence".into(),
                expected: t,
                got: self.ru.len(),
            });
        }
        for (i, q) in self.qx.iter().enumerate() {
            linalg::check_symmetric_psd(q, dims.n, 1e-12, 1e-10, &format!("Qx[{i}]"))?;
        }
        for (i, r) in self.ru.iter().enumerate() {
            linalg::check_symmetric_psd(r, dims.m, 1e-12, 1e-10, &format!("Ru[{i}]"))?;
        }
        linalg::check_symmetric_psd(&self.qt, dims.n, 1e-12, 1e-10, "QT")?;
        for (name, seq, len) in [
            ("lx", &self.lx, dims.n),
            ("lu", &self.lu, dims.m),
        ] {
            if let Some(seq) = seq {
                if seq.len() != t {
                    return Err(Error::HorizonMismatch {
                        what: format!("{name} sequence"),
                        expected: t,
                        got: seq.len(),
                    });
                }
                for (i, v) in seq.iter().enumerate() {
                    if v.len() != len {
                        return Err(Error::dim(
                            format!("{name}[{i}]"),
                            format!("{len}"),
                            format!("{}", v.len()),
                        ));
                    }
                }
            }
        }
        if let Some(lt) = &self.lt {
            if lt.len() != dims.n {
                return Err(Error::dim("lt", format!("{}", dims.n), format!("{}", lt.len())));
            }
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    fn stage(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut c = (x.transpose() * &self.qx[t] * x)[(0, 0)] + (u.transpose() * &self.ru[t] * u)[(0, 0)];
        if let Some(lx) = &self.lx {
            c += lx[t].dot(x);
        }
        if let Some(lu) = &self.lu {
            c += lu[t].dot(u);
        }
        c
    }

    fn terminal(&self, x: &DVector<f64>) -> f64 {
        let mut c = (x.transpose() * &self.qt * x)[(0, 0)];
        if let Some(lt) = &self.lt {
            c += lt.dot(x);
        }
        c
    }
}

/// Plant-side episode cost: stage costs on the plant trajectory plus the
/// terminal cost on the final plant state.
pub fn problem1_cost(cost: &QuadraticCostSpec, episode: &EpisodeRecord) -> f64 {
    let horizon = episode.u.len();
    let mut total = 0.0;
    for t in 0..horizon {
        total += cost.stage(t, &episode.xhat[t], &episode.u[t]);
    }
    total + cost.terminal(&episode.xhat[horizon])
}

/// Model-side episode cost with a discrepancy penalty: stage costs on the
/// model trajectory, plus `beta * |x[t+1] - xhat[t+1]|^2` for every
/// transition, plus the terminal cost on the final model state.
pub fn problem2_cost(cost: &QuadraticCostSpec, episode: &EpisodeRecord) -> f64 {
    let horizon = episode.u.len();
    let mut total = 0.0;
    for t in 0..horizon {
        total += cost.stage(t, &episode.x[t], &episode.u[t]);
        let gap = &episode.x[t + 1] - &episode.xhat[t + 1];
        total += cost.beta * gap.norm_squared();
    }
    total + cost.terminal(&episode.x[horizon])
}

/// The discrepancy penalty alone: `sum_t beta * |x[t+1] - xhat[t+1]|^2`.
pub fn discrepancy_penalty(cost: &QuadraticCostSpec, episode: &EpisodeRecord) -> f64 {
    let horizon = episode.u.len();
    let mut total = 0.0;
    for t in 0..horizon {
        let gap = &episode.x[t + 1] - &episode.xhat[t + 1];
        total += cost.beta * gap.norm_squared();
    }
    total
}
