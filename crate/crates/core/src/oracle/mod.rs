//! Independent ground-truth computations used to cross-check the filter,
//! the synthesis routines, and the simulation stack.
//!
//! Everything here works directly on the joint law of the primitive random
//! vector `xi = (x0, w_0..w_{T-1}, z_0..z_{T-1})`, with no recursion shared
//! with the estimator or solver code paths:
//!
//! * [`condition_joint_gaussian`] / [`batch_gaussian_conditioning`] compute
//!   conditional laws by one-shot Schur complements, giving a reference for
//!   the sequential measurement updates in the estimator.
//! * [`exact_linear_strategy`] finds the globally optimal affine strategy
//!   over a declared information basis by assembling and solving the normal
//!   equations of the expected quadratic cost, giving a reference for the
//!   backward-recursion solvers and for learned strategies.
//!
//! The [`example`] submodule wires both oracles into a worked two-step
//! instance and runs every production pipeline against them.

pub mod example;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimator::GaussianBelief;
use crate::linalg;
use crate::lti::{Dims, QuadraticCostSpec, TimeVaryingLinearSystem};
use crate::noise::NoiseSpec;

/// Conditions a joint Gaussian `xi ~ N(mean, cov)` on the exact observation
/// `obs_map * xi = observed` and returns the conditional law of
/// `query * xi`.
///
/// The observation covariance `obs_map * cov * obs_map'` must be positive
/// definite — conditioning on degenerate functionals is rejected with
/// [`Error::SingularObservationCovariance`] because the conditional law is
/// not defined for observed values outside the support.
pub fn condition_joint_gaussian(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    query: &DMatrix<f64>,
    obs_map: &DMatrix<f64>,
    observed: &DVector<f64>,
) -> Result<GaussianBelief> {
    let len = mean.len();
    if cov.nrows() != len || cov.ncols() != len {
        return Err(Error::dim(
            "joint covariance",
            format!("{len}x{len}"),
            format!("{}x{}", cov.nrows(), cov.ncols()),
        ));
    }
    if query.ncols() != len {
        return Err(Error::dim(
            "query map columns",
            format!("{len}"),
            format!("{}", query.ncols()),
        ));
    }
    if obs_map.ncols() != len {
        return Err(Error::dim(
            "observation map columns",
            format!("{len}"),
            format!("{}", obs_map.ncols()),
        ));
    }
    if observed.len() != obs_map.nrows() {
        return Err(Error::LengthMismatch {
            expected: obs_map.nrows(),
            got: observed.len(),
        });
    }

    if obs_map.nrows() == 0 {
        // Conditioning on nothing: the marginal of the query functionals.
        let cov_q = linalg::symmetrize(&(query * cov * query.transpose()));
        return GaussianBelief::new(query * mean, cov_q);
    }

    let obs_cov = linalg::symmetrize(&(obs_map * cov * obs_map.transpose()));
    let chol = Cholesky::new(obs_cov).ok_or(Error::SingularObservationCovariance)?;
    // cross' = obs_map * cov * query', so gain = query-side regression
    // coefficients of the observed functionals.
    let cross = query * cov * obs_map.transpose();
    let gain = chol.solve(&cross.transpose()).transpose();
    let mean_q = query * mean + &gain * (observed - obs_map * mean);
    let cov_q = query * cov * query.transpose() - &gain * cross.transpose();
    GaussianBelief::new(mean_q, linalg::symmetrize(&cov_q))
}

/// Conditions the primitive joint law of `noise` on a batch of exact linear
/// observations and returns the belief over `query * xi`.
///
/// `observation_maps[k] * xi = observed[k]` are stacked into one joint
/// conditioning step, so the result is the textbook conditional law given
/// everything at once. Affine observations `M xi + offset` are handled by
/// passing `observed[k] - offset`.
pub fn batch_gaussian_conditioning(
    noise: &NoiseSpec,
    query: &DMatrix<f64>,
    observation_maps: &[DMatrix<f64>],
    observed: &[DVector<f64>],
) -> Result<GaussianBelief> {
    if observation_maps.len() != observed.len() {
        return Err(Error::LengthMismatch {
            expected: observation_maps.len(),
            got: observed.len(),
        });
    }
    let len = noise.len();
    let mut rows = 0;
    for (map, value) in observation_maps.iter().zip(observed) {
        if map.ncols() != len {
            return Err(Error::dim(
                "observation map columns",
                format!("{len}"),
                format!("{}", map.ncols()),
            ));
        }
        if value.len() != map.nrows() {
            return Err(Error::LengthMismatch {
                expected: map.nrows(),
                got: value.len(),
            });
        }
        rows += map.nrows();
    }
    let mut stacked_map = DMatrix::zeros(rows, len);
    let mut stacked_values = DVector::zeros(rows);
    let mut at = 0;
    for (map, value) in observation_maps.iter().zip(observed) {
        stacked_map.view_mut((at, 0), (map.nrows(), len)).copy_from(map);
        stacked_values.rows_mut(at, value.len()).copy_from(value);
        at += map.nrows();
    }
    condition_joint_gaussian(noise.mean(), noise.cov(), query, &stacked_map, &stacked_values)
}

/// An affine control law written directly over primitive coordinates:
/// `u_t = coefficients[t][0] + sum_k coefficients[t][1 + k] * xi[basis[t][k]]`.
///
/// `basis[t]` declares which primitive coordinates the controller at step
/// `t` is allowed to read; the constant term is always present.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStrategyCoefficients {
    pub basis: Vec<Vec<usize>>,
    pub coefficients: Vec<DVector<f64>>,
}

impl AffineStrategyCoefficients {
    /// Evaluates the control at step `t` on a realized primitive vector.
    pub fn control(&self, t: usize, xi: &DVector<f64>) -> Result<f64> {
        if t >= self.coefficients.len() {
            return Err(Error::IndexOutOfHorizon {
                t,
                horizon: self.coefficients.len(),
            });
        }
        let coef = &self.coefficients[t];
        let mut u = coef[0];
        for (k, &idx) in self.basis[t].iter().enumerate() {
            u += coef[1 + k] * xi[idx];
        }
        Ok(u)
    }

    /// Total number of free coefficients across all steps.
    pub fn len(&self) -> usize {
        self.coefficients.iter().map(DVector::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates the per-step coefficient blocks into one vector, in
    /// step order with the constant term first within each block.
    pub fn stacked(&self) -> DVector<f64> {
        let mut theta = DVector::zeros(self.len());
        let mut at = 0;
        for coef in &self.coefficients {
            theta.rows_mut(at, coef.len()).copy_from(coef);
            at += coef.len();
        }
        theta
    }

    /// Inverse of [`stacked`](Self::stacked) for the given basis layout.
    pub fn from_stacked(basis: &[Vec<usize>], theta: &DVector<f64>) -> Result<Self> {
        let expected: usize = basis.iter().map(|b| 1 + b.len()).sum();
        if theta.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: theta.len(),
            });
        }
        let mut coefficients = Vec::with_capacity(basis.len());
        let mut at = 0;
        for b in basis {
            let width = 1 + b.len();
            coefficients.push(theta.rows(at, width).into_owned());
            at += width;
        }
        Ok(Self {
            basis: basis.to_vec(),
            coefficients,
        })
    }
}

/// Output of [`exact_linear_strategy`]: the optimal coefficients, the
/// optimal expected cost, and the quadratic cost model itself so arbitrary
/// coefficient vectors can be scored analytically.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub coefficients: AffineStrategyCoefficients,
    pub optimal_cost: f64,
    h: DMatrix<f64>,
    g: DVector<f64>,
    c: f64,
}

impl ExactSolution {
    /// The optimal stacked coefficient vector.
    pub fn theta(&self) -> DVector<f64> {
        self.coefficients.stacked()
    }

    /// Analytic expected cost of an arbitrary stacked coefficient vector
    /// under the same instance: `theta' H theta + 2 g' theta + c`.
    pub fn expected_cost(&self, theta: &DVector<f64>) -> Result<f64> {
        if theta.len() != self.g.len() {
            return Err(Error::LengthMismatch {
                expected: self.g.len(),
                got: theta.len(),
            });
        }
        Ok((theta.transpose() * &self.h * theta)[(0, 0)] + 2.0 * self.g.dot(theta) + self.c)
    }
}

/// Affine-in-coefficients representation of a scalar random quantity:
/// `value(xi) = aug(xi)' (base + jac * theta)` with `aug(xi) = [1; xi]`.
struct AffineRep {
    base: DVector<f64>,
    jac: DMatrix<f64>,
}

/// Solves for the globally optimal affine strategy over a declared
/// information basis, by direct minimization of the expected cost.
///
/// States are eliminated forward in closed form, so the expected cost is an
/// exact quadratic `theta' H theta + 2 g' theta + c` over all coefficient
/// vectors; its unique minimizer is read off the normal equations. This
/// covers scalar state/control/disturbance channels, which is all the
/// cross-check instances need; the observation channel plays no role
/// because the information basis is declared explicitly.
///
/// Fails with [`Error::SingularNormalEquations`] when the declared basis
/// makes the optimum non-unique (for example a repeated coordinate).
pub fn exact_linear_strategy(
    sys: &TimeVaryingLinearSystem,
    cost: &QuadraticCostSpec,
    noise: &NoiseSpec,
    dims: &Dims,
    basis: &[Vec<usize>],
) -> Result<ExactSolution> {
    if dims.n != 1 || dims.m != 1 || dims.r != 1 {
        return Err(Error::Config(
            "exact affine oracle requires scalar state, control and disturbance channels".into(),
        ));
    }
    sys.validate(dims)?;
    cost.validate(dims)?;
    if noise.len() != dims.primitive_len() || noise.horizon() != dims.horizon {
        return Err(Error::dim(
            "primitive law",
            format!("{} coordinates over {} steps", dims.primitive_len(), dims.horizon),
            format!("{} coordinates over {} steps", noise.len(), noise.horizon()),
        ));
    }
    if basis.len() != dims.horizon {
        return Err(Error::HorizonMismatch {
            what: "information basis".into(),
            expected: dims.horizon,
            got: basis.len(),
        });
    }
    let len = noise.len();
    for (t, b) in basis.iter().enumerate() {
        if let Some(&bad) = b.iter().find(|&&idx| idx >= len) {
            return Err(Error::Config(format!(
                "basis coordinate {bad} at step {t} outside primitive vector of length {len}"
            )));
        }
    }

    // Coefficient layout: per step, constant first, then basis weights.
    let widths: Vec<usize> = basis.iter().map(|b| 1 + b.len()).collect();
    let offsets: Vec<usize> = widths
        .iter()
        .scan(0, |acc, w| {
            let at = *acc;
            *acc += w;
            Some(at)
        })
        .collect();
    let total: usize = widths.iter().sum();

    // Second moments of the augmented primitive vector [1; xi].
    let mu = noise.mean();
    let sigma = noise.cov();
    let mut mm = DMatrix::zeros(1 + len, 1 + len);
    mm[(0, 0)] = 1.0;
    mm.view_mut((0, 1), (1, len)).copy_from(&mu.transpose());
    mm.view_mut((1, 0), (len, 1)).copy_from(mu);
    mm.view_mut((1, 1), (len, len))
        .copy_from(&(sigma + mu * mu.transpose()));
    let mean_aug = mm.column(0).into_owned();

    let mut h = DMatrix::zeros(total, total);
    let mut g = DVector::zeros(total);
    let mut c = 0.0;
    // weight * E[value^2] for an affine-in-theta quantity.
    let add_square = |weight: f64, rep: &AffineRep, h: &mut DMatrix<f64>, g: &mut DVector<f64>, c: &mut f64| {
        if weight == 0.0 {
            return;
        }
        let mj = &mm * &rep.jac;
        *h += weight * rep.jac.transpose() * &mj;
        *g += weight * mj.transpose() * &rep.base;
        *c += weight * (rep.base.transpose() * &mm * &rep.base)[(0, 0)];
    };
    // weight * E[value]; the factor 1/2 folds the linear term into `2 g'`.
    let add_linear = |weight: f64, rep: &AffineRep, g: &mut DVector<f64>, c: &mut f64| {
        if weight == 0.0 {
            return;
        }
        *g += (weight / 2.0) * rep.jac.transpose() * &mean_aug;
        *c += weight * rep.base.dot(&mean_aug);
    };

    // Forward elimination: represent x_t and u_t over (base, jac).
    let mut x = AffineRep {
        base: DVector::zeros(1 + len),
        jac: DMatrix::zeros(1 + len, total),
    };
    x.base[1 + noise.x0_indices().start] = 1.0;

    for t in 0..dims.horizon {
        let mut u = AffineRep {
            base: DVector::zeros(1 + len),
            jac: DMatrix::zeros(1 + len, total),
        };
        u.jac[(0, offsets[t])] = 1.0;
        for (k, &idx) in basis[t].iter().enumerate() {
            u.jac[(1 + idx, offsets[t] + 1 + k)] = 1.0;
        }

        add_square(cost.qx[t][(0, 0)], &x, &mut h, &mut g, &mut c);
        if let Some(lx) = cost.lx.as_ref() {
            add_linear(lx[t][0], &x, &mut g, &mut c);
        }
        add_square(cost.ru[t][(0, 0)], &u, &mut h, &mut g, &mut c);
        if let Some(lu) = cost.lu.as_ref() {
            add_linear(lu[t][0], &u, &mut g, &mut c);
        }

        let (a, b, d) = (sys.a[t][(0, 0)], sys.b[t][(0, 0)], sys.d[t][(0, 0)]);
        let mut next = AffineRep {
            base: a * &x.base + b * &u.base,
            jac: a * &x.jac + b * &u.jac,
        };
        next.base[1 + noise.w_indices(t)?.start] += d;
        x = next;
    }
    add_square(cost.qt[(0, 0)], &x, &mut h, &mut g, &mut c);
    if let Some(lt) = cost.lt.as_ref() {
        add_linear(lt[0], &x, &mut g, &mut c);
    }

    let h = linalg::symmetrize(&h);
    let chol = Cholesky::new(h.clone()).ok_or(Error::SingularNormalEquations)?;
    let theta = -chol.solve(&g);
    let optimal_cost = c + g.dot(&theta);
    let coefficients = AffineStrategyCoefficients::from_stacked(basis, &theta)?;
    Ok(ExactSolution {
        coefficients,
        optimal_cost,
        h,
        g,
        c,
    })
}
