//! Joint Gaussian specification of the primitive random variables.
//!
//! Every exogenous quantity in an episode — the initial state, the process
//! disturbances, and the sensor noises — is one jointly Gaussian vector
//!
//! ```text
//! xi = [ x0 | w_0 .. w_{T-1} | z_0 .. z_{T-1} ]
//! ```
//!
//! Arbitrary cross-covariances are allowed, including correlation between
//! the initial state and early disturbances. Marginals over any index block
//! and sampling are derived from this single joint law, so every consumer
//! (simulation, filtering, conditioning) agrees on the statistics by
//! construction. There is no sensor draw for the terminal observation; the
//! harness observes the final state with a zero sensor vector.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lti::Dims;

/// Gaussian noise entering one transition/observation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    /// Marginal mean of `w_t`.
    pub w_mean: DVector<f64>,
    /// Marginal covariance of `w_t`.
    pub w_cov: DMatrix<f64>,
    /// Marginal mean of the sensor noise entering the observation at `t+1`
    /// (zero at the terminal instant, which has no sensor draw).
    pub z_next_mean: DVector<f64>,
    /// Marginal covariance of that sensor noise (zero at the terminal instant).
    pub z_next_cov: DMatrix<f64>,
}

/// Joint Gaussian law over all primitive random variables of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    n: usize,
    r: usize,
    s: usize,
    horizon: usize,
    /// Cached square root of `cov` for sampling.
    factor: DMatrix<f64>,
}

impl NoiseSpec {
    /// Builds the joint law, validating symmetry and positive
    /// semidefiniteness of the covariance.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, dims: &Dims) -> Result<Self> {
        let len = dims.primitive_len();
        if mean.len() != len {
            return Err(Error::dim(
                "primitive mean",
                format!("{len}"),
                format!("{}", mean.len()),
            ));
        }
        linalg::check_symmetric_psd(&cov, len, 1e-12, 1e-10, "primitive covariance")?;
        let cov = linalg::symmetrize(&cov);
        let factor = Self::square_root(&cov)?;
        Ok(Self {
            mean,
            cov,
            n: dims.n,
            r: dims.r,
            s: dims.s,
            horizon: dims.horizon,
            factor,
        })
    }

    /// Zero-mean joint law.
    pub fn zero_mean(cov: DMatrix<f64>, dims: &Dims) -> Result<Self> {
        let len = dims.primitive_len();
        Self::new(DVector::zeros(len), cov, dims)
    }

    /// A square root `L` with `L L' = cov`: Cholesky when the covariance is
    /// definite, eigenvalue square root otherwise (clipping roundoff-negative
    /// eigenvalues to zero).
    fn square_root(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if let Some(chol) = cov.clone().cholesky() {
            return Ok(chol.l());
        }
        let eig = nalgebra::SymmetricEigen::new(cov.clone());
        let mut scaled = eig.eigenvectors.clone();
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda < -1e-10 {
                return Err(Error::matrix(
                    "primitive covariance",
                    format!("negative eigenvalue {lambda:.3e} during factorization"),
                ));
            }
            let root = lambda.max(0.0).sqrt();
            for i in 0..scaled.nrows() {
                scaled[(i, j)] *= root;
            }
        }
        Ok(scaled)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Index range of `x0` in the stacked primitive vector.
    pub fn x0_indices(&self) -> std::ops::Range<usize> {
        0..self.n
    }

    /// Index range of `w_t`.
    pub fn w_indices(&self, t: usize) -> Result<std::ops::Range<usize>> {
        if t >= self.horizon {
            return Err(Error::IndexOutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        let start = self.n + t * self.r;
        Ok(start..start + self.r)
    }

    /// Index range of `z_t`.
    pub fn z_indices(&self, t: usize) -> Result<std::ops::Range<usize>> {
        if t >= self.horizon {
            return Err(Error::IndexOutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        let start = self.n + self.horizon * self.r + t * self.s;
        Ok(start..start + self.s)
    }

    /// Marginal law of the initial state.
    pub fn x0_prior(&self) -> (DVector<f64>, DMatrix<f64>) {
        self.marginal(self.x0_indices())
    }

    /// Marginal laws of `w_t` and of the sensor noise entering the
    /// observation at `t + 1`. At the final transition the "next"
    /// observation is the terminal one, which has no sensor draw, so zero
    /// mean and covariance are returned for it.
    pub fn step_noise(&self, t: usize) -> Result<StepNoise> {
        let w = self.w_indices(t)?;
        let (w_mean, w_cov) = self.marginal(w);
        let (z_next_mean, z_next_cov) = if t + 1 < self.horizon {
            let z = self.z_indices(t + 1)?;
            self.marginal(z)
        } else {
            (DVector::zeros(self.s), DMatrix::zeros(self.s, self.s))
        };
        Ok(StepNoise {
            w_mean,
            w_cov,
            z_next_mean,
            z_next_cov,
        })
    }

    /// Marginal law of the sensor noise at `t = 0` (the first observation).
    pub fn z0_marginal(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let z = self.z_indices(0)?;
        Ok(self.marginal(z))
    }

    fn marginal(&self, range: std::ops::Range<usize>) -> (DVector<f64>, DMatrix<f64>) {
        let k = range.len();
        let mut mean = DVector::zeros(k);
        let mut cov = DMatrix::zeros(k, k);
        for (i, gi) in range.clone().enumerate() {
            mean[i] = self.mean[gi];
            for (j, gj) in range.clone().enumerate() {
                cov[(i, j)] = self.cov[(gi, gj)];
            }
        }
        (mean, cov)
    }

    /// Draws one primitive vector.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut std_draws = DVector::zeros(self.factor.ncols());
        for v in std_draws.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        &self.mean + &self.factor * std_draws
    }

    /// Splits a primitive vector into `(x0, w_0..w_{T-1}, z_0..z_{T-1})`.
    pub fn split(&self, xi: &DVector<f64>) -> Result<(DVector<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        if xi.len() != self.len() {
            return Err(Error::dim(
                "primitive vector",
                format!("{}", self.len()),
                format!("{}", xi.len()),
            ));
        }
        let x0 = xi.rows(0, self.n).into_owned();
        let mut w = Vec::with_capacity(self.horizon);
        let mut z = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let wr = self.w_indices(t)?;
            w.push(xi.rows(wr.start, self.r).into_owned());
            let zr = self.z_indices(t)?;
            z.push(xi.rows(zr.start, self.s).into_owned());
        }
        Ok((x0, w, z))
    }

    /// Block-diagonal joint law from independent pieces: `x0 ~ (mx0, px0)`,
    /// each `w_t ~ (mw[t], pw[t])`, each `z_t ~ (mz[t], pz[t])`, mutually
    /// independent.
    pub fn independent(
        mx0: DVector<f64>,
        px0: DMatrix<f64>,
        mw: Vec<DVector<f64>>,
        pw: Vec<DMatrix<f64>>,
        mz: Vec<DVector<f64>>,
        pz: Vec<DMatrix<f64>>,
        dims: &Dims,
    ) -> Result<Self> {
        let t = dims.horizon;
        if mw.len() != t || pw.len() != t || mz.len() != t || pz.len() != t {
            return Err(Error::HorizonMismatch {
                what: "independent noise blocks".into(),
                expected: t,
                got: mw.len().min(pw.len()).min(mz.len()).min(pz.len()),
            });
        }
        let len = dims.primitive_len();
        let mut mean = DVector::zeros(len);
        let mut cov = DMatrix::zeros(len, len);
        mean.rows_mut(0, dims.n).copy_from(&mx0);
        cov.view_mut((0, 0), (dims.n, dims.n)).copy_from(&px0);
        for k in 0..t {
            let wi = dims.n + k * dims.r;
            mean.rows_mut(wi, dims.r).copy_from(&mw[k]);
            cov.view_mut((wi, wi), (dims.r, dims.r)).copy_from(&pw[k]);
            let zi = dims.n + t * dims.r + k * dims.s;
            mean.rows_mut(zi, dims.s).copy_from(&mz[k]);
            cov.view_mut((zi, zi), (dims.s, dims.s)).copy_from(&pz[k]);
        }
        Self::new(mean, cov, dims)
    }
}
