//! Scenario configuration: a single TOML document describing the two
//! systems, the primitive noise law, the cost, and run controls.
//!
//! Matrices are nested arrays in row-major order (`a = [ [[3.0]], [[3.0]] ]`
//! is a two-step sequence of 1×1 matrices). The `[plant]` section is
//! optional: when present it defines the simulated actual system — commands
//! that close a loop (`simulate`, `learn`, `compare`) require it, while
//! `solve` works from the model alone. The plant shares the model's sensor
//! maps, so it declares only its transition matrices.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sepctl::lti::{Dims, QuadraticCostSpec, TimeVaryingLinearSystem};
use sepctl::noise::NoiseSpec;

use crate::CliError;

/// Nested row-major matrix literal as it appears in the document.
type MatrixRows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub dims: DimsConfig,
    pub model: SystemConfig,
    #[serde(default)]
    pub plant: Option<PlantConfig>,
    pub noise: NoiseConfig,
    pub cost: CostConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    pub states: usize,
    pub controls: usize,
    pub outputs: usize,
    pub disturbances: usize,
    pub sensor_noises: usize,
    pub horizon: usize,
}

/// The nominal model: one `a`/`b`/`d` entry per transition step, one
/// `c`/`e` entry per observation instant (`horizon + 1` of each).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub a: Vec<MatrixRows>,
    pub b: Vec<MatrixRows>,
    pub d: Vec<MatrixRows>,
    pub c: Vec<MatrixRows>,
    pub e: Vec<MatrixRows>,
}

/// The simulated actual system. Sensor maps are shared with the model, so
/// only the transition matrices are declared. The learning workflow never
/// reads these matrices — they exist to drive the simulator that stands in
/// for the real system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub a: Vec<MatrixRows>,
    pub b: Vec<MatrixRows>,
    pub d: Vec<MatrixRows>,
}

/// Joint law of the primitive randomness, stacked as
/// `[x0 | w_0 .. w_{T-1} | z_0 .. z_{T-1}]`. The covariance may couple any
/// blocks (it must be symmetric positive semidefinite).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Quadratic cost weights: per-step state and control weights, a terminal
/// state weight, and the discrepancy-penalty weight `beta` (zero for plain
/// tracking, positive to enforce trajectory matching).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub state: Vec<MatrixRows>,
    pub control: Vec<MatrixRows>,
    pub terminal: MatrixRows,
    #[serde(default)]
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Monte Carlo episodes (for `learn`: episodes per refinement round).
    pub episodes: u64,
    /// Target-refinement rounds used by `learn`.
    pub outer_iterations: usize,
    pub seed: u64,
    /// Convergence threshold on the max target drift between rounds.
    pub tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            episodes: 10_000,
            outer_iterations: 3,
            seed: 0,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Directory all default artifacts are written into (created on demand).
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("."),
        }
    }
}

/// Everything a command needs, constructed and validated from a config.
#[derive(Debug)]
pub struct Scenario {
    pub dims: Dims,
    pub model: TimeVaryingLinearSystem,
    pub plant: Option<TimeVaryingLinearSystem>,
    pub noise: NoiseSpec,
    pub cost: QuadraticCostSpec,
    pub run: RunConfig,
    pub output_dir: PathBuf,
    pub digest: String,
}

impl Scenario {
    /// The plant system, or a config error naming the section and the
    /// command that needs it.
    pub fn require_plant(&self, command: &str) -> Result<&TimeVaryingLinearSystem, CliError> {
        self.plant.as_ref().ok_or_else(|| {
            CliError::config(format!(
                "`{command}` needs a [plant] section (plant.a/b/d) to simulate the actual system"
            ))
        })
    }
}

impl ScenarioConfig {
    /// Reads and parses a config document. Parse failures carry the
    /// offending line and field in the message.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Hex SHA-256 of the parsed document's canonical form. Key order,
    /// whitespace, and comments in the source document do not affect it;
    /// every semantic field does.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&canonical);
        let mut hex = String::with_capacity(hash.len() * 2);
        for byte in hash {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Validates the document semantically and constructs the typed
    /// scenario. Every error names the field it refers to.
    pub fn build(&self) -> Result<Scenario, CliError> {
        let dims = Dims {
            n: self.dims.states,
            m: self.dims.controls,
            p: self.dims.outputs,
            r: self.dims.disturbances,
            s: self.dims.sensor_noises,
            horizon: self.dims.horizon,
        };
        dims.validate()
            .map_err(|e| CliError::config(format!("dims: {e}")))?;

        let model = TimeVaryingLinearSystem::new(
            matrix_seq("model.a", &self.model.a, dims.horizon, dims.n, dims.n)?,
            matrix_seq("model.b", &self.model.b, dims.horizon, dims.n, dims.m)?,
            matrix_seq("model.d", &self.model.d, dims.horizon, dims.n, dims.r)?,
            matrix_seq("model.c", &self.model.c, dims.horizon + 1, dims.p, dims.n)?,
            matrix_seq("model.e", &self.model.e, dims.horizon + 1, dims.p, dims.s)?,
            &dims,
        )
        .map_err(|e| CliError::config(format!("model: {e}")))?;

        let plant = match &self.plant {
            None => None,
            Some(section) => Some(
                TimeVaryingLinearSystem::new(
                    matrix_seq("plant.a", &section.a, dims.horizon, dims.n, dims.n)?,
                    matrix_seq("plant.b", &section.b, dims.horizon, dims.n, dims.m)?,
                    matrix_seq("plant.d", &section.d, dims.horizon, dims.n, dims.r)?,
                    model.c.clone(),
                    model.e.clone(),
                    &dims,
                )
                .map_err(|e| CliError::config(format!("plant: {e}")))?,
            ),
        };

        let len = dims.primitive_len();
        let mean = DVector::from_vec(self.noise.mean.clone());
        if mean.len() != len {
            return Err(CliError::config(format!(
                "noise.mean: expected {len} entries ([x0 | w blocks | z blocks]), got {}",
                mean.len()
            )));
        }
        let covariance = matrix("noise.covariance", &self.noise.covariance, len, len)?;
        let noise = NoiseSpec::new(mean, covariance, &dims)
            .map_err(|e| CliError::config(format!("noise: {e}")))?;

        let cost = QuadraticCostSpec {
            qx: matrix_seq("cost.state", &self.cost.state, dims.horizon, dims.n, dims.n)?,
            ru: matrix_seq("cost.control", &self.cost.control, dims.horizon, dims.m, dims.m)?,
            qt: matrix("cost.terminal", &self.cost.terminal, dims.n, dims.n)?,
            lx: None,
            lu: None,
            lt: None,
            beta: self.cost.beta,
        };
        cost.validate(&dims)
            .map_err(|e| CliError::config(format!("cost: {e}")))?;
        if self.cost.beta < 0.0 {
            return Err(CliError::config("cost.beta must be nonnegative".into()));
        }

        if self.run.episodes == 0 {
            return Err(CliError::config("run.episodes must be positive".into()));
        }
        if self.run.outer_iterations == 0 {
            return Err(CliError::config(
                "run.outer_iterations must be positive".into(),
            ));
        }

        Ok(Scenario {
            dims,
            model,
            plant,
            noise,
            cost,
            run: self.run.clone(),
            output_dir: self.output.directory.clone(),
            digest: self.digest(),
        })
    }
}

fn matrix(field: &str, rows: &[Vec<f64>], want_rows: usize, want_cols: usize) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != want_rows {
        return Err(CliError::config(format!(
            "{field}: expected {want_rows} rows, got {}",
            rows.len()
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != want_cols {
            return Err(CliError::config(format!(
                "{field}: row {i} has {} entries, expected {want_cols}",
                row.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(want_rows, want_cols, |i, j| rows[i][j]))
}

fn matrix_seq(
    field: &str,
    entries: &[MatrixRows],
    count: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<DMatrix<f64>>, CliError> {
    if entries.len() != count {
        return Err(CliError::config(format!(
            "{field}: expected {count} matrices, got {}",
            entries.len()
        )));
    }
    entries
        .iter()
        .enumerate()
        .map(|(t, m)| matrix(&format!("{field}[{t}]"), m, rows, cols))
        .collect()
}
