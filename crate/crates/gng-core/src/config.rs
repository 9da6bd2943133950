//! Experiment configuration: one TOML file drives a run.
//!
//! The file declares the prior, codec, forward operator, observation,
//! noise/timestep schedules, sampler settings and (optionally) the guidance
//! baseline. Numbers are decimal, vectors are bracketed lists, and blur
//! kernels may live inline or in a referenced text file with one value per
//! line. See the repository README for the full grammar and bundled
//! examples under `configs/`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dcopt::{LambdaSpec, OptimizeSpec, Solver};
use crate::error::{Error, Result};
use crate::operator::{synthesize_observation, ForwardOperator, ForwardTask};
use crate::prior::{AnalyticPrior, Covariance, GaussianPrior, GmmPrior, LinearCodec};
use crate::sampler::{GngConfig, RenoiseStdMode};
use crate::schedule::{build_grid, NoiseSchedule, NoiseScheduleKind, ScheduleStrategy};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceConfig {
    /// s2 * I.
    Isotropic { s2: f64 },
    /// Per-coordinate variances.
    Diagonal { values: Vec<f64> },
    /// Sigma_ij = rho^|i-j|, the smooth toy-image prior.
    Toeplitz { rho: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Gaussian {
        /// Explicit mean vector, or `dim` + `mean_value` for a constant fill.
        #[serde(default)]
        mean: Option<Vec<f64>>,
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default)]
        mean_value: f64,
        covariance: CovarianceConfig,
    },
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecConfig {
    Identity,
    /// Random orthogonal matrix drawn once from the given seed.
    Rotation { seed: u64 },
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig::Identity
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorConfig {
    Dense {
        matrix: Vec<Vec<f64>>,
    },
    Mask {
        keep: Vec<usize>,
        dim: usize,
    },
    CircularBlur {
        #[serde(default)]
        kernel: Option<Vec<f64>>,
        #[serde(default)]
        kernel_file: Option<PathBuf>,
        dim: usize,
    },
    Decimate {
        factor: usize,
        dim: usize,
    },
    ClipScale {
        c: f64,
        lo: f64,
        hi: f64,
        dim: usize,
    },
    Compose {
        parts: Vec<OperatorConfig>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub sigma_y: f64,
    /// Fixed observation y; mutually exclusive with the x_true options.
    #[serde(default)]
    pub observation: Option<Vec<f64>>,
    /// Explicit ground truth; y is synthesized as A(x_true) + sigma_y w.
    #[serde(default)]
    pub x_true: Option<Vec<f64>>,
    /// Draw the ground truth from the prior instead.
    #[serde(default)]
    pub x_true_from_prior: bool,
    /// Seed for ground-truth draws and observation noise (defaults to
    /// seed + 1).
    #[serde(default)]
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub noise: NoiseScheduleKind,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    /// Number of guidance timesteps M.
    pub num_steps: usize,
    #[serde(flatten)]
    pub strategy: ScheduleStrategy,
}

fn default_t_max() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Constant,
    SnrScaled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub solver: Solver,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_lambda_mode")]
    pub lambda_mode: LambdaMode,
    #[serde(default = "default_true")]
    pub absorb_sigma_y: bool,
}

fn default_iterations() -> usize {
    50
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_lambda_mode() -> LambdaMode {
    LambdaMode::Constant
}
fn default_true() -> bool {
    true
}

impl PhaseConfig {
    pub fn to_spec(&self) -> OptimizeSpec {
        let lambda = match self.lambda_mode {
            LambdaMode::Constant => LambdaSpec::Constant { lambda: self.lambda },
            LambdaMode::SnrScaled => LambdaSpec::SnrScaled { base: self.lambda },
        };
        OptimizeSpec {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            lambda,
            solver: self.solver,
            absorb_sigma_y: self.absorb_sigma_y,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GngSection {
    pub t_star: f64,
    pub warm_start_iters: usize,
    #[serde(default = "default_substeps")]
    pub ddim_substeps: usize,
    #[serde(default = "default_eta")]
    pub eta_interleave: f64,
    #[serde(default = "default_renoise_mode")]
    pub renoise_std_mode: RenoiseStdMode,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
}

fn default_substeps() -> usize {
    1
}
fn default_eta() -> f64 {
    1.0
}
fn default_renoise_mode() -> RenoiseStdMode {
    RenoiseStdMode::PaperSigmaSquared
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub steps: usize,
    pub guidance_scale: f64,
}

/// Top-level experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub num_samples: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub prior: PriorConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    pub operator: OperatorConfig,
    pub task: TaskConfig,
    pub schedule: ScheduleConfig,
    pub gng: GngSection,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A fully constructed experiment, ready to run.
pub struct Experiment {
    pub name: String,
    pub prior: AnalyticPrior,
    pub codec: LinearCodec,
    pub task: ForwardTask,
    pub gng: GngConfig,
    pub baseline: Option<BaselineConfig>,
    pub num_samples: usize,
    pub out_dir: PathBuf,
    /// Round-trip echo of the parsed file, embedded in every report.
    pub echo: serde_json::Value,
}

impl ExperimentConfig {
    /// Parse a TOML experiment file.
    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&body)
    }

    pub fn parse(body: &str) -> Result<Self> {
        toml::from_str(body).map_err(|e| Error::Config(e.to_string()))
    }

    fn build_prior(&self) -> Result<AnalyticPrior> {
        match &self.prior {
            PriorConfig::Gaussian {
                mean,
                dim,
                mean_value,
                covariance,
            } => {
                let mean = match (mean, dim) {
                    (Some(m), _) => DVector::from_vec(m.clone()),
                    (None, Some(d)) => DVector::from_element(*d, *mean_value),
                    (None, None) => {
                        return Err(Error::Config(
                            "prior.mean or prior.dim must be given".into(),
                        ))
                    }
                };
                let prior = match covariance {
                    CovarianceConfig::Isotropic { s2 } => {
                        GaussianPrior::new(mean, Covariance::Isotropic { s2: *s2 })?
                    }
                    CovarianceConfig::Diagonal { values } => GaussianPrior::new(
                        mean,
                        Covariance::Diagonal {
                            diag: DVector::from_vec(values.clone()),
                        },
                    )?,
                    CovarianceConfig::Toeplitz { rho } => GaussianPrior::toeplitz(mean, *rho)?,
                };
                Ok(AnalyticPrior::Gaussian(prior))
            }
            PriorConfig::Gmm {
                weights,
                means,
                variances,
            } => {
                let means = means.iter().map(|m| DVector::from_vec(m.clone())).collect();
                Ok(AnalyticPrior::Gmm(GmmPrior::new(
                    weights.clone(),
                    means,
                    variances.clone(),
                )?))
            }
        }
    }

    fn build_operator(config: &OperatorConfig, base_dir: &Path) -> Result<ForwardOperator> {
        Ok(match config {
            OperatorConfig::Dense { matrix } => {
                if matrix.is_empty() || matrix.iter().any(|r| r.len() != matrix[0].len()) {
                    return Err(Error::Config(
                        "operator.matrix rows must be nonempty and equal length".into(),
                    ));
                }
                let (m, d) = (matrix.len(), matrix[0].len());
                ForwardOperator::DenseLinear(DMatrix::from_fn(m, d, |i, j| matrix[i][j]))
            }
            OperatorConfig::Mask { keep, dim } => ForwardOperator::mask(keep.clone(), *dim)?,
            OperatorConfig::CircularBlur {
                kernel,
                kernel_file,
                dim,
            } => {
                let taps = match (kernel, kernel_file) {
                    (Some(k), None) => k.clone(),
                    (None, Some(file)) => read_kernel_file(&base_dir.join(file))?,
                    _ => {
                        return Err(Error::Config(
                            "operator needs exactly one of kernel, kernel_file".into(),
                        ))
                    }
                };
                ForwardOperator::circular_blur(taps, *dim)?
            }
            OperatorConfig::Decimate { factor, dim } => ForwardOperator::decimate(*factor, *dim)?,
            OperatorConfig::ClipScale { c, lo, hi, dim } => ForwardOperator::ClipScale {
                c: *c,
                lo: *lo,
                hi: *hi,
                dim: *dim,
            },
            OperatorConfig::Compose { parts } => {
                let parts = parts
                    .iter()
                    .map(|p| Self::build_operator(p, base_dir))
                    .collect::<Result<Vec<_>>>()?;
                if parts.is_empty() {
                    return Err(Error::Config("operator.parts must be nonempty".into()));
                }
                ForwardOperator::Compose(parts)
            }
        })
    }

    /// Construct every component. `base_dir` resolves referenced files.
    pub fn build(&self, base_dir: &Path) -> Result<Experiment> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        let prior = self.build_prior()?;
        let operator = Self::build_operator(&self.operator, base_dir)?;
        if operator.input_dim() != prior.dim() {
            return Err(Error::Config(format!(
                "operator.input_dim = {} does not match prior dimension {}",
                operator.input_dim(),
                prior.dim()
            )));
        }
        let codec = match &self.codec {
            CodecConfig::Identity => LinearCodec::identity(),
            CodecConfig::Rotation { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                LinearCodec::random_rotation(prior.dim(), &mut rng)
            }
        };

        if self.task.sigma_y <= 0.0 {
            return Err(Error::Config(format!(
                "task.sigma_y = {} must be > 0",
                self.task.sigma_y
            )));
        }
        let noise_seed = self.task.noise_seed.unwrap_or(self.seed.wrapping_add(1));
        let task = match (
            &self.task.observation,
            &self.task.x_true,
            self.task.x_true_from_prior,
        ) {
            (Some(y), None, false) => ForwardTask::new(
                operator,
                self.task.sigma_y,
                DVector::from_vec(y.clone()),
                None,
            )?,
            (None, Some(x), false) => {
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                synthesize_observation(
                    operator,
                    DVector::from_vec(x.clone()),
                    self.task.sigma_y,
                    &mut rng,
                )?
            }
            (None, None, true) => {
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                let x_true = prior.sample(&mut rng);
                synthesize_observation(operator, x_true, self.task.sigma_y, &mut rng)?
            }
            _ => {
                return Err(Error::Config(
                    "task needs exactly one of observation, x_true, x_true_from_prior".into(),
                ))
            }
        };

        let schedule = NoiseSchedule::new(self.schedule.noise, self.schedule.t_max)?;
        let t_start = schedule.index_of(self.gng.t_star);
        let grid = build_grid(self.schedule.strategy, self.schedule.num_steps, t_start)?;
        let gng = GngConfig {
            schedule,
            t_star: self.gng.t_star,
            warm_start_iters: self.gng.warm_start_iters,
            grid,
            ddim_substeps: self.gng.ddim_substeps,
            eta_interleave: self.gng.eta_interleave,
            phase1_opt: self.gng.phase1.to_spec(),
            phase2_opt: self.gng.phase2.to_spec(),
            renoise_std_mode: self.gng.renoise_std_mode,
            seed: self.seed,
        };
        gng.validate()?;

        let echo = serde_json::to_value(self)
            .map_err(|e| Error::Config(format!("config echo serialization: {e}")))?;
        Ok(Experiment {
            name: self.name.clone(),
            prior,
            codec,
            task,
            gng,
            baseline: self.baseline,
            num_samples: self.num_samples,
            out_dir: self.out_dir.clone(),
            echo,
        })
    }
}

/// Flat text kernel: one value per line, `#` comments allowed.
fn read_kernel_file(path: &Path) -> Result<Vec<f64>> {
    let body = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read kernel file {}: {e}", path.display())))?;
    let mut taps = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        taps.push(trimmed.parse::<f64>().map_err(|e| {
            Error::Config(format!(
                "{}:{}: bad kernel value {trimmed:?}: {e}",
                path.display(),
                lineno + 1
            ))
        })?);
    }
    if taps.is_empty() {
        return Err(Error::Config(format!(
            "kernel file {} holds no values",
            path.display()
        )));
    }
    Ok(taps)
}
