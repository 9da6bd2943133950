//! The two-phase guess-and-guide sampler and its guidance baseline.
//!
//! Phase 1 (warm start) iterates predict / optimize / re-noise at a fixed
//! moderate noise level t_*, producing an approximate sample from the
//! posterior time-marginal at t_*. Phase 2 walks a sparse decreasing grid
//! t_M = t_* > ... > t_1, alternating a stochastic DDIM jump, a
//! data-consistency optimization anchored at the decoded denoiser
//! prediction, a noise-preserving re-noise back to the higher level, and n
//! interleaved DDIM substeps. No step ever differentiates through the
//! denoiser or codec: gradients flow only through the forward operator, and
//! the `denoiser_grad_calls` counter stays at zero by construction.
//!
//! Re-noising uses the blended-noise coupling: with `eps_k` the predicted
//! noise of the current state and `eps` fresh,
//!
//! ```text
//! phase 1:  z' = alpha_* mu_k + std * eps,
//!           mu_k = alpha_* z0_opt + sigma_* z0_hat + sigma_* eps_k
//! phase 2:  z' = mu_{k+1} + std * eps,
//!           mu_{k+1} = alpha_{k+1} z0_opt + sigma_{k+1} alpha_{k+1} eps_k
//! ```
//!
//! which expands to `alpha (alpha z0_opt + sigma z0_hat) + sigma (alpha
//! eps_k + sigma eps)` in phase 1 and `alpha z0_opt + sigma (alpha eps_k +
//! sigma eps)` in phase 2 when `std = sigma^2` (the literal form; the
//! re-noise covariance is then sigma^4 I). Because that injects vanishing
//! noise at small t, `std = sigma` is available as an alternative matching
//! the forward kernel; both identities are unit-tested to 1e-12.
//!
//! The baseline sampler (`run_dps_baseline`) runs the full reverse
//! trajectory from t = 1 with per-step likelihood guidance computed by
//! backpropagating through the denoiser (via its exact Jacobian-vector
//! product) and the codec, as gradient-based posterior samplers do; it
//! exists to make the cost asymmetry measurable.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dcopt::{lambda_at, DataConsistency, OptimizeSpec, Solver};
use crate::error::{Error, Result};
use crate::operator::ForwardTask;
use crate::prior::{AnalyticPrior, LinearCodec};
use crate::report::{Aggregate, RunReport, SampleRow};
use crate::schedule::{NoiseSchedule, SchedulePoint, TimestepGrid};

/// Instrumentation counters, monotone nondecreasing along a trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Denoiser evaluations E[X_0 | X_t].
    pub denoiser_calls: u64,
    /// Backpropagations through the denoiser (Jacobian-vector products).
    pub denoiser_grad_calls: u64,
    /// Gradient evaluations of the data term (through the operator only).
    pub operator_grad_calls: u64,
}

impl Counters {
    pub fn merge(&mut self, other: &Counters) {
        self.denoiser_calls += other.denoiser_calls;
        self.denoiser_grad_calls += other.denoiser_grad_calls;
        self.operator_grad_calls += other.operator_grad_calls;
    }
}

/// Standard deviation injected by the re-noising draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenoiseStdMode {
    /// std = sigma_t^2, the literal re-noising covariance of the algorithm.
    PaperSigmaSquared,
    /// std = sigma_t, matching the forward kernel.
    StandardSigma,
}

impl RenoiseStdMode {
    pub fn std(&self, point: SchedulePoint) -> f64 {
        match self {
            RenoiseStdMode::PaperSigmaSquared => point.sigma * point.sigma,
            RenoiseStdMode::StandardSigma => point.sigma,
        }
    }
}

/// Full sampler configuration.
#[derive(Debug, Clone)]
pub struct GngConfig {
    pub schedule: NoiseSchedule,
    /// Warm-start noise level in (0, 1); the grid must end at its index.
    pub t_star: f64,
    /// Warm-start iterations N.
    pub warm_start_iters: usize,
    pub grid: TimestepGrid,
    /// Interleaved DDIM steps n per grid segment.
    pub ddim_substeps: usize,
    /// Stochasticity knob for DDIM transitions, eta_t = eta * sigma_t.
    pub eta_interleave: f64,
    pub phase1_opt: OptimizeSpec,
    pub phase2_opt: OptimizeSpec,
    pub renoise_std_mode: RenoiseStdMode,
    pub seed: u64,
}

impl GngConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_star > 0.0 && self.t_star < 1.0) {
            return Err(Error::Config(format!(
                "t_star = {} must lie strictly inside (0, 1)",
                self.t_star
            )));
        }
        if !(0.0..=1.0).contains(&self.eta_interleave) {
            return Err(Error::Config(format!(
                "eta_interleave = {} must lie in [0, 1]",
                self.eta_interleave
            )));
        }
        if self.ddim_substeps == 0 {
            return Err(Error::Config("ddim_substeps must be at least 1".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("timestep grid is empty".into()));
        }
        let expected = self.schedule.index_of(self.t_star);
        if self.grid.t_start() != expected {
            return Err(Error::Config(format!(
                "grid ends at index {} but t_star = {} maps to index {expected}",
                self.grid.t_start(),
                self.t_star
            )));
        }
        if *self.grid.steps().last().unwrap() > self.schedule.t_max {
            return Err(Error::Config("grid exceeds the schedule resolution".into()));
        }
        // Each walked segment needs room for n distinct integer substeps.
        for (k, delta) in self.grid.deltas().iter().enumerate().skip(1) {
            if *delta < self.ddim_substeps {
                return Err(Error::Config(format!(
                    "grid segment {k} has length {delta} < ddim_substeps = {}",
                    self.ddim_substeps
                )));
            }
        }
        Ok(())
    }
}

/// One stochastic DDIM transition from a higher to a lower grid index.
///
/// `z' = alpha_to D(z) + sqrt(sigma_to^2 - eta_to^2) eps_hat(z) + eta_to W`
/// with `eta_to = eta * sigma_to`; `eta = 0` is the deterministic map and
/// `eta = 1` zeroes the noise-prediction coefficient exactly.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Rng + ?Sized>(
    prior: &AnalyticPrior,
    schedule: &NoiseSchedule,
    from_index: usize,
    to_index: usize,
    z: &DVector<f64>,
    eta: f64,
    rng: &mut R,
    counters: &mut Counters,
) -> Result<DVector<f64>> {
    if to_index >= from_index {
        return Err(Error::Parameter(format!(
            "ddim transition needs to_index < from_index, got {to_index} >= {from_index}"
        )));
    }
    let from = schedule.eval(from_index)?;
    let to = schedule.eval(to_index)?;
    if from.sigma == 0.0 {
        return Err(Error::DegenerateSchedule);
    }
    let denoised = prior.denoise(from, z)?;
    counters.denoiser_calls += 1;
    let eps_hat = (z - &denoised * from.alpha) / from.sigma;
    let eta_to = eta * to.sigma;
    let eps_coeff = (to.sigma * to.sigma - eta_to * eta_to).max(0.0).sqrt();
    let mut next = denoised * to.alpha + eps_hat * eps_coeff;
    if eta_to > 0.0 {
        let w = DVector::from_fn(z.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        next += w * eta_to;
    }
    Ok(next)
}

/// Warm-start re-noise mean `mu_k = alpha z0_opt + sigma z0_hat + sigma eps_k`.
pub fn warm_start_renoise_mean(
    point: SchedulePoint,
    z0_opt: &DVector<f64>,
    z0_hat: &DVector<f64>,
    eps_k: &DVector<f64>,
) -> DVector<f64> {
    z0_opt * point.alpha + z0_hat * point.sigma + eps_k * point.sigma
}

/// Guided-phase re-noise mean `mu = alpha z0_opt + sigma alpha eps_k`.
pub fn guided_renoise_mean(
    point: SchedulePoint,
    z0_opt: &DVector<f64>,
    eps_k: &DVector<f64>,
) -> DVector<f64> {
    z0_opt * point.alpha + eps_k * (point.sigma * point.alpha)
}

/// Pixel-space embedding of the observation.
///
/// Square operators embed y directly. Dimension-reducing linear operators
/// use the adjoint pseudo-fill `A^T y`, with coordinates the operator never
/// touches (all-zero columns) reset to the prior mean. Dimension-reducing
/// nonlinear operators have no defined embedding.
pub fn embed_observation(prior: &AnalyticPrior, task: &ForwardTask) -> Result<DVector<f64>> {
    let d = task.operator.input_dim();
    if task.operator.output_dim() == d {
        return Ok(task.y.clone());
    }
    if !task.operator.is_linear() {
        return Err(Error::Config(
            "observation embedding undefined: nonlinear operator with reduced output".into(),
        ));
    }
    let a = task.operator.to_matrix()?;
    let mut embedded = task.operator.adjoint(&task.y)?;
    let prior_mean = prior.mean();
    for j in 0..d {
        if a.column(j).norm() == 0.0 {
            embedded[j] = prior_mean[j];
        }
    }
    Ok(embedded)
}

/// Guess-and-guide sampler bound to one task.
pub struct GngSampler<'a> {
    prior: &'a AnalyticPrior,
    codec: &'a LinearCodec,
    task: &'a ForwardTask,
    config: &'a GngConfig,
    dc: DataConsistency<'a>,
}

impl<'a> GngSampler<'a> {
    pub fn new(
        prior: &'a AnalyticPrior,
        codec: &'a LinearCodec,
        task: &'a ForwardTask,
        config: &'a GngConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = task.operator.input_dim();
        if prior.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: prior.dim(),
            });
        }
        codec.encode(&DVector::zeros(d))?; // dimension probe
        let dc = DataConsistency::new(task)?;
        Ok(Self {
            prior,
            codec,
            task,
            config,
            dc,
        })
    }

    fn grad_evals(spec: &OptimizeSpec) -> u64 {
        match spec.solver {
            Solver::GradientDescent => spec.iterations as u64,
            Solver::ClosedForm => 0,
        }
    }

    /// Phase 1: N iterations of predict / optimize / re-noise at t_*,
    /// starting from the noised observation embedding. Returns the latent
    /// at t_*.
    pub fn phase1_warm_start<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        counters: &mut Counters,
    ) -> Result<DVector<f64>> {
        let point = self.config.schedule.eval(self.config.grid.t_start())?;
        let y_embedded = embed_observation(self.prior, self.task)?;
        let z0_mean = self.codec.encode(&y_embedded)?;
        let d = z0_mean.len();
        let eps0 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut z = &z0_mean * point.alpha + eps0 * point.sigma;

        let std = self.config.renoise_std_mode.std(point);
        for _ in 0..self.config.warm_start_iters {
            let z0_hat = self.prior.denoise(point, &z)?;
            counters.denoiser_calls += 1;
            let eps_k = (&z - &z0_hat * point.alpha) / point.sigma;
            let x0_hat = self.codec.decode(&z0_hat)?;
            // Warm start optimizes the plain observation objective.
            let x0 = self
                .dc
                .optimize(&x0_hat, &x0_hat, &self.config.phase1_opt, 0.0)?;
            counters.operator_grad_calls += Self::grad_evals(&self.config.phase1_opt);
            let z0_opt = self.codec.encode(&x0)?;
            let mu = warm_start_renoise_mean(point, &z0_opt, &z0_hat, &eps_k);
            let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            z = mu * point.alpha + eps * std;
        }
        Ok(z)
    }

    /// Phase 2: guided denoising down the grid. Returns the decoded final
    /// prediction x_hat.
    pub fn phase2_guided_denoise<R: Rng + ?Sized>(
        &self,
        z_at_tstar: DVector<f64>,
        rng: &mut R,
        counters: &mut Counters,
    ) -> Result<DVector<f64>> {
        let steps = self.config.grid.steps();
        let m = steps.len();
        let eta = self.config.eta_interleave;
        let mut z = z_at_tstar;

        for k in (1..m).rev() {
            let (hi, lo) = (steps[k], steps[k - 1]);
            let point_lo = self.config.schedule.eval(lo)?;
            let point_hi = self.config.schedule.eval(hi)?;

            // Jump down, predict, and pull the prediction toward the data.
            let z_jump = ddim_step(
                self.prior,
                &self.config.schedule,
                hi,
                lo,
                &z,
                eta,
                rng,
                counters,
            )?;
            let z0_tilde = self.prior.denoise(point_lo, &z_jump)?;
            counters.denoiser_calls += 1;
            let eps_k = (&z_jump - &z0_tilde * point_lo.alpha) / point_lo.sigma;
            let x0_tilde = self.codec.decode(&z0_tilde)?;
            let lambda_t = lambda_at(point_lo, &self.config.phase2_opt.lambda)?;
            let x0_opt = self
                .dc
                .optimize(&x0_tilde, &x0_tilde, &self.config.phase2_opt, lambda_t)?;
            counters.operator_grad_calls += Self::grad_evals(&self.config.phase2_opt);
            let z0_opt = self.codec.encode(&x0_opt)?;

            // Re-noise to t_{k+1}, preserving the predicted noise.
            let mu = guided_renoise_mean(point_hi, &z0_opt, &eps_k);
            let std = self.config.renoise_std_mode.std(point_hi);
            let eps = DVector::from_fn(mu.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut cur = mu + eps * std;

            // n interleaved DDIM steps back down to t_k.
            let n = self.config.ddim_substeps;
            let mut from = hi;
            for j in 1..=n {
                let target = (hi - ((hi - lo) * j + n / 2) / n).max(lo);
                if j == n {
                    debug_assert_eq!(target, lo);
                }
                if target >= from {
                    continue;
                }
                cur = ddim_step(
                    self.prior,
                    &self.config.schedule,
                    from,
                    target,
                    &cur,
                    eta,
                    rng,
                    counters,
                )?;
                from = target;
            }
            z = cur;
        }

        let point_final = self.config.schedule.eval(steps[0])?;
        let z0_final = self.prior.denoise(point_final, &z)?;
        counters.denoiser_calls += 1;
        self.codec.decode(&z0_final)
    }

    /// Run both phases for sample `index` with its own pair of RNG streams.
    pub fn sample_one(&self, index: u64) -> Result<(DVector<f64>, Counters)> {
        let mut counters = Counters::default();
        let mut rng1 = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng1.set_stream(2 * index);
        let z_star = self.phase1_warm_start(&mut rng1, &mut counters)?;
        let mut rng2 = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng2.set_stream(2 * index + 1);
        let x_hat = self.phase2_guided_denoise(z_star, &mut rng2, &mut counters)?;
        Ok((x_hat, counters))
    }
}

/// Execution options for sample loops.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Force the sequential path even when the `parallel` feature is on.
    /// Outputs are bit-identical either way.
    pub sequential: bool,
}

fn map_samples<F>(
    num_samples: usize,
    options: RunOptions,
    f: F,
) -> Result<Vec<(DVector<f64>, Counters)>>
where
    F: Fn(u64) -> Result<(DVector<f64>, Counters)> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !options.sequential {
            return (0..num_samples as u64)
                .into_par_iter()
                .map(f)
                .collect::<Result<Vec<_>>>();
        }
    }
    let _ = &options;
    (0..num_samples as u64).map(f).collect()
}

fn assemble_report(
    task: &ForwardTask,
    results: Vec<(DVector<f64>, Counters)>,
    rng_scheme: &str,
    wall_time_ms: f64,
) -> Result<RunReport> {
    let mut counters = Counters::default();
    let mut rows = Vec::with_capacity(results.len());
    let mut samples = Vec::with_capacity(results.len());
    let mut residual_sum = 0.0;
    let mut mse_sum = 0.0;
    for (i, (x_hat, c)) in results.into_iter().enumerate() {
        let residual_norm = (task.operator.apply(&x_hat)? - &task.y).norm();
        residual_sum += residual_norm;
        let mse_to_truth = task.x_true.as_ref().map(|xt| {
            let err = (&x_hat - xt).norm_squared() / xt.len() as f64;
            mse_sum += err;
            err
        });
        rows.push(SampleRow {
            sample_id: i,
            mse_to_truth,
            residual_norm,
            posterior_mean_err: None,
            posterior_cov_err: None,
            denoiser_calls: c.denoiser_calls,
            denoiser_grad_calls: c.denoiser_grad_calls,
        });
        counters.merge(&c);
        samples.push(x_hat.iter().cloned().collect::<Vec<f64>>());
    }
    let n = rows.len().max(1) as f64;
    let aggregate = Aggregate {
        sample_mean: mean_of(&samples),
        sample_std: std_of(&samples),
        residual_norm_mean: residual_sum / n,
        mse_to_truth_mean: task.x_true.as_ref().map(|_| mse_sum / n),
        posterior_mean_err: None,
        posterior_cov_err: None,
    };
    Ok(RunReport {
        config_echo: serde_json::Value::Null,
        rng_scheme: rng_scheme.to_string(),
        samples,
        rows,
        counters,
        aggregate,
        wall_time_ms,
    })
}

fn mean_of(samples: &[Vec<f64>]) -> Vec<f64> {
    if samples.is_empty() {
        return Vec::new();
    }
    let d = samples[0].len();
    let mut m = vec![0.0; d];
    for s in samples {
        for (mi, si) in m.iter_mut().zip(s) {
            *mi += si;
        }
    }
    for mi in &mut m {
        *mi /= samples.len() as f64;
    }
    m
}

fn std_of(samples: &[Vec<f64>]) -> Vec<f64> {
    if samples.len() < 2 {
        return vec![0.0; samples.first().map_or(0, Vec::len)];
    }
    let mean = mean_of(samples);
    let d = mean.len();
    let mut v = vec![0.0; d];
    for s in samples {
        for ((vi, si), mi) in v.iter_mut().zip(s).zip(&mean) {
            let r = si - mi;
            *vi += r * r;
        }
    }
    v.iter()
        .map(|vi| (vi / (samples.len() as f64 - 1.0)).sqrt())
        .collect()
}

/// Run the full sampler for `num_samples` independent samples.
///
/// Per-sample RNG streams are derived from the seed by counter, so the
/// report is bit-identical across runs and across the parallel and
/// sequential paths. Every report from this function has
/// `counters.denoiser_grad_calls == 0`.
pub fn run_gng(
    prior: &AnalyticPrior,
    codec: &LinearCodec,
    task: &ForwardTask,
    config: &GngConfig,
    num_samples: usize,
) -> Result<RunReport> {
    run_gng_with(prior, codec, task, config, num_samples, RunOptions::default())
}

/// [`run_gng`] with explicit execution options.
pub fn run_gng_with(
    prior: &AnalyticPrior,
    codec: &LinearCodec,
    task: &ForwardTask,
    config: &GngConfig,
    num_samples: usize,
    options: RunOptions,
) -> Result<RunReport> {
    let start = std::time::Instant::now();
    let sampler = GngSampler::new(prior, codec, task, config)?;
    let results = map_samples(num_samples, options, |i| sampler.sample_one(i))?;
    let mut report = assemble_report(
        task,
        results,
        "chacha8(seed), stream = 2*sample + phase",
        start.elapsed().as_secs_f64() * 1e3,
    )?;
    debug_assert_eq!(report.counters.denoiser_grad_calls, 0);
    report.config_echo = serde_json::json!({
        "t_star": config.t_star,
        "warm_start_iters": config.warm_start_iters,
        "ddim_substeps": config.ddim_substeps,
        "eta_interleave": config.eta_interleave,
        "seed": config.seed,
        "num_samples": num_samples,
    });
    Ok(report)
}

/// Reverse-trajectory baseline with per-step likelihood guidance.
///
/// Each of the `steps` transitions evaluates the guidance term
/// `grad_z log l0(y | decode(D_t(z)))` by the chain rule: the data-term
/// gradient through the operator, pulled back through the codec and the
/// denoiser Jacobian (exact and symmetric for analytic priors, so the
/// Jacobian-vector product doubles as the vector-Jacobian product). The
/// correction enters the transition through the guided denoiser
/// `D + scale * (sigma_t^2 / alpha_t) * g`, and `denoiser_grad_calls`
/// increments once per step.
#[allow(clippy::too_many_arguments)]
pub fn run_dps_baseline(
    prior: &AnalyticPrior,
    codec: &LinearCodec,
    task: &ForwardTask,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance_scale: f64,
    seed: u64,
    num_samples: usize,
) -> Result<RunReport> {
    run_dps_baseline_with(
        prior,
        codec,
        task,
        schedule,
        steps,
        guidance_scale,
        seed,
        num_samples,
        RunOptions::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn run_dps_baseline_with(
    prior: &AnalyticPrior,
    codec: &LinearCodec,
    task: &ForwardTask,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance_scale: f64,
    seed: u64,
    num_samples: usize,
    options: RunOptions,
) -> Result<RunReport> {
    if steps == 0 || steps > schedule.t_max {
        return Err(Error::Parameter(format!(
            "steps = {steps} must lie in 1..={}",
            schedule.t_max
        )));
    }
    let d = task.operator.input_dim();
    if prior.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: prior.dim(),
        });
    }
    let start = std::time::Instant::now();
    // Strictly decreasing trajectory indices T_max = i_0 > ... > i_steps = 0.
    let indices: Vec<usize> = (0..=steps)
        .map(|j| (schedule.t_max * (steps - j)) / steps)
        .collect();

    let one_sample = |i: u64| -> Result<(DVector<f64>, Counters)> {
        let mut counters = Counters::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i);
        let mut z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        for w in indices.windows(2) {
            let (from_idx, to_idx) = (w[0], w[1]);
            let from = schedule.eval(from_idx)?;
            let to = schedule.eval(to_idx)?;
            let denoised = prior.denoise(from, &z)?;
            counters.denoiser_calls += 1;

            let x = codec.decode(&denoised)?;
            let gx = task.operator.grad_data_term(&x, &task.y, task.sigma_y)?;
            counters.operator_grad_calls += 1;
            let pulled = codec.encode(&gx)?;
            let guidance = -prior.denoiser_jvp(from, &z, &pulled)?;
            counters.denoiser_grad_calls += 1;

            let coeff = if from.alpha > 0.0 {
                from.sigma * from.sigma / from.alpha
            } else {
                0.0
            };
            let guided = &denoised + &guidance * (guidance_scale * coeff);
            // Ancestral transition: eta = sigma_to.
            z = &guided * to.alpha;
            if to.sigma > 0.0 {
                let noise = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                z += noise * to.sigma;
            }
        }
        let x_hat = codec.decode(&z)?;
        Ok((x_hat, counters))
    };

    let results = map_samples(num_samples, options, one_sample)?;
    let mut report = assemble_report(
        task,
        results,
        "chacha8(seed), stream = sample",
        start.elapsed().as_secs_f64() * 1e3,
    )?;
    report.config_echo = serde_json::json!({
        "baseline": "dps_lite",
        "steps": steps,
        "guidance_scale": guidance_scale,
        "seed": seed,
        "num_samples": num_samples,
    });
    Ok(report)
}
