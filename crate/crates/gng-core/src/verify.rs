//! Executable checks for the fixed-point theory behind the sampler.
//!
//! The guided phase, frozen at one timestep and stripped of noise, is the
//! relaxed iteration `x^{k+1} = (1 - rho) x^k + rho T(x^k)` with
//! `T = P_lambda . D`, where `P_lambda` is the proximal map of the
//! data-fidelity term and `D` an abstract prior-prediction operator. The
//! statements checked here, each on affine test maps whose Lipschitz
//! constants are exactly computable:
//!
//! - `P_lambda` is nonexpansive for convex data terms, and
//!   `1/(1 + mu/lambda)`-Lipschitz when the data term is mu-strongly convex.
//! - For nonexpansive `D` the relaxed iteration converges to a fixed point
//!   of `T`, with nonincreasing step norms.
//! - When `q = L/(1 + mu/lambda) < 1` the plain iteration converges
//!   linearly at rate q.
//! - With per-step errors bounded by eps, the iterate error obeys
//!   `a_k <= q^k a_0 + eps (1 - q^k)/(1 - q)` and its tail stays below
//!   `eps/(1 - q)`.
//! - Re-noising two means with one shared Gaussian draw is the optimal
//!   coupling: its squared-displacement cost is exactly `||m - m'||^2`,
//!   never above the independent coupling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dcopt::DataConsistency;
use crate::error::{Error, Result};
use crate::operator::{ForwardOperator, ForwardTask};

/// Parameters of one relaxed fixed-point run.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointSpec {
    /// Lipschitz constant of the prior-prediction map.
    pub prior_lipschitz: f64,
    pub lambda_t: f64,
    /// Relaxation in (0, 1]; 1 is the plain iteration.
    pub rho: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

/// Trajectory of a fixed-point run. Non-convergence is reported through
/// `converged`, never as an error.
#[derive(Debug, Clone)]
pub struct KmTrace {
    pub fixed_point: DVector<f64>,
    pub iterates: Vec<DVector<f64>>,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

type VecMap<'m> = dyn Fn(&DVector<f64>) -> DVector<f64> + 'm;

/// Run `x <- (1 - rho) x + rho prox(denoise(x))` until the step norm drops
/// below the tolerance or the iteration budget runs out.
pub fn km_iterate(
    denoise_map: &VecMap,
    prox_map: &VecMap,
    spec: &FixedPointSpec,
    x0: &DVector<f64>,
) -> Result<KmTrace> {
    if !(spec.rho > 0.0 && spec.rho <= 1.0) {
        return Err(Error::Parameter(format!(
            "relaxation rho = {} must lie in (0, 1]",
            spec.rho
        )));
    }
    if spec.lambda_t <= 0.0 {
        return Err(Error::Parameter(format!(
            "lambda_t = {} must be > 0",
            spec.lambda_t
        )));
    }
    let mut x = x0.clone();
    let mut iterates = vec![x.clone()];
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..spec.max_iters {
        let t_x = prox_map(&denoise_map(&x));
        let next = &x * (1.0 - spec.rho) + t_x * spec.rho;
        let step = (&next - &x).norm();
        residuals.push(step);
        x = next;
        iterates.push(x.clone());
        if step <= spec.tolerance {
            converged = true;
            break;
        }
    }
    Ok(KmTrace {
        fixed_point: x,
        iterates,
        residuals,
        converged,
    })
}

/// Least-squares geometric rate of a residual sequence, fitted on the log
/// of its final half (the transient is excluded).
pub fn fit_geometric_rate(residuals: &[f64]) -> Option<f64> {
    let tail: Vec<(f64, f64)> = residuals
        .iter()
        .enumerate()
        .skip(residuals.len() / 2)
        .filter(|(_, r)| **r > 1e-300)
        .map(|(i, r)| (i as f64, r.ln()))
        .collect();
    if tail.len() < 2 {
        return None;
    }
    let n = tail.len() as f64;
    let tbar = tail.iter().map(|(t, _)| t).sum::<f64>() / n;
    let ybar = tail.iter().map(|(_, y)| y).sum::<f64>() / n;
    let num: f64 = tail.iter().map(|(t, y)| (t - tbar) * (y - ybar)).sum();
    let den: f64 = tail.iter().map(|(t, _)| (t - tbar) * (t - tbar)).sum();
    if den == 0.0 {
        return None;
    }
    Some((num / den).exp())
}

/// Verify the inexact-update bound on a measured error sequence.
///
/// `errors[k]` is `||x^k - x*||` along an iteration of a q-contraction with
/// per-step perturbations bounded by eps. Checks the unrolled bound
/// `a_k <= q^k a_0 + eps (1 - q^k)/(1 - q) + tolerance` at every k and the
/// tail bound `eps/(1 - q) + tolerance` over the final quarter.
pub fn check_inexact_bound(q: f64, eps: f64, errors: &[f64], tolerance: f64) -> Result<bool> {
    if q >= 1.0 {
        return Err(Error::Inapplicable { q });
    }
    if errors.is_empty() {
        return Err(Error::Parameter("empty error sequence".into()));
    }
    let a0 = errors[0];
    let unrolled_ok = errors.iter().enumerate().all(|(k, a)| {
        let qk = q.powi(k as i32);
        *a <= qk * a0 + eps * (1.0 - qk) / (1.0 - q) + tolerance
    });
    let tail_start = errors.len() - errors.len() / 4 - 1;
    let tail_ok = errors[tail_start..]
        .iter()
        .all(|a| *a <= eps / (1.0 - q) + tolerance);
    Ok(unrolled_ok && tail_ok)
}

/// How the two re-noised samples share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    /// One draw reused for both means.
    Shared,
    /// Independent draws.
    Independent,
}

/// Monte-Carlo estimate of E||X - X'||^2 for X ~ N(mean_a, L L^T),
/// X' ~ N(mean_b, L L^T) under the chosen coupling.
pub fn coupling_cost<R: Rng + ?Sized>(
    mean_a: &DVector<f64>,
    mean_b: &DVector<f64>,
    cov_chol: &DMatrix<f64>,
    rng: &mut R,
    n: usize,
    mode: CouplingMode,
) -> f64 {
    let d = mean_a.len();
    let mut total = 0.0;
    for _ in 0..n {
        let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = mean_a + cov_chol * &xi;
        let x_prime = match mode {
            CouplingMode::Shared => mean_b + cov_chol * &xi,
            CouplingMode::Independent => {
                let xi2 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                mean_b + cov_chol * &xi2
            }
        };
        total += (x - x_prime).norm_squared();
    }
    total / n as f64
}

/// Outcome of one named check, with the measured quantities inline.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub details: String,
}

impl CheckReport {
    fn new(name: &str, passed: bool, details: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            details,
        }
    }
}

fn random_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Run every theorem check with exactly computable test maps.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // Shared setup: A = I in R^4, so mu = 1/sigma_y^2 exactly.
    let sigma_y = 0.8;
    let mu = 1.0 / (sigma_y * sigma_y);
    let d = 4;
    let y = random_vec(&mut rng, d, 1.0);
    let identity_task = ForwardTask::new(
        ForwardOperator::DenseLinear(DMatrix::identity(d, d)),
        sigma_y,
        y.clone(),
        None,
    )?;
    let dc_identity = DataConsistency::new(&identity_task)?;

    // 1. Nonexpansiveness of the prox on random pairs (general linear task).
    {
        let a = DMatrix::from_fn(3, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let task = ForwardTask::new(
            ForwardOperator::DenseLinear(a),
            0.6,
            random_vec(&mut rng, 3, 1.0),
            None,
        )?;
        let dc = DataConsistency::new(&task)?;
        let lambda_t = 0.7;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let v1 = random_vec(&mut rng, d, 2.0);
            let v2 = random_vec(&mut rng, d, 2.0);
            let p1 = dc.prox(&v1, lambda_t, true)?;
            let p2 = dc.prox(&v2, lambda_t, true)?;
            let ratio = (&p1 - &p2).norm() / (&v1 - &v2).norm().max(1e-300);
            worst = worst.max(ratio);
        }
        reports.push(CheckReport::new(
            "prox_nonexpansive",
            worst <= 1.0 + 1e-9,
            format!("max Lipschitz ratio over 100 pairs = {worst:.12}"),
        ));
    }

    // 2. Strong-convexity Lipschitz bound 1/(1 + mu/lambda).
    {
        let lambda_t = 0.9;
        let bound = 1.0 / (1.0 + mu / lambda_t);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let v1 = random_vec(&mut rng, d, 2.0);
            let v2 = random_vec(&mut rng, d, 2.0);
            let p1 = dc_identity.prox(&v1, lambda_t, true)?;
            let p2 = dc_identity.prox(&v2, lambda_t, true)?;
            let ratio = (&p1 - &p2).norm() / (&v1 - &v2).norm().max(1e-300);
            worst = worst.max(ratio);
        }
        reports.push(CheckReport::new(
            "prox_strong_convexity_lipschitz",
            worst <= bound + 1e-9,
            format!("max ratio {worst:.12} vs bound {bound:.12}"),
        ));
    }

    // 3. Linear convergence of the plain iteration at rate q = L/(1+mu/lambda).
    {
        let lambda_t = 2.0;
        let prior_lipschitz = 0.95;
        let q = prior_lipschitz / (1.0 + mu / lambda_t);
        let bias = random_vec(&mut rng, d, 0.5);
        let denoise_map = move |x: &DVector<f64>| x * prior_lipschitz + &bias;
        let prox_map = |v: &DVector<f64>| dc_identity.prox(v, lambda_t, true).unwrap();
        let spec = FixedPointSpec {
            prior_lipschitz,
            lambda_t,
            rho: 1.0,
            max_iters: 200,
            tolerance: 1e-13,
        };
        let trace = km_iterate(&denoise_map, &prox_map, &spec, &random_vec(&mut rng, d, 3.0))?;
        let fitted = fit_geometric_rate(&trace.residuals).unwrap_or(f64::NAN);
        reports.push(CheckReport::new(
            "km_linear_rate",
            fitted <= q + 0.02,
            format!(
                "fitted rate {fitted:.6} vs q {q:.6} (converged = {})",
                trace.converged
            ),
        ));
    }

    // 4. KM convergence for a nonexpansive prior map with rho in (0, 1):
    //    D = identity gives T = prox, whose fixed point is y itself.
    {
        let lambda_t = 1.0;
        let denoise_map = |x: &DVector<f64>| x.clone();
        let prox_map = |v: &DVector<f64>| dc_identity.prox(v, lambda_t, true).unwrap();
        let spec = FixedPointSpec {
            prior_lipschitz: 1.0,
            lambda_t,
            rho: 0.5,
            max_iters: 2000,
            tolerance: 1e-12,
        };
        let trace = km_iterate(&denoise_map, &prox_map, &spec, &random_vec(&mut rng, d, 3.0))?;
        let at_fixed_point =
            (prox_map(&denoise_map(&trace.fixed_point)) - &trace.fixed_point).norm();
        let monotone = trace.residuals.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        let reaches_y = (&trace.fixed_point - &y).norm() <= 1e-6;
        reports.push(CheckReport::new(
            "km_convergence",
            trace.converged && at_fixed_point <= 1e-8 && monotone && reaches_y,
            format!(
                "||T(x) - x|| = {at_fixed_point:.3e}, residuals monotone = {monotone}, \
                 distance to analytic fixed point = {:.3e}",
                (&trace.fixed_point - &y).norm()
            ),
        ));
    }

    // 5. A fixed point is stationary from the first iterate.
    {
        let lambda_t = 1.0;
        let denoise_map = |x: &DVector<f64>| x.clone();
        let prox_map = |v: &DVector<f64>| dc_identity.prox(v, lambda_t, true).unwrap();
        let spec = FixedPointSpec {
            prior_lipschitz: 1.0,
            lambda_t,
            rho: 0.7,
            max_iters: 10,
            tolerance: 1e-12,
        };
        let trace = km_iterate(&denoise_map, &prox_map, &spec, &y)?;
        reports.push(CheckReport::new(
            "km_fixed_point_stationary",
            trace.converged && trace.residuals[0] <= 1e-12,
            format!("first step norm = {:.3e}", trace.residuals[0]),
        ));
    }

    // 6. Inexact updates: perturbed q-contraction stays within eps/(1-q).
    {
        let (q, eps) = (0.5, 0.01);
        let x_star = random_vec(&mut rng, d, 1.0);
        let mut x = &x_star + random_vec(&mut rng, d, 2.0);
        let mut errors = vec![(&x - &x_star).norm()];
        for _ in 0..120 {
            let mut e = random_vec(&mut rng, d, 1.0);
            e *= eps / e.norm(); // exactly eps-long perturbation
            x = &x_star + (&x - &x_star) * q + e;
            errors.push((&x - &x_star).norm());
        }
        let ok = check_inexact_bound(q, eps, &errors, 1e-6)?;
        let tail = errors[errors.len() - 20..]
            .iter()
            .cloned()
            .fold(0.0_f64, f64::max);
        reports.push(CheckReport::new(
            "inexact_update_tail",
            ok && tail <= eps / (1.0 - q) + 1e-6,
            format!("max tail error {tail:.6} vs bound {:.6}", eps / (1.0 - q)),
        ));
    }

    // 7-9. Optimal coupling of equal-covariance Gaussians.
    {
        let m_a = random_vec(&mut rng, 3, 1.0);
        let m_b = random_vec(&mut rng, 3, 1.0);
        let gap = (&m_a - &m_b).norm_squared();
        let chol = DMatrix::identity(3, 3);

        let shared = coupling_cost(&m_a, &m_b, &chol, &mut rng, 1000, CouplingMode::Shared);
        reports.push(CheckReport::new(
            "coupling_shared_exact",
            (shared - gap).abs() <= 1e-12 * gap.max(1.0),
            format!("shared cost {shared:.12} vs ||m - m'||^2 = {gap:.12}"),
        ));

        let n = 100_000;
        let independent = coupling_cost(&m_a, &m_b, &chol, &mut rng, n, CouplingMode::Independent);
        let expected = gap + 2.0 * 3.0; // + 2 tr(I_3)
        let se = (24.0_f64 / n as f64).sqrt();
        reports.push(CheckReport::new(
            "coupling_independent_cost",
            (independent - expected).abs() <= 3.0 * se + 0.05,
            format!(
                "independent cost {independent:.4} vs expected {expected:.4} (3se = {:.4})",
                3.0 * se
            ),
        ));

        let mut dominated = true;
        for _ in 0..5 {
            let ma = random_vec(&mut rng, 3, 1.5);
            let mb = random_vec(&mut rng, 3, 1.5);
            let s = coupling_cost(&ma, &mb, &chol, &mut rng, 2000, CouplingMode::Shared);
            let i = coupling_cost(&ma, &mb, &chol, &mut rng, 2000, CouplingMode::Independent);
            dominated &= s <= i;
        }
        reports.push(CheckReport::new(
            "coupling_shared_dominates",
            dominated,
            "shared cost <= independent cost on every tested configuration".into(),
        ));
    }

    Ok(reports)
}
