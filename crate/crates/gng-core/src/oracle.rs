//! Exact posteriors for linear-Gaussian tasks.
//!
//! For a linear operator `A`, Gaussian likelihood `N(y; A x, sigma_y^2 I)`
//! and a Gaussian or Gaussian-mixture prior, the posterior is again a
//! Gaussian mixture with per-component conjugate updates
//!
//! ```text
//! Sigma_j' = (A^T A / sigma_y^2 + Sigma_j^{-1})^{-1}
//! m_j'     = Sigma_j' (A^T y / sigma_y^2 + Sigma_j^{-1} m_j)
//! w_j'     proportional to w_j N(y; A m_j, A Sigma_j A^T + sigma_y^2 I)
//! ```
//!
//! This is the ground truth the sampler is judged against. Pushing the
//! posterior through the forward noising kernel gives the posterior
//! time-marginal at any schedule point (one-directional push only).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operator::ForwardTask;
use crate::prior::{AnalyticPrior, Covariance};
use crate::schedule::SchedulePoint;

/// Gaussian-mixture posterior with explicit component moments.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl ExactPosterior {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Mixture mean sum_j w_j m_j.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, mj) in self.weights.iter().zip(&self.means) {
            m += mj * *w;
        }
        m
    }

    /// Mixture covariance sum_j w_j (Sigma_j + m_j m_j^T) - m m^T.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mean = self.mean();
        let mut cov = DMatrix::zeros(d, d);
        for ((w, mj), sj) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            cov += (sj + mj * mj.transpose()) * *w;
        }
        cov -= &mean * mean.transpose();
        cov
    }
}

fn prior_components(prior: &AnalyticPrior) -> (Vec<f64>, Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    match prior {
        AnalyticPrior::Gaussian(p) => {
            let cov = match p.covariance() {
                Covariance::Isotropic { s2 } => DMatrix::identity(p.dim(), p.dim()) * *s2,
                _ => p.covariance_matrix(),
            };
            (vec![1.0], vec![p.mean().clone()], vec![cov])
        }
        AnalyticPrior::Gmm(p) => {
            let covs = p
                .variances()
                .iter()
                .map(|s2| DMatrix::identity(p.dim(), p.dim()) * *s2)
                .collect();
            (p.weights().to_vec(), p.means().to_vec(), covs)
        }
    }
}

/// Log density of N(x; mean, cov) through a Cholesky factor of cov.
fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(cov.clone())
        .ok_or_else(|| Error::Numerical("marginal covariance not positive definite".into()))?;
    let resid = x - mean;
    let solved = chol.solve(&resid);
    let maha = resid.dot(&solved);
    let log_det: f64 = chol.l().diagonal().iter().map(|l| l.ln()).sum::<f64>() * 2.0;
    let d = x.len() as f64;
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + maha))
}

/// Conjugate posterior of an analytic prior under a linear-Gaussian task.
pub fn exact_posterior(prior: &AnalyticPrior, task: &ForwardTask) -> Result<ExactPosterior> {
    if !task.operator.is_linear() {
        return Err(Error::UnsupportedSolver);
    }
    let a = task.operator.to_matrix()?;
    let d = prior.dim();
    if a.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: a.ncols(),
        });
    }
    let w_data = 1.0 / (task.sigma_y * task.sigma_y);
    let gram = a.transpose() * &a * w_data;
    let aty = a.transpose() * &task.y * w_data;

    let (weights, means, covs) = prior_components(prior);
    let mut post_means = Vec::with_capacity(means.len());
    let mut post_covs = Vec::with_capacity(means.len());
    let mut log_weights = Vec::with_capacity(means.len());

    for ((w_j, m_j), cov_j) in weights.iter().zip(&means).zip(&covs) {
        let prior_chol = Cholesky::new(cov_j.clone())
            .ok_or_else(|| Error::Numerical("prior covariance not positive definite".into()))?;
        let prior_precision = prior_chol.inverse();
        let precision = &gram + &prior_precision;
        let precision_chol = Cholesky::new(precision)
            .ok_or_else(|| Error::Numerical("posterior precision not positive definite".into()))?;
        let sigma_post = precision_chol.inverse();
        let rhs = &aty + &prior_precision * m_j;
        let m_post = precision_chol.solve(&rhs);

        // Marginal likelihood of y under this component.
        let mut marginal_cov = &a * cov_j * a.transpose();
        for i in 0..a.nrows() {
            marginal_cov[(i, i)] += task.sigma_y * task.sigma_y;
        }
        let log_like = gaussian_log_pdf(&task.y, &(&a * m_j), &marginal_cov)?;
        log_weights.push(w_j.max(f64::MIN_POSITIVE).ln() + log_like);
        post_means.push(m_post);
        post_covs.push(sigma_post);
    }

    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = log_weights.iter().map(|l| (l - max).exp()).sum();
    let weights = log_weights
        .iter()
        .map(|l| (l - max).exp() / norm)
        .collect();

    Ok(ExactPosterior {
        weights,
        means: post_means,
        covariances: post_covs,
    })
}

/// Push the posterior through the forward kernel: each component becomes
/// N(alpha m_j', alpha^2 Sigma_j' + sigma^2 I) with unchanged weights.
pub fn posterior_time_marginal(post: &ExactPosterior, point: SchedulePoint) -> ExactPosterior {
    let d = post.dim();
    let means = post.means.iter().map(|m| m * point.alpha).collect();
    let covariances = post
        .covariances
        .iter()
        .map(|c| {
            let mut pushed = c * (point.alpha * point.alpha);
            for i in 0..d {
                pushed[(i, i)] += point.sigma * point.sigma;
            }
            pushed
        })
        .collect();
    ExactPosterior {
        weights: post.weights.clone(),
        means,
        covariances,
    }
}

/// Draw n samples: component by weight, then the component Gaussian.
pub fn sample_exact<R: Rng + ?Sized>(
    post: &ExactPosterior,
    rng: &mut R,
    n: usize,
) -> Result<Vec<DVector<f64>>> {
    let chols: Vec<Cholesky<f64, Dyn>> = post
        .covariances
        .iter()
        .map(|c| {
            Cholesky::new(c.clone())
                .ok_or_else(|| Error::Numerical("posterior covariance not positive definite".into()))
        })
        .collect::<Result<_>>()?;
    let d = post.dim();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = post.weights.len() - 1;
        for (j, w) in post.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = j;
                break;
            }
        }
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.push(&post.means[idx] + chols[idx].l() * z);
    }
    Ok(out)
}

/// Sample mean of a set of vectors.
pub fn sample_mean(samples: &[DVector<f64>]) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(Error::Parameter("empty sample set".into()));
    }
    let d = samples[0].len();
    let mut m = DVector::zeros(d);
    for s in samples {
        m += s;
    }
    Ok(m / samples.len() as f64)
}

/// Unbiased sample covariance.
pub fn sample_covariance(samples: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if samples.len() < 2 {
        return Err(Error::Parameter("need at least two samples for a covariance".into()));
    }
    let mean = sample_mean(samples)?;
    let d = mean.len();
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let r = s - &mean;
        cov += &r * r.transpose();
    }
    Ok(cov / (samples.len() as f64 - 1.0))
}

/// (||sample mean - exact mean||, ||sample cov - exact cov||_F).
pub fn moment_error(samples: &[DVector<f64>], post: &ExactPosterior) -> Result<(f64, f64)> {
    let mean_err = (sample_mean(samples)? - post.mean()).norm();
    let cov_err = (sample_covariance(samples)? - post.covariance()).norm();
    Ok((mean_err, cov_err))
}

fn mean_cross_distance(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    #[cfg(feature = "parallel")]
    {
        a.par_iter()
            .map(|x| b.iter().map(|y| (x - y).norm()).sum::<f64>())
            .sum::<f64>()
            / (a.len() * b.len()) as f64
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.iter()
            .map(|x| b.iter().map(|y| (x - y).norm()).sum::<f64>())
            .sum::<f64>()
            / (a.len() * b.len()) as f64
    }
}

/// Statistical energy distance 2 E||X-Y|| - E||X-X'|| - E||Y-Y'||.
pub fn energy_distance(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("empty sample set".into()));
    }
    Ok(2.0 * mean_cross_distance(a, b) - mean_cross_distance(a, a) - mean_cross_distance(b, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::ForwardOperator;
    use crate::prior::{GaussianPrior, GmmPrior};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_task(a: f64, sigma_y: f64, y: f64) -> ForwardTask {
        ForwardTask::new(
            ForwardOperator::DenseLinear(DMatrix::from_element(1, 1, a)),
            sigma_y,
            DVector::from_element(1, y),
            None,
        )
        .unwrap()
    }

    fn acceptance_gmm() -> AnalyticPrior {
        AnalyticPrior::Gmm(
            GmmPrior::new(
                vec![0.5, 0.5],
                vec![DVector::from_element(1, -2.0), DVector::from_element(1, 2.0)],
                vec![0.25, 0.25],
            )
            .unwrap(),
        )
    }

    #[test]
    fn scalar_conjugate_bayes() {
        let prior = AnalyticPrior::Gaussian(
            GaussianPrior::new(DVector::zeros(1), Covariance::Isotropic { s2: 1.0 }).unwrap(),
        );
        let post = exact_posterior(&prior, &scalar_task(1.0, 1.0, 2.0)).unwrap();
        assert_relative_eq!(post.means[0][0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(post.covariances[0][(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gmm_posterior_concentrates_on_near_mode() {
        let post = exact_posterior(&acceptance_gmm(), &scalar_task(1.0, 0.5, 1.8)).unwrap();
        let (far, near) = (0, 1);
        assert!(post.weights[near] >= 1.0 - 1e-5, "weights {:?}", post.weights);
        assert_relative_eq!(post.means[near][0], 1.9, epsilon = 1e-12);
        assert_relative_eq!(post.covariances[near][(0, 0)], 0.125, epsilon = 1e-12);
        assert_relative_eq!(post.means[far][0], -0.1, epsilon = 1e-12);
        assert_relative_eq!(post.mean()[0], 1.9, epsilon = 1e-4);
    }

    #[test]
    fn uninformative_likelihood_recovers_prior() {
        let post = exact_posterior(&acceptance_gmm(), &scalar_task(1.0, 1e6, 0.3)).unwrap();
        assert_relative_eq!(post.weights[0], 0.5, epsilon = 1e-4);
        assert_relative_eq!(post.means[0][0], -2.0, epsilon = 1e-4);
        assert_relative_eq!(post.means[1][0], 2.0, epsilon = 1e-4);
        assert_relative_eq!(post.covariances[0][(0, 0)], 0.25, epsilon = 1e-4);
    }

    #[test]
    fn nonlinear_operator_rejected() {
        let task = ForwardTask::new(
            ForwardOperator::ClipScale {
                c: 1.0,
                lo: -1.0,
                hi: 1.0,
                dim: 1,
            },
            0.5,
            DVector::zeros(1),
            None,
        )
        .unwrap();
        assert!(matches!(
            exact_posterior(&acceptance_gmm(), &task),
            Err(Error::UnsupportedSolver)
        ));
    }

    #[test]
    fn time_marginal_identity_and_base() {
        let post = exact_posterior(&acceptance_gmm(), &scalar_task(1.0, 0.5, 1.8)).unwrap();
        let same = posterior_time_marginal(&post, SchedulePoint::new(1.0, 0.0));
        assert_relative_eq!(same.means[1][0], post.means[1][0], epsilon = 1e-14);
        assert_relative_eq!(
            same.covariances[1][(0, 0)],
            post.covariances[1][(0, 0)],
            epsilon = 1e-14
        );

        let base = posterior_time_marginal(&post, SchedulePoint::new(0.0, 1.0));
        for (m, c) in base.means.iter().zip(&base.covariances) {
            assert_relative_eq!(m[0], 0.0, epsilon = 1e-14);
            assert_relative_eq!(c[(0, 0)], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn time_marginal_variance_vs_monte_carlo() {
        let post = exact_posterior(&acceptance_gmm(), &scalar_task(1.0, 0.5, 1.8)).unwrap();
        let point = SchedulePoint::new(0.7, 0.55);
        let marginal = posterior_time_marginal(&post, point);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let clean = sample_exact(&post, &mut rng, 200_000).unwrap();
        let noised: Vec<DVector<f64>> = clean
            .iter()
            .map(|x| {
                let eps: f64 = rng.sample(StandardNormal);
                DVector::from_element(1, point.alpha * x[0] + point.sigma * eps)
            })
            .collect();
        let mc_var = sample_covariance(&noised).unwrap()[(0, 0)];
        let exact_var = marginal.covariance()[(0, 0)];
        assert!(
            (mc_var - exact_var).abs() / exact_var < 0.02,
            "mc {mc_var} vs exact {exact_var}"
        );
    }

    #[test]
    fn posterior_mean_vs_importance_sampling() {
        let prior = acceptance_gmm();
        let task = scalar_task(1.0, 0.5, 1.8);
        let post = exact_posterior(&prior, &task).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..1_000_000 {
            let x0 = prior.sample(&mut rng)[0];
            let w = (-(1.8 - x0) * (1.8 - x0) / (2.0 * 0.25)).exp();
            num += w * x0;
            den += w;
        }
        let is_mean = num / den;
        assert!(
            (is_mean - post.mean()[0]).abs() < 5e-3,
            "IS {is_mean} vs exact {}",
            post.mean()[0]
        );
    }

    #[test]
    fn moment_error_within_clt_bound() {
        let post = exact_posterior(&acceptance_gmm(), &scalar_task(1.0, 0.5, 1.8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let samples = sample_exact(&post, &mut rng, n).unwrap();
        let (mean_err, _) = moment_error(&samples, &post).unwrap();
        let max_std = post.covariance()[(0, 0)].sqrt();
        assert!(mean_err <= 4.0 * max_std / (n as f64).sqrt(), "mean err {mean_err}");
    }

    #[test]
    fn energy_distance_null_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 2000;
        let std_normal: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_element(1, rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let shifted: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_element(1, 3.0 + rng.sample::<f64, _>(StandardNormal)))
            .collect();

        // Same-distribution null: split one sample in half, and build a small
        // permutation reference by reshuffling the pooled set.
        let (a, b) = std_normal.split_at(n / 2);
        let d_null = energy_distance(a, b).unwrap();
        let mut pooled: Vec<DVector<f64>> = std_normal.clone();
        let mut null_stats = Vec::new();
        for _ in 0..50 {
            for i in (1..pooled.len()).rev() {
                let j = rng.gen_range(0..=i);
                pooled.swap(i, j);
            }
            let (pa, pb) = pooled.split_at(n / 2);
            null_stats.push(energy_distance(pa, pb).unwrap());
        }
        null_stats.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let q95 = null_stats[(null_stats.len() as f64 * 0.95) as usize];
        assert!(d_null <= q95, "null stat {d_null} above permutation q95 {q95}");

        let d_shift = energy_distance(&std_normal, &shifted).unwrap();
        assert!(d_shift > 0.0);
        assert!(
            d_shift >= 10.0 * q95.max(1e-12),
            "shifted distance {d_shift} vs null q95 {q95}"
        );
    }

    #[test]
    fn empty_samples_rejected() {
        let post = exact_posterior(&acceptance_gmm(), &scalar_task(1.0, 0.5, 1.8)).unwrap();
        assert!(moment_error(&[], &post).is_err());
        assert!(energy_distance(&[], &[DVector::zeros(1)]).is_err());
    }

    #[test]
    fn masked_task_posterior_dimensions() {
        // m < d keeps the likelihood on the observed coordinates only.
        let prior = AnalyticPrior::Gaussian(
            GaussianPrior::toeplitz(DVector::zeros(4), 0.6).unwrap(),
        );
        let op = ForwardOperator::mask(vec![0, 2], 4).unwrap();
        let task = ForwardTask::new(op, 0.1, DVector::from_vec(vec![1.0, -1.0]), None).unwrap();
        let post = exact_posterior(&prior, &task).unwrap();
        assert_eq!(post.dim(), 4);
        // Observed coordinates are pinned near the data.
        assert!((post.means[0][0] - 1.0).abs() < 0.05);
        assert!((post.means[0][2] + 1.0).abs() < 0.05);
        // Unobserved coordinates correlate through the Toeplitz prior.
        assert!(post.means[0][1].abs() < 1.0);
    }
}
