//! Analytic diffusion priors with exact denoisers.
//!
//! Under the forward mixture `X_t = alpha_t X_0 + sigma_t X_1` the denoiser
//! is the conditional expectation `E[X_0 | X_t]`, which is available in
//! closed form for Gaussian and isotropic Gaussian-mixture priors:
//!
//! - Gaussian N(m, s^2 I):
//!   `D(x) = (alpha s^2 x + sigma^2 m) / (alpha^2 s^2 + sigma^2)`.
//! - Gaussian N(m, Sigma):
//!   `D(x) = m + alpha Sigma (alpha^2 Sigma + sigma^2 I)^{-1} (x - alpha m)`.
//! - Mixture sum_j w_j N(m_j, s_j^2 I): the responsibility-weighted sum of
//!   the per-component conjugate means, with responsibilities
//!   `r_j(x) proportional to w_j N(x; alpha m_j, (alpha^2 s_j^2 + sigma^2) I)`
//!   computed in the log domain with max-subtraction.
//!
//! Noise prediction is the implied standard-normal component
//! `(x - alpha D(x)) / sigma`, and `jvp` is the exact Jacobian-vector
//! product of the denoiser, needed only by the guidance baseline.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::SchedulePoint;

/// Covariance of a Gaussian prior component.
#[derive(Debug, Clone)]
pub enum Covariance {
    /// s^2 I.
    Isotropic { s2: f64 },
    /// Independent per-coordinate variances.
    Diagonal { diag: DVector<f64> },
    /// Full SPD matrix.
    Full { sigma: DMatrix<f64> },
}

impl Covariance {
    /// ij entry of the covariance matrix.
    fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            Covariance::Isotropic { s2 } => {
                if i == j {
                    *s2
                } else {
                    0.0
                }
            }
            Covariance::Diagonal { diag } => {
                if i == j {
                    diag[i]
                } else {
                    0.0
                }
            }
            Covariance::Full { sigma } => sigma[(i, j)],
        }
    }

    pub fn to_matrix(&self, dim: usize) -> DMatrix<f64> {
        DMatrix::from_fn(dim, dim, |i, j| self.entry(i, j))
    }
}

/// Single-Gaussian prior N(mean, covariance).
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    covariance: Covariance,
    /// Cholesky factor of the covariance, for sampling.
    chol: Arc<Cholesky<f64, Dyn>>,
    /// Factorizations of (alpha^2 Sigma + sigma^2 I) keyed by the schedule
    /// point bits; populated lazily, one entry per distinct point.
    solve_cache: Arc<Mutex<HashMap<(u64, u64), Arc<Cholesky<f64, Dyn>>>>>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, covariance: Covariance) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(Error::Parameter("prior dimension must be positive".into()));
        }
        match &covariance {
            Covariance::Isotropic { s2 } => {
                if *s2 <= 0.0 {
                    return Err(Error::Parameter(format!("isotropic variance {s2} must be > 0")));
                }
            }
            Covariance::Diagonal { diag } => {
                if diag.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: diag.len(),
                    });
                }
                if diag.iter().any(|v| *v <= 0.0) {
                    return Err(Error::Parameter("diagonal variances must be > 0".into()));
                }
            }
            Covariance::Full { sigma } => {
                if sigma.nrows() != dim || sigma.ncols() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: sigma.nrows(),
                    });
                }
                let asym = (sigma - sigma.transpose()).abs().max();
                if asym > 1e-12 {
                    return Err(Error::Numerical(format!(
                        "covariance asymmetric by {asym:.3e}"
                    )));
                }
            }
        }
        let matrix = covariance.to_matrix(dim);
        let chol = Cholesky::new(matrix)
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        Ok(Self {
            mean,
            covariance,
            chol: Arc::new(chol),
            solve_cache: Arc::new(Mutex::new(HashMap::new())),
        })
    }

    /// Toeplitz covariance Sigma_ij = rho^|i-j|, the smooth toy-image prior.
    pub fn toeplitz(mean: DVector<f64>, rho: f64) -> Result<Self> {
        if !(-1.0..1.0).contains(&rho) {
            return Err(Error::Parameter(format!("toeplitz rho = {rho} must be in (-1, 1)")));
        }
        let dim = mean.len();
        let sigma = DMatrix::from_fn(dim, dim, |i, j| rho.powi((i as i32 - j as i32).abs()));
        Self::new(mean, Covariance::Full { sigma })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        self.covariance.to_matrix(self.dim())
    }

    fn noised_factor(&self, point: SchedulePoint) -> Arc<Cholesky<f64, Dyn>> {
        let key = (point.alpha.to_bits(), point.sigma.to_bits());
        let mut cache = self.solve_cache.lock().unwrap();
        if let Some(f) = cache.get(&key) {
            return f.clone();
        }
        let dim = self.dim();
        let mut m = self.covariance.to_matrix(dim) * (point.alpha * point.alpha);
        for i in 0..dim {
            m[(i, i)] += point.sigma * point.sigma;
        }
        let f = Arc::new(Cholesky::new(m).expect("alpha^2 Sigma + sigma^2 I is SPD"));
        if cache.len() > 4096 {
            cache.clear();
        }
        cache.insert(key, f.clone());
        f
    }
}

/// Isotropic Gaussian-mixture prior sum_j w_j N(m_j, s_j^2 I).
#[derive(Debug, Clone)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    variances: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::Parameter(
                "weights, means and variances must have equal nonzero length".into(),
            ));
        }
        if weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Parameter("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        if variances.iter().any(|v| *v <= 0.0) {
            return Err(Error::Parameter("component variances must be > 0".into()));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::Parameter("component means must share one dimension".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// w-weighted mean of the component means.
    pub fn mixture_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, mj) in self.weights.iter().zip(&self.means) {
            m += mj * *w;
        }
        m
    }

    /// Log responsibilities ln r_j(x) at a schedule point, max-subtracted.
    fn log_responsibilities(&self, point: SchedulePoint, x: &DVector<f64>) -> Vec<f64> {
        let d = self.dim() as f64;
        let mut logs: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (mj, s2))| {
                let vj = point.alpha * point.alpha * s2 + point.sigma * point.sigma;
                let resid = x - mj * point.alpha;
                w.max(f64::MIN_POSITIVE).ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * vj).ln()
                    - resid.norm_squared() / (2.0 * vj)
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max
            + logs
                .iter()
                .map(|l| (l - max).exp())
                .sum::<f64>()
                .ln();
        for l in &mut logs {
            *l -= log_sum;
        }
        logs
    }

    fn responsibilities(&self, point: SchedulePoint, x: &DVector<f64>) -> Vec<f64> {
        self.log_responsibilities(point, x)
            .into_iter()
            .map(f64::exp)
            .collect()
    }
}

/// Either analytic prior, behind one dispatching surface.
#[derive(Debug, Clone)]
pub enum AnalyticPrior {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
}

impl AnalyticPrior {
    pub fn dim(&self) -> usize {
        match self {
            AnalyticPrior::Gaussian(p) => p.dim(),
            AnalyticPrior::Gmm(p) => p.dim(),
        }
    }

    /// Prior mean (mixture-weighted for the GMM).
    pub fn mean(&self) -> DVector<f64> {
        match self {
            AnalyticPrior::Gaussian(p) => p.mean().clone(),
            AnalyticPrior::Gmm(p) => p.mixture_mean(),
        }
    }

    fn check_point(&self, point: SchedulePoint) -> Result<()> {
        if point.sigma < 0.0 {
            return Err(Error::Parameter(format!("sigma = {} must be >= 0", point.sigma)));
        }
        if point.sigma == 0.0 && point.alpha == 0.0 {
            return Err(Error::DegenerateSchedule);
        }
        Ok(())
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Exact denoiser E[X_0 | X_t = x] at the given schedule point.
    pub fn denoise(&self, point: SchedulePoint, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(point)?;
        self.check_dim(x)?;
        let (a, s) = (point.alpha, point.sigma);
        match self {
            AnalyticPrior::Gaussian(p) => match &p.covariance {
                Covariance::Isotropic { s2 } => {
                    let denom = a * a * s2 + s * s;
                    Ok((x * (a * s2) + p.mean() * (s * s)) / denom)
                }
                Covariance::Diagonal { diag } => {
                    let mut out = DVector::zeros(p.dim());
                    for i in 0..p.dim() {
                        let denom = a * a * diag[i] + s * s;
                        out[i] = (a * diag[i] * x[i] + s * s * p.mean()[i]) / denom;
                    }
                    Ok(out)
                }
                Covariance::Full { sigma } => {
                    let factor = p.noised_factor(point);
                    let resid = x - p.mean() * a;
                    let u = factor.solve(&resid);
                    Ok(p.mean() + (sigma * u) * a)
                }
            },
            AnalyticPrior::Gmm(p) => {
                let r = p.responsibilities(point, x);
                let mut out = DVector::zeros(p.dim());
                for ((rj, mj), s2) in r.iter().zip(&p.means).zip(&p.variances) {
                    let denom = a * a * s2 + s * s;
                    let mu_j = (x * (a * s2) + mj * (s * s)) / denom;
                    out += mu_j * *rj;
                }
                Ok(out)
            }
        }
    }

    /// Implied noise component (x - alpha D(x)) / sigma.
    pub fn noise_prediction(&self, point: SchedulePoint, x: &DVector<f64>) -> Result<DVector<f64>> {
        if point.sigma <= 0.0 {
            return Err(Error::DivisionDegenerate);
        }
        let d = self.denoise(point, x)?;
        Ok((x - d * point.alpha) / point.sigma)
    }

    /// Jacobian-vector product (d D / d x) v, computed analytically.
    pub fn denoiser_jvp(
        &self,
        point: SchedulePoint,
        x: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_point(point)?;
        self.check_dim(x)?;
        self.check_dim(v)?;
        let (a, s) = (point.alpha, point.sigma);
        match self {
            AnalyticPrior::Gaussian(p) => match &p.covariance {
                Covariance::Isotropic { s2 } => {
                    let c = a * s2 / (a * a * s2 + s * s);
                    Ok(v * c)
                }
                Covariance::Diagonal { diag } => {
                    let mut out = DVector::zeros(p.dim());
                    for i in 0..p.dim() {
                        out[i] = a * diag[i] / (a * a * diag[i] + s * s) * v[i];
                    }
                    Ok(out)
                }
                Covariance::Full { sigma } => {
                    let factor = p.noised_factor(point);
                    let u = factor.solve(v);
                    Ok((sigma * u) * a)
                }
            },
            AnalyticPrior::Gmm(p) => {
                // Product rule on D(x) = sum_j r_j(x) mu_j(x):
                // d mu_j = c_j v, d r_j = r_j (g_j - gbar) with
                // g_j = d/dx[ln N_j] . v = -(x - a m_j) . v / v_j.
                let r = p.responsibilities(point, x);
                let mut g = Vec::with_capacity(r.len());
                for (mj, s2) in p.means.iter().zip(&p.variances) {
                    let vj = a * a * s2 + s * s;
                    let resid = x - mj * a;
                    g.push(-resid.dot(v) / vj);
                }
                let gbar: f64 = r.iter().zip(&g).map(|(rj, gj)| rj * gj).sum();
                let mut out = DVector::zeros(p.dim());
                for (((rj, gj), mj), s2) in r.iter().zip(&g).zip(&p.means).zip(&p.variances) {
                    let vj = a * a * s2 + s * s;
                    let c_j = a * s2 / vj;
                    let mu_j = (x * (a * s2) + mj * (s * s)) / vj;
                    out += v * (rj * c_j);
                    out += mu_j * (rj * (gj - gbar));
                }
                Ok(out)
            }
        }
    }

    /// Score of the time-t marginal, grad_x ln p_t(x).
    ///
    /// Independent route to the denoiser via the Tweedie identity
    /// `D(x) = (x + sigma^2 score(x)) / alpha`.
    pub fn marginal_score(&self, point: SchedulePoint, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(point)?;
        self.check_dim(x)?;
        let (a, s) = (point.alpha, point.sigma);
        match self {
            AnalyticPrior::Gaussian(p) => match &p.covariance {
                Covariance::Isotropic { s2 } => {
                    let v = a * a * s2 + s * s;
                    Ok((p.mean() * a - x) / v)
                }
                Covariance::Diagonal { diag } => {
                    let mut out = DVector::zeros(p.dim());
                    for i in 0..p.dim() {
                        out[i] = (a * p.mean()[i] - x[i]) / (a * a * diag[i] + s * s);
                    }
                    Ok(out)
                }
                Covariance::Full { .. } => {
                    let factor = p.noised_factor(point);
                    let resid = p.mean() * a - x;
                    Ok(factor.solve(&resid))
                }
            },
            AnalyticPrior::Gmm(p) => {
                let r = p.responsibilities(point, x);
                let mut out = DVector::zeros(p.dim());
                for ((rj, mj), s2) in r.iter().zip(&p.means).zip(&p.variances) {
                    let vj = a * a * s2 + s * s;
                    out += (mj * a - x) * (rj / vj);
                }
                Ok(out)
            }
        }
    }

    /// Draw one sample from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            AnalyticPrior::Gaussian(p) => {
                let z = DVector::from_fn(p.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
                p.mean() + p.chol.l() * z
            }
            AnalyticPrior::Gmm(p) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut idx = p.num_components() - 1;
                for (j, w) in p.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        idx = j;
                        break;
                    }
                }
                let z = DVector::from_fn(p.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
                &p.means[idx] + z * p.variances[idx].sqrt()
            }
        }
    }
}

/// Encoder/decoder pair standing in for a latent codec: the identity, or an
/// orthogonal matrix `E` with `encode(x) = E x`, `decode(z) = E^T z`.
#[derive(Debug, Clone)]
pub struct LinearCodec {
    matrix: Option<DMatrix<f64>>,
}

impl LinearCodec {
    pub fn identity() -> Self {
        Self { matrix: None }
    }

    pub fn orthogonal(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        let gram = matrix.transpose() * &matrix;
        let dev = (&gram - DMatrix::identity(matrix.nrows(), matrix.ncols()))
            .abs()
            .max();
        if dev > 1e-10 {
            return Err(Error::Numerical(format!(
                "codec matrix not orthogonal: |E^T E - I| = {dev:.3e}"
            )));
        }
        Ok(Self {
            matrix: Some(matrix),
        })
    }

    /// Random rotation from the QR factor of a Gaussian matrix.
    pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        Self { matrix: Some(q) }
    }

    pub fn is_identity(&self) -> bool {
        self.matrix.is_none()
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if let Some(m) = &self.matrix {
            if v.len() != m.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: m.nrows(),
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        Ok(match &self.matrix {
            None => x.clone(),
            Some(e) => e * x,
        })
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(z)?;
        Ok(match &self.matrix {
            None => z.clone(),
            Some(e) => e.transpose() * z,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_gaussian(dim: usize) -> AnalyticPrior {
        AnalyticPrior::Gaussian(
            GaussianPrior::new(DVector::zeros(dim), Covariance::Isotropic { s2: 1.0 }).unwrap(),
        )
    }

    fn two_mode_gmm() -> AnalyticPrior {
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
    fn denoiser_is_identity_at_t0() {
        let prior = unit_gaussian(3);
        let x = DVector::from_vec(vec![0.3, -1.2, 5.0]);
        let d = prior.denoise(SchedulePoint::new(1.0, 0.0), &x).unwrap();
        assert_relative_eq!(d, x, epsilon = 1e-14);
    }

    #[test]
    fn denoiser_returns_prior_mean_at_pure_noise() {
        let prior = AnalyticPrior::Gaussian(
            GaussianPrior::new(
                DVector::from_vec(vec![1.5, -0.5]),
                Covariance::Isotropic { s2: 1.0 },
            )
            .unwrap(),
        );
        let x = DVector::from_vec(vec![10.0, -3.0]);
        let d = prior.denoise(SchedulePoint::new(0.0, 1.0), &x).unwrap();
        assert_relative_eq!(d, DVector::from_vec(vec![1.5, -0.5]), epsilon = 1e-14);
    }

    #[test]
    fn gmm_at_pure_noise_returns_mixture_mean() {
        let prior = AnalyticPrior::Gmm(
            GmmPrior::new(
                vec![0.25, 0.75],
                vec![DVector::from_element(1, -2.0), DVector::from_element(1, 2.0)],
                vec![0.25, 1.0],
            )
            .unwrap(),
        );
        let x = DVector::from_element(1, 3.7);
        let d = prior.denoise(SchedulePoint::new(0.0, 1.0), &x).unwrap();
        assert_relative_eq!(d[0], 0.25 * -2.0 + 0.75 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gmm_conjugate_mean_hand_check() {
        // Scalar re-derivation of the responsibility-weighted conjugate mean,
        // written out independently of the vector implementation.
        let prior = two_mode_gmm();
        let point = SchedulePoint::new(0.8, 0.6);
        let x = 1.6_f64;
        let vj = 0.8 * 0.8 * 0.25 + 0.36;
        let dens = |m: f64| (-(x - 0.8 * m).powi(2) / (2.0 * vj)).exp() / (2.0 * std::f64::consts::PI * vj).sqrt();
        let (p1, p2) = (0.5 * dens(-2.0), 0.5 * dens(2.0));
        let (r1, r2) = (p1 / (p1 + p2), p2 / (p1 + p2));
        let mu = |m: f64| (0.8 * 0.25 * x + 0.36 * m) / vj;
        let expected = r1 * mu(-2.0) + r2 * mu(2.0);

        let d = prior
            .denoise(point, &DVector::from_element(1, x))
            .unwrap();
        assert_relative_eq!(d[0], expected, epsilon = 1e-13);
    }

    #[test]
    fn gmm_denoiser_vs_importance_sampling() {
        // Monte-Carlo oracle: E[X0 | X_t = x] estimated by importance
        // sampling with the prior as proposal.
        let prior = two_mode_gmm();
        let point = SchedulePoint::new(0.8, 0.6);
        let x = 1.6_f64;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..n {
            let x0 = prior.sample(&mut rng)[0];
            let w = (-(x - 0.8 * x0).powi(2) / (2.0 * 0.36)).exp();
            num += w * x0;
            den += w;
        }
        let mc = num / den;
        let d = prior.denoise(point, &DVector::from_element(1, x)).unwrap()[0];
        assert!(
            (d - mc).abs() < 5e-3,
            "closed form {d} vs Monte Carlo {mc}"
        );
    }

    #[test]
    fn full_covariance_matches_isotropic() {
        let mean = DVector::from_vec(vec![0.4, -0.7, 1.1]);
        let iso = AnalyticPrior::Gaussian(
            GaussianPrior::new(mean.clone(), Covariance::Isotropic { s2: 0.6 }).unwrap(),
        );
        let full = AnalyticPrior::Gaussian(
            GaussianPrior::new(
                mean,
                Covariance::Full {
                    sigma: DMatrix::identity(3, 3) * 0.6,
                },
            )
            .unwrap(),
        );
        let point = SchedulePoint::new(0.7, 0.4);
        let x = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let v = DVector::from_vec(vec![0.3, -0.9, 0.2]);
        assert_relative_eq!(
            iso.denoise(point, &x).unwrap(),
            full.denoise(point, &x).unwrap(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            iso.denoiser_jvp(point, &x, &v).unwrap(),
            full.denoiser_jvp(point, &x, &v).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn reconstruction_identity() {
        let prior = two_mode_gmm();
        let point = SchedulePoint::new(0.6, 0.8);
        let x = DVector::from_element(1, 0.9);
        let d = prior.denoise(point, &x).unwrap();
        let eps = prior.noise_prediction(point, &x).unwrap();
        let back = d * 0.6 + eps * 0.8;
        assert_relative_eq!(back, x, epsilon = 1e-12);
    }

    #[test]
    fn noise_prediction_zero_at_consistent_input() {
        // x = alpha D(x) holds at the prior mean scaled by alpha.
        let prior = unit_gaussian(2);
        let point = SchedulePoint::new(0.6, 0.8);
        let x = DVector::zeros(2);
        let eps = prior.noise_prediction(point, &x).unwrap();
        assert!(eps.norm() < 1e-14);
    }

    #[test]
    fn noise_prediction_rejects_sigma_zero() {
        let prior = unit_gaussian(2);
        assert!(matches!(
            prior.noise_prediction(SchedulePoint::new(1.0, 0.0), &DVector::zeros(2)),
            Err(Error::DivisionDegenerate)
        ));
    }

    #[test]
    fn degenerate_schedule_rejected() {
        let prior = unit_gaussian(2);
        assert!(matches!(
            prior.denoise(SchedulePoint::new(0.0, 0.0), &DVector::zeros(2)),
            Err(Error::DegenerateSchedule)
        ));
    }

    #[test]
    fn jvp_isotropic_is_constant_in_x() {
        let prior = unit_gaussian(2);
        let point = SchedulePoint::new(0.6, 0.8);
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let j1 = prior
            .denoiser_jvp(point, &DVector::from_vec(vec![0.0, 0.0]), &v)
            .unwrap();
        let j2 = prior
            .denoiser_jvp(point, &DVector::from_vec(vec![5.0, -7.0]), &v)
            .unwrap();
        assert_relative_eq!(j1, j2, epsilon = 1e-14);
        let c = 0.6 / (0.36 + 0.64);
        assert_relative_eq!(j1, v * c, epsilon = 1e-14);
    }

    #[test]
    fn jvp_identity_at_t0() {
        let prior = two_mode_gmm();
        let v = DVector::from_element(1, 0.37);
        let j = prior
            .denoiser_jvp(SchedulePoint::new(1.0, 0.0), &DVector::from_element(1, 0.2), &v)
            .unwrap();
        assert_relative_eq!(j, v, epsilon = 1e-12);
    }

    fn finite_difference_jvp(
        prior: &AnalyticPrior,
        point: SchedulePoint,
        x: &DVector<f64>,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        let h = 1e-5 * (1.0 + x.norm());
        let plus = prior.denoise(point, &(x + v * h)).unwrap();
        let minus = prior.denoise(point, &(x - v * h)).unwrap();
        (plus - minus) / (2.0 * h)
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gmm = two_mode_gmm();
        let full = AnalyticPrior::Gaussian(
            GaussianPrior::toeplitz(DVector::zeros(6), 0.8).unwrap(),
        );
        for prior in [&gmm, &full] {
            let d = prior.dim();
            for _ in 0..10 {
                let x = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
                let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let point = SchedulePoint::new(0.65, 0.55);
                let analytic = prior.denoiser_jvp(point, &x, &v).unwrap();
                let fd = finite_difference_jvp(prior, point, &x, &v);
                let rel = (&analytic - &fd).norm() / fd.norm().max(1e-12);
                assert!(rel <= 1e-5, "rel err {rel}");
            }
        }
    }

    #[test]
    fn tweedie_consistency_on_gmm() {
        let prior = AnalyticPrior::Gmm(
            GmmPrior::new(
                vec![0.3, 0.7],
                vec![DVector::from_vec(vec![-2.0, 1.0]), DVector::from_vec(vec![2.0, -1.0])],
                vec![0.25, 0.9],
            )
            .unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let t: f64 = rng.gen_range(0.05..0.95);
            let point = SchedulePoint::new(1.0 - t, t);
            let x = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
            let d = prior.denoise(point, &x).unwrap();
            let score = prior.marginal_score(point, &x).unwrap();
            let tweedie = (&x + score * (point.sigma * point.sigma)) / point.alpha;
            let rel = (&d - &tweedie).norm() / d.norm().max(1e-12);
            assert!(rel <= 1e-8, "rel err {rel}");
        }
    }

    #[test]
    fn denoiser_interpolates_limits() {
        let prior = two_mode_gmm();
        let x = DVector::from_element(1, 0.9);
        let near_zero = prior.denoise(SchedulePoint::new(0.999, 1e-9), &x).unwrap();
        assert_relative_eq!(near_zero[0], 0.9 / 0.999, epsilon = 1e-6);
        let near_one = prior.denoise(SchedulePoint::new(1e-12, 1.0), &x).unwrap();
        assert_relative_eq!(near_one[0], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn codec_identity_roundtrip() {
        let codec = LinearCodec::identity();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(codec.encode(&x).unwrap(), x);
        assert_eq!(codec.decode(&x).unwrap(), x);
    }

    #[test]
    fn codec_orthogonal_roundtrip_and_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let codec = LinearCodec::random_rotation(8, &mut rng);
        let x = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = codec.encode(&x).unwrap();
        let back = codec.decode(&z).unwrap();
        assert!((&back - &x).norm() < 1e-10);
        assert!((z.norm() - x.norm()).abs() < 1e-10);
    }

    #[test]
    fn codec_rejects_non_orthogonal() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(LinearCodec::orthogonal(m).is_err());
    }

    #[test]
    fn codec_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let codec = LinearCodec::random_rotation(4, &mut rng);
        assert!(codec.encode(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn gmm_far_apart_responsibilities_stay_finite() {
        // Responsibilities around e^-14 and far smaller must not underflow
        // the weighted mean.
        let prior = AnalyticPrior::Gmm(
            GmmPrior::new(
                vec![0.5, 0.5],
                vec![DVector::from_element(1, -40.0), DVector::from_element(1, 40.0)],
                vec![0.25, 0.25],
            )
            .unwrap(),
        );
        let d = prior
            .denoise(SchedulePoint::new(0.9, 0.1), &DVector::from_element(1, 35.0))
            .unwrap();
        assert!(d[0].is_finite());
        assert!(d[0] > 30.0);
    }
}
