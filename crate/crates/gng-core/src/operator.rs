//! Forward measurement operators and the Gaussian observation model.
//!
//! A task observes `y = A(x_true) + sigma_y * w` with `w ~ N(0, I_m)`. The
//! linear kinds expose exact adjoints (checked against the inner-product
//! identity `<A x, u> = <x, A^T u>`), and every kind exposes the gradient of
//! the data-fidelity term `f(x) = ||y - A(x)||^2 / (2 sigma_y^2)` through a
//! vector-Jacobian product. Masking and decimation return only the kept
//! coordinates, so the likelihood dimension stays honest.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Forward measurement operator.
#[derive(Debug, Clone)]
pub enum ForwardOperator {
    /// Arbitrary m x d matrix.
    DenseLinear(DMatrix<f64>),
    /// Keep the listed coordinates (strictly increasing indices) of a
    /// d-dimensional signal.
    Mask { keep: Vec<usize>, dim: usize },
    /// Circular convolution of a length-d signal with a short kernel whose
    /// center tap sits at offset `kernel.len() / 2`.
    CircularBlur { kernel: Vec<f64>, dim: usize },
    /// Keep every `factor`-th coordinate starting at 0 (pure subsampling,
    /// no anti-alias filter).
    Decimate { factor: usize, dim: usize },
    /// Elementwise clamp(c * x, lo, hi); the desk-scale stand-in for a
    /// saturating dynamic-range operator. Nonlinear.
    ClipScale { c: f64, lo: f64, hi: f64, dim: usize },
    /// Sequential chain; linear iff every part is linear.
    Compose(Vec<ForwardOperator>),
}

impl ForwardOperator {
    pub fn mask(keep: Vec<usize>, dim: usize) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::Parameter("mask keeps no coordinates".into()));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("mask indices must be strictly increasing".into()));
        }
        if *keep.last().unwrap() >= dim {
            return Err(Error::Parameter(format!(
                "mask index {} out of bounds for dim {dim}",
                keep.last().unwrap()
            )));
        }
        Ok(ForwardOperator::Mask { keep, dim })
    }

    pub fn circular_blur(kernel: Vec<f64>, dim: usize) -> Result<Self> {
        if kernel.is_empty() || kernel.len() > dim {
            return Err(Error::Parameter(format!(
                "kernel length {} must be in 1..={dim}",
                kernel.len()
            )));
        }
        Ok(ForwardOperator::CircularBlur { kernel, dim })
    }

    pub fn decimate(factor: usize, dim: usize) -> Result<Self> {
        if factor == 0 || factor > dim {
            return Err(Error::Parameter(format!("decimation factor {factor} out of range")));
        }
        Ok(ForwardOperator::Decimate { factor, dim })
    }

    /// Input dimension d.
    pub fn input_dim(&self) -> usize {
        match self {
            ForwardOperator::DenseLinear(a) => a.ncols(),
            ForwardOperator::Mask { dim, .. }
            | ForwardOperator::CircularBlur { dim, .. }
            | ForwardOperator::Decimate { dim, .. }
            | ForwardOperator::ClipScale { dim, .. } => *dim,
            ForwardOperator::Compose(parts) => parts
                .first()
                .map(ForwardOperator::input_dim)
                .unwrap_or(0),
        }
    }

    /// Output dimension m.
    pub fn output_dim(&self) -> usize {
        match self {
            ForwardOperator::DenseLinear(a) => a.nrows(),
            ForwardOperator::Mask { keep, .. } => keep.len(),
            ForwardOperator::CircularBlur { dim, .. } => *dim,
            ForwardOperator::Decimate { factor, dim } => dim.div_ceil(*factor),
            ForwardOperator::ClipScale { dim, .. } => *dim,
            ForwardOperator::Compose(parts) => parts
                .last()
                .map(ForwardOperator::output_dim)
                .unwrap_or(0),
        }
    }

    pub fn is_linear(&self) -> bool {
        match self {
            ForwardOperator::ClipScale { .. } => false,
            ForwardOperator::Compose(parts) => parts.iter().all(ForwardOperator::is_linear),
            _ => true,
        }
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Apply A(x).
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(match self {
            ForwardOperator::DenseLinear(a) => a * x,
            ForwardOperator::Mask { keep, .. } => {
                DVector::from_iterator(keep.len(), keep.iter().map(|&i| x[i]))
            }
            ForwardOperator::CircularBlur { kernel, dim } => {
                circular_convolve(x, kernel, *dim)
            }
            ForwardOperator::Decimate { factor, dim } => {
                let m = dim.div_ceil(*factor);
                DVector::from_iterator(m, (0..m).map(|i| x[i * factor]))
            }
            ForwardOperator::ClipScale { c, lo, hi, .. } => x.map(|v| (c * v).clamp(*lo, *hi)),
            ForwardOperator::Compose(parts) => {
                let mut cur = x.clone();
                for p in parts {
                    cur = p.apply(&cur)?;
                }
                cur
            }
        })
    }

    /// Adjoint A^T u, defined for linear kinds only.
    pub fn adjoint(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.is_linear() {
            return Err(Error::UnsupportedSolver);
        }
        if u.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: u.len(),
            });
        }
        Ok(match self {
            ForwardOperator::DenseLinear(a) => a.transpose() * u,
            ForwardOperator::Mask { keep, dim } => {
                let mut out = DVector::zeros(*dim);
                for (row, &i) in keep.iter().enumerate() {
                    out[i] = u[row];
                }
                out
            }
            ForwardOperator::CircularBlur { kernel, dim } => {
                circular_correlate(u, kernel, *dim)
            }
            ForwardOperator::Decimate { factor, dim } => {
                let mut out = DVector::zeros(*dim);
                for (row, chunk) in (0..*dim).step_by(*factor).enumerate() {
                    out[chunk] = u[row];
                }
                out
            }
            ForwardOperator::ClipScale { .. } => unreachable!("nonlinear"),
            ForwardOperator::Compose(parts) => {
                let mut cur = u.clone();
                for p in parts.iter().rev() {
                    cur = p.adjoint(&cur)?;
                }
                cur
            }
        })
    }

    /// Vector-Jacobian product J(x)^T u.
    ///
    /// Coincides with `adjoint` for linear kinds; ClipScale uses the
    /// subgradient c * 1{lo < c x_i < hi}, zero on the clamp plateau and at
    /// exact boundaries.
    pub fn vjp(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        if u.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: u.len(),
            });
        }
        Ok(match self {
            ForwardOperator::ClipScale { c, lo, hi, dim } => {
                let mut out = DVector::zeros(*dim);
                for i in 0..*dim {
                    let s = c * x[i];
                    if s > *lo && s < *hi {
                        out[i] = c * u[i];
                    }
                }
                out
            }
            ForwardOperator::Compose(parts) => {
                // Forward pass to collect intermediate states, then pull the
                // cotangent back through each part.
                let mut states = Vec::with_capacity(parts.len());
                let mut cur = x.clone();
                for p in parts {
                    states.push(cur.clone());
                    cur = p.apply(&cur)?;
                }
                let mut cot = u.clone();
                for (p, state) in parts.iter().zip(states.iter()).rev() {
                    cot = p.vjp(state, &cot)?;
                }
                cot
            }
            _ => self.adjoint(u)?,
        })
    }

    /// Gradient of `||y - A(x)||^2 / (2 sigma_y^2)` at x.
    pub fn grad_data_term(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        sigma_y: f64,
    ) -> Result<DVector<f64>> {
        let residual = self.apply(x)? - y;
        Ok(self.vjp(x, &residual)? / (sigma_y * sigma_y))
    }

    /// Materialize a linear operator as an explicit matrix by applying it to
    /// the standard basis.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if !self.is_linear() {
            return Err(Error::UnsupportedSolver);
        }
        let (m, d) = (self.output_dim(), self.input_dim());
        let mut a = DMatrix::zeros(m, d);
        let mut e = DVector::zeros(d);
        for j in 0..d {
            e[j] = 1.0;
            let col = self.apply(&e)?;
            a.set_column(j, &col);
            e[j] = 0.0;
        }
        Ok(a)
    }

    /// Upper bound on the Jacobian spectral norm, used to pick stable
    /// gradient steps for nonlinear kinds.
    pub fn jacobian_bound(&self) -> f64 {
        match self {
            ForwardOperator::DenseLinear(a) => {
                // Frobenius norm bounds the spectral norm.
                a.norm()
            }
            ForwardOperator::Mask { .. } | ForwardOperator::Decimate { .. } => 1.0,
            ForwardOperator::CircularBlur { kernel, .. } => {
                kernel.iter().map(|k| k.abs()).sum()
            }
            ForwardOperator::ClipScale { c, .. } => c.abs(),
            ForwardOperator::Compose(parts) => {
                parts.iter().map(ForwardOperator::jacobian_bound).product()
            }
        }
    }
}

fn circular_convolve(x: &DVector<f64>, kernel: &[f64], dim: usize) -> DVector<f64> {
    let center = (kernel.len() / 2) as isize;
    let mut out = DVector::zeros(dim);
    for i in 0..dim as isize {
        let mut acc = 0.0;
        for (k, &w) in kernel.iter().enumerate() {
            let idx = (i - (k as isize - center)).rem_euclid(dim as isize);
            acc += w * x[idx as usize];
        }
        out[i as usize] = acc;
    }
    out
}

fn circular_correlate(u: &DVector<f64>, kernel: &[f64], dim: usize) -> DVector<f64> {
    let center = (kernel.len() / 2) as isize;
    let mut out = DVector::zeros(dim);
    for j in 0..dim as isize {
        let mut acc = 0.0;
        for (k, &w) in kernel.iter().enumerate() {
            let idx = (j + (k as isize - center)).rem_euclid(dim as isize);
            acc += w * u[idx as usize];
        }
        out[j as usize] = acc;
    }
    out
}

/// One inverse problem: operator, noise level, observation, and optional
/// ground truth.
#[derive(Debug, Clone)]
pub struct ForwardTask {
    pub operator: ForwardOperator,
    pub sigma_y: f64,
    pub y: DVector<f64>,
    pub x_true: Option<DVector<f64>>,
}

impl ForwardTask {
    pub fn new(
        operator: ForwardOperator,
        sigma_y: f64,
        y: DVector<f64>,
        x_true: Option<DVector<f64>>,
    ) -> Result<Self> {
        if sigma_y <= 0.0 {
            return Err(Error::Parameter(format!("sigma_y = {sigma_y} must be > 0")));
        }
        if y.len() != operator.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: operator.output_dim(),
                got: y.len(),
            });
        }
        if let Some(x) = &x_true {
            if x.len() != operator.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: operator.input_dim(),
                    got: x.len(),
                });
            }
        }
        Ok(Self {
            operator,
            sigma_y,
            y,
            x_true,
        })
    }
}

/// Draw `y = A(x_true) + sigma_y * w` and package the task. Deterministic
/// for a fixed RNG state.
pub fn synthesize_observation<R: Rng + ?Sized>(
    operator: ForwardOperator,
    x_true: DVector<f64>,
    sigma_y: f64,
    rng: &mut R,
) -> Result<ForwardTask> {
    if sigma_y <= 0.0 {
        return Err(Error::Parameter(format!("sigma_y = {sigma_y} must be > 0")));
    }
    let clean = operator.apply(&x_true)?;
    let noise = DVector::from_fn(clean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = clean + noise * sigma_y;
    ForwardTask::new(operator, sigma_y, y, Some(x_true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn mask_selects_coordinates() {
        let op = ForwardOperator::mask(vec![0, 2], 3).unwrap();
        let y = op.apply(&DVector::from_vec(vec![5.0, 6.0, 7.0])).unwrap();
        assert_eq!(y, DVector::from_vec(vec![5.0, 7.0]));
    }

    #[test]
    fn delta_kernel_blur_is_identity() {
        let op = ForwardOperator::circular_blur(vec![1.0], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_vec(&mut rng, 5);
        assert_relative_eq!(op.apply(&x).unwrap(), x, epsilon = 1e-15);
    }

    #[test]
    fn decimate_subsamples() {
        let op = ForwardOperator::decimate(2, 4).unwrap();
        let y = op.apply(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y, DVector::from_vec(vec![1.0, 3.0]));
    }

    #[test]
    fn clip_scale_clamps() {
        let op = ForwardOperator::ClipScale {
            c: 2.0,
            lo: -1.0,
            hi: 1.0,
            dim: 3,
        };
        let y = op.apply(&DVector::from_vec(vec![0.25, 3.0, -4.0])).unwrap();
        assert_eq!(y, DVector::from_vec(vec![0.5, 1.0, -1.0]));
    }

    fn all_linear_kinds(rng: &mut ChaCha8Rng) -> Vec<ForwardOperator> {
        vec![
            ForwardOperator::DenseLinear(DMatrix::from_fn(5, 9, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            })),
            ForwardOperator::mask(vec![0, 3, 4, 7], 9).unwrap(),
            ForwardOperator::circular_blur(vec![0.25, 0.5, 0.25], 9).unwrap(),
            ForwardOperator::decimate(3, 9).unwrap(),
            ForwardOperator::Compose(vec![
                ForwardOperator::circular_blur(vec![0.2, 0.6, 0.2], 9).unwrap(),
                ForwardOperator::decimate(3, 9).unwrap(),
            ]),
        ]
    }

    #[test]
    fn adjoint_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for op in all_linear_kinds(&mut rng) {
            for _ in 0..50 {
                let x = random_vec(&mut rng, op.input_dim());
                let u = random_vec(&mut rng, op.output_dim());
                let lhs = op.apply(&x).unwrap().dot(&u);
                let rhs = x.dot(&op.adjoint(&u).unwrap());
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()),
                    "adjoint mismatch for {op:?}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn linearity_on_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for op in all_linear_kinds(&mut rng) {
            let x = random_vec(&mut rng, op.input_dim());
            let y = random_vec(&mut rng, op.input_dim());
            let (a, b) = (1.7, -0.4);
            let lhs = op.apply(&(&x * a + &y * b)).unwrap();
            let rhs = op.apply(&x).unwrap() * a + op.apply(&y).unwrap() * b;
            assert_relative_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    fn fd_grad(op: &ForwardOperator, x: &DVector<f64>, y: &DVector<f64>, sigma_y: f64) -> DVector<f64> {
        let objective = |x: &DVector<f64>| {
            let r = op.apply(x).unwrap() - y;
            r.norm_squared() / (2.0 * sigma_y * sigma_y)
        };
        let h = 1e-5 * (1.0 + x.norm());
        let mut g = DVector::zeros(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (objective(&xp) - objective(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn grad_data_term_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ops = all_linear_kinds(&mut rng);
        // ClipScale probed away from the clamp boundaries.
        ops.push(ForwardOperator::ClipScale {
            c: 1.5,
            lo: -10.0,
            hi: 10.0,
            dim: 9,
        });
        for op in ops {
            let x = random_vec(&mut rng, op.input_dim());
            let y = random_vec(&mut rng, op.output_dim());
            let g = op.grad_data_term(&x, &y, 0.7).unwrap();
            let fd = fd_grad(&op, &x, &y, 0.7);
            let rel = (&g - &fd).norm() / fd.norm().max(1e-12);
            assert!(rel <= 1e-5, "rel err {rel} for {op:?}");
        }
    }

    #[test]
    fn grad_zero_at_exact_fit() {
        let op = ForwardOperator::circular_blur(vec![0.3, 0.4, 0.3], 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_vec(&mut rng, 6);
        let y = op.apply(&x).unwrap();
        let g = op.grad_data_term(&x, &y, 0.5).unwrap();
        assert!(g.norm() < 1e-14);
    }

    #[test]
    fn clip_scale_saturated_gradient_is_zero() {
        let op = ForwardOperator::ClipScale {
            c: 3.0,
            lo: -1.0,
            hi: 1.0,
            dim: 4,
        };
        let x = DVector::from_element(4, 10.0); // c*x far above hi
        let y = DVector::zeros(4);
        let g = op.grad_data_term(&x, &y, 1.0).unwrap();
        assert_eq!(g, DVector::zeros(4));
    }

    #[test]
    fn synthesize_is_deterministic_and_unbiased() {
        let op = ForwardOperator::DenseLinear(DMatrix::identity(1, 1));
        let x = DVector::from_element(1, 2.0);
        let t1 = synthesize_observation(op.clone(), x.clone(), 0.3, &mut ChaCha8Rng::seed_from_u64(77))
            .unwrap();
        let t2 = synthesize_observation(op.clone(), x.clone(), 0.3, &mut ChaCha8Rng::seed_from_u64(77))
            .unwrap();
        assert_eq!(t1.y, t2.y);

        // Noiseless limit.
        let tiny =
            synthesize_observation(op.clone(), x.clone(), 1e-12, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
        assert!((tiny.y[0] - 2.0).abs() < 1e-9);

        // Empirical noise scale over many scalar draws.
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        let n = 100_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let t = synthesize_observation(op.clone(), x.clone(), 0.3, &mut rng).unwrap();
            let e = t.y[0] - 2.0;
            sum_sq += e * e;
        }
        let std = (sum_sq / n as f64).sqrt();
        assert!((std - 0.3).abs() / 0.3 < 0.02, "empirical std {std}");
    }

    #[test]
    fn to_matrix_agrees_with_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for op in all_linear_kinds(&mut rng) {
            let a = op.to_matrix().unwrap();
            let x = random_vec(&mut rng, op.input_dim());
            assert_relative_eq!(&a * &x, op.apply(&x).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let op = ForwardOperator::mask(vec![0, 1], 4).unwrap();
        assert!(op.apply(&DVector::zeros(3)).is_err());
        assert!(op.adjoint(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn compose_linear_iff_parts_linear() {
        let lin = ForwardOperator::Compose(vec![
            ForwardOperator::circular_blur(vec![1.0], 4).unwrap(),
            ForwardOperator::decimate(2, 4).unwrap(),
        ]);
        assert!(lin.is_linear());
        let nonlin = ForwardOperator::Compose(vec![
            ForwardOperator::circular_blur(vec![1.0], 4).unwrap(),
            ForwardOperator::ClipScale {
                c: 1.0,
                lo: -1.0,
                hi: 1.0,
                dim: 4,
            },
        ]);
        assert!(!nonlin.is_linear());
        assert!(nonlin.adjoint(&DVector::zeros(4)).is_err());
    }
}
