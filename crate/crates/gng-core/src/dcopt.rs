//! Data-consistency solvers for the pixel-space objectives.
//!
//! Both phases of the sampler minimize
//!
//! ```text
//! F(x) = w/2 ||y - A(x)||^2 + lambda/2 ||x - anchor||^2
//! ```
//!
//! with `w = 1/sigma_y^2` when the likelihood scaling is absorbed into the
//! data term (the default) and `w = 1` otherwise. The warm-start phase uses
//! `lambda = 0` (anchor ignored); the guided phase anchors at the decoded
//! denoiser prediction.
//!
//! Two solvers are provided: plain fixed-step gradient descent (exactly
//! `iterations` updates, deterministic), and the ridge closed form
//! `(w A^T A + lambda I)^{-1} (w A^T y + lambda anchor)` for linear
//! operators. The proximal map of the data-fidelity term dispatches to the
//! closed form when the operator is linear and to gradient descent
//! otherwise.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::ForwardTask;
use crate::schedule::SchedulePoint;

/// How the anchor weight lambda_t depends on the schedule point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaSpec {
    /// lambda_t = lambda for every t.
    Constant { lambda: f64 },
    /// lambda_t = base * (alpha_t / sigma_t)^2, growing with SNR as t -> 0.
    SnrScaled { base: f64 },
}

/// Resolve the anchor weight at a schedule point.
pub fn lambda_at(point: SchedulePoint, spec: &LambdaSpec) -> Result<f64> {
    match *spec {
        LambdaSpec::Constant { lambda } => {
            if lambda < 0.0 {
                Err(Error::Parameter(format!("lambda = {lambda} must be >= 0")))
            } else {
                Ok(lambda)
            }
        }
        LambdaSpec::SnrScaled { base } => {
            if point.sigma == 0.0 {
                Err(Error::DegenerateSnr)
            } else {
                Ok(base * point.snr())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    GradientDescent,
    ClosedForm,
}

/// Per-phase optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSpec {
    /// Fixed number of gradient steps (ignored by the closed form).
    pub iterations: usize,
    /// Fixed step size for gradient descent.
    pub learning_rate: f64,
    /// Anchor-weight schedule.
    pub lambda: LambdaSpec,
    pub solver: Solver,
    /// Weight the data term by 1/sigma_y^2 (on) or leave it unweighted (off).
    pub absorb_sigma_y: bool,
}

impl Default for OptimizeSpec {
    fn default() -> Self {
        Self {
            iterations: 50,
            learning_rate: 1e-3,
            lambda: LambdaSpec::Constant { lambda: 0.0 },
            solver: Solver::GradientDescent,
            absorb_sigma_y: true,
        }
    }
}

impl OptimizeSpec {
    pub fn data_weight(&self, sigma_y: f64) -> f64 {
        if self.absorb_sigma_y {
            1.0 / (sigma_y * sigma_y)
        } else {
            1.0
        }
    }
}

/// Precomputed linear-operator pieces shared across solves on one task.
struct LinearParts {
    gram: DMatrix<f64>,
    aty: DVector<f64>,
}

/// Data-consistency solver bound to one task.
///
/// Caches one Cholesky factorization of `(w A^T A + lambda I)` per distinct
/// `(w, lambda)` pair, so repeated proximal steps along a trajectory reuse
/// the factorization. The cache is internally synchronized; the solver is
/// freely shareable across sample threads.
pub struct DataConsistency<'a> {
    task: &'a ForwardTask,
    linear: Option<LinearParts>,
    factors: Mutex<HashMap<(u64, u64), Arc<Cholesky<f64, Dyn>>>>,
}

impl<'a> DataConsistency<'a> {
    pub fn new(task: &'a ForwardTask) -> Result<Self> {
        let linear = if task.operator.is_linear() {
            let a = task.operator.to_matrix()?;
            let gram = a.transpose() * &a;
            let aty = a.transpose() * &task.y;
            Some(LinearParts { gram, aty })
        } else {
            None
        };
        Ok(Self {
            task,
            linear,
            factors: Mutex::new(HashMap::new()),
        })
    }

    pub fn task(&self) -> &ForwardTask {
        self.task
    }

    fn objective(&self, x: &DVector<f64>, anchor: &DVector<f64>, w: f64, lambda: f64) -> f64 {
        let r = self.task.operator.apply(x).expect("dims checked") - &self.task.y;
        let mut obj = 0.5 * w * r.norm_squared();
        if lambda > 0.0 {
            obj += 0.5 * lambda * (x - anchor).norm_squared();
        }
        obj
    }

    /// Run the configured solver on `F(x)` starting from `init`.
    ///
    /// `lambda` is the resolved anchor weight (callers evaluate
    /// [`lambda_at`] at the current schedule point first); when it is zero
    /// the anchor is ignored.
    pub fn optimize(
        &self,
        anchor: &DVector<f64>,
        init: &DVector<f64>,
        spec: &OptimizeSpec,
        lambda: f64,
    ) -> Result<DVector<f64>> {
        let d = self.task.operator.input_dim();
        if init.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: init.len(),
            });
        }
        if lambda > 0.0 && anchor.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: anchor.len(),
            });
        }
        let w = spec.data_weight(self.task.sigma_y);
        match spec.solver {
            Solver::ClosedForm => self.closed_form(anchor, w, lambda),
            Solver::GradientDescent => {
                self.gradient_descent(anchor, init, w, lambda, spec.iterations, spec.learning_rate)
            }
        }
    }

    fn gradient_descent(
        &self,
        anchor: &DVector<f64>,
        init: &DVector<f64>,
        w: f64,
        lambda: f64,
        iterations: usize,
        lr: f64,
    ) -> Result<DVector<f64>> {
        let mut x = init.clone();
        let initial_obj = self.objective(&x, anchor, w, lambda);
        for iter in 0..iterations {
            let residual = self.task.operator.apply(&x)? - &self.task.y;
            let mut grad = self.task.operator.vjp(&x, &residual)? * w;
            if lambda > 0.0 {
                grad += (&x - anchor) * lambda;
            }
            x -= grad * lr;
            let obj = self.objective(&x, anchor, w, lambda);
            if !obj.is_finite() || obj > 10.0 * initial_obj + 1e-9 {
                return Err(Error::Divergence { iteration: iter });
            }
        }
        Ok(x)
    }

    fn closed_form(&self, anchor: &DVector<f64>, w: f64, lambda: f64) -> Result<DVector<f64>> {
        let parts = self.linear.as_ref().ok_or(Error::UnsupportedSolver)?;
        let factor = self.factor(parts, w, lambda)?;
        let mut rhs = &parts.aty * w;
        if lambda > 0.0 {
            rhs += anchor * lambda;
        }
        Ok(factor.solve(&rhs))
    }

    fn factor(
        &self,
        parts: &LinearParts,
        w: f64,
        lambda: f64,
    ) -> Result<Arc<Cholesky<f64, Dyn>>> {
        let key = (w.to_bits(), lambda.to_bits());
        let mut cache = self.factors.lock().unwrap();
        if let Some(f) = cache.get(&key) {
            return Ok(f.clone());
        }
        let d = parts.gram.nrows();
        let mut m = &parts.gram * w;
        for i in 0..d {
            m[(i, i)] += lambda;
        }
        let f = Arc::new(Cholesky::new(m).ok_or_else(|| {
            Error::Numerical(
                "w A^T A + lambda I is not positive definite; use lambda > 0 or gradient descent"
                    .into(),
            )
        })?);
        if cache.len() > 1024 {
            cache.clear();
        }
        cache.insert(key, f.clone());
        Ok(f)
    }

    /// Proximal map of the data-fidelity term:
    /// argmin_x w/2 ||y - A(x)||^2 + lambda_t/2 ||x - v||^2.
    ///
    /// Exact (closed form) for linear operators; fixed-step gradient descent
    /// run to a tight gradient tolerance otherwise.
    pub fn prox(&self, v: &DVector<f64>, lambda_t: f64, absorb_sigma_y: bool) -> Result<DVector<f64>> {
        if lambda_t <= 0.0 {
            return Err(Error::Parameter(format!("lambda_t = {lambda_t} must be > 0")));
        }
        let w = if absorb_sigma_y {
            1.0 / (self.task.sigma_y * self.task.sigma_y)
        } else {
            1.0
        };
        if self.linear.is_some() {
            return self.closed_form(v, w, lambda_t);
        }
        // Nonlinear fallback: step 1/L with L bounding the objective
        // curvature; stop on a small gradient or the iteration cap.
        let j = self.task.operator.jacobian_bound();
        let lip = w * j * j + lambda_t;
        let lr = 1.0 / lip;
        let tol = 1e-12 * lip * (1.0 + v.norm());
        let mut x = v.clone();
        for _ in 0..20_000 {
            let residual = self.task.operator.apply(&x)? - &self.task.y;
            let grad = self.task.operator.vjp(&x, &residual)? * w + (&x - v) * lambda_t;
            if grad.norm() <= tol {
                break;
            }
            x -= grad * lr;
        }
        Ok(x)
    }
}

/// One-shot [`DataConsistency::optimize`] without reusing factorizations.
pub fn optimize(
    task: &ForwardTask,
    anchor: &DVector<f64>,
    init: &DVector<f64>,
    spec: &OptimizeSpec,
    lambda: f64,
) -> Result<DVector<f64>> {
    DataConsistency::new(task)?.optimize(anchor, init, spec, lambda)
}

/// One-shot proximal map of the data-fidelity term (sigma_y scaling
/// absorbed into the data term).
pub fn prox_data(task: &ForwardTask, v: &DVector<f64>, lambda_t: f64) -> Result<DVector<f64>> {
    DataConsistency::new(task)?.prox(v, lambda_t, true)
}
