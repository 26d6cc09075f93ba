//! Analytic benchmark objectives for exercising the trust-region loop.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::ParamVector;
use crate::trustregion::{Objective, ObjectiveError};

/// Separable quadratic `½ Σ cᵢ θᵢ²` with curvatures log-spaced between 1 and
/// `condition`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    curvatures: Vec<f64>,
}

impl Quadratic {
    pub fn new(dim: usize, condition: f64) -> Self {
        let curvatures = (0..dim)
            .map(|i| {
                if dim == 1 {
                    1.0
                } else {
                    condition.powf(i as f64 / (dim - 1) as f64)
                }
            })
            .collect();
        Self { curvatures }
    }

    pub fn with_curvatures(curvatures: Vec<f64>) -> Self {
        Self { curvatures }
    }

    pub fn curvatures(&self) -> &[f64] {
        &self.curvatures
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&self.curvatures))
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.curvatures.len()
    }

    fn value_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), ObjectiveError> {
        theta.check_dim(self.dim()).map_err(|e| ObjectiveError::Failed(e.to_string()))?;
        let grad: Vec<f64> = theta
            .iter()
            .zip(&self.curvatures)
            .map(|(x, c)| c * x)
            .collect();
        let value = 0.5 * theta.iter().zip(&grad).map(|(x, g)| x * g).sum::<f64>();
        finite(value, grad)
    }
}

/// Chained Rosenbrock `Σ 100(θᵢ₊₁ − θᵢ²)² + (1 − θᵢ)²`, minimum 0 at all-ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rosenbrock {
    pub dim: usize,
}

impl Rosenbrock {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "Rosenbrock needs at least two coordinates");
        Self { dim }
    }

    /// Classic starting point `(−1.2, 1, −1.2, 1, …)`.
    pub fn standard_start(&self) -> ParamVector {
        ParamVector::from_dvector(nalgebra::DVector::from_fn(self.dim, |i, _| {
            if i % 2 == 0 {
                -1.2
            } else {
                1.0
            }
        }))
    }

    pub fn hessian(&self, theta: &ParamVector) -> DMatrix<f64> {
        let x = theta.as_slice();
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim - 1 {
            h[(i, i)] += 1200.0 * x[i] * x[i] - 400.0 * x[i + 1] + 2.0;
            h[(i + 1, i + 1)] += 200.0;
            h[(i, i + 1)] += -400.0 * x[i];
            h[(i + 1, i)] += -400.0 * x[i];
        }
        h
    }
}

impl Objective for Rosenbrock {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), ObjectiveError> {
        theta.check_dim(self.dim).map_err(|e| ObjectiveError::Failed(e.to_string()))?;
        let x = theta.as_slice();
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim];
        for i in 0..self.dim - 1 {
            let t = x[i + 1] - x[i] * x[i];
            let u = 1.0 - x[i];
            value += 100.0 * t * t + u * u;
            grad[i] += -400.0 * x[i] * t - 2.0 * u;
            grad[i + 1] += 200.0 * t;
        }
        finite(value, grad)
    }
}

fn finite(value: f64, grad: Vec<f64>) -> Result<(f64, ParamVector), ObjectiveError> {
    if !value.is_finite() {
        return Err(ObjectiveError::NonFinite);
    }
    let grad = ParamVector::new(grad).map_err(|_| ObjectiveError::NonFinite)?;
    Ok((value, grad))
}

/// Names accepted by the command line for the benchmark functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    Quadratic {
        dim: usize,
        #[serde(default = "default_condition")]
        condition: f64,
    },
    Rosenbrock {
        dim: usize,
    },
}

fn default_condition() -> f64 {
    10.0
}

impl TestFunction {
    pub fn dim(&self) -> usize {
        match self {
            TestFunction::Quadratic { dim, .. } | TestFunction::Rosenbrock { dim } => *dim,
        }
    }

    /// Conventional starting point: all-ones for the quadratic, the classic
    /// alternating point for Rosenbrock.
    pub fn default_start(&self) -> ParamVector {
        match self {
            TestFunction::Quadratic { dim, .. } => ParamVector::from_element(*dim, 1.0),
            TestFunction::Rosenbrock { dim } => Rosenbrock::new(*dim).standard_start(),
        }
    }

    /// Known minimizer.
    pub fn minimizer(&self) -> ParamVector {
        match self {
            TestFunction::Quadratic { dim, .. } => ParamVector::zeros(*dim),
            TestFunction::Rosenbrock { dim } => ParamVector::from_element(*dim, 1.0),
        }
    }

    pub fn build(&self) -> Box<dyn Objective + Send + Sync> {
        match self {
            TestFunction::Quadratic { dim, condition } => Box::new(Quadratic::new(*dim, *condition)),
            TestFunction::Rosenbrock { dim } => Box::new(Rosenbrock::new(*dim)),
        }
    }
}
