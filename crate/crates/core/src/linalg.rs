//! Vector algebra, symmetric positive definite operators and a plain
//! conjugate-gradient solver.
//!
//! Every linear system in the crate (`B⁻¹∇f`, `F⁻¹∇f`) goes through
//! [`cg_solve`]. Operators are matrix-free by default; [`DenseSpd`] is the
//! materialized form used for BFGS matrices and test oracles.

use std::fmt;
use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest dimension for which operators may be materialized densely.
pub const MAX_DENSE_DIM: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite entry at index {index}")]
    NonFiniteEntry { index: usize },
    #[error("conjugate gradient produced a non-finite iterate after {iterations} iterations")]
    NonFiniteIterate { iterations: usize },
    #[error("operator failed the symmetry probe (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("operator failed the positive-definiteness probe (vᵀAv = {value:e})")]
    NotPositiveDefinite { value: f64 },
    #[error("invalid solver tolerance {0}")]
    InvalidTolerance(f64),
}

/// Flat parameter vector `θ` (also used for steps and gradients).
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(DVector<f64>);

impl ParamVector {
    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn new(entries: Vec<f64>) -> Result<Self, LinalgError> {
        if let Some(index) = entries.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFiniteEntry { index });
        }
        Ok(Self(DVector::from_vec(entries)))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn from_element(dim: usize, value: f64) -> Self {
        Self(DVector::from_element(dim, value))
    }

    /// `i`-th canonical basis vector.
    pub fn unit(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    pub fn from_dvector(v: DVector<f64>) -> Self {
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.0.as_mut_slice()
    }

    pub fn as_dvector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_dvector(self) -> DVector<f64> {
        self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.as_slice().to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(&self.0 * alpha)
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Self) {
        self.0.axpy(alpha, &x.0, 1.0);
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), LinalgError> {
        if self.len() == expected {
            Ok(())
        } else {
            Err(LinalgError::DimensionMismatch {
                expected,
                actual: self.len(),
            })
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ParamVector").field(&self.as_slice()).finish()
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = LinalgError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.to_vec()
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add<&ParamVector> for &ParamVector {
    type Output = ParamVector;

    fn add(self, rhs: &ParamVector) -> ParamVector {
        ParamVector(&self.0 + &rhs.0)
    }
}

impl Sub<&ParamVector> for &ParamVector {
    type Output = ParamVector;

    fn sub(self, rhs: &ParamVector) -> ParamVector {
        ParamVector(&self.0 - &rhs.0)
    }
}

impl Add for ParamVector {
    type Output = ParamVector;

    fn add(self, rhs: ParamVector) -> ParamVector {
        ParamVector(self.0 + rhs.0)
    }
}

impl Sub for ParamVector {
    type Output = ParamVector;

    fn sub(self, rhs: ParamVector) -> ParamVector {
        ParamVector(self.0 - rhs.0)
    }
}

impl AddAssign<&ParamVector> for ParamVector {
    fn add_assign(&mut self, rhs: &ParamVector) {
        self.0 += &rhs.0;
    }
}

impl Mul<f64> for &ParamVector {
    type Output = ParamVector;

    fn mul(self, rhs: f64) -> ParamVector {
        ParamVector(&self.0 * rhs)
    }
}

impl Mul<f64> for ParamVector {
    type Output = ParamVector;

    fn mul(self, rhs: f64) -> ParamVector {
        ParamVector(self.0 * rhs)
    }
}

impl Neg for ParamVector {
    type Output = ParamVector;

    fn neg(self) -> ParamVector {
        ParamVector(-self.0)
    }
}

impl Neg for &ParamVector {
    type Output = ParamVector;

    fn neg(self) -> ParamVector {
        ParamVector(-&self.0)
    }
}

/// A symmetric positive definite linear map `v ↦ Mv`.
///
/// Implementors promise symmetry and positive definiteness; use
/// [`probe_symmetry`] and [`probe_positive_definite`] to check an operator
/// from outside.
pub trait SpdOperator {
    fn dim(&self) -> usize;

    fn apply(&self, v: &ParamVector) -> ParamVector;

    /// Dense materialization, if the operator supports it at this size.
    fn to_dense(&self) -> Option<DMatrix<f64>> {
        let d = self.dim();
        if d > MAX_DENSE_DIM {
            return None;
        }
        let mut m = DMatrix::zeros(d, d);
        for j in 0..d {
            let col = self.apply(&ParamVector::unit(d, j));
            m.set_column(j, col.as_dvector());
        }
        Some(m)
    }
}

impl<T: SpdOperator + ?Sized> SpdOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &ParamVector) -> ParamVector {
        (**self).apply(v)
    }

    fn to_dense(&self) -> Option<DMatrix<f64>> {
        (**self).to_dense()
    }
}

impl<T: SpdOperator + ?Sized> SpdOperator for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &ParamVector) -> ParamVector {
        (**self).apply(v)
    }

    fn to_dense(&self) -> Option<DMatrix<f64>> {
        (**self).to_dense()
    }
}

/// The identity map on `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Identity(pub usize);

impl SpdOperator for Identity {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, v: &ParamVector) -> ParamVector {
        v.clone()
    }

    fn to_dense(&self) -> Option<DMatrix<f64>> {
        (self.0 <= MAX_DENSE_DIM).then(|| DMatrix::identity(self.0, self.0))
    }
}

/// Dense symmetric matrix. Construction does not verify definiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSpd(DMatrix<f64>);

impl DenseSpd {
    pub fn new(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::DimensionMismatch {
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        if let Some(index) = m.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFiniteEntry { index });
        }
        let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);
        let asymmetry = (&m - m.transpose()).amax() / scale;
        if asymmetry > 1e-10 {
            return Err(LinalgError::NotSymmetric { asymmetry });
        }
        Ok(Self(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Smallest eigenvalue of the symmetric matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        self.0
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

impl SpdOperator for DenseSpd {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &ParamVector) -> ParamVector {
        ParamVector(&self.0 * v.as_dvector())
    }

    fn to_dense(&self) -> Option<DMatrix<f64>> {
        Some(self.0.clone())
    }
}

/// Operator backed by a closure; the closure must be symmetric and positive
/// definite.
pub struct FnOperator<F> {
    dim: usize,
    apply: F,
}

impl<F: Fn(&ParamVector) -> ParamVector> FnOperator<F> {
    pub fn new(dim: usize, apply: F) -> Self {
        Self { dim, apply }
    }
}

impl<F: Fn(&ParamVector) -> ParamVector> SpdOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &ParamVector) -> ParamVector {
        (self.apply)(v)
    }
}

/// `vᵀ M v` (no factor ½).
pub fn quadratic_form<A: SpdOperator + ?Sized>(
    op: &A,
    v: &ParamVector,
) -> Result<f64, LinalgError> {
    v.check_dim(op.dim())?;
    Ok(v.dot(&op.apply(v)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    pub rel_tol: f64,
    /// `None` means `min(10·d, 250)`.
    pub max_iters: Option<usize>,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iters: None,
        }
    }
}

impl CgConfig {
    pub fn iteration_limit(&self, dim: usize) -> usize {
        self.max_iters.unwrap_or_else(|| (10 * dim).min(250)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport {
    pub solution: ParamVector,
    pub iterations: usize,
    /// `‖b − A·solution‖₂`, recomputed from the returned solution.
    pub residual_norm: f64,
    /// False when the iteration limit was hit before the tolerance.
    pub converged: bool,
}

/// Solves `A x = b` by unpreconditioned conjugate gradients from `x₀ = 0`.
///
/// Stops once the recursive residual satisfies `‖r‖ ≤ rel_tol·‖b‖` or after
/// `max_iters` iterations. The operator is assumed to have passed
/// [`probe_symmetry`]; an indefinite operator usually surfaces as
/// [`LinalgError::NonFiniteIterate`].
pub fn cg_solve<A: SpdOperator + ?Sized>(
    op: &A,
    b: &ParamVector,
    rel_tol: f64,
    max_iters: usize,
) -> Result<CgReport, LinalgError> {
    let d = op.dim();
    b.check_dim(d)?;
    if !(rel_tol > 0.0 && rel_tol.is_finite()) {
        return Err(LinalgError::InvalidTolerance(rel_tol));
    }
    if let Some(index) = b.iter().position(|x| !x.is_finite()) {
        return Err(LinalgError::NonFiniteEntry { index });
    }

    let b_norm = b.norm();
    let mut x = ParamVector::zeros(d);
    if b_norm == 0.0 {
        return Ok(CgReport {
            solution: x,
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
        });
    }
    let target = rel_tol * b_norm;

    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        let ap = op.apply(&p);
        let pap = p.dot(&ap);
        let alpha = rs / pap;
        if !alpha.is_finite() || pap <= 0.0 {
            return Err(LinalgError::NonFiniteIterate { iterations });
        }
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        iterations += 1;
        if !x.is_finite() || !r.is_finite() {
            return Err(LinalgError::NonFiniteIterate { iterations });
        }
        let rs_next = r.norm_squared();
        if rs_next.sqrt() <= target {
            converged = true;
            break;
        }
        let beta = rs_next / rs;
        p = &r + &(&p * beta);
        rs = rs_next;
    }

    let residual_norm = (b - &op.apply(&x)).norm();
    if !residual_norm.is_finite() {
        return Err(LinalgError::NonFiniteIterate { iterations });
    }
    Ok(CgReport {
        solution: x,
        iterations,
        residual_norm,
        converged,
    })
}

/// [`cg_solve`] with a [`CgConfig`].
pub fn cg_solve_with<A: SpdOperator + ?Sized>(
    op: &A,
    b: &ParamVector,
    cfg: &CgConfig,
) -> Result<CgReport, LinalgError> {
    cg_solve(op, b, cfg.rel_tol, cfg.iteration_limit(op.dim()))
}

fn random_probe<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> ParamVector {
    ParamVector::from_dvector(DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
}

/// Checks `⟨u, Av⟩ = ⟨Au, v⟩` to relative tolerance `rel_tol` on random probes.
pub fn probe_symmetry<A: SpdOperator + ?Sized, R: Rng + ?Sized>(
    op: &A,
    rng: &mut R,
    probes: usize,
    rel_tol: f64,
) -> Result<(), LinalgError> {
    let d = op.dim();
    for _ in 0..probes {
        let u = random_probe(rng, d);
        let v = random_probe(rng, d);
        let au = op.apply(&u);
        let av = op.apply(&v);
        let lhs = u.dot(&av);
        let rhs = au.dot(&v);
        let scale = (u.norm() * av.norm()).max(au.norm() * v.norm()).max(f64::MIN_POSITIVE);
        let asymmetry = (lhs - rhs).abs() / scale;
        if !(asymmetry <= rel_tol) {
            return Err(LinalgError::NotSymmetric { asymmetry });
        }
    }
    Ok(())
}

/// Checks `⟨v, Av⟩ > 0` on random nonzero probes.
pub fn probe_positive_definite<A: SpdOperator + ?Sized, R: Rng + ?Sized>(
    op: &A,
    rng: &mut R,
    probes: usize,
) -> Result<(), LinalgError> {
    let d = op.dim();
    for _ in 0..probes {
        let v = random_probe(rng, d);
        if v.norm() == 0.0 {
            continue;
        }
        let value = quadratic_form(op, &v)?;
        if !(value > 0.0) {
            return Err(LinalgError::NotPositiveDefinite { value });
        }
    }
    Ok(())
}
