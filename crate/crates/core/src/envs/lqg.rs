use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::EnvError;

/// Linear dynamics `x' = Ax + Bu + w`, `w ~ N(0, W)`, with stage cost
/// `xᵀQx + uᵀRu` and `x₀ ~ N(0, Σ₀)`. Rewards are negated costs.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgEnv {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
    init_cov: DMatrix<f64>,
    noise_sqrt: DMatrix<f64>,
    init_sqrt: DMatrix<f64>,
    pub gamma: f64,
    pub horizon: usize,
}

/// Optimal time-varying feedback `u_t = −K_t x_t` and its expected
/// discounted cost.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub gains: Vec<DMatrix<f64>>,
    pub cost: f64,
}

impl LqgEnv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        noise_cov: DMatrix<f64>,
        init_cov: DMatrix<f64>,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self, EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidModel(m.to_string()));
        let n = a.nrows();
        let m = b.ncols();
        if n == 0 || m == 0 || a.ncols() != n || b.nrows() != n {
            return bad("A must be n×n and B must be n×m");
        }
        if q.shape() != (n, n) || noise_cov.shape() != (n, n) || init_cov.shape() != (n, n) || r.shape() != (m, m) {
            return bad("Q, W, Σ₀ must be n×n and R must be m×m");
        }
        let all = [&a, &b, &q, &r, &noise_cov, &init_cov];
        if all.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return bad("matrices must be finite");
        }
        if !(gamma > 0.0 && gamma <= 1.0) || horizon == 0 {
            return bad("need gamma in (0, 1] and a positive horizon");
        }
        let noise_sqrt = psd_sqrt(&noise_cov).ok_or(EnvError::InvalidModel("W must be symmetric PSD".into()))?;
        let init_sqrt = psd_sqrt(&init_cov).ok_or(EnvError::InvalidModel("Σ₀ must be symmetric PSD".into()))?;
        if psd_sqrt(&q).is_none() {
            return bad("Q must be symmetric PSD");
        }
        if !is_symmetric(&r) || r.clone().cholesky().is_none() {
            return bad("R must be symmetric positive definite");
        }
        let env = Self {
            a,
            b,
            q,
            r,
            noise_cov,
            init_cov,
            noise_sqrt,
            init_sqrt,
            gamma,
            horizon,
        };
        if !env.is_controllable() {
            return bad("(A, B) is not controllable");
        }
        Ok(env)
    }

    /// A lightly damped double integrator with one force input.
    pub fn double_integrator(gamma: f64, horizon: usize) -> Self {
        let dt = 0.1;
        Self::new(
            DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]),
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 0.1),
            DMatrix::identity(2, 2) * 0.01,
            DMatrix::identity(2, 2),
            gamma,
            horizon,
        )
        .expect("double integrator is a valid model")
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn is_controllable(&self) -> bool {
        let n = self.state_dim();
        let m = self.action_dim();
        let mut ctrb = DMatrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for i in 0..n {
            ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        ctrb.rank(1e-10 * ctrb.norm().max(1.0)) == n
    }

    /// Backward Riccati recursion from `P_H = 0`.
    pub fn riccati(&self) -> RiccatiSolution {
        let g = self.gamma;
        let mut p = DMatrix::zeros(self.state_dim(), self.state_dim());
        let mut c = 0.0;
        let mut gains = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let btp = self.b.transpose() * &p;
            let s = &self.r + &btp * &self.b * g;
            let k = s
                .clone()
                .cholesky()
                .expect("R + γBᵀPB is positive definite")
                .solve(&(&btp * &self.a * g));
            c = g * ((&p * &self.noise_cov).trace() + c);
            let closed = &self.a - &self.b * &k;
            let next = &self.q + k.transpose() * &self.r * &k + closed.transpose() * &p * &closed * g;
            p = (&next + next.transpose()) * 0.5;
            gains.push(k);
        }
        gains.reverse();
        RiccatiSolution {
            gains,
            cost: (&p * &self.init_cov).trace() + c,
        }
    }

    /// Expected discounted cost of `u = Kx + diag(σ)ε` over the horizon, by
    /// propagating the state covariance.
    pub fn linear_policy_cost(&self, gain: &DMatrix<f64>, log_std: &[f64]) -> f64 {
        assert_eq!(gain.shape(), (self.action_dim(), self.state_dim()));
        assert_eq!(log_std.len(), self.action_dim());
        let noise = DMatrix::from_diagonal(&DVector::from_iterator(
            log_std.len(),
            log_std.iter().map(|l| (2.0 * l).exp()),
        ));
        let closed = &self.a + &self.b * gain;
        let stage = &self.q + gain.transpose() * &self.r * gain;
        let action_noise_cost = (&self.r * &noise).trace();
        let injected = &self.b * &noise * self.b.transpose() + &self.noise_cov;
        let mut sigma = self.init_cov.clone();
        let mut total = 0.0;
        let mut discount = 1.0;
        for _ in 0..self.horizon {
            total += discount * ((&stage * &sigma).trace() + action_noise_cost);
            sigma = &closed * &sigma * closed.transpose() + &injected;
            discount *= self.gamma;
        }
        total
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.init_sqrt * standard_normal(self.state_dim(), rng)
    }

    /// Stage cost at `(x, u)` and the sampled next state.
    pub fn step<R: Rng + ?Sized>(&self, x: &DVector<f64>, u: &DVector<f64>, rng: &mut R) -> (f64, DVector<f64>) {
        let cost = (x.transpose() * &self.q * x)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)];
        let next = &self.a * x + &self.b * u + &self.noise_sqrt * standard_normal(self.state_dim(), rng);
        (cost, next)
    }
}

fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).norm() <= 1e-12 * m.norm().max(1.0)
}

/// `V·diag(√λ)` for a symmetric PSD matrix, so that `S·Sᵀ = M`.
fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if !is_symmetric(m) {
        return None;
    }
    let eig = m.clone().symmetric_eigen();
    let scale = m.norm().max(1.0);
    if eig.eigenvalues.iter().any(|l| *l < -1e-12 * scale) {
        return None;
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}
