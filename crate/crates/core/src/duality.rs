//! The dual control system of a hidden Markov model and the tests built on
//! it.
//!
//! A function `f` on the state space is estimated through the backward
//! equation `-dY = (A Y + H U + sum_j H^j . V^j) dt - V dZ`, `Y_T = f`; the
//! estimator is `S_T = mu(Y_0) - int U dZ`. The set of terminal conditions
//! that can be steered to constants is the controllable subspace, and its
//! dimension decides observability.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // float methods come from `Float` only without std
use num_traits::Float;

use crate::error::{Error, Result};
use crate::filters::{self, Splitting};
use crate::linalg::{self, expm};
use crate::models::HmmModel;
use crate::rng::RngSeed;
use crate::sim;
use crate::stats::{Estimate, RunningStats};

/// Singular values below `RANK_TOL * sigma_max` count as zero.
pub const RANK_TOL: f64 = 1e-9;

/// Projection residual allowed for subspace membership.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

/// A linear subspace of functions on the state space, held as an
/// orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    pub basis: DMatrix<f64>,
    pub tol: f64,
}

impl Subspace {
    pub fn from_span(vectors: &DMatrix<f64>, tol: f64) -> Self {
        Subspace {
            basis: linalg::range_basis(vectors, tol),
            tol,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * v)
    }

    /// `|v - P v|` relative to `max(|v|, 1)`.
    pub fn residual(&self, v: &DVector<f64>) -> f64 {
        (v - self.project(v)).norm() / v.norm().max(1.0)
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        self.residual(v) <= MEMBERSHIP_TOL
    }

    pub fn complement(&self) -> Subspace {
        Subspace {
            basis: linalg::orthogonal_complement(&self.basis),
            tol: self.tol,
        }
    }
}

/// Smallest subspace containing the constants and closed under `f -> A f`
/// and `f -> H^j . f` for every observation column.
///
/// Each pass applies every generator to every current basis vector and
/// re-orthonormalizes; the loop stops once a pass adds nothing.
pub fn controllable_subspace(model: &HmmModel, tol: f64) -> Subspace {
    let d = model.dim();
    let a = model.a();
    let h = model.h();
    let mut basis = DMatrix::from_element(d, 1, 1.0 / (d as f64).sqrt());
    for _ in 0..=d {
        let r = basis.ncols();
        let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
        for f in basis.column_iter() {
            cols.push(a * f);
            for j in 0..h.ncols() {
                cols.push(h.column(j).component_mul(&f));
            }
        }
        basis = linalg::range_basis(&DMatrix::from_columns(&cols), tol);
        if basis.ncols() == r {
            break;
        }
    }
    Subspace { basis, tol }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityReport {
    pub observable: bool,
    pub controllable: Subspace,
    /// Orthonormal basis of the complement of the controllable subspace:
    /// signed measures (of zero total mass) that no observation can detect.
    pub unobservable_directions: DMatrix<f64>,
}

pub fn is_observable(model: &HmmModel, tol: f64) -> ObservabilityReport {
    let c = controllable_subspace(model, tol);
    let unobservable_directions = c.complement().basis;
    ObservabilityReport {
        observable: c.dim() == model.dim(),
        controllable: c,
        unobservable_directions,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilizabilityReport {
    pub stabilizable: bool,
    /// Right null space of `A`.
    pub null_space: DMatrix<f64>,
    /// Projection residual of each null-space basis vector onto the
    /// controllable subspace.
    pub residuals: Vec<f64>,
    pub controllable_dim: usize,
}

/// Stabilizable iff the null space of `A` lies inside the controllable
/// subspace.
pub fn is_stabilizable(model: &HmmModel, tol: f64) -> StabilizabilityReport {
    let c = controllable_subspace(model, tol);
    let null_space = linalg::null_space(model.a(), tol);
    let residuals: Vec<f64> = null_space.column_iter().map(|v| c.residual(&v.into_owned())).collect();
    StabilizabilityReport {
        stabilizable: residuals.iter().all(|&r| r <= MEMBERSHIP_TOL),
        null_space,
        residuals,
        controllable_dim: c.dim(),
    }
}

/// Monte-Carlo estimate of the controllability gramian.
#[derive(Debug, Clone, PartialEq)]
pub struct GramianEstimate {
    pub mean: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    pub n_paths: usize,
    /// Eigenvalues of the symmetrized mean, largest first.
    pub eigenvalues: Vec<f64>,
    /// Standard error of `v^T W v` across paths for each eigenvector `v`.
    pub eigen_stderr: Vec<f64>,
}

impl GramianEstimate {
    /// Ten times the largest entrywise standard error. Dominated by the
    /// fluctuations of the leading direction, so it hides small but
    /// significant eigenvalues; [`GramianEstimate::numerical_rank`] uses
    /// per-direction errors instead.
    pub fn entrywise_noise_floor(&self) -> f64 {
        10.0 * self.stderr.amax()
    }

    /// Number of eigenvalues above `threshold`.
    pub fn rank_above(&self, threshold: f64) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > threshold).count()
    }

    /// Eigenvalues above ten times the noise floor of the null directions.
    ///
    /// Every sample is positive semidefinite, so a direction with mean
    /// near zero is one that no path excites; its standard error measures
    /// round-off, not sampling noise. Significant directions are compared
    /// against that floor rather than their own (heavy-tailed) spread.
    pub fn numerical_rank(&self) -> usize {
        let top = self.eigenvalues.first().cloned().unwrap_or(0.0).abs();
        let roundoff = 1e-9 * top;
        let null_se = self
            .eigenvalues
            .iter()
            .zip(&self.eigen_stderr)
            .filter(|(l, _)| **l <= roundoff)
            .map(|(_, se)| *se)
            .fold(0.0, f64::max);
        let threshold = roundoff.max(10.0 * null_se);
        self.eigenvalues.iter().filter(|&&l| l > threshold).count()
    }
}

/// `W = 1 1^T + E~[ sum_k Psi_k^T H H^T Psi_k dt ]` with `Z` a Brownian
/// motion (reference measure) and `Psi` the Zakai solution operator.
pub fn gramian_mc(model: &HmmModel, horizon: f64, dt: f64, n_paths: usize, seed: RngSeed) -> Result<GramianEstimate> {
    if n_paths < 2 {
        return Err(Error::invalid("gramian_mc needs at least 2 paths"));
    }
    let d = model.dim();
    let m = model.obs_dim();
    let hht = model.h() * model.h().transpose();
    let split = Splitting::new(model, dt);
    let mut acc = vec![RunningStats::new(); d * d];
    let mut samples = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let z = sim::reference_increments(m, horizon, dt, &mut seed.path(p as u64))?;
        let ops = filters::zakai_operator_with(&split, &z);
        let mut w = DMatrix::from_element(d, d, 1.0);
        for k in 0..z.n_steps() {
            let psi = ops.matrix(k);
            w += psi.transpose() * &hht * &psi * dt;
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(p, "gramian integrand overflowed"));
        }
        for (a, x) in acc.iter_mut().zip(w.iter()) {
            a.push(*x);
        }
        samples.push(w);
    }
    let mean = DMatrix::from_iterator(d, d, acc.iter().map(|a| a.mean()));
    let eig = linalg::symmetrize(&mean).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap_or(core::cmp::Ordering::Equal));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigen_stderr = order
        .iter()
        .map(|&i| {
            let v = eig.eigenvectors.column(i);
            let mut s = RunningStats::new();
            for w in &samples {
                s.push(v.dot(&(w * v)));
            }
            s.stderr()
        })
        .collect();
    Ok(GramianEstimate {
        stderr: DMatrix::from_iterator(d, d, acc.iter().map(|a| a.stderr())),
        mean,
        n_paths,
        eigenvalues,
        eigen_stderr,
    })
}

/// Solution of a deterministic dual LQ problem on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLqSolution {
    pub dt: f64,
    pub cost: f64,
    /// `f^T Sigma_T f`, the value predicted by the Riccati equation.
    pub riccati_value: f64,
    pub y: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
}

impl DualLqSolution {
    /// Piecewise-constant version of the feedback control (interval
    /// averages of the nodal values).
    pub fn piecewise_control(&self) -> DeterministicControl {
        let n = self.u.len() - 1;
        let m = self.u[0].len();
        let values = DMatrix::from_fn(m, n, |j, k| 0.5 * (self.u[k][j] + self.u[k + 1][j]));
        DeterministicControl { dt: self.dt, values }
    }
}

/// Generic deterministic LQ dual: minimize
/// `y_0^T S_0 y_0 + int (y^T q(t) y + |u|^2) dt` subject to
/// `-dy/dt = A y + H u`, `y_T = f`. The optimal control is
/// `u = -H^T S_t y` with `S` the Riccati solution driven by `q(t)`.
fn solve_dual_lq(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: impl Fn(f64) -> DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    f: &DVector<f64>,
    horizon: f64,
    dt: f64,
) -> Result<DualLqSolution> {
    let n = sim::grid_steps(horizon, dt)?;
    let d = a.nrows();
    linalg::check_len("f", f, d)?;
    // The backward sweep needs Sigma at half steps; run the DRE at dt/2.
    let fine = filters::dre_path(a, h, &q, sigma0, 0.5 * dt, 2 * n)?;
    let hht = h * h.transpose();
    // reversed time s = T - t; state (y, running cost)
    let rhs = |s: f64, state: &DVector<f64>| -> DVector<f64> {
        let idx = ((horizon - s) / (0.5 * dt)).round() as usize;
        let sig = &fine[idx.min(2 * n)];
        let y = state.rows(0, d).into_owned();
        let dy = (a - &hht * sig) * &y;
        let u = h.transpose() * sig * &y;
        let dc = u.norm_squared() + y.dot(&(q(horizon - s) * &y));
        let mut out = DVector::zeros(d + 1);
        out.rows_mut(0, d).copy_from(&dy);
        out[d] = dc;
        out
    };
    let mut state = DVector::zeros(d + 1);
    state.rows_mut(0, d).copy_from(f);
    let mut ys = vec![DVector::zeros(d); n + 1];
    ys[n] = f.clone();
    for step in 0..n {
        state = linalg::rk4_step(&rhs, step as f64 * dt, &state, dt);
        ys[n - step - 1] = state.rows(0, d).into_owned();
    }
    let y0 = &ys[0];
    let cost = y0.dot(&(sigma0 * y0)) + state[d];
    let sigma: Vec<DMatrix<f64>> = fine.iter().step_by(2).cloned().collect();
    let u = ys.iter().zip(&sigma).map(|(y, s)| -(h.transpose() * s * y)).collect();
    let riccati_value = f.dot(&(&sigma[n] * f));
    Ok(DualLqSolution {
        dt,
        cost,
        riccati_value,
        y: ys,
        u,
        sigma,
    })
}

/// Dual of the Kalman-Bucy filter: its optimal value is `f^T Sigma_T f`.
pub fn dual_lq_linear_gaussian(model: &crate::models::LinearGaussianModel, f: &DVector<f64>, horizon: f64, dt: f64) -> Result<DualLqSolution> {
    let q = model.q();
    solve_dual_lq(&model.a_mat, &model.h_mat, |_| q.clone(), &model.cov0, f, horizon, dt)
}

/// Deterministic-control dual for a Markov chain: the running weight is
/// `E[Q(X_t)]` along the exact marginals and the initial weight is the prior
/// covariance `diag(mu) - mu mu^T`.
pub fn dual_deterministic_markov(model: &HmmModel, f: &DVector<f64>, horizon: f64, dt: f64) -> Result<DualLqSolution> {
    let mu = model.prior.as_vector();
    let cov0 = DMatrix::from_diagonal(mu) - mu * mu.transpose();
    let a_t = model.a().transpose();
    let q = |t: f64| model.rate.expected_q(&(expm(&(&a_t * t)) * mu));
    solve_dual_lq(model.a(), model.h(), q, &cov0, f, horizon, dt)
}

/// Control that is constant on each grid interval; column `k` acts on
/// `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicControl {
    pub dt: f64,
    pub values: DMatrix<f64>,
}

impl DeterministicControl {
    pub fn zeros(m: usize, horizon: f64, dt: f64) -> Result<Self> {
        let n = sim::grid_steps(horizon, dt)?;
        Ok(DeterministicControl {
            dt,
            values: DMatrix::zeros(m, n),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps() as f64
    }
}

/// Both sides of the duality principle for one deterministic control.
#[derive(Debug, Clone, PartialEq)]
pub struct DualityCheck {
    /// `J_T(u)`, computed from exact marginals.
    pub j_value: f64,
    /// `E|f(X_T) - S_T|^2` by Monte Carlo.
    pub mse: Estimate,
    /// `mu(y_0)`, the unbiased constant of the estimator.
    pub mean_y0: f64,
    /// Constant actually used in the estimator.
    pub bias_constant: f64,
    pub y: Vec<DVector<f64>>,
}

impl DualityCheck {
    /// `J + (mu(y_0) - b)^2`, the predicted MSE of the estimator with
    /// constant `b`.
    pub fn predicted_mse(&self) -> f64 {
        self.j_value + (self.mean_y0 - self.bias_constant).powi(2)
    }

    pub fn z_score(&self) -> f64 {
        (self.mse.mean - self.predicted_mse()) / self.mse.stderr.max(f64::MIN_POSITIVE)
    }
}

/// Solves `-dy/dt = A y + H u` exactly on each interval and returns `y` at
/// the nodes and at the interval midpoints.
fn backward_dual_flow(model: &HmmModel, u: &DeterministicControl, f: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let d = model.dim();
    let m = model.obs_dim();
    let n = u.n_steps();
    let mut gen = DMatrix::zeros(d + m, d + m);
    gen.view_mut((0, 0), (d, d)).copy_from(model.a());
    gen.view_mut((0, d), (d, m)).copy_from(model.h());
    let full = expm(&(&gen * u.dt));
    let half = expm(&(&gen * (0.5 * u.dt)));
    let step = |e: &DMatrix<f64>, y: &DVector<f64>, uk: DVector<f64>| -> DVector<f64> {
        e.view((0, 0), (d, d)) * y + e.view((0, d), (d, m)) * uk
    };
    let mut nodes = vec![DVector::zeros(d); n + 1];
    let mut mids = vec![DVector::zeros(d); n];
    nodes[n] = f.clone();
    for k in (0..n).rev() {
        let uk = u.values.column(k).into_owned();
        mids[k] = step(&half, &nodes[k + 1], uk.clone());
        nodes[k] = step(&full, &nodes[k + 1], uk);
    }
    (nodes, mids)
}

/// `J_T(u) = Var_mu(y_0) + int E[Gamma y_t (X_t)] + |u_t|^2 dt` by Simpson's
/// rule on each interval with exact marginals.
pub fn dual_cost(model: &HmmModel, u: &DeterministicControl, f: &DVector<f64>) -> Result<(f64, Vec<DVector<f64>>)> {
    linalg::check_len("f", f, model.dim())?;
    if u.values.nrows() != model.obs_dim() {
        return Err(Error::invalid("control has the wrong number of channels"));
    }
    let (nodes, mids) = backward_dual_flow(model, u, f);
    let dt = u.dt;
    let mu = model.prior.as_vector();
    let half = expm(&(model.a().transpose() * (0.5 * dt)));
    let energy = |rho: &DVector<f64>, y: &DVector<f64>| y.dot(&(model.rate.expected_q(rho) * y));
    let y0 = &nodes[0];
    let mut j = mu.dot(&y0.map(|v| v * v)) - mu.dot(y0).powi(2);
    let mut rho = mu.clone();
    for k in 0..u.n_steps() {
        let rho_mid = &half * &rho;
        let rho_next = &half * &rho_mid;
        let running = (energy(&rho, &nodes[k]) + 4.0 * energy(&rho_mid, &mids[k]) + energy(&rho_next, &nodes[k + 1])) / 6.0;
        j += (running + u.values.column(k).norm_squared()) * dt;
        rho = rho_next;
    }
    Ok((j, nodes))
}

/// Duality principle for a deterministic control: the dual cost against
/// the Monte-Carlo mean-squared error of `S_T = b - sum_k u_k^T dZ_k`.
/// `bias` defaults to `mu(y_0)`.
pub fn duality_check_mc(
    model: &HmmModel,
    u: &DeterministicControl,
    f: &DVector<f64>,
    n_paths: usize,
    seed: RngSeed,
    bias: Option<f64>,
) -> Result<DualityCheck> {
    if n_paths < 2 {
        return Err(Error::invalid("duality_check_mc needs at least 2 paths"));
    }
    let (j_value, y) = dual_cost(model, u, f)?;
    let mean_y0 = model.prior.expect(&y[0]);
    let b = bias.unwrap_or(mean_y0);
    let mut acc = RunningStats::new();
    for p in 0..n_paths {
        let (x, z) = sim::simulate_hmm(model, u.horizon(), u.dt, &mut seed.path(p as u64))?;
        let mut s = b;
        for k in 0..z.n_steps() {
            s -= u.values.column(k).dot(&z.increment(k));
        }
        acc.push((f[x.terminal_state()] - s).powi(2));
    }
    Ok(DualityCheck {
        j_value,
        mse: Estimate::from(&acc),
        mean_y0,
        bias_constant: b,
        y,
    })
}

/// Outcome of the binary-tree check of the optimal feedback law.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeTreeReport {
    /// `E[Var(f(X_N) | signs)]`, the optimal value of the discrete dual problem.
    pub optimal_cost: f64,
    /// `max over leaves |S_N - pi_N(f)|`.
    pub residual: f64,
    /// Optimal controls per level; level `k` has `2^k` nodes indexed by the
    /// sign prefix read as a binary number (bit `i` set for `+` at step `i`).
    pub controls: Vec<Vec<f64>>,
    /// Exact conditional means `pi_N(f)` per leaf.
    pub leaf_estimates: Vec<f64>,
    /// `mu(Y_0)`.
    pub initial_estimate: f64,
}

impl BsdeTreeReport {
    pub fn max_abs_control(&self) -> f64 {
        self.controls.iter().flatten().fold(0.0, |m, u| m.max(u.abs()))
    }
}

/// Largest tree the oracle will enumerate.
pub const MAX_TREE_STEPS: usize = 12;

/// Exact check of the dual recursion on a binary noise tree.
///
/// Each increment is replaced by `eps_k sqrt(dt)` with
/// `P(eps | X_k = i) = (1 + eps h(i) sqrt(dt)) / 2`, which has the mean and
/// variance of `h(X_k) dt + dW`. The backward recursion splits
/// `Y_{k+1} = Ybar + eps s V`, sets `W = P Ybar`, `Vp = P V` and applies the
/// discrete feedback law
///
/// `U = [pi(h) pi(W) - pi(hW) - pi(Vp) + s^2 pi(h) pi(h Vp)] / (1 - s^2 pi(h)^2)`,
/// `Y_k = W + s^2 h (U + Vp)`,
///
/// under which `pi_{k+1}(Y_{k+1}) = pi_k(Y_k) - U eps s` holds exactly. The
/// resulting estimator is compared with `pi_N(f)` obtained by summing over
/// all state paths.
pub fn bsde_tree_oracle(model: &HmmModel, f: &DVector<f64>, horizon: f64, n_steps: usize) -> Result<BsdeTreeReport> {
    if model.obs_dim() != 1 {
        return Err(Error::invalid("the tree oracle needs a single observation channel"));
    }
    if n_steps == 0 || n_steps > MAX_TREE_STEPS {
        return Err(Error::invalid(format!("n_steps must be in 1..={MAX_TREE_STEPS}, got {n_steps}")));
    }
    let d = model.dim();
    linalg::check_len("f", f, d)?;
    if (d as f64).powi(n_steps as i32 + 1) > 1e7 {
        return Err(Error::invalid("tree too large to enumerate state paths"));
    }
    let dt = horizon / n_steps as f64;
    let s = dt.sqrt();
    let h = model.h().column(0).into_owned();
    if h.amax() * s >= 1.0 {
        return Err(Error::invalid("max|h| sqrt(dt) must be below 1 for the sign probabilities"));
    }
    let p = expm(&(model.a() * dt));
    let pt = p.transpose();
    let mu = model.prior.as_vector().clone();

    // forward filters for every prefix; level k has 2^k nodes
    let mut filters: Vec<Vec<DVector<f64>>> = vec![vec![mu.clone()]];
    for k in 0..n_steps {
        let mut next = Vec::with_capacity(1 << (k + 1));
        for idx in 0..(1usize << (k + 1)) {
            let parent = &filters[k][idx & ((1 << k) - 1)];
            let eps = if idx >> k & 1 == 1 { 1.0 } else { -1.0 };
            let post = DVector::from_fn(d, |i, _| parent[i] * (1.0 + eps * h[i] * s));
            let post = &post / post.sum();
            next.push(&pt * post);
        }
        filters.push(next);
    }

    // backward dual recursion
    let mut ys: Vec<DVector<f64>> = vec![f.clone(); 1 << n_steps];
    let mut controls: Vec<Vec<f64>> = vec![Vec::new(); n_steps];
    for k in (0..n_steps).rev() {
        let mut level_y = Vec::with_capacity(1 << k);
        let mut level_u = Vec::with_capacity(1 << k);
        for idx in 0..(1usize << k) {
            let y_minus = &ys[idx];
            let y_plus = &ys[idx | (1 << k)];
            let ybar = (y_plus + y_minus) * 0.5;
            let v = (y_plus - y_minus) / (2.0 * s);
            let w = &p * ybar;
            let vp = &p * v;
            let pi = &filters[k][idx];
            let pi_h = pi.dot(&h);
            let hw = h.component_mul(&w);
            let hvp = h.component_mul(&vp);
            let u = (pi_h * pi.dot(&w) - pi.dot(&hw) - pi.dot(&vp) + s * s * pi_h * pi.dot(&hvp)) / (1.0 - s * s * pi_h * pi_h);
            level_y.push(w + h.component_mul(&vp.add_scalar(u)) * (s * s));
            level_u.push(u);
        }
        ys = level_y;
        controls[k] = level_u;
    }
    let initial_estimate = mu.dot(&ys[0]);

    // exact conditional means and leaf probabilities by summing over state paths
    let n_paths = d.pow(n_steps as u32 + 1);
    let mut residual: f64 = 0.0;
    let mut optimal_cost = 0.0;
    let mut leaf_estimates = Vec::with_capacity(1 << n_steps);
    let mut states = vec![0usize; n_steps + 1];
    for leaf in 0..(1usize << n_steps) {
        let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
        for code in 0..n_paths {
            let mut c = code;
            for st in states.iter_mut() {
                *st = c % d;
                c /= d;
            }
            let mut w = mu[states[0]];
            for k in 0..n_steps {
                let eps = if leaf >> k & 1 == 1 { 1.0 } else { -1.0 };
                w *= 0.5 * (1.0 + eps * h[states[k]] * s) * p[(states[k], states[k + 1])];
            }
            let fx = f[states[n_steps]];
            z0 += w;
            z1 += w * fx;
            z2 += w * fx * fx;
        }
        let est = z1 / z0;
        optimal_cost += z2 - z1 * z1 / z0;
        let mut s_n = initial_estimate;
        for k in 0..n_steps {
            let eps = if leaf >> k & 1 == 1 { 1.0 } else { -1.0 };
            s_n -= controls[k][leaf & ((1 << k) - 1)] * eps * s;
        }
        residual = residual.max((s_n - est).abs());
        leaf_estimates.push(est);
    }
    Ok(BsdeTreeReport {
        optimal_cost,
        residual,
        controls,
        leaf_estimates,
        initial_estimate,
    })
}

/// `span{H, A H, ..., A^{d-1} H}`.
pub fn lti_controllability(a_mat: &DMatrix<f64>, h_mat: &DMatrix<f64>, tol: f64) -> Result<Subspace> {
    let d = a_mat.nrows();
    linalg::check_square("a_mat", a_mat, d)?;
    if h_mat.nrows() != d {
        return Err(Error::invalid("h_mat must have as many rows as a_mat"));
    }
    let m = h_mat.ncols();
    let mut krylov = DMatrix::zeros(d, d * m);
    let mut block = h_mat.clone();
    for k in 0..d {
        krylov.view_mut((0, k * m), (d, m)).copy_from(&block);
        block = a_mat * block;
    }
    Ok(Subspace::from_span(&krylov, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::models::{LinearGaussianModel, ObservationMatrix, RateMatrix, SimplexVector};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_rate(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let mut a = DMatrix::from_fn(d, d, |_, _| rng.random_range(0.2..2.0));
        for i in 0..d {
            a[(i, i)] = 0.0;
            let s: f64 = a.row(i).sum();
            a[(i, i)] = -s;
        }
        a
    }

    #[test]
    fn constant_observation_gives_only_constants() {
        let m = catalog::doeblin_demo().with_obs(ObservationMatrix::column(&[2.0; 3]).unwrap()).unwrap();
        assert_eq!(controllable_subspace(&m, RANK_TOL).dim(), 1);
        let r = is_observable(&m, RANK_TOL);
        assert!(!r.observable);
        assert_eq!(r.unobservable_directions.ncols(), 2);
    }

    #[test]
    fn counter_example_closure() {
        let m = catalog::counter_example();
        let c = controllable_subspace(&m, RANK_TOL);
        let h = m.h().column(0).into_owned();
        let ah = m.a() * &h;
        let ones = DVector::from_element(4, 1.0);
        assert_eq!(ah, DVector::from_vec(vec![-1.0, 1.0, -1.0, 1.0]));
        // A H = 1 - 2 H, so the closure is span{1, H}: functions that only
        // see the parity class of the state
        assert_eq!(ah, &ones - &h * 2.0);
        assert_eq!(c.dim(), 2);
        for v in [ones, h.clone(), ah] {
            assert!(c.contains(&v));
        }
        let r = is_observable(&m, RANK_TOL);
        assert!(!r.observable);
        let hidden = Subspace {
            basis: r.unobservable_directions.clone(),
            tol: RANK_TOL,
        };
        assert_eq!(hidden.dim(), 2);
        assert!(hidden.contains(&DVector::from_vec(vec![1.0, 0.0, -1.0, 0.0])));
        assert!(hidden.contains(&DVector::from_vec(vec![0.0, 1.0, 0.0, -1.0])));
        for delta in r.unobservable_directions.column_iter() {
            assert!(delta.sum().abs() < 1e-12);
        }
        assert!(is_stabilizable(&m, RANK_TOL).stabilizable);
    }

    #[test]
    fn injective_static_observation_is_observable() {
        let m = HmmModel::from_parts(DMatrix::zeros(4, 4), DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.5, -1.0]), DVector::from_element(4, 0.25)).unwrap();
        assert_eq!(controllable_subspace(&m, RANK_TOL).dim(), 4);
        let mut rng = RngSeed(2).rng();
        let random = m.with_obs(m.obs.clone()).unwrap();
        let random = HmmModel::new(RateMatrix::new(random_rate(4, &mut rng)).unwrap(), random.obs, random.prior).unwrap();
        assert!(is_observable(&random, RANK_TOL).observable);
    }

    #[test]
    fn stabilizability_of_two_class_models() {
        let m = catalog::two_class_demo();
        let r = is_stabilizable(&m, RANK_TOL);
        assert_eq!(r.null_space.ncols(), 2);
        assert!(r.stabilizable);
        let silent = m.with_obs(ObservationMatrix::column(&[0.0; 4]).unwrap()).unwrap();
        assert!(!is_stabilizable(&silent, RANK_TOL).stabilizable);
        assert!(is_stabilizable(&catalog::doeblin_demo(), RANK_TOL).stabilizable);
    }

    #[test]
    fn gramian_without_observation_is_ones() {
        let m = catalog::doeblin_demo().with_obs(ObservationMatrix::column(&[0.0; 3]).unwrap()).unwrap();
        let g = gramian_mc(&m, 1.0, 0.01, 4, RngSeed(1)).unwrap();
        assert_eq!(g.mean, DMatrix::from_element(3, 3, 1.0));
        assert_eq!(g.numerical_rank(), 1);
    }

    #[test]
    fn gramian_rank_matches_closure() {
        let two = catalog::two_state(1.0, 1.0);
        let g = gramian_mc(&two, 2.0, 0.01, 200, RngSeed(3)).unwrap();
        assert_eq!(g.numerical_rank(), 2);
        let ce = catalog::counter_example();
        let g = gramian_mc(&ce, 2.0, 0.01, 200, RngSeed(3)).unwrap();
        assert_eq!(g.numerical_rank(), controllable_subspace(&ce, RANK_TOL).dim());
        // symmetric within sampling error
        let asym = &g.mean - g.mean.transpose();
        assert!(asym.iter().zip(g.stderr.iter()).all(|(a, s)| a.abs() <= 3.0 * s + 1e-12));
    }

    fn random_lg(d: usize, rng: &mut impl Rng) -> LinearGaussianModel {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let m = rng.random_range(1..=d);
        let h = DMatrix::from_fn(d, m, |_, _| rng.random_range(-1.0..1.0));
        let sigma = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let cov0 = &l * l.transpose() + DMatrix::identity(d, d) * 0.1;
        LinearGaussianModel::new(a, h, sigma, DVector::zeros(d), cov0).unwrap()
    }

    #[test]
    fn lq_dual_matches_riccati_value() {
        let mut rng = RngSeed(9).rng();
        for _ in 0..5 {
            let d = rng.random_range(1..=4);
            let m = random_lg(d, &mut rng);
            let f = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let sol = dual_lq_linear_gaussian(&m, &f, 1.5, 1e-2).unwrap();
            assert!((sol.cost - sol.riccati_value).abs() < 1e-6 * sol.riccati_value.max(1.0), "{} vs {}", sol.cost, sol.riccati_value);
            assert_eq!(sol.y.last().unwrap(), &f);
        }
    }

    #[test]
    fn lq_dual_degenerate_cases() {
        let mut rng = RngSeed(10).rng();
        let mut m = random_lg(2, &mut rng);
        let zero = dual_lq_linear_gaussian(&m, &DVector::zeros(2), 1.0, 0.01).unwrap();
        assert_eq!(zero.cost, 0.0);
        assert!(zero.u.iter().all(|u| u.amax() == 0.0));
        m.h_mat = DMatrix::zeros(2, 1);
        let f = DVector::from_vec(vec![1.0, -0.5]);
        let sol = dual_lq_linear_gaussian(&m, &f, 1.0, 0.01).unwrap();
        assert!(sol.u.iter().all(|u| u.amax() == 0.0));
        for (k, y) in sol.y.iter().enumerate() {
            let free = expm(&(&m.a_mat * (1.0 - k as f64 * 0.01))) * &f;
            assert!((y - free).amax() < 1e-10);
        }
    }

    #[test]
    fn uncontrolled_markov_dual_is_terminal_variance() {
        let m = catalog::doeblin_demo();
        let f = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let u = DeterministicControl::zeros(1, 1.0, 0.0025).unwrap();
        let (j, y) = dual_cost(&m, &u, &f).unwrap();
        // with no control, J is the variance of f(X_T)
        let mu_t = m.marginal(1.0);
        let var = mu_t.dot(&f.map(|v| v * v)) - mu_t.dot(&f).powi(2);
        assert!((j - var).abs() < 1e-9, "{j} vs {var}");
        assert!((&y[0] - expm(m.a()) * &f).amax() < 1e-12);
    }

    #[test]
    fn silent_markov_dual_has_no_control() {
        let m = catalog::doeblin_demo().with_obs(ObservationMatrix::column(&[0.0; 3]).unwrap()).unwrap();
        let f = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let sol = dual_deterministic_markov(&m, &f, 1.0, 0.005).unwrap();
        assert!(sol.u.iter().all(|u| u.amax() == 0.0));
        let mu_t = m.marginal(1.0);
        let var = mu_t.dot(&f.map(|v| v * v)) - mu_t.dot(&f).powi(2);
        assert!((sol.cost - var).abs() < 1e-8);
        assert!((sol.riccati_value - var).abs() < 1e-8);
    }

    #[test]
    fn duality_gap_vanishes_for_a_random_control() {
        let m = catalog::doeblin_demo();
        let f = DVector::from_vec(vec![0.0, 1.0, -1.0]);
        let mut rng = RngSeed(4).rng();
        let mut u = DeterministicControl::zeros(1, 1.0, 0.01).unwrap();
        u.values = DMatrix::from_fn(1, 100, |_, k| (k as f64 * 0.05).sin() * rng.random_range(0.5..1.5));
        let check = duality_check_mc(&m, &u, &f, 4000, RngSeed(5), None).unwrap();
        assert!(check.z_score().abs() < 3.0, "{check:?}");
        let biased = duality_check_mc(&m, &u, &f, 4000, RngSeed(5), Some(check.mean_y0 + 0.4)).unwrap();
        assert!((biased.predicted_mse() - check.j_value - 0.16).abs() < 1e-12);
        assert!(biased.z_score().abs() < 3.0);
    }

    #[test]
    fn tree_oracle_reproduces_filter() {
        let m = catalog::two_state(1.0, 2.0).with_obs(ObservationMatrix::column(&[-0.5, 1.5]).unwrap()).unwrap();
        let f = DVector::from_vec(vec![1.0, -1.0]);
        let r = bsde_tree_oracle(&m, &f, 0.6, 6).unwrap();
        assert!(r.residual <= 1e-10, "{}", r.residual);
        assert!(r.optimal_cost > 0.0);
        assert!(r.max_abs_control() > 0.0);

        let silent = m.with_obs(ObservationMatrix::column(&[0.0, 0.0]).unwrap()).unwrap();
        let r = bsde_tree_oracle(&silent, &f, 0.6, 6).unwrap();
        assert_eq!(r.max_abs_control(), 0.0);
        assert!(bsde_tree_oracle(&m, &f, 0.6, 13).is_err());
    }

    #[test]
    fn tree_oracle_single_step_by_hand() {
        let m = HmmModel::from_parts(
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            DVector::from_vec(vec![0.4, 0.6]),
        )
        .unwrap();
        let f = DVector::from_vec(vec![0.0, 1.0]);
        let dt: f64 = 0.25;
        let r = bsde_tree_oracle(&m, &f, dt, 1).unwrap();
        let s = dt.sqrt();
        let p = expm(&(m.a() * dt));
        for (leaf, eps) in [(0usize, -1.0), (1, 1.0)] {
            // Bayes: posterior at time 0 is prop. to mu(i)(1 + eps h(i) s)
            let w0 = 0.4 * 1.0;
            let w1 = 0.6 * (1.0 + eps * s);
            let post = [w0 / (w0 + w1), w1 / (w0 + w1)];
            let expected = post[0] * p[(0, 1)] + post[1] * p[(1, 1)];
            assert!((r.leaf_estimates[leaf] - expected).abs() < 1e-14);
        }
        assert!(r.residual < 1e-14);
    }

    #[test]
    fn lti_krylov_dimensions() {
        let d = 4;
        let full = lti_controllability(&DMatrix::zeros(d, d), &DMatrix::identity(d, d), RANK_TOL).unwrap();
        assert_eq!(full.dim(), d);
        assert_eq!(lti_controllability(&DMatrix::identity(d, d), &DMatrix::zeros(d, 1), RANK_TOL).unwrap().dim(), 0);
        let mut companion = DMatrix::zeros(d, d);
        for i in 0..d - 1 {
            companion[(i, i + 1)] = 1.0;
        }
        for j in 0..d {
            companion[(d - 1, j)] = -(j as f64 + 1.0);
        }
        let mut e = DMatrix::zeros(d, 1);
        e[(d - 1, 0)] = 1.0;
        assert_eq!(lti_controllability(&companion, &e, RANK_TOL).unwrap().dim(), d);
    }

    fn hmm_strategy() -> impl Strategy<Value = HmmModel> {
        (2usize..=5, 1usize..=2, any::<u64>()).prop_map(|(d, m, seed)| {
            let mut rng = RngSeed(seed).rng();
            let mut a = random_rate(d, &mut rng);
            // sparsify so that some models are not observable
            for i in 0..d {
                for j in 0..d {
                    if i != j && rng.random_bool(0.5) {
                        a[(i, i)] += a[(i, j)];
                        a[(i, j)] = 0.0;
                    }
                }
            }
            let levels = [0.0, 1.0, -1.0];
            let h = DMatrix::from_fn(d, m, |_, _| levels[rng.random_range(0..3)]);
            HmmModel::new(RateMatrix::new(a).unwrap(), ObservationMatrix::new(h).unwrap(), SimplexVector::uniform(d)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn closure_is_invariant(m in hmm_strategy()) {
            let c = controllable_subspace(&m, RANK_TOL);
            let basis = &c.basis;
            prop_assert!((basis.transpose() * basis - DMatrix::identity(c.dim(), c.dim())).amax() < 1e-10);
            prop_assert!(c.contains(&DVector::from_element(m.dim(), 1.0)));
            for j in 0..m.obs_dim() {
                prop_assert!(c.contains(&m.h().column(j).into_owned()));
            }
            for f in basis.column_iter() {
                prop_assert!(c.residual(&(m.a() * f)) <= 1e-8);
                for j in 0..m.obs_dim() {
                    prop_assert!(c.residual(&m.h().column(j).component_mul(&f)) <= 1e-8);
                }
            }
        }

        #[test]
        fn extra_observation_never_shrinks_closure(m in hmm_strategy(), extra in proptest::collection::vec(-1.0f64..1.0, 5)) {
            let d = m.dim();
            let before = controllable_subspace(&m, RANK_TOL).dim();
            let mut h = DMatrix::zeros(d, m.obs_dim() + 1);
            h.view_mut((0, 0), (d, m.obs_dim())).copy_from(m.h());
            for i in 0..d {
                h[(i, m.obs_dim())] = extra[i];
            }
            let wider = m.with_obs(ObservationMatrix::new(h).unwrap()).unwrap();
            prop_assert!(controllable_subspace(&wider, RANK_TOL).dim() >= before);
        }

        #[test]
        fn lq_dual_value_matches_dre(seed in any::<u64>()) {
            let mut rng = RngSeed(seed).rng();
            let d = rng.random_range(1..=4);
            let m = random_lg(d, &mut rng);
            let f = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let sol = dual_lq_linear_gaussian(&m, &f, 1.0, 1e-2).unwrap();
            prop_assert!((sol.cost - sol.riccati_value).abs() < 1e-6 * sol.riccati_value.max(1.0));
        }
    }
}
