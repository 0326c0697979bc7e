//! Optimal and sub-optimal filters.
//!
//! Finite-state filters use a prediction-correction splitting on the
//! observation grid: the measure is pushed through the exact transition
//! `exp(A^T dt)` and then multiplied by the Gaussian increment likelihood
//! `exp(h(i)^T dZ - |h(i)|^2 dt / 2)`. This is the exact discrete-time HMM
//! filter on the grid, so it preserves positivity unconditionally.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // float methods come from `Float` only without std
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{self, expm, symmetrize};
use crate::models::{HmmModel, LinearGaussianModel, SimplexVector};
use crate::sim::ObservationPath;

/// Total mass below which the Wonham correction step is declared failed.
pub const UNDERFLOW_TOL: f64 = 1e-300;

/// Covariances whose smallest eigenvalue drops below this are rejected.
pub const PSD_FAILURE_TOL: f64 = -1e-6;

// Scaled Zakai masses are rebased when they leave [1/RESCALE, RESCALE].
const RESCALE: f64 = 1e100;

/// One step of the splitting scheme, cached for a fixed `dt`.
#[derive(Debug, Clone)]
pub struct Splitting {
    pub dt: f64,
    /// `exp(A^T dt)`: pushes measures forward one step.
    pub forward: DMatrix<f64>,
    h: DMatrix<f64>,
    half_sq: DVector<f64>,
}

impl Splitting {
    pub fn new(model: &HmmModel, dt: f64) -> Self {
        let forward = expm(&(model.a().transpose() * dt));
        Splitting {
            dt,
            forward,
            h: model.h().clone(),
            half_sq: model.obs.squared_norms() * (0.5 * dt),
        }
    }

    pub fn dim(&self) -> usize {
        self.forward.nrows()
    }

    /// `h(i)^T dZ - |h(i)|^2 dt / 2` for every state.
    pub fn log_likelihood(&self, obs: &ObservationPath, k: usize) -> DVector<f64> {
        &self.h * obs.increment(k) - &self.half_sq
    }

    /// Likelihood factors shifted by their maximum, and the shift.
    pub fn likelihood(&self, obs: &ObservationPath, k: usize) -> (DVector<f64>, f64) {
        let l = self.log_likelihood(obs, k);
        let shift = l.max();
        (l.map(|x| (x - shift).exp()), shift)
    }
}

fn check_grid(model: &HmmModel, obs: &ObservationPath) -> Result<()> {
    if obs.obs_dim() != model.obs_dim() {
        return Err(Error::invalid(format!(
            "observation path has {} channels, model has {}",
            obs.obs_dim(),
            model.obs_dim()
        )));
    }
    Ok(())
}

/// Conditional distributions `pi_k` on the grid `t_k = k dt`, `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefPath {
    pub dt: f64,
    pub beliefs: Vec<DVector<f64>>,
}

impl BeliefPath {
    pub fn len(&self) -> usize {
        self.beliefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 * self.dt).collect()
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.beliefs.last().expect("belief path is never empty")
    }

    pub fn belief(&self, k: usize) -> SimplexVector {
        SimplexVector::normalized(self.beliefs[k].clone()).expect("filter beliefs are normalized")
    }

    /// `pi_k(f)` for every grid point.
    pub fn expectations(&self, f: &DVector<f64>) -> Vec<f64> {
        self.beliefs.iter().map(|p| p.dot(f)).collect()
    }
}

/// Wonham filter from `prior` driven by `obs`.
pub fn wonham_filter(model: &HmmModel, prior: &SimplexVector, obs: &ObservationPath) -> Result<BeliefPath> {
    check_grid(model, obs)?;
    linalg::check_len("prior", prior.as_vector(), model.dim())?;
    let split = Splitting::new(model, obs.dt);
    wonham_with(&split, prior.as_vector(), obs)
}

/// Wonham filter with a precomputed splitting step.
pub fn wonham_with(split: &Splitting, prior: &DVector<f64>, obs: &ObservationPath) -> Result<BeliefPath> {
    let n = obs.n_steps();
    let mut beliefs = Vec::with_capacity(n + 1);
    let mut pi = prior.clone();
    beliefs.push(pi.clone());
    for k in 0..n {
        let (lik, _) = split.likelihood(obs, k);
        let mut next = (&split.forward * &pi).component_mul(&lik);
        // the transition can leave tiny negative round-off
        next.apply(|x| *x = x.max(0.0));
        let mass = next.sum();
        if !(mass >= UNDERFLOW_TOL) {
            return Err(Error::numerical(k, format!("filter mass {mass:e} underflowed")));
        }
        next /= mass;
        pi = next;
        beliefs.push(pi.clone());
    }
    Ok(BeliefPath { dt: obs.dt, beliefs })
}

/// Unnormalized conditional measure `sigma_k = masses[k] * exp(log_normalizer[k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnnormalizedPath {
    pub dt: f64,
    pub masses: Vec<DVector<f64>>,
    pub log_normalizer: Vec<f64>,
}

impl UnnormalizedPath {
    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    /// `log sigma_k(1)`.
    pub fn log_total_mass(&self, k: usize) -> f64 {
        self.log_normalizer[k] + self.masses[k].sum().ln()
    }

    /// `sigma_k` itself; may overflow for long horizons.
    pub fn sigma(&self, k: usize) -> DVector<f64> {
        &self.masses[k] * self.log_normalizer[k].exp()
    }

    /// `sigma_k(f) / sigma_k(1)`.
    pub fn normalized_expectation(&self, k: usize, f: &DVector<f64>) -> f64 {
        self.masses[k].dot(f) / self.masses[k].sum()
    }

    pub fn normalized(&self) -> BeliefPath {
        BeliefPath {
            dt: self.dt,
            beliefs: self.masses.iter().map(|m| m / m.sum()).collect(),
        }
    }
}

/// Zakai filter: the splitting scheme without renormalization.
pub fn zakai_filter(model: &HmmModel, prior: &SimplexVector, obs: &ObservationPath) -> Result<UnnormalizedPath> {
    check_grid(model, obs)?;
    linalg::check_len("prior", prior.as_vector(), model.dim())?;
    let split = Splitting::new(model, obs.dt);
    let n = obs.n_steps();
    let mut masses = Vec::with_capacity(n + 1);
    let mut logs = Vec::with_capacity(n + 1);
    let mut sigma = prior.as_vector().clone();
    let mut log_scale = 0.0;
    masses.push(sigma.clone());
    logs.push(log_scale);
    for k in 0..n {
        let (lik, shift) = split.likelihood(obs, k);
        sigma = (&split.forward * &sigma).component_mul(&lik);
        sigma.apply(|x| *x = x.max(0.0));
        log_scale += shift;
        let total = sigma.sum();
        if !(1.0 / RESCALE..=RESCALE).contains(&total) {
            if !(total > 0.0) {
                return Err(Error::numerical(k, "unnormalized mass vanished"));
            }
            sigma /= total;
            log_scale += total.ln();
        }
        masses.push(sigma.clone());
        logs.push(log_scale);
    }
    Ok(UnnormalizedPath {
        dt: obs.dt,
        masses,
        log_normalizer: logs,
    })
}

/// Zakai solution operator. The true matrix is
/// `psi[k] * diag(exp(log_scales[k]))`, one log scale per column.
#[derive(Debug, Clone, PartialEq)]
pub struct ZakaiOperatorPath {
    pub dt: f64,
    pub psi: Vec<DMatrix<f64>>,
    pub log_scales: Vec<DVector<f64>>,
}

impl ZakaiOperatorPath {
    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// Unscaled `Psi_k`.
    pub fn matrix(&self, k: usize) -> DMatrix<f64> {
        let mut m = self.psi[k].clone();
        for (j, s) in self.log_scales[k].iter().enumerate() {
            m.column_mut(j).scale_mut(s.exp());
        }
        m
    }

    /// `Psi_k mu`.
    pub fn apply(&self, k: usize, mu: &DVector<f64>) -> DVector<f64> {
        let w = DVector::from_iterator(mu.len(), mu.iter().zip(self.log_scales[k].iter()).map(|(m, s)| m * s.exp()));
        &self.psi[k] * w
    }
}

/// `Psi_{k+1} = diag(L_k) exp(A^T dt) Psi_k`, `Psi_0 = I`.
pub fn zakai_operator(model: &HmmModel, obs: &ObservationPath) -> Result<ZakaiOperatorPath> {
    check_grid(model, obs)?;
    let split = Splitting::new(model, obs.dt);
    Ok(zakai_operator_with(&split, obs))
}

pub fn zakai_operator_with(split: &Splitting, obs: &ObservationPath) -> ZakaiOperatorPath {
    let d = split.dim();
    let n = obs.n_steps();
    let mut psi = DMatrix::identity(d, d);
    let mut scales = DVector::zeros(d);
    let mut out = ZakaiOperatorPath {
        dt: obs.dt,
        psi: Vec::with_capacity(n + 1),
        log_scales: Vec::with_capacity(n + 1),
    };
    out.psi.push(psi.clone());
    out.log_scales.push(scales.clone());
    for k in 0..n {
        let l = split.log_likelihood(obs, k);
        psi = &split.forward * psi;
        for i in 0..d {
            let w = l[i].exp();
            psi.row_mut(i).scale_mut(w);
        }
        for j in 0..d {
            let c = psi.column(j).amax();
            if c > RESCALE || (c > 0.0 && c < 1.0 / RESCALE) {
                psi.column_mut(j).scale_mut(1.0 / c);
                scales[j] += c.ln();
            }
        }
        out.psi.push(psi.clone());
        out.log_scales.push(scales.clone());
    }
    out
}

/// `Psi_{t_to, t_from}`: the operator restarted at `t_from` on the same noise.
pub fn zakai_operator_between(model: &HmmModel, obs: &ObservationPath, from: usize, to: usize) -> Result<DMatrix<f64>> {
    if from > to || to > obs.n_steps() {
        return Err(Error::invalid(format!("bad step range {from}..{to}")));
    }
    let path = zakai_operator(model, &obs.slice(from, to))?;
    Ok(path.matrix(to - from))
}

/// Gaussian conditional law `N(m_k, Sigma_k)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBeliefPath {
    pub dt: f64,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl GaussianBeliefPath {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 * self.dt).collect()
    }
}

/// Right-hand side `A^T S + S A + Q - S H H^T S` of the Riccati equation.
pub fn riccati_rhs(a: &DMatrix<f64>, hht: &DMatrix<f64>, q: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * s + s * a + q - s * hht * s
}

fn riccati_rk4(a: &DMatrix<f64>, hht: &DMatrix<f64>, q: impl Fn(f64) -> DMatrix<f64>, s: &DMatrix<f64>, t: f64, h: f64) -> DMatrix<f64> {
    let k1 = riccati_rhs(a, hht, &q(t), s);
    let k2 = riccati_rhs(a, hht, &q(t + 0.5 * h), &(s + &k1 * (0.5 * h)));
    let k3 = riccati_rhs(a, hht, &q(t + 0.5 * h), &(s + &k2 * (0.5 * h)));
    let k4 = riccati_rhs(a, hht, &q(t + h), &(s + &k3 * h));
    symmetrize(&(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)))
}

/// RK4 solution of the DRE on `n` steps of size `dt` with a time-dependent
/// noise term `q(t)`.
pub fn dre_path(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: impl Fn(f64) -> DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    dt: f64,
    n: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let hht = h * h.transpose();
    let mut s = symmetrize(sigma0);
    let mut out = Vec::with_capacity(n + 1);
    out.push(s.clone());
    for k in 0..n {
        s = riccati_rk4(a, &hht, &q, &s, k as f64 * dt, dt);
        let min_eig = linalg::min_symmetric_eigenvalue(&s);
        if !(min_eig >= PSD_FAILURE_TOL) {
            return Err(Error::numerical(k + 1, format!("covariance lost PSD (min eigenvalue {min_eig:e})")));
        }
        out.push(s.clone());
    }
    Ok(out)
}

/// Kalman-Bucy filter. The covariance follows the DRE by RK4; the mean
/// takes the exact free transition plus the gain times the innovation
/// increment.
pub fn kalman_bucy(model: &LinearGaussianModel, obs: &ObservationPath) -> Result<GaussianBeliefPath> {
    if obs.obs_dim() != model.obs_dim() {
        return Err(Error::invalid("observation path and model disagree on m"));
    }
    let dt = obs.dt;
    let n = obs.n_steps();
    let q = model.q();
    let covs = dre_path(&model.a_mat, &model.h_mat, |_| q.clone(), &model.cov0, dt, n)?;
    let free = expm(&(model.a_mat.transpose() * dt));
    let ht = model.h_mat.transpose();
    let mut m = model.mean0.clone();
    let mut means = Vec::with_capacity(n + 1);
    means.push(m.clone());
    for k in 0..n {
        let innov = obs.increment(k) - &ht * &m * dt;
        m = &free * &m + &covs[k] * &model.h_mat * innov;
        means.push(m.clone());
    }
    Ok(GaussianBeliefPath { dt, means, covs })
}

/// Stationary solution of the Riccati equation.
#[derive(Debug, Clone, PartialEq)]
pub struct AreSolution {
    pub sigma: DMatrix<f64>,
    /// Max-entry norm of `A^T S + S A + Q - S H H^T S`.
    pub residual: f64,
    /// Largest real part among the eigenvalues of `A^T - S H H^T`.
    pub spectral_abscissa: f64,
    pub closed_loop_hurwitz: bool,
    pub horizon: f64,
}

/// Options for [`solve_are`].
#[derive(Debug, Clone, Copy)]
pub struct AreOptions {
    pub tol: f64,
    pub max_horizon: f64,
}

impl Default for AreOptions {
    fn default() -> Self {
        AreOptions {
            tol: 1e-10,
            max_horizon: 1e4,
        }
    }
}

/// Integrates the DRE from `Sigma_0 = I` until `|dSigma/dt| < tol`.
pub fn solve_are(model: &LinearGaussianModel, opts: AreOptions) -> Result<AreSolution> {
    let a = &model.a_mat;
    let hht = &model.h_mat * model.h_mat.transpose();
    let q = model.q();
    let d = model.dim();
    let scale = 1.0 + linalg::one_norm(a) + linalg::one_norm(&hht) + linalg::one_norm(&q);
    let dt = 0.02 / scale;
    let mut s = DMatrix::identity(d, d);
    let mut t = 0.0;
    loop {
        let rate = linalg::max_abs(&riccati_rhs(a, &hht, &q, &s));
        if rate < opts.tol {
            break;
        }
        if t >= opts.max_horizon || linalg::max_abs(&s) > 1e12 || !rate.is_finite() {
            return Err(Error::NotConverged(format!(
                "Riccati flow not stationary at t = {t:.3} (|dSigma/dt| = {rate:e}, |Sigma| = {:e}); \
                 the pair is likely not stabilizable/detectable",
                linalg::max_abs(&s)
            )));
        }
        s = riccati_rk4(a, &hht, |_| q.clone(), &s, t, dt);
        t += dt;
    }
    let residual = linalg::max_abs(&riccati_rhs(a, &hht, &q, &s));
    let closed = a.transpose() - &s * &hht;
    let spectral_abscissa = closed.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(AreSolution {
        sigma: s,
        residual,
        spectral_abscissa,
        closed_loop_hurwitz: spectral_abscissa < 0.0,
        horizon: t,
    })
}

/// Kalman filter for the Markov chain embedded in `R^d` by canonical basis
/// vectors. The noise weight is `E[Q(X_t)] = sum_i mu_t(i) Q(i)` with
/// `mu_t = exp(A^T t) mu`, and the initial covariance is `diag(mu) - mu mu^T`.
pub fn kf_markov_chain(model: &HmmModel, obs: &ObservationPath) -> Result<GaussianBeliefPath> {
    check_grid(model, obs)?;
    let dt = obs.dt;
    let n = obs.n_steps();
    let mu = model.prior.as_vector();
    let cov0 = DMatrix::from_diagonal(mu) - mu * mu.transpose();
    let a_t = model.a().transpose();
    let q_at = |t: f64| model.rate.expected_q(&(expm(&(&a_t * t)) * mu));
    let covs = dre_path(model.a(), model.h(), q_at, &cov0, dt, n)?;
    let free = expm(&(&a_t * dt));
    let h = model.h();
    let mut x = mu.clone();
    let mut means = Vec::with_capacity(n + 1);
    means.push(x.clone());
    for k in 0..n {
        let innov = obs.increment(k) - h.transpose() * &x * dt;
        x = &free * &x + &covs[k] * h * innov;
        means.push(x.clone());
    }
    Ok(GaussianBeliefPath { dt, means, covs })
}

/// Innovation increments `dI_k = dZ_k - pi_k(h) dt`.
pub fn innovation_path(model: &HmmModel, beliefs: &BeliefPath, obs: &ObservationPath) -> Result<ObservationPath> {
    check_grid(model, obs)?;
    if beliefs.len() != obs.n_steps() + 1 {
        return Err(Error::invalid("belief path and observation grid are not aligned"));
    }
    let ht = model.h().transpose();
    let mut inc = obs.increments.clone();
    for k in 0..obs.n_steps() {
        let drift = &ht * &beliefs.beliefs[k] * obs.dt;
        let mut col = inc.column_mut(k);
        col -= drift;
    }
    ObservationPath::new(obs.dt, inc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::catalog;
    use crate::models::ObservationMatrix;
    use crate::rng::RngSeed;
    use crate::sim::{self, simulate_ctmc_from, simulate_hmm, simulate_observation, Measure};
    use crate::stats::RunningStats;

    fn random_f(d: usize, seed: u64) -> DVector<f64> {
        use rand::Rng;
        let mut r = RngSeed(seed).rng();
        DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn no_information_follows_kolmogorov_flow() {
        let m = catalog::doeblin_demo().with_obs(ObservationMatrix::column(&[0.0; 3]).unwrap()).unwrap();
        let (_, z) = simulate_hmm(&m, 2.0, 0.01, &mut RngSeed(1).rng()).unwrap();
        let bp = wonham_filter(&m, &m.prior, &z).unwrap();
        for (k, b) in bp.beliefs.iter().enumerate() {
            let flow = m.marginal(k as f64 * 0.01);
            assert!((b - flow).amax() < 1e-10);
        }
        let zk = zakai_filter(&m, &m.prior, &z).unwrap();
        for k in 0..zk.len() {
            assert!((zk.sigma(k).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn static_identification_concentrates() {
        let m = HmmModel::from_parts(DMatrix::zeros(2, 2), DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let mut s = RunningStats::new();
        for p in 0..100 {
            let (x, z) = simulate_hmm(&m, 50.0, 0.01, &mut RngSeed(3).path(p)).unwrap();
            let bp = wonham_filter(&m, &m.prior, &z).unwrap();
            s.push(bp.terminal()[x.terminal_state()]);
        }
        assert!(s.mean() >= 0.99, "{}", s.mean());
    }

    #[test]
    fn counter_example_parity_and_ratio() {
        let base = catalog::counter_example();
        // a strong signal approximates the noiseless observation of the example
        let m = base.with_obs(base.obs.scaled(40.0)).unwrap();
        let p = 0.3;
        let prior = SimplexVector::from_slice(&[p, 0.0, 1.0 - p, 0.0]).unwrap();
        let dt = 1e-4;
        let mut checked = 0;
        let mut avg = RunningStats::new();
        let mut majority = 0;
        for seed in 0..10 {
            let mut rng = RngSeed(40).path(seed);
            let x0 = if seed % 2 == 0 { 0 } else { 2 };
            let x = simulate_ctmc_from(&m.rate, x0, 6.0, &mut rng);
            let z = simulate_observation(&x, &m.obs, dt, &mut rng, Measure::P).unwrap();
            let bp = wonham_filter(&m, &prior, &z).unwrap();
            let t1 = x.jump_times.first().copied().unwrap_or(6.0);
            let t2 = x.jump_times.get(1).copied().unwrap_or(6.0);
            for (k, b) in bp.beliefs.iter().enumerate() {
                let t = k as f64 * dt;
                let near_jump = x.jump_times.iter().any(|&s| (t - s).abs() < 0.3);
                if near_jump || t < 0.3 {
                    continue;
                }
                // mass sits on the parity class of the true state
                let parity = x.state_at(t) % 2;
                let class_mass = if parity == 0 { b[0] + b[2] } else { b[1] + b[3] };
                avg.push(class_mass);
                if class_mass > 0.5 {
                    majority += 1;
                }
                if t < t1 {
                    assert!((b[0] / (b[0] + b[2]) - p).abs() < 0.02);
                } else if t < t2 {
                    assert!((b[1] / (b[1] + b[3]) - p).abs() < 0.05);
                }
                checked += 1;
            }
        }
        assert!(checked > 1000);
        assert!(avg.mean() > 0.97, "{}", avg.mean());
        assert!(majority as f64 >= 0.99 * checked as f64);
    }

    #[test]
    fn zakai_normalizes_to_wonham() {
        for (i, m) in [catalog::doeblin_demo(), catalog::counter_example(), catalog::two_class_demo()].iter().enumerate() {
            let (_, z) = simulate_hmm(m, 3.0, 1e-3, &mut RngSeed(5).path(i as u64)).unwrap();
            let w = wonham_filter(m, &m.prior, &z).unwrap();
            let u = zakai_filter(m, &m.prior, &z).unwrap();
            for r in 0..10 {
                let f = random_f(m.dim(), 100 + r);
                for k in (0..w.len()).step_by(97) {
                    assert!((u.normalized_expectation(k, &f) - w.beliefs[k].dot(&f)).abs() < 1e-8);
                }
            }
            let ops = zakai_operator(m, &z).unwrap();
            for k in (0..w.len()).step_by(250) {
                let s = ops.apply(k, m.prior.as_vector());
                let direct = u.sigma(k);
                assert!((s - &direct).amax() <= 1e-12 * direct.amax().max(1.0));
            }
        }
    }

    #[test]
    fn zakai_mass_is_a_reference_martingale() {
        let m = catalog::doeblin_demo();
        let mut s = RunningStats::new();
        for p in 0..4000 {
            let mut rng = RngSeed(6).path(p);
            let x = sim::simulate_ctmc(&m, 1.0, &mut rng).unwrap();
            let z = simulate_observation(&x, &m.obs, 0.01, &mut rng, Measure::PTilde).unwrap();
            let u = zakai_filter(&m, &m.prior, &z).unwrap();
            s.push(u.log_total_mass(u.len() - 1).exp());
        }
        assert!((s.mean() - 1.0).abs() < 3.0 * s.stderr(), "{} +- {}", s.mean(), s.stderr());
    }

    #[test]
    fn operator_semigroup_and_linearity() {
        let m = catalog::doeblin_demo();
        let (_, z) = simulate_hmm(&m, 2.0, 0.01, &mut RngSeed(8).rng()).unwrap();
        let full = zakai_operator(&m, &z).unwrap();
        assert_eq!(full.matrix(0), DMatrix::identity(3, 3));
        let tau = 70;
        let first = zakai_operator_between(&m, &z, 0, tau).unwrap();
        let second = zakai_operator_between(&m, &z, tau, 200).unwrap();
        let composed = second * first;
        let direct = full.matrix(200);
        assert!((composed - &direct).amax() < 1e-10 * direct.amax().max(1.0));
        let mu = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let nu = DVector::from_vec(vec![0.6, 0.1, 0.3]);
        let lhs = full.apply(150, &(&mu * 0.4 + &nu * 1.7));
        let rhs = full.apply(150, &mu) * 0.4 + full.apply(150, &nu) * 1.7;
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn operator_rescales_long_paths() {
        let base = catalog::doeblin_demo();
        let m = base.with_obs(base.obs.scaled(30.0)).unwrap();
        let (_, z) = simulate_hmm(&m, 20.0, 0.01, &mut RngSeed(2).rng()).unwrap();
        let ops = zakai_operator(&m, &z).unwrap();
        let last = ops.len() - 1;
        assert!(ops.log_scales[last].amax() > 100.0);
        let u = zakai_filter(&m, &m.prior, &z).unwrap();
        let w = wonham_filter(&m, &m.prior, &z).unwrap();
        let s = ops.apply(last, m.prior.as_vector());
        assert!(s.iter().all(|x| x.is_finite() || x.is_infinite()));
        assert!((u.normalized().terminal() - w.terminal()).amax() < 1e-8);
    }

    #[test]
    fn splitting_converges_first_order() {
        let m = catalog::doeblin_demo();
        let fine = 1e-4 / 4.0;
        let horizon = 1.0;
        let n_fine = (horizon / fine).round() as usize;
        let mut errs = [RunningStats::new(), RunningStats::new(), RunningStats::new(), RunningStats::new()];
        for p in 0..20 {
            let mut rng = RngSeed(12).path(p);
            let x = sim::simulate_ctmc(&m, horizon, &mut rng).unwrap();
            let zf = simulate_observation(&x, &m.obs, fine, &mut rng, Measure::P).unwrap();
            let reference = wonham_filter(&m, &m.prior, &zf).unwrap();
            for (level, e) in errs.iter_mut().enumerate() {
                let factor = 4usize.pow(level as u32 + 1) * 4;
                let coarse = coarsen(&zf, factor);
                let bp = wonham_filter(&m, &m.prior, &coarse).unwrap();
                let tv = 0.5 * (bp.terminal() - reference.terminal()).abs().sum();
                e.push(tv);
            }
            assert_eq!(zf.n_steps(), n_fine);
        }
        // dt = 4^(level+2) * fine; slope of log err vs log dt
        let xs: Vec<f64> = (0..4).map(|l| ((4f64).powi(l + 2) * fine).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.mean().ln()).collect();
        let slope = fit_slope(&xs, &ys);
        assert!(slope >= 0.8, "empirical order {slope}");
    }

    fn coarsen(z: &ObservationPath, factor: usize) -> ObservationPath {
        let n = z.n_steps() / factor;
        let mut inc = DMatrix::zeros(z.obs_dim(), n);
        for k in 0..n {
            for j in 0..factor {
                let col = z.increment(k * factor + j).into_owned();
                let mut c = inc.column_mut(k);
                c += col;
            }
        }
        ObservationPath::new(z.dt * factor as f64, inc).unwrap()
    }

    fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        num / den
    }

    #[test]
    fn underflow_is_reported_with_step() {
        let m = catalog::two_state(1.0, 1.0).with_obs(ObservationMatrix::column(&[0.0, 1e4]).unwrap()).unwrap();
        // a state that cannot be reached, observed with overwhelming evidence
        let frozen = HmmModel::from_parts(DMatrix::zeros(2, 2), m.h().clone(), DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let inc = DMatrix::from_element(1, 3, 10.0);
        let z = ObservationPath::new(1e-3, inc).unwrap();
        match wonham_filter(&frozen, &frozen.prior, &z) {
            Err(Error::NumericalFailure { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn innovations_are_brownian() {
        let m = catalog::doeblin_demo();
        let dt = 1e-3;
        let (_, z) = simulate_hmm(&m, 100.0, dt, &mut RngSeed(30).rng()).unwrap();
        let bp = wonham_filter(&m, &m.prior, &z).unwrap();
        let inn = innovation_path(&m, &bp, &z).unwrap();
        let mut s = RunningStats::new();
        let mut qv = 0.0;
        for x in inn.increments.iter() {
            s.push(x / dt.sqrt());
            qv += x * x;
        }
        assert_eq!(s.n, 100_000);
        assert!(s.mean().abs() < 3.0 * s.stderr());
        assert!((s.variance() - 1.0).abs() < 3.0 * (2.0 / s.n as f64).sqrt());
        // QV of a BM over [0,T] has sd T*sqrt(2/N)
        assert!((qv - 100.0).abs() < 3.0 * 100.0 * (2.0 / s.n as f64).sqrt());

        let silent = m.with_obs(ObservationMatrix::column(&[0.0; 3]).unwrap()).unwrap();
        let bp = wonham_filter(&silent, &m.prior, &z).unwrap();
        assert_eq!(innovation_path(&silent, &bp, &z).unwrap(), z);
    }

    fn lg(a: f64, h: f64, s: f64, c0: f64) -> LinearGaussianModel {
        LinearGaussianModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, h),
            DMatrix::from_element(1, 1, s),
            DVector::from_element(1, 0.5),
            DMatrix::from_element(1, 1, c0),
        )
        .unwrap()
    }

    #[test]
    fn kalman_bucy_lyapunov_flow_without_observations() {
        let m = lg(-0.7, 0.0, 0.8, 0.3);
        let z = ObservationPath::new(0.01, DMatrix::from_element(1, 300, 0.1)).unwrap();
        let kb = kalman_bucy(&m, &z).unwrap();
        for (k, (mk, ck)) in kb.means.iter().zip(&kb.covs).enumerate() {
            let t = k as f64 * 0.01;
            let e = (-0.7 * t).exp();
            let var = 0.3 * e * e + 0.64 / 1.4 * (1.0 - e * e);
            assert!((ck[(0, 0)] - var).abs() < 1e-6);
            assert!((mk[0] - 0.5 * e).abs() < 1e-6);
        }
    }

    #[test]
    fn scalar_riccati_settles_at_one() {
        let m = catalog::scalar_lg();
        let z = ObservationPath::new(0.01, DMatrix::zeros(1, 2000)).unwrap();
        let kb = kalman_bucy(&m, &z).unwrap();
        assert!((kb.covs.last().unwrap()[(0, 0)] - 1.0).abs() < 1e-4);
        let are = solve_are(&m, AreOptions::default()).unwrap();
        assert!((are.sigma[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((are.spectral_abscissa + 1.0).abs() < 1e-8);
        assert!(are.closed_loop_hurwitz);
        // starting at the fixed point keeps the covariance constant
        let at_rest = m.with_cov0(are.sigma.clone()).unwrap();
        let kb = kalman_bucy(&at_rest, &z).unwrap();
        assert!(kb.covs.iter().all(|c| (c[(0, 0)] - are.sigma[(0, 0)]).abs() < 1e-8));
    }

    #[test]
    fn are_lyapunov_and_divergence() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
        let m = LinearGaussianModel::new(a.clone(), DMatrix::zeros(2, 1), DMatrix::identity(2, 2), DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let s = solve_are(&m, AreOptions::default()).unwrap();
        let lyap = a.transpose() * &s.sigma + &s.sigma * &a + DMatrix::identity(2, 2);
        assert!(lyap.amax() <= 1e-8);
        let free = LinearGaussianModel::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2), DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(solve_are(&free, AreOptions { tol: 1e-10, max_horizon: 50.0 }), Err(Error::NotConverged(_))));
    }

    #[test]
    fn dre_from_zero_is_monotone() {
        let a = DMatrix::from_row_slice(2, 2, &[0.2, 1.0, -0.5, -0.3]);
        let h = DMatrix::from_row_slice(2, 1, &[1.0, 0.4]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let path = dre_path(&a, &h, |_| q.clone(), &DMatrix::zeros(2, 2), 0.01, 500).unwrap();
        for r in 0..5 {
            let f = random_f(2, r);
            let vals: Vec<f64> = (0..=10).map(|i| f.dot(&(&path[i * 50] * &f))).collect();
            assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{vals:?}");
        }
    }

    #[test]
    fn kf_markov_chain_without_observations_is_the_flow() {
        let m = catalog::doeblin_demo().with_obs(ObservationMatrix::column(&[0.0; 3]).unwrap()).unwrap();
        let (_, z) = simulate_hmm(&m, 1.0, 0.01, &mut RngSeed(4).rng()).unwrap();
        let kf = kf_markov_chain(&m, &z).unwrap();
        for (k, x) in kf.means.iter().enumerate() {
            assert!((x - m.marginal(k as f64 * 0.01)).amax() < 1e-10);
        }
    }

    #[test]
    fn kf_markov_chain_is_suboptimal() {
        let m = catalog::doeblin_demo();
        let f = random_f(3, 77);
        let mut gap = RunningStats::new();
        for p in 0..2000 {
            let (x, z) = simulate_hmm(&m, 1.0, 0.01, &mut RngSeed(50).path(p)).unwrap();
            let kf = kf_markov_chain(&m, &z).unwrap();
            let w = wonham_filter(&m, &m.prior, &z).unwrap();
            let truth = f[x.terminal_state()];
            let e_kf = (kf.means.last().unwrap().dot(&f) - truth).powi(2);
            let e_w = (w.terminal().dot(&f) - truth).powi(2);
            gap.push(e_kf - e_w);
        }
        assert!(gap.mean() > -3.0 * gap.stderr());
    }
}
