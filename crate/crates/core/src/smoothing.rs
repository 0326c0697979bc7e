//! Smoothing: finite-state forward-backward recursions in the log domain
//! and linear-Gaussian smoothers (two-filter, RTS, minimum energy).
//!
//! Linear-Gaussian smoothers treat the observation as `zdot = dZ / dt`,
//! constant on each grid interval, so every sweep is an ODE solved by RK4.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // float methods come from `Float` only without std
use num_traits::Float;

use crate::error::{Error, Result};
use crate::filters::{self, Splitting};
use crate::linalg::{self, flatten, symmetrize, unflatten};
use crate::models::{HmmModel, LinearGaussianModel, SimplexVector};
use crate::sim::ObservationPath;

/// Smoothing distributions `P(X_{t_k} | Z_T)` with the log forward and
/// backward functions they are built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingPath {
    pub dt: f64,
    pub smoothed: Vec<DVector<f64>>,
    /// `log p_k`, the unnormalized forward (Zakai) density.
    pub log_forward: Vec<DVector<f64>>,
    /// `log q_k`, the backward density with `q_N = 1`.
    pub log_backward: Vec<DVector<f64>>,
}

impl SmoothingPath {
    pub fn len(&self) -> usize {
        self.smoothed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smoothed.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 * self.dt).collect()
    }

    pub fn smoothed_at(&self, k: usize) -> SimplexVector {
        SimplexVector::normalized(self.smoothed[k].clone()).expect("smoothed law is a probability vector")
    }
}

fn log_vec(v: &DVector<f64>, shift: f64) -> DVector<f64> {
    v.map(|x| if x > 0.0 { x.ln() + shift } else { f64::NEG_INFINITY })
}

fn normalized_exp(l: &DVector<f64>) -> DVector<f64> {
    let m = l.max();
    let e = l.map(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

/// Forward-backward smoother. The backward recursion
/// `q_k = exp(A dt) (L_k . q_{k+1})` shares the likelihood factors `L_k` of
/// the forward splitting scheme.
pub fn forward_backward_smoother(model: &HmmModel, obs: &ObservationPath) -> Result<SmoothingPath> {
    let fwd = filters::zakai_filter(model, &model.prior, obs)?;
    let split = Splitting::new(model, obs.dt);
    let back_op = split.forward.transpose();
    let n = obs.n_steps();
    let d = model.dim();

    let log_forward: Vec<DVector<f64>> = fwd.masses.iter().zip(&fwd.log_normalizer).map(|(m, &s)| log_vec(m, s)).collect();

    let mut log_backward = alloc::vec![DVector::zeros(d); n + 1];
    let mut q = DVector::from_element(d, 1.0);
    let mut scale = 0.0;
    for k in (0..n).rev() {
        let (lik, shift) = split.likelihood(obs, k);
        q = &back_op * q.component_mul(&lik);
        scale += shift;
        let top = q.max();
        if !(top > 0.0) {
            return Err(Error::numerical(k, "backward density vanished"));
        }
        q /= top;
        scale += top.ln();
        log_backward[k] = log_vec(&q, scale);
    }

    let smoothed = log_forward.iter().zip(&log_backward).map(|(a, b)| normalized_exp(&(a + b))).collect();
    Ok(SmoothingPath {
        dt: obs.dt,
        smoothed,
        log_forward,
        log_backward,
    })
}

/// Linear-Gaussian smoothing output on the observation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSmoothingPath {
    pub dt: f64,
    pub smoothed: Vec<DVector<f64>>,
    /// Filter means `xhat_k`.
    pub filtered: Vec<DVector<f64>>,
    /// Filter covariances `Sigma_k`.
    pub filter_covs: Vec<DMatrix<f64>>,
    /// Smoothed covariances (RTS only).
    pub smoothed_covs: Option<Vec<DMatrix<f64>>>,
}

impl GaussianSmoothingPath {
    pub fn len(&self) -> usize {
        self.smoothed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smoothed.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 * self.dt).collect()
    }
}

/// Kalman-Bucy filter on a grid `sub` times finer than the observations.
struct FineForward {
    sub: usize,
    h: f64,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    /// `int |zdot - H^T xhat|^2 dt` over the whole horizon.
    innovation_energy: f64,
}

impl FineForward {
    fn coarse<T: Clone>(&self, v: &[T]) -> Vec<T> {
        v.iter().step_by(self.sub).cloned().collect()
    }
}

fn zdot(obs: &ObservationPath, k: usize) -> DVector<f64> {
    obs.increment(k) / obs.dt
}

fn check_obs(model: &LinearGaussianModel, obs: &ObservationPath) -> Result<()> {
    if obs.obs_dim() != model.obs_dim() {
        return Err(Error::invalid("observation path and model disagree on m"));
    }
    Ok(())
}

fn fine_forward(model: &LinearGaussianModel, obs: &ObservationPath, sub: usize) -> Result<FineForward> {
    check_obs(model, obs)?;
    let d = model.dim();
    let at = model.a_mat.transpose();
    let hm = &model.h_mat;
    let hht = hm * hm.transpose();
    let q = model.q();
    let h = obs.dt / sub as f64;
    let n = obs.n_steps();
    let mut means = Vec::with_capacity(n * sub + 1);
    let mut covs = Vec::with_capacity(n * sub + 1);
    let mut y = DVector::zeros(d + d * d + 1);
    y.rows_mut(0, d).copy_from(&model.mean0);
    y.rows_mut(d, d * d).copy_from(&flatten(&symmetrize(&model.cov0)));
    means.push(model.mean0.clone());
    covs.push(symmetrize(&model.cov0));
    for k in 0..n {
        let z = zdot(obs, k);
        let rhs = |_t: f64, y: &DVector<f64>| {
            let x = y.rows(0, d).into_owned();
            let s = unflatten(y.rows(d, d * d).as_slice(), d, d);
            let innov = &z - hm.transpose() * &x;
            let dx = &at * &x + &s * hm * &innov;
            let ds = &at * &s + &s * &model.a_mat + &q - &s * &hht * &s;
            let mut out = DVector::zeros(d + d * d + 1);
            out.rows_mut(0, d).copy_from(&dx);
            out.rows_mut(d, d * d).copy_from(&flatten(&ds));
            out[d + d * d] = innov.norm_squared();
            out
        };
        for _ in 0..sub {
            y = linalg::rk4_step(&rhs, 0.0, &y, h);
            let s = symmetrize(&unflatten(y.rows(d, d * d).as_slice(), d, d));
            y.rows_mut(d, d * d).copy_from(&flatten(&s));
            let min_eig = linalg::min_symmetric_eigenvalue(&s);
            if !(min_eig >= filters::PSD_FAILURE_TOL) {
                return Err(Error::numerical(k + 1, format!("filter covariance lost PSD (min eigenvalue {min_eig:e})")));
            }
            means.push(y.rows(0, d).into_owned());
            covs.push(s);
        }
    }
    Ok(FineForward {
        sub,
        h,
        means,
        covs,
        innovation_energy: y[d + d * d],
    })
}

/// Smallest filter-covariance eigenvalue accepted by the two-filter smoother.
pub const MIN_COV_EIGENVALUE: f64 = 1e-10;
/// Largest condition number accepted when inverting filter covariances.
pub const MAX_COV_CONDITION: f64 = 1e12;

fn inverses(covs: &[DMatrix<f64>], sub: usize, check: impl Fn(&DMatrix<f64>, f64) -> bool) -> Result<Vec<DMatrix<f64>>> {
    covs.iter()
        .enumerate()
        .map(|(i, s)| {
            let step = i / sub;
            match linalg::spd_inverse(s) {
                Some((inv, cond)) if check(s, cond) => Ok(inv),
                _ => Err(Error::numerical(step, format!("filter covariance is singular at t = {step} steps"))),
            }
        })
        .collect()
}

/// One backward RK4 step of `y' = f(i, y)` from fine index `hi` to `hi - 2`
/// with step `h`, using the midpoint node `hi - 1`.
fn rk4_back(f: &impl Fn(usize, &DVector<f64>) -> DVector<f64>, hi: usize, y: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = f(hi, y);
    let k2 = f(hi - 1, &(y - &k1 * (0.5 * h)));
    let k3 = f(hi - 1, &(y - &k2 * (0.5 * h)));
    let k4 = f(hi - 2, &(y - &k3 * h));
    y - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Backward sweep of `xdot = A^T x + Q Sigma^{-1} (x - xhat)` from
/// `x_T = xhat_T`, on the grid of step `2 fw.h`. Returns all nodes of that
/// grid in forward order.
fn two_filter_sweep(model: &LinearGaussianModel, fw: &FineForward) -> Result<Vec<DVector<f64>>> {
    let inv = inverses(&fw.covs, fw.sub, |s, _| linalg::min_symmetric_eigenvalue(s) >= MIN_COV_EIGENVALUE)?;
    let at = model.a_mat.transpose();
    let q = model.q();
    let f = |i: usize, x: &DVector<f64>| &at * x + &q * (&inv[i] * (x - &fw.means[i]));
    let last = fw.means.len() - 1;
    let mut x = fw.means[last].clone();
    let mut out = Vec::with_capacity(last / 2 + 1);
    out.push(x.clone());
    let mut hi = last;
    while hi >= 2 {
        x = rk4_back(&f, hi, &x, 2.0 * fw.h);
        out.push(x.clone());
        hi -= 2;
    }
    out.reverse();
    Ok(out)
}

/// Fraser-Potter two-filter smoother: the Kalman-Bucy filter forward, then
/// the backward equation `xdot = A^T x + Q Sigma^{-1} (x - xhat)` from
/// `x_T = xhat_T`. The result is the minimum-energy trajectory.
pub fn fraser_potter_smoother(model: &LinearGaussianModel, obs: &ObservationPath) -> Result<GaussianSmoothingPath> {
    let fw = fine_forward(model, obs, 2)?;
    let smoothed = two_filter_sweep(model, &fw)?;
    Ok(GaussianSmoothingPath {
        dt: obs.dt,
        smoothed,
        filtered: fw.coarse(&fw.means),
        filter_covs: fw.coarse(&fw.covs),
        smoothed_covs: None,
    })
}

/// Rauch-Tung-Striebel smoother. The mean comes from the adjoint form
/// `x = xhat + Sigma lambda`,
/// `lambdadot = -(A^T - Sigma H H^T)^T lambda - H (zdot - H^T xhat)`,
/// `lambda_T = 0`; the covariance from
/// `Pdot = F P + P F^T - Q` with `F = A^T + Q Sigma^{-1}`, `P_T = Sigma_T`.
pub fn rts_smoother(model: &LinearGaussianModel, obs: &ObservationPath) -> Result<GaussianSmoothingPath> {
    let fw = fine_forward(model, obs, 2)?;
    let d = model.dim();
    let inv = inverses(&fw.covs, fw.sub, |_, cond| cond <= MAX_COV_CONDITION)?;
    let at = model.a_mat.transpose();
    let hm = &model.h_mat;
    let hht = hm * hm.transpose();
    let q = model.q();
    let last = fw.means.len() - 1;
    let n = obs.n_steps();
    let h = 2.0 * fw.h;

    let mut lambda = DVector::zeros(d);
    let mut p = fw.covs[last].clone();
    let mut means = Vec::with_capacity(n + 1);
    let mut covs = Vec::with_capacity(n + 1);
    means.push(fw.means[last].clone());
    covs.push(p.clone());
    for k in (0..n).rev() {
        let z = zdot(obs, k);
        let fl = |i: usize, l: &DVector<f64>| -((&at - &fw.covs[i] * &hht).transpose() * l) - hm * (&z - hm.transpose() * &fw.means[i]);
        lambda = rk4_back(&fl, 2 * k + 2, &lambda, h);
        let fp = |i: usize, pv: &DVector<f64>| {
            let pm = unflatten(pv.as_slice(), d, d);
            let f = &at + &q * &inv[i];
            flatten(&(&f * &pm + &pm * f.transpose() - &q))
        };
        p = symmetrize(&unflatten(rk4_back(&fp, 2 * k + 2, &flatten(&p), h).as_slice(), d, d));
        means.push(&fw.means[2 * k] + &fw.covs[2 * k] * &lambda);
        covs.push(p.clone());
    }
    means.reverse();
    covs.reverse();
    Ok(GaussianSmoothingPath {
        dt: obs.dt,
        smoothed: means,
        filtered: fw.coarse(&fw.means),
        filter_covs: fw.coarse(&fw.covs),
        smoothed_covs: Some(covs),
    })
}

/// Minimizer of the minimum-energy functional.
#[derive(Debug, Clone, PartialEq)]
pub struct MinEnergySolution {
    pub dt: f64,
    /// `x_k` on the observation grid (`N + 1` nodes).
    pub trajectory: Vec<DVector<f64>>,
    /// `u = sigma^T Sigma^{-1} (x - xhat)` on the half grid (`2N + 1` nodes).
    pub control: Vec<DVector<f64>>,
    /// `int |zdot - H^T xhat|^2 dt`, the optimal value.
    pub innovation_energy: f64,
}

/// Optimal trajectory and control of the minimum-energy problem.
pub fn min_energy_optimum(model: &LinearGaussianModel, obs: &ObservationPath) -> Result<MinEnergySolution> {
    let fw = fine_forward(model, obs, 4)?;
    let half = two_filter_sweep(model, &fw)?;
    let inv = inverses(&fw.covs, fw.sub, |s, _| linalg::min_symmetric_eigenvalue(s) >= MIN_COV_EIGENVALUE)?;
    let st = model.sigma.transpose();
    let control = half.iter().enumerate().map(|(j, x)| &st * (&inv[2 * j] * (x - &fw.means[2 * j]))).collect();
    Ok(MinEnergySolution {
        dt: obs.dt,
        trajectory: half.iter().step_by(2).cloned().collect(),
        control,
        innovation_energy: fw.innovation_energy,
    })
}

fn control_rk4(model: &LinearGaussianModel, x: &DVector<f64>, u: [&DVector<f64>; 3], z: &DVector<f64>, dt: f64) -> (DVector<f64>, f64) {
    let at = model.a_mat.transpose();
    let ht = model.h_mat.transpose();
    let f = |x: &DVector<f64>, u: &DVector<f64>| (&at * x + &model.sigma * u, u.norm_squared() + (z - &ht * x).norm_squared());
    let (k1, c1) = f(x, u[0]);
    let (k2, c2) = f(&(x + &k1 * (0.5 * dt)), u[1]);
    let (k3, c3) = f(&(x + &k2 * (0.5 * dt)), u[1]);
    let (k4, c4) = f(&(x + &k3 * dt), u[2]);
    (x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0), (c1 + 2.0 * c2 + 2.0 * c3 + c4) * (dt / 6.0))
}

fn check_control(model: &LinearGaussianModel, control: &[DVector<f64>], obs: &ObservationPath) -> Result<()> {
    check_obs(model, obs)?;
    let n = obs.n_steps();
    if control.len() != 2 * n + 1 {
        return Err(Error::invalid(format!("control needs 2N + 1 = {} half-grid values, got {}", 2 * n + 1, control.len())));
    }
    if control.iter().any(|u| u.len() != model.sigma.ncols()) {
        return Err(Error::invalid("control dimension must match the columns of sigma"));
    }
    Ok(())
}

/// Trajectory of `xdot = A^T x + sigma u` from `x0` for a control given on
/// the half grid.
pub fn trajectory_from_control(model: &LinearGaussianModel, x0: &DVector<f64>, control: &[DVector<f64>], obs: &ObservationPath) -> Result<Vec<DVector<f64>>> {
    check_control(model, control, obs)?;
    linalg::check_len("x0", x0, model.dim())?;
    let n = obs.n_steps();
    let zero = DVector::zeros(model.obs_dim());
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(n + 1);
    out.push(x.clone());
    for k in 0..n {
        x = control_rk4(model, &x, [&control[2 * k], &control[2 * k + 1], &control[2 * k + 2]], &zero, obs.dt).0;
        out.push(x.clone());
    }
    Ok(out)
}

/// Relative tolerance for the trajectory/control consistency check.
pub const TRAJECTORY_TOL: f64 = 1e-8;

/// `J = (x_0 - m_0)^T Sigma_0^{-1} (x_0 - m_0) + int |u|^2 + |zdot - H^T x|^2 dt`.
pub fn min_energy_cost(model: &LinearGaussianModel, trajectory: &[DVector<f64>], control: &[DVector<f64>], obs: &ObservationPath) -> Result<f64> {
    check_control(model, control, obs)?;
    let n = obs.n_steps();
    if trajectory.len() != n + 1 {
        return Err(Error::invalid(format!("trajectory needs N + 1 = {} nodes, got {}", n + 1, trajectory.len())));
    }
    linalg::check_len("x0", &trajectory[0], model.dim())?;
    let (p0, _) = linalg::spd_inverse(&model.cov0).ok_or_else(|| Error::invalid("cov0 must be positive definite"))?;
    let e0 = &trajectory[0] - &model.mean0;
    let mut cost = e0.dot(&(p0 * &e0));
    let mut x = trajectory[0].clone();
    for k in 0..n {
        let (next, c) = control_rk4(model, &x, [&control[2 * k], &control[2 * k + 1], &control[2 * k + 2]], &zdot(obs, k), obs.dt);
        let gap = (&next - &trajectory[k + 1]).norm();
        if gap > TRAJECTORY_TOL * trajectory[k + 1].norm().max(1.0) {
            return Err(Error::invalid(format!("trajectory is inconsistent with the control at step {} (residual {gap:e})", k + 1)));
        }
        cost += c;
        x = next;
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::rng::RngSeed;
    use crate::sim;
    use alloc::vec;
    use rand::Rng;

    fn tv(p: &DVector<f64>, q: &DVector<f64>) -> f64 {
        0.5 * (p - q).abs().sum()
    }

    fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let s = 6;
        let b = a / 2f64.powi(s);
        let mut term = DMatrix::identity(a.nrows(), a.ncols());
        let mut sum = term.clone();
        for k in 1..20 {
            term = &term * &b / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    /// Classic scaled forward-backward algorithm for a discrete HMM whose
    /// emission of increment `k` depends on the state after transition `k`.
    fn discrete_forward_backward(model: &HmmModel, obs: &ObservationPath) -> Vec<DVector<f64>> {
        let dt = obs.dt;
        let p = taylor_expm(&(model.a() * dt));
        let n = obs.n_steps();
        let d = model.dim();
        let h = model.h();
        let lik = |k: usize| {
            DVector::from_fn(d, |j, _| {
                let hj = h.row(j).transpose();
                (hj.dot(&obs.increment(k)) - 0.5 * hj.norm_squared() * dt).exp()
            })
        };
        let mut alpha = vec![model.prior.as_vector().clone()];
        for k in 0..n {
            let a = (p.transpose() * &alpha[k]).component_mul(&lik(k));
            let s = a.sum();
            alpha.push(a / s);
        }
        let mut beta = vec![DVector::from_element(d, 1.0); n + 1];
        for k in (0..n).rev() {
            let b = &p * lik(k).component_mul(&beta[k + 1]);
            let s = b.sum();
            beta[k] = b / s;
        }
        alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| {
                let g = a.component_mul(b);
                let s = g.sum();
                g / s
            })
            .collect()
    }

    fn random_hmm(rng: &mut impl Rng) -> HmmModel {
        let d = rng.random_range(2..=5);
        let mut a = DMatrix::from_fn(d, d, |_, _| rng.random_range(0.0..2.0));
        for i in 0..d {
            a[(i, i)] = 0.0;
            let s: f64 = a.row(i).sum();
            a[(i, i)] = -s;
        }
        let h = DMatrix::from_fn(d, 1, |_, _| rng.random_range(-2.0..2.0));
        let prior = DVector::from_fn(d, |_, _| rng.random_range(0.1..1.0));
        let s = prior.sum();
        HmmModel::from_parts(a, h, prior / s).unwrap()
    }

    #[test]
    fn matches_discrete_oracle() {
        let mut rng = RngSeed(11).rng();
        for _ in 0..20 {
            let m = random_hmm(&mut rng);
            let (_, z) = sim::simulate_hmm(&m, 1.0, 0.01, &mut rng).unwrap();
            let s = forward_backward_smoother(&m, &z).unwrap();
            let oracle = discrete_forward_backward(&m, &z);
            for (a, b) in s.smoothed.iter().zip(&oracle) {
                assert!(tv(a, b) <= 1e-10, "{}", tv(a, b));
            }
        }
    }

    #[test]
    fn product_form_and_terminal_filter() {
        let m = catalog::doeblin_demo();
        let (_, z) = sim::simulate_hmm(&m, 5.0, 0.01, &mut RngSeed(3).rng()).unwrap();
        let s = forward_backward_smoother(&m, &z).unwrap();
        for k in 0..s.len() {
            let l = &s.log_forward[k] + &s.log_backward[k];
            let c = l.max() + l.map(|x| (x - l.max()).exp()).sum().ln();
            let total: f64 = l.map(|x| (x - c).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((l.map(|x| (x - c).exp()) - &s.smoothed[k]).amax() < 1e-8);
        }
        let w = filters::wonham_filter(&m, &m.prior, &z).unwrap();
        assert!(tv(s.smoothed.last().unwrap(), w.terminal()) <= 1e-8);
        assert!(s.log_backward.last().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn no_observation_gives_bridge() {
        let m = catalog::doeblin_demo().with_obs(crate::models::ObservationMatrix::column(&[0.0; 3]).unwrap()).unwrap();
        let m = m.with_prior(SimplexVector::from_slice(&[1.0, 0.0, 0.0]).unwrap()).unwrap();
        let z = sim::reference_increments(1, 1.0, 0.01, &mut RngSeed(1).rng()).unwrap();
        let s = forward_backward_smoother(&m, &z).unwrap();
        for k in 0..s.len() {
            assert!((&s.smoothed[k] - m.marginal(k as f64 * 0.01)).amax() < 1e-12);
        }
    }

    fn coarsen(z: &ObservationPath, factor: usize) -> ObservationPath {
        let n = z.n_steps() / factor;
        let inc = DMatrix::from_fn(z.obs_dim(), n, |r, c| (0..factor).map(|j| z.increments[(r, c * factor + j)]).sum());
        ObservationPath::new(z.dt * factor as f64, inc).unwrap()
    }

    #[test]
    fn grid_refinement_order() {
        let m = catalog::doeblin_demo();
        let dts = [0.04, 0.02];
        let fine = 0.005;
        let mut errs = [0.0; 2];
        for p in 0..20 {
            let (_, z) = sim::simulate_hmm(&m, 2.0, fine, &mut RngSeed(5).path(p)).unwrap();
            let reference = forward_backward_smoother(&m, &z).unwrap();
            for (e, &dt) in errs.iter_mut().zip(&dts) {
                let f = (dt / fine).round() as usize;
                let s = forward_backward_smoother(&m, &coarsen(&z, f)).unwrap();
                let worst = (0..s.len()).map(|k| tv(&s.smoothed[k], &reference.smoothed[k * f])).fold(0.0, f64::max);
                *e += worst / 20.0;
            }
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(order >= 0.8, "order {order}, errors {errs:?}");
    }

    fn random_lg(rng: &mut impl Rng, d: usize) -> LinearGaussianModel {
        let mut a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        // shift to make the drift stable
        let shift = a.clone().complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max) + 0.5;
        if shift > 0.0 {
            a -= DMatrix::identity(d, d) * shift;
        }
        let m = rng.random_range(1..=2);
        let h = DMatrix::from_fn(d, m, |_, _| rng.random_range(-1.0..1.0));
        let sigma = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(d, d) * 0.5;
        let mean0 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let cov0 = &b * b.transpose() + DMatrix::identity(d, d) * 0.5;
        LinearGaussianModel::new(a, h, sigma, mean0, cov0).unwrap()
    }

    #[test]
    fn two_filter_matches_rts() {
        let mut rng = RngSeed(21).rng();
        for _ in 0..10 {
            let d = rng.random_range(1..=3);
            let m = random_lg(&mut rng, d);
            let (_, z) = sim::simulate_linear_gaussian(&m, 2.0, 0.01, &mut rng).unwrap();
            let fp = fraser_potter_smoother(&m, &z).unwrap();
            let rts = rts_smoother(&m, &z).unwrap();
            let gap = fp.smoothed.iter().zip(&rts.smoothed).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
            assert!(gap <= 1e-6, "gap {gap}");
            assert_eq!(fp.smoothed.last(), fp.filtered.last());
            assert!((rts.smoothed.last().unwrap() - fp.filtered.last().unwrap()).amax() <= 1e-10);
        }
    }

    #[test]
    fn scalar_smoother_variance_is_smaller() {
        let m = catalog::scalar_lg();
        let (_, z) = sim::simulate_linear_gaussian(&m, 3.0, 0.01, &mut RngSeed(2).rng()).unwrap();
        let rts = rts_smoother(&m, &z).unwrap();
        for (p, s) in rts.smoothed_covs.as_ref().unwrap().iter().zip(&rts.filter_covs) {
            assert!(p[(0, 0)] <= s[(0, 0)] + 1e-12);
            assert!(p[(0, 0)] > 0.0);
        }
    }

    #[test]
    fn no_observation_gives_free_flow() {
        let mut rng = RngSeed(4).rng();
        let m = random_lg(&mut rng, 2);
        let m = LinearGaussianModel::new(m.a_mat.clone(), DMatrix::zeros(2, 1), m.sigma.clone(), m.mean0.clone(), m.cov0.clone()).unwrap();
        let z = sim::reference_increments(1, 1.0, 0.01, &mut rng).unwrap();
        let fp = fraser_potter_smoother(&m, &z).unwrap();
        let rts = rts_smoother(&m, &z).unwrap();
        for k in 0..fp.len() {
            let free = linalg::expm(&(m.a_mat.transpose() * (k as f64 * 0.01))) * &m.mean0;
            assert!((&fp.smoothed[k] - &free).amax() < 1e-9);
            assert!((&rts.smoothed[k] - &free).amax() < 1e-9);
        }
    }

    #[test]
    fn optimal_cost_equals_innovation_energy() {
        let mut rng = RngSeed(8).rng();
        for _ in 0..3 {
            let d = rng.random_range(1..=3);
            let m = random_lg(&mut rng, d);
            let (_, z) = sim::simulate_linear_gaussian(&m, 1.0, 0.01, &mut rng).unwrap();
            let opt = min_energy_optimum(&m, &z).unwrap();
            let j = min_energy_cost(&m, &opt.trajectory, &opt.control, &z).unwrap();
            assert!((j - opt.innovation_energy).abs() <= 1e-6 * opt.innovation_energy.max(1.0), "{j} vs {}", opt.innovation_energy);
            for _ in 0..20 {
                let x0 = &opt.trajectory[0] + DVector::from_fn(d, |_, _| rng.random_range(-0.1..0.1));
                let u: Vec<_> = opt.control.iter().map(|u| u + DVector::from_fn(u.len(), |_, _| rng.random_range(-0.5..0.5))).collect();
                let x = trajectory_from_control(&m, &x0, &u, &z).unwrap();
                assert!(min_energy_cost(&m, &x, &u, &z).unwrap() >= j - 1e-8);
            }
        }
    }

    #[test]
    fn cost_examples() {
        let m = LinearGaussianModel::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let z = ObservationPath::new(0.1, DMatrix::from_element(1, 10, 2.0 * 0.5 * 0.1)).unwrap();
        let u = vec![DVector::zeros(1); 21];
        let x = vec![DVector::from_element(1, 0.5); 11];
        assert!(min_energy_cost(&m, &x, &u, &z).unwrap().abs() < 1e-24);
        let mut bad = x.clone();
        bad[5][0] = 0.6;
        assert!(matches!(min_energy_cost(&m, &bad, &u, &z), Err(Error::InvalidArgument(_))));
        assert!(min_energy_cost(&m, &x, &u[..20], &z).is_err());
    }
}
