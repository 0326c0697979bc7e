//! Path simulation: exact jump-chain CTMC paths, white-noise observation
//! increments on a uniform grid, and Euler-Maruyama linear-Gaussian paths.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, DVectorView};
#[allow(unused_imports)] // float methods come from `Float` only without std
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{HmmModel, LinearGaussianModel, ObservationMatrix, RateMatrix};

/// Exit rates at or below this make a state absorbing.
pub const ABSORBING_TOL: f64 = 1e-14;

/// Piecewise-constant càdlàg state path on `[0, horizon]`.
///
/// `states[0]` is the initial state and the chain moves to `states[k + 1]`
/// at `jump_times[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl StatePath {
    pub fn constant(state: usize, horizon: f64) -> Self {
        StatePath {
            jump_times: Vec::new(),
            states: vec![state],
            horizon,
        }
    }

    pub fn initial_state(&self) -> usize {
        self.states[0]
    }

    pub fn terminal_state(&self) -> usize {
        *self.states.last().expect("a path has at least one state")
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    pub fn state_at(&self, t: f64) -> usize {
        // number of jumps at or before t
        let k = self.jump_times.partition_point(|&s| s <= t);
        self.states[k]
    }

    /// Time spent in each of the `d` states during `[a, b]`.
    pub fn occupation(&self, d: usize, a: f64, b: f64) -> DVector<f64> {
        let mut occ = DVector::zeros(d);
        let mut k = self.jump_times.partition_point(|&s| s <= a);
        let mut t = a;
        while t < b {
            let next = self.jump_times.get(k).copied().unwrap_or(f64::INFINITY).min(b);
            occ[self.states[k]] += next - t;
            t = next;
            k += 1;
        }
        occ
    }

    /// `(t, state)` rows: the initial state at time 0 and one row per jump.
    pub fn rows(&self) -> Vec<(f64, usize)> {
        core::iter::once((0.0, self.states[0]))
            .chain(self.jump_times.iter().cloned().zip(self.states[1..].iter().cloned()))
            .collect()
    }
}

/// Observation increments `dZ_k` over the uniform grid `t_k = k * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub dt: f64,
    /// `m x n_steps`; column `k` is the increment over `[t_k, t_{k+1}]`.
    pub increments: DMatrix<f64>,
}

impl ObservationPath {
    pub fn new(dt: f64, increments: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        if increments.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("observation increments must be finite"));
        }
        Ok(ObservationPath { dt, increments })
    }

    pub fn n_steps(&self) -> usize {
        self.increments.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.increments.nrows()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.dt * k as f64
    }

    pub fn increment(&self, k: usize) -> DVectorView<'_, f64> {
        self.increments.column(k)
    }

    /// Grid times `t_0 .. t_N` (one more than the number of increments).
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps()).map(|k| self.time(k)).collect()
    }

    /// Steps `from .. to` as a path of their own.
    pub fn slice(&self, from: usize, to: usize) -> ObservationPath {
        ObservationPath {
            dt: self.dt,
            increments: self.increments.columns(from, to - from).into_owned(),
        }
    }
}

/// Law under which observations are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// Physical measure: `dZ = h(X) dt + dW`.
    P,
    /// Reference measure: `Z` is a Brownian motion independent of `X`.
    PTilde,
}

pub(crate) fn grid_steps(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon > 0.0) || !(dt > 0.0) {
        return Err(Error::invalid("horizon and dt must be positive"));
    }
    let n = (horizon / dt).round();
    if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::invalid(format!("dt = {dt} does not divide horizon = {horizon}")));
    }
    Ok(n as usize)
}

fn sample_categorical<R: Rng + ?Sized>(weights: impl Iterator<Item = (usize, f64)> + Clone, total: f64, rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (j, w) in weights {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}

pub fn sample_initial<R: Rng + ?Sized>(prior: &DVector<f64>, rng: &mut R) -> usize {
    sample_categorical(prior.iter().cloned().enumerate(), prior.iter().sum(), rng)
}

/// Exact jump-chain simulation from a given initial state.
pub fn simulate_ctmc_from<R: Rng + ?Sized>(rate: &RateMatrix, initial: usize, horizon: f64, rng: &mut R) -> StatePath {
    let a = rate.matrix();
    let d = rate.dim();
    let mut path = StatePath::constant(initial, horizon);
    let mut state = initial;
    let mut t = 0.0;
    loop {
        let exit = -a[(state, state)];
        if exit <= ABSORBING_TOL {
            break;
        }
        let e: f64 = Exp1.sample(rng);
        t += e / exit;
        if t >= horizon {
            break;
        }
        let from = state;
        state = sample_categorical((0..d).filter(move |&j| j != from).map(move |j| (j, a[(from, j)])), exit, rng);
        path.jump_times.push(t);
        path.states.push(state);
    }
    path
}

/// Exact CTMC path with `X_0` drawn from the model prior.
pub fn simulate_ctmc<R: Rng + ?Sized>(model: &HmmModel, horizon: f64, rng: &mut R) -> Result<StatePath> {
    if !(horizon > 0.0) {
        return Err(Error::invalid("horizon must be positive"));
    }
    let x0 = sample_initial(model.prior.as_vector(), rng);
    Ok(simulate_ctmc_from(&model.rate, x0, horizon, rng))
}

/// Observation increments along `path`. Under [`Measure::P`] the drift
/// `int h(X_s) ds` is integrated exactly across jumps inside each step.
pub fn simulate_observation<R: Rng + ?Sized>(
    path: &StatePath,
    obs: &ObservationMatrix,
    dt: f64,
    rng: &mut R,
    measure: Measure,
) -> Result<ObservationPath> {
    let n = grid_steps(path.horizon, dt)?;
    let m = obs.obs_dim();
    let d = obs.dim();
    let h = obs.matrix();
    let sqrt_dt = dt.sqrt();
    let mut inc = DMatrix::zeros(m, n);
    let mut k_jump = 0usize;
    for k in 0..n {
        if measure == Measure::P {
            let (a, b) = (k as f64 * dt, (k + 1) as f64 * dt);
            // walk the jumps that fall inside [a, b)
            let mut t = a;
            while t < b {
                let next = path.jump_times.get(k_jump).copied().unwrap_or(f64::INFINITY);
                let seg_end = next.min(b);
                let s = path.states[k_jump];
                debug_assert!(s < d);
                for j in 0..m {
                    inc[(j, k)] += h[(s, j)] * (seg_end - t);
                }
                t = seg_end;
                if next <= b {
                    k_jump += 1;
                }
            }
        }
        for j in 0..m {
            let xi: f64 = StandardNormal.sample(rng);
            inc[(j, k)] += sqrt_dt * xi;
        }
    }
    ObservationPath::new(dt, inc)
}

/// Brownian increments: the observation process under the reference
/// measure, where no state path is needed.
pub fn reference_increments<R: Rng + ?Sized>(m: usize, horizon: f64, dt: f64, rng: &mut R) -> Result<ObservationPath> {
    let n = grid_steps(horizon, dt)?;
    let sqrt_dt = dt.sqrt();
    let inc = DMatrix::from_fn(m, n, |_, _| {
        let xi: f64 = StandardNormal.sample(rng);
        sqrt_dt * xi
    });
    ObservationPath::new(dt, inc)
}

/// State path and observation path under `P` with `X_0 ~ prior`.
pub fn simulate_hmm<R: Rng + ?Sized>(model: &HmmModel, horizon: f64, dt: f64, rng: &mut R) -> Result<(StatePath, ObservationPath)> {
    let path = simulate_ctmc(model, horizon, rng)?;
    let obs = simulate_observation(&path, &model.obs, dt, rng, Measure::P)?;
    Ok((path, obs))
}

/// Euler-Maruyama state path on the grid and the matching observation
/// increments `H^T X_k dt + sqrt(dt) xi_k`.
pub fn simulate_linear_gaussian<R: Rng + ?Sized>(
    model: &LinearGaussianModel,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<(Vec<DVector<f64>>, ObservationPath)> {
    let n = grid_steps(horizon, dt)?;
    let d = model.dim();
    let m = model.obs_dim();
    let p = model.sigma.ncols();
    let sqrt_dt = dt.sqrt();
    let cov_root = linalg::psd_sqrt(&model.cov0);
    let xi0 = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let mut x = &model.mean0 + cov_root * xi0;
    let a_t = model.a_mat.transpose();
    let mut states = Vec::with_capacity(n + 1);
    let mut inc = DMatrix::zeros(m, n);
    states.push(x.clone());
    for k in 0..n {
        let y = model.h_mat.transpose() * &x;
        for j in 0..m {
            let e: f64 = StandardNormal.sample(rng);
            inc[(j, k)] = y[j] * dt + sqrt_dt * e;
        }
        let noise = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
        x = &x + &a_t * &x * dt + &model.sigma * noise * sqrt_dt;
        states.push(x.clone());
    }
    Ok((states, ObservationPath::new(dt, inc)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::rng::RngSeed;
    use crate::stats::RunningStats;
    use crate::SimplexVector;

    #[test]
    fn zero_rate_gives_constant_path() {
        let a = RateMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let p = simulate_ctmc_from(&a, 2, 100.0, &mut RngSeed(1).rng());
        assert_eq!(p.n_jumps(), 0);
        assert_eq!(p.terminal_state(), 2);
    }

    #[test]
    fn two_state_occupation_matches_invariant_measure() {
        let (a1, a2) = (1.0, 3.0);
        let m = catalog::two_state(a1, a2);
        let horizon = 1e4;
        let p = simulate_ctmc(&m, horizon, &mut RngSeed(11).rng()).unwrap();
        let frac = p.occupation(2, 0.0, horizon)[0] / horizon;
        let target = a2 / (a1 + a2);
        // Occupation of a 2-state chain: asymptotic variance of the time
        // average is 2 a1 a2 / (a1 + a2)^3 / T.
        let sd = (2.0 * a1 * a2 / (a1 + a2).powi(3) / horizon).sqrt();
        assert!((frac - target).abs() < 3.0 * sd, "{frac} vs {target} (sd {sd})");
    }

    #[test]
    fn counter_example_holding_times_are_unit_exponential() {
        let m = catalog::counter_example();
        let p = simulate_ctmc(&m, 1.2e4, &mut RngSeed(5).rng()).unwrap();
        let mut s = RunningStats::new();
        let mut prev = 0.0;
        for &t in p.jump_times.iter().take(10_000) {
            s.push(t - prev);
            prev = t;
        }
        assert!(s.n >= 10_000);
        assert!((s.mean() - 1.0).abs() < 3.0 * s.stderr());
        // every move goes to the next state of the cycle
        for w in p.states.windows(2) {
            assert_eq!(w[1], (w[0] + 1) % 4);
        }
    }

    #[test]
    fn exact_drift_matches_fine_riemann_sum() {
        let m = catalog::doeblin_demo();
        let mut rng = RngSeed(3).rng();
        for _ in 0..5 {
            let p = simulate_ctmc(&m, 2.0, &mut rng).unwrap();
            let h = m.h().column(0).into_owned();
            let exact = h.dot(&p.occupation(3, 0.3, 1.7));
            let n = 1_400_000;
            let ds = 1.4 / n as f64;
            let mut riemann = 0.0;
            for k in 0..n {
                riemann += h[p.state_at(0.3 + (k as f64 + 0.5) * ds)] * ds;
            }
            // midpoint rule error is bounded by ds * (#jumps in window) * max|h|
            assert!((exact - riemann).abs() <= ds * 2.0 * (p.n_jumps() as f64 + 1.0));
            // and the drift part of simulated increments is the exact integral
            let zero_noise = {
                let mut inc = DMatrix::zeros(1, 20);
                for k in 0..20 {
                    inc[(0, k)] = h.dot(&p.occupation(3, k as f64 * 0.1, (k + 1) as f64 * 0.1));
                }
                inc
            };
            let total: f64 = zero_noise.iter().sum();
            assert!((total - h.dot(&p.occupation(3, 0.0, 2.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_observation_gives_brownian_increments() {
        let m = catalog::two_state(1.0, 1.0).with_obs(ObservationMatrix::column(&[0.0, 0.0]).unwrap()).unwrap();
        let mut rng = RngSeed(8).rng();
        let (_, z) = simulate_hmm(&m, 100.0, 1e-3, &mut rng).unwrap();
        let mut s = RunningStats::new();
        for x in z.increments.iter() {
            s.push(x / 1e-3f64.sqrt());
        }
        assert!(s.mean().abs() < 3.0 * s.stderr());
        // variance of a sample variance of N(0,1): 2/(n-1)
        assert!((s.variance() - 1.0).abs() < 3.0 * (2.0 / s.n as f64).sqrt());
    }

    #[test]
    fn constant_state_increment_mean() {
        let m = catalog::two_state(1.0, 1.0);
        let path = StatePath::constant(1, 100.0);
        let dt = 1e-3;
        let z = simulate_observation(&path, &m.obs, dt, &mut RngSeed(2).rng(), Measure::P).unwrap();
        assert_eq!(z.n_steps(), 100_000);
        let mut s = RunningStats::new();
        for x in z.increments.iter() {
            s.push(*x);
        }
        assert!((s.mean() - dt).abs() < 3.0 * s.stderr());
    }

    #[test]
    fn reference_measure_decouples_state_and_observation() {
        let m = catalog::two_state(1.0, 1.0).with_obs(ObservationMatrix::column(&[-3.0, 3.0]).unwrap()).unwrap();
        let dt = 1e-2;
        let mut rng = RngSeed(21).rng();
        let path = simulate_ctmc(&m, 1000.0, &mut rng).unwrap();
        let z = simulate_observation(&path, &m.obs, dt, &mut rng, Measure::PTilde).unwrap();
        let n = z.n_steps();
        let ind: Vec<f64> = (0..n).map(|k| if path.state_at(k as f64 * dt) == 1 { 1.0 } else { 0.0 }).collect();
        let dz: Vec<f64> = z.increments.iter().cloned().collect();
        let corr = sample_correlation(&ind, &dz);
        // under independence the sample correlation is ~ N(0, 1/n)
        assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "corr {corr}");
        // with the physical measure the same statistic is far from zero
        let zp = simulate_observation(&path, &m.obs, dt, &mut rng, Measure::P).unwrap();
        let dzp: Vec<f64> = zp.increments.iter().cloned().collect();
        assert!(sample_correlation(&ind, &dzp) > 10.0 / (n as f64).sqrt());
    }

    #[test]
    fn reference_measure_ignores_h() {
        // Identical streams give identical increments regardless of H.
        let m1 = catalog::doeblin_demo();
        let m2 = m1.with_obs(m1.obs.scaled(7.0)).unwrap();
        let path = simulate_ctmc(&m1, 10.0, &mut RngSeed(1).rng()).unwrap();
        let z1 = simulate_observation(&path, &m1.obs, 0.01, &mut RngSeed(9).rng(), Measure::PTilde).unwrap();
        let z2 = simulate_observation(&path, &m2.obs, 0.01, &mut RngSeed(9).rng(), Measure::PTilde).unwrap();
        assert_eq!(z1, z2);
    }

    fn sample_correlation(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn seeds_reproduce_paths() {
        let m = catalog::counter_example();
        let a = simulate_hmm(&m, 5.0, 0.01, &mut RngSeed(4).path(2)).unwrap();
        let b = simulate_hmm(&m, 5.0, 0.01, &mut RngSeed(4).path(2)).unwrap();
        assert_eq!(a, b);
        assert!(simulate_observation(&a.0, &m.obs, 0.3, &mut RngSeed(1).rng(), Measure::P).is_err());
    }

    #[test]
    fn linear_gaussian_paths() {
        let mut lg = catalog::scalar_lg();
        lg.sigma = DMatrix::zeros(1, 1);
        lg.cov0 = DMatrix::zeros(1, 1);
        lg.mean0 = DVector::from_element(1, 2.5);
        let (xs, _) = simulate_linear_gaussian(&lg, 1.0, 0.01, &mut RngSeed(1).rng()).unwrap();
        assert!(xs.iter().all(|x| x[0] == 2.5));

        let mut lg = catalog::scalar_lg();
        lg.cov0 = DMatrix::zeros(1, 1);
        lg.h_mat = DMatrix::zeros(1, 1);
        let mut var_x = RunningStats::new();
        let mut var_z = RunningStats::new();
        let t = 2.0;
        for p in 0..10_000 {
            let (xs, z) = simulate_linear_gaussian(&lg, t, 0.05, &mut RngSeed(17).path(p)).unwrap();
            let x = xs.last().unwrap()[0];
            var_x.push(x * x);
            var_z.push(z.increments.iter().sum::<f64>().powi(2));
        }
        assert!((var_x.mean() - t).abs() < 3.0 * var_x.stderr());
        assert!((var_z.mean() - t).abs() < 3.0 * var_z.stderr());
        let _ = SimplexVector::uniform(2);
    }
}
