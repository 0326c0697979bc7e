//! Filter stability: how fast two filters started from different priors
//! forget the difference.
//!
//! All Monte-Carlo experiments simulate `(X, Z)` under the law with prior
//! `mu` and run the filter twice on the same observations, once from `mu`
//! and once from `nu`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // float methods come from `Float` only without std
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::filters::{self, BeliefPath, Splitting};
use crate::models::{HmmModel, SimplexVector};
use crate::rng::RngSeed;
use crate::sim::{self, ObservationPath, StatePath};
use crate::stats::{Estimate, RunningStats, StatsTrace};

/// chi-square, KL and total-variation divergences of `p` from `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergences {
    pub chi2: f64,
    pub kl: f64,
    pub tv: f64,
    /// `false` when `p` charges a state that `q` does not; `chi2` and `kl`
    /// are then `+inf`.
    pub absolutely_continuous: bool,
}

/// `chi2 = sum q (p/q - 1)^2`, `KL = sum p log(p/q)`, `TV = sum |p - q| / 2`.
pub fn divergences(p: &DVector<f64>, q: &DVector<f64>) -> Divergences {
    let mut chi2 = 0.0;
    let mut kl = 0.0;
    let mut tv = 0.0;
    let mut ac = true;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        tv += (pi - qi).abs();
        if qi > 0.0 {
            chi2 += (pi - qi).powi(2) / qi;
            if pi > 0.0 {
                kl += pi * (pi / qi).ln();
            }
        } else if pi > 0.0 {
            ac = false;
        }
    }
    if !ac {
        chi2 = f64::INFINITY;
        kl = f64::INFINITY;
    }
    Divergences {
        chi2,
        kl: kl.max(0.0),
        tv: 0.5 * tv,
        absolutely_continuous: ac,
    }
}

/// True prior `mu`, assumed prior `nu`, and the bounds of `d mu / d nu` on
/// the support of `nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPair {
    pub mu: SimplexVector,
    pub nu: SimplexVector,
    pub a_lower: f64,
    pub a_upper: f64,
}

impl PriorPair {
    pub fn new(mu: SimplexVector, nu: SimplexVector) -> Result<Self> {
        if mu.dim() != nu.dim() {
            return Err(Error::invalid("priors have different dimensions"));
        }
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..mu.dim() {
            if nu[i] > 0.0 {
                let r = mu[i] / nu[i];
                lo = lo.min(r);
                hi = hi.max(r);
            } else if mu[i] > 0.0 {
                return Err(Error::invalid(format!("mu is not absolutely continuous w.r.t. nu at state {i}")));
            }
        }
        Ok(PriorPair {
            mu,
            nu,
            a_lower: lo,
            a_upper: hi,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    pub fn divergences(&self) -> Divergences {
        divergences(self.mu.as_vector(), self.nu.as_vector())
    }
}

/// Common Monte-Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: RngSeed,
}

impl McConfig {
    pub fn new(horizon: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        McConfig {
            horizon,
            dt,
            n_paths,
            seed: RngSeed(seed),
        }
    }

    fn n_steps(&self) -> Result<usize> {
        if self.n_paths < 2 {
            return Err(Error::invalid("Monte-Carlo experiments need at least 2 paths"));
        }
        sim::grid_steps(self.horizon, self.dt)
    }
}

struct TwinPath<'a> {
    index: usize,
    states: &'a StatePath,
    obs: &'a ObservationPath,
    from_mu: &'a BeliefPath,
    from_nu: &'a BeliefPath,
}

fn tag_path(p: usize, e: Error) -> Error {
    match e {
        Error::NumericalFailure { step, reason } => Error::NumericalFailure {
            step,
            reason: format!("path {p}: {reason}"),
        },
        other => other,
    }
}

fn run_twins(model: &HmmModel, priors: &PriorPair, cfg: &McConfig, mut visit: impl FnMut(TwinPath<'_>) -> Result<()>) -> Result<()> {
    cfg.n_steps()?;
    if priors.dim() != model.dim() {
        return Err(Error::invalid("priors and model disagree on the number of states"));
    }
    let truth = model.with_prior(priors.mu.clone())?;
    let split = Splitting::new(model, cfg.dt);
    for p in 0..cfg.n_paths {
        let (x, z) = sim::simulate_hmm(&truth, cfg.horizon, cfg.dt, &mut cfg.seed.path(p as u64))?;
        let a = filters::wonham_with(&split, priors.mu.as_vector(), &z).map_err(|e| tag_path(p, e))?;
        let b = filters::wonham_with(&split, priors.nu.as_vector(), &z).map_err(|e| tag_path(p, e))?;
        visit(TwinPath {
            index: p,
            states: &x,
            obs: &z,
            from_mu: &a,
            from_nu: &b,
        })?;
    }
    Ok(())
}

/// Per-time Monte-Carlo means of the divergences between twin filters.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinReport {
    pub dt: f64,
    pub chi2: StatsTrace,
    pub kl: StatsTrace,
    pub tv: StatsTrace,
    /// `|pi^mu_t(f) - pi^nu_t(f)|^2` when a test function was supplied.
    pub l2_gap: Option<StatsTrace>,
    /// `(1/2) int |pi^mu_t(h) - pi^nu_t(h)|^2 dt` per path.
    pub observation_kl: RunningStats,
    /// Largest `pi^mu_T(i) / pi^nu_T(i)` seen on any path.
    pub max_terminal_ratio: f64,
}

impl TwinReport {
    pub fn times(&self) -> Vec<f64> {
        (0..self.tv.points.len()).map(|k| k as f64 * self.dt).collect()
    }
}

/// Twin-filter divergence experiment.
pub fn twin_filter_experiment(model: &HmmModel, priors: &PriorPair, cfg: &McConfig, f: Option<&DVector<f64>>) -> Result<TwinReport> {
    let n = cfg.n_steps()?;
    let mut rep = TwinReport {
        dt: cfg.dt,
        chi2: StatsTrace::new(n + 1),
        kl: StatsTrace::new(n + 1),
        tv: StatsTrace::new(n + 1),
        l2_gap: f.map(|_| StatsTrace::new(n + 1)),
        observation_kl: RunningStats::new(),
        max_terminal_ratio: 0.0,
    };
    let h = model.h().clone();
    run_twins(model, priors, cfg, |tp| {
        let mut chi2 = Vec::with_capacity(n + 1);
        let mut kl = Vec::with_capacity(n + 1);
        let mut tv = Vec::with_capacity(n + 1);
        let mut gap = Vec::new();
        let mut obs_kl = 0.0;
        for (k, (p, q)) in tp.from_mu.beliefs.iter().zip(&tp.from_nu.beliefs).enumerate() {
            let dv = divergences(p, q);
            chi2.push(dv.chi2);
            kl.push(dv.kl);
            tv.push(dv.tv);
            if let Some(f) = f {
                gap.push((p.dot(f) - q.dot(f)).powi(2));
            }
            if k < n {
                obs_kl += 0.5 * (h.transpose() * (p - q)).norm_squared() * cfg.dt;
            }
        }
        rep.chi2.push_path(&chi2);
        rep.kl.push_path(&kl);
        rep.tv.push_path(&tv);
        if let Some(g) = rep.l2_gap.as_mut() {
            g.push_path(&gap);
        }
        rep.observation_kl.push(obs_kl);
        let (p, q) = (tp.from_mu.terminal(), tp.from_nu.terminal());
        for i in 0..p.len() {
            if q[i] > 0.0 {
                rep.max_terminal_ratio = rep.max_terminal_ratio.max(p[i] / q[i]);
            }
        }
        Ok(())
    })?;
    Ok(rep)
}

fn checkpoints(n: usize, count: usize) -> Vec<usize> {
    (1..=count).map(|c| (c * n + count / 2) / count).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// Relative entropy as a Lyapunov function for the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct KlReport {
    pub initial_kl: f64,
    pub checkpoints: Vec<Checkpoint>,
    /// `E[KL_t] <= KL(mu | nu) + 3 sigma` at every checkpoint.
    pub bounded: bool,
    /// Each checkpoint mean exceeds its predecessor by at most 3 combined
    /// standard errors.
    pub non_increasing: bool,
    /// `(1/2) E int |pi^mu(h) - pi^nu(h)|^2 dt`, the KL divergence of the
    /// observation laws.
    pub observation_kl: Estimate,
    pub observation_bound_holds: bool,
}

impl KlReport {
    pub fn passed(&self) -> bool {
        self.bounded && self.non_increasing && self.observation_bound_holds
    }
}

pub fn kl_supermartingale_check(model: &HmmModel, priors: &PriorPair, cfg: &McConfig, n_checkpoints: usize) -> Result<KlReport> {
    let rep = twin_filter_experiment(model, priors, cfg, None)?;
    kl_check_from(&rep, priors, n_checkpoints)
}

/// [`kl_supermartingale_check`] on an existing twin experiment.
pub fn kl_check_from(rep: &TwinReport, priors: &PriorPair, n_checkpoints: usize) -> Result<KlReport> {
    let initial_kl = priors.divergences().kl;
    if !initial_kl.is_finite() {
        return Err(Error::invalid("KL(mu | nu) must be finite"));
    }
    let n = rep.kl.points.len() - 1;
    let cps: Vec<Checkpoint> = core::iter::once(0)
        .chain(checkpoints(n, n_checkpoints))
        .map(|k| Checkpoint {
            t: k as f64 * rep.dt,
            mean: rep.kl.points[k].mean(),
            stderr: rep.kl.points[k].stderr(),
        })
        .collect();
    let bounded = cps.iter().all(|c| c.mean <= initial_kl + 3.0 * c.stderr + 1e-12);
    let non_increasing = cps.windows(2).all(|w| w[1].mean <= w[0].mean + 3.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt() + 1e-12);
    let observation_kl = Estimate::from(&rep.observation_kl);
    Ok(KlReport {
        initial_kl,
        checkpoints: cps.into_iter().skip(1).collect(),
        bounded,
        non_increasing,
        observation_bound_holds: observation_kl.mean <= initial_kl + 3.0 * observation_kl.stderr + 1e-12,
        observation_kl,
    })
}

/// How a Poincaré constant was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PiMethod {
    /// `a1 + a2 + 2 sqrt(a1 a2)` for an irreducible 2-state chain.
    TwoState,
    /// `sum_j min_{i != j} A(i, j)`.
    Doeblin,
    /// `min_{i != j} 2 sqrt(A(i, j) A(j, i))`.
    Sqrt,
    /// Minimize `rho(Gamma f) / var^rho(f)` over a grid of `rho` and all
    /// non-constant `f`. `resolution` is the grid size per axis for `d = 2`;
    /// for `d >= 3`, `samples` uniform points of the simplex are drawn.
    BruteForce { resolution: usize, samples: usize, seed: u64 },
}

impl PiMethod {
    pub fn brute_force() -> Self {
        PiMethod::BruteForce {
            resolution: 1000,
            samples: 100_000,
            seed: 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PiMethod::TwoState => "two-state",
            PiMethod::Doeblin => "doeblin",
            PiMethod::Sqrt => "sqrt",
            PiMethod::BruteForce { .. } => "brute-force",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiConstant {
    pub value: f64,
    pub method: PiMethod,
    /// Minimizing `(rho, f)` for the brute-force method.
    pub certificate: Option<(DVector<f64>, DVector<f64>)>,
}

pub fn pi_constant(model: &HmmModel, method: PiMethod) -> Result<PiConstant> {
    let a = model.a();
    let d = model.dim();
    let off = |i: usize, j: usize| a[(i, j)];
    let value = match method {
        PiMethod::TwoState => {
            if d != 2 {
                return Err(Error::invalid("the two-state constant needs d = 2"));
            }
            let (a1, a2) = (off(0, 1), off(1, 0));
            if !(a1 > 0.0 && a2 > 0.0) {
                return Err(Error::invalid("the two-state constant needs an irreducible chain"));
            }
            a1 + a2 + 2.0 * (a1 * a2).sqrt()
        }
        PiMethod::Doeblin => (0..d).map(|j| (0..d).filter(|&i| i != j).map(|i| off(i, j)).fold(f64::INFINITY, f64::min)).sum(),
        PiMethod::Sqrt => {
            let mut c = f64::INFINITY;
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        c = c.min(2.0 * (off(i, j) * off(j, i)).sqrt());
                    }
                }
            }
            c
        }
        PiMethod::BruteForce { resolution, samples, seed } => {
            let (value, rho, f) = brute_force_pi(model, resolution, samples, seed)?;
            return Ok(PiConstant {
                value,
                method,
                certificate: Some((rho, f)),
            });
        }
    };
    Ok(PiConstant {
        value,
        method,
        certificate: None,
    })
}

/// `min_f rho(Gamma f) / var^rho(f)` for a fixed full-support `rho`, with
/// the minimizing `f` (a generalized eigenproblem on the complement of the
/// constants).
pub fn pi_ratio(model: &HmmModel, rho: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    let d = model.dim();
    let energy = model.rate.expected_q(rho);
    let var = DMatrix::from_diagonal(rho) - rho * rho.transpose();
    let ones = DMatrix::from_element(d, 1, 1.0 / (d as f64).sqrt());
    let b = crate::linalg::orthogonal_complement(&ones);
    let vb = b.transpose() * &var * &b;
    let kb = b.transpose() * &energy * &b;
    let chol = crate::linalg::symmetrize(&vb).cholesky()?;
    let l_inv = chol.l().try_inverse()?;
    let m = crate::linalg::symmetrize(&(&l_inv * kb * l_inv.transpose()));
    let eig = m.symmetric_eigen();
    let (k, &val) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.partial_cmp(y.1).unwrap_or(core::cmp::Ordering::Equal))?;
    let g = l_inv.transpose() * eig.eigenvectors.column(k);
    let f = &b * g;
    let f = &f / f.norm();
    // the Rayleigh quotient is more accurate than the eigenvalue when rho
    // is close to the boundary of the simplex
    let ratio = (f.transpose() * &energy * &f)[0] / (f.transpose() * &var * &f)[0];
    (ratio.is_finite() && val.is_finite()).then_some((ratio, f))
}

fn brute_force_pi(model: &HmmModel, resolution: usize, samples: usize, seed: u64) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let d = model.dim();
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    let consider = |rho: DVector<f64>, best: &mut Option<(f64, DVector<f64>, DVector<f64>)>| {
        if let Some((v, f)) = pi_ratio(model, &rho) {
            if best.as_ref().is_none_or(|b| v < b.0) {
                *best = Some((v, rho, f));
            }
        }
    };
    let mut rng = RngSeed(seed).rng();
    if d == 2 {
        if resolution < 2 {
            return Err(Error::invalid("brute-force resolution must be at least 2"));
        }
        for k in 1..resolution {
            let r = k as f64 / resolution as f64;
            consider(DVector::from_vec(vec![r, 1.0 - r]), &mut best);
        }
    } else {
        if samples == 0 {
            return Err(Error::invalid("brute-force needs at least one sample"));
        }
        for _ in 0..samples {
            let e = DVector::from_fn(d, |_, _| -> f64 { Exp1.sample(&mut rng) });
            let s = e.sum();
            consider(e / s, &mut best);
        }
    }
    // local refinement around the incumbent with a shrinking radius
    let mut radius = if d == 2 { 1.0 / resolution as f64 } else { 0.05 };
    for _ in 0..40 {
        let Some((_, centre, _)) = best.clone() else { break };
        for _ in 0..(8 * d) {
            let step = DVector::from_fn(d, |_, _| rng.random_range(-radius..radius));
            let mut rho = &centre + step;
            rho.apply(|x| *x = x.max(1e-12));
            let s = rho.sum();
            consider(rho / s, &mut best);
        }
        radius *= 0.7;
    }
    best.ok_or_else(|| Error::NotConverged("no interior simplex point gave a finite ratio".into()))
}

/// Pathwise rate `beta_t = sum_i pi_t(i) min_{j != i} A(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaProcess {
    pub beta: Vec<f64>,
    /// `(1/t) int_0^t beta ds` (trapezoid); the first entry is `beta_0`.
    pub running_average: Vec<f64>,
    pub time_average: f64,
}

pub fn min_row_rates(model: &HmmModel) -> DVector<f64> {
    let a = model.a();
    let d = model.dim();
    DVector::from_fn(d, |i, _| (0..d).filter(|&j| j != i).map(|j| a[(i, j)]).fold(f64::INFINITY, f64::min))
}

pub fn beta_process(model: &HmmModel, beliefs: &BeliefPath) -> BetaProcess {
    let r = min_row_rates(model);
    let beta: Vec<f64> = beliefs.beliefs.iter().map(|p| p.dot(&r)).collect();
    let mut running_average = Vec::with_capacity(beta.len());
    let mut integral = 0.0;
    running_average.push(beta[0]);
    for k in 1..beta.len() {
        integral += 0.5 * (beta[k - 1] + beta[k]) * beliefs.dt;
        running_average.push(integral / (k as f64 * beliefs.dt));
    }
    BetaProcess {
        time_average: *running_average.last().expect("non-empty"),
        beta,
        running_average,
    }
}

/// `sum_i mubar(i) min_{j != i} A(i, j)` for an irreducible chain.
pub fn beta_limit(model: &HmmModel) -> Result<f64> {
    let dec = model.rate.ergodic_classes();
    if dec.classes.len() != 1 || !dec.transient.is_empty() {
        return Err(Error::invalid("the asymptotic rate needs a single ergodic class"));
    }
    let mubar = model.rate.invariant_measure(&dec.classes[0])?;
    Ok(mubar.as_vector().dot(&min_row_rates(model)))
}

/// Empirical stability index and the two comparison bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityIndex {
    /// Least-squares slope of `log E[TV_t]` over the second half of the
    /// horizon (`NaN` when flagged).
    pub slope: f64,
    /// Slope uncertainty, propagating per-point standard errors with
    /// worst-case correlation.
    pub slope_stderr: f64,
    /// Raised when `E[TV]` vanishes in the fit window and the slope is
    /// undefined.
    pub flagged: bool,
    /// `-2 min_{i != j} sqrt(A(i,j) A(j,i))`.
    pub sqrt_bound: f64,
    /// `-sum_i mubar(i) min_{j != i} A(i,j)` (`NaN` without a unique class).
    pub row_bound: f64,
    pub mean_tv: Vec<f64>,
}

/// Below this the mean TV trace is treated as identically zero.
pub const TV_FLOOR: f64 = 1e-13;

pub fn stability_index(model: &HmmModel, priors: &PriorPair, cfg: &McConfig) -> Result<StabilityIndex> {
    let rep = twin_filter_experiment(model, priors, cfg, None)?;
    stability_index_from(model, &rep)
}

/// [`stability_index`] on an existing twin experiment.
pub fn stability_index_from(model: &HmmModel, rep: &TwinReport) -> Result<StabilityIndex> {
    let n = rep.tv.points.len() - 1;
    let means = rep.tv.means();
    let stderrs = rep.tv.stderrs();
    let start = n / 2;
    let window: Vec<usize> = (start..=n).collect();
    let flagged = window.iter().any(|&k| !(means[k] > TV_FLOOR));
    let (slope, slope_stderr) = if flagged {
        (f64::NAN, f64::NAN)
    } else {
        let xs: Vec<f64> = window.iter().map(|&k| k as f64 * rep.dt).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let mut slope = 0.0;
        let mut err = 0.0;
        for (x, &k) in xs.iter().zip(&window) {
            let w = (x - mx) / sxx;
            slope += w * means[k].ln();
            err += w.abs() * stderrs[k] / means[k];
        }
        (slope, err)
    };
    Ok(StabilityIndex {
        slope,
        slope_stderr,
        flagged,
        sqrt_bound: -pi_constant(model, PiMethod::Sqrt)?.value,
        row_bound: beta_limit(model).map(|b| -b).unwrap_or(f64::NAN),
        mean_tv: means,
    })
}

/// Ergodic-class detection by the filter started from `nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub classes: Vec<Vec<usize>>,
    /// `E|pi^nu_T(1_{S_k}) - 1_{S_k}(X_0)|` for each class.
    pub per_class_error: Vec<Estimate>,
    /// Average of the per-class errors.
    pub mean_error: f64,
    /// `min_k nu(S_k) / 2`.
    pub prior_floor: f64,
    /// Largest violation of `pi^nu_T(f) = sum_k pi^nu_T(1_{S_k}) pi^{nu_k}_T(f)`.
    pub decomposition_residual: f64,
    /// `E[pi^mu_T(1_{S_k}) - mu(S_k)]` for the correctly initialized filter.
    pub class_mass_drift: Vec<Estimate>,
}

pub fn ergodic_class_detection(model: &HmmModel, priors: &PriorPair, cfg: &McConfig) -> Result<DetectionReport> {
    let dec = model.rate.ergodic_classes();
    if !dec.transient.is_empty() {
        return Err(Error::invalid(format!("transient states present: {:?}", dec.transient)));
    }
    let d = model.dim();
    let classes = dec.classes.clone();
    let indicators: Vec<DVector<f64>> = (0..classes.len()).map(|k| dec.indicator(k, d)).collect();
    let nu = priors.nu.as_vector();
    let mu = priors.mu.as_vector();
    let nu_k: Vec<Option<DVector<f64>>> = indicators
        .iter()
        .map(|ind| {
            let masked = nu.component_mul(ind);
            let s = masked.sum();
            (s > 0.0).then(|| masked / s)
        })
        .collect();
    let prior_floor = indicators.iter().map(|ind| nu.dot(ind)).fold(f64::INFINITY, f64::min) / 2.0;
    let split = Splitting::new(model, cfg.dt);
    let mut errs = vec![RunningStats::new(); classes.len()];
    let mut drift = vec![RunningStats::new(); classes.len()];
    let mut residual: f64 = 0.0;
    let mut frng = cfg.seed.derive(0xdec0).rng();
    run_twins(model, priors, cfg, |tp| {
        let x0 = tp.states.initial_state();
        let f = DVector::from_fn(d, |_, _| frng.random_range(-1.0..1.0));
        let post = tp.from_nu.terminal();
        let mut recomposed = 0.0;
        for (k, ind) in indicators.iter().enumerate() {
            let mass = post.dot(ind);
            errs[k].push((mass - ind[x0]).abs());
            drift[k].push(tp.from_mu.terminal().dot(ind) - mu.dot(ind));
            if let Some(start) = &nu_k[k] {
                let part = filters::wonham_with(&split, start, tp.obs).map_err(|e| tag_path(tp.index, e))?;
                recomposed += mass * part.terminal().dot(&f);
            }
        }
        residual = residual.max((post.dot(&f) - recomposed).abs());
        Ok(())
    })?;
    let per_class_error: Vec<Estimate> = errs.iter().map(Estimate::from).collect();
    let mean_error = per_class_error.iter().map(|e| e.mean).sum::<f64>() / per_class_error.len() as f64;
    Ok(DetectionReport {
        classes,
        per_class_error,
        mean_error,
        prior_floor,
        decomposition_residual: residual,
        class_mass_drift: drift.iter().map(Estimate::from).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chi2Checkpoint {
    pub t: f64,
    /// `a_lower * E[chi2(pi^mu_t | pi^nu_t)]`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `exp(-c t) chi2(mu | nu)`.
    pub rhs: f64,
}

impl Chi2Checkpoint {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + 3.0 * self.lhs_stderr + 1e-12
    }
}

/// Exponential chi-square bound `a_lower E[chi2_t] <= exp(-c t) chi2(mu | nu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chi2BoundReport {
    pub c: f64,
    pub a_lower: f64,
    pub initial_chi2: f64,
    pub checkpoints: Vec<Chi2Checkpoint>,
}

impl Chi2BoundReport {
    pub fn passed(&self) -> bool {
        self.checkpoints.iter().all(Chi2Checkpoint::holds)
    }
}

pub fn chi2_bound_check(model: &HmmModel, priors: &PriorPair, cfg: &McConfig, c: f64, n_checkpoints: usize) -> Result<Chi2BoundReport> {
    check_chi2_inputs(priors, c)?;
    let rep = twin_filter_experiment(model, priors, cfg, None)?;
    chi2_bound_from(&rep, priors, c, n_checkpoints)
}

fn check_chi2_inputs(priors: &PriorPair, c: f64) -> Result<()> {
    if !(priors.a_lower > 0.0) {
        return Err(Error::invalid("the chi-square bound needs a_lower > 0"));
    }
    if !(c >= 0.0) {
        return Err(Error::invalid("c must be nonnegative"));
    }
    Ok(())
}

/// [`chi2_bound_check`] on an existing twin experiment.
pub fn chi2_bound_from(rep: &TwinReport, priors: &PriorPair, c: f64, n_checkpoints: usize) -> Result<Chi2BoundReport> {
    check_chi2_inputs(priors, c)?;
    let n = rep.chi2.points.len() - 1;
    let initial_chi2 = priors.divergences().chi2;
    let checkpoints = checkpoints(n, n_checkpoints)
        .into_iter()
        .map(|k| {
            let t = k as f64 * rep.dt;
            Chi2Checkpoint {
                t,
                lhs: priors.a_lower * rep.chi2.points[k].mean(),
                lhs_stderr: priors.a_lower * rep.chi2.points[k].stderr(),
                rhs: (-c * t).exp() * initial_chi2,
            }
        })
        .collect();
    Ok(Chi2BoundReport {
        c,
        a_lower: priors.a_lower,
        initial_chi2,
        checkpoints,
    })
}
