//! One function per experiment. Each returns the checks, metrics and
//! tables of its run; writing them to disk is the caller's job.

use std::path::PathBuf;

use hmm_duality::duality::{self, DeterministicControl};
use hmm_duality::filters;
use hmm_duality::smoothing;
use hmm_duality::stability::{self, McConfig, PiMethod, PriorPair};
use hmm_duality::{sim, DMatrix, DVector, HmmModel, LinearGaussianModel, RngSeed, SimplexVector};

use crate::config::{ExperimentConfig, Model, ModelDoc, ModelRef, SCHEMA_VERSION};
use crate::error::CliError;
use crate::output::{columns, num, Report, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Simulate,
    Filter,
    Smooth,
    Analyze,
    Gramian,
    DualityCheck,
    Stability,
    DetectClasses,
    Kalman,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Simulate,
        Experiment::Filter,
        Experiment::Smooth,
        Experiment::Analyze,
        Experiment::Gramian,
        Experiment::DualityCheck,
        Experiment::Stability,
        Experiment::DetectClasses,
        Experiment::Kalman,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Filter => "filter",
            Experiment::Smooth => "smooth",
            Experiment::Analyze => "analyze",
            Experiment::Gramian => "gramian",
            Experiment::DualityCheck => "duality-check",
            Experiment::Stability => "stability",
            Experiment::DetectClasses => "detect-classes",
            Experiment::Kalman => "kalman",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }

    /// Default `(horizon, dt, paths)`.
    fn defaults(self) -> (f64, f64, usize) {
        match self {
            Experiment::Gramian => (5.0, 0.01, 2000),
            Experiment::DualityCheck => (2.0, 0.01, 4000),
            Experiment::Stability => (10.0, 0.01, 1000),
            Experiment::DetectClasses => (30.0, 0.01, 1000),
            Experiment::Kalman => (20.0, 0.01, 1),
            Experiment::Smooth => (5.0, 0.01, 1),
            _ => (10.0, 0.01, 1),
        }
    }

    fn default_tol(self) -> Option<f64> {
        match self {
            Experiment::Analyze => Some(duality::RANK_TOL),
            Experiment::DetectClasses => Some(0.05),
            Experiment::Kalman => Some(1e-4),
            Experiment::Smooth | Experiment::DualityCheck => Some(1e-6),
            _ => None,
        }
    }
}

/// Command-line overrides; `None` falls back to the config, then to the
/// experiment's default.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub tol: Option<f64>,
    pub c: Option<f64>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub experiment: Experiment,
    pub model: Model,
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub tol: Option<f64>,
    pub c: Option<f64>,
    pub mu: Option<Vec<f64>>,
    pub nu: Option<Vec<f64>>,
    pub f: Option<Vec<f64>>,
    pub out: PathBuf,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(usage(format!("--{name} must be positive, got {v}")))
    }
}

impl Settings {
    pub fn resolve(experiment: Experiment, cfg: &ExperimentConfig, o: &Overrides) -> Result<Self, CliError> {
        let (horizon, dt, paths) = experiment.defaults();
        let model_ref = match &o.model {
            Some(arg) => crate::config::model_arg(arg)?,
            None => cfg.model.clone().ok_or_else(|| usage("no model given (positional MODEL or `model` in --config)"))?,
        };
        let model = model_ref.resolve(o.a1, o.a2)?;
        let paths = o.paths.or(cfg.paths).unwrap_or(paths);
        if paths == 0 {
            return Err(usage("--paths must be positive"));
        }
        Ok(Settings {
            experiment,
            model,
            horizon: positive("horizon", o.horizon.or(cfg.horizon).unwrap_or(horizon))?,
            dt: positive("dt", o.dt.or(cfg.dt).unwrap_or(dt))?,
            paths,
            seed: o.seed.or(cfg.seed).unwrap_or(0),
            tol: match o.tol.or(cfg.tol).or(experiment.default_tol()) {
                Some(t) => Some(positive("tol", t)?),
                None => None,
            },
            c: o.c.or(cfg.c),
            mu: cfg.mu.clone(),
            nu: cfg.nu.clone(),
            f: cfg.f.clone(),
            out: o.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
        })
    }

    /// Everything needed to reproduce the run, as a valid config.
    pub fn manifest(&self) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: Some(SCHEMA_VERSION),
            library_version: Some(env!("CARGO_PKG_VERSION").to_string()),
            experiment: Some(self.experiment.name().to_string()),
            model: Some(ModelRef::Inline(Box::new(ModelDoc::from_model(&self.model)))),
            horizon: Some(self.horizon),
            dt: Some(self.dt),
            paths: Some(self.paths),
            seed: Some(self.seed),
            tol: self.tol,
            c: self.c,
            mu: self.mu.clone(),
            nu: self.nu.clone(),
            f: self.f.clone(),
            out: None,
        }
    }

    fn mc(&self) -> McConfig {
        McConfig::new(self.horizon, self.dt, self.paths, self.seed)
    }

    fn rng_seed(&self) -> RngSeed {
        RngSeed(self.seed)
    }

    fn test_function(&self, d: usize) -> Result<DVector<f64>, CliError> {
        match &self.f {
            Some(f) if f.len() == d => Ok(DVector::from_column_slice(f)),
            Some(f) => Err(usage(format!("`f` has length {}, model has {d} states", f.len()))),
            None => Ok(DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 })),
        }
    }
}

pub fn run(s: &Settings) -> Result<Report, CliError> {
    let mut r = Report::default();
    r.metric("model_kind", s.model.kind());
    match (s.experiment, &s.model) {
        (Experiment::Simulate, Model::Hmm(m)) => simulate_hmm(s, m, &mut r)?,
        (Experiment::Simulate, Model::LinearGaussian(m)) => simulate_lg(s, m, &mut r)?,
        (Experiment::Filter, Model::Hmm(m)) => filter_hmm(s, m, &mut r)?,
        (Experiment::Filter, Model::LinearGaussian(m)) => kalman_lg(s, m, &mut r, "filter.csv")?,
        (Experiment::Smooth, Model::Hmm(m)) => smooth_hmm(s, m, &mut r)?,
        (Experiment::Smooth, Model::LinearGaussian(m)) => smooth_lg(s, m, &mut r)?,
        (Experiment::Analyze, Model::Hmm(m)) => analyze_hmm(s, m, &mut r)?,
        (Experiment::Analyze, Model::LinearGaussian(m)) => analyze_lg(s, m, &mut r)?,
        (Experiment::Gramian, Model::Hmm(m)) => gramian(s, m, &mut r)?,
        (Experiment::DualityCheck, Model::Hmm(m)) => duality_hmm(s, m, &mut r)?,
        (Experiment::DualityCheck, Model::LinearGaussian(m)) => duality_lg(s, m, &mut r)?,
        (Experiment::Stability, Model::Hmm(m)) => stability_hmm(s, m, &mut r)?,
        (Experiment::DetectClasses, Model::Hmm(m)) => detect_classes(s, m, &mut r)?,
        (Experiment::Kalman, Model::Hmm(m)) => kalman_markov(s, m, &mut r)?,
        (Experiment::Kalman, Model::LinearGaussian(m)) => kalman_lg(s, m, &mut r, "kalman.csv")?,
        (e, _) => return Err(usage(format!("`{}` needs a finite-state (HMM) model", e.name()))),
    }
    Ok(r)
}

fn vec_f64(v: &DVector<f64>) -> Vec<f64> {
    v.iter().cloned().collect()
}

fn rows_f64(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn columns_f64(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().cloned().collect()).collect()
}

fn observation_table(z: &sim::ObservationPath) -> Table {
    let mut t = Table::new("observations.csv", std::iter::once("t".to_string()).chain(columns("dZ", z.obs_dim())));
    for k in 0..z.n_steps() {
        t.push(std::iter::once(z.time(k)).chain(z.increment(k).iter().cloned()));
    }
    t
}

fn belief_table(file: &str, prefix: &str, dt: f64, v: &[DVector<f64>]) -> Table {
    let d = v.first().map_or(0, |x| x.len());
    let mut t = Table::new(file, std::iter::once("t".to_string()).chain(columns(prefix, d)));
    for (k, x) in v.iter().enumerate() {
        t.push(std::iter::once(k as f64 * dt).chain(x.iter().cloned()));
    }
    t
}

fn gaussian_table(file: &str, dt: f64, means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> Table {
    let d = means.first().map_or(0, |x| x.len());
    let header = std::iter::once("t".to_string()).chain(columns("m", d)).chain(columns("Sigma", d * d));
    let mut t = Table::new(file, header);
    for (k, (m, c)) in means.iter().zip(covs).enumerate() {
        t.push(std::iter::once(k as f64 * dt).chain(m.iter().cloned()).chain(c.transpose().iter().cloned()));
    }
    t
}

fn simulate_hmm(s: &Settings, m: &HmmModel, r: &mut Report) -> Result<(), CliError> {
    let (x, z) = sim::simulate_hmm(m, s.horizon, s.dt, &mut s.rng_seed().rng())?;
    let mut states = Table::new("states.csv", ["t", "state"].map(String::from));
    for (t, i) in x.rows() {
        states.push([t, i as f64]);
    }
    r.metric("n_jumps", x.n_jumps());
    r.metric("terminal_state", x.terminal_state());
    r.metric("n_steps", z.n_steps());
    r.check("path_generated", true, format!("{} jumps, {} observation steps", x.n_jumps(), z.n_steps()));
    r.table(states);
    r.table(observation_table(&z));
    Ok(())
}

fn simulate_lg(s: &Settings, m: &LinearGaussianModel, r: &mut Report) -> Result<(), CliError> {
    let (x, z) = sim::simulate_linear_gaussian(m, s.horizon, s.dt, &mut s.rng_seed().rng())?;
    r.metric("n_steps", z.n_steps());
    r.check("path_generated", true, format!("{} observation steps", z.n_steps()));
    r.table(belief_table("states.csv", "x", s.dt, &x));
    r.table(observation_table(&z));
    Ok(())
}

fn filter_hmm(s: &Settings, m: &HmmModel, r: &mut Report) -> Result<(), CliError> {
    let (_, z) = sim::simulate_hmm(m, s.horizon, s.dt, &mut s.rng_seed().rng())?;
    let w = filters::wonham_filter(m, &m.prior, &z)?;
    let zk = filters::zakai_filter(m, &m.prior, &z)?.normalized();
    let gap = w.beliefs.iter().zip(&zk.beliefs).map(|(a, b)| (a - b).abs().sum() * 0.5).fold(0.0, f64::max);
    r.metric("max_tv_zakai_wonham", gap);
    r.check("zakai_matches_wonham", gap <= 1e-8, format!("max TV {gap:e} <= 1e-8"));

    let innov = filters::innovation_path(m, &w, &z)?;
    let scaled: Vec<f64> = innov.increments.iter().map(|x| x / s.dt.sqrt()).collect();
    let n = scaled.len() as f64;
    let mean = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    r.metric("innovation_mean", mean);
    r.metric("innovation_variance", var);
    r.check("innovation_mean", mean.abs() <= 3.0 / n.sqrt(), format!("|{mean:.3e}| <= 3/sqrt(n)"));
    r.check("innovation_variance", (var - 1.0).abs() <= 3.0 * (2.0 / n).sqrt(), format!("|{var:.4} - 1| <= 3 sqrt(2/n)"));
    r.table(belief_table("filter.csv", "pi", s.dt, &w.beliefs));
    Ok(())
}

fn smooth_hmm(s: &Settings, m: &HmmModel, r: &mut Report) -> Result<(), CliError> {
    let (_, z) = sim::simulate_hmm(m, s.horizon, s.dt, &mut s.rng_seed().rng())?;
    let sm = smoothing::forward_backward_smoother(m, &z)?;
    let w = filters::wonham_filter(m, &m.prior, &z)?;
    let gap = (sm.smoothed.last().expect("non-empty") - w.terminal()).abs().sum() * 0.5;
    r.metric("terminal_tv_to_filter", gap);
    r.check("terminal_equals_filter", gap <= 1e-8, format!("TV {gap:e} <= 1e-8"));
    r.table(belief_table("smoothed.csv", "smoothed", s.dt, &sm.smoothed));
    Ok(())
}

fn smooth_lg(s: &Settings, m: &LinearGaussianModel, r: &mut Report) -> Result<(), CliError> {
    let (_, z) = sim::simulate_linear_gaussian(m, s.horizon, s.dt, &mut s.rng_seed().rng())?;
    let fp = smoothing::fraser_potter_smoother(m, &z)?;
    let rts = smoothing::rts_smoother(m, &z)?;
    let gap = fp.smoothed.iter().zip(&rts.smoothed).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    let tol = s.tol.unwrap_or(1e-6);
    r.metric("max_gap_two_filter_rts", gap);
    r.check("two_filter_matches_rts", gap <= tol, format!("max |x_fp - x_rts| = {gap:e} <= {tol:e}"));
    r.table(belief_table("smoothed.csv", "x", s.dt, &fp.smoothed));
    Ok(())
}

fn analyze_hmm(s: &Settings, m: &HmmModel, r: &mut Report) -> Result<(), CliError> {
    let tol = s.tol.unwrap_or(duality::RANK_TOL);
    let obs = duality::is_observable(m, tol);
    let stab = duality::is_stabilizable(m, tol);
    let c = &obs.controllable;
    // closure certificate: A and every h_j . (.) map the basis into the span
    let mut closure = c.residual(&DVector::from_element(m.dim(), 1.0));
    for v in c.basis.column_iter() {
        let v = v.into_owned();
        closure = closure.max(c.residual(&(m.a() * &v)));
        for h in m.h().column_iter() {
            closure = closure.max(c.residual(&h.component_mul(&v)));
        }
    }
    r.metric("dim_controllable", c.dim());
    r.metric("observable", obs.observable);
    r.metric("stabilizable", stab.stabilizable);
    r.metric("controllable_basis", columns_f64(&c.basis));
    r.metric("unobservable_directions", columns_f64(&obs.unobservable_directions));
    r.metric("null_space", columns_f64(&stab.null_space));
    r.metric("null_space_residuals", &stab.residuals);
    r.metric("closure_residual", closure);
    r.metric("tol", tol);
    r.check(
        "closure_certificate",
        closure <= duality::MEMBERSHIP_TOL,
        format!("constants, A C and h . C lie in C up to {closure:e}"),
    );
    Ok(())
}

fn analyze_lg(s: &Settings, m: &LinearGaussianModel, r: &mut Report) -> Result<(), CliError> {
    let tol = s.tol.unwrap_or(duality::RANK_TOL);
    let c = duality::lti_controllability(&m.a_mat, &m.h_mat, tol)?;
    r.metric("dim_controllable", c.dim());
    r.metric("observable", c.dim() == m.dim());
    r.metric("controllable_basis", columns_f64(&c.basis));
    let are = filters::solve_are(m, Default::default());
    match are {
        Ok(a) => {
            r.metric("are_sigma", rows_f64(&a.sigma));
            r.metric("closed_loop_hurwitz", a.closed_loop_hurwitz);
        }
        Err(e) => r.metric("are_error", e.to_string()),
    }
    r.check("rank_computed", true, format!("dim C = {} of {}", c.dim(), m.dim()));
    Ok(())
}

fn gramian(s: &Settings, m: &HmmModel, r: &mut Report) -> Result<(), CliError> {
    let g = duality::gramian_mc(m, s.horizon, s.dt, s.paths, s.rng_seed())?;
    let dim_c = duality::controllable_subspace(m, s.tol.unwrap_or(duality::RANK_TOL)).dim();
    let rank = g.numerical_rank();
    r.metric("gramian", rows_f64(&g.mean));
    r.metric("gramian_stderr", rows_f64(&g.stderr));
    r.metric("eigenvalues", &g.eigenvalues);
    r.metric("eigen_stderr", &g.eigen_stderr);
    r.metric("numerical_rank", rank);
    r.metric("entrywise_noise_floor", g.entrywise_noise_floor());
    r.metric("rank_above_entrywise_floor", g.rank_above(g.entrywise_noise_floor()));
    r.metric("dim_controllable", dim_c);
    r.check("rank_equals_dim_controllable", rank == dim_c, format!("numerical rank {rank}, dim C {dim_c}"));
    let mut t = Table::new("gramian_eigen.csv", ["index", "eigenvalue", "stderr"].map(String::from));
    for (i, (l, e)) in g.eigenvalues.iter().zip(&g.eigen_stderr).enumerate() {
        t.push([i as f64, *l, *e]);
    }
    r.table(t);
    Ok(())
}

fn duality_hmm(s: &Settings, m: &HmmModel, r: &mut Report) -> Result<(), CliError> {
    let f = s.test_function(m.dim())?;
    let zero = DeterministicControl::zeros(m.obs_dim(), s.horizon, s.dt)?;
    let n = zero.n_steps();
    let constant = DeterministicControl {
        values: DMatrix::from_element(m.obs_dim(), n, 0.5),
        ..zero.clone()
    };
    let wave = DeterministicControl {
        values: DMatrix::from_fn(m.obs_dim(), n, |j, k| ((k as f64 + 0.5) / n as f64 * std::f64::consts::TAU + j as f64).sin()),
        ..zero.clone()
    };
    let optimal = duality::dual_deterministic_markov(m, &f, s.horizon, s.dt)?.piecewise_control();
    let mut t = Table::new("duality.csv", ["control", "j_value", "predicted_mse", "mse", "stderr", "z"].map(String::from));
    for (i, (name, u)) in [("zero", zero), ("constant", constant), ("wave", wave), ("optimal_deterministic", optimal)].into_iter().enumerate() {
        let chk = duality::duality_check_mc(m, &u, &f, s.paths, s.rng_seed().derive(i as u64), None)?;
        let z = chk.z_score();
        r.check(
            &format!("duality_{name}"),
            z.abs() <= 3.0,
            format!("J = {:.6}, MC MSE = {:.6} +- {:.6}, z = {z:.2}", chk.j_value, chk.mse.mean, chk.mse.stderr),
        );
        t.push([i as f64, chk.j_value, chk.predicted_mse(), chk.mse.mean, chk.mse.stderr, z]);
    }
    r.metric("controls", ["zero", "constant", "wave", "optimal_deterministic"]);
    r.metric("f", vec_f64(&f));
    r.table(t);
    Ok(())
}

fn duality_lg(s: &Settings, m: &LinearGaussianModel, r: &mut Report) -> Result<(), CliError> {
    let f = s.test_function(m.dim())?;
    let sol = duality::dual_lq_linear_gaussian(m, &f, s.horizon, s.dt)?;
    let gap = (sol.cost - sol.riccati_value).abs();
    let tol = s.tol.unwrap_or(1e-6);
    r.metric("dual_cost", sol.cost);
    r.metric("riccati_value", sol.riccati_value);
    r.check("dual_cost_equals_riccati", gap <= tol, format!("|{:.9} - {:.9}| = {gap:e} <= {tol:e}", sol.cost, sol.riccati_value));
    let mo = m.obs_dim();
    let header = std::iter::once("t".to_string()).chain(columns("y", m.dim())).chain(columns("u", mo));
    let mut t = Table::new("dual_lq.csv", header);
    for (k, (y, u)) in sol.y.iter().zip(&sol.u).enumerate() {
        t.push(std::iter::once(k as f64 * sol.dt).chain(y.iter().cloned()).chain(u.iter().cloned()));
    }
    r.table(t);
    Ok(())
}

/// `mu` and `nu` from the config, defaulting to the model prior and a
/// different full-support measure.
fn priors(s: &Settings, m: &HmmModel, mismatched: bool) -> Result<PriorPair, CliError> {
    let d = m.dim();
    let simplex = |v: &Vec<f64>, name: &str| {
        if v.len() != d {
            return Err(usage(format!("`{name}` has length {}, model has {d} states", v.len())));
        }
        Ok(SimplexVector::new(DVector::from_column_slice(v))?)
    };
    let mu = match &s.mu {
        Some(v) => simplex(v, "mu")?,
        None => m.prior.clone(),
    };
    let nu = match &s.nu {
        Some(v) => simplex(v, "nu")?,
        None if !mismatched => mu.clone(),
        None => {
            let uniform = SimplexVector::uniform(d);
            if (mu.as_vector() - uniform.as_vector()).amax() > 1e-12 {
                uniform
            } else {
                SimplexVector::normalized(DVector::from_fn(d, |i, _| (i + 1) as f64))?
            }
        }
    };
    Ok(PriorPair::new(mu, nu)?)
}

fn stability_hmm(s: &Settings, m: &HmmModel, r: &mut Report) -> Result<(), CliError> {
    let pp = priors(s, m, true)?;
    let mut closed_form = Vec::new();
    for method in [PiMethod::TwoState, PiMethod::Doeblin, PiMethod::Sqrt] {
        if let Ok(c) = stability::pi_constant(m, method) {
            r.metric(&format!("pi_{}", method.name().replace('-', "_")), c.value);
            closed_form.push(c.value);
        }
    }
    let bf = stability::pi_constant(m, PiMethod::brute_force())?;
    r.metric("pi_brute_force", bf.value);
    let best = closed_form.iter().cloned().fold(0.0, f64::max);
    r.check(
        "brute_force_dominates_closed_form",
        bf.value >= best - 1e-2,
        format!("brute force {:.6} >= closed form {best:.6} - 1e-2", bf.value),
    );
    if let Ok(two) = stability::pi_constant(m, PiMethod::TwoState) {
        let gap = (two.value - bf.value).abs();
        r.check("two_state_closed_form", gap <= 1e-2, format!("|{:.6} - {:.6}| <= 1e-2", two.value, bf.value));
    }
    let c = s.c.unwrap_or(best);
    r.metric("c", c);
    r.metric("mu", vec_f64(pp.mu.as_vector()));
    r.metric("nu", vec_f64(pp.nu.as_vector()));
    r.metric("a_lower", pp.a_lower);
    r.metric("a_upper", pp.a_upper);

    let rep = stability::twin_filter_experiment(m, &pp, &s.mc(), None)?;
    let kl = stability::kl_check_from(&rep, &pp, 10)?;
    r.metric("initial_kl", kl.initial_kl);
    r.metric("observation_kl", kl.observation_kl.mean);
    r.check("kl_bounded", kl.bounded, format!("E[KL_t] <= KL(mu|nu) = {:.6} + 3 sigma", kl.initial_kl));
    r.check("kl_non_increasing", kl.non_increasing, "checkpoint means non-increasing within 3 sigma");
    r.check("observation_kl_bounded", kl.observation_bound_holds, format!("{:.6} <= {:.6} + 3 sigma", kl.observation_kl.mean, kl.initial_kl));
    if pp.a_lower > 0.0 {
        let chi = stability::chi2_bound_from(&rep, &pp, c, 10)?;
        r.metric("initial_chi2", chi.initial_chi2);
        let worst = chi.checkpoints.iter().map(|p| p.lhs - p.rhs - 3.0 * p.lhs_stderr).fold(f64::NEG_INFINITY, f64::max);
        r.check("chi2_bound", chi.passed(), format!("a_lower E[chi2_t] <= exp(-{c} t) chi2(mu|nu) + 3 sigma (worst margin {worst:.3e})"));
        let mut t = Table::new("chi2_bound.csv", ["t", "lhs", "lhs_stderr", "rhs"].map(String::from));
        for p in &chi.checkpoints {
            t.push([p.t, p.lhs, p.lhs_stderr, p.rhs]);
        }
        r.table(t);
    } else {
        r.metric("chi2_bound", "skipped: mu vanishes on the support of nu (a_lower = 0)");
    }
    let idx = stability::stability_index_from(m, &rep)?;
    r.metric("stability_index", if idx.flagged { None } else { Some(idx.slope) });
    r.metric("stability_index_stderr", if idx.flagged { None } else { Some(idx.slope_stderr) });
    r.metric("stability_index_flagged", idx.flagged);
    r.metric("sqrt_bound", idx.sqrt_bound);
    r.metric("row_bound", if idx.row_bound.is_nan() { None } else { Some(idx.row_bound) });
    r.metric("max_terminal_ratio", rep.max_terminal_ratio);
    r.table(Table::trace("chi2.csv", rep.dt, &rep.chi2.means(), &rep.chi2.stderrs()));
    r.table(Table::trace("kl.csv", rep.dt, &rep.kl.means(), &rep.kl.stderrs()));
    r.table(Table::trace("tv.csv", rep.dt, &rep.tv.means(), &rep.tv.stderrs()));
    Ok(())
}

fn detect_classes(s: &Settings, m: &HmmModel, r: &mut Report) -> Result<(), CliError> {
    let pp = priors(s, m, false)?;
    let rep = stability::ergodic_class_detection(m, &pp, &s.mc())?;
    let stabilizable = duality::is_stabilizable(m, duality::RANK_TOL).stabilizable;
    let se = rep.per_class_error.iter().map(|e| e.stderr).fold(0.0, f64::max);
    r.metric("classes", &rep.classes);
    r.metric("mean_error", rep.mean_error);
    r.metric("prior_floor", rep.prior_floor);
    r.metric("decomposition_residual", rep.decomposition_residual);
    r.metric("stabilizable", stabilizable);
    r.check(
        "decomposition_identity",
        rep.decomposition_residual <= 1e-8,
        format!("max residual {:e} <= 1e-8", rep.decomposition_residual),
    );
    for (k, d) in rep.class_mass_drift.iter().enumerate() {
        r.check(
            &format!("class_mass_martingale_{}", k + 1),
            d.mean.abs() <= 3.0 * d.stderr + 1e-12,
            format!("drift {:.3e} +- {:.3e}", d.mean, d.stderr),
        );
    }
    if stabilizable {
        let tol = s.tol.unwrap_or(0.05);
        r.check("detection", rep.mean_error <= tol, format!("mean error {:.4} <= {tol}", rep.mean_error));
    } else {
        r.check(
            "no_detection_without_stabilizability",
            rep.mean_error >= rep.prior_floor - 3.0 * se,
            format!("mean error {:.4} >= prior floor {:.4}", rep.mean_error, rep.prior_floor),
        );
    }
    let mut t = Table::new("detection.csv", ["class", "mean_error", "stderr", "drift", "drift_stderr"].map(String::from));
    for (k, (e, d)) in rep.per_class_error.iter().zip(&rep.class_mass_drift).enumerate() {
        t.push([(k + 1) as f64, e.mean, e.stderr, d.mean, d.stderr]);
    }
    r.table(t);
    Ok(())
}

fn kalman_markov(s: &Settings, m: &HmmModel, r: &mut Report) -> Result<(), CliError> {
    let (_, z) = sim::simulate_hmm(m, s.horizon, s.dt, &mut s.rng_seed().rng())?;
    let kf = filters::kf_markov_chain(m, &z)?;
    let w = filters::wonham_filter(m, &m.prior, &z)?;
    let gap = kf.means.iter().zip(&w.beliefs).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / kf.len() as f64;
    r.metric("mean_square_gap_to_wonham", gap);
    r.check("covariance_psd", true, "DRE stayed positive semidefinite");
    r.table(gaussian_table("kalman.csv", s.dt, &kf.means, &kf.covs));
    Ok(())
}

fn kalman_lg(s: &Settings, m: &LinearGaussianModel, r: &mut Report, file: &str) -> Result<(), CliError> {
    let (_, z) = sim::simulate_linear_gaussian(m, s.horizon, s.dt, &mut s.rng_seed().rng())?;
    let kf = filters::kalman_bucy(m, &z)?;
    let tol = s.tol.unwrap_or(1e-4);
    let are = filters::solve_are(m, Default::default())?;
    let gap = (kf.covs.last().expect("non-empty") - &are.sigma).amax();
    r.metric("sigma_terminal", rows_f64(kf.covs.last().expect("non-empty")));
    r.metric("sigma_stationary", rows_f64(&are.sigma));
    r.metric("spectral_abscissa", are.spectral_abscissa);
    r.check("dre_reaches_are", gap <= tol, format!("max |Sigma_T - Sigma_inf| = {gap:e} <= {tol:e}"));
    r.check("closed_loop_hurwitz", are.closed_loop_hurwitz, format!("spectral abscissa {}", num(are.spectral_abscissa)));
    r.table(gaussian_table(file, s.dt, &kf.means, &kf.covs));
    Ok(())
}
