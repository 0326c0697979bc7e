//! Model objects and the elementary operators acting on them.
//!
//! Functions on the finite state space `{0, .., d-1}` are vectors in `R^d`;
//! measures are vectors as well, with the generator acting on functions by
//! `f -> A f` and on measures by `mu -> A^T mu`.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // float methods come from `Float` only without std
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on row sums of a rate matrix and on simplex sums.
pub const SUM_TOL: f64 = 1e-12;
/// Rates at or below this are treated as absent when building the
/// transition digraph.
pub const EDGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

/// Every violated invariant of a candidate model. Empty means valid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }

    fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }

    fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidModel(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

fn check_finite(report: &mut ValidationReport, field: &str, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                report.push(format!("{field}[{i}][{j}]"), "entry is not finite");
            }
        }
    }
}

pub fn validate_rate(a: &DMatrix<f64>) -> ValidationReport {
    let mut r = ValidationReport::default();
    if !a.is_square() {
        r.push("rate", format!("must be square, got {}x{}", a.nrows(), a.ncols()));
        return r;
    }
    if a.nrows() < 2 {
        r.push("rate", "needs at least 2 states");
    }
    check_finite(&mut r, "rate", a);
    for i in 0..a.nrows() {
        let mut sum = 0.0;
        let mut scale = 1.0f64;
        for j in 0..a.ncols() {
            sum += a[(i, j)];
            scale = scale.max(a[(i, j)].abs());
            if i != j && a[(i, j)] < 0.0 {
                r.push(format!("rate[{i}][{j}]"), format!("off-diagonal rate {} is negative", a[(i, j)]));
            }
        }
        if (sum.abs() > SUM_TOL * scale) || !sum.is_finite() {
            r.push(format!("rate row {i}"), format!("row sums to {sum}, expected 0"));
        }
    }
    r
}

pub fn validate_simplex(field: &str, v: &DVector<f64>) -> ValidationReport {
    let mut r = ValidationReport::default();
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            r.push(format!("{field}[{i}]"), "entry is not finite");
        } else if x < 0.0 {
            r.push(format!("{field}[{i}]"), format!("entry {x} is negative"));
        }
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        r.push(field, format!("entries sum to {sum}, expected 1"));
    }
    r
}

/// Diagnostics for a candidate finite-state model given as raw arrays.
pub fn validate_hmm(rate: &DMatrix<f64>, obs: &DMatrix<f64>, prior: &DVector<f64>) -> ValidationReport {
    let mut r = validate_rate(rate);
    let d = rate.nrows();
    if obs.nrows() != d {
        r.push("obs", format!("has {} rows, expected {d}", obs.nrows()));
    }
    if obs.ncols() == 0 {
        r.push("obs", "needs at least one column");
    }
    check_finite(&mut r, "obs", obs);
    if prior.len() != d {
        r.push("prior", format!("has length {}, expected {d}", prior.len()));
    }
    r.extend(validate_simplex("prior", prior));
    r
}

/// Diagnostics for a candidate linear-Gaussian model given as raw arrays.
pub fn validate_linear_gaussian(
    a_mat: &DMatrix<f64>,
    h_mat: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
) -> ValidationReport {
    let mut r = ValidationReport::default();
    let d = a_mat.nrows();
    if !a_mat.is_square() || d == 0 {
        r.push("a_mat", format!("must be square and nonempty, got {}x{}", a_mat.nrows(), a_mat.ncols()));
    }
    check_finite(&mut r, "a_mat", a_mat);
    if h_mat.nrows() != d || h_mat.ncols() == 0 {
        r.push("h_mat", format!("must be {d}xm with m >= 1, got {}x{}", h_mat.nrows(), h_mat.ncols()));
    }
    check_finite(&mut r, "h_mat", h_mat);
    if sigma.nrows() != d {
        r.push("sigma", format!("must have {d} rows, got {}", sigma.nrows()));
    }
    check_finite(&mut r, "sigma", sigma);
    if mean0.len() != d {
        r.push("mean0", format!("has length {}, expected {d}", mean0.len()));
    }
    if mean0.iter().any(|x| !x.is_finite()) {
        r.push("mean0", "entries must be finite");
    }
    if cov0.nrows() != d || cov0.ncols() != d {
        r.push("cov0", format!("must be {d}x{d}, got {}x{}", cov0.nrows(), cov0.ncols()));
        return r;
    }
    check_finite(&mut r, "cov0", cov0);
    for i in 0..d {
        for j in (i + 1)..d {
            if (cov0[(i, j)] - cov0[(j, i)]).abs() > 1e-12 {
                r.push(format!("cov0[{i}][{j}]"), "not symmetric");
            }
        }
    }
    if r.is_valid() {
        let lmin = linalg::min_symmetric_eigenvalue(cov0);
        if lmin < -1e-10 {
            r.push("cov0", format!("not positive semidefinite (min eigenvalue {lmin})"));
        }
    }
    r
}

/// Generator of a continuous-time Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix(DMatrix<f64>);

impl RateMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        validate_rate(&a).into_result()?;
        Ok(RateMatrix(a))
    }

    pub fn from_rows(d: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != d * d {
            return Err(Error::invalid(format!("expected {} entries, got {}", d * d, rows.len())));
        }
        Self::new(DMatrix::from_row_slice(d, d, rows))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.0[(i, i)]
    }

    /// `Q(i) = sum_j A(i,j) (e_i - e_j)(e_i - e_j)^T`, so that
    /// `(Gamma f)(i) = f^T Q(i) f`.
    pub fn q_matrix(&self, i: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut q = DMatrix::zeros(d, d);
        for j in 0..d {
            if j == i {
                continue;
            }
            let a = self.0[(i, j)];
            q[(i, i)] += a;
            q[(j, j)] += a;
            q[(i, j)] -= a;
            q[(j, i)] -= a;
        }
        q
    }

    pub fn carre_du_champ_op(&self) -> CarreDuChamp {
        CarreDuChamp {
            q_of: (0..self.dim()).map(|i| self.q_matrix(i)).collect(),
        }
    }

    /// `(Gamma f)(i) = sum_j A(i,j) (f(i) - f(j))^2`.
    pub fn carre_du_champ(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        linalg::check_len("f", f, self.dim())?;
        let d = self.dim();
        Ok(DVector::from_fn(d, |i, _| {
            (0..d)
                .filter(|&j| j != i)
                .map(|j| self.0[(i, j)] * (f[i] - f[j]).powi(2))
                .sum()
        }))
    }

    /// `E[Q(X)]` for `X ~ rho`.
    pub fn expected_q(&self, rho: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut q = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let w = rho[i] * self.0[(i, j)];
                q[(i, i)] += w;
                q[(j, j)] += w;
                q[(i, j)] -= w;
                q[(j, i)] -= w;
            }
        }
        q
    }

    /// Partition of the states into closed communicating classes and
    /// transient states.
    pub fn ergodic_classes(&self) -> ErgodicDecomposition {
        let d = self.dim();
        let reach: Vec<Vec<bool>> = (0..d).map(|s| self.reachable_from(s)).collect();
        let mut assigned = vec![false; d];
        let mut classes = Vec::new();
        let mut transient = Vec::new();
        for i in 0..d {
            if assigned[i] {
                continue;
            }
            let class: Vec<usize> = (0..d).filter(|&j| reach[i][j] && reach[j][i]).collect();
            let closed = (0..d).all(|j| !reach[i][j] || class.contains(&j));
            for &j in &class {
                assigned[j] = true;
            }
            if closed {
                classes.push(class);
            } else {
                transient.extend(class);
            }
        }
        transient.sort_unstable();
        ErgodicDecomposition { classes, transient }
    }

    fn reachable_from(&self, start: usize) -> Vec<bool> {
        let d = self.dim();
        let mut seen = vec![false; d];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in 0..d {
                if j != i && !seen[j] && self.0[(i, j)] > EDGE_TOL {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen
    }

    /// Invariant probability measure of a closed communicating class,
    /// embedded in `R^d` (zero off the class).
    pub fn invariant_measure(&self, class: &[usize]) -> Result<SimplexVector> {
        let d = self.dim();
        if class.is_empty() || class.iter().any(|&i| i >= d) {
            return Err(Error::invalid("class must be a nonempty set of valid state indices"));
        }
        for &i in class {
            for j in 0..d {
                if !class.contains(&j) && self.0[(i, j)] > EDGE_TOL {
                    return Err(Error::invalid(format!(
                        "class is not closed: rate {} from state {i} to {j}",
                        self.0[(i, j)]
                    )));
                }
            }
        }
        let k = class.len();
        let mut full = DVector::zeros(d);
        if k == 1 {
            full[class[0]] = 1.0;
            return SimplexVector::new(full);
        }
        // Least squares for [A_C^T; 1^T] x = [0; 1].
        let mut sys = DMatrix::zeros(k + 1, k);
        for (r, &i) in class.iter().enumerate() {
            for (c, &j) in class.iter().enumerate() {
                sys[(c, r)] = self.0[(i, j)];
            }
            sys[(k, r)] = 1.0;
        }
        let mut rhs = DVector::zeros(k + 1);
        rhs[k] = 1.0;
        let x = sys
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::numerical(0, e))?;
        for (r, &i) in class.iter().enumerate() {
            full[i] = x[r].max(0.0);
        }
        SimplexVector::normalized(full)
    }
}

/// Output of [`RateMatrix::ergodic_classes`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErgodicDecomposition {
    /// Closed communicating classes, each sorted, ordered by smallest state.
    pub classes: Vec<Vec<usize>>,
    pub transient: Vec<usize>,
}

impl ErgodicDecomposition {
    pub fn class_of(&self, state: usize) -> Option<usize> {
        self.classes.iter().position(|c| c.contains(&state))
    }

    pub fn indicator(&self, k: usize, d: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        for &i in &self.classes[k] {
            v[i] = 1.0;
        }
        v
    }
}

/// The matrices `Q(i)` of the carré du champ.
#[derive(Debug, Clone, PartialEq)]
pub struct CarreDuChamp {
    pub q_of: Vec<DMatrix<f64>>,
}

impl CarreDuChamp {
    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.q_of.len(), self.q_of.iter().map(|q| f.dot(&(q * f))))
    }
}

/// Observation function `h`, stored as the `d x m` matrix `H` whose row `i`
/// is `h(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix(DMatrix<f64>);

impl ObservationMatrix {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        let mut r = ValidationReport::default();
        if h.ncols() == 0 || h.nrows() == 0 {
            r.push("obs", "must be nonempty");
        }
        check_finite(&mut r, "obs", &h);
        r.into_result()?;
        Ok(ObservationMatrix(h))
    }

    /// Single-column observation `h`.
    pub fn column(h: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(h.len(), 1, h))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.0.ncols()
    }

    /// `|h(i)|^2` for every state.
    pub fn squared_norms(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.0.row(i).norm_squared())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ObservationMatrix(&self.0 * factor)
    }

    /// `max_i |h(i)|`.
    pub fn max_norm(&self) -> f64 {
        self.squared_norms().iter().cloned().fold(0.0, f64::max).sqrt()
    }
}

/// Probability vector on `{0, .., d-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(DVector<f64>);

impl SimplexVector {
    pub fn new(v: DVector<f64>) -> Result<Self> {
        validate_simplex("simplex", &v).into_result()?;
        Ok(SimplexVector(v))
    }

    /// Rescale a nonnegative vector onto the simplex.
    pub fn normalized(v: DVector<f64>) -> Result<Self> {
        if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid("entries must be finite and nonnegative"));
        }
        let s: f64 = v.iter().sum();
        if !(s > 0.0) {
            return Err(Error::invalid("total mass is zero"));
        }
        Ok(SimplexVector(v / s))
    }

    pub fn uniform(d: usize) -> Self {
        SimplexVector(DVector::from_element(d, 1.0 / d as f64))
    }

    pub fn point_mass(d: usize, i: usize) -> Self {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        SimplexVector(v)
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(v))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `mu(f)`.
    pub fn expect(&self, f: &DVector<f64>) -> f64 {
        self.0.dot(f)
    }

    pub fn variance(&self, f: &DVector<f64>) -> f64 {
        let m = self.expect(f);
        self.0.iter().zip(f.iter()).map(|(p, x)| p * (x - m) * (x - m)).sum()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.0[i] > 0.0).collect()
    }
}

impl core::ops::Index<usize> for SimplexVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Finite-state HMM with white-noise observations `dZ = h(X) dt + dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    pub rate: RateMatrix,
    pub obs: ObservationMatrix,
    pub prior: SimplexVector,
}

impl HmmModel {
    pub fn new(rate: RateMatrix, obs: ObservationMatrix, prior: SimplexVector) -> Result<Self> {
        let d = rate.dim();
        let mut r = ValidationReport::default();
        if obs.dim() != d {
            r.push("obs", format!("has {} rows, expected {d}", obs.dim()));
        }
        if prior.dim() != d {
            r.push("prior", format!("has length {}, expected {d}", prior.dim()));
        }
        r.into_result()?;
        Ok(HmmModel { rate, obs, prior })
    }

    /// Build from raw arrays, failing with the full diagnostics report.
    pub fn from_parts(rate: DMatrix<f64>, obs: DMatrix<f64>, prior: DVector<f64>) -> Result<Self> {
        validate_hmm(&rate, &obs, &prior).into_result()?;
        Ok(HmmModel {
            rate: RateMatrix(rate),
            obs: ObservationMatrix(obs),
            prior: SimplexVector(prior),
        })
    }

    pub fn validate(&self) -> ValidationReport {
        validate_hmm(self.rate.matrix(), self.obs.matrix(), self.prior.as_vector())
    }

    pub fn dim(&self) -> usize {
        self.rate.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.obs_dim()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        self.rate.matrix()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        self.obs.matrix()
    }

    pub fn with_prior(&self, prior: SimplexVector) -> Result<Self> {
        HmmModel::new(self.rate.clone(), self.obs.clone(), prior)
    }

    pub fn with_obs(&self, obs: ObservationMatrix) -> Result<Self> {
        HmmModel::new(self.rate.clone(), obs, self.prior.clone())
    }

    pub fn carre_du_champ(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.rate.carre_du_champ(f)
    }

    /// Marginal law `mu_t = exp(A^T t) mu` of the state.
    pub fn marginal(&self, t: f64) -> DVector<f64> {
        linalg::expm(&(self.a().transpose() * t)) * self.prior.as_vector()
    }
}

/// `dX = A^T X dt + sigma dB`, `dZ = H^T X dt + dW`, `X_0 ~ N(mean0, cov0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    pub a_mat: DMatrix<f64>,
    pub h_mat: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub mean0: DVector<f64>,
    pub cov0: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(
        a_mat: DMatrix<f64>,
        h_mat: DMatrix<f64>,
        sigma: DMatrix<f64>,
        mean0: DVector<f64>,
        cov0: DMatrix<f64>,
    ) -> Result<Self> {
        validate_linear_gaussian(&a_mat, &h_mat, &sigma, &mean0, &cov0).into_result()?;
        Ok(LinearGaussianModel {
            a_mat,
            h_mat,
            sigma,
            mean0,
            cov0,
        })
    }

    pub fn validate(&self) -> ValidationReport {
        validate_linear_gaussian(&self.a_mat, &self.h_mat, &self.sigma, &self.mean0, &self.cov0)
    }

    pub fn dim(&self) -> usize {
        self.a_mat.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h_mat.ncols()
    }

    /// Process noise covariance `Q = sigma sigma^T`.
    pub fn q(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }

    pub fn with_cov0(&self, cov0: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a_mat.clone(), self.h_mat.clone(), self.sigma.clone(), self.mean0.clone(), cov0)
    }
}
