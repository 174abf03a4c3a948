//! Extended Kalman filter and the kernel-induced (maximum correntropy)
//! variant with Logarithmic-Versoria, Versoria and Gaussian kernels.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CrlError, Result};
use crate::models::{SchemeKind, SystemModel};
use crate::scalar::{lit, Scalar};

/// Estimate and covariance of the (augmented) relative state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBelief<T: Scalar> {
    pub x_hat: DVector<T>,
    pub p: DMatrix<T>,
}

impl<T: Scalar> FilterBelief<T> {
    pub fn new(x_hat: DVector<T>, p: DMatrix<T>) -> Result<Self> {
        let b = Self { x_hat, p };
        b.validate()?;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.x_hat.len()
    }

    /// Checks shape, symmetry and positive definiteness of `P`.
    pub fn validate(&self) -> Result<()> {
        let n = self.x_hat.len();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(CrlError::Dimension {
                expected: n,
                got: self.p.nrows(),
                context: "belief covariance",
            });
        }
        let scale = inf_norm(&self.p);
        if inf_norm(&(&self.p - self.p.transpose())) > lit::<T>(1e-10) * scale.max(T::one()) {
            return Err(CrlError::LinearAlgebra("belief covariance is not symmetric".into()));
        }
        if Cholesky::new(self.p.clone()).is_none() {
            return Err(CrlError::LinearAlgebra(
                "belief covariance is not positive definite".into(),
            ));
        }
        Ok(())
    }

    /// Block of the belief belonging to state indices `start..start + len`.
    pub fn block(&self, start: usize, len: usize) -> FilterBelief<T> {
        FilterBelief {
            x_hat: self.x_hat.rows(start, len).into_owned(),
            p: self.p.view((start, start), (len, len)).into_owned(),
        }
    }

    /// Block-diagonal belief assembled from independent parts.
    pub fn stack(parts: &[FilterBelief<T>]) -> FilterBelief<T> {
        let n: usize = parts.iter().map(|b| b.dim()).sum();
        let mut x = DVector::zeros(n);
        let mut p = DMatrix::zeros(n, n);
        let mut at = 0;
        for b in parts {
            let k = b.dim();
            x.rows_mut(at, k).copy_from(&b.x_hat);
            p.view_mut((at, at), (k, k)).copy_from(&b.p);
            at += k;
        }
        FilterBelief { x_hat: x, p }
    }
}

fn inf_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    m.row_iter()
        .map(|r| r.iter().fold(T::zero(), |acc, v| acc + v.abs()))
        .fold(T::zero(), |a, b| a.max(b))
}

fn symmetrize<T: Scalar>(p: &mut DMatrix<T>) {
    let half = lit::<T>(0.5);
    let t = p.transpose();
    *p += t;
    *p *= half;
}

fn cholesky<T: Scalar>(m: DMatrix<T>, what: &str) -> Result<Cholesky<T, Dyn>> {
    Cholesky::new(m).ok_or_else(|| CrlError::LinearAlgebra(format!("{what} is not positive definite")))
}

fn check_square<T: Scalar>(m: &DMatrix<T>, n: usize, context: &'static str) -> Result<()> {
    check_dim(n, m.nrows(), context)?;
    check_dim(n, m.ncols(), context)
}

/// `(I - KH) P (I - KH)^T + K R K^T`, symmetrized.
fn joseph<T: Scalar>(p: &DMatrix<T>, k: &DMatrix<T>, h: &DMatrix<T>, r: &DMatrix<T>) -> DMatrix<T> {
    let n = p.nrows();
    let ikh = DMatrix::identity(n, n) - k * h;
    let mut out = &ikh * p * ikh.transpose() + k * r * k.transpose();
    symmetrize(&mut out);
    out
}

/// Prior belief from one Euler step of the model.
pub fn ekf_predict<T: Scalar, M: SystemModel<T> + ?Sized>(
    belief: &FilterBelief<T>,
    input: &DVector<T>,
    q: &DMatrix<T>,
    ts: T,
    model: &M,
) -> Result<FilterBelief<T>> {
    check_dim(model.state_dim(), belief.dim(), "belief state")?;
    check_square(q, model.input_dim(), "input noise covariance")?;
    let mut x = &belief.x_hat + model.derivative(&belief.x_hat, input)? * ts;
    model.normalize_state(&mut x);
    let (a, b) = model.process_jacobians(&belief.x_hat, input, ts)?;
    let mut p = &a * &belief.p * a.transpose() + &b * q * b.transpose();
    symmetrize(&mut p);
    Ok(FilterBelief { x_hat: x, p })
}

/// Standard Kalman measurement update with a Joseph-form covariance.
pub fn ekf_update<T: Scalar, M: SystemModel<T> + ?Sized>(
    prior: &FilterBelief<T>,
    y: &DVector<T>,
    r: &DMatrix<T>,
    model: &M,
) -> Result<FilterBelief<T>> {
    check_dim(model.measurement_dim(), y.len(), "measurement")?;
    check_square(r, y.len(), "measurement noise covariance")?;
    let h = model.measurement_jacobian(&prior.x_hat)?;
    let innovation = y - model.measure(&prior.x_hat)?;
    let k = gain(&prior.p, &h, r)?;
    let mut x = &prior.x_hat + &k * innovation;
    model.normalize_state(&mut x);
    Ok(FilterBelief {
        x_hat: x,
        p: joseph(&prior.p, &k, &h, r),
    })
}

/// `K = P H^T (H P H^T + R)^{-1}`.
fn gain<T: Scalar>(p: &DMatrix<T>, h: &DMatrix<T>, r: &DMatrix<T>) -> Result<DMatrix<T>> {
    let ph_t = p * h.transpose();
    let mut s = h * &ph_t + r;
    symmetrize(&mut s);
    let chol = cholesky(s, "innovation covariance")?;
    // K^T = S^{-1} H P
    Ok(chol.solve(&ph_t.transpose()).transpose())
}

/// Correntropy kernel with its bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "tau", rename_all = "snake_case")]
pub enum KernelKind {
    LogVersoria(f64),
    Versoria(f64),
    Gaussian(f64),
}

impl KernelKind {
    pub fn tau(&self) -> f64 {
        match *self {
            KernelKind::LogVersoria(t) | KernelKind::Versoria(t) | KernelKind::Gaussian(t) => t,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            KernelKind::LogVersoria(_) => "LV",
            KernelKind::Versoria(_) => "Versoria",
            KernelKind::Gaussian(_) => "Gaussian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.tau();
        if t.is_finite() && t > 0.0 {
            Ok(())
        } else {
            Err(CrlError::Config(format!("kernel bandwidth must be positive, got {t}")))
        }
    }

    pub fn value<T: Scalar>(&self, e: T) -> T {
        let tau = lit::<T>(self.tau());
        let e2 = e * e;
        match self {
            KernelKind::LogVersoria(_) => tau / (tau + (T::one() + e2).ln()),
            KernelKind::Versoria(_) => tau / (tau + e2),
            KernelKind::Gaussian(_) => (-e2 / tau).exp(),
        }
    }

    /// Weight entering the fixed-point regression for a normalized error.
    pub fn weight<T: Scalar>(&self, e: T) -> T {
        let k = self.value(e);
        match self {
            KernelKind::LogVersoria(_) => k * k / (T::one() + e * e),
            KernelKind::Versoria(_) => k * k,
            KernelKind::Gaussian(_) => k,
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}(tau={})", self.label(), self.tau())
    }
}

/// Termination settings of the fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedPointConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub denom_floor: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_iters: 100,
            denom_floor: 1e-6,
        }
    }
}

impl FixedPointConfig {
    pub fn one_iteration() -> Self {
        Self {
            max_iters: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(CrlError::Config("max_iters must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.denom_floor > 0.0) {
            return Err(CrlError::Config("epsilon and denom_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Norm of the element-wise relative change `(next - cur) / cur`.
pub fn relative_increment<T: Scalar>(next: &DVector<T>, cur: &DVector<T>, floor: f64) -> T {
    let floor = lit::<T>(floor);
    next.iter()
        .zip(cur.iter())
        .map(|(&a, &b)| {
            let d = if b < T::zero() { -(-b).max(floor) } else { b.max(floor) };
            let r = (a - b) / d;
            r * r
        })
        .fold(T::zero(), |acc, v| acc + v)
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelUpdate<T: Scalar> {
    pub belief: FilterBelief<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Whitened regression `(z*, F*)` of a measurement update, with
/// `z = [x; y - h(x) + H x]` and `F = [I; H]` scaled by the inverse
/// Cholesky factors of `P` and `R`.
pub fn whitened_regression<T: Scalar, M: SystemModel<T> + ?Sized>(
    prior: &FilterBelief<T>,
    y: &DVector<T>,
    r: &DMatrix<T>,
    model: &M,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let h = model.measurement_jacobian(&prior.x_hat)?;
    let lx = cholesky(prior.p.clone(), "prior covariance")?.unpack();
    let ly = cholesky(r.clone(), "measurement covariance")?.unpack();
    let zy = y - model.measure(&prior.x_hat)? + &h * &prior.x_hat;
    let n = prior.dim();
    let m = y.len();
    let mut z = DVector::zeros(n + m);
    let mut f = DMatrix::zeros(n + m, n);
    z.rows_mut(0, n).copy_from(&solve_lower(
        &lx,
        &DMatrix::from_column_slice(n, 1, prior.x_hat.as_slice()),
    ));
    z.rows_mut(n, m)
        .copy_from(&solve_lower(&ly, &DMatrix::from_column_slice(m, 1, zy.as_slice())));
    f.rows_mut(0, n).copy_from(&solve_lower(&lx, &DMatrix::identity(n, n)));
    f.rows_mut(n, m).copy_from(&solve_lower(&ly, &h));
    Ok((z, f))
}

fn solve_lower<T: Scalar>(l: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    l.solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal")
}

/// Weights stay strictly positive so the weighted covariances exist.
fn floored_weight<T: Scalar>(kernel: &KernelKind, e: T) -> T {
    let eps = T::default_epsilon();
    kernel.weight(e).max(eps * eps)
}

/// Kernel-induced measurement update solved by fixed-point iteration.
///
/// Starting from the prior mean, each iteration reweights the whitened
/// state and measurement residuals, rebuilds the kernel-weighted
/// covariances `P_L = M_x L_x^{-1} M_x^T`, `R_L = M_y L_y^{-1} M_y^T` and
/// recomputes the gain. The covariance is updated once with the final gain.
pub fn mlvc_update<T: Scalar, M: SystemModel<T> + ?Sized>(
    prior: &FilterBelief<T>,
    y: &DVector<T>,
    r: &DMatrix<T>,
    model: &M,
    kernel: &KernelKind,
    config: &FixedPointConfig,
) -> Result<KernelUpdate<T>> {
    check_dim(model.measurement_dim(), y.len(), "measurement")?;
    check_square(r, y.len(), "measurement noise covariance")?;
    let n = prior.dim();
    let m = y.len();
    let h = model.measurement_jacobian(&prior.x_hat)?;
    let innovation = y - model.measure(&prior.x_hat)?;
    let mx = cholesky(prior.p.clone(), "prior covariance")?.unpack();
    let my = cholesky(r.clone(), "measurement covariance")?.unpack();

    let mut x = prior.x_hat.clone();
    let mut k = DMatrix::zeros(n, m);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters.max(1) {
        // Whitened residuals of the stacked regression at the current iterate.
        let dx = &prior.x_hat - &x;
        let ex = solve_lower(&mx, &DMatrix::from_column_slice(n, 1, dx.as_slice()));
        let ry = &innovation + &h * &dx;
        let ey = solve_lower(&my, &DMatrix::from_column_slice(m, 1, ry.as_slice()));

        let inv_wx = DVector::from_iterator(n, ex.iter().map(|&e| T::one() / floored_weight(kernel, e)));
        let inv_wy = DVector::from_iterator(m, ey.iter().map(|&e| T::one() / floored_weight(kernel, e)));
        let mut p_l = &mx * DMatrix::from_diagonal(&inv_wx) * mx.transpose();
        let mut r_l = &my * DMatrix::from_diagonal(&inv_wy) * my.transpose();
        symmetrize(&mut p_l);
        symmetrize(&mut r_l);
        k = gain(&p_l, &h, &r_l)?;

        let next = &prior.x_hat + &k * &innovation;
        iterations += 1;
        let step = relative_increment(&next, &x, config.denom_floor);
        x = next;
        if step <= lit::<T>(config.epsilon) {
            converged = true;
            break;
        }
    }
    model.normalize_state(&mut x);
    Ok(KernelUpdate {
        belief: FilterBelief {
            x_hat: x,
            p: joseph(&prior.p, &k, &h, r),
        },
        iterations,
        converged,
    })
}

/// One step of the kernel-weighted regression map
/// `x <- (F^T W F)^{-1} F^T W z` with `W = diag(w(z - F x))`.
pub fn regression_step(
    z: &DVector<f64>,
    f: &DMatrix<f64>,
    kernel: &KernelKind,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let e = z - f * x;
    let w = DVector::from_iterator(e.len(), e.iter().map(|&v| floored_weight(kernel, v)));
    let mut ftw = f.transpose();
    for (j, wj) in w.iter().enumerate() {
        ftw.column_mut(j).scale_mut(*wj);
    }
    let normal = &ftw * f;
    let chol = cholesky(normal, "weighted normal matrix")?;
    Ok(chol.solve(&(&ftw * z)))
}

/// Iterates [`regression_step`] until the step is below `tol` (absolute).
pub fn solve_regression(
    z: &DVector<f64>,
    f: &DMatrix<f64>,
    kernel: &KernelKind,
    x0: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(DVector<f64>, usize, bool)> {
    let mut x = x0.clone();
    for it in 1..=max_iters {
        let next = regression_step(z, f, kernel, &x)?;
        let d = (&next - &x).norm();
        x = next;
        if d <= tol {
            return Ok((x, it, true));
        }
    }
    Ok((x, max_iters, false))
}

/// Sufficient conditions for the fixed-point iteration to contract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub xi: f64,
    pub rho: f64,
    pub tau: f64,
    /// `Upsilon(tau_star) = rho`; infinite when no bandwidth achieves it.
    pub tau_star: f64,
    /// `Phi(tau_dagger; rho) = zeta`; infinite when no bandwidth achieves it.
    pub tau_dagger: f64,
    pub zeta: f64,
    pub satisfied: bool,
}

struct ContractionTerms {
    sqrt_n: f64,
    abs_z: Vec<f64>,
    row_l1: Vec<f64>,
    rows: Vec<DMatrix<f64>>,
}

impl ContractionTerms {
    fn new(z: &DVector<f64>, f: &DMatrix<f64>) -> Self {
        Self {
            sqrt_n: (f.ncols() as f64).sqrt(),
            abs_z: z.iter().map(|v| v.abs()).collect(),
            row_l1: f.row_iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect(),
            rows: (0..f.nrows()).map(|i| f.rows(i, 1).into_owned()).collect(),
        }
    }

    fn numerator(&self) -> f64 {
        self.sqrt_n * self.abs_z.iter().zip(&self.row_l1).map(|(a, b)| a * b).sum::<f64>()
    }

    fn e_bar(&self, i: usize, rho: f64) -> f64 {
        self.abs_z[i] + rho * self.row_l1[i]
    }

    /// `lambda_min(sum_i w_i F_i^T F_i)`.
    fn lambda_min(&self, w: impl Fn(usize) -> f64) -> f64 {
        let n = self.rows[0].ncols();
        let mut acc = DMatrix::zeros(n, n);
        for (i, r) in self.rows.iter().enumerate() {
            acc += r.transpose() * r * w(i);
        }
        acc.symmetric_eigenvalues().min()
    }

    /// Induced 1-norm of `F_i^T F_i`.
    fn sigma_l1(&self, i: usize) -> f64 {
        let max_abs = self.rows[i].iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        max_abs * self.row_l1[i]
    }

    fn lv_tilde(tau: f64, e: f64) -> f64 {
        KernelKind::LogVersoria(tau).weight(e)
    }

    fn upsilon(&self, tau: f64, rho: f64) -> f64 {
        self.numerator() / self.lambda_min(|i| Self::lv_tilde(tau, self.e_bar(i, rho)))
    }

    fn phi(&self, tau: f64, rho: f64) -> f64 {
        let num: f64 = (0..self.rows.len())
            .map(|i| self.e_bar(i, rho) * self.row_l1[i] * (rho * self.sigma_l1(i) + self.abs_z[i] * self.row_l1[i]))
            .sum();
        4.0 * self.sqrt_n * num / (tau * tau * self.lambda_min(|i| Self::lv_tilde(tau, self.e_bar(i, rho))))
    }
}

/// Smallest `tau` with `g(tau) <= target` for decreasing `g`, by bisection on
/// `log tau` over `[1e-8, 1e12]`.
fn decreasing_root(g: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (1e-8_f64.ln(), 1e12_f64.ln());
    if g(hi.exp()) > target {
        return f64::INFINITY;
    }
    if g(lo.exp()) <= target {
        return lo.exp();
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    hi.exp()
}

/// Evaluates the LV fixed-point contraction conditions for the regression
/// `(z*, F*)` at bandwidth `tau`.
pub fn convergence_check(
    z_star: &DVector<f64>,
    f_star: &DMatrix<f64>,
    tau: f64,
    rho: f64,
    zeta: f64,
) -> Result<ConvergenceReport> {
    check_dim(f_star.nrows(), z_star.len(), "regression rows")?;
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(CrlError::Domain(format!("zeta must lie in (0, 1), got {zeta}")));
    }
    if !(rho > 0.0 && tau > 0.0) {
        return Err(CrlError::Domain("rho and tau must be positive".into()));
    }
    let terms = ContractionTerms::new(z_star, f_star);
    let gram_min = terms.lambda_min(|_| 1.0);
    if f_star.nrows() < f_star.ncols() || gram_min <= 1e-12 * (f_star.norm_squared().max(1.0)) {
        return Err(CrlError::LinearAlgebra("regression matrix is rank deficient".into()));
    }
    let xi = terms.numerator() / gram_min;
    let tau_star = if rho > xi {
        decreasing_root(|t| terms.upsilon(t, rho), rho)
    } else {
        f64::INFINITY
    };
    let tau_dagger = decreasing_root(|t| terms.phi(t, rho), zeta);
    let satisfied = rho > xi && tau >= tau_star.max(tau_dagger);
    Ok(ConvergenceReport {
        xi,
        rho,
        tau,
        tau_star,
        tau_dagger,
        zeta,
        satisfied,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ekf,
    Kernel,
}

impl std::str::FromStr for FilterKind {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ekf" => Ok(FilterKind::Ekf),
            "kernel" | "mlvc" | "mvc" | "mgc" => Ok(FilterKind::Kernel),
            other => Err(CrlError::Config(format!("unknown filter '{other}'"))),
        }
    }
}

/// Floating point operation count of one estimation step for `n_i`
/// neighbors and `t_m` fixed-point iterations.
pub fn flop_estimate(scheme: SchemeKind, filter: FilterKind, n_i: u64, t_m: u64) -> u64 {
    let [c1, c2, c3] = match (filter, scheme) {
        (FilterKind::Ekf, SchemeKind::Ncrl) => [888, 0, 0],
        (FilterKind::Ekf, SchemeKind::Hcrl) => [187, 289, 335],
        (FilterKind::Ekf, SchemeKind::Fcrl) => [224, 309, 597],
        (FilterKind::Kernel, SchemeKind::Ncrl) => [975 + 250 * t_m, 0, 0],
        (FilterKind::Kernel, SchemeKind::Hcrl) => [189 + 56 * t_m, 309 + 5 * t_m, 415 + 195 * t_m],
        (FilterKind::Kernel, SchemeKind::Fcrl) => [223 + 72 * t_m, 325 + 21 * t_m, 569 + 401 * t_m],
    };
    c1 * n_i + c2 * n_i * n_i + c3 * n_i * n_i * n_i
}
