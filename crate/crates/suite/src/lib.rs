//! Numerical oracles for the acceptance suite.
//!
//! Nothing here depends on `crl_core`; every check compares library output
//! against one of these independent computations or a hardcoded table.

use nalgebra::{DMatrix, DVector};

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
    }

    let fa = f(a);
    let fb = f(b);
    let (m, fm, whole) = simpson(&f, a, fa, b, fb);
    recurse(&f, a, fa, b, fb, m, fm, whole, tol, 48)
}

/// Sample mean and population variance.
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Central-difference Jacobian of `f` at `x`.
pub fn numeric_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        jac.set_column(j, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    jac
}

/// `‖a - b‖_F / max(‖b‖_F, 1)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// `(base, per-iteration)` pairs for the O(N), O(N²) and O(N³) terms.
pub type FlopRow = [(u64, u64); 3];

/// Per-step flop coefficients `[O(N), O(N²), O(N³)]`, each
/// `base + per_iteration * T`. Rows are
/// (filter, scheme) with filter in {EKF, MLVC} and scheme in {nCRL, hCRL, fCRL}.
pub const FLOP_TABLE: [(&str, &str, FlopRow); 6] = [
    ("EKF", "nCRL", [(888, 0), (0, 0), (0, 0)]),
    ("EKF", "hCRL", [(187, 0), (289, 0), (335, 0)]),
    ("EKF", "fCRL", [(224, 0), (309, 0), (597, 0)]),
    ("MLVC", "nCRL", [(975, 250), (0, 0), (0, 0)]),
    ("MLVC", "hCRL", [(189, 56), (309, 5), (415, 195)]),
    ("MLVC", "fCRL", [(223, 72), (325, 21), (569, 401)]),
];

/// Evaluates one table row at `n` neighbors and `t` iterations.
pub fn table_flops(row: &FlopRow, n: u64, t: u64) -> u64 {
    let c = |i: usize| row[i].0 + row[i].1 * t;
    c(0) * n + c(1) * n.pow(2) + c(2) * n.pow(3)
}
