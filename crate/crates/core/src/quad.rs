//! Small numerical kernels shared by several modules.

use crate::error::{Error, Result};

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut evals = 3usize;
    let v = simpson_rec(&f, a, b, fa, fm, fb, whole, tol, 60, &mut evals)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("quadrature on [{a}, {b}] produced {v}")))
    }
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    evals: &mut usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    *evals += 2;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 || *evals > 5_000_000 {
        return Err(Error::Numeric(format!(
            "adaptive Simpson did not reach tolerance {tol:e} on [{a}, {b}]"
        )));
    }
    Ok(simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, evals)?
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, evals)?)
}

/// Smallest `x` in `[lo, hi]` with `f(x) >= target` for nondecreasing `f`,
/// located by bisection to absolute tolerance `tol`.
pub fn bisect_increasing<F: Fn(f64) -> f64>(f: F, target: f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `ln(e^a + e^b)` without overflow.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + (-(a - b).abs()).exp().ln_1p()
}

/// Solves a tridiagonal system in place (Thomas algorithm).
///
/// `sub[i]` multiplies `x[i-1]`, `diag[i]` multiplies `x[i]`, `sup[i]`
/// multiplies `x[i+1]`; `rhs` is overwritten with the solution. `scratch`
/// must have the same length as `rhs`.
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = rhs.len();
    debug_assert!(sub.len() == n && diag.len() == n && sup.len() == n && scratch.len() == n);
    let mut beta = diag[0];
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = sup[i - 1] / beta;
        beta = diag[i] - sub[i] * scratch[i];
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
}
