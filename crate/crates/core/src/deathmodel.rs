//! The model with deaths: at each clock ring a particle splits in two with
//! probability `p2 = 1 - p0` and dies with probability `p0`. The penalty
//! weight is `sigma` per branching event.
//!
//! With `v(t) = E[sigma^{m(t)}]` the ODE is `v' = sigma p2 v^2 - v + p0`,
//! `v(0) = 1`. Writing `v = v_minus + f` turns it into the Bernoulli equation
//! `f' = a f + sigma p2 f^2` with `a = 2 sigma p2 v_minus - 1 = -sqrt(D)`,
//! which is solved in closed form below.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::qmgw::{particle_count, sample_gw_tree};
use crate::quad::adaptive_simpson;
use crate::rng::StreamKey;
use crate::stats::{Estimate, WeightedEstimate, WeightedSamples};

/// Below this `|a|` the factor `(e^{at} - 1) / a` is evaluated by its series.
const SERIES_CUTOFF: f64 = 1e-8;

/// Roots of `sigma p2 v^2 - v + p0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeathFixpoints {
    pub v_plus: f64,
    pub v_minus: f64,
    /// `1 - 4 sigma p2 p0`.
    pub discriminant: f64,
}

fn check(sigma: f64, p0: f64) -> Result<()> {
    ensure(sigma > 0.0 && sigma <= 1.0, || format!("sigma must lie in (0, 1], got {sigma}"))?;
    ensure((0.0..1.0).contains(&p0), || format!("p0 must lie in [0, 1), got {p0}"))
}

fn check_t(t: f64) -> Result<()> {
    ensure(t >= 0.0 && t.is_finite(), || format!("t must be finite and nonnegative, got {t}"))
}

pub fn fixpoints(sigma: f64, p0: f64) -> Result<DeathFixpoints> {
    check(sigma, p0)?;
    let b = sigma * (1.0 - p0);
    let disc = 1.0 - 4.0 * b * p0;
    if disc < 0.0 {
        return Err(Error::Internal(format!("complex fixpoints at sigma = {sigma}, p0 = {p0}")));
    }
    let sq = disc.sqrt();
    // larger root first, the smaller from the product p0 / b
    let v_plus = (1.0 + sq) / (2.0 * b);
    let v_minus = 2.0 * p0 / (1.0 + sq);
    Ok(DeathFixpoints { v_plus, v_minus, discriminant: disc })
}

/// `(e^{at} - 1) / a`, continuous through `a = 0`.
fn expm1_over(a: f64, t: f64) -> f64 {
    if a.abs() * t.max(1.0) < SERIES_CUTOFF {
        t * (1.0 + a * t / 2.0 + a * a * t * t / 6.0)
    } else {
        (a * t).exp_m1() / a
    }
}

/// `1 - u0 b (e^{at} - 1) / a` for the start value `w0`.
///
/// Away from `a = 0` this is written as `q + (1 - q) e^{at}` with
/// `q = b (v_plus - w0) / sqrt(D)` taken from the roots, which stays accurate
/// when `w0` sits on `v_plus`.
fn denominator(fp: &DeathFixpoints, b: f64, t: f64, w0: f64) -> f64 {
    let sq = fp.discriminant.sqrt();
    let a = -sq;
    if a.abs() * t.max(1.0) < SERIES_CUTOFF {
        return 1.0 - (w0 - fp.v_minus) * b * expm1_over(a, t);
    }
    let q = b * (fp.v_plus - w0) / sq;
    let c = b * (w0 - fp.v_minus) / sq;
    q + c * (a * t).exp()
}

/// Solution of the fixpoint-shifted ODE started from `w0`.
fn solve_from(sigma: f64, p0: f64, t: f64, w0: f64) -> Result<f64> {
    let fp = fixpoints(sigma, p0)?;
    let b = sigma * (1.0 - p0);
    let a = -fp.discriminant.sqrt();
    let u0 = w0 - fp.v_minus;
    let den = denominator(&fp, b, t, w0);
    if !(den > 0.0) {
        return Err(Error::Numeric(format!("closed form blows up at t = {t}")));
    }
    Ok(fp.v_minus + (a * t).exp() * u0 / den)
}

/// `v(t) = E[sigma^{m(t)}]`.
pub fn partition_v_death(sigma: f64, p0: f64, t: f64) -> Result<f64> {
    check_t(t)?;
    solve_from(sigma, p0, t, 1.0)
}

/// `E[e^{-gamma n(t)} sigma^{m(t)}]`: the same ODE started from `e^{-gamma}`.
pub fn generating_w(sigma: f64, p0: f64, t: f64, gamma: f64) -> Result<f64> {
    check_t(t)?;
    ensure(gamma >= 0.0, || format!("gamma must be nonnegative, got {gamma}"))?;
    solve_from(sigma, p0, t, (-gamma).exp())
}

/// Unnormalised mean `E[n(t) sigma^{m(t)}] = -d/dgamma w at gamma = 0`.
fn weighted_count(sigma: f64, p0: f64, t: f64) -> Result<f64> {
    let fp = fixpoints(sigma, p0)?;
    let b = sigma * (1.0 - p0);
    let a = -fp.discriminant.sqrt();
    let den = denominator(&fp, b, t, 1.0);
    Ok((a * t).exp() / (den * den))
}

/// Mean particle number at time `t` under the penalised law.
pub fn mean_n_death(sigma: f64, p0: f64, t: f64) -> Result<f64> {
    check_t(t)?;
    Ok(weighted_count(sigma, p0, t)? / partition_v_death(sigma, p0, t)?)
}

/// `exp(int_0^t (2 p2 sigma v(s) - 1) ds)` by adaptive quadrature of the
/// closed-form `v`.
pub fn u_sigma_direct(sigma: f64, p0: f64, t: f64) -> Result<f64> {
    check(sigma, p0)?;
    check_t(t)?;
    let p2 = 1.0 - p0;
    let integrand = |s: f64| 2.0 * p2 * sigma * partition_v_death(sigma, p0, s).unwrap_or(f64::NAN) - 1.0;
    Ok(adaptive_simpson(integrand, 0.0, t, 1e-10)?.exp())
}

/// Monte Carlo estimates from unpenalised trees with deaths, reweighted by
/// `sigma^{m(t)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeathSample {
    /// Plain mean of `sigma^{m(t)}`, an estimate of `v(t)`.
    pub partition: Estimate,
    /// Mean particle number under the penalised law.
    pub mean_n: WeightedEstimate,
    /// Survival probability under the penalised law.
    pub survival: WeightedEstimate,
}

pub fn sample_weighted(sigma: f64, p0: f64, t: f64, n_samples: usize, key: StreamKey) -> Result<DeathSample> {
    check(sigma, p0)?;
    ensure(n_samples > 1, || "need at least two samples".into())?;
    let draws: Result<Vec<(usize, usize)>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let tree = sample_gw_tree(p0, t, key.index(i))?;
            Ok((tree.branch_count(), particle_count(&tree, t)?))
        })
        .collect();
    let draws = draws?;
    let ln_sigma = sigma.ln();
    let weights: Vec<f64> = draws.iter().map(|&(m, _)| (m as f64 * ln_sigma).exp()).collect();
    let mut counts = WeightedSamples::new();
    let mut alive = WeightedSamples::new();
    for &(m, n) in &draws {
        counts.push(m as f64 * ln_sigma, n as f64);
        alive.push(m as f64 * ln_sigma, if n > 0 { 1.0 } else { 0.0 });
    }
    Ok(DeathSample {
        partition: Estimate::mean_of(&weights),
        mean_n: counts.estimate()?,
        survival: alive.estimate()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rk4(sigma: f64, p0: f64, t: f64, w0: f64, h: f64) -> f64 {
        let b = sigma * (1.0 - p0);
        let rhs = |v: f64| b * v * v - v + p0;
        let steps = (t / h).round() as usize;
        let h = t / steps as f64;
        let mut v = w0;
        for _ in 0..steps {
            let k1 = rhs(v);
            let k2 = rhs(v + 0.5 * h * k1);
            let k3 = rhs(v + 0.5 * h * k2);
            let k4 = rhs(v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        v
    }

    #[test]
    fn fixpoints_special_cases() {
        let f = fixpoints(1.0, 0.3).unwrap();
        assert!((f.v_plus - 1.0).abs() < 1e-15);
        assert!((f.v_minus - 0.3 / 0.7).abs() < 1e-15);
        let f = fixpoints(0.8, 0.0).unwrap();
        assert!((f.v_plus - 1.25).abs() < 1e-15);
        assert_eq!(f.v_minus, 0.0);
        assert!(fixpoints(0.0, 0.2).is_err());
        assert!(fixpoints(0.5, 1.0).is_err());
    }

    #[test]
    fn fixpoints_are_roots() {
        for &sigma in &[0.1, 0.5, 0.9, 0.999, 1.0] {
            for &p0 in &[0.0, 0.05, 0.2, 0.4, 0.49, 0.7] {
                let f = fixpoints(sigma, p0).unwrap();
                let b = sigma * (1.0 - p0);
                for v in [f.v_plus, f.v_minus] {
                    assert!((b * v * v - v + p0).abs() < 1e-12, "sigma {sigma} p0 {p0} v {v}");
                }
                assert!(f.v_minus <= f.v_plus);
            }
        }
    }

    #[test]
    fn v_minus_is_nondecreasing_in_sigma() {
        for &p0 in &[0.05, 0.1, 0.2, 0.3, 0.4] {
            let mut prev = 0.0;
            for i in 1..=100 {
                let v = fixpoints(i as f64 / 100.0, p0).unwrap().v_minus;
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn v_minus_near_sigma_one_is_first_order() {
        // slope at sigma = 1 is p0^2 / (p2 (p2 - p0)) for p2 > 1/2
        let (p0, p2) = (0.2, 0.8);
        let slope = p0 * p0 / (p2 * (p2 - p0));
        for &eps in &[1e-2, 1e-3, 1e-4] {
            let v = fixpoints(1.0 - eps, p0).unwrap().v_minus;
            let err = (p0 / p2 - v) - slope * eps;
            assert!(err.abs() < 5.0 * eps * eps, "eps {eps}: {err}");
        }
    }

    #[test]
    fn partition_matches_rk4() {
        let v = partition_v_death(0.9, 0.2, 2.0).unwrap();
        let r = rk4(0.9, 0.2, 2.0, 1.0, 1e-4);
        assert!((v - r).abs() < 1e-8, "{v} vs {r}");
        let w = generating_w(0.9, 0.2, 2.0, 0.5).unwrap();
        let r = rk4(0.9, 0.2, 2.0, (-0.5f64).exp(), 1e-4);
        assert!((w - r).abs() < 1e-8, "{w} vs {r}");
    }

    #[test]
    fn partition_limits() {
        for &t in &[0.0, 1.0, 10.0, 100.0] {
            assert!((partition_v_death(1.0, 0.3, t).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(partition_v_death(0.7, 0.2, 0.0).unwrap(), 1.0);
        let vm = fixpoints(0.7, 0.2).unwrap().v_minus;
        assert!((partition_v_death(0.7, 0.2, 200.0).unwrap() - vm).abs() < 1e-12);
        // no deaths reduces to the pure-birth partition function
        let pure = crate::analytics::partition_v(0.6, 3.0).unwrap();
        assert!((partition_v_death(0.6, 0.0, 3.0).unwrap() - pure).abs() < 1e-12);
    }

    #[test]
    fn generating_function_edges() {
        for &t in &[0.0, 0.5, 3.0] {
            assert_eq!(generating_w(0.8, 0.1, t, 0.0).unwrap(), partition_v_death(0.8, 0.1, t).unwrap());
        }
        assert!((generating_w(0.8, 0.1, 0.0, 0.7).unwrap() - (-0.7f64).exp()).abs() < 1e-15);
        // starting at the fixpoint stays there
        let vm = fixpoints(0.8, 0.1).unwrap().v_minus;
        let g = -vm.ln();
        assert!((generating_w(0.8, 0.1, 5.0, g).unwrap() - vm).abs() < 1e-12);
    }

    #[test]
    fn ode_residual() {
        let (sigma, p0) = (0.85, 0.25);
        let b = sigma * (1.0 - p0);
        let h = 1e-4;
        for i in 1..40 {
            let t = i as f64 * 0.25;
            let d = (partition_v_death(sigma, p0, t + h).unwrap() - partition_v_death(sigma, p0, t - h).unwrap()) / (2.0 * h);
            let v = partition_v_death(sigma, p0, t).unwrap();
            assert!((d - (b * v * v - v + p0)).abs() < 1e-8);
        }
    }

    #[test]
    fn critical_case_is_continuous() {
        // sigma = 1, p0 = 1/2 makes a = 0
        let exact = partition_v_death(1.0, 0.5, 3.0).unwrap();
        let near = partition_v_death(1.0, 0.5 - 1e-9, 3.0).unwrap();
        assert!((exact - near).abs() < 1e-6);
        let m = mean_n_death(1.0, 0.5, 3.0).unwrap();
        // critical binary branching: mean stays 1
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_matches_numerical_derivative() {
        let (sigma, p0, t) = (0.9, 0.2, 2.0);
        let h = 1e-5;
        let d = (generating_w(sigma, p0, t, h).unwrap() - generating_w(sigma, p0, t, 0.0).unwrap()) / h;
        let m = -d / partition_v_death(sigma, p0, t).unwrap();
        assert!((m - mean_n_death(sigma, p0, t).unwrap()).abs() < 1e-4);
        assert!((mean_n_death(0.7, 0.3, 0.0).unwrap() - 1.0).abs() < 1e-15);
        // sigma = 1: plain binary branching with deaths, mean e^{(p2 - p0) t}
        assert!((mean_n_death(1.0, 0.2, 2.0).unwrap() - (1.2f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn direct_route_edges() {
        assert_eq!(u_sigma_direct(0.6, 0.2, 0.0).unwrap(), 1.0);
        assert!((u_sigma_direct(1.0, 0.0, 2.0).unwrap() - 2f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn weighted_sampler_matches_closed_form() {
        let s = sample_weighted(0.9, 0.2, 2.0, 20_000, StreamKey::from_seed(4)).unwrap();
        let v = partition_v_death(0.9, 0.2, 2.0).unwrap();
        assert!(s.partition.within(v, 4.0), "{:?} vs {v}", s.partition);
        let m = mean_n_death(0.9, 0.2, 2.0).unwrap();
        assert!((s.mean_n.value - m).abs() <= 4.0 * s.mean_n.std_error, "{:?} vs {m}", s.mean_n);
    }
}
