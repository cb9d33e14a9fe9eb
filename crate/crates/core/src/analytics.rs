//! Closed-form evaluators for the simplified (branch-penalised) model and
//! its small-penalty limit.
//!
//! Every function takes the per-branch weight `sigma` directly; the map from
//! physical parameters is [`sigma_of`]. Most formulas are built from the
//! quantity
//!
//! ```text
//! A(sigma, t) = 1 - sigma (1 - e^{-t}) = (1 - sigma) + sigma e^{-t},
//! ```
//!
//! which is evaluated as a sum of two nonnegative terms so that no
//! cancellation occurs for `sigma` near one or for large `t`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::quad::log_add_exp;

fn check_sigma(sigma: f64) -> Result<()> {
    ensure(sigma > 0.0 && sigma <= 1.0, || format!("sigma must lie in (0, 1], got {sigma}"))
}

fn check_time(name: &str, t: f64) -> Result<()> {
    ensure(t >= 0.0 && !t.is_nan(), || format!("{name} must be nonnegative, got {t}"))
}

/// `(1 - sigma) + sigma e^{-t}`; no domain checks.
#[inline]
pub(crate) fn a_term(sigma: f64, t: f64) -> f64 {
    (1.0 - sigma) + sigma * (-t).exp()
}

/// `E[e^{-lambda tau_eps}] = sech(eps sqrt(2 lambda))`, the weight paid per branching event.
pub fn sigma_of(lambda: f64, epsilon: f64) -> Result<f64> {
    ensure(lambda >= 0.0 && lambda.is_finite(), || format!("lambda must be >= 0, got {lambda}"))?;
    ensure(epsilon > 0.0 && epsilon.is_finite(), || format!("epsilon must be > 0, got {epsilon}"))?;
    let x = epsilon * (2.0 * lambda).sqrt();
    // 1/cosh overflows to 0 only for x > ~710, where sech is below f64 range anyway
    Ok(1.0 / x.cosh())
}

/// `1 - sigma_of(lambda, epsilon)` without cancellation: `2 sinh^2(x/2) / cosh x`.
pub fn one_minus_sigma_of(lambda: f64, epsilon: f64) -> Result<f64> {
    sigma_of(lambda, epsilon)?;
    let x = epsilon * (2.0 * lambda).sqrt();
    let s = (0.5 * x).sinh();
    Ok(2.0 * s * s / x.cosh())
}

/// Natural logarithm of the partition function `v_sigma(t) = E[sigma^{n(t)-1}]`.
pub fn log_partition_v(sigma: f64, t: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_time("t", t)?;
    let log_one_minus = if sigma < 1.0 { (1.0 - sigma).ln() } else { f64::NEG_INFINITY };
    Ok(-t - log_add_exp(log_one_minus, sigma.ln() - t))
}

/// Partition function `v_sigma(t) = e^{-t} / ((1 - sigma) + sigma e^{-t})`.
pub fn partition_v(sigma: f64, t: f64) -> Result<f64> {
    Ok(log_partition_v(sigma, t)?.exp())
}

/// Mean particle number at the horizon under the tilted law, `1 / (1 - sigma (1 - e^{-t}))`.
pub fn mean_particles(sigma: f64, t: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_time("t", t)?;
    Ok(1.0 / a_term(sigma, t))
}

/// Laplace transform `E_t[e^{gamma n(s)}]` of the particle number at an
/// intermediate time `s <= t` under the tilted law with horizon `t`.
///
/// Defined while `e^gamma sigma v_sigma(t - s) (1 - e^{-s}) < 1`.
pub fn laplace_n(sigma: f64, t: f64, s: f64, gamma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_time("s", s)?;
    ensure(s <= t, || format!("need s <= t, got s = {s}, t = {t}"))?;
    ensure(gamma.is_finite(), || "gamma must be finite".into())?;
    let rest = a_term(sigma, t - s);
    let q = gamma.exp() * sigma * (-(t - s)).exp() * (-(-s).exp_m1()) / rest;
    ensure(q < 1.0, || {
        format!("Laplace transform diverges: e^gamma sigma v(t-s)(1-e^-s) = {q} >= 1")
    })?;
    Ok(a_term(sigma, t) / ((-gamma).exp() * rest * (1.0 - q)))
}

/// Geometric law on `{1, 2, ...}`: `P(n = k) = p (1 - p)^{k - 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeomLaw {
    p: f64,
}

impl GeomLaw {
    pub fn new(p: f64) -> Result<Self> {
        ensure(p > 0.0 && p <= 1.0, || format!("geometric parameter must lie in (0, 1], got {p}"))?;
        Ok(GeomLaw { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn pmf(&self, k: u64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.p * ((k - 1) as f64 * (-self.p).ln_1p()).exp()
    }

    /// `P(n <= k)`.
    pub fn cdf(&self, k: u64) -> f64 {
        -((k as f64) * (-self.p).ln_1p()).exp_m1()
    }

    /// `P(n >= k)`.
    pub fn tail(&self, k: u64) -> f64 {
        if k <= 1 {
            return 1.0;
        }
        ((k - 1) as f64 * (-self.p).ln_1p()).exp()
    }

    pub fn mean(&self) -> f64 {
        1.0 / self.p
    }

    pub fn variance(&self) -> f64 {
        (1.0 - self.p) / (self.p * self.p)
    }

    /// `E[e^{gamma n}]`, finite while `(1 - p) e^gamma < 1`.
    pub fn laplace(&self, gamma: f64) -> Result<f64> {
        let q = (1.0 - self.p) * gamma.exp();
        ensure(q < 1.0, || format!("geometric Laplace transform diverges at gamma = {gamma}"))?;
        Ok(self.p * gamma.exp() / (1.0 - q))
    }

    /// Inverse-transform draw from a uniform `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> u64 {
        if self.p >= 1.0 {
            return 1;
        }
        let k = ((-u).ln_1p() / (-self.p).ln_1p()).floor();
        (k as u64).saturating_add(1)
    }
}

/// Parameter of the geometric law of `n(t)` at the horizon: `1 - sigma (1 - e^{-t})`.
pub fn geom_param_terminal(sigma: f64, t: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_time("t", t)?;
    Ok(a_term(sigma, t))
}

/// Limiting parameter `(1 + sigma e^rho)^{-1}` of the particle number at
/// time `t + ln(1 - sigma) + rho`, for `rho <= -ln(1 - sigma)`.
pub fn geom_param_window(sigma: f64, rho: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let max_rho = -(-sigma).ln_1p();
    ensure(rho <= max_rho, || format!("rho = {rho} exceeds -ln(1 - sigma) = {max_rho}"))?;
    Ok(1.0 / (1.0 + sigma * rho.exp()))
}

/// Exact parameter of the (geometric) law of `n(s)` under the tilted law with
/// horizon `t`: `A(sigma, t) / A(sigma, t - s)`.
pub fn geom_param_at(sigma: f64, t: f64, s: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_time("s", s)?;
    ensure(s <= t, || format!("need s <= t, got s = {s}, t = {t}"))?;
    Ok(a_term(sigma, t) / a_term(sigma, t - s))
}

/// `P_t(tau_1 <= t - r)` for the first branching time, `0 <= r <= t`.
///
/// The law is defective: its total mass at `r = 0` is `1 - no_branch_mass(sigma, t)`.
pub fn first_branch_cdf(sigma: f64, t: f64, r: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_time("r", r)?;
    ensure(r <= t, || format!("need r <= t, got r = {r}, t = {t}"))?;
    Ok(sigma * (-r).exp() * (-(-(t - r)).exp_m1()) / a_term(sigma, r))
}

/// Probability `e^{-t} / v_sigma(t)` that the root does not branch before the horizon.
pub fn no_branch_mass(sigma: f64, t: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_time("t", t)?;
    Ok(a_term(sigma, t))
}

/// `lim_{t -> inf} P_t(tau_1 <= t - r) = sigma e^{-r} / (1 - sigma (1 - e^{-r}))`.
pub fn first_branch_cdf_limit(sigma: f64, r: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_time("r", r)?;
    Ok(sigma * (-r).exp() / a_term(sigma, r))
}

/// Distribution function of the first waiting time `w` in `[0, h]` of a node
/// with remaining horizon `h`, conditioned on the node branching before the
/// horizon.
pub fn conditional_wait_cdf(sigma: f64, h: f64, w: f64) -> Result<f64> {
    check_sigma(sigma)?;
    ensure(h > 0.0, || format!("remaining horizon must be positive, got {h}"))?;
    if w <= 0.0 {
        return Ok(0.0);
    }
    if w >= h {
        return Ok(1.0);
    }
    Ok(first_branch_cdf(sigma, h, h - w)? / (sigma * (-(-h).exp_m1())))
}

/// Inverse of [`conditional_wait_cdf`] in closed form:
/// `e^w = (1 + u (1 - sigma)(e^h - 1)) / (1 - u sigma (1 - e^{-h}))`.
pub fn conditional_wait_quantile(sigma: f64, h: f64, u: f64) -> Result<f64> {
    check_sigma(sigma)?;
    ensure(h > 0.0, || format!("remaining horizon must be positive, got {h}"))?;
    ensure((0.0..=1.0).contains(&u), || format!("u must lie in [0, 1], got {u}"))?;
    Ok(conditional_wait_quantile_unchecked(sigma, h, u))
}

#[inline]
pub(crate) fn conditional_wait_quantile_unchecked(sigma: f64, h: f64, u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    // ln(e^h - 1) = h + ln(1 - e^{-h})
    let log_expm1_h = h + (-(-h).exp_m1()).ln();
    let log_num = if sigma < 1.0 {
        log_add_exp(0.0, u.ln() + (1.0 - sigma).ln() + log_expm1_h)
    } else {
        0.0
    };
    let den = 1.0 - u * sigma * (-(-h).exp_m1());
    let w = log_num - den.ln();
    w.clamp(0.0, h)
}

/// Waiting-time law of the limiting tree for a node born at (shifted) time `T`:
/// `(1 - e^{-delta}) / (e^{-delta - T} + 1)`, `delta >= 0`.
pub fn limit_kernel_cdf(birth_t: f64, delta: f64) -> Result<f64> {
    ensure(delta >= 0.0, || format!("waiting time must be nonnegative, got {delta}"))?;
    ensure(!birth_t.is_nan(), || "birth time is NaN".into())?;
    Ok(-(-delta).exp_m1() / (1.0 + (-delta - birth_t).exp()))
}

/// Inverse of [`limit_kernel_cdf`]: `w = ln(1 + u e^{-T}) - ln(1 - u)`.
pub fn limit_kernel_quantile(birth_t: f64, u: f64) -> Result<f64> {
    ensure((0.0..1.0).contains(&u), || format!("u must lie in [0, 1), got {u}"))?;
    Ok(limit_kernel_quantile_unchecked(birth_t, u))
}

#[inline]
pub(crate) fn limit_kernel_quantile_unchecked(birth_t: f64, u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    (log_add_exp(0.0, u.ln() - birth_t) - (-u).ln_1p()).max(0.0)
}

/// Logistic law `1 / (1 + e^{-delta})` of the shifted first branching time in the limit.
pub fn limit_first_cdf(delta: f64) -> f64 {
    if delta >= 0.0 {
        1.0 / (1.0 + (-delta).exp())
    } else {
        let e = delta.exp();
        e / (1.0 + e)
    }
}

pub fn limit_first_quantile(u: f64) -> Result<f64> {
    ensure(u > 0.0 && u < 1.0, || format!("u must lie in (0, 1), got {u}"))?;
    Ok(u.ln() - (-u).ln_1p())
}

/// Mean waiting time of the limiting kernel at birth time `T`:
/// `(1 + e^T) ln(1 + e^{-T})`.
pub fn limit_kernel_mean_wait(birth_t: f64) -> f64 {
    if birth_t >= 0.0 {
        // (1 + y) ln(1 + y) / y with y = e^{-T}
        let y = (-birth_t).exp();
        if y < 1e-300 {
            return 1.0;
        }
        (1.0 + y) * y.ln_1p() / y
    } else {
        // (1 + e^T)(-T + ln(1 + e^T))
        let e = birth_t.exp();
        (1.0 + e) * (-birth_t + e.ln_1p())
    }
}

/// `e^t lambda eps^2 v_sigma(t)` with `sigma = sigma_of(lambda, eps)`; tends to one
/// as `lambda -> 0`, `t -> inf`.
pub fn partition_rescaled_limit(lambda: f64, epsilon: f64, t: f64) -> Result<f64> {
    ensure(lambda > 0.0, || format!("lambda must be positive, got {lambda}"))?;
    check_time("t", t)?;
    let sigma = sigma_of(lambda, epsilon)?;
    let one_minus = one_minus_sigma_of(lambda, epsilon)?;
    Ok(lambda * epsilon * epsilon / (one_minus + sigma * (-t).exp()))
}

/// Penalty schedules `lambda(t)` for the small-penalty limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant { lambda: f64 },
    /// `lambda(t) = scale / t`.
    InverseTime { scale: f64 },
    /// `lambda(t) = e^{-alpha t}`, `0 < alpha < 1`, so `t + ln(lambda eps^2)` still diverges.
    Exponential { alpha: f64 },
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaSchedule::Constant { lambda } => {
                ensure(lambda > 0.0, || format!("constant lambda must be positive, got {lambda}"))
            }
            LambdaSchedule::InverseTime { scale } => {
                ensure(scale > 0.0, || format!("scale must be positive, got {scale}"))
            }
            LambdaSchedule::Exponential { alpha } => ensure(alpha > 0.0 && alpha < 1.0, || {
                format!("alpha must lie in (0, 1), got {alpha}")
            }),
        }
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        self.validate()?;
        ensure(t > 0.0, || format!("schedule evaluated at non-positive time {t}"))?;
        Ok(match *self {
            LambdaSchedule::Constant { lambda } => lambda,
            LambdaSchedule::InverseTime { scale } => scale / t,
            LambdaSchedule::Exponential { alpha } => (-alpha * t).exp(),
        })
    }

    /// Centring time `t + ln(lambda(t) eps^2)` around which the first branch happens.
    pub fn centre(&self, t: f64, epsilon: f64) -> Result<f64> {
        Ok(t + (self.at(t)? * epsilon * epsilon).ln())
    }
}

/// `P_t(tau_1 <= t + ln(lambda eps^2) + delta)` at finite `t`, with the
/// threshold clamped to `[0, t]`.
pub fn shifted_first_branch_cdf(sigma: f64, t: f64, log_lambda_eps2: f64, delta: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_time("t", t)?;
    let x = t + log_lambda_eps2 + delta;
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x >= t {
        return Ok(1.0 - a_term(sigma, t));
    }
    first_branch_cdf(sigma, t, t - x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{LN_2, PI};

    /// RK4 for v' = sigma v^2 - v, v(0) = 1.
    fn rk4_partition(sigma: f64, t: f64, h: f64) -> f64 {
        let f = |v: f64| sigma * v * v - v;
        let steps = (t / h).round() as usize;
        let h = t / steps as f64;
        let mut v = 1.0;
        for _ in 0..steps {
            let k1 = f(v);
            let k2 = f(v + 0.5 * h * k1);
            let k3 = f(v + 0.5 * h * k2);
            let k4 = f(v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        v
    }

    fn cosh_series(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..60 {
            term *= x * x / ((2 * k - 1) as f64 * (2 * k) as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn sigma_values() {
        assert_eq!(sigma_of(0.0, 1.0).unwrap(), 1.0);
        // independent evaluation of sech(2) through the cosh power series
        let expected = 1.0 / cosh_series(2.0);
        assert!((expected - 0.265802).abs() < 1e-6);
        assert!((sigma_of(2.0, 1.0).unwrap() - expected).abs() < 1e-14);
        for &l in &[1e-3, 1e-5, 1e-7] {
            let s = sigma_of(l, 1.0).unwrap();
            let dev = (1.0 - s) - l;
            assert!(dev.abs() < 2.0 * l * l + 1e-15, "lambda {l}: 1 - sigma = {}", 1.0 - s);
            let om = one_minus_sigma_of(l, 1.0).unwrap();
            assert!((om - l).abs() / l < 2.0 * l);
        }
        assert!(sigma_of(-1.0, 1.0).is_err());
        assert!(sigma_of(1.0, 0.0).is_err());
    }

    #[test]
    fn sigma_decreases_in_lambda_eps2() {
        let mut prev = 1.0;
        for i in 1..50 {
            let s = sigma_of(0.1 * i as f64, 0.7).unwrap();
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn partition_examples() {
        for &t in &[0.0, 1.0, 50.0, 1e4] {
            assert_eq!(partition_v(1.0, t).unwrap(), 1.0);
        }
        for &s in &[0.1, 0.5, 0.99] {
            assert_eq!(partition_v(s, 0.0).unwrap(), 1.0);
        }
        let v = partition_v(0.5, LN_2).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        let oracle = rk4_partition(0.5, LN_2, 1e-4);
        assert!((v - oracle).abs() < 1e-8);
        for &(s, t) in &[(0.3, 2.0), (0.9, 5.0), (0.999, 3.0)] {
            let v = partition_v(s, t).unwrap();
            assert!((v - rk4_partition(s, t, 1e-4)).abs() < 1e-8, "sigma {s}, t {t}");
        }
        // far beyond exp overflow
        let lv = log_partition_v(0.5, 2000.0).unwrap();
        assert!((lv - (-2000.0 - 0.5f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn partition_solves_the_ode() {
        let h = 1e-5;
        for &s in &[0.05, 0.3, 0.5, 0.8, 0.99, 1.0] {
            for &t in &[0.01, 0.5, 1.0, 3.0, 10.0] {
                let v = partition_v(s, t).unwrap();
                let dv = (partition_v(s, t + h).unwrap() - partition_v(s, t - h).unwrap()) / (2.0 * h);
                assert!((dv - (s * v * v - v)).abs() < 1e-8, "sigma {s}, t {t}");
            }
        }
    }

    #[test]
    fn mean_particle_examples() {
        assert_eq!(mean_particles(0.5, 0.0).unwrap(), 1.0);
        assert!((mean_particles(0.5, 1e9).unwrap() - 2.0).abs() < 1e-15);
        assert!((mean_particles(0.5, LN_2).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        // mean = 1 + sigma d/dsigma ln v, by central differences on the RK4 oracle
        let (s, t, d) = (0.5, 3.0, 1e-5);
        let dl = (rk4_partition(s + d, t, 1e-4).ln() - rk4_partition(s - d, t, 1e-4).ln()) / (2.0 * d);
        assert!((1.0 + s * dl - mean_particles(s, t).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn laplace_examples() {
        assert!((laplace_n(0.5, 2.0, 1.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        let g = GeomLaw::new(geom_param_terminal(0.5, 2.0).unwrap()).unwrap();
        let lt = laplace_n(0.5, 2.0, 2.0, -0.3).unwrap();
        assert!((lt - g.laplace(-0.3).unwrap()).abs() < 1e-14);
        // divergence of the geometric series
        assert!(laplace_n(0.9, 5.0, 5.0, 3.0).is_err());
        assert!(laplace_n(0.5, 1.0, 2.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn laplace_at_horizon_is_geometric(sigma in 0.01f64..1.0, t in 0.0f64..20.0, gamma in -3.0f64..0.0) {
            let g = GeomLaw::new(geom_param_terminal(sigma, t).unwrap()).unwrap();
            let a = laplace_n(sigma, t, t, gamma).unwrap();
            let b = g.laplace(gamma).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        #[test]
        fn intermediate_law_is_geometric(sigma in 0.01f64..1.0, t in 0.0f64..20.0, frac in 0.0f64..1.0, gamma in -3.0f64..0.0) {
            let s = frac * t;
            let g = GeomLaw::new(geom_param_at(sigma, t, s).unwrap()).unwrap();
            let a = laplace_n(sigma, t, s, gamma).unwrap();
            let b = g.laplace(gamma).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        #[test]
        fn first_branch_is_monotone_and_bounded(sigma in 0.01f64..=1.0, t in 0.01f64..30.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            // smaller r means a later threshold t - r
            let f_late = first_branch_cdf(sigma, t, lo * t).unwrap();
            let f_early = first_branch_cdf(sigma, t, hi * t).unwrap();
            prop_assert!(f_early <= f_late + 1e-15);
            let total = 1.0 - (-t).exp() / partition_v(sigma, t).unwrap();
            prop_assert!(f_late <= total + 1e-12);
        }

        #[test]
        fn wait_quantile_inverts_cdf(sigma in 0.01f64..=1.0, h in 0.01f64..40.0, u in 0.0f64..=1.0) {
            let w = conditional_wait_quantile(sigma, h, u).unwrap();
            prop_assert!((0.0..=h).contains(&w));
            let back = conditional_wait_cdf(sigma, h, w).unwrap();
            prop_assert!((back - u).abs() < 1e-9, "u {} back {}", u, back);
        }

        #[test]
        fn kernel_quantile_inverts_cdf(birth in -30.0f64..30.0, u in 0.0f64..0.999) {
            let w = limit_kernel_quantile(birth, u).unwrap();
            let back = limit_kernel_cdf(birth, w).unwrap();
            prop_assert!((back - u).abs() < 1e-9);
        }
    }

    #[test]
    fn wait_quantile_matches_bisection() {
        for &(s, h) in &[(0.5, 5.0), (0.9, 0.3), (0.999, 12.0)] {
            for i in 1..20 {
                let u = i as f64 / 20.0;
                let closed = conditional_wait_quantile(s, h, u).unwrap();
                let bis = crate::quad::bisect_increasing(
                    |w| conditional_wait_cdf(s, h, w).unwrap(),
                    u,
                    0.0,
                    h,
                    1e-12,
                );
                assert!((closed - bis).abs() < 1e-10, "sigma {s} h {h} u {u}: {closed} vs {bis}");
            }
        }
    }

    #[test]
    fn geometric_parameters() {
        assert!((geom_param_terminal(0.3, 1e3).unwrap() - 0.7).abs() < 1e-15);
        let p = geom_param_window(0.5, 0.0).unwrap();
        assert!((p - 1.0 / 1.5).abs() < 1e-15);
        assert!((GeomLaw::new(p).unwrap().mean() - 1.5).abs() < 1e-14);
        assert!(((geom_param_terminal(1.0, 2.0).unwrap()) - (-2f64).exp()).abs() < 1e-15);
        assert!(geom_param_window(0.5, 1.0).is_err());
        assert!(geom_param_window(0.5, 2f64.ln()).is_ok());
        // the exact finite-t window law approaches the limit
        let s = 12.0 + (0.5f64).ln();
        assert!((geom_param_at(0.5, 12.0, s).unwrap() - p).abs() < 1e-5);
    }

    #[test]
    fn geom_law_basics() {
        let g = GeomLaw::new(0.3).unwrap();
        let total: f64 = (1..400).map(|k| g.pmf(k)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mean: f64 = (1..400).map(|k| k as f64 * g.pmf(k)).sum();
        assert!((mean - 1.0 / 0.3).abs() < 1e-10);
        assert!((g.cdf(3) + g.tail(4) - 1.0).abs() < 1e-15);
        assert_eq!(g.quantile(0.0), 1);
        assert_eq!(g.quantile(0.29), 1);
        assert_eq!(g.quantile(0.31), 2);
        assert_eq!(GeomLaw::new(1.0).unwrap().quantile(0.9), 1);
    }

    #[test]
    fn first_branch_examples() {
        assert_eq!(first_branch_cdf(0.4, 3.0, 3.0).unwrap(), 0.0);
        for &r in &[0.0, 0.5, 2.0] {
            let f = first_branch_cdf(1.0, 3.0, r).unwrap();
            assert!((f - (1.0 - (-(3.0 - r)).exp())).abs() < 1e-15);
        }
        let lim = first_branch_cdf_limit(0.6, 1.5).unwrap();
        assert!((first_branch_cdf(0.6, 60.0, 1.5).unwrap() - lim).abs() < 1e-15);
        let total = first_branch_cdf(0.6, 4.0, 0.0).unwrap();
        assert!((total - (1.0 - no_branch_mass(0.6, 4.0).unwrap())).abs() < 1e-15);
        assert!(first_branch_cdf(0.6, 4.0, 5.0).is_err());
    }

    #[test]
    fn limit_laws() {
        assert_eq!(limit_first_cdf(0.0), 0.5);
        assert!((limit_kernel_cdf(200.0, 1.3).unwrap() - (1.0 - (-1.3f64).exp())).abs() < 1e-15);
        // logistic moments by quadrature of the density
        let dens = |x: f64| {
            let f = limit_first_cdf(x);
            f * (1.0 - f)
        };
        let m0 = crate::quad::adaptive_simpson(dens, -60.0, 60.0, 1e-12).unwrap();
        let m1 = crate::quad::adaptive_simpson(|x| x * dens(x), -60.0, 60.0, 1e-12).unwrap();
        let m2 = crate::quad::adaptive_simpson(|x| x * x * dens(x), -60.0, 60.0, 1e-12).unwrap();
        assert!((m0 - 1.0).abs() < 1e-10);
        assert!(m1.abs() < 1e-10);
        assert!((m2 - PI * PI / 3.0).abs() < 1e-9);
        assert!((limit_first_quantile(0.5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn kernel_mean_wait() {
        // quadrature of the survival function of the kernel at T = 0
        let surv = |w: f64| 1.0 - limit_kernel_cdf(0.0, w).unwrap();
        let q = crate::quad::adaptive_simpson(surv, 0.0, 80.0, 1e-12).unwrap();
        assert!((q - 2.0 * LN_2).abs() < 1e-9);
        assert!((limit_kernel_mean_wait(0.0) - 1.386294).abs() < 1e-6);
        assert!((limit_kernel_mean_wait(0.0) - q).abs() < 1e-9);
        for &t in &[-5.0, -1.0, 2.0, 7.0] {
            let surv = |w: f64| 1.0 - limit_kernel_cdf(t, w).unwrap();
            let q = crate::quad::adaptive_simpson(surv, 0.0, 120.0, 1e-12).unwrap();
            assert!((limit_kernel_mean_wait(t) - q).abs() < 1e-8, "T = {t}");
        }
        assert!((limit_kernel_mean_wait(50.0) - 1.0).abs() < 1e-12);
        assert_eq!(limit_kernel_mean_wait(1e4), 1.0);
        let far = limit_kernel_mean_wait(-300.0);
        assert!((far - 300.0).abs() < 1e-9);
    }

    #[test]
    fn rescaled_partition() {
        let v = partition_rescaled_limit(1e-4, 1.0, 20.0).unwrap();
        assert!((v - 1.0).abs() < 1e-3);
        let v0 = partition_rescaled_limit(0.3, 0.5, 0.0).unwrap();
        assert!((v0 - 0.3 * 0.25).abs() < 1e-15);
        // 1 + O(lambda)
        for &l in &[1e-2, 1e-3, 1e-4] {
            let v = partition_rescaled_limit(l, 1.0, 200.0).unwrap();
            assert!((v - 1.0).abs() < l, "lambda {l}: {v}");
        }
        // consistency with the log-space partition function
        let (l, e, t): (f64, f64, f64) = (1e-3, 0.8, 15.0);
        let direct = (t + (l * e * e).ln() + log_partition_v(sigma_of(l, e).unwrap(), t).unwrap()).exp();
        assert!((direct - partition_rescaled_limit(l, e, t).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn schedules() {
        let s = LambdaSchedule::InverseTime { scale: 1.0 };
        assert_eq!(s.at(1e3).unwrap(), 1e-3);
        assert!((s.centre(1e3, 1.0).unwrap() - (1e3 - 1e3f64.ln())).abs() < 1e-12);
        assert!(LambdaSchedule::Exponential { alpha: 1.0 }.validate().is_err());
        assert!((LambdaSchedule::Exponential { alpha: 0.5 }.at(2.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!(LambdaSchedule::Constant { lambda: 0.0 }.at(1.0).is_err());
    }

    #[test]
    fn shifted_first_branch_converges_to_logistic() {
        let t = 1e3;
        let lambda = 1.0 / t;
        let sigma = sigma_of(lambda, 1.0).unwrap();
        let mut sup: f64 = 0.0;
        for i in 0..=2000 {
            let d = -10.0 + 20.0 * i as f64 / 2000.0;
            let f = shifted_first_branch_cdf(sigma, t, lambda.ln(), d).unwrap();
            sup = sup.max((f - limit_first_cdf(d)).abs());
        }
        assert!(sup < 1e-2, "sup distance {sup}");
    }

    #[test]
    fn evaluators_are_pure() {
        let a = (partition_v(0.37, 2.2).unwrap(), laplace_n(0.37, 2.2, 1.1, -0.4).unwrap());
        let b = (partition_v(0.37, 2.2).unwrap(), laplace_n(0.37, 2.2, 1.1, -0.4).unwrap());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }
}
