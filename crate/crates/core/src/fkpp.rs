//! F-KPP equation `w_t = 1/2 w_xx + g(t) w (1 - w)` with a time-dependent
//! reaction rate.
//!
//! The solver uses Strang splitting: a Crank-Nicolson diffusion half-step,
//! the exact logistic reaction step over the full time step, and a second
//! diffusion half-step. Boundaries are homogeneous Neumann (node-centred
//! reflection). The scheme is monotone and keeps values in `[0, 1]` as long
//! as `dt <= 2 dx^2`; this is checked after every step rather than enforced
//! by clipping.
//!
//! An optional frame speed `c` solves the equation in coordinates
//! `y = x - c t`, which adds the advection term `c w_y`. Snapshots are always
//! reported on lab coordinates.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::analytics;
use crate::error::{ensure, Error, Result};
use crate::quad::solve_tridiagonal;
use crate::stats::{FitDetail, FitReport};

/// Default bound on the boundary influence.
pub const BOUNDARY_TOLERANCE: f64 = 1e-8;
/// Fraction of the grid at each end that must be flat.
const BOUNDARY_BAND: f64 = 0.05;
/// Slack allowed on the `[0, 1]` range check before it counts as a violation.
const RANGE_SLACK: f64 = 1e-12;
/// Gaussian kernels are cut at this many standard deviations.
const KERNEL_WIDTH: f64 = 8.0;
/// Residual threshold for an extracted travelling wave.
pub const WAVE_RESIDUAL_TOL: f64 = 1e-3;
/// Time at which the standard solution is taken as converged in shape.
pub const WAVE_AT_TIME: f64 = 800.0;
/// Tolerance for the wave-regime sandwich.
pub const WAVE_REGIME_TOL: f64 = 2e-2;

/// `sqrt 2 t - 3 / (2 sqrt 2) ln t`.
pub fn bramson_m(t: f64) -> f64 {
    std::f64::consts::SQRT_2 * t - 3.0 / (2.0 * std::f64::consts::SQRT_2) * t.ln()
}

/// `g(t) = sigma / ((1 - sigma) e^t + sigma)`.
pub fn g_tilted(sigma: f64, t: f64) -> Result<f64> {
    ensure(sigma > 0.0 && sigma <= 1.0, || format!("sigma must lie in (0, 1], got {sigma}"))?;
    ensure(t >= 0.0, || format!("t must be nonnegative, got {t}"))?;
    Ok(tilted_rate(sigma, t))
}

#[inline]
fn tilted_rate(sigma: f64, t: f64) -> f64 {
    if sigma == 1.0 {
        1.0
    } else {
        // overflow of e^t gives the correct limit 0
        sigma / ((1.0 - sigma) * t.exp() + sigma)
    }
}

/// `G(t) = int_0^t g = t - ln(sigma + (1 - sigma) e^t)`, evaluated as `t + ln v_sigma(t)`.
pub fn big_g_tilted(sigma: f64, t: f64) -> Result<f64> {
    Ok(t + analytics::log_partition_v(sigma, t)?)
}

fn log_odds_deficit(sigma: f64) -> Result<f64> {
    ensure(sigma > 0.0 && sigma < 1.0, || format!("sigma must lie in (0, 1), got {sigma}"))?;
    // ln(1/sigma - 1)
    Ok((1.0 - sigma).ln() - sigma.ln())
}

/// `tau_delta = -ln(1/sigma - 1) - ln(1/delta - 1)`, the last time with `g >= 1 - delta`.
///
/// May be negative; callers clamp.
pub fn tau_delta(sigma: f64, delta: f64) -> Result<f64> {
    ensure(delta > 0.0 && delta < 1.0, || format!("delta must lie in (0, 1), got {delta}"))?;
    Ok(-log_odds_deficit(sigma)? - (1.0 / delta - 1.0).ln())
}

/// `T_Delta = -ln(1/sigma - 1) - ln(e^Delta - 1)`, the first time with `int_t^inf g <= Delta`.
pub fn t_big_delta(sigma: f64, big_delta: f64) -> Result<f64> {
    ensure(big_delta > 0.0 && big_delta.is_finite(), || format!("Delta must be positive, got {big_delta}"))?;
    Ok(-log_odds_deficit(sigma)? - big_delta.exp_m1().ln())
}

/// Reaction rate `g(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReactionProfile {
    Tilted { sigma: f64 },
    Constant { g: f64 },
    /// Piecewise linear through `(times[i], values[i])`, constant outside.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl ReactionProfile {
    pub fn tilted(sigma: f64) -> Self {
        ReactionProfile::Tilted { sigma }
    }

    pub fn standard() -> Self {
        ReactionProfile::Constant { g: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ReactionProfile::Tilted { sigma } => {
                ensure(*sigma > 0.0 && *sigma <= 1.0, || format!("sigma must lie in (0, 1], got {sigma}"))
            }
            ReactionProfile::Constant { g } => {
                ensure((0.0..=1.0).contains(g), || format!("constant rate must lie in [0, 1], got {g}"))
            }
            ReactionProfile::Tabulated { times, values } => {
                ensure(!times.is_empty() && times.len() == values.len(), || {
                    "tabulated rate needs matching nonempty times and values".into()
                })?;
                ensure(times.windows(2).all(|w| w[0] < w[1]), || "table times must increase".into())?;
                ensure(values.iter().all(|v| (0.0..=1.0).contains(v)), || "table values must lie in [0, 1]".into())?;
                ensure(values.windows(2).all(|w| w[1] <= w[0]), || "table values must be nonincreasing".into())
            }
        }
    }

    pub fn g(&self, t: f64) -> f64 {
        match self {
            ReactionProfile::Tilted { sigma } => tilted_rate(*sigma, t),
            ReactionProfile::Constant { g } => *g,
            ReactionProfile::Tabulated { times, values } => {
                let i = times.partition_point(|&s| s <= t);
                if i == 0 {
                    values[0]
                } else if i == times.len() {
                    values[i - 1]
                } else {
                    let f = (t - times[i - 1]) / (times[i] - times[i - 1]);
                    values[i - 1] + f * (values[i] - values[i - 1])
                }
            }
        }
    }

    /// `G(t) = int_0^t g`.
    pub fn big_g(&self, t: f64) -> f64 {
        match self {
            ReactionProfile::Tilted { sigma } => big_g_tilted(*sigma, t.max(0.0)).unwrap_or(f64::NAN),
            ReactionProfile::Constant { g } => g * t,
            ReactionProfile::Tabulated { times, values } => {
                let cum = |t: f64| -> f64 {
                    // integral from times[0]; constant extension on both sides
                    if t <= times[0] {
                        return values[0] * (t - times[0]);
                    }
                    let mut acc = 0.0;
                    for i in 1..times.len() {
                        if t <= times[i] {
                            let gt = self.g(t);
                            return acc + 0.5 * (values[i - 1] + gt) * (t - times[i - 1]);
                        }
                        acc += 0.5 * (values[i - 1] + values[i]) * (times[i] - times[i - 1]);
                    }
                    acc + values[values.len() - 1] * (t - times[times.len() - 1])
                };
                cum(t) - cum(0.0)
            }
        }
    }

    /// `int_a^b g`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            ReactionProfile::Tilted { sigma } if *sigma < 1.0 => {
                // ln A(a) - ln A(b) with A(t) = (1 - sigma) + sigma e^{-t}
                let ab = analytics::a_term(*sigma, b);
                (sigma * (-a).exp() * -(-(b - a)).exp_m1() / ab).ln_1p()
            }
            ReactionProfile::Tilted { .. } => b - a,
            _ => self.big_g(b) - self.big_g(a),
        }
    }
}

/// Spatial grid and time step. Nodes sit at `x_min + j dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
    pub dt: f64,
}

impl GridSpec {
    /// Grid with `dt = dx^2`.
    pub fn new(x_min: f64, x_max: f64, dx: f64) -> Self {
        GridSpec { x_min, x_max, dx, dt: dx * dx }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn n_points(&self) -> usize {
        ((self.x_max - self.x_min) / self.dx).round() as usize + 1
    }

    /// The grid with `dx` doubled and `dt` quadrupled.
    pub fn coarsened(&self) -> Self {
        GridSpec { dx: 2.0 * self.dx, dt: 4.0 * self.dt, ..*self }
    }

    pub fn validate(&self, frame_speed: f64) -> Result<()> {
        ensure(self.x_min.is_finite() && self.x_max.is_finite() && self.x_min < self.x_max, || {
            format!("bad spatial bounds [{}, {}]", self.x_min, self.x_max)
        })?;
        ensure(self.dx > 0.0 && self.dt > 0.0, || "dx and dt must be positive".into())?;
        ensure(self.n_points() >= 20, || format!("grid has only {} points", self.n_points()))?;
        ensure(self.dt <= 2.0 * self.dx * self.dx * (1.0 + 1e-12), || {
            format!("dt = {} exceeds 2 dx^2 = {}", self.dt, 2.0 * self.dx * self.dx)
        })?;
        ensure(frame_speed.abs() * self.dx <= 1.0, || {
            format!("frame speed {frame_speed} needs dx <= {}", 1.0 / frame_speed.abs())
        })
    }
}

/// Solution values on a uniform grid at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub x_min: f64,
    pub dx: f64,
    pub dt: f64,
    pub time: f64,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.values.len() - 1)
    }

    /// Linear interpolation, constant beyond the ends.
    pub fn interp(&self, x: f64) -> f64 {
        interp_uniform(self.x_min, self.dx, &self.values, x)
    }

    /// Leftmost crossing of `level` from above, by linear interpolation.
    pub fn front(&self, level: f64) -> Option<f64> {
        let v = &self.values;
        (0..v.len() - 1).find(|&j| v[j] >= level && v[j + 1] < level).map(|j| {
            let f = (v[j] - level) / (v[j] - v[j + 1]);
            self.x(j) + f * self.dx
        })
    }

    /// Values at the nodes shared with a grid of twice the spacing and the same origin.
    pub fn every_other(&self) -> Vec<f64> {
        self.values.iter().step_by(2).copied().collect()
    }

    pub fn is_nonincreasing(&self, slack: f64) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

fn interp_uniform(x_min: f64, dx: f64, values: &[f64], x: f64) -> f64 {
    let s = (x - x_min) / dx;
    if s <= 0.0 {
        return values[0];
    }
    let j = s.floor() as usize;
    if j + 1 >= values.len() {
        return values[values.len() - 1];
    }
    let f = s - j as f64;
    values[j] + f * (values[j + 1] - values[j])
}

/// Initial data.
#[derive(Debug, Clone, PartialEq)]
pub enum Initial {
    /// `1[x <= 0]`, averaged over each grid cell (1, 1/2 or 0 on a grid through 0).
    Heaviside,
    Values(Vec<f64>),
}

impl Initial {
    fn on(&self, grid: &GridSpec) -> Result<Vec<f64>> {
        let n = grid.n_points();
        match self {
            Initial::Heaviside => Ok((0..n)
                .map(|j| {
                    let left = grid.x_min + (j as f64 - 0.5) * grid.dx;
                    ((0.0 - left) / grid.dx).clamp(0.0, 1.0)
                })
                .collect()),
            Initial::Values(v) => {
                ensure(v.len() == n, || format!("initial data has {} points, grid has {n}", v.len()))?;
                ensure(v.iter().all(|x| (0.0..=1.0).contains(x)), || "initial data must lie in [0, 1]".into())?;
                Ok(v.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub frame_speed: f64,
    pub boundary_tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { frame_speed: 0.0, boundary_tolerance: BOUNDARY_TOLERANCE }
    }
}

/// Crank-Nicolson half-step operator for `1/2 w_yy + c w_y`.
///
/// Both ends reflect, except that in a frame moving right the right end is
/// absorbing (zero ghost value): a reflecting wall there would seed a
/// spurious front growing out of the unstable state.
struct Diffusion {
    absorbing_right: bool,
    lo: f64,
    mid: f64,
    hi: f64,
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
    rhs: Vec<f64>,
    scratch: Vec<f64>,
}

impl Diffusion {
    fn new(n: usize, dx: f64, c: f64) -> Self {
        let alpha = 0.5 / (dx * dx);
        let beta = c / (2.0 * dx);
        Diffusion {
            absorbing_right: c > 0.0,
            lo: alpha - beta,
            mid: -2.0 * alpha,
            hi: alpha + beta,
            sub: vec![0.0; n],
            diag: vec![0.0; n],
            sup: vec![0.0; n],
            rhs: vec![0.0; n],
            scratch: vec![0.0; n],
        }
    }

    /// Row coefficients `(lower, centre, upper)`.
    #[inline]
    fn row(&self, j: usize, n: usize) -> (f64, f64, f64) {
        if j == 0 {
            (0.0, self.mid, self.lo + self.hi)
        } else if j == n - 1 && self.absorbing_right {
            (self.lo, self.mid, 0.0)
        } else if j == n - 1 {
            (self.lo + self.hi, self.mid, 0.0)
        } else {
            (self.lo, self.mid, self.hi)
        }
    }

    fn set_step(&mut self, k: f64) {
        let n = self.diag.len();
        let h = 0.5 * k;
        for j in 0..n {
            let (a, b, c) = self.row(j, n);
            self.sub[j] = -h * a;
            self.diag[j] = 1.0 - h * b;
            self.sup[j] = -h * c;
        }
    }

    /// One step of length `k`, as set by the last [`Diffusion::set_step`].
    fn apply(&mut self, w: &mut [f64], k: f64) {
        let n = w.len();
        let h = 0.5 * k;
        for j in 0..n {
            let (a, b, c) = self.row(j, n);
            let left = if j > 0 { w[j - 1] } else { 0.0 };
            let right = if j + 1 < n { w[j + 1] } else { 0.0 };
            self.rhs[j] = w[j] + h * (a * left + b * w[j] + c * right);
        }
        solve_tridiagonal(&self.sub, &self.diag, &self.sup, &mut self.rhs, &mut self.scratch);
        w.copy_from_slice(&self.rhs);
    }
}

#[inline]
fn logistic_step(w: f64, e: f64) -> f64 {
    // exact flow of w' = g w (1 - w) over a step with int g = ln e
    w * e / (1.0 + w * (e - 1.0))
}

fn boundary_influence(w: &[f64]) -> f64 {
    let n = w.len();
    let band = ((n as f64 * BOUNDARY_BAND).ceil() as usize).clamp(2, n / 2);
    let left = w[..band].iter().map(|v| (v - w[0]).abs()).fold(0.0, f64::max);
    let right = w[n - band..].iter().map(|v| (v - w[n - 1]).abs()).fold(0.0, f64::max);
    left.max(right)
}

fn check_range(w: &[f64], t: f64) -> Result<()> {
    for (j, &v) in w.iter().enumerate() {
        if !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v) {
            return Err(Error::Numeric(format!("value {v} at node {j} left [0, 1] at t = {t}")));
        }
    }
    Ok(())
}

/// Solves from Heaviside data and returns the snapshots at the requested
/// times followed by `t_end` (if not already requested).
pub fn solve_tdfkpp(
    reaction: &ReactionProfile,
    t_end: f64,
    grid: &GridSpec,
    snapshots: &[f64],
) -> Result<Vec<GridField>> {
    solve_with(reaction, &Initial::Heaviside, t_end, grid, snapshots, SolveOptions::default())
}

pub fn solve_with(
    reaction: &ReactionProfile,
    initial: &Initial,
    t_end: f64,
    grid: &GridSpec,
    snapshots: &[f64],
    opts: SolveOptions,
) -> Result<Vec<GridField>> {
    reaction.validate()?;
    grid.validate(opts.frame_speed)?;
    ensure(t_end > 0.0 && t_end.is_finite(), || format!("t_end must be positive, got {t_end}"))?;
    ensure(snapshots.windows(2).all(|w| w[0] < w[1]), || "snapshot times must increase".into())?;
    ensure(snapshots.iter().all(|&s| s > 0.0 && s <= t_end), || format!("snapshot times must lie in (0, {t_end}]"))?;
    let mut times = snapshots.to_vec();
    if times.last() != Some(&t_end) {
        times.push(t_end);
    }

    let mut w = initial.on(grid)?;
    let n = w.len();
    let mut op = Diffusion::new(n, grid.dx, opts.frame_speed);
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut last_k = f64::NAN;
    for &target in &times {
        let steps = ((target - t) / grid.dt).ceil().max(1.0) as usize;
        let dt = (target - t) / steps as f64;
        if dt != last_k {
            op.set_step(0.5 * dt);
            last_k = dt;
        }
        for i in 0..steps {
            let t0 = t + i as f64 * dt;
            let t1 = if i + 1 == steps { target } else { t0 + dt };
            op.apply(&mut w, 0.5 * dt);
            let e = reaction.integral(t0, t1).exp();
            for v in w.iter_mut() {
                *v = logistic_step(*v, e);
            }
            op.apply(&mut w, 0.5 * dt);
            check_range(&w, t1)?;
        }
        t = target;
        let influence = boundary_influence(&w);
        if influence > opts.boundary_tolerance {
            let width = grid.x_max - grid.x_min;
            return Err(Error::DomainTooSmall {
                influence,
                tolerance: opts.boundary_tolerance,
                required_x_min: grid.x_min - 0.5 * width,
                required_x_max: grid.x_max + 0.5 * width,
            });
        }
        out.push(GridField {
            x_min: grid.x_min + opts.frame_speed * t,
            dx: grid.dx,
            dt,
            time: t,
            values: w.clone(),
        });
    }
    Ok(out)
}

/// Richardson estimate of the sup-norm discretisation error at `t_end`:
/// one third of the largest difference to the solution on the grid with
/// `dx` doubled and `dt` quadrupled, over the shared nodes.
pub fn refinement_error(
    reaction: &ReactionProfile,
    initial_is_heaviside: bool,
    t_end: f64,
    grid: &GridSpec,
    opts: SolveOptions,
) -> Result<f64> {
    ensure(initial_is_heaviside, || "refinement estimate needs grid-independent initial data".into())?;
    let fine = solve_with(reaction, &Initial::Heaviside, t_end, grid, &[], opts)?.pop().expect("t_end snapshot");
    let coarse_grid = grid.coarsened();
    let coarse = solve_with(reaction, &Initial::Heaviside, t_end, &coarse_grid, &[], opts)?
        .pop()
        .expect("t_end snapshot");
    Ok(max_diff_shared(&fine, &coarse) / 3.0)
}

/// Largest difference between a field and one on twice its spacing, over shared nodes.
pub fn max_diff_shared(fine: &GridField, coarse: &GridField) -> f64 {
    fine.every_other().iter().zip(&coarse.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// `E_x[f(x + B_tau)]` on the same grid: discrete Gaussian kernel of
/// variance `tau`, cut at eight standard deviations and normalised to unit
/// mass, with constant extension beyond the ends.
pub fn heat_convolve(profile: &GridField, tau: f64) -> Result<GridField> {
    ensure(tau > 0.0 && tau.is_finite(), || format!("tau must be positive, got {tau}"))?;
    let dx = profile.dx;
    let half = (KERNEL_WIDTH * tau.sqrt() / dx).ceil() as isize;
    let mut kernel: Vec<f64> = (-half..=half).map(|m| (-(m as f64 * dx).powi(2) / (2.0 * tau)).exp()).collect();
    let mass: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= mass);
    let v = &profile.values;
    let n = v.len() as isize;
    let values = (0..n)
        .map(|j| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let idx = (j + i as isize - half).clamp(0, n - 1);
                    k * v[idx as usize]
                })
                .sum()
        })
        .collect();
    Ok(GridField { values, ..profile.clone() })
}

/// Centred travelling-wave profile, `v0(0) = 1/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveProfile {
    pub x_min: f64,
    pub dx: f64,
    pub values: Vec<f64>,
    /// Largest residual of `1/2 v'' + sqrt 2 v' + v (1 - v)` on `|x| <= 20`.
    pub residual: f64,
    pub source_time: f64,
}

/// Least-squares line through tail data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub slope: f64,
    pub intercept: f64,
    pub target_slope: f64,
    /// Smallest `C` with the tail bound holding at every fitted node.
    pub c_bound: f64,
}

impl TailFit {
    pub fn relative_error(&self) -> f64 {
        ((self.slope - self.target_slope) / self.target_slope).abs()
    }
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

impl WaveProfile {
    pub fn eval(&self, x: f64) -> f64 {
        interp_uniform(self.x_min, self.dx, &self.values, x)
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx
    }

    pub fn to_field(&self) -> GridField {
        GridField { x_min: self.x_min, dx: self.dx, dt: 0.0, time: self.source_time, values: self.values.clone() }
    }

    fn window(&self, lo: f64, hi: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.values.len()).map(|j| (self.x(j), self.values[j])).filter(move |&(x, _)| x >= lo && x <= hi)
    }

    /// Regression of `ln(v0(x) / x)` on `x` over `[lo, hi]`, target slope `-sqrt 2`.
    /// `c_bound` is `max v0(x) e^{sqrt 2 x} / x`.
    pub fn right_tail_fit(&self, lo: f64, hi: f64) -> Result<TailFit> {
        ensure(lo > 0.0 && hi > lo, || "right-tail window must lie in x > 0".into())?;
        let (xs, ys): (Vec<f64>, Vec<f64>) = self.window(lo, hi).map(|(x, v)| (x, (v / x).ln())).unzip();
        ensure(xs.len() >= 3 && ys.iter().all(|y| y.is_finite()), || "right-tail window has too few usable points".into())?;
        let (slope, intercept) = linear_fit(&xs, &ys);
        let s2 = std::f64::consts::SQRT_2;
        let c_bound = self.window(lo, hi).map(|(x, v)| v * (s2 * x).exp() / x).fold(0.0, f64::max);
        Ok(TailFit { slope, intercept, target_slope: -s2, c_bound })
    }

    /// Regression of `ln(1 - v0(x))` on `x` over `[lo, hi]`, target slope `2 - sqrt 2`.
    /// `c_bound` is `max (1 - v0(x)) e^{-(2 - sqrt 2) x}`.
    pub fn left_tail_fit(&self, lo: f64, hi: f64) -> Result<TailFit> {
        ensure(hi < 0.0 && hi > lo, || "left-tail window must lie in x < 0".into())?;
        let (xs, ys): (Vec<f64>, Vec<f64>) = self.window(lo, hi).map(|(x, v)| (x, (1.0 - v).ln())).unzip();
        ensure(xs.len() >= 3 && ys.iter().all(|y| y.is_finite()), || "left-tail window has too few usable points".into())?;
        let (slope, intercept) = linear_fit(&xs, &ys);
        let r = 2.0 - std::f64::consts::SQRT_2;
        let c_bound = self.window(lo, hi).map(|(x, v)| (1.0 - v) * (-r * x).exp()).fold(0.0, f64::max);
        Ok(TailFit { slope, intercept, target_slope: r, c_bound })
    }
}

/// Centres a standard (`g = 1`) solution at its level-1/2 point and checks
/// that it solves the travelling-wave equation.
pub fn extract_wave(run: &GridField) -> Result<WaveProfile> {
    let centre = run.front(0.5).ok_or_else(|| Error::NotConverged("profile has no level-1/2 crossing".into()))?;
    let v = &run.values;
    let dx = run.dx;
    let x_min = run.x_min - centre;
    let s2 = std::f64::consts::SQRT_2;
    let mut residual = 0.0f64;
    for j in 1..v.len() - 1 {
        let x = x_min + j as f64 * dx;
        if x.abs() > 20.0 {
            continue;
        }
        let d2 = (v[j + 1] - 2.0 * v[j] + v[j - 1]) / (dx * dx);
        let d1 = (v[j + 1] - v[j - 1]) / (2.0 * dx);
        residual = residual.max((0.5 * d2 + s2 * d1 + v[j] * (1.0 - v[j])).abs());
    }
    if residual >= WAVE_RESIDUAL_TOL {
        return Err(Error::NotConverged(format!(
            "travelling-wave residual {residual:.3e} at t = {} exceeds {WAVE_RESIDUAL_TOL:.0e}; use a larger at_time",
            run.time
        )));
    }
    Ok(WaveProfile { x_min, dx, values: v.clone(), residual, source_time: run.time })
}

/// Runs the standard equation to `at_time` in the frame moving at `sqrt 2`
/// and extracts the wave.
pub fn standard_wave(at_time: f64, dx: f64) -> Result<WaveProfile> {
    let grid = GridSpec::new(-60.0, 60.0, dx).with_dt(2.0 * dx * dx);
    let opts = SolveOptions { frame_speed: std::f64::consts::SQRT_2, ..SolveOptions::default() };
    let run = solve_with(&ReactionProfile::standard(), &Initial::Heaviside, at_time, &grid, &[], opts)?;
    extract_wave(run.last().expect("t_end snapshot"))
}

/// One bound checked by [`regime_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeCheck {
    pub regime: String,
    pub bound: String,
    pub time: f64,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl RegimeCheck {
    fn new(regime: &str, bound: &str, time: f64, max_violation: f64, tolerance: f64) -> Self {
        RegimeCheck {
            regime: regime.into(),
            bound: bound.into(),
            time,
            max_violation,
            tolerance,
            pass: max_violation <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub sigma: f64,
    pub delta: f64,
    pub big_delta: f64,
    pub tau_delta: f64,
    pub t_big_delta: f64,
    /// `m(tau_delta)` plus the phase offset used to centre the wave.
    pub centre: f64,
    pub checks: Vec<RegimeCheck>,
}

impl RegimeReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, regime: &str) -> Option<&RegimeCheck> {
        self.checks.iter().find(|c| c.regime == regime)
    }

    pub fn to_fit_report(&self) -> FitReport {
        let worst = self.checks.iter().map(|c| c.max_violation - c.tolerance).fold(f64::NEG_INFINITY, f64::max);
        let mut r = FitReport::new("regime_report", worst, 0.0, 0);
        r.details = self
            .checks
            .iter()
            .map(|c| FitDetail { at: c.time, observed: c.max_violation, expected: c.tolerance })
            .collect();
        r
    }
}

/// Snapshot times needed by [`regime_report`]: `tau_delta`, the midpoint of
/// `[tau_delta, T_Delta]`, `T_Delta` and `t_end`.
pub fn regime_snapshot_times(sigma: f64, delta: f64, big_delta: f64, t_end: f64) -> Result<Vec<f64>> {
    let tau = tau_delta(sigma, delta)?;
    let big_t = t_big_delta(sigma, big_delta)?;
    ensure(tau > 0.0, || format!("tau_delta = {tau} is not positive; increase sigma or delta"))?;
    ensure(big_t > tau, || format!("T_Delta = {big_t} does not exceed tau_delta = {tau}"))?;
    ensure(t_end > big_t, || format!("t_end = {t_end} must exceed T_Delta = {big_t}"))?;
    Ok(vec![tau, 0.5 * (tau + big_t), big_t, t_end])
}

fn snapshot_at(snaps: &[GridField], t: f64) -> Result<&GridField> {
    snaps
        .iter()
        .find(|s| (s.time - t).abs() <= 1e-9 * t.max(1.0))
        .ok_or_else(|| Error::domain(format!("no snapshot at t = {t}")))
}

/// Checks the three regimes of the solution with the tilted reaction rate.
///
/// * `wave`: `(1 - delta) v0(x) <= w(tau_delta, x + centre) <= v0(x)` on `|x| <= 10`;
/// * `intermediate`: `E_x[w(tau_delta, B_s)] <= w(t, x) <= e^{G(t) - G(tau_delta)} E_x[w(tau_delta, B_s)] ^ 1`
///   at the midpoint time;
/// * `diffusive`: `E_x[w(T_Delta, B_s)] <= w(t_end, x) <= e^Delta E_x[w(T_Delta, B_s)]`;
/// * `bracket_ratio`: ratio of the upper to the lower wave-based bracket at
///   `t_end`, bound `1 / (delta (1 - delta))`;
/// * `wave_bracket`: `(1 - delta) E[v0(x + B_s)] <= w(t_end, x + centre) <= E[v0(x + B_s)] / delta ^ 1`.
///
/// `centre` is `m(tau_delta)` plus the phase offset of the wave; the
/// heat-kernel checks use `scheme_tol` and the wave-based ones
/// [`WAVE_REGIME_TOL`].
pub fn regime_report(
    sigma: f64,
    delta: f64,
    big_delta: f64,
    snapshots: &[GridField],
    wave: &WaveProfile,
    centre: f64,
    scheme_tol: f64,
) -> Result<RegimeReport> {
    let last = snapshots.last().ok_or_else(|| Error::domain("no snapshots"))?;
    let times = regime_snapshot_times(sigma, delta, big_delta, last.time)?;
    let (tau, mid, big_t, t_end) = (times[0], times[1], times[2], times[3]);
    let w_tau = snapshot_at(snapshots, tau)?;
    let w_mid = snapshot_at(snapshots, mid)?;
    let w_big = snapshot_at(snapshots, big_t)?;
    let w_end = snapshot_at(snapshots, t_end)?;
    let reaction = ReactionProfile::tilted(sigma);
    let mut checks = Vec::new();

    let near = |f: &GridField, x: f64| (x - centre).abs() <= 10.0 && x > f.x_min && x < f.x_max();
    let mut v = 0.0f64;
    for (j, &w) in w_tau.values.iter().enumerate() {
        let x = w_tau.x(j);
        if near(w_tau, x) {
            let v0 = wave.eval(x - centre);
            v = v.max(w - v0).max((1.0 - delta) * v0 - w);
        }
    }
    checks.push(RegimeCheck::new("wave", "(1-delta) v0 <= w <= v0", tau, v.max(0.0), WAVE_REGIME_TOL));

    let conv = heat_convolve(w_tau, mid - tau)?;
    let inflate = reaction.integral(tau, mid).exp();
    let mut v = 0.0f64;
    for (j, &w) in w_mid.values.iter().enumerate() {
        let c = conv.values[j];
        v = v.max(c - w).max(w - (inflate * c).min(1.0));
    }
    checks.push(RegimeCheck::new("intermediate", "E[w(tau)] <= w <= e^{G(t)-G(tau)} E[w(tau)] ^ 1", mid, v, scheme_tol));

    let conv = heat_convolve(w_big, t_end - big_t)?;
    let inflate = big_delta.exp();
    let mut v = 0.0f64;
    for (j, &w) in w_end.values.iter().enumerate() {
        let c = conv.values[j];
        v = v.max(c - w).max(w - inflate * c);
    }
    checks.push(RegimeCheck::new("diffusive", "E[w(T)] <= w <= e^Delta E[w(T)]", t_end, v, scheme_tol));

    let ev0 = heat_convolve(&wave.to_field(), t_end - tau)?;
    let mut ratio = 0.0f64;
    let mut v = 0.0f64;
    for (j, &w) in w_end.values.iter().enumerate() {
        let x = w_end.x(j);
        let e = ev0.interp(x - centre);
        let lower = (1.0 - delta) * e;
        let upper = (e / delta).min(1.0);
        if lower > 1e-300 {
            ratio = ratio.max(upper / lower);
        }
        v = v.max(lower - w).max(w - upper);
    }
    let ratio_bound = 1.0 / (delta * (1.0 - delta));
    checks.push(RegimeCheck::new("bracket_ratio", "upper / lower <= 1 / (delta (1-delta))", t_end, (ratio - ratio_bound).max(0.0), 1e-12));
    checks.push(RegimeCheck::new("wave_bracket", "(1-delta) E[v0] <= w <= E[v0] / delta ^ 1", t_end, v.max(0.0), WAVE_REGIME_TOL));

    Ok(RegimeReport {
        sigma,
        delta,
        big_delta,
        tau_delta: tau,
        t_big_delta: big_t,
        centre,
        checks,
    })
}

/// `Phi(-x / sqrt t)`, the heat solution from Heaviside data.
pub fn heat_heaviside(t: f64, x: f64) -> f64 {
    0.5 * erfc(x / (2.0 * t).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tilted_rate_basics() {
        assert_eq!(g_tilted(0.3, 0.0).unwrap(), 0.3);
        for &t in &[0.0, 1.0, 50.0, 800.0] {
            assert_eq!(g_tilted(1.0, t).unwrap(), 1.0);
            assert!((big_g_tilted(1.0, t).unwrap() - t).abs() < 1e-12 * t.max(1.0));
        }
        let sigma: f64 = 0.7;
        assert!((big_g_tilted(sigma, 200.0).unwrap() + (1.0 - sigma).ln()).abs() < 1e-12);
        let r = ReactionProfile::tilted(sigma);
        // G as the integral of g
        let q = crate::quad::adaptive_simpson(|s| r.g(s), 0.0, 3.0, 1e-12).unwrap();
        assert!((q - big_g_tilted(sigma, 3.0).unwrap()).abs() < 1e-10);
        assert!((r.integral(1.0, 2.5) - crate::quad::adaptive_simpson(|s| r.g(s), 1.0, 2.5, 1e-12).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn regime_times() {
        assert!(tau_delta(0.5, 0.5).unwrap().abs() < 1e-15);
        // tau_delta solves g = 1 - delta
        let (sigma, delta) = (0.999, 0.3);
        let tau = tau_delta(sigma, delta).unwrap();
        let root = crate::quad::bisect_increasing(|t| -g_tilted(sigma, t).unwrap(), -(1.0 - delta), 0.0, 50.0, 1e-13);
        assert!((tau - root).abs() < 1e-10);
        let gt = big_g_tilted(sigma, tau).unwrap();
        assert!((gt - (tau + (1.0 - delta).ln() + (1.0 / sigma).ln())).abs() < 1e-10);
        // T_Delta leaves mass Delta of g beyond it
        let big_t = t_big_delta(sigma, 0.1).unwrap();
        let rest = -(1.0 - sigma).ln() - big_g_tilted(sigma, big_t).unwrap();
        assert!((rest - 0.1).abs() < 1e-10);
        // e^{G(T) - G(tau)} = e^{-Delta} / delta exactly
        let e = (big_g_tilted(sigma, big_t).unwrap() - gt).exp();
        assert!((e - (-0.1f64).exp() / delta).abs() < 1e-9);
        assert!(tau_delta(1.0, 0.5).is_err());
        assert!(tau_delta(0.5, 1.0).is_err());
    }

    #[test]
    fn tabulated_rate() {
        let r = ReactionProfile::Tabulated { times: vec![0.0, 1.0, 2.0], values: vec![1.0, 0.5, 0.0] };
        r.validate().unwrap();
        assert_eq!(r.g(0.5), 0.75);
        assert_eq!(r.g(5.0), 0.0);
        assert!((r.big_g(2.0) - 1.0).abs() < 1e-15);
        assert!((r.big_g(0.5) - 0.4375).abs() < 1e-15);
        let bad = ReactionProfile::Tabulated { times: vec![0.0, 1.0], values: vec![0.2, 0.5] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn heat_equation_matches_error_function() {
        let grid = GridSpec::new(-15.0, 15.0, 0.02);
        let r = ReactionProfile::Constant { g: 0.0 };
        let out = solve_tdfkpp(&r, 2.0, &grid, &[1.0]).unwrap();
        for f in &out {
            let err = (0..f.len()).map(|j| (f.values[j] - heat_heaviside(f.time, f.x(j))).abs()).fold(0.0, f64::max);
            assert!(err < 1e-4, "t = {}: {err}", f.time);
        }
    }

    #[test]
    fn range_and_monotonicity() {
        let grid = GridSpec::new(-20.0, 30.0, 0.05);
        let out = solve_tdfkpp(&ReactionProfile::tilted(0.9), 5.0, &grid, &[1.0, 2.0, 3.0]).unwrap();
        for f in &out {
            assert!(f.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(f.is_nonincreasing(1e-14));
        }
    }

    #[test]
    fn rejects_unstable_step() {
        let grid = GridSpec::new(-5.0, 5.0, 0.1).with_dt(0.05);
        assert!(matches!(solve_tdfkpp(&ReactionProfile::standard(), 1.0, &grid, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn small_domain_is_detected() {
        let grid = GridSpec::new(-3.0, 3.0, 0.05);
        match solve_tdfkpp(&ReactionProfile::standard(), 4.0, &grid, &[]) {
            Err(Error::DomainTooSmall { required_x_max, .. }) => assert!(required_x_max > 3.0),
            other => panic!("expected domain-too-small, got {other:?}"),
        }
    }

    #[test]
    fn heat_convolution() {
        let f = GridField { x_min: -20.0, dx: 0.005, dt: 0.0, time: 0.0, values: vec![0.3; 8001] };
        let c = heat_convolve(&f, 2.0).unwrap();
        assert!(c.values.iter().all(|v| (v - 0.3).abs() < 1e-14));
        let grid = GridSpec::new(-20.0, 20.0, 0.005);
        let h = Initial::Heaviside.on(&grid).unwrap();
        let f = GridField { x_min: -20.0, dx: 0.005, dt: 0.0, time: 0.0, values: h };
        let c = heat_convolve(&f, 1.0).unwrap();
        let err = (0..c.len())
            .filter(|&j| c.x(j).abs() < 10.0)
            .map(|j| (c.values[j] - heat_heaviside(1.0, c.x(j))).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        let ab = heat_convolve(&heat_convolve(&f, 0.4).unwrap(), 0.6).unwrap();
        let semigroup = (0..c.len()).filter(|&j| c.x(j).abs() < 10.0).map(|j| (ab.values[j] - c.values[j]).abs()).fold(0.0, f64::max);
        assert!(semigroup < 1e-6, "{semigroup}");
    }

    #[test]
    fn front_interpolation() {
        let f = GridField { x_min: 0.0, dx: 1.0, dt: 0.0, time: 0.0, values: vec![1.0, 0.8, 0.4, 0.0] };
        assert!((f.front(0.5).unwrap() - 1.75).abs() < 1e-15);
        assert!(f.front(1.5).is_none());
    }

    #[test]
    fn moving_frame_matches_lab_frame() {
        let lab = GridSpec::new(-20.0, 30.0, 0.05);
        let moving = GridSpec::new(-25.0, 25.0, 0.05);
        let r = ReactionProfile::standard();
        let a = solve_tdfkpp(&r, 4.0, &lab, &[]).unwrap().pop().unwrap();
        let opts = SolveOptions { frame_speed: 1.25, ..SolveOptions::default() };
        let b = solve_with(&r, &Initial::Heaviside, 4.0, &moving, &[], opts).unwrap().pop().unwrap();
        assert_eq!(b.x_min, -20.0);
        let diff = (0..b.len()).map(|j| (b.values[j] - a.interp(b.x(j))).abs()).fold(0.0, f64::max);
        assert!(diff < 2e-3, "{diff}");
    }
}
