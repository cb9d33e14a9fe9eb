//! Spatial branching Brownian motion on a time grid.
//!
//! Clocks are exact: each particle carries an exponential(1) lifetime and,
//! when it rings inside a grid step, the particle is moved to the ring time
//! by a Gaussian increment of the right variance, replaced by its offspring
//! (or removed), and the offspring continue to the end of the step. Positions
//! at grid times therefore have the exact finite-dimensional law; only the
//! penalty `I_t` is discretised, as the left Riemann sum
//!
//! ```text
//! I_t = dt * sum_m #{(i, j) ordered, i != j : |x_i(s_m) - x_j(s_m)| <= eps}.
//! ```
//!
//! Close pairs are counted exactly on sorted positions, so the count does not
//! depend on particle order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::a_term;
use crate::error::{ensure, Error, Result};
use crate::params::ModelParams;
use crate::qmgw::{sample_gw_tree, Fate, NodeLabel, QmgwTree, Wait};
use crate::rng::StreamKey;
use crate::stats::{FitDetail, FitReport, WeightedEstimate, WeightedSamples};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_PARTICLE_CAP: usize = 1_000_000;
/// Realisations whose log weight falls below `-(t + WEIGHT_MARGIN)` are
/// stopped and given weight zero: the mean weight is at least `e^{-t}` (no
/// branching), so the relative bias is below `e^{-WEIGHT_MARGIN}`.
pub const WEIGHT_MARGIN: f64 = 36.0;
/// Bridge crossing probabilities are skipped when the exponent exceeds this.
const BRIDGE_CUTOFF: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BbmOptions {
    pub particle_cap: usize,
    /// Keep every particle at every grid time.
    pub record_trajectories: bool,
    /// Stop once `-lambda I` drops below this.
    pub log_weight_floor: Option<f64>,
}

impl Default for BbmOptions {
    fn default() -> Self {
        BbmOptions { particle_cap: DEFAULT_PARTICLE_CAP, record_trajectories: false, log_weight_floor: None }
    }
}

impl BbmOptions {
    /// Options for weighted estimation: truncation at `-(t + WEIGHT_MARGIN)`.
    pub fn weighted(params: &ModelParams) -> Self {
        BbmOptions { log_weight_floor: Some(-(params.horizon() + WEIGHT_MARGIN)), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub id: u64,
    pub parent: Option<u64>,
    pub position: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchEvent {
    pub time: f64,
    pub parent: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BbmRealization {
    pub dt: f64,
    pub n_steps: usize,
    pub horizon: f64,
    pub epsilon: f64,
    /// Particles at each grid time, if recorded.
    pub trajectories: Option<Vec<Vec<ParticleState>>>,
    /// Particle count at each grid time reached.
    pub counts: Vec<usize>,
    pub final_particles: Vec<ParticleState>,
    pub branch_events: Vec<BranchEvent>,
    pub death_events: Vec<BranchEvent>,
    pub penalty_i: f64,
    /// Sibling separation times, one per branching event: the grid time
    /// during which the two offspring both exist and stay within `epsilon`,
    /// counted from the first grid point after their birth.
    pub sibling_separation: Vec<f64>,
    /// Grid time at which the run was stopped by the weight floor.
    pub truncated_at: Option<f64>,
    /// Genealogy up to the horizon (or the truncation time).
    pub skeleton: QmgwTree,
}

impl BbmRealization {
    pub fn time(&self, m: usize) -> f64 {
        if m == self.n_steps {
            self.horizon
        } else {
            m as f64 * self.dt
        }
    }

    pub fn n_final(&self) -> usize {
        self.final_particles.len()
    }

    pub fn tau1(&self) -> Option<f64> {
        self.branch_events.first().map(|e| e.time)
    }

    /// `-lambda I_t`, or minus infinity for a truncated run.
    pub fn log_weight(&self, lambda: f64) -> f64 {
        if self.truncated_at.is_some() {
            f64::NEG_INFINITY
        } else if lambda == 0.0 {
            0.0
        } else {
            -lambda * self.penalty_i
        }
    }

    pub fn max_position(&self) -> Option<f64> {
        self.final_particles.iter().map(|p| p.position).reduce(f64::max)
    }
}

/// Unordered pairs at distance at most `eps` in a sorted slice.
pub fn count_close_pairs(sorted: &[f64], eps: f64) -> u64 {
    let mut count = 0u64;
    let mut j = 0;
    for i in 0..sorted.len() {
        if j < i + 1 {
            j = i + 1;
        }
        while j < sorted.len() && sorted[j] - sorted[i] <= eps {
            j += 1;
        }
        count += (j - i - 1) as u64;
    }
    count
}

fn ordered_pairs(positions: &mut [f64], eps: f64) -> u64 {
    positions.sort_unstable_by(f64::total_cmp);
    2 * count_close_pairs(positions, eps)
}

struct Rec {
    label: NodeLabel,
    id: u64,
    parent: Option<u64>,
    birth: f64,
    wait: f64,
    fate: Option<Fate>,
    pos: f64,
}

fn gauss(rng: &mut ChaCha8Rng, var: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * var.sqrt()
}

pub fn simulate_bbm(params: &ModelParams, dt: f64, key: StreamKey) -> Result<BbmRealization> {
    simulate_bbm_with(params, dt, key, BbmOptions::default())
}

pub fn simulate_bbm_with(params: &ModelParams, dt: f64, key: StreamKey, opts: BbmOptions) -> Result<BbmRealization> {
    let horizon = params.horizon();
    ensure(horizon.is_finite() && horizon > 0.0, || format!("horizon must be positive and finite, got {horizon}"))?;
    ensure(dt > 0.0 && dt <= horizon, || format!("dt must lie in (0, t], got {dt}"))?;
    let n_steps = (horizon / dt).round().max(1.0) as usize;
    let dt = horizon / n_steps as f64;
    let eps = params.epsilon();
    let lambda = params.lambda();
    let p0 = params.p0();
    let mut rng = key.rng();

    let mut recs = vec![Rec {
        label: NodeLabel::root(),
        id: 0,
        parent: None,
        birth: 0.0,
        wait: Exp1.sample(&mut rng),
        fate: None,
        pos: 0.0,
    }];
    let mut alive: Vec<usize> = vec![0];
    let mut next = Vec::new();
    let mut stack = Vec::new();
    let mut scratch = Vec::new();
    let mut counts = Vec::with_capacity(n_steps + 1);
    let mut trajectories = opts.record_trajectories.then(Vec::new);
    let mut branch_events = Vec::new();
    let mut death_events = Vec::new();
    // per branching event: (offspring indices, separation so far, still open)
    let mut siblings: Vec<([usize; 2], f64, bool)> = Vec::new();
    let mut pairs_total = 0u64;
    let mut truncated_at = None;
    let mut end_time = horizon;

    for m in 0..n_steps {
        let s0 = m as f64 * dt;
        counts.push(alive.len());
        if let Some(tr) = trajectories.as_mut() {
            tr.push(snapshot(&recs, &alive));
        }
        scratch.clear();
        scratch.extend(alive.iter().map(|&i| recs[i].pos));
        pairs_total += ordered_pairs(&mut scratch, eps);
        for (pair, sep, open) in siblings.iter_mut().filter(|s| s.2) {
            let [a, b] = *pair;
            if recs[a].fate.is_none() && recs[b].fate.is_none() && (recs[a].pos - recs[b].pos).abs() <= eps {
                *sep += dt;
            } else {
                *open = false;
            }
        }
        if let Some(floor) = opts.log_weight_floor {
            if -lambda * (dt * pairs_total as f64) < floor {
                truncated_at = Some(s0);
                end_time = s0;
                break;
            }
        }

        let s1 = if m + 1 == n_steps { horizon } else { (m + 1) as f64 * dt };
        next.clear();
        stack.clear();
        stack.extend(alive.iter().rev().map(|&i| (i, s0)));
        while let Some((i, t)) = stack.pop() {
            let ring = recs[i].birth + recs[i].wait;
            if ring <= s1 {
                let dx = gauss(&mut rng, ring - t);
                recs[i].pos += dx;
                let u: f64 = rng.gen();
                if u < p0 {
                    recs[i].fate = Some(Fate::Death);
                    death_events.push(BranchEvent { time: ring, parent: recs[i].id });
                    continue;
                }
                recs[i].fate = Some(Fate::Branch);
                branch_events.push(BranchEvent { time: ring, parent: recs[i].id });
                let first = recs.len();
                for k in 0..2u8 {
                    let wait: f64 = Exp1.sample(&mut rng);
                    recs.push(Rec {
                        label: recs[i].label.child(k),
                        id: recs.len() as u64,
                        parent: Some(recs[i].id),
                        birth: ring,
                        wait,
                        fate: None,
                        pos: recs[i].pos,
                    });
                }
                siblings.push(([first, first + 1], 0.0, true));
                stack.push((first + 1, ring));
                stack.push((first, ring));
            } else {
                let dx = gauss(&mut rng, s1 - t);
                recs[i].pos += dx;
                next.push(i);
            }
        }
        if next.len() > opts.particle_cap {
            return Err(Error::Resource {
                message: format!("particle count exceeded {}", opts.particle_cap),
                partial: Some(format!(
                    "{} particles at t = {s1}, {} branchings, penalty so far {}",
                    next.len(),
                    branch_events.len(),
                    dt * pairs_total as f64
                )),
            });
        }
        std::mem::swap(&mut alive, &mut next);
    }
    if truncated_at.is_none() {
        counts.push(alive.len());
        if let Some(tr) = trajectories.as_mut() {
            tr.push(snapshot(&recs, &alive));
        }
    }

    let final_particles = snapshot(&recs, &alive);
    let parts = recs
        .iter()
        .map(|r| {
            let (wait, fate) = match r.fate {
                Some(f) => (Wait::Time(r.wait), f),
                None => (Wait::BeyondHorizon, Fate::Survive),
            };
            (r.label.clone(), r.birth, wait, fate)
        })
        .collect();
    let skeleton = QmgwTree::assemble(0.0, end_time, parts)?;
    Ok(BbmRealization {
        dt,
        n_steps,
        horizon,
        epsilon: eps,
        trajectories,
        counts,
        final_particles,
        branch_events,
        death_events,
        penalty_i: dt * pairs_total as f64,
        sibling_separation: siblings.into_iter().map(|s| s.1).collect(),
        truncated_at,
        skeleton,
    })
}

fn snapshot(recs: &[Rec], alive: &[usize]) -> Vec<ParticleState> {
    alive.iter().map(|&i| ParticleState { id: recs[i].id, parent: recs[i].parent, position: recs[i].pos }).collect()
}

/// Recomputes `I_t` from recorded trajectories for radius `epsilon`.
pub fn penalty_of(realization: &BbmRealization, epsilon: f64) -> Result<f64> {
    ensure(epsilon >= 0.0, || format!("epsilon must be nonnegative, got {epsilon}"))?;
    let tr = realization
        .trajectories
        .as_ref()
        .ok_or_else(|| Error::domain("realization was simulated without trajectories"))?;
    ensure(realization.truncated_at.is_none(), || "realization was truncated".into())?;
    let mut scratch = Vec::new();
    let mut pairs = 0u64;
    for snap in &tr[..realization.n_steps] {
        scratch.clear();
        scratch.extend(snap.iter().map(|p| p.position));
        pairs += ordered_pairs(&mut scratch, epsilon);
    }
    Ok(realization.dt * pairs as f64)
}

/// Per-realisation summary used by the weighted estimators and CSV export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizationSummary {
    pub index: u64,
    pub n_final: usize,
    pub penalty_i: f64,
    pub tau1: Option<f64>,
    pub log_weight: f64,
    pub max_position: Option<f64>,
    pub truncated: bool,
}

/// One CSV row of the realisation summary export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub lambda: f64,
    pub epsilon: f64,
    pub t: f64,
    pub dt: f64,
    pub n_final: usize,
    #[serde(rename = "I_t")]
    pub i_t: f64,
    pub tau1: Option<f64>,
    pub weight_log: f64,
}

impl RealizationSummary {
    pub fn row(&self, seed: u64, params: &ModelParams, dt: f64) -> SummaryRow {
        SummaryRow {
            seed,
            lambda: params.lambda(),
            epsilon: params.epsilon(),
            t: params.horizon(),
            dt,
            n_final: self.n_final,
            i_t: self.penalty_i,
            tau1: self.tau1,
            weight_log: self.log_weight,
        }
    }
}

/// Simulates `n_samples` independent realisations (stream `key.index(i)`),
/// truncating negligible weights.
pub fn simulate_summaries(
    params: &ModelParams,
    n_samples: usize,
    dt: f64,
    key: StreamKey,
) -> Result<Vec<RealizationSummary>> {
    ensure(n_samples >= 1, || "n_samples must be at least 1".into())?;
    let opts = BbmOptions::weighted(params);
    let lambda = params.lambda();
    (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let r = simulate_bbm_with(params, dt, key.index(i), opts)?;
            Ok(RealizationSummary {
                index: i,
                n_final: r.n_final(),
                penalty_i: r.penalty_i,
                tau1: r.tau1(),
                log_weight: r.log_weight(lambda),
                max_position: r.max_position(),
                truncated: r.truncated_at.is_some(),
            })
        })
        .collect()
}

/// Self-normalised estimate of `E_{t,sigma}[f]` from summaries.
pub fn weighted_mean<F: Fn(&RealizationSummary) -> f64>(summaries: &[RealizationSummary], f: F) -> Result<WeightedEstimate> {
    let mut w = WeightedSamples::new();
    for s in summaries {
        w.push(s.log_weight, if s.log_weight == f64::NEG_INFINITY { 0.0 } else { f(s) });
    }
    w.estimate()
}

/// Tilted-measure expectation of a functional of the realisation.
pub fn tilted_estimate<F>(f: F, params: &ModelParams, n_samples: usize, dt: f64, key: StreamKey) -> Result<WeightedEstimate>
where
    F: Fn(&RealizationSummary) -> f64,
{
    weighted_mean(&simulate_summaries(params, n_samples, dt, key)?, f)
}

/// `log E[e^{-lambda I_t}]` estimated from summaries.
pub fn log_mean_weight(summaries: &[RealizationSummary]) -> f64 {
    let mut w = WeightedSamples::new();
    for s in summaries {
        w.push(s.log_weight, 0.0);
    }
    w.log_mean_weight()
}

/// Exit time of `|B|` from `[-eps, eps]` on a grid of step `dt`, with a
/// Brownian-bridge test for excursions inside each step. The exit is dated
/// at the end of the step in which it is detected.
pub fn sample_tau_epsilon<R: Rng>(epsilon: f64, dt: f64, rng: &mut R) -> Result<f64> {
    ensure(epsilon > 0.0 && dt > 0.0, || "epsilon and dt must be positive".into())?;
    let sd = dt.sqrt();
    let mut a = 0.0f64;
    let mut t = 0.0;
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let b = a + sd * z;
        t += dt;
        if b.abs() > epsilon {
            return Ok(t);
        }
        let up = 2.0 * (epsilon - a) * (epsilon - b) / dt;
        let low = 2.0 * (epsilon + a) * (epsilon + b) / dt;
        if up < BRIDGE_CUTOFF || low < BRIDGE_CUTOFF {
            let p_up = (-up).exp();
            let p_low = (-low).exp();
            let p = p_up + p_low - p_up * p_low;
            if rng.gen::<f64>() < p {
                return Ok(t);
            }
        }
        a = b;
    }
}

/// Exit-time samples on streams `key.index(i)`.
pub fn tau_epsilon_samples(epsilon: f64, dt: f64, n: usize, key: StreamKey) -> Result<Vec<f64>> {
    (0..n as u64).into_par_iter().map(|i| sample_tau_epsilon(epsilon, dt, &mut key.index(i).rng())).collect()
}

/// `sigma (e^{-r} - e^{-t}) / ((1 - sigma (1 - e^{-t})) (1 - sigma (1 - e^{-r})))`,
/// an upper bound on `P_{t,sigma}(tau_1 <= t - r)` in the full model.
pub fn first_branch_bound(params: &ModelParams, r: f64) -> Result<f64> {
    let t = params.horizon();
    ensure(r >= 0.0 && r <= t, || format!("need 0 <= r <= t, got r = {r}"))?;
    let s = params.sigma();
    Ok(s * ((-r).exp() - (-t).exp()) / (a_term(s, t) * a_term(s, r)))
}

/// `c^2 e / (c - 1) * sqrt(lambda) / (lambda^2 eps^4 e^r + lambda eps^2)`;
/// `4 e sqrt(lambda) / (...)` at `c = 2`.
pub fn improved_bound(params: &ModelParams, r: f64, c: f64) -> Result<f64> {
    ensure(c > 1.0, || format!("c must exceed 1, got {c}"))?;
    let (l, e2) = (params.lambda(), params.epsilon().powi(2));
    ensure(l > 0.0, || "the improved bound needs lambda > 0".into())?;
    Ok(c * c * std::f64::consts::E / (c - 1.0) * l.sqrt() / (l * l * e2 * e2 * r.exp() + l * e2))
}

/// `e^{-t} (lambda c^2)^{-1/2} (1 - 1/c) / e`, a lower bound on `E[e^{-lambda I_t}]`.
pub fn denominator_lower_bound(params: &ModelParams, c: f64) -> Result<f64> {
    ensure(c > 1.0, || format!("c must exceed 1, got {c}"))?;
    let l = params.lambda();
    ensure(l > 0.0, || "the bound needs lambda > 0".into())?;
    Ok((-params.horizon()).exp() / (l * c * c).sqrt() * (1.0 - 1.0 / c) / std::f64::consts::E)
}

/// `4 e / (e^rho + sqrt(lambda) eps^2)`, bound on `P(tau_1 <= t + ln(lambda^{3/2} eps^4) - rho)`.
pub fn shift_law_bound(params: &ModelParams, rho: f64) -> f64 {
    4.0 * std::f64::consts::E / (rho.exp() + params.lambda().sqrt() * params.epsilon().powi(2))
}

fn one_sided_report(name: &str, est: &WeightedEstimate, bound: f64, seed: Option<u64>) -> FitReport {
    // statistic: estimate minus three standard errors, compared to the bound
    let mut r = FitReport::new(name, est.value - 3.0 * est.std_error, bound, est.n_samples);
    r.seed = seed;
    r.details.push(FitDetail { at: 0.0, observed: est.value, expected: bound });
    r
}

/// Checks the MC estimate of `P_{t,sigma}(tau_1 <= t - r)` against
/// [`first_branch_bound`].
pub fn check_first_branch_bound(
    params: &ModelParams,
    r: f64,
    n_samples: usize,
    dt: f64,
    key: StreamKey,
) -> Result<FitReport> {
    let bound = first_branch_bound(params, r)?;
    let t = params.horizon();
    let est = tilted_estimate(|s| indicator(s.tau1.is_some_and(|x| x <= t - r)), params, n_samples, dt, key)?;
    Ok(one_sided_report("first_branch_bound", &est, bound, None))
}

/// Checks the MC estimate of `P_{t,sigma}(tau_1 <= t - r)` against
/// [`improved_bound`] and reports the estimated `E[e^{-lambda I_t}]` next to
/// [`denominator_lower_bound`] as a second detail row.
pub fn check_improved_bound(
    params: &ModelParams,
    r: f64,
    c: f64,
    n_samples: usize,
    dt: f64,
    key: StreamKey,
) -> Result<FitReport> {
    let bound = improved_bound(params, r, c)?;
    let t = params.horizon();
    let summaries = simulate_summaries(params, n_samples, dt, key)?;
    let est = weighted_mean(&summaries, |s| indicator(s.tau1.is_some_and(|x| x <= t - r)))?;
    let mut report = one_sided_report("improved_bound", &est, bound, None);
    report.details.push(FitDetail {
        at: 1.0,
        observed: log_mean_weight(&summaries).exp(),
        expected: denominator_lower_bound(params, c)?,
    });
    Ok(report)
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Positions at `time` of the particles alive then, obtained by running an
/// independent Brownian motion along every edge of the tree (increments
/// keyed by node label).
pub fn skeleton_positions(tree: &QmgwTree, time: f64, key: StreamKey) -> Result<Vec<f64>> {
    ensure(tree.t0().is_finite(), || "tree must start at a finite time".into())?;
    ensure(time >= tree.t0() && time <= tree.horizon(), || format!("time {time} outside the tree"))?;
    let nodes = tree.nodes();
    let mut out = Vec::new();
    let mut stack = vec![(0usize, 0.0f64)];
    while let Some((i, start)) = stack.pop() {
        let n = &nodes[i];
        if n.birth > time {
            continue;
        }
        let end = n.event_time.map_or(time, |e| e.min(time));
        let z: f64 = StandardNormal.sample(&mut key.label(n.label.path()).rng());
        let pos = start + z * (end - n.birth).sqrt();
        match (n.fate, n.children) {
            (Fate::Branch, Some([a, b])) if n.event_time.is_some_and(|e| e <= time) => {
                stack.push((b, pos));
                stack.push((a, pos));
            }
            (Fate::Death, _) if n.event_time.is_some_and(|e| e <= time) => {}
            _ => out.push(pos),
        }
    }
    Ok(out)
}

/// Weighted MC of `P_{t,sigma}(max_i x_i(t) <= x)` in the simplified model:
/// unpenalised binary trees with Brownian positions, weight `sigma^{n(t)-1}`.
pub fn max_cdf_estimate(sigma: f64, t: f64, xs: &[f64], n_samples: usize, key: StreamKey) -> Result<Vec<WeightedEstimate>> {
    ensure(sigma > 0.0 && sigma <= 1.0, || format!("sigma must lie in (0, 1], got {sigma}"))?;
    ensure(n_samples >= 2, || "need at least two samples".into())?;
    let draws: Vec<(usize, f64)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let k = key.index(i);
            let tree = sample_gw_tree(0.0, t, k.tag("tree"))?;
            let pos = skeleton_positions(&tree, t, k.tag("paths"))?;
            Ok((pos.len(), pos.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        })
        .collect::<Result<_>>()?;
    let ln_sigma = sigma.ln();
    xs.iter()
        .map(|&x| {
            let mut w = WeightedSamples::new();
            for &(n, max) in &draws {
                w.push((n as f64 - 1.0) * ln_sigma, indicator(max <= x));
            }
            w.estimate()
        })
        .collect()
}
