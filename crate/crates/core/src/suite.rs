//! Acceptance suite: twelve end-to-end checks, each reported as one
//! pass/fail line.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{self, LambdaSchedule};
use crate::deathmodel;
use crate::error::{Error, Result};
use crate::fkpp::{self, GridField, GridSpec, ReactionProfile, SolveOptions, WaveProfile};
use crate::fullbbm;
use crate::params::ModelParams;
use crate::qmgw::{self, NormalEvent};
use crate::rng::StreamKey;
use crate::stats::{self, Estimate, FitDetail, FitReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Smaller Monte Carlo samples; thresholds are unchanged.
    pub quick: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seed: 20240607, quick: false }
    }
}

impl SuiteConfig {
    fn n(&self, full: usize) -> usize {
        if self.quick {
            (full / 10).max(1000)
        } else {
            full
        }
    }

    fn key(&self, id: u32) -> StreamKey {
        StreamKey::from_seed(self.seed).tag("acceptance").index(id as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub pass: bool,
    pub summary: String,
    pub elapsed_secs: f64,
    pub reports: Vec<FitReport>,
}

impl CriterionResult {
    /// `[PASS] 3 sigma identity (12.1 s): ...`
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {} ({:.1} s): {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed_secs,
            self.summary
        )
    }
}

pub const CRITERIA: [(u32, &str); 12] = [
    (1, "geometric terminal law"),
    (2, "window law"),
    (3, "sigma identity"),
    (4, "first branching time"),
    (5, "quasi-Markov factorisation"),
    (6, "small-lambda limit"),
    (7, "F-KPP sandwich"),
    (8, "diffusive regime"),
    (9, "wave tails"),
    (10, "death case"),
    (11, "full-model bounds"),
    (12, "max-front consistency"),
];

struct Outcome {
    pass: bool,
    summary: String,
    reports: Vec<FitReport>,
}

impl Outcome {
    fn from_reports(reports: Vec<FitReport>, summary: String) -> Self {
        Outcome { pass: reports.iter().all(|r| r.pass), summary, reports }
    }
}

/// Runs one criterion; errors are reported as failures.
pub fn run_criterion(id: u32, cfg: &SuiteConfig) -> Result<CriterionResult> {
    let name = CRITERIA
        .iter()
        .find(|c| c.0 == id)
        .map(|c| c.1)
        .ok_or_else(|| Error::domain(format!("no criterion {id}")))?;
    let start = Instant::now();
    let outcome = match id {
        1 => geometric_terminal(cfg),
        2 => window_law(cfg),
        3 => sigma_identity(cfg),
        4 => first_branching(cfg),
        5 => factorisation(cfg),
        6 => small_lambda(cfg),
        7 => sandwich(cfg),
        8 => diffusive(cfg),
        9 => wave_tails(cfg),
        10 => death_case(cfg),
        11 => full_bounds(cfg),
        _ => max_front(cfg),
    };
    let outcome = outcome.unwrap_or_else(|e| Outcome { pass: false, summary: format!("error: {e}"), reports: Vec::new() });
    Ok(CriterionResult {
        id,
        name: name.into(),
        pass: outcome.pass,
        summary: outcome.summary,
        elapsed_secs: start.elapsed().as_secs_f64(),
        reports: outcome.reports,
    })
}

/// Runs every criterion in order, handing each result to `on_result` as it completes.
pub fn run_all<F: FnMut(&CriterionResult)>(cfg: &SuiteConfig, mut on_result: F) -> Vec<CriterionResult> {
    CRITERIA
        .iter()
        .map(|&(id, _)| {
            let r = run_criterion(id, cfg).expect("known criterion");
            on_result(&r);
            r
        })
        .collect()
}

fn mean_report(name: &str, est: &Estimate, target: f64, k: f64) -> FitReport {
    let mut r = FitReport::new(name, (est.value - target).abs(), k * est.std_error, est.n_samples);
    r.details.push(FitDetail { at: 0.0, observed: est.value, expected: target });
    r
}

fn bound_report(name: &str, statistic: f64, threshold: f64) -> FitReport {
    FitReport::new(name, statistic, threshold, 0)
}

fn seeded(mut reports: Vec<FitReport>, seed: u64) -> Vec<FitReport> {
    for r in &mut reports {
        r.seed = Some(seed);
    }
    reports
}

fn particle_counts(sigma: f64, t: f64, s: f64, n: usize, key: StreamKey) -> Result<Vec<u64>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let tree = qmgw::sample_simplified_tree(sigma, t, key.index(i))?;
            Ok(qmgw::particle_count(&tree, s)? as u64)
        })
        .collect()
}

fn geometric_terminal(cfg: &SuiteConfig) -> Result<Outcome> {
    let (sigma, t) = (0.5, 3.0);
    let n = cfg.n(100_000);
    let counts = particle_counts(sigma, t, t, n, cfg.key(1))?;
    let p = analytics::geom_param_terminal(sigma, t)?;
    let chi = stats::chisq_geometric(&stats::counts_of(&counts)?, p)?;
    let xs: Vec<f64> = counts.iter().map(|&k| k as f64).collect();
    let est = Estimate::mean_of(&xs);
    let mean = mean_report("mean", &est, 1.0 / p, 3.0);
    let summary = format!(
        "chi2 {:.2} <= {:.2}; mean {:.4} vs {:.4} (3 SE {:.4})",
        chi.statistic,
        chi.threshold,
        est.value,
        1.0 / p,
        3.0 * est.std_error
    );
    Ok(Outcome::from_reports(seeded(vec![chi, mean], cfg.seed), summary))
}

fn window_law(cfg: &SuiteConfig) -> Result<Outcome> {
    let (sigma, t, rho) = (0.5f64, 12.0, 0.0);
    let s = t + (1.0 - sigma).ln() + rho;
    let n = cfg.n(100_000);
    let counts = particle_counts(sigma, t, s, n, cfg.key(2))?;
    let p = analytics::geom_param_window(sigma, rho)?;
    let chi = stats::chisq_geometric(&stats::counts_of(&counts)?, p)?;
    let xs: Vec<f64> = counts.iter().map(|&k| k as f64).collect();
    let est = Estimate::mean_of(&xs);
    let target = 1.0 + sigma;
    let mean = mean_report("mean", &est, target, 3.0);
    let summary = format!(
        "n({s:.3}): chi2 {:.2} <= {:.2}; mean {:.4} vs {target} (3 SE {:.4})",
        chi.statistic,
        chi.threshold,
        est.value,
        3.0 * est.std_error
    );
    Ok(Outcome::from_reports(seeded(vec![chi, mean], cfg.seed), summary))
}

fn sigma_identity(cfg: &SuiteConfig) -> Result<Outcome> {
    let (lambda, eps, dt) = (1.0f64, 0.5, 1e-4);
    let n = cfg.n(100_000);
    let taus = fullbbm::tau_epsilon_samples(eps, dt, n, cfg.key(3))?;
    let laplace: Vec<f64> = taus.iter().map(|t| (-lambda * t).exp()).collect();
    let est_l = Estimate::mean_of(&laplace);
    let sigma = analytics::sigma_of(lambda, eps)?;
    let est_t = Estimate::mean_of(&taus);
    let summary = format!(
        "E e^(-tau) {:.5} vs sech {:.5} (3 SE {:.5}); E tau {:.5} vs {} (3 SE {:.5})",
        est_l.value,
        sigma,
        3.0 * est_l.std_error,
        est_t.value,
        eps * eps,
        3.0 * est_t.std_error
    );
    let reports = vec![mean_report("laplace", &est_l, sigma, 3.0), mean_report("mean_exit", &est_t, eps * eps, 3.0)];
    Ok(Outcome::from_reports(seeded(reports, cfg.seed), summary))
}

fn first_branching(cfg: &SuiteConfig) -> Result<Outcome> {
    let (sigma, t) = (0.5, 5.0);
    let n = cfg.n(100_000);
    let key = cfg.key(4);
    let firsts: Vec<Option<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|i| Ok(qmgw::first_branch_time(&qmgw::sample_simplified_tree(sigma, t, key.index(i))?)))
        .collect::<Result<_>>()?;
    let branched: Vec<f64> = firsts.iter().flatten().copied().collect();
    let atom = analytics::no_branch_mass(sigma, t)?;
    let cdf = |x: f64| {
        let x = x.clamp(0.0, t);
        analytics::first_branch_cdf(sigma, t, t - x).unwrap_or(f64::NAN) / (1.0 - atom)
    };
    let ks = stats::ks_statistic(&branched, cdf)?;
    let est = Estimate::proportion(n - branched.len(), n);
    let atom_report = mean_report("atom", &est, atom, 3.0);
    let summary = format!(
        "KS {:.5} <= {:.5} (N = {}); atom {:.5} vs {:.5} (3 SE {:.5})",
        ks.statistic,
        ks.threshold,
        branched.len(),
        est.value,
        atom,
        3.0 * est.std_error
    );
    Ok(Outcome::from_reports(seeded(vec![ks, atom_report], cfg.seed), summary))
}

fn factorisation(cfg: &SuiteConfig) -> Result<Outcome> {
    let (sigma, t, tol) = (0.6, 4.0, 1e-6);
    let event = NormalEvent::node(2.0, NormalEvent::wait_at_most(1.0), NormalEvent::wait_at_most(1.5));
    let n = cfg.n(100_000);
    let mc = qmgw::event_probability(&event, sigma, t, n, cfg.key(5))?;
    let quad = qmgw::factorized_probability(&event, sigma, t, tol)?;
    let combined = (mc.std_error * mc.std_error + tol * tol).sqrt();
    let mut r = FitReport::new("factorisation", (mc.value - quad).abs(), 3.0 * combined, n);
    r.details.push(FitDetail { at: 0.0, observed: mc.value, expected: quad });
    let summary = format!("MC {:.5} vs quadrature {:.7} (3 SE {:.5})", mc.value, quad, 3.0 * combined);
    Ok(Outcome::from_reports(seeded(vec![r], cfg.seed), summary))
}

fn small_lambda(cfg: &SuiteConfig) -> Result<Outcome> {
    let (t, eps) = (1000.0, 1.0);
    let schedule = LambdaSchedule::InverseTime { scale: 1.0 };
    let lambda = schedule.at(t)?;
    let sigma = analytics::sigma_of(lambda, eps)?;
    let centre = schedule.centre(t, eps)?;
    // the KS thresholds are absolute, so the sample is not reduced in quick mode
    let n = 20_000;
    let key = cfg.key(6);
    let draws: Vec<(usize, Option<f64>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let tree = qmgw::sample_simplified_tree(sigma, t, key.tag("trees").index(i))?;
            Ok((qmgw::particle_count(&tree, t)?, qmgw::first_branch_time(&tree)))
        })
        .collect::<Result<_>>()?;
    let scaled: Vec<f64> = draws.iter().map(|d| d.0 as f64).collect();
    let exp = stats::exp_rescaled_test(&scaled, 1.0 / (lambda * eps * eps))?.with_threshold(0.02);
    let shifted: Vec<f64> = draws.iter().filter_map(|d| d.1).map(|x| x - centre).collect();
    let mut logistic = stats::ks_statistic(&shifted, analytics::limit_first_cdf)?.with_threshold(0.03);
    logistic.test_name = "logistic".into();

    let n_root = cfg.n(100_000);
    let rkey = key.tag("root");
    let roots: Vec<f64> = (0..n_root as u64).into_par_iter().map(|i| qmgw::sample_limiting_root_time(rkey.index(i))).collect();
    let (_, var) = stats::mean_var(&roots);
    let target = PI * PI / 3.0;
    let mut var_report = FitReport::new("root_variance", ((var - target) / target).abs(), 0.05, n_root);
    var_report.details.push(FitDetail { at: 0.0, observed: var, expected: target });
    let summary = format!(
        "Exp KS {:.4} <= 0.02; logistic KS {:.4} <= 0.03; root variance {:.4} vs {:.4} (rel {:.2e})",
        exp.statistic, logistic.statistic, var, target, var_report.statistic
    );
    Ok(Outcome::from_reports(seeded(vec![exp, logistic, var_report], cfg.seed), summary))
}

/// Grid shared by the sandwich and regime checks.
fn regime_grid() -> GridSpec {
    GridSpec::new(-30.0, 45.0, 0.02)
}

fn final_field(reaction: &ReactionProfile, t_end: f64, grid: &GridSpec, snapshots: &[f64]) -> Result<Vec<GridField>> {
    fkpp::solve_tdfkpp(reaction, t_end, grid, snapshots)
}

fn sandwich(_cfg: &SuiteConfig) -> Result<Outcome> {
    let (sigma, t) = (0.99, 12.0);
    let grid = regime_grid();
    let tilted = ReactionProfile::tilted(sigma);
    let standard = ReactionProfile::standard();
    let w = final_field(&tilted, t, &grid, &[])?.pop().expect("t_end snapshot");
    let w0 = final_field(&standard, t, &grid, &[])?.pop().expect("t_end snapshot");
    let opts = SolveOptions::default();
    let err = fkpp::refinement_error(&tilted, true, t, &grid, opts)? + fkpp::refinement_error(&standard, true, t, &grid, opts)?;
    let factor = (fkpp::big_g_tilted(sigma, t)? - t).exp();
    let violation = w
        .values
        .iter()
        .zip(&w0.values)
        .map(|(&ws, &s)| (factor * s - ws).max(ws - s))
        .fold(0.0f64, f64::max);
    let tol = 10.0 * err;
    let r = bound_report("sandwich", violation, tol);
    let summary = format!(
        "max violation {violation:.3e} <= {tol:.3e} (10 x refinement error); e^(G-t) = {factor:.4}"
    );
    Ok(Outcome::from_reports(vec![r], summary))
}

const WAVE_DX: f64 = 0.05;

fn shared_wave() -> Result<&'static WaveProfile> {
    static WAVE: OnceLock<Result<WaveProfile>> = OnceLock::new();
    WAVE.get_or_init(|| fkpp::standard_wave(fkpp::WAVE_AT_TIME, WAVE_DX)).as_ref().map_err(Clone::clone)
}

fn diffusive(_cfg: &SuiteConfig) -> Result<Outcome> {
    let (sigma, delta, big_delta) = (0.99, 0.5, 0.1);
    let t_end = fkpp::t_big_delta(sigma, big_delta)? + 5.0;
    let times = fkpp::regime_snapshot_times(sigma, delta, big_delta, t_end)?;
    let grid = regime_grid();
    let tilted = ReactionProfile::tilted(sigma);
    let snaps = final_field(&tilted, t_end, &grid, &times)?;
    let scheme_err = fkpp::refinement_error(&tilted, true, t_end, &grid, SolveOptions::default())?;
    let tau = times[0];
    let standard = final_field(&ReactionProfile::standard(), tau, &grid, &[])?.pop().expect("t_end snapshot");
    let centre = standard.front(0.5).ok_or_else(|| Error::NotConverged("standard run has no front".into()))?;
    let wave = shared_wave()?;
    let report = fkpp::regime_report(sigma, delta, big_delta, &snaps, wave, centre, 10.0 * scheme_err)?;
    let mut reports = Vec::new();
    let mut parts = Vec::new();
    for name in ["diffusive", "bracket_ratio"] {
        let c = report.check(name).ok_or_else(|| Error::Internal(format!("missing check {name}")))?;
        reports.push(bound_report(name, c.max_violation, c.tolerance));
        parts.push(format!("{name} {:.3e} <= {:.3e}", c.max_violation, c.tolerance));
    }
    let info: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !matches!(c.regime.as_str(), "diffusive" | "bracket_ratio"))
        .map(|c| format!("{} {:.2e}", c.regime, c.max_violation))
        .collect();
    let summary = format!("t = {t_end:.3}: {}; (info: {})", parts.join("; "), info.join(", "));
    Ok(Outcome::from_reports(reports, summary))
}

fn wave_tails(_cfg: &SuiteConfig) -> Result<Outcome> {
    let wave = shared_wave()?;
    let right = wave.right_tail_fit(2.0, 8.0)?;
    let left = wave.left_tail_fit(-8.0, -2.0)?;
    let mut reports = Vec::new();
    for (name, fit) in [("right_tail", right), ("left_tail", left)] {
        let mut r = bound_report(name, fit.relative_error(), 0.05);
        r.pass &= fit.c_bound.is_finite() && fit.c_bound > 0.0;
        r.details.push(FitDetail { at: fit.c_bound, observed: fit.slope, expected: fit.target_slope });
        reports.push(r);
    }
    // further out, where the profile is in its linear regime
    let far = wave.right_tail_fit(8.0, 16.0)?;
    let summary = format!(
        "residual {:.1e}; right slope {:.4} vs {:.4} (C = {:.3}); left slope {:.4} vs {:.4} (C = {:.3}); (info: right slope on [8,16] {:.4})",
        wave.residual,
        right.slope,
        -SQRT_2,
        right.c_bound,
        left.slope,
        2.0 - SQRT_2,
        left.c_bound,
        far.slope
    );
    Ok(Outcome::from_reports(reports, summary))
}

fn death_case(cfg: &SuiteConfig) -> Result<Outcome> {
    let sigmas = [0.5, 0.65, 0.8, 0.9, 0.99];
    let p0s = [0.05, 0.1, 0.2, 0.3, 0.4];
    let ts = [0.5, 1.0, 2.0, 5.0, 10.0];
    let mut worst = 0.0f64;
    for &s in &sigmas {
        for &p0 in &p0s {
            for &t in &ts {
                let lhs = deathmodel::mean_n_death(s, p0, t)? * deathmodel::partition_v_death(s, p0, t)?;
                let rhs = deathmodel::u_sigma_direct(s, p0, t)?;
                worst = worst.max(((lhs - rhs) / rhs).abs());
            }
        }
    }
    let agree = bound_report("mean_vs_direct", worst, 1e-6);

    let (t1, t2) = (60.0, 80.0);
    let mut worst_slope = 0.0f64;
    for &s in &sigmas {
        for &p0 in &p0s {
            let slope = (deathmodel::mean_n_death(s, p0, t2)?.ln() - deathmodel::mean_n_death(s, p0, t1)?.ln()) / (t2 - t1);
            let fp = deathmodel::fixpoints(s, p0)?;
            let target = 2.0 * s * (1.0 - p0) * fp.v_minus - 1.0;
            worst_slope = worst_slope.max(((slope - target) / target).abs());
        }
    }
    let slope = bound_report("log_slope", worst_slope, 0.01);

    let (s, p0, t) = (0.9, 0.2, 3.0);
    let n = cfg.n(100_000);
    let sample = deathmodel::sample_weighted(s, p0, t, n, cfg.key(10))?;
    let v = deathmodel::partition_v_death(s, p0, t)?;
    let mc = mean_report("weighted_partition", &sample.partition, v, 3.0);
    let summary = format!(
        "max rel diff {worst:.2e} <= 1e-6; slope rel err {worst_slope:.2e} <= 1e-2; E sigma^m {:.5} vs {:.5} (3 SE {:.5})",
        sample.partition.value,
        v,
        3.0 * sample.partition.std_error
    );
    Ok(Outcome::from_reports(vec![agree, slope, mc.with_seed(cfg.seed)], summary))
}

fn full_bounds(cfg: &SuiteConfig) -> Result<Outcome> {
    let n = cfg.n(10_000);
    let dt = fullbbm::DEFAULT_DT;
    let key = cfg.key(11);
    let a = ModelParams::new(0.05, 0.5, 0.0, 6.0)?;
    let first = fullbbm::check_first_branch_bound(&a, 2.0, n, dt, key.tag("first"))?;
    let b = ModelParams::new(0.01, 1.0, 0.0, 8.0)?;
    let improved = fullbbm::check_improved_bound(&b, 4.0, 2.0, n, dt, key.tag("improved"))?;
    let summary = format!(
        "P(tau1 <= 4) {:.4} - 3 SE <= {:.4}; P(tau1 <= 4) {:.4} - 3 SE <= {:.4} (c = 2)",
        first.details[0].observed, first.threshold, improved.details[0].observed, improved.threshold
    );
    Ok(Outcome::from_reports(seeded(vec![first, improved], cfg.seed), summary))
}

fn max_front(cfg: &SuiteConfig) -> Result<Outcome> {
    let (sigma, t) = (0.8, 3.0);
    let grid = GridSpec::new(-20.0, 25.0, 0.02);
    let tilted = ReactionProfile::tilted(sigma);
    let w = final_field(&tilted, t, &grid, &[])?.pop().expect("t_end snapshot");
    let scheme = fkpp::refinement_error(&tilted, true, t, &grid, SolveOptions::default())?;
    let levels = [0.9, 0.7, 0.5, 0.3, 0.1];
    let xs: Vec<f64> = levels
        .iter()
        .map(|&l| w.front(l).ok_or_else(|| Error::NotConverged(format!("no crossing of level {l}"))))
        .collect::<Result<_>>()?;
    let n = cfg.n(200_000);
    let est = fullbbm::max_cdf_estimate(sigma, t, &xs, n, cfg.key(12))?;
    let mut reports = Vec::new();
    let mut parts = Vec::new();
    for ((&x, e), &level) in xs.iter().zip(&est).zip(&levels) {
        let pde = 1.0 - w.interp(x);
        let tol = 3.0 * e.std_error + scheme;
        let mut r = FitReport::new(format!("max_cdf@{x:.3}"), (e.value - pde).abs(), tol, n).with_seed(cfg.seed);
        r.details.push(FitDetail { at: x, observed: e.value, expected: pde });
        reports.push(r);
        parts.push(format!("{:.3}/{:.3}", e.value, 1.0 - level));
    }
    let worst = reports.iter().map(|r| r.statistic - r.threshold).fold(f64::NEG_INFINITY, f64::max);
    let summary = format!("MC/PDE at x = {:?}: {}; worst margin {worst:.2e}", xs.iter().map(|x| (x * 1e3).round() / 1e3).collect::<Vec<_>>(), parts.join(", "));
    Ok(Outcome::from_reports(reports, summary))
}
