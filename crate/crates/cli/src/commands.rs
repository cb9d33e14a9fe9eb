use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use repulse_bbm::suite::{self, SuiteConfig};
use repulse_bbm::{analytics, deathmodel, fkpp, fullbbm, qmgw, ModelParams, StreamKey};

use crate::config::RunConfig;
use crate::output;
use crate::CliError;

type Res = Result<(), CliError>;

fn req<T: Clone>(v: &Option<T>, name: &str) -> Result<T, CliError> {
    RunConfig::require(v, name)
}

fn key(cfg: &RunConfig, purpose: &str) -> StreamKey {
    StreamKey::from_seed(cfg.seed()).tag(purpose)
}

pub const FORMULAS: &[&str] = &[
    "sigma",
    "partition_v",
    "log_partition_v",
    "mean_n",
    "laplace_n",
    "geom_terminal",
    "geom_window",
    "geom_at",
    "first_branch_cdf",
    "no_branch_mass",
    "first_branch_cdf_limit",
    "limit_first_cdf",
    "g",
    "big_g",
    "tau_delta",
    "t_big_delta",
    "death_v",
    "death_mean_n",
    "death_w",
    "death_u",
];

fn formula_value(cfg: &RunConfig, formula: &str) -> Result<f64, CliError> {
    let sigma = || cfg.sigma_value();
    let t = || req(&cfg.t, "t");
    let p0 = || Ok::<f64, CliError>(cfg.p0.unwrap_or(0.0));
    Ok(match formula {
        "sigma" => sigma()?,
        "partition_v" => analytics::partition_v(sigma()?, t()?)?,
        "log_partition_v" => analytics::log_partition_v(sigma()?, t()?)?,
        "mean_n" => analytics::mean_particles(sigma()?, t()?)?,
        "laplace_n" => analytics::laplace_n(sigma()?, t()?, req(&cfg.s, "s")?, req(&cfg.gamma, "gamma")?)?,
        "geom_terminal" => analytics::geom_param_terminal(sigma()?, t()?)?,
        "geom_window" => analytics::geom_param_window(sigma()?, req(&cfg.rho, "rho")?)?,
        "geom_at" => analytics::geom_param_at(sigma()?, t()?, req(&cfg.s, "s")?)?,
        "first_branch_cdf" => analytics::first_branch_cdf(sigma()?, t()?, req(&cfg.r, "r")?)?,
        "no_branch_mass" => analytics::no_branch_mass(sigma()?, t()?)?,
        "first_branch_cdf_limit" => analytics::first_branch_cdf_limit(sigma()?, req(&cfg.r, "r")?)?,
        "limit_first_cdf" => analytics::limit_first_cdf(req(&cfg.rho, "rho")?),
        "g" => fkpp::g_tilted(sigma()?, t()?)?,
        "big_g" => fkpp::big_g_tilted(sigma()?, t()?)?,
        "tau_delta" => fkpp::tau_delta(sigma()?, req(&cfg.delta, "delta")?)?,
        "t_big_delta" => fkpp::t_big_delta(sigma()?, req(&cfg.big_delta, "big_delta")?)?,
        "death_v" => deathmodel::partition_v_death(sigma()?, p0()?, t()?)?,
        "death_mean_n" => deathmodel::mean_n_death(sigma()?, p0()?, t()?)?,
        "death_w" => deathmodel::generating_w(sigma()?, p0()?, t()?, req(&cfg.gamma, "gamma")?)?,
        "death_u" => deathmodel::u_sigma_direct(sigma()?, p0()?, t()?)?,
        other => {
            return Err(CliError::Usage(format!(
                "unknown formula '{other}'; one of {}",
                FORMULAS.join(", ")
            )));
        }
    })
}

pub fn analytic_eval(cfg: &RunConfig) -> Res {
    let formula = req(&cfg.formula, "formula")?;
    let value = formula_value(cfg, &formula)?;
    println!("{value:?}");
    Ok(())
}

pub fn sample_tree(cfg: &RunConfig) -> Res {
    let model = cfg.model.clone().unwrap_or_else(|| "simplified".into());
    let t = req(&cfg.t, "t")?;
    let n = cfg.n_samples.unwrap_or(1);
    let seed = cfg.seed();
    let k = key(cfg, "sample-tree");
    let records: Result<Vec<_>, CliError> = match model.as_str() {
        "gw" => {
            if cfg.sigma.is_some() || cfg.lambda.is_some() {
                return Err(CliError::Usage("the gw model takes p0, not sigma".into()));
            }
            let p0 = cfg.p0.unwrap_or(0.0);
            let params = json!({ "model": "gw", "p0": p0, "t": t });
            (0..n as u64)
                .into_par_iter()
                .map(|i| Ok(qmgw::sample_gw_tree(p0, t, k.index(i))?.to_record(seed, params.clone())))
                .collect()
        }
        _ => {
            if cfg.p0.is_some_and(|p| p != 0.0) {
                return Err(CliError::Usage(
                    "the simplified model has no deaths; use --model gw for p0".into(),
                ));
            }
            let sigma = cfg.sigma_value()?;
            let params = json!({ "model": "simplified", "sigma": sigma, "t": t });
            (0..n as u64)
                .into_par_iter()
                .map(|i| Ok(qmgw::sample_simplified_tree(sigma, t, k.index(i))?.to_record(seed, params.clone())))
                .collect()
        }
    };
    output::emit(cfg, &output::jsonl_bytes(&records?)?)
}

pub fn sample_limit(cfg: &RunConfig) -> Res {
    let horizon = cfg.delta_horizon.unwrap_or(0.0);
    let n = cfg.n_samples.unwrap_or(1);
    let seed = cfg.seed();
    let k = key(cfg, "sample-limit");
    let params = json!({ "model": "limit", "delta_horizon": horizon });
    let records: Result<Vec<_>, CliError> = (0..n as u64)
        .into_par_iter()
        .map(|i| Ok(qmgw::sample_limiting_tree(horizon, k.index(i))?.to_record(seed, params.clone())))
        .collect();
    output::emit(cfg, &output::jsonl_bytes(&records?)?)
}

fn model_params(cfg: &RunConfig) -> Result<ModelParams, CliError> {
    let t = req(&cfg.t, "t")?;
    let p0 = cfg.p0.unwrap_or(0.0);
    Ok(match (cfg.lambda, cfg.epsilon) {
        (Some(l), Some(e)) => ModelParams::new(l, e, p0, t)?,
        _ => ModelParams::from_sigma(cfg.sigma_value()?, p0, t)?,
    })
}

pub fn simulate_full(cfg: &RunConfig) -> Res {
    let params = model_params(cfg)?;
    let dt = cfg.dt.unwrap_or(1e-2);
    let n = cfg.n_samples.unwrap_or(1000);
    let summaries = fullbbm::simulate_summaries(&params, n, dt, key(cfg, "simulate-full"))?;
    let seed = cfg.seed();
    let rows: Vec<_> = summaries.iter().map(|s| s.row(seed, &params, dt)).collect();
    output::emit(cfg, &output::csv_bytes(&rows)?)?;
    let mean = fullbbm::weighted_mean(&summaries, |s| s.n_final as f64)?;
    eprintln!(
        "weighted mean n(t) = {} (ess {:.1})",
        mean.value, mean.effective_sample_size
    );
    Ok(())
}

#[derive(Serialize)]
struct SnapshotRow {
    t: f64,
    x: f64,
    w: f64,
}

#[derive(Serialize)]
struct RegimeTimes {
    sigma: f64,
    delta: f64,
    big_delta: f64,
    tau_delta: f64,
    t_big_delta: f64,
    note: String,
}

pub fn fkpp_solve(cfg: &RunConfig) -> Res {
    let sigma = cfg.sigma_value().unwrap_or(1.0);
    let delta = cfg.delta.unwrap_or(0.5);
    let big_delta = cfg.big_delta.unwrap_or(0.1);
    let regime_times = if sigma < 1.0 {
        fkpp::regime_snapshot_times(sigma, delta, big_delta, f64::INFINITY)
    } else {
        Err(repulse_bbm::Error::Domain("sigma = 1".into()))
    };
    let t_end = match (cfg.t_end, &regime_times) {
        (Some(t), _) => t,
        (None, Ok(_)) => fkpp::t_big_delta(sigma, big_delta)? + 5.0,
        (None, Err(_)) => return Err(CliError::Usage("missing --t-end".into())),
    };
    let dx = cfg.dx.unwrap_or(0.05);
    // room for the diffusive spread once the reaction has switched off
    let margin = 30.0 + 5.0 * t_end.sqrt();
    let x_min = cfg.x_min.unwrap_or(-margin);
    let x_max = cfg.x_max.unwrap_or(std::f64::consts::SQRT_2 * t_end + margin);
    let mut grid = fkpp::GridSpec::new(x_min, x_max, dx);
    if let Some(dt) = cfg.dt {
        grid = grid.with_dt(dt);
    }
    let requested = cfg.snapshots.clone().map(|l| l.0).unwrap_or_default();
    let report_times = if sigma < 1.0 {
        fkpp::regime_snapshot_times(sigma, delta, big_delta, t_end).ok()
    } else {
        None
    };
    let mut times: Vec<f64> = requested
        .iter()
        .copied()
        .chain(report_times.iter().flatten().copied())
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let reaction = fkpp::ReactionProfile::tilted(sigma);
    let snaps = fkpp::solve_tdfkpp(&reaction, t_end, &grid, &times)?;

    let wanted = |t: f64| t == t_end || requested.contains(&t);
    let mut rows = Vec::new();
    for s in snaps.iter().filter(|s| wanted(s.time)) {
        for (j, &w) in s.values.iter().enumerate() {
            rows.push(SnapshotRow {
                t: s.time,
                x: s.x(j),
                w,
            });
        }
    }
    let out_dir = req(&cfg.out, "out")?;
    output::write_atomic(&out_dir.join("snapshots.csv"), cfg, &output::csv_bytes(&rows)?)?;
    output::write_atomic(&out_dir.join("config.txt"), cfg, cfg.render().as_bytes())?;

    if sigma < 1.0 {
        let body = match report_times {
            Some(rt) => {
                let tau = rt[0];
                let standard = fkpp::solve_tdfkpp(&fkpp::ReactionProfile::standard(), tau, &grid, &[])?;
                let centre =
                    standard.last().expect("t_end snapshot").front(0.5).ok_or_else(|| {
                        repulse_bbm::Error::Numeric("standard solution has no front at level 1/2".into())
                    })?;
                let wave = fkpp::standard_wave(fkpp::WAVE_AT_TIME, 0.05)?;
                let err = fkpp::refinement_error(&reaction, true, t_end, &grid, fkpp::SolveOptions::default())?;
                let report = fkpp::regime_report(sigma, delta, big_delta, &snaps, &wave, centre, 10.0 * err)?;
                for c in &report.checks {
                    eprintln!(
                        "{} {}: violation {:.3e}, tolerance {:.3e}",
                        if c.pass { "ok  " } else { "FAIL" },
                        c.regime,
                        c.max_violation,
                        c.tolerance
                    );
                }
                output::jsonl_bytes(&[report])?
            }
            None => {
                let note = match fkpp::regime_snapshot_times(sigma, delta, big_delta, t_end) {
                    Err(e) => format!("no regime checks: {e}"),
                    Ok(_) => String::new(),
                };
                eprintln!("{note}");
                output::jsonl_bytes(&[RegimeTimes {
                    sigma,
                    delta,
                    big_delta,
                    tau_delta: fkpp::tau_delta(sigma, delta)?,
                    t_big_delta: fkpp::t_big_delta(sigma, big_delta)?,
                    note,
                }])?
            }
        };
        output::write_atomic(&out_dir.join("regime.jsonl"), cfg, &body)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DeathReport {
    sigma: f64,
    p0: f64,
    t: f64,
    fixpoints: deathmodel::DeathFixpoints,
    partition_v: f64,
    mean_n: f64,
    u_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    generating_w: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    monte_carlo: Option<deathmodel::DeathSample>,
}

pub fn death(cfg: &RunConfig) -> Res {
    let sigma = cfg.sigma_value()?;
    let p0 = req(&cfg.p0, "p0")?;
    let t = req(&cfg.t, "t")?;
    let report = DeathReport {
        sigma,
        p0,
        t,
        fixpoints: deathmodel::fixpoints(sigma, p0)?,
        partition_v: deathmodel::partition_v_death(sigma, p0, t)?,
        mean_n: deathmodel::mean_n_death(sigma, p0, t)?,
        u_sigma: deathmodel::u_sigma_direct(sigma, p0, t)?,
        generating_w: cfg
            .gamma
            .map(|g| deathmodel::generating_w(sigma, p0, t, g))
            .transpose()?,
        monte_carlo: cfg
            .n_samples
            .map(|n| deathmodel::sample_weighted(sigma, p0, t, n, key(cfg, "death")))
            .transpose()?,
    };
    output::emit(cfg, &output::jsonl_bytes(&[report])?)
}

pub fn validate(cfg: &RunConfig, quick: bool) -> Res {
    let suite_cfg = SuiteConfig {
        seed: cfg.seed(),
        quick,
    };
    let ids: Vec<u32> = match &cfg.only {
        Some(list) => {
            for id in &list.0 {
                if !suite::CRITERIA.iter().any(|(c, _)| c == id) {
                    return Err(CliError::Usage(format!("no criterion {id}")));
                }
            }
            list.0.clone()
        }
        None => suite::CRITERIA.iter().map(|(id, _)| *id).collect(),
    };
    let mut results = Vec::new();
    for id in ids {
        let r = suite::run_criterion(id, &suite_cfg)?;
        println!("{}", r.line());
        results.push(r);
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.pass).map(|r| r.id.to_string()).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if let Some(path) = &cfg.out {
        output::write_atomic(path, cfg, &output::jsonl_bytes(&results)?)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("criteria {} failed", failed.join(", "))))
    }
}
