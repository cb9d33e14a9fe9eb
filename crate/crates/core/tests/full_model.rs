use repulse_bbm::fullbbm::{self, BbmOptions, BbmRealization};
use repulse_bbm::stats::{Estimate, WeightedSamples};
use repulse_bbm::{ModelParams, StreamKey};

fn recorded(params: &ModelParams, dt: f64, key: StreamKey) -> BbmRealization {
    let opts = BbmOptions { record_trajectories: true, ..BbmOptions::default() };
    fullbbm::simulate_bbm_with(params, dt, key, opts).unwrap()
}

fn brute_penalty(r: &BbmRealization, eps: f64) -> f64 {
    let traj = r.trajectories.as_ref().unwrap();
    let mut pairs = 0u64;
    for step in &traj[..traj.len() - 1] {
        for a in step {
            for b in step {
                if a.id != b.id && (a.position - b.position).abs() <= eps {
                    pairs += 1;
                }
            }
        }
    }
    r.dt * pairs as f64
}

#[test]
fn mean_count_is_exponential_without_penalty() {
    let params = ModelParams::new(0.0, 1.0, 0.0, 3.0).unwrap();
    let key = StreamKey::from_seed(1);
    let xs: Vec<f64> = (0..10_000u64)
        .map(|i| fullbbm::simulate_bbm(&params, 1e-2, key.index(i)).unwrap().n_final() as f64)
        .collect();
    assert!(Estimate::mean_of(&xs).within(3f64.exp(), 3.0));
}

#[test]
fn doob_bound_for_the_count_martingale() {
    let params = ModelParams::new(0.0, 1.0, 0.0, 3.0).unwrap();
    let dt = 1e-2;
    let key = StreamKey::from_seed(2);
    let n = 5000;
    let sups: Vec<f64> = (0..n as u64)
        .map(|i| {
            let r = fullbbm::simulate_bbm(&params, dt, key.index(i)).unwrap();
            r.counts.iter().enumerate().map(|(m, &c)| c as f64 * (-r.time(m)).exp()).fold(0.0, f64::max)
        })
        .collect();
    for &c in &[1.5, 2.0, 4.0] {
        let p = Estimate::proportion(sups.iter().filter(|&&s| s > c).count(), n);
        assert!(p.value <= 1.0 / c + 3.0 * p.std_error, "c {c}: {}", p.value);
    }
}

#[test]
fn penalty_matches_brute_force_and_is_invariant() {
    let params = ModelParams::new(0.1, 0.7, 0.0, 2.5).unwrap();
    let key = StreamKey::from_seed(3);
    for i in 0..20 {
        let mut r = recorded(&params, 1e-2, key.index(i));
        let base = fullbbm::penalty_of(&r, 0.7).unwrap();
        assert_eq!(base, r.penalty_i);
        assert!((base - brute_penalty(&r, 0.7)).abs() < 1e-9);
        // relabel and translate every particle
        for step in r.trajectories.as_mut().unwrap() {
            step.reverse();
            for p in step.iter_mut() {
                p.id = p.id.wrapping_mul(7919) ^ 0xABCD;
                p.position += 3.25;
            }
        }
        assert!((fullbbm::penalty_of(&r, 0.7).unwrap() - base).abs() < 1e-9);
    }
}

#[test]
fn penalty_is_monotone_in_radius() {
    let params = ModelParams::new(0.1, 0.5, 0.0, 3.0).unwrap();
    let key = StreamKey::from_seed(4);
    for i in 0..20 {
        let r = recorded(&params, 1e-2, key.index(i));
        let mut last = 0.0;
        for &eps in &[0.0, 0.1, 0.3, 0.5, 1.0, 2.0] {
            let p = fullbbm::penalty_of(&r, eps).unwrap();
            assert!(p >= last);
            last = p;
        }
    }
}

#[test]
fn riemann_sums_converge_along_a_fixed_path() {
    // the same fine path read at steps 8h, 4h, 2h, h
    let params = ModelParams::new(0.1, 0.5, 0.0, 2.0).unwrap();
    let h = 1e-3;
    let key = StreamKey::from_seed(5);
    let mut diffs = [0.0f64; 3];
    for i in 0..30 {
        let fine = recorded(&params, h, key.index(i));
        let traj = fine.trajectories.as_ref().unwrap();
        let at = |k: usize| {
            let mut r = fine.clone();
            r.trajectories = Some(traj.iter().step_by(k).cloned().collect());
            r.dt = h * k as f64;
            r.n_steps = fine.n_steps / k;
            fullbbm::penalty_of(&r, 0.5).unwrap()
        };
        let vals = [at(8), at(4), at(2), at(1)];
        for j in 0..3 {
            diffs[j] += (vals[j] - vals[j + 1]).abs();
        }
    }
    assert!(diffs[0] > diffs[1] && diffs[1] > diffs[2], "{diffs:?}");
    assert!(diffs[0] / diffs[2] > 2.0, "{diffs:?}");
}

#[test]
fn penalty_dominates_sibling_separation() {
    let params = ModelParams::new(0.1, 0.5, 0.0, 3.0).unwrap();
    let key = StreamKey::from_seed(6);
    for i in 0..200 {
        let r = fullbbm::simulate_bbm(&params, 1e-3, key.index(i)).unwrap();
        let sep: f64 = r.sibling_separation.iter().sum();
        assert!(r.penalty_i >= sep - 1e-12, "{} < {sep}", r.penalty_i);
        assert_eq!(r.sibling_separation.len(), r.branch_events.len());
    }
}

#[test]
fn hand_built_pair_counts_twice() {
    // two particles at distance 0.2 for 50 steps of 0.01, then far apart
    let params = ModelParams::new(0.1, 0.5, 0.0, 1.0).unwrap();
    let mut r = recorded(&params, 1e-2, StreamKey::from_seed(7));
    let steps = r.n_steps + 1;
    let traj: Vec<Vec<fullbbm::ParticleState>> = (0..steps)
        .map(|m| {
            let gap = if m < 50 { 0.2 } else { 3.0 };
            vec![
                fullbbm::ParticleState { id: 0, parent: None, position: 0.0 },
                fullbbm::ParticleState { id: 1, parent: Some(0), position: gap },
            ]
        })
        .collect();
    r.trajectories = Some(traj);
    let d = 50.0 * r.dt;
    assert!((fullbbm::penalty_of(&r, 0.5).unwrap() - 2.0 * d).abs() < 1e-12);
}

#[test]
fn repulsion_delays_the_first_branch() {
    let t = 4.0;
    let tilted = ModelParams::new(0.5, 1.0, 0.0, t).unwrap();
    let plain = ModelParams::new(0.0, 1.0, 0.0, t).unwrap();
    let n = 4000;
    let dt = 2e-3;
    let a = fullbbm::simulate_summaries(&tilted, n, dt, StreamKey::from_seed(8)).unwrap();
    let b = fullbbm::simulate_summaries(&plain, n, dt, StreamKey::from_seed(9)).unwrap();
    for &q in &[0.25, 0.5, 1.0, 2.0, 3.0] {
        let ind = |s: &fullbbm::RealizationSummary| if s.tau1.is_some_and(|x| x <= q) { 1.0 } else { 0.0 };
        let ta = fullbbm::weighted_mean(&a, ind).unwrap();
        let tb = fullbbm::weighted_mean(&b, ind).unwrap();
        let se = (ta.std_error.powi(2) + tb.std_error.powi(2)).sqrt();
        assert!(ta.value <= tb.value + 3.0 * se, "q {q}: {} > {}", ta.value, tb.value);
    }
}

#[test]
fn jensen_direction_for_the_partition_function() {
    let params = ModelParams::new(0.05, 0.5, 0.0, 3.0).unwrap();
    let lambda = params.lambda();
    let eps2 = 0.25;
    let summaries = fullbbm::simulate_summaries(&params, 4000, 2e-3, StreamKey::from_seed(10)).unwrap();
    let mut lhs = Vec::new();
    let mut rhs = Vec::new();
    for s in &summaries {
        lhs.push(if s.truncated { 0.0 } else { (-lambda * s.penalty_i).exp() });
        rhs.push((-lambda * eps2 * (s.n_final as f64 - 1.0)).exp());
    }
    let a = Estimate::mean_of(&lhs);
    let b = Estimate::mean_of(&rhs);
    assert!(a.value <= b.value + 3.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt());
}

#[test]
fn shift_law_bound_holds() {
    let params = ModelParams::new(0.05, 1.0, 0.0, 8.0).unwrap();
    let lambda = params.lambda();
    let t = params.horizon();
    let summaries = fullbbm::simulate_summaries(&params, 500, 2e-3, StreamKey::from_seed(12)).unwrap();
    for &rho in &[2.0, 3.0] {
        let x = t + (lambda.powf(1.5)).ln() - rho;
        let est = fullbbm::weighted_mean(&summaries, |s| if s.tau1.is_some_and(|v| v <= x) { 1.0 } else { 0.0 }).unwrap();
        let bound = fullbbm::shift_law_bound(&params, rho);
        assert!(est.value - 3.0 * est.std_error <= bound, "rho {rho}: {} > {bound}", est.value);
    }
}

#[test]
fn exit_time_oracles() {
    let taus = fullbbm::tau_epsilon_samples(0.5, 1e-4, 20_000, StreamKey::from_seed(13)).unwrap();
    assert!(Estimate::mean_of(&taus).within(0.25, 3.0));
    let lap: Vec<f64> = taus.iter().map(|t| (-t).exp()).collect();
    let sech = 2.0 / ((0.5 * 2f64.sqrt()).exp() + (-0.5 * 2f64.sqrt()).exp());
    assert!(Estimate::mean_of(&lap).within(sech, 3.0));
}

#[test]
fn weights_reduce_in_a_fixed_order() {
    // same summaries, same estimate, regardless of how they were produced
    let params = ModelParams::new(0.2, 0.5, 0.0, 2.0).unwrap();
    let a = fullbbm::simulate_summaries(&params, 300, 1e-2, StreamKey::from_seed(14)).unwrap();
    let b = fullbbm::simulate_summaries(&params, 300, 1e-2, StreamKey::from_seed(14)).unwrap();
    assert_eq!(a, b);
    let mut w = WeightedSamples::new();
    for s in &a {
        w.push(s.log_weight, s.n_final as f64);
    }
    let e1 = w.estimate().unwrap();
    let e2 = fullbbm::weighted_mean(&b, |s| s.n_final as f64).unwrap();
    assert_eq!(e1, e2);
}
