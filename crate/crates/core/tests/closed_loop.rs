use ddmpc::analysis::{audit_run, closed_loop_metrics, CheckStatus};
use ddmpc::consistency::{ConsistencySet, MultiplierMode};
use ddmpc::controller::{run_closed_loop, Mode, MpcConfig, Scheme};
use ddmpc::plant::{builtin_scenario, NoiseDistribution, NoiseSampler, ScenarioName};

#[test]
fn suspension_at_large_c_freezes_at_start_and_stays_safe() {
    let s = builtin_scenario(ScenarioName::Suspension);
    let cfg = MpcConfig::new(1e8, s.weights.clone(), s.constraints.clone(), s.plant.g.clone(), MultiplierMode::Common).unwrap();
    let record = s.collect_offline(s.t_f, 7, NoiseDistribution::UniformBall).unwrap();
    let set = ConsistencySet::build_offline(&record, MultiplierMode::Common).unwrap();
    let mut noise = NoiseSampler::new(s.plant.g.clone(), 8, NoiseDistribution::UniformBall).unwrap();
    let log = run_closed_loop(&s.plant, set, &cfg, Scheme::Robust, &s.x0, s.steps, &mut noise).unwrap();

    assert_eq!(log.len(), 150);
    // γ* at x0 is far below θ = c²/(λ_min(Q)λ_min(G)), so the first certificate is frozen
    let theta = cfg.rpi_threshold().unwrap();
    assert!(log.rows[0].gamma.unwrap() < theta);
    assert!(log.rows.iter().all(|r| r.mode == Mode::Static));
    assert_eq!(log.rpi_entry_step(), Some(0));
    let frozen = log.frozen.as_ref().unwrap();
    assert_eq!(frozen, log.certificates[0].as_ref().unwrap());

    let report = audit_run(&log, &cfg).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    assert!(report.checks.iter().all(|c| c.status != CheckStatus::Fail));
    let m = closed_loop_metrics(&log).unwrap();
    assert!(m.worst_margin >= -1e-6);
    // the state settles: the last 50 steps cost far less than the first 50
    let head: f64 = log.rows[..50].iter().map(|r| r.stage_cost).sum();
    let tail: f64 = log.rows[100..].iter().map(|r| r.stage_cost).sum();
    assert!(tail < 0.1 * head, "head {head}, tail {tail}");
}

#[test]
fn suspension_below_riccati_bound_is_initially_infeasible() {
    let s = builtin_scenario(ScenarioName::Suspension);
    for c in [1e2, 5e4, 5e5] {
        let run = || {
            // c ≤ λ_min(Q) is already rejected when the configuration is built
            let cfg = MpcConfig::new(c, s.weights.clone(), s.constraints.clone(), s.plant.g.clone(), MultiplierMode::Common)?;
            let record = s.collect_offline(s.t_f, 7, NoiseDistribution::UniformBall)?;
            let set = ConsistencySet::build_offline(&record, MultiplierMode::Common)?;
            let mut noise = NoiseSampler::new(s.plant.g.clone(), 8, NoiseDistribution::UniformBall)?;
            run_closed_loop(&s.plant, set, &cfg, Scheme::Robust, &s.x0, 5, &mut noise)
        };
        let err = run().unwrap_err();
        assert!(matches!(err, ddmpc::Error::InitialInfeasible { .. }), "c = {c}: {err}");
    }
}
