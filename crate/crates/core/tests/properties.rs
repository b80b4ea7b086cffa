//! Randomized invariants across modules.

use ddmpc::analysis::{audit_run, certificate_margins, sampling_center, CheckStatus};
use ddmpc::consistency::{ConsistencySet, MultiplierMode, MEMBER_TOL};
use ddmpc::controller::{run_closed_loop, Mode, MpcConfig, Scheme};
use ddmpc::numerics::{min_eigenvalue, weighted_norm_sq, SymMatrix};
use ddmpc::plant::{builtin_scenario, simulate, uniform_inputs, NoiseDistribution, NoiseSampler, Scenario, ScenarioName};
use ddmpc::sdp::{assemble_adaptive, assemble_robust, extract_certificate, InteriorPointSolver, SdpSolver, SolveStatus, SolverOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn scalar() -> Scenario {
    builtin_scenario(ScenarioName::Scalar)
}

fn scalar_set(seed: u64, mode: MultiplierMode) -> ConsistencySet {
    let s = scalar();
    let data = s.collect_offline(s.t_f, seed, NoiseDistribution::UniformBall).unwrap();
    ConsistencySet::build_offline(&data, mode).unwrap()
}

fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn mode() -> impl Strategy<Value = MultiplierMode> {
    prop_oneof![Just(MultiplierMode::Full), Just(MultiplierMode::Common)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn online_data_never_readmits_models(
        seed in 0u64..1000,
        pushes in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -1.0f64..1.0), 1..12),
        queries in proptest::collection::vec((0.9f64..1.3, 0.3f64..0.7), 1..20),
    ) {
        let s = scalar();
        let mut set = scalar_set(seed, MultiplierMode::Full);
        let sigma = 1.0 / s.plant.g.as_matrix()[(0, 0)].sqrt();
        for (x, u, w) in pushes {
            let xn = 1.1 * x + 0.5 * u + sigma * w;
            let next = set.push_online(&DVector::from_element(1, x), &DVector::from_element(1, u), &DVector::from_element(1, xn)).unwrap();
            for &(a, b) in &queries {
                let before = set.is_member(&m1(a), &m1(b), MEMBER_TOL).unwrap();
                let after = next.is_member(&m1(a), &m1(b), MEMBER_TOL).unwrap();
                prop_assert!(before || !after, "({a}, {b}) re-admitted");
            }
            prop_assert!(next.is_member(&s.plant.a, &s.plant.b, MEMBER_TOL).unwrap(), "true model excluded");
            set = next;
        }
    }

    #[test]
    fn simulation_residuals_recover_noise(seed in any::<u64>(), t in 1usize..40, x0 in -2.0f64..2.0) {
        let s = builtin_scenario(ScenarioName::Suspension);
        let inputs = uniform_inputs(1, t, -5.0, 5.0, seed);
        let x0 = DVector::from_element(4, x0);
        let run = |seed| {
            let mut noise = NoiseSampler::new(s.plant.g.clone(), seed, NoiseDistribution::UniformBall).unwrap();
            simulate(&s.plant, &x0, &inputs, &mut noise).unwrap()
        };
        let rec = run(seed);
        let w = rec.noise.clone().expect("simulated records keep the noise");
        for i in 0..t {
            let (x, u, xn) = rec.triple(i);
            let r = xn - &s.plant.a * x - &s.plant.b * u;
            prop_assert!((r - w.column(i)).amax() <= 1e-12);
            prop_assert!(weighted_norm_sq(&w.column(i).into_owned(), &s.plant.g).unwrap() <= 1.0 + 1e-12);
        }
        let again = run(seed);
        prop_assert_eq!(rec.x, again.x);
        prop_assert_eq!(rec.u, again.u);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimal_certificates_satisfy_stability_inequalities(seed in 0u64..500, x in -1.5f64..1.5, mode in mode()) {
        let s = scalar();
        let set = scalar_set(seed, mode);
        let x_t = DVector::from_element(1, x);
        let problem = assemble_robust(&set, &x_t, &s.weights, &s.constraints, s.c).unwrap();
        let opts = SolverOptions::default();
        let sol = InteriorPointSolver::new().solve(&problem, &opts).unwrap();
        prop_assume!(sol.status == SolveStatus::Optimal);
        let cert = extract_certificate(&sol).unwrap();
        prop_assert!(cert.value(&x_t).unwrap() <= cert.gamma + 1e-6);

        let center = sampling_center(&set).unwrap();
        let models = set.sample_members((&center.0, &center.1), 40, seed).unwrap();
        let m = certificate_margins(&cert, &models, &s.weights, s.c).unwrap();
        prop_assert!(m.decrease <= -opts.strict_margin / 2.0, "decrease {}", m.decrease);
        prop_assert!(m.p_minus_q >= -1e-8);
        prop_assert!(m.c_minus_p >= -1e-8);

        // ellipsoid constraint certificates in H = γP⁻¹, L = FH
        let h = cert.p.inverse().unwrap().scale(cert.gamma);
        let l = &cert.f * h.as_matrix();
        let input = h.as_matrix() - l.transpose() * s.constraints.s_u.as_matrix() * &l;
        prop_assert!(min_eigenvalue(&SymMatrix::new(input).unwrap()).unwrap() >= -1e-8);
        let state = h.as_matrix() - h.as_matrix() * s.constraints.s_x.as_matrix() * h.as_matrix();
        prop_assert!(min_eigenvalue(&SymMatrix::new(state).unwrap()).unwrap() >= -1e-8);
    }

    #[test]
    fn adaptive_bound_never_exceeds_robust(
        seed in 0u64..500,
        x in -1.2f64..1.2,
        pushes in proptest::collection::vec((-1.0f64..1.0, -2.0f64..2.0, -1.0f64..1.0), 1..6),
    ) {
        let s = scalar();
        let offline = scalar_set(seed, MultiplierMode::Full);
        let sigma = 1.0 / s.plant.g.as_matrix()[(0, 0)].sqrt();
        let mut set = offline.clone();
        for (xi, ui, w) in pushes {
            let xn = 1.1 * xi + 0.5 * ui + sigma * w;
            set = set.push_online(&DVector::from_element(1, xi), &DVector::from_element(1, ui), &DVector::from_element(1, xn)).unwrap();
        }
        let x_t = DVector::from_element(1, x);
        let opts = SolverOptions::default();
        let mut solver = InteriorPointSolver::new();
        let robust = solver.solve(&assemble_robust(&offline, &x_t, &s.weights, &s.constraints, s.c).unwrap(), &opts).unwrap();
        let adaptive = solver.solve(&assemble_adaptive(&set, &x_t, &s.weights, &s.constraints, s.c).unwrap(), &opts).unwrap();
        prop_assume!(robust.status == SolveStatus::Optimal);
        prop_assert_eq!(adaptive.status, SolveStatus::Optimal);
        let (gr, ga) = (robust.gamma().unwrap(), adaptive.gamma().unwrap());
        // both optima are only known to the solver's gap tolerance
        prop_assert!(ga <= gr + opts.rel_gap * gr + opts.abs_gap, "adaptive {ga} > robust {gr}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scalar_closed_loops_keep_their_guarantees(seed in 0u64..10_000, x0 in -1.0f64..1.0, scheme_ix in 0usize..3) {
        let s = scalar();
        let scheme = Scheme::ALL[scheme_ix];
        let cfg = MpcConfig::new(s.c, s.weights.clone(), s.constraints.clone(), s.plant.g.clone(), MultiplierMode::Common).unwrap();
        let set = scalar_set(seed, MultiplierMode::Common);
        let mut noise = NoiseSampler::new(s.plant.g.clone(), seed ^ 0x5eed, NoiseDistribution::UniformBall).unwrap();
        let log = match run_closed_loop(&s.plant, set, &cfg, scheme, &DVector::from_element(1, x0), 25, &mut noise) {
            Ok(log) => log,
            Err(ddmpc::Error::InitialInfeasible { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let first_static = log.rows.iter().position(|r| r.mode == Mode::Static).unwrap_or(log.len());
        prop_assert!(log.rows[first_static..].iter().all(|r| r.mode == Mode::Static));
        let report = audit_run(&log, &cfg).unwrap();
        let failed: Vec<_> = report.checks.iter().filter(|c| c.status == CheckStatus::Fail).map(|c| (&c.name, c.margin)).collect();
        prop_assert!(failed.is_empty(), "{failed:?}");
    }
}
