use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use locc_core::analysis;
use locc_core::engine::{
    branch_fidelities, classify_rounds, compose_merge, ledger, monotonicity_diagnostic, protocol_error_of,
    run_exhaustive, serialize_simultaneous, validate_program, Direction, RoundType,
};
use locc_core::model::{self, clifford_table, make_u_theta, CliffordCheck, GateSpec, Party, SystemLayout};
use locc_core::protocols::*;
use locc_core::qmath::{self, ProbabilityVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ab() -> SystemLayout {
    SystemLayout::of(&[("A", 2, Party::Alice), ("B", 2, Party::Bob)]).unwrap()
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[test]
fn p1_branch_probabilities_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for theta in grid(0.1, PI / 2.0, 10) {
        for alpha in grid(0.1, 1.4, 10) {
            let p1 = build_p1(theta, alpha).unwrap();
            let input = referee_purified_input(&ab(), 4, &mut rng).unwrap();
            let tree = run_exhaustive(&p1.program, &input).unwrap();
            let success: f64 = tree
                .leaves
                .iter()
                .filter(|l| l.outcome("p1.measure_b") == Some("success"))
                .map(|l| l.probability)
                .sum();
            let closed = analysis::success_prob(theta, alpha).unwrap();
            assert_abs_diff_eq!(success, closed, epsilon = 1e-10);
            assert_abs_diff_eq!(p1.success_prob, closed, epsilon = 1e-15);
            assert_abs_diff_eq!(tree.total_probability(), 1.0, epsilon = 1e-9);
        }
    }
}

#[test]
fn p1_branches_apply_u_theta_and_failure_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (theta, alpha) in [(0.3, 0.3f64.sqrt()), (0.4, 0.4f64.sqrt()), (1.2, 0.5), (PI / 2.0, 1.0)] {
        let p1 = build_p1(theta, alpha).unwrap();
        let magnitude = failure_angle(theta, alpha).unwrap();
        assert_abs_diff_eq!(p1.failure_angle.abs(), magnitude, epsilon = 1e-12);
        assert_abs_diff_eq!(
            ((p1.failure_angle.abs() / 2.0).tan()),
            (alpha / 2.0).tan().powi(2) / (theta / 2.0).tan(),
            epsilon = 1e-9
        );
        let success = make_u_theta(theta).unwrap();
        let failure = make_u_theta(p1.failure_angle).unwrap();
        for _ in 0..10 {
            let input = referee_purified_input(&ab(), 4, &mut rng).unwrap();
            let tree = run_exhaustive(&p1.program, &input).unwrap();
            let fs = branch_fidelities(&p1.program, &tree, &success, &input).unwrap();
            let ff = branch_fidelities(&p1.program, &tree, &failure, &input).unwrap();
            for (i, leaf) in tree.leaves.iter().enumerate() {
                match leaf.outcome("p1.measure_b") {
                    Some("success") => assert!(fs[i] >= 1.0 - 1e-10, "success fidelity {}", fs[i]),
                    Some("failure") => assert!(ff[i] >= 1.0 - 1e-10, "failure fidelity {}", ff[i]),
                    other => panic!("unexpected outcome {other:?}"),
                }
            }
        }
    }
}

#[test]
fn failure_angle_monotone_in_alpha() {
    for theta in [0.2, 0.8, 1.5] {
        let values: Vec<f64> = grid(0.05, 3.0, 60).iter().map(|&a| failure_angle(theta, a).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[1] > w[0]));
        assert!(values.iter().all(|&v| v > 0.0 && v < PI));
    }
}

#[test]
fn p1_alone_has_positive_error() {
    let theta = 0.3;
    let p1 = build_p1(theta, theta.sqrt()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let input = referee_purified_input(&ab(), 4, &mut rng).unwrap();
    let tree = run_exhaustive(&p1.program, &input).unwrap();
    let target = make_u_theta(theta).unwrap();
    let err = protocol_error_of(&p1.program, &tree, &target, &input).unwrap();
    let fids = branch_fidelities(&p1.program, &tree, &target, &input).unwrap();
    let mixture: f64 = tree.leaves.iter().zip(&fids).map(|(l, f)| l.probability * f).sum();
    assert_abs_diff_eq!(err, 1.0 - mixture, epsilon = 1e-14);
    assert!(err > 1e-6);
}

#[test]
fn p2_is_exact_with_one_ebit_and_two_rounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for phi in [0.0, 0.37, -1.1, 2.5] {
        let program = build_p2(phi).unwrap();
        assert!(validate_program(&program).is_ok());
        let target = controlled_phase_gate(phi).unwrap();
        for _ in 0..10 {
            let input = referee_purified_input(&ab(), 4, &mut rng).unwrap();
            let tree = run_exhaustive(&program, &input).unwrap();
            for f in branch_fidelities(&program, &tree, &target, &input).unwrap() {
                assert!(f >= 1.0 - 1e-10);
            }
            assert_abs_diff_eq!(ledger(&program, &tree).unwrap().expected_ebits, 1.0, epsilon = 1e-12);
            assert!(monotonicity_diagnostic(&program, &tree, &input).unwrap().holds);
        }
        let profile = classify_rounds(&program);
        assert_eq!(profile.round_count, 2);
        assert_eq!(profile.round_type, RoundType::B);
        assert_eq!(profile.directions, vec![Direction::BobToAlice, Direction::AliceToBob]);
    }
}

#[test]
fn dressing_turns_controlled_gate_into_u_phi() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let phi: f64 = rand::Rng::random_range(&mut rng, -3.0..3.0);
        let d = local_dressing(phi).unwrap();
        assert_eq!(d.v_a.labels(), ["A"]);
        assert_eq!(d.v_b.labels(), ["B"]);
        let built = qmath::tensor_product(d.v_a.matrix(), d.v_b.matrix())
            * controlled_phase_gate(d.internal_angle).unwrap().matrix();
        let target = make_u_theta(phi).unwrap();
        let residual = built - target.matrix() * qmath::c(d.phase.cos(), d.phase.sin());
        assert!(qmath::max_abs(&residual) <= 1e-10);

        let program = build_p2_dressed(phi).unwrap();
        let input = referee_purified_input(&ab(), 4, &mut rng).unwrap();
        let tree = run_exhaustive(&program, &input).unwrap();
        for f in branch_fidelities(&program, &tree, &target, &input).unwrap() {
            assert!(f >= 1.0 - 1e-10);
        }
    }
}

#[test]
fn composite_is_exact_with_expected_cost_and_three_rounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for theta in [0.1, 0.3, 0.7, PI / 2.0] {
        let program = build_composite(theta).unwrap();
        let target = make_u_theta(theta).unwrap();
        let point = analysis::e_bar(theta).unwrap();
        for _ in 0..50 {
            let input = referee_purified_input(&ab(), 4, &mut rng).unwrap();
            let tree = run_exhaustive(&program, &input).unwrap();
            for f in branch_fidelities(&program, &tree, &target, &input).unwrap() {
                assert!(f >= 1.0 - 1e-9, "θ = {theta}: fidelity {f}");
            }
            let l = ledger(&program, &tree).unwrap();
            assert_abs_diff_eq!(l.expected_ebits, point.e_bar, epsilon = 1e-9);
        }
        let profile = classify_rounds(&program);
        assert_eq!((profile.round_count, profile.round_type), (3, RoundType::C));
    }
}

#[test]
fn p1_then_p2_merges_to_three_rounds() {
    let p1 = build_p1(0.5, 0.5f64.sqrt()).unwrap().program;
    let mut p2 = build_p2(0.2).unwrap();
    p2.resources[0].name = "bell2".into();
    let merged = compose_merge(&p1, &p2).unwrap();
    let profile = classify_rounds(&merged);
    assert_eq!(
        profile.directions,
        vec![Direction::AliceToBob, Direction::BobToAlice, Direction::AliceToBob]
    );
    assert_eq!(profile.round_type, RoundType::C);
}

#[test]
fn dilution_composite_pipeline_is_three_rounds_and_exact() {
    let theta = 0.5;
    let program = build_composite_with_dilution(theta).unwrap();
    let profile = classify_rounds(&program);
    assert_eq!((profile.round_count, profile.round_type), (3, RoundType::C));
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = referee_purified_input(&ab(), 4, &mut rng).unwrap();
    let tree = run_exhaustive(&program, &input).unwrap();
    let target = make_u_theta(theta).unwrap();
    for f in branch_fidelities(&program, &tree, &target, &input).unwrap() {
        assert!(f >= 1.0 - 1e-9);
    }
    let l = ledger(&program, &tree).unwrap();
    assert_abs_diff_eq!(l.expected_ebits, 2.0 - analysis::p_theta(theta).unwrap(), epsilon = 1e-9);
}

fn clifford_program(u: &GateSpec) -> locc_core::ProtocolProgram {
    let CliffordCheck::Clifford(table) = clifford_table(u, model::CLIFFORD_TOL).unwrap() else {
        panic!("gate should be Clifford");
    };
    build_clifford_protocol(u, &table).unwrap()
}

fn check_clifford(u: GateSpec, referee: usize, seed: u64) {
    let d = u.bipartite_dim().unwrap();
    let program = clifford_program(&u);
    let layout = SystemLayout::of(&[("A", d, Party::Alice), ("B", d, Party::Bob)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = referee_purified_input(&layout, referee, &mut rng).unwrap();
    let tree = run_exhaustive(&program, &input).unwrap();
    assert_eq!(tree.leaves.len(), d.pow(4));
    for f in branch_fidelities(&program, &tree, &u, &input).unwrap() {
        assert!(f >= 1.0 - 1e-10, "fidelity {f}");
    }
    let k = model::resource_psi_u(&u).unwrap().entanglement_entropy(&["At", "a"]).unwrap();
    assert_abs_diff_eq!(ledger(&program, &tree).unwrap().expected_ebits, k, epsilon = 1e-10);
    assert!(monotonicity_diagnostic(&program, &tree, &input).unwrap().holds);

    let profile = classify_rounds(&program);
    assert_eq!((profile.round_count, profile.round_type), (1, RoundType::D));
    let serial = serialize_simultaneous(&program).unwrap();
    let sp = classify_rounds(&serial);
    assert_eq!((sp.round_count, sp.round_type), (2, RoundType::B));
    let tree2 = run_exhaustive(&serial, &input).unwrap();
    assert_eq!(tree.leaves.len(), tree2.leaves.len());
    for (a, b) in tree.leaves.iter().zip(&tree2.leaves) {
        assert_eq!(a.transcript, b.transcript);
        assert!((a.probability - b.probability).abs() <= 1e-10);
        let diff = a.state.amplitudes() - b.state.amplitudes();
        assert!(diff.iter().all(|z| z.norm() <= 1e-10));
    }
}

#[test]
fn clifford_protocol_cnot_cz_swap_identity() {
    let ab_gate = |m| GateSpec::new(m, ["A", "B"]).unwrap();
    check_clifford(ab_gate(model::cnot()), 4, 21);
    check_clifford(ab_gate(model::cz()), 4, 22);
    check_clifford(ab_gate(model::swap(2)), 4, 23);
    check_clifford(ab_gate(qmath::identity(4)), 4, 24);
}

#[test]
fn clifford_protocol_qutrit_sum() {
    check_clifford(GateSpec::new(model::sum_gate(3), ["A", "B"]).unwrap(), 3, 25);
}

#[test]
fn clifford_costs() {
    let cost = |m| {
        let u = GateSpec::new(m, ["A", "B"]).unwrap();
        model::resource_psi_u(&u).unwrap().entanglement_entropy(&["At", "a"]).unwrap()
    };
    assert_abs_diff_eq!(cost(model::cnot()), 1.0, epsilon = 1e-10);
    assert_abs_diff_eq!(cost(model::swap(2)), 2.0, epsilon = 1e-10);
    assert_abs_diff_eq!(cost(qmath::identity(4)), 0.0, epsilon = 1e-10);
}

#[test]
fn clifford_table_for_wrong_gate_rejected() {
    let cnot = GateSpec::new(model::cnot(), ["A", "B"]).unwrap();
    let CliffordCheck::Clifford(table) = clifford_table(&cnot, model::CLIFFORD_TOL).unwrap() else { panic!() };
    let cz = GateSpec::new(model::cz(), ["A", "B"]).unwrap();
    assert!(build_clifford_protocol(&cz, &table).is_err());
}

fn dilution_output(target: &ProbabilityVector, k: u32) -> Vec<Vec<f64>> {
    let program = nielsen_dilution(target, k).unwrap();
    let empty = locc_core::PureState::new(SystemLayout::empty(), locc_core::CVector::from_element(1, qmath::c(1.0, 0.0))).unwrap();
    let tree = run_exhaustive(&program, &empty).unwrap();
    assert!(monotonicity_diagnostic(&program, &tree, &empty).unwrap().holds);
    tree.leaves
        .iter()
        .map(|leaf| {
            let n = 1usize << k;
            // Schmidt weights in the computational basis, in register order
            (0..n).map(|i| leaf.state.amplitudes()[i * n + i].norm_sqr()).collect()
        })
        .collect()
}

#[test]
fn dilution_reaches_targets_exactly() {
    let cases: Vec<(Vec<f64>, u32)> = vec![
        (vec![0.4, 0.3, 0.2, 0.1], 2),
        (vec![0.1, 0.2, 0.3, 0.4], 2),
        (vec![0.7, 0.3], 1),
        (vec![1.0, 0.0], 1),
        (vec![0.5, 0.2, 0.1, 0.1, 0.05, 0.05], 3),
        (vec![0.3, 0.3, 0.2, 0.1, 0.05, 0.03, 0.01, 0.01], 3),
        (vec![0.6, 0.4], 3),
        (vec![0.5, 0.5], 1),
        (vec![0.25; 4], 2),
    ];
    for (t, k) in cases {
        let target = ProbabilityVector::new(t.clone()).unwrap();
        for weights in dilution_output(&target, k) {
            for (i, w) in weights.iter().enumerate() {
                let expect = t.get(i).copied().unwrap_or(0.0);
                assert_abs_diff_eq!(*w, expect, epsilon = 1e-9);
            }
            let h: f64 = ProbabilityVector::new(weights).unwrap().entropy();
            assert_abs_diff_eq!(h, target.entropy(), epsilon = 1e-9);
            assert!(h <= k as f64 + 1e-12);
        }
    }
}

#[test]
fn dilution_rejects_unreachable_targets() {
    let target = ProbabilityVector::new(vec![0.2; 5]).unwrap();
    assert!(matches!(nielsen_dilution(&target, 2), Err(locc_core::Error::Domain(_))));
    let target = ProbabilityVector::new(vec![0.2, 0.2, 0.2, 0.2, 0.2, 0.0, 0.0, 0.0]).unwrap();
    assert!(matches!(nielsen_dilution(&target, 2), Err(locc_core::Error::Domain(_))));
    let target = ProbabilityVector::new(vec![0.2; 5]).unwrap();
    assert!(nielsen_dilution(&target, 3).is_ok());
    let padded = ProbabilityVector::new(vec![0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
    assert!(nielsen_dilution(&padded, 1).is_ok());
}

#[test]
fn dilution_rounds_are_one_way() {
    let program = nielsen_dilution(&ProbabilityVector::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap(), 2).unwrap();
    let profile = classify_rounds(&program);
    assert_eq!((profile.round_count, profile.round_type), (1, RoundType::A));
    assert_eq!(profile.directions, vec![Direction::AliceToBob]);
}

fn n_shot_inputs(n: usize, referee: usize, rng: &mut ChaCha8Rng) -> locc_core::PureState {
    let mut systems: Vec<model::Subsystem> = (1..=n).map(|i| model::Subsystem::new(format!("A{i}"), 2, Party::Alice)).collect();
    systems.extend((1..=n).map(|i| model::Subsystem::new(format!("B{i}"), 2, Party::Bob)));
    referee_purified_input(&SystemLayout::new(systems).unwrap(), referee, rng).unwrap()
}

#[test]
fn n_shot_single_copy_reduces_to_composite() {
    let theta = 0.5;
    let plan = build_n_shot(theta, 1, 3.0).unwrap();
    let point = analysis::e_bar(theta).unwrap();
    assert_abs_diff_eq!(plan.budget, point.e_bar + 6.0, epsilon = 1e-12);
    let demo = plan.demo.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let input = n_shot_inputs(1, 4, &mut rng);
    let target = u_theta_tensor(theta, 1).unwrap();
    for program in [&demo.core, &demo.full] {
        let tree = run_exhaustive(program, &input).unwrap();
        assert!(protocol_error_of(program, &tree, &target, &input).unwrap() <= 1e-9);
    }
    let tree = run_exhaustive(&demo.core, &input).unwrap();
    assert_abs_diff_eq!(ledger(&demo.core, &tree).unwrap().expected_ebits, point.e_bar, epsilon = 1e-9);
}

#[test]
fn n_shot_budget_and_rounds() {
    for (theta, n, delta) in [(0.5, 3, 0.7), (0.3, 2, 1.2), (1.0, 40, 0.1)] {
        let plan = build_n_shot(theta, n, delta).unwrap();
        let nf = n as f64;
        assert_abs_diff_eq!(plan.budget, nf * (1.0 - plan.p_theta + plan.h_theta + 2.0 * delta), epsilon = 1e-12);
        assert_abs_diff_eq!(plan.dilution_ebits, nf * (plan.h_theta + delta), epsilon = 1e-12);
        if let Some(demo) = plan.demo {
            for program in [&demo.core, &demo.full] {
                let profile = classify_rounds(program);
                assert_eq!((profile.round_count, profile.round_type), (3, RoundType::C));
            }
        }
    }
}

#[test]
fn n_shot_three_copies_within_analytic_bound() {
    let (theta, n, delta) = (0.5, 3, 0.7);
    let plan = build_n_shot(theta, n, delta).unwrap();
    let bound = analysis::total_error(n, delta, theta).unwrap().total_error;
    let demo = plan.demo.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let input = n_shot_inputs(n, 8, &mut rng);
    let tree = run_exhaustive(&demo.core, &input).unwrap();
    assert_abs_diff_eq!(tree.total_probability(), 1.0, epsilon = 1e-9);
    let err = protocol_error_of(&demo.core, &tree, &u_theta_tensor(theta, n).unwrap(), &input).unwrap();
    assert!(err <= bound, "error {err} exceeds bound {bound}");
    assert!(err > 0.0);
}

#[test]
fn n_shot_two_copies_full_pipeline_within_bound() {
    let (theta, n, delta) = (0.5, 2, 1.2);
    let plan = build_n_shot(theta, n, delta).unwrap();
    let bound = analysis::total_error(n, delta, theta).unwrap().total_error;
    let demo = plan.demo.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let input = n_shot_inputs(n, 4, &mut rng);
    let tree = run_exhaustive(&demo.full, &input).unwrap();
    let err = protocol_error_of(&demo.full, &tree, &u_theta_tensor(theta, n).unwrap(), &input).unwrap();
    assert!(err <= bound, "error {err} exceeds bound {bound}");
    assert!(monotonicity_diagnostic(&demo.full, &tree, &input).unwrap().holds);
}

#[test]
fn n_shot_empty_typical_set_is_reported() {
    assert!(matches!(build_n_shot(0.5, 3, 0.2), Err(locc_core::Error::Domain(_))));
}

#[test]
fn n_shot_sampling_is_seeded() {
    let plan = build_n_shot(0.5, 2, 1.2).unwrap();
    let demo = plan.demo.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let input = n_shot_inputs(2, 2, &mut rng);
    let a = locc_core::engine::run_sampled(&demo.core, &input, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = locc_core::engine::run_sampled(&demo.core, &input, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a.transcript, b.transcript);
}

#[test]
fn every_builder_validates() {
    let cnot = GateSpec::new(model::cnot(), ["A", "B"]).unwrap();
    let programs = vec![
        build_p1(0.5, 0.6).unwrap().program,
        build_p2(0.4).unwrap(),
        build_p2_dressed(0.4).unwrap(),
        build_composite(0.9).unwrap(),
        build_composite_with_dilution(0.9).unwrap(),
        clifford_program(&cnot),
        nielsen_dilution(&ProbabilityVector::new(vec![0.5, 0.3, 0.2]).unwrap(), 2).unwrap(),
    ];
    for p in programs {
        assert!(validate_program(&p).is_ok(), "{} invalid", p.name);
    }
}

#[test]
fn p1_rejects_bad_angles() {
    assert!(build_p1(0.0, 0.5).is_err());
    assert!(build_p1(2.0, 0.5).is_err());
    assert!(build_p1(0.5, PI).is_err());
}
