use approx::assert_abs_diff_eq;
use locc_core::engine::*;
use locc_core::model::{self, bell_on, ket, make_bell, GateSpec, Party, PureState, SystemLayout};
use locc_core::protocols::{self, referee_purified_input};
use locc_core::qmath::{self, c, CMatrix, CVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn e0() -> CVector {
    ket(&[c(1.0, 0.0), c(0.0, 0.0)])
}

fn e1() -> CVector {
    ket(&[c(0.0, 0.0), c(1.0, 0.0)])
}

fn qubit_a() -> SystemLayout {
    SystemLayout::of(&[("A", 2, Party::Alice)]).unwrap()
}

fn teleportation() -> ProtocolProgram {
    let mut p = ProtocolProgram::new("teleport", qubit_a())
        .with_resource("bell", make_bell(2).unwrap(), Usage::Always)
        .with_io(&[("A", "b")]);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    // (|0 x⟩ + (−1)^z |1 x̄⟩)/√2 on (A, a)
    let bell_basis: Vec<(String, CVector)> = (0..4)
        .map(|k| {
            let (x, z) = (k >> 1, k & 1);
            let mut v = CVector::zeros(4);
            v[x] = c(r, 0.0);
            v[2 + (1 - x)] = c(if z == 1 { -r } else { r }, 0.0);
            (format!("{x}{z}"), v)
        })
        .collect();
    p.push(ProtocolStep::local("bsm", LocalInstrument::measure_discard(Party::Alice, ["A", "a"], bell_basis).unwrap()).sending());
    let fix = |k: usize| {
        let (x, z) = (k >> 1, k & 1);
        let mut m = qmath::identity(2);
        if x == 1 {
            m = model::pauli_x() * m;
        }
        if z == 1 {
            m = model::pauli_z() * m;
        }
        Case {
            when: vec![Pattern::is(format!("{x}{z}"))],
            instrument: Some(LocalInstrument::unitary(Party::Bob, ["b"], m).unwrap()),
        }
    };
    p.push(ProtocolStep::conditioned("fix", Party::Bob, vec!["bsm".into()], (0..4).map(fix).collect()));
    p
}

#[test]
fn teleportation_transfers_any_state() {
    let program = teleportation();
    assert!(validate_program(&program).is_ok());
    let identity = GateSpec::new(qmath::identity(2), ["A"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..20 {
        let input = referee_purified_input(&qubit_a(), 2, &mut rng).unwrap();
        let tree = run_exhaustive(&program, &input).unwrap();
        assert_eq!(tree.leaves.len(), 4);
        for leaf in &tree.leaves {
            assert_abs_diff_eq!(leaf.probability, 0.25, epsilon = 1e-12);
        }
        assert!(protocol_error_of(&program, &tree, &identity, &input).unwrap() <= 1e-12);
        let l = ledger(&program, &tree).unwrap();
        assert_abs_diff_eq!(l.expected_ebits, 1.0, epsilon = 1e-12);
        assert!(monotonicity_diagnostic(&program, &tree, &input).unwrap().holds);
    }
    let profile = classify_rounds(&program);
    assert_eq!((profile.round_count, profile.round_type), (1, RoundType::A));
}

#[test]
fn json_roundtrip_preserves_programs() {
    let cnot = GateSpec::new(model::cnot(), ["A", "B"]).unwrap();
    let model::CliffordCheck::Clifford(table) = model::clifford_table(&cnot, model::CLIFFORD_TOL).unwrap() else {
        panic!()
    };
    let programs = vec![
        teleportation(),
        protocols::build_p1(0.5, 0.7).unwrap().program,
        protocols::build_composite(0.4).unwrap(),
        protocols::build_clifford_protocol(&cnot, &table).unwrap(),
        protocols::build_n_shot(0.5, 2, 1.2).unwrap().demo.unwrap().full,
    ];
    for p in programs {
        let text = p.to_json();
        let back = ProtocolProgram::from_json(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_json(), text);
    }
    assert!(ProtocolProgram::from_json("{\"name\": 3}").is_err());
}

#[test]
fn validation_catches_ownership() {
    let mut p = teleportation();
    p.steps[1] = ProtocolStep::local("fix", LocalInstrument::unitary(Party::Alice, ["b"], model::pauli_x()).unwrap());
    assert_eq!(validate_program(&p).unwrap_err().kind, ViolationKind::Ownership);
}

#[test]
fn validation_catches_causality() {
    let mut p = teleportation();
    p.steps.swap(0, 1);
    let kind = validate_program(&p).unwrap_err().kind;
    assert!(matches!(kind, ViolationKind::Causality | ViolationKind::UnknownReference), "{kind:?}");
}

#[test]
fn validation_catches_unsent_dependency() {
    let mut p = teleportation();
    p.steps[0].sends_message = false;
    assert_eq!(validate_program(&p).unwrap_err().kind, ViolationKind::Causality);
}

#[test]
fn validation_catches_duplicates_and_unknown_labels() {
    let mut p = teleportation();
    let copy = p.steps[1].clone();
    p.push(copy);
    assert_eq!(validate_program(&p).unwrap_err().kind, ViolationKind::DuplicateId);

    let mut p = teleportation();
    p.push(ProtocolStep::local("stray", LocalInstrument::unitary(Party::Bob, ["zz"], model::pauli_x()).unwrap()));
    assert_eq!(validate_program(&p).unwrap_err().kind, ViolationKind::UnknownLabel);

    let mut p = teleportation();
    p.push(ProtocolStep::local("wide", LocalInstrument::unitary(Party::Bob, ["b"], qmath::identity(3)).unwrap()));
    assert_eq!(validate_program(&p).unwrap_err().kind, ViolationKind::Shape);
}

#[test]
fn incomplete_instrument_rejected() {
    let half = qmath::projector(&e0());
    let err = LocalInstrument::new(Party::Alice, ["A"], vec![("0".into(), half)]);
    assert!(err.is_err());
}

#[test]
fn sampled_frequencies_follow_born_rule() {
    let p1 = protocols::build_p1(0.8, 0.9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let layout = SystemLayout::of(&[("A", 2, Party::Alice), ("B", 2, Party::Bob)]).unwrap();
    let input = referee_purified_input(&layout, 4, &mut rng).unwrap();
    let trials = 4000;
    let mut hits = 0;
    for _ in 0..trials {
        let leaf = run_sampled(&p1.program, &input, &mut rng).unwrap();
        if leaf.outcome("p1.measure_b") == Some("success") {
            hits += 1;
        }
    }
    let p = p1.success_prob;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    assert!(((hits as f64 / trials as f64) - p).abs() < 5.0 * sigma);
}

#[test]
fn sampled_leaf_is_an_exhaustive_leaf() {
    let program = protocols::build_composite(0.6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let layout = SystemLayout::of(&[("A", 2, Party::Alice), ("B", 2, Party::Bob)]).unwrap();
    let input = referee_purified_input(&layout, 4, &mut rng).unwrap();
    let tree = run_exhaustive(&program, &input).unwrap();
    for _ in 0..20 {
        let leaf = run_sampled(&program, &input, &mut rng).unwrap();
        let twin = tree.leaves.iter().find(|l| l.transcript == leaf.transcript).expect("leaf in tree");
        let overlap = twin.state.inner(&leaf.state).unwrap().norm();
        assert_abs_diff_eq!(overlap, 1.0, epsilon = 1e-9);
    }
}

#[test]
fn on_demand_resources_charged_only_when_used() {
    let theta = 0.9;
    let program = protocols::build_composite(theta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let layout = SystemLayout::of(&[("A", 2, Party::Alice), ("B", 2, Party::Bob)]).unwrap();
    let input = referee_purified_input(&layout, 4, &mut rng).unwrap();
    let tree = run_exhaustive(&program, &input).unwrap();
    let l = ledger(&program, &tree).unwrap();
    let h = locc_core::analysis::e_bar(theta).unwrap().h_theta;
    assert_abs_diff_eq!(l.unconditional_ebits, h, epsilon = 1e-10);
    for (leaf, cost) in tree.leaves.iter().zip(&l.per_branch) {
        let expected = if leaf.outcome("p1.measure_b") == Some("failure") { 1.0 } else { 0.0 };
        assert_abs_diff_eq!(cost.ebits, expected, epsilon = 1e-10);
    }
}

#[test]
fn disjoint_steps_share_a_round() {
    let layout = SystemLayout::of(&[
        ("A1", 2, Party::Alice),
        ("A2", 2, Party::Alice),
        ("B1", 2, Party::Bob),
        ("B2", 2, Party::Bob),
    ])
    .unwrap();
    let z_basis = || vec![("0".to_string(), e0()), ("1".to_string(), e1())];
    let mut p = ProtocolProgram::new("parallel", layout).with_passthrough_io();
    for i in 1..=2 {
        p.push(ProtocolStep::local(format!("a{i}"), LocalInstrument::measure_keep(Party::Alice, [format!("A{i}")], z_basis()).unwrap()).sending());
        p.push(
            ProtocolStep::when(format!("b{i}"), format!("a{i}"), "1", LocalInstrument::measure_keep(Party::Bob, [format!("B{i}")], z_basis()).unwrap())
                .sending(),
        );
    }
    let levels = message_levels(&p);
    assert_eq!(levels.iter().map(|m| m.2).collect::<Vec<_>>(), vec![1, 2, 1, 2]);
    assert_eq!(classify_rounds(&p).round_type, RoundType::B);

    // acting on a factor that already carries round-2 knowledge delays the message
    p.push(
        ProtocolStep::local("b_again", LocalInstrument::measure_keep(Party::Bob, ["B1"], z_basis()).unwrap()).sending(),
    );
    p.push(ProtocolStep::when("a_last", "b_again", "0", LocalInstrument::unitary(Party::Alice, ["A2"], model::pauli_x()).unwrap()).sending());
    let profile = classify_rounds(&p);
    assert_eq!(profile.round_count, 3);
}

#[test]
fn compose_merge_rejects_conflicts() {
    let a = protocols::build_p2(0.3).unwrap();
    assert!(compose_merge(&a, &a).is_err());
    let mut b = a.relabeled(&|l: &str| l.to_string(), "again.").unwrap();
    assert!(compose_merge(&a, &b).is_err());
    b.resources[0].name = "bell_again".into();
    b = b.relabeled(&|l: &str| if l == "ea" || l == "eb" { format!("{l}2") } else { l.to_string() }, "").unwrap();
    let merged = compose_merge(&a, &b).unwrap();
    let target = GateSpec::new(
        protocols::controlled_phase_gate(0.3).unwrap().matrix() * protocols::controlled_phase_gate(0.3).unwrap().matrix(),
        ["A", "B"],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let input = referee_purified_input(&a.layout, 4, &mut rng).unwrap();
    assert!(protocol_error(&merged, &target, &input).unwrap() <= 1e-10);
}

#[test]
fn oversized_states_rejected() {
    let layout = SystemLayout::new((0..17).map(|i| model::Subsystem::new(format!("q{i}"), 2, Party::Alice)).collect()).unwrap();
    let program = ProtocolProgram::new("big", layout.clone()).with_passthrough_io();
    let input = PureState::basis(layout, &[0; 17]).unwrap();
    assert!(run_exhaustive(&program, &input).is_err());
}

#[test]
fn resource_entropy_of_bell_pairs() {
    for d in [2, 3, 4] {
        let decl = ResourceDecl {
            name: "r".into(),
            state: bell_on(d, ("x", Party::Alice), ("y", Party::Bob)).unwrap(),
            usage: Usage::Always,
        };
        assert_abs_diff_eq!(resource_entropy(&decl).unwrap(), (d as f64).log2(), epsilon = 1e-10);
    }
}

fn phase_program(phi: f64) -> ProtocolProgram {
    let layout = SystemLayout::of(&[("A", 2, Party::Alice), ("B", 2, Party::Bob)]).unwrap();
    let mut p = ProtocolProgram::new("phase", layout).with_passthrough_io();
    p.push(ProtocolStep::local("rot", LocalInstrument::unitary(Party::Alice, ["A"], model::z_rotation(phi)).unwrap()));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn probabilities_sum_to_one(theta in 0.05f64..1.57, seed in any::<u64>()) {
        let program = protocols::build_composite(theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = SystemLayout::of(&[("A", 2, Party::Alice), ("B", 2, Party::Bob)]).unwrap();
        let input = referee_purified_input(&layout, 4, &mut rng).unwrap();
        let tree = run_exhaustive(&program, &input).unwrap();
        prop_assert!((tree.total_probability() - 1.0).abs() < 1e-9);
        prop_assert!((tree.mixture_trace() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn local_unitary_program_is_exact(phi in -3.0f64..3.0, seed in any::<u64>()) {
        let program = phase_program(phi);
        let target = GateSpec::new(qmath::tensor_product(&model::z_rotation(phi), &qmath::identity(2)), ["A", "B"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = referee_purified_input(&program.layout, 3, &mut rng).unwrap();
        prop_assert!(protocol_error(&program, &target, &input).unwrap() < 1e-12);
        let tree = run_exhaustive(&program, &input).unwrap();
        prop_assert_eq!(ledger(&program, &tree).unwrap().expected_ebits, 0.0);
        prop_assert_eq!(classify_rounds(&program).round_count, 0);
    }
}

#[test]
fn one_row_kraus_discards_factor() {
    let state = make_bell(2).unwrap();
    let bra = CMatrix::from_row_slice(1, 2, &[c(1.0, 0.0), c(0.0, 0.0)]);
    let (layout, amps) = state.apply_raw(&bra, &["a"]).unwrap();
    assert_eq!(layout.labels(), vec!["b".to_string()]);
    assert_abs_diff_eq!(amps.norm_squared(), 0.5, epsilon = 1e-14);
}
