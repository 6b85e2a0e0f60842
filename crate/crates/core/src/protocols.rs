//! Builders for the concrete gate-implementation protocols.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::engine::{
    self, branch_fidelities, compose_merge, run_exhaustive, Case, LocalInstrument, Pattern, ProtocolProgram,
    ProtocolStep, Usage,
};
use crate::error::{Error, Result};
use crate::model::{
    self, bell_on, controlled, cz, generalized_pauli, ket_minus, ket_plus, make_u_theta, pauli_x, pauli_z,
    permutation_matrix, resource_phi_alpha, resource_psi_u, z_rotation, CliffordTable, GateSpec, Party, PureState,
    SystemLayout,
};
use crate::qmath::{self, c, is_majorized_by, CMatrix, CVector, ProbabilityVector};
use crate::random::random_pure_state;

/// Seed of the probe input used to fit the failure-branch sign.
const PROBE_SEED: u64 = 0x5eed;
pub const EXACT_TOL: f64 = 1e-9;

fn two_qubit_io() -> Result<SystemLayout> {
    SystemLayout::of(&[("A", 2, Party::Alice), ("B", 2, Party::Bob)])
}

fn pm_basis() -> Vec<(String, CVector)> {
    vec![("+".into(), ket_plus()), ("-".into(), ket_minus())]
}

fn z_basis() -> Vec<(String, CVector)> {
    vec![
        ("0".into(), CVector::from_column_slice(&[c(1.0, 0.0), c(0.0, 0.0)])),
        ("1".into(), CVector::from_column_slice(&[c(0.0, 0.0), c(1.0, 0.0)])),
    ]
}

/// Random input on `(A, B)` purified by a referee factor `R`.
pub fn referee_purified_input<R: rand::Rng + ?Sized>(
    inputs: &SystemLayout,
    referee_dim: usize,
    rng: &mut R,
) -> Result<PureState> {
    let layout = inputs.concat(&SystemLayout::of(&[("R", referee_dim, Party::Referee)])?)?;
    Ok(random_pure_state(layout, rng))
}

fn probe_input() -> Result<PureState> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    referee_purified_input(&two_qubit_io()?, 4, &mut rng)
}

fn check_angles(theta: f64, alpha: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= PI / 2.0) {
        return Err(Error::Domain(format!("θ = {theta} outside (0, π/2]")));
    }
    if !(alpha > 0.0 && alpha < PI) {
        return Err(Error::Domain(format!("α = {alpha} outside (0, π)")));
    }
    Ok(())
}

/// `θ′ = 2 arctan(tan²(α/2) / tan(θ/2))`.
pub fn failure_angle(theta: f64, alpha: f64) -> Result<f64> {
    if theta == 0.0 {
        return Err(Error::Domain("failure angle undefined at θ = 0".into()));
    }
    check_angles(theta, alpha)?;
    Ok(2.0 * ((alpha / 2.0).tan().powi(2) / (theta / 2.0).tan()).atan())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P1Result {
    pub program: ProtocolProgram,
    pub success_prob: f64,
    /// Signed angle of the gate applied on the failure branch.
    pub failure_angle: f64,
}

/// Probabilistic protocol for `U_θ` from the resource `|φ_α⟩`.
pub fn build_p1(theta: f64, alpha: f64) -> Result<P1Result> {
    check_angles(theta, alpha)?;
    let (ct, st) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let (ca, sa) = ((alpha / 2.0).cos(), (alpha / 2.0).sin());
    let chi = CVector::from_column_slice(&[c(ct / ca, 0.0), c(st / sa, 0.0)]);
    let chi_perp = CVector::from_column_slice(&[c(st / sa, 0.0), c(-ct / ca, 0.0)]);
    let basis = vec![
        ("success".to_string(), chi.normalize()),
        ("failure".to_string(), chi_perp.normalize()),
    ];

    let mut program = ProtocolProgram::new("p1", two_qubit_io()?)
        .with_resource("phi_alpha", resource_phi_alpha(alpha)?, Usage::Always)
        .with_passthrough_io();
    program.push(ProtocolStep::local("p1.cz_a", LocalInstrument::unitary(Party::Alice, ["a", "A"], cz())?));
    program.push(
        ProtocolStep::local("p1.measure_a", LocalInstrument::measure_discard(Party::Alice, ["a"], pm_basis())?)
            .sending(),
    );
    program.push(ProtocolStep::when(
        "p1.fix_b",
        "p1.measure_a",
        "-",
        LocalInstrument::unitary(Party::Bob, ["b"], pauli_z())?,
    ));
    program.push(ProtocolStep::local("p1.cz_b", LocalInstrument::unitary(Party::Bob, ["b", "B"], cz())?));
    program.push(
        ProtocolStep::local("p1.measure_b", LocalInstrument::measure_discard(Party::Bob, ["b"], basis)?).sending(),
    );

    let theta_f = fit_failure_sign(&program, theta, alpha)?;
    Ok(P1Result { program, success_prob: analysis::success_prob(theta, alpha)?, failure_angle: theta_f })
}

/// Compares the failure branch on a fixed probe input against `U_{±θ′}`
/// and returns the signed angle that reproduces it.
fn fit_failure_sign(program: &ProtocolProgram, theta: f64, alpha: f64) -> Result<f64> {
    let magnitude = failure_angle(theta, alpha)?;
    let input = probe_input()?;
    let tree = run_exhaustive(program, &input)?;
    let failures: Vec<usize> = (0..tree.leaves.len())
        .filter(|&i| tree.leaves[i].outcome("p1.measure_b") == Some("failure"))
        .collect();
    if failures.is_empty() {
        return Ok(magnitude);
    }
    let mut best = (f64::NEG_INFINITY, magnitude);
    for candidate in [magnitude, -magnitude] {
        let f = branch_fidelities(program, &tree, &make_u_theta(candidate)?, &input)?;
        let worst = failures.iter().map(|&i| f[i]).fold(f64::INFINITY, f64::min);
        if worst > best.0 {
            best = (worst, candidate);
        }
    }
    if best.0 < 1.0 - EXACT_TOL {
        return Err(Error::Verification(format!(
            "failure branch matches neither U(±{magnitude}) (best fidelity {})",
            best.0
        )));
    }
    Ok(best.1)
}

/// `I ⊗ |0⟩⟨0| + e^{iφσ_z} ⊗ |1⟩⟨1|` on `(A, B)`.
pub fn controlled_phase_gate(phi: f64) -> Result<GateSpec> {
    let rot = z_rotation(phi);
    let mut m = CMatrix::zeros(4, 4);
    for a in 0..2 {
        for a2 in 0..2 {
            m[(a * 2, a2 * 2)] = if a == a2 { c(1.0, 0.0) } else { c(0.0, 0.0) };
            m[(a * 2 + 1, a2 * 2 + 1)] = rot[(a, a2)];
        }
    }
    GateSpec::new(m, ["A", "B"])
}

/// Deterministic protocol for [`controlled_phase_gate`] using one Bell pair
/// on `(ea, eb)`.
pub fn build_p2(phi: f64) -> Result<ProtocolProgram> {
    build_p2_with(phi, Usage::Always)
}

fn build_p2_with(phi: f64, usage: Usage) -> Result<ProtocolProgram> {
    if !phi.is_finite() {
        return Err(Error::Domain(format!("non-finite angle {phi}")));
    }
    let mut program = ProtocolProgram::new("p2", two_qubit_io()?)
        .with_resource("bell", bell_on(2, ("ea", Party::Alice), ("eb", Party::Bob))?, usage)
        .with_passthrough_io();
    program.push(ProtocolStep::local("p2.cnot", LocalInstrument::unitary(Party::Bob, ["B", "eb"], model::cnot())?));
    program.push(
        ProtocolStep::local("p2.measure_eb", LocalInstrument::measure_discard(Party::Bob, ["eb"], z_basis())?)
            .sending(),
    );
    program.push(ProtocolStep::when(
        "p2.fix_ea",
        "p2.measure_eb",
        "1",
        LocalInstrument::unitary(Party::Alice, ["ea"], pauli_x())?,
    ));
    program.push(ProtocolStep::local(
        "p2.controlled",
        LocalInstrument::unitary(Party::Alice, ["ea", "A"], controlled(&z_rotation(phi)))?,
    ));
    program.push(
        ProtocolStep::local("p2.measure_ea", LocalInstrument::measure_discard(Party::Alice, ["ea"], pm_basis())?)
            .sending(),
    );
    program.push(ProtocolStep::when(
        "p2.fix_b",
        "p2.measure_ea",
        "-",
        LocalInstrument::unitary(Party::Bob, ["B"], pauli_z())?,
    ));
    Ok(program)
}

/// Local unitaries turning the controlled gate into `U_φ`:
/// `(V_A ⊗ V_B) · C(φ*) = e^{iγ} U_φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dressing {
    pub v_a: GateSpec,
    pub v_b: GateSpec,
    pub internal_angle: f64,
    pub phase: f64,
}

/// Writes `σ_z ⊗ |1⟩⟨1| = (σ_z ⊗ I − σ_z ⊗ σ_z)/2`, so that
/// `C(φ*) = (e^{iφ*σ_z/2} ⊗ I) · U_{−φ*}`. Choosing `φ* = −φ` leaves a
/// local rotation on `A` to undo, and the product is checked numerically.
pub fn local_dressing(phi: f64) -> Result<Dressing> {
    if !phi.is_finite() {
        return Err(Error::Domain(format!("non-finite angle {phi}")));
    }
    let zz = qmath::tensor_product(&pauli_z(), &pauli_z());
    let z1 = qmath::tensor_product(&pauli_z(), &qmath::identity(2));
    // coefficients of ZZ and ZI in the generator of C(φ*) per unit φ*
    let proj1 = (qmath::identity(2) - pauli_z()) * c(0.5, 0.0);
    let generator = qmath::tensor_product(&pauli_z(), &proj1);
    let coeff_zz = (qmath::trace(&(zz.adjoint() * &generator)) / c(4.0, 0.0)).re;
    let coeff_z1 = (qmath::trace(&(z1.adjoint() * &generator)) / c(4.0, 0.0)).re;
    let internal = phi / (2.0 * coeff_zz);
    let v_a = GateSpec::new(z_rotation(-coeff_z1 * internal), ["A"])?;
    let v_b = GateSpec::new(qmath::identity(2), ["B"])?;

    let built = qmath::tensor_product(v_a.matrix(), v_b.matrix()) * controlled_phase_gate(internal)?.matrix();
    let target = make_u_theta(phi)?;
    let phase = qmath::trace(&(target.matrix().adjoint() * &built)).arg();
    let residual = qmath::max_abs(&(built - target.matrix() * c(phase.cos(), phase.sin())));
    if residual > 1e-10 {
        return Err(Error::Verification(format!("dressing residual {residual:.3e}")));
    }
    Ok(Dressing { v_a, v_b, internal_angle: internal, phase })
}

/// Deterministic protocol for `U_φ` built from the controlled gate.
pub fn build_p2_dressed(phi: f64) -> Result<ProtocolProgram> {
    dressed_with(phi, Usage::Always)
}

fn dressed_with(phi: f64, usage: Usage) -> Result<ProtocolProgram> {
    let d = local_dressing(phi)?;
    let mut program = build_p2_with(d.internal_angle, usage)?;
    program.name = "p2-dressed".into();
    program.push(ProtocolStep::local("p2.dress_a", LocalInstrument::gate(Party::Alice, &d.v_a)?));
    program.push(ProtocolStep::local("p2.dress_b", LocalInstrument::gate(Party::Bob, &d.v_b)?));
    Ok(program)
}

/// P1 with resource angle `α = √θ`, followed on failure by a dressed P2
/// that applies the missing rotation.
pub fn build_composite(theta: f64) -> Result<ProtocolProgram> {
    build_composite_with_alpha(theta, theta.sqrt())
}

pub fn build_composite_with_alpha(theta: f64, alpha: f64) -> Result<ProtocolProgram> {
    let p1 = build_p1(theta, alpha)?;
    let correction = theta - p1.failure_angle;
    let p2 = dressed_with(correction, Usage::OnDemand)?;
    let guard = ["p1.measure_b".to_string()];
    let mut guarded = p2.clone();
    guarded.steps = p2.steps.into_iter().map(|s| s.guarded(&guard, &[Pattern::is("failure")])).collect();
    let mut program = compose_merge(&p1.program, &guarded)?;
    program.name = "composite".into();
    Ok(program)
}

/// Composite protocol preceded by dilution of one Bell pair into `|φ_α⟩`.
pub fn build_composite_with_dilution(theta: f64) -> Result<ProtocolProgram> {
    let alpha = theta.sqrt();
    let target = ProbabilityVector::new(vec![(alpha / 2.0).cos().powi(2), (alpha / 2.0).sin().powi(2)])?;
    let mut dilution = nielsen_dilution(&target, 1)?;
    let phase = CMatrix::from_diagonal(&CVector::from_column_slice(&[c(1.0, 0.0), c(0.0, 1.0)]));
    dilution.push(ProtocolStep::local("dilution.phase_b", LocalInstrument::unitary(Party::Bob, ["b"], phase)?));
    let mut program = compose_merge(&dilution, &build_composite(theta)?)?;
    program.name = "dilution+composite".into();
    Ok(program)
}

fn pauli_label(p: usize, q: usize) -> String {
    format!("{p},{q}")
}

/// One-round protocol for a generalized Clifford gate with simultaneous
/// message exchange. Outputs appear on `At` and `Bt`.
pub fn build_clifford_protocol(u: &GateSpec, table: &CliffordTable) -> Result<ProtocolProgram> {
    let d = u.bipartite_dim()?;
    if table.d != d {
        return Err(Error::Verification(format!("table for d = {} used with a d = {d} gate", table.d)));
    }
    for e in table.entries() {
        let [p, q, r, s] = e.input;
        let [p2, q2, r2, s2] = e.output;
        let lhs = u.matrix()
            * qmath::tensor_product(generalized_pauli(d, p, q)?.matrix(), generalized_pauli(d, r, s)?.matrix())
            * u.matrix().adjoint();
        let rhs = qmath::tensor_product(generalized_pauli(d, p2, q2)?.matrix(), generalized_pauli(d, r2, s2)?.matrix())
            * c(e.phase.cos(), e.phase.sin());
        if qmath::max_abs(&(lhs - rhs)) > model::CLIFFORD_TOL {
            return Err(Error::Verification(format!("table entry {:?} does not hold for the gate", e.input)));
        }
    }

    let layout = SystemLayout::of(&[("A", d, Party::Alice), ("B", d, Party::Bob)])?;
    let mut program = ProtocolProgram::new("clifford", layout)
        .with_resource("psi_u", resource_psi_u(u)?, Usage::Always)
        .with_io(&[("A", "At"), ("B", "Bt")]);
    let phi = model::max_entangled_amps(d);
    let basis = |party: Party, labels: [&str; 2]| -> Result<LocalInstrument> {
        let mut vectors = Vec::new();
        for p in 0..d {
            for q in 0..d {
                let sigma_dag = generalized_pauli(d, p, q)?.matrix().adjoint();
                vectors.push((pauli_label(p, q), qmath::tensor_product(&sigma_dag, &qmath::identity(d)) * &phi));
            }
        }
        LocalInstrument::measure_discard(party, labels, vectors)
    };
    program.push(ProtocolStep::local("clifford.measure_alice", basis(Party::Alice, ["A", "a"])?).sending());
    program.push(ProtocolStep::local("clifford.measure_bob", basis(Party::Bob, ["B", "b"])?).sending());

    let on = vec!["clifford.measure_alice".to_string(), "clifford.measure_bob".to_string()];
    let mut alice_cases = Vec::new();
    let mut bob_cases = Vec::new();
    for e in table.entries() {
        let [p, q, r, s] = e.input;
        let [p2, q2, r2, s2] = e.output;
        let when = vec![Pattern::is(pauli_label(p, q)), Pattern::is(pauli_label(r, s))];
        let fix_a = generalized_pauli(d, p2, q2)?.matrix().adjoint();
        let fix_b = generalized_pauli(d, r2, s2)?.matrix().adjoint();
        alice_cases.push(Case { when: when.clone(), instrument: Some(LocalInstrument::unitary(Party::Alice, ["At"], fix_a)?) });
        bob_cases.push(Case { when, instrument: Some(LocalInstrument::unitary(Party::Bob, ["Bt"], fix_b)?) });
    }
    program.push(ProtocolStep::conditioned("clifford.fix_alice", Party::Alice, on.clone(), alice_cases));
    program.push(ProtocolStep::conditioned("clifford.fix_bob", Party::Bob, on, bob_cases));
    Ok(program)
}

/// Two-level transform `u ← t u + (1 − t) Q_{jk} u`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TTransform {
    j: usize,
    k: usize,
    t: f64,
}

/// T-transform chain from `y` down to `x` (both sorted descending, `x ≺ y`).
fn t_transform_chain(x: &[f64], y: &[f64]) -> Vec<TTransform> {
    const TOL: f64 = 1e-13;
    let mut u = y.to_vec();
    let mut chain = Vec::new();
    for _ in 0..(2 * x.len() + 2) {
        let Some(j) = (0..u.len()).rev().find(|&i| u[i] > x[i] + TOL) else { break };
        let Some(k) = (j + 1..u.len()).find(|&i| u[i] < x[i] - TOL) else { break };
        let delta = (u[j] - x[j]).min(x[k] - u[k]);
        let t = 1.0 - delta / (u[j] - u[k]);
        u[j] -= delta;
        u[k] += delta;
        chain.push(TTransform { j, k, t });
    }
    chain
}

fn apply_t(u: &[f64], tt: TTransform) -> Vec<f64> {
    let mut v = u.to_vec();
    v[tt.j] = tt.t * u[tt.j] + (1.0 - tt.t) * u[tt.k];
    v[tt.k] = tt.t * u[tt.k] + (1.0 - tt.t) * u[tt.j];
    v
}

fn sqrt_diag(v: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(v.len(), v.iter().map(|x| c(x.max(0.0).sqrt(), 0.0))))
}

fn inv_sqrt_diag(v: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(
        v.len(),
        v.iter().map(|&x| if x > 0.0 { c(1.0 / x.sqrt(), 0.0) } else { c(0.0, 0.0) }),
    ))
}

fn swap_matrix(n: usize, j: usize, k: usize) -> CMatrix {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.swap(j, k);
    permutation_matrix(&perm)
}

/// Indices of `w` in descending order of value, ties by index.
fn descending_order(w: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx
}

/// Appends majorization-driven steps turning `Σ_i √x_i |σ(i)⟩|σ(i)⟩` into
/// `Σ_i √y_i |i⟩|i⟩` on registers `alice` and `bob` of dimension `n`.
/// `source` lists the Schmidt weight of each register basis state.
fn push_dilution_steps(
    program: &mut ProtocolProgram,
    prefix: &str,
    alice: &[String],
    bob: &[String],
    source: &[f64],
    target: &[f64],
) -> Result<()> {
    let n = source.len();
    let xs = ProbabilityVector::new(source.to_vec())?;
    let ys = ProbabilityVector::new(target.to_vec())?;
    if !is_majorized_by(&xs, &ys) {
        return Err(Error::MajorizationFails(format!("{:?} is not majorized by {:?}", xs.sorted_desc(), ys.sorted_desc())));
    }
    let src_order = descending_order(source);
    let tgt_order = descending_order(target);
    let x: Vec<f64> = src_order.iter().map(|&i| source[i]).collect();
    let y: Vec<f64> = tgt_order.iter().map(|&i| target[i]).collect();

    // register index src_order[r] -> rank r
    let mut to_rank = vec![0; n];
    for (r, &i) in src_order.iter().enumerate() {
        to_rank[i] = r;
    }
    if to_rank.iter().enumerate().any(|(i, &r)| i != r) {
        let sort = permutation_matrix(&to_rank);
        program.push(ProtocolStep::local(format!("{prefix}.sort_a"), LocalInstrument::unitary(Party::Alice, alice.to_vec(), sort.clone())?));
        program.push(ProtocolStep::local(format!("{prefix}.sort_b"), LocalInstrument::unitary(Party::Bob, bob.to_vec(), sort)?));
    }

    let chain = t_transform_chain(&x, &y);
    // z_0 = x, ..., z_m = y with z_{l-1} = T z_l
    let mut zs = vec![y.clone()];
    for tt in &chain {
        let next = apply_t(zs.last().expect("non-empty"), *tt);
        zs.push(next);
    }
    zs.reverse();
    for (l, tt) in chain.iter().rev().enumerate() {
        let (from, to) = (&zs[l], &zs[l + 1]);
        let q = swap_matrix(n, tt.j, tt.k);
        let keep = sqrt_diag(to) * inv_sqrt_diag(from) * c(tt.t.sqrt(), 0.0);
        let swap = sqrt_diag(to) * &q * inv_sqrt_diag(from) * c((1.0 - tt.t).max(0.0).sqrt(), 0.0);
        let mut branches = vec![("keep".to_string(), keep), ("swap".to_string(), swap)];
        let zero: Vec<f64> = from.iter().map(|&v| if v > 0.0 { 0.0 } else { 1.0 }).collect();
        if zero.iter().any(|&v| v > 0.0) {
            branches.push(("null".to_string(), sqrt_diag(&zero)));
        }
        let id = format!("{prefix}.step{l}");
        program.push(ProtocolStep::local(id.clone(), LocalInstrument::new(Party::Alice, alice.to_vec(), branches)?).sending());
        program.push(ProtocolStep::when(format!("{prefix}.fix{l}"), id, "swap", LocalInstrument::unitary(Party::Bob, bob.to_vec(), q)?));
    }

    if tgt_order.iter().enumerate().any(|(r, &i)| r != i) {
        let unsort = permutation_matrix(&tgt_order);
        program.push(ProtocolStep::local(format!("{prefix}.unsort_a"), LocalInstrument::unitary(Party::Alice, alice.to_vec(), unsort.clone())?));
        program.push(ProtocolStep::local(format!("{prefix}.unsort_b"), LocalInstrument::unitary(Party::Bob, bob.to_vec(), unsort)?));
    }
    Ok(())
}

/// Converts `|Φ_{2^k}⟩` on `(a, b)` into `Σ_i √target_i |i⟩|i⟩` exactly by
/// a chain of two-outcome measurements by Alice, each followed by Bob
/// undoing a basis swap when told to.
pub fn nielsen_dilution(target: &ProbabilityVector, k: u32) -> Result<ProtocolProgram> {
    let n = 1usize << k;
    let w = target.weights();
    if k == 0 || w.iter().skip(n).any(|&x| x > 0.0) {
        return Err(Error::Domain(format!("target of length {} does not fit 2^{k}", target.len())));
    }
    let mut y = w[..w.len().min(n)].to_vec();
    y.resize(n, 0.0);
    let mut program = ProtocolProgram::new("dilution", SystemLayout::empty())
        .with_resource("shared", bell_on(n, ("a", Party::Alice), ("b", Party::Bob))?, Usage::Always);
    push_dilution_steps(&mut program, "dilution", &["a".into()], &["b".into()], &vec![1.0 / n as f64; n], &y)?;
    Ok(program)
}

/// Analytic resource plan of the n-shot protocol, with a runnable program
/// for small `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NShotPlan {
    pub theta: f64,
    pub n: usize,
    pub delta: f64,
    pub p_theta: f64,
    pub h_theta: f64,
    pub e_bar: f64,
    /// `n(Ē_θ + 2δ)` Bell pairs.
    pub budget: f64,
    /// `n(h_θ + δ)` Bell pairs for the dilution stage.
    pub dilution_ebits: f64,
    pub typical_weight: f64,
    /// Smallest number of P1 successes the protocol tolerates.
    pub min_successes: f64,
    /// Bell pairs actually shared in the simulated program.
    pub dilution_pairs: usize,
    pub p2_pairs: usize,
    /// `(bit string, amplitude)` of the normalized typical resource.
    pub omega: Vec<(String, [f64; 2])>,
    pub demo: Option<NShotDemo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NShotDemo {
    /// Dilution, per-shot P1 and batched P2.
    pub full: ProtocolProgram,
    /// Same protocol with the typical resource shared directly.
    pub core: ProtocolProgram,
}

/// Largest `n` for which a runnable program is built.
pub const N_SHOT_MAX: usize = 4;

fn bits(x: usize, n: usize) -> String {
    (0..n).map(|i| if x >> (n - 1 - i) & 1 == 1 { '1' } else { '0' }).collect()
}

/// Typical projection of `|φ_{√θ}⟩^{⊗n}` on `(a1..an, b1..bn)`, normalized.
pub fn omega_state(theta: f64, n: usize, delta: f64) -> Result<PureState> {
    let alpha = theta.sqrt();
    let lam = analysis::lambda_theta(theta)?;
    let mut entries: Vec<(String, usize, Party)> = Vec::new();
    for i in 1..=n {
        entries.push((format!("a{i}"), 2, Party::Alice));
    }
    for i in 1..=n {
        entries.push((format!("b{i}"), 2, Party::Bob));
    }
    let layout = SystemLayout::new(entries.into_iter().map(|(l, d, o)| model::Subsystem::new(l, d, o)).collect())?;
    let size = 1usize << n;
    let mut amps = CVector::zeros(size * size);
    let mut any = false;
    for x in 0..size {
        let ones = x.count_ones() as usize;
        if !analysis::is_typical_count(n, ones, delta, &lam) {
            continue;
        }
        any = true;
        let mag = (alpha / 2.0).cos().powi((n - ones) as i32) * (alpha / 2.0).sin().powi(ones as i32);
        let phase = c(0.0, 1.0).powu(ones as u32);
        amps[x * size + x] = phase * mag;
    }
    if !any {
        return Err(Error::Domain(format!("typical set is empty for n = {n}, δ = {delta}")));
    }
    PureState::normalized(layout, amps)
}

fn shot_labels(i: usize) -> impl Fn(&str) -> String {
    move |l: &str| match l {
        "A" | "B" | "a" | "b" => format!("{l}{i}"),
        other => other.to_string(),
    }
}

/// n-shot protocol: dilution of Bell pairs into the typical resource,
/// one P1 per shot, and dressed P2 corrections for the failed shots,
/// aborting when there are fewer than `n(p_θ − δ)` successes.
pub fn build_n_shot(theta: f64, n: usize, delta: f64) -> Result<NShotPlan> {
    if !(theta > 0.0 && theta <= PI / 2.0) {
        return Err(Error::Domain(format!("θ = {theta} outside (0, π/2]")));
    }
    if n == 0 || delta.is_nan() || delta <= 0.0 {
        return Err(Error::Domain(format!("need n ≥ 1 and δ > 0, got n = {n}, δ = {delta}")));
    }
    let point = analysis::e_bar(theta)?;
    let report = analysis::total_error(n, delta, theta)?;
    let nf = n as f64;
    let dilution_pairs = ((nf * (point.h_theta + delta)).ceil() as usize).min(n);
    let p2_pairs = ((nf * (1.0 - point.p_theta + delta)).floor() as usize).min(n);
    let min_successes = nf * (point.p_theta - delta);

    let mut plan = NShotPlan {
        theta,
        n,
        delta,
        p_theta: point.p_theta,
        h_theta: point.h_theta,
        e_bar: point.e_bar,
        budget: nf * (point.e_bar + 2.0 * delta),
        dilution_ebits: report.dilution_ebits,
        typical_weight: report.typical_weight,
        min_successes,
        dilution_pairs,
        p2_pairs,
        omega: Vec::new(),
        demo: None,
    };
    if n > N_SHOT_MAX {
        return Ok(plan);
    }
    let omega = omega_state(theta, n, delta)?;
    let size = 1usize << n;
    plan.omega = (0..size)
        .filter_map(|x| {
            let a = omega.amplitudes()[x * size + x];
            (a.norm() > 0.0).then(|| (bits(x, n), [a.re, a.im]))
        })
        .collect();

    let core = n_shot_core(theta, n, p2_pairs, min_successes, &omega)?;
    let full = n_shot_full(&core, n, dilution_pairs, &omega)?;
    plan.demo = Some(NShotDemo { full, core });
    Ok(plan)
}

fn n_shot_core(theta: f64, n: usize, p2_pairs: usize, min_successes: f64, omega: &PureState) -> Result<ProtocolProgram> {
    let p1 = build_p1(theta, theta.sqrt())?;
    let correction = theta - p1.failure_angle;
    let mut inputs = Vec::new();
    for i in 1..=n {
        inputs.push(model::Subsystem::new(format!("A{i}"), 2, Party::Alice));
    }
    for i in 1..=n {
        inputs.push(model::Subsystem::new(format!("B{i}"), 2, Party::Bob));
    }
    let mut program = ProtocolProgram::new("n-shot-core", SystemLayout::new(inputs)?)
        .with_resource("omega", omega.clone(), Usage::Always)
        .with_passthrough_io();
    for i in 1..=n {
        let shot = p1.program.relabeled(&shot_labels(i), &format!("shot{i}."))?;
        program.steps.extend(shot.steps);
    }
    let outcome_ids: Vec<String> = (1..=n).map(|i| format!("shot{i}.p1.measure_b")).collect();

    // every success/failure pattern the protocol can handle
    let patterns: Vec<Vec<bool>> = (0..1usize << n)
        .map(|m| (0..n).map(|i| m >> i & 1 == 1).collect::<Vec<bool>>())
        .filter(|fails| {
            let failures = fails.iter().filter(|&&f| f).count();
            (n - failures) as f64 >= min_successes && failures <= p2_pairs
        })
        .collect();

    let mut slots: Vec<Vec<ProtocolStep>> = Vec::new();
    for slot in 0..p2_pairs {
        let bell_labels = move |l: &str| match l {
            "ea" | "eb" => format!("{l}{}", slot + 1),
            other => other.to_string(),
        };
        let mut merged: Vec<ProtocolStep> = Vec::new();
        let mut resource = None;
        for fails in &patterns {
            let failed: Vec<usize> = (0..n).filter(|&i| fails[i]).collect();
            let Some(&shot) = failed.get(slot) else { continue };
            let when: Vec<Pattern> = fails
                .iter()
                .map(|&f| Pattern::is(if f { "failure" } else { "success" }))
                .collect();
            let shot_map = shot_labels(shot + 1);
            let template = dressed_with(correction, Usage::OnDemand)?
                .relabeled(&|l: &str| bell_labels(&shot_map(l)), &format!("slot{}.", slot + 1))?;
            resource.get_or_insert_with(|| template.resources[0].clone());
            for (s, step) in template.steps.into_iter().enumerate() {
                let step = step.guarded(&outcome_ids, &when);
                if let Some(existing) = merged.get_mut(s) {
                    let (engine::Action::Conditioned { cases, .. }, engine::Action::Conditioned { cases: more, .. }) =
                        (&mut existing.action, step.action)
                    else {
                        unreachable!("guarded steps are conditioned")
                    };
                    cases.extend(more);
                } else {
                    merged.push(step);
                }
            }
        }
        if let Some(r) = resource {
            program.resources.push(r);
            slots.push(merged);
        }
    }
    // slots act on different shots in every branch, so their stages interleave
    let stages = slots.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..stages {
        program.steps.extend(slots.iter().filter_map(|steps| steps.get(k).cloned()));
    }
    engine::validate_program(&program)?;
    Ok(program)
}

fn n_shot_full(core: &ProtocolProgram, n: usize, pairs: usize, omega: &PureState) -> Result<ProtocolProgram> {
    let size = 1usize << n;
    let alice: Vec<String> = (1..=n).map(|i| format!("a{i}")).collect();
    let bob: Vec<String> = (1..=n).map(|i| format!("b{i}")).collect();
    let mut layout = Vec::new();
    for l in alice.iter() {
        layout.push(model::Subsystem::new(l.clone(), 2, Party::Alice));
    }
    for l in bob.iter() {
        layout.push(model::Subsystem::new(l.clone(), 2, Party::Bob));
    }
    // `pairs` Bell pairs on the leading qubits, |00⟩ on the rest
    let block = 1usize << (n - pairs);
    let mut amps = CVector::zeros(size * size);
    let w = c(1.0 / ((1usize << pairs) as f64).sqrt(), 0.0);
    let mut source = vec![0.0; size];
    for s in 0..(1usize << pairs) {
        let x = s * block;
        amps[x * size + x] = w;
        source[x] = 1.0 / (1usize << pairs) as f64;
    }
    let shared = PureState::new(SystemLayout::new(layout)?, amps)?;
    let target: Vec<f64> = (0..size).map(|x| omega.amplitudes()[x * size + x].norm_sqr()).collect();

    let mut dilution = ProtocolProgram::new("n-shot-dilution", SystemLayout::empty())
        .with_resource("bell_pairs", shared, Usage::Always);
    push_dilution_steps(&mut dilution, "dilution", &alice, &bob, &source, &target)?;
    let phase = CMatrix::from_diagonal(&CVector::from_column_slice(&[c(1.0, 0.0), c(0.0, 1.0)]));
    for b in &bob {
        dilution.push(ProtocolStep::local(format!("dilution.phase_{b}"), LocalInstrument::unitary(Party::Bob, [b.clone()], phase.clone())?));
    }
    let mut program = compose_merge(&dilution, core)?;
    program.name = "n-shot".into();
    Ok(program)
}

/// `U_θ^{⊗n}` on `(A1, B1, …, An, Bn)` listed as `[A1..An, B1..Bn]`.
pub fn u_theta_tensor(theta: f64, n: usize) -> Result<GateSpec> {
    let single = model::u_theta_matrix(theta);
    let mut labels: Vec<String> = (1..=n).map(|i| format!("A{i}")).collect();
    labels.extend((1..=n).map(|i| format!("B{i}")));
    // build on interleaved order (A1 B1 A2 B2 …), then permute to labels order
    let interleaved = qmath::tensor_all((0..n).map(|_| &single));
    let dims = vec![2; 2 * n];
    let order: Vec<usize> = (0..n).map(|i| 2 * i).chain((0..n).map(|i| 2 * i + 1)).collect();
    let m = qmath::permute_operator(&interleaved, &dims, &order)?;
    GateSpec::new(m, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn failure_angle_equals_theta_when_alpha_matches() {
        for theta in [0.2, 0.7, 1.3] {
            assert_abs_diff_eq!(failure_angle(theta, theta).unwrap(), theta, epsilon = 1e-12);
        }
        assert!(failure_angle(0.0, 0.5).is_err());
    }

    #[test]
    fn dressing_at_zero_is_trivial() {
        let d = local_dressing(0.0).unwrap();
        assert_abs_diff_eq!(qmath::max_abs(&(d.v_a.matrix() - qmath::identity(2))), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.internal_angle, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn t_chain_reaches_source() {
        let x = vec![0.25; 4];
        let y = vec![0.4, 0.3, 0.2, 0.1];
        let mut u = y.clone();
        for tt in t_transform_chain(&x, &y) {
            assert!((0.0..=1.0).contains(&tt.t));
            u = apply_t(&u, tt);
        }
        for (a, b) in u.iter().zip(&x) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_target_needs_no_steps() {
        let p = nielsen_dilution(&ProbabilityVector::uniform(4), 2).unwrap();
        assert!(p.steps.is_empty());
    }

    #[test]
    fn n_shot_too_large_has_no_demo() {
        let plan = build_n_shot(0.5, 5, 0.2).unwrap();
        assert!(plan.demo.is_none());
        assert_abs_diff_eq!(plan.budget, 5.0 * (plan.e_bar + 0.4), epsilon = 1e-12);
    }
}
