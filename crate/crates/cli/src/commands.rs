//! Report builders behind each subcommand.

use std::path::Path;

use clap::ValueEnum;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use locc_core::analysis::{self, CptpReport, CesaroMethod, MarkovCostReport};
use locc_core::engine::{self, Direction};
use locc_core::json::MatrixJson;
use locc_core::model::{self, CliffordCheck};
use locc_core::protocols;
use locc_core::qmath::{self, binary_entropy};
use locc_core::{GateSpec, Party, ProbabilityVector, ProtocolProgram, PureState, RoundProfile, SystemLayout};

use crate::error::CliError;
use crate::output::{Cell, Report, Table};

pub const U_THETA_TOLERANCE: f64 = 1e-9;
pub const CLIFFORD_TOLERANCE: f64 = 1e-10;
pub const THRESHOLD_TOLERANCE: f64 = 1e-8;
pub const ENUMERATION_TOLERANCE: f64 = 1e-12;
/// Unitarity tolerance for user-supplied matrices.
pub const USER_UNITARY_TOL: f64 = 1e-8;
pub const DEFAULT_N_LIST: [usize; 4] = [64, 256, 1024, 4096];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliffordGate {
    Cnot,
    Cz,
    Swap,
    Identity,
    /// Qutrit `|x, y⟩ ↦ |x, x + y mod 3⟩`.
    Sum3,
}

impl CliffordGate {
    pub fn name(self) -> &'static str {
        match self {
            CliffordGate::Cnot => "cnot",
            CliffordGate::Cz => "cz",
            CliffordGate::Swap => "swap",
            CliffordGate::Identity => "identity",
            CliffordGate::Sum3 => "sum3",
        }
    }

    pub fn spec(self) -> Result<GateSpec, CliError> {
        let m = match self {
            CliffordGate::Cnot => model::cnot(),
            CliffordGate::Cz => model::cz(),
            CliffordGate::Swap => model::swap(2),
            CliffordGate::Identity => qmath::identity(4),
            CliffordGate::Sum3 => model::sum_gate(3),
        };
        Ok(GateSpec::new(m, ["A", "B"])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BuiltinGate {
    UTheta,
    Cnot,
    Cz,
    Swap,
    Identity,
    Sum3,
}

#[derive(Debug, Clone, Copy)]
pub struct SimulateOptions {
    pub inputs: usize,
    pub seed: u64,
    pub tolerance: Option<f64>,
    pub referee_dim: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub gate: String,
    pub theta: Option<f64>,
    pub alpha: Option<f64>,
    pub protocol: String,
    pub inputs: usize,
    pub seed: u64,
    pub referee_dim: usize,
    /// Largest `1 − F` of the branch-averaged output over the inputs.
    pub worst_error: f64,
    /// Largest `1 − F` of any single branch.
    pub worst_branch_infidelity: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub rounds: RoundProfile,
    pub branches: usize,
    pub expected_ebits: f64,
    pub unconditional_ebits: f64,
    pub resource_ebits: f64,
    /// Analytic cost the ledger should reproduce.
    pub reference_ebits: f64,
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::AliceToBob => "A->B",
        Direction::BobToAlice => "B->A",
        Direction::Simultaneous => "simultaneous",
    }
}

fn round_type_name(profile: &RoundProfile) -> String {
    serde_json::to_value(profile.round_type)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl Report for SimulateReport {
    fn table(&self) -> Option<Table> {
        let mut t = Table::new(vec![
            "gate",
            "theta",
            "alpha",
            "protocol",
            "inputs",
            "seed",
            "referee_dim",
            "worst_error",
            "worst_branch_infidelity",
            "tolerance",
            "passed",
            "round_count",
            "round_type",
            "directions",
            "branches",
            "expected_ebits",
            "unconditional_ebits",
            "resource_ebits",
            "reference_ebits",
        ]);
        let directions: Vec<&str> = self.rounds.directions.iter().map(|d| direction_name(*d)).collect();
        t.push(vec![
            self.gate.as_str().into(),
            self.theta.into(),
            self.alpha.into(),
            self.protocol.as_str().into(),
            self.inputs.into(),
            self.seed.into(),
            self.referee_dim.into(),
            self.worst_error.into(),
            self.worst_branch_infidelity.into(),
            self.tolerance.into(),
            self.passed.into(),
            self.rounds.round_count.into(),
            round_type_name(&self.rounds).into(),
            directions.join(" ").into(),
            self.branches.into(),
            self.expected_ebits.into(),
            self.unconditional_ebits.into(),
            self.resource_ebits.into(),
            self.reference_ebits.into(),
        ]);
        Some(t)
    }

    fn passed(&self) -> bool {
        self.passed
    }
}

struct Simulation {
    worst_error: f64,
    worst_branch_infidelity: f64,
    branches: usize,
    ledger: engine::EntanglementLedger,
}

/// Runs `program` exhaustively on `count` seeded referee-purified inputs.
fn simulate_program(
    program: &ProtocolProgram,
    target: &GateSpec,
    inputs: &SystemLayout,
    referee_dim: usize,
    count: usize,
    seed: u64,
) -> Result<Simulation, CliError> {
    if count == 0 {
        return Err(CliError::Usage("--inputs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = (0..count)
        .map(|_| protocols::referee_purified_input(inputs, referee_dim, &mut rng))
        .collect::<Result<Vec<PureState>, _>>()?;
    let runs = states
        .par_iter()
        .map(|input| -> Result<_, locc_core::Error> {
            let tree = engine::run_exhaustive(program, input)?;
            let error = engine::protocol_error_of(program, &tree, target, input)?;
            let fids = engine::branch_fidelities(program, &tree, target, input)?;
            let worst = fids.iter().map(|f| 1.0 - f).fold(0.0, f64::max);
            Ok((error, worst, tree))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (_, _, first) = &runs[0];
    Ok(Simulation {
        worst_error: runs.iter().map(|r| r.0).fold(0.0, f64::max),
        worst_branch_infidelity: runs.iter().map(|r| r.1).fold(0.0, f64::max),
        branches: first.leaves.len(),
        ledger: engine::ledger(program, first)?,
    })
}

fn qubit_pair() -> Result<SystemLayout, CliError> {
    Ok(SystemLayout::of(&[("A", 2, Party::Alice), ("B", 2, Party::Bob)])?)
}

pub fn simulate_u_theta(
    theta: f64,
    alpha: Option<f64>,
    dilution: bool,
    opts: SimulateOptions,
) -> Result<SimulateReport, CliError> {
    if dilution && alpha.is_some() {
        return Err(CliError::Usage("--alpha cannot be combined with --dilution".into()));
    }
    let a = alpha.unwrap_or_else(|| theta.sqrt());
    let program = match (dilution, alpha) {
        (true, _) => protocols::build_composite_with_dilution(theta)?,
        (false, None) => protocols::build_composite(theta)?,
        (false, Some(a)) => protocols::build_composite_with_alpha(theta, a)?,
    };
    let target = model::make_u_theta(theta)?;
    let referee = opts.referee_dim.unwrap_or(4);
    let sim = simulate_program(&program, &target, &qubit_pair()?, referee, opts.inputs, opts.seed)?;
    // P2 on failure costs one ebit; P1 costs the resource's entropy, or a
    // whole Bell pair when it is diluted from one
    let p1_cost = if dilution { 1.0 } else { binary_entropy((a / 2.0).cos().powi(2))? };
    let reference = 1.0 - analysis::success_prob(theta, a)? + p1_cost;
    let tolerance = opts.tolerance.unwrap_or(U_THETA_TOLERANCE);
    Ok(SimulateReport {
        gate: "u-theta".into(),
        theta: Some(theta),
        alpha: Some(a),
        protocol: program.name.clone(),
        inputs: opts.inputs,
        seed: opts.seed,
        referee_dim: referee,
        worst_error: sim.worst_error,
        worst_branch_infidelity: sim.worst_branch_infidelity,
        tolerance,
        passed: sim.worst_error <= tolerance,
        rounds: engine::classify_rounds(&program),
        branches: sim.branches,
        expected_ebits: sim.ledger.expected_ebits,
        unconditional_ebits: sim.ledger.unconditional_ebits,
        resource_ebits: sim.ledger.resource_ebits,
        reference_ebits: reference,
    })
}

fn clifford_program(u: &GateSpec) -> Result<ProtocolProgram, CliError> {
    match model::clifford_table(u, model::CLIFFORD_TOL)? {
        CliffordCheck::Clifford(table) => Ok(protocols::build_clifford_protocol(u, &table)?),
        CliffordCheck::NotClifford { .. } => Err(CliError::Usage("gate is not Clifford".into())),
    }
}

pub fn simulate_clifford(gate: CliffordGate, opts: SimulateOptions) -> Result<SimulateReport, CliError> {
    let u = gate.spec()?;
    let d = u.bipartite_dim()?;
    let program = clifford_program(&u)?;
    let inputs = SystemLayout::of(&[("A", d, Party::Alice), ("B", d, Party::Bob)])?;
    let referee = opts.referee_dim.unwrap_or(if d == 2 { 4 } else { d });
    let sim = simulate_program(&program, &u, &inputs, referee, opts.inputs, opts.seed)?;
    let resource = model::resource_psi_u(&u)?;
    let k = resource.entanglement_entropy(&resource.layout().owned_by(Party::Alice))?;
    let tolerance = opts.tolerance.unwrap_or(CLIFFORD_TOLERANCE);
    Ok(SimulateReport {
        gate: gate.name().into(),
        theta: None,
        alpha: None,
        protocol: program.name.clone(),
        inputs: opts.inputs,
        seed: opts.seed,
        referee_dim: referee,
        worst_error: sim.worst_error,
        worst_branch_infidelity: sim.worst_branch_infidelity,
        tolerance,
        passed: sim.worst_error <= tolerance,
        rounds: engine::classify_rounds(&program),
        branches: sim.branches,
        expected_ebits: sim.ledger.expected_ebits,
        unconditional_ebits: sim.ledger.unconditional_ebits,
        resource_ebits: sim.ledger.resource_ebits,
        reference_ebits: k,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CostCurveRow {
    pub theta: f64,
    pub p_theta: f64,
    pub h_theta: f64,
    pub e_bar: f64,
    /// `p(α = θ, θ)`, which is ½ for every θ.
    pub p_alpha_eq_theta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdRow {
    pub theta: f64,
    pub p_theta: f64,
    pub h_theta: f64,
    pub e_bar: f64,
    /// `|Ē − 1|` at the threshold.
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostCurveReport {
    pub theta_min: f64,
    pub theta_max: f64,
    pub steps: usize,
    pub rows: Vec<CostCurveRow>,
    pub threshold: ThresholdRow,
    pub tolerance: f64,
    pub passed: bool,
}

impl Report for CostCurveReport {
    fn table(&self) -> Option<Table> {
        let mut t = Table::new(vec!["kind", "theta", "p_theta", "h_theta", "e_bar", "p_alpha_eq_theta"]);
        for r in &self.rows {
            t.push(vec![
                "point".into(),
                r.theta.into(),
                r.p_theta.into(),
                r.h_theta.into(),
                r.e_bar.into(),
                r.p_alpha_eq_theta.into(),
            ]);
        }
        let th = &self.threshold;
        t.push(vec![
            "threshold".into(),
            th.theta.into(),
            th.p_theta.into(),
            th.h_theta.into(),
            th.e_bar.into(),
            Cell::Empty,
        ]);
        Some(t)
    }

    fn passed(&self) -> bool {
        self.passed
    }
}

pub fn cost_curve(theta_min: f64, theta_max: f64, steps: usize, tolerance: Option<f64>) -> Result<CostCurveReport, CliError> {
    let points = analysis::cost_curve(theta_min, theta_max, steps)?;
    let rows = points
        .par_iter()
        .map(|p| {
            Ok(CostCurveRow {
                theta: p.theta,
                p_theta: p.p_theta,
                h_theta: p.h_theta,
                e_bar: p.e_bar,
                p_alpha_eq_theta: analysis::success_prob(p.theta, p.theta)?,
            })
        })
        .collect::<Result<Vec<_>, locc_core::Error>>()?;
    let star = analysis::threshold()?;
    let at = analysis::e_bar(star)?;
    let deviation = (at.e_bar - 1.0).abs();
    let tolerance = tolerance.unwrap_or(THRESHOLD_TOLERANCE);
    Ok(CostCurveReport {
        theta_min,
        theta_max,
        steps,
        rows,
        threshold: ThresholdRow { theta: star, p_theta: at.p_theta, h_theta: at.h_theta, e_bar: at.e_bar, deviation },
        tolerance,
        passed: deviation <= tolerance,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MarkovCostOutput {
    pub gate: String,
    pub theta: Option<f64>,
    pub d: usize,
    pub cost: f64,
    pub eigenvalues: Vec<f64>,
    pub method: CesaroMethod,
    pub cptp: CptpReport,
    pub peripheral: Vec<[f64; 2]>,
}

impl Report for MarkovCostOutput {
    fn table(&self) -> Option<Table> {
        let mut t = Table::new(vec![
            "gate",
            "theta",
            "d",
            "cost",
            "method",
            "eigenvalues",
            "trace_defect",
            "min_choi_eigenvalue",
            "cptp",
        ]);
        let eig: Vec<String> = self.eigenvalues.iter().map(|x| crate::output::format_real(*x)).collect();
        let method = match self.method {
            CesaroMethod::Spectral => "spectral",
            CesaroMethod::Iterative => "iterative",
        };
        t.push(vec![
            self.gate.as_str().into(),
            self.theta.into(),
            self.d.into(),
            self.cost.into(),
            method.into(),
            eig.join(";").into(),
            self.cptp.trace_defect.into(),
            self.cptp.min_choi_eigenvalue.into(),
            self.cptp.ok.into(),
        ]);
        Some(t)
    }

    fn passed(&self) -> bool {
        self.cptp.ok
    }
}

pub enum GateSource<'a> {
    Builtin(BuiltinGate, Option<f64>),
    File(&'a Path),
}

fn read_matrix_gate(path: &Path) -> Result<GateSpec, CliError> {
    let text = std::fs::read_to_string(path)?;
    let m: MatrixJson = serde_json::from_str(&text)?;
    Ok(GateSpec::with_tolerance(m.to_matrix()?, ["A", "B"], USER_UNITARY_TOL)?)
}

pub fn markov_cost(source: GateSource<'_>) -> Result<MarkovCostOutput, CliError> {
    let (name, theta, u) = match source {
        GateSource::Builtin(BuiltinGate::UTheta, theta) => {
            let theta = theta.ok_or_else(|| CliError::Usage("u-theta needs --theta".into()))?;
            if !model::u_theta_in_domain(theta) {
                return Err(locc_core::Error::Domain(format!("θ = {theta} outside (0, π/2]")).into());
            }
            ("u-theta".to_string(), Some(theta), model::make_u_theta(theta)?)
        }
        GateSource::Builtin(g, _) => {
            let c = match g {
                BuiltinGate::Cnot => CliffordGate::Cnot,
                BuiltinGate::Cz => CliffordGate::Cz,
                BuiltinGate::Swap => CliffordGate::Swap,
                BuiltinGate::Identity => CliffordGate::Identity,
                BuiltinGate::Sum3 => CliffordGate::Sum3,
                BuiltinGate::UTheta => unreachable!(),
            };
            (c.name().to_string(), None, c.spec()?)
        }
        GateSource::File(path) => (path.display().to_string(), None, read_matrix_gate(path)?),
    };
    let d = u.bipartite_dim()?;
    let MarkovCostReport { cost, eigenvalues, method, cptp, peripheral } = analysis::markov_cost(&u)?;
    Ok(MarkovCostOutput { gate: name, theta, d, cost, eigenvalues, method, cptp, peripheral })
}

#[derive(Debug, Clone, Serialize)]
pub struct TypicalityRow {
    pub n: usize,
    pub typical_weight: f64,
    pub weight_enumerated: Option<f64>,
    pub epsilon_n: f64,
    pub epsilon_prime: f64,
    pub total_error: f64,
    pub n4_total: f64,
    pub dilution_ebits: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TypicalityOutput {
    pub theta: f64,
    pub delta: f64,
    pub lambda: [f64; 2],
    pub entropy: f64,
    pub rows: Vec<TypicalityRow>,
    /// Whether `n⁴·total` falls strictly along the rows.
    pub n4_strictly_decreasing: bool,
    pub enumeration_tolerance: f64,
    pub passed: bool,
}

impl Report for TypicalityOutput {
    fn table(&self) -> Option<Table> {
        let mut t = Table::new(vec![
            "n",
            "typical_weight",
            "weight_enumerated",
            "epsilon_n",
            "epsilon_prime",
            "total_error",
            "n4_total",
            "dilution_ebits",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.n.into(),
                r.typical_weight.into(),
                r.weight_enumerated.into(),
                r.epsilon_n.into(),
                r.epsilon_prime.into(),
                r.total_error.into(),
                r.n4_total.into(),
                r.dilution_ebits.into(),
            ]);
        }
        Some(t)
    }

    fn passed(&self) -> bool {
        self.passed
    }
}

pub fn typicality(
    theta: f64,
    delta: f64,
    ns: &[usize],
    lambda: Option<[f64; 2]>,
    enumerate: bool,
) -> Result<TypicalityOutput, CliError> {
    if ns.is_empty() {
        return Err(CliError::Usage("need at least one n".into()));
    }
    let lam = match lambda {
        Some(l) => ProbabilityVector::new(l.to_vec())?,
        None => analysis::lambda_theta(theta)?,
    };
    if enumerate {
        if let Some(&n) = ns.iter().find(|&&n| n > analysis::ENUMERATION_MAX) {
            return Err(locc_core::Error::TooLarge(n, analysis::ENUMERATION_MAX).into());
        }
    }
    let rows = ns
        .par_iter()
        .map(|&n| {
            let r = analysis::total_error_with(n, delta, theta, &lam)?;
            let weight_enumerated =
                if enumerate { Some(analysis::typical_weight_enumerated(n, delta, &lam)?) } else { None };
            Ok(TypicalityRow {
                n,
                typical_weight: r.typical_weight,
                weight_enumerated,
                epsilon_n: r.epsilon_n,
                epsilon_prime: r.epsilon_prime,
                total_error: r.total_error,
                n4_total: r.n4_total,
                dilution_ebits: r.dilution_ebits,
            })
        })
        .collect::<Result<Vec<_>, locc_core::Error>>()?;
    let decreasing = rows.windows(2).all(|w| w[1].n4_total < w[0].n4_total);
    let passed = rows
        .iter()
        .all(|r| r.weight_enumerated.is_none_or(|w| (w - r.typical_weight).abs() <= ENUMERATION_TOLERANCE));
    let w = lam.weights();
    Ok(TypicalityOutput {
        theta,
        delta,
        lambda: [w[0], w[1]],
        entropy: lam.entropy(),
        rows,
        n4_strictly_decreasing: decreasing,
        enumeration_tolerance: ENUMERATION_TOLERANCE,
        passed,
    })
}

/// A program or plan dumped as JSON.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Export {
    Program(ProtocolProgram),
    P1(protocols::P1Result),
    NShot(Box<locc_core::NShotPlan>),
}

impl Report for Export {
    fn table(&self) -> Option<Table> {
        None
    }
}

pub enum ExportRequest {
    UTheta { theta: f64, alpha: Option<f64>, dilution: bool },
    P1 { theta: f64, alpha: f64 },
    P2 { phi: f64 },
    Clifford(CliffordGate),
    Dilution { target: Vec<f64>, k: u32 },
    NShot { theta: f64, n: usize, delta: f64 },
}

pub fn export(request: ExportRequest) -> Result<Export, CliError> {
    Ok(match request {
        ExportRequest::UTheta { theta, alpha, dilution } => Export::Program(match (dilution, alpha) {
            (true, Some(_)) => return Err(CliError::Usage("--alpha cannot be combined with --dilution".into())),
            (true, None) => protocols::build_composite_with_dilution(theta)?,
            (false, None) => protocols::build_composite(theta)?,
            (false, Some(a)) => protocols::build_composite_with_alpha(theta, a)?,
        }),
        ExportRequest::P1 { theta, alpha } => Export::P1(protocols::build_p1(theta, alpha)?),
        ExportRequest::P2 { phi } => Export::Program(protocols::build_p2(phi)?),
        ExportRequest::Clifford(g) => Export::Program(clifford_program(&g.spec()?)?),
        ExportRequest::Dilution { target, k } => {
            Export::Program(protocols::nielsen_dilution(&ProbabilityVector::new(target)?, k)?)
        }
        ExportRequest::NShot { theta, n, delta } => Export::NShot(Box::new(protocols::build_n_shot(theta, n, delta)?)),
    })
}
