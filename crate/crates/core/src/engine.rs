//! Two-party protocol programs and their exact simulation.
//!
//! A program is an ordered list of steps. Each step belongs to Alice or Bob
//! and applies a local instrument, possibly chosen by the outcomes of
//! earlier steps. An outcome becomes visible to the other party only when
//! its step sends a message. Resources are pure states shared before the
//! protocol starts; on-demand resources are only counted when a branch
//! actually touches them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateSpec, Party, PureState, SystemLayout};
use crate::qmath::{self, c, CMatrix, CVector};

pub const PRUNE_PROBABILITY: f64 = 1e-12;
pub const NORM_DRIFT_TOL: f64 = 1e-8;
pub const COMPLETENESS_TOL: f64 = 1e-10;
/// Largest joint dimension of a simulated pure state.
pub const MAX_STATE_DIM: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrausBranch {
    pub outcome: String,
    #[serde(with = "crate::json::matrix")]
    pub kraus: CMatrix,
}

/// Local operation with labelled outcomes.
///
/// Kraus operators are square on the acting factors, or a single row, in
/// which case the factors are measured out and removed from the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalInstrument {
    pub party: Party,
    pub labels: Vec<String>,
    pub branches: Vec<KrausBranch>,
}

impl LocalInstrument {
    pub fn new<S: Into<String>>(
        party: Party,
        labels: impl IntoIterator<Item = S>,
        branches: Vec<(String, CMatrix)>,
    ) -> Result<Self> {
        let inst = Self {
            party,
            labels: labels.into_iter().map(Into::into).collect(),
            branches: branches.into_iter().map(|(outcome, kraus)| KrausBranch { outcome, kraus }).collect(),
        };
        inst.check_shape()?;
        let defect = inst.completeness_defect();
        if defect > COMPLETENESS_TOL {
            return Err(Error::InvalidProgram(format!("Kraus operators incomplete (defect {defect:.3e})")));
        }
        Ok(inst)
    }

    /// Deterministic unitary with outcome `"ok"`.
    pub fn unitary<S: Into<String>>(party: Party, labels: impl IntoIterator<Item = S>, u: CMatrix) -> Result<Self> {
        Self::new(party, labels, vec![("ok".into(), u)])
    }

    pub fn gate(party: Party, gate: &GateSpec) -> Result<Self> {
        Self::unitary(party, gate.labels().to_vec(), gate.matrix().clone())
    }

    /// Measures in an orthonormal basis and discards the measured factors.
    pub fn measure_discard<S: Into<String>>(
        party: Party,
        labels: impl IntoIterator<Item = S>,
        basis: Vec<(String, CVector)>,
    ) -> Result<Self> {
        let branches = basis.into_iter().map(|(o, v)| (o, CMatrix::from_row_iterator(1, v.len(), v.iter().map(|z| z.conj())))).collect();
        Self::new(party, labels, branches)
    }

    /// Projective measurement that keeps the measured factors.
    pub fn measure_keep<S: Into<String>>(
        party: Party,
        labels: impl IntoIterator<Item = S>,
        basis: Vec<(String, CVector)>,
    ) -> Result<Self> {
        let branches = basis.into_iter().map(|(o, v)| (o, qmath::projector(&v))).collect();
        Self::new(party, labels, branches)
    }

    pub fn input_dim(&self) -> usize {
        self.branches.first().map_or(0, |b| b.kraus.ncols())
    }

    pub fn discards(&self) -> bool {
        self.branches.first().is_some_and(|b| b.kraus.nrows() == 1 && b.kraus.ncols() > 1)
    }

    fn check_shape(&self) -> Result<()> {
        let Some(first) = self.branches.first() else {
            return Err(Error::InvalidProgram("instrument without branches".into()));
        };
        let d = first.kraus.ncols();
        let rows = first.kraus.nrows();
        if rows != d && rows != 1 {
            return Err(Error::InvalidProgram(format!("Kraus operator of shape {rows}x{d}")));
        }
        for b in &self.branches {
            if b.kraus.ncols() != d || b.kraus.nrows() != rows {
                return Err(Error::InvalidProgram("Kraus operators of mixed shapes".into()));
            }
        }
        let mut seen = BTreeSet::new();
        for b in &self.branches {
            if !seen.insert(b.outcome.as_str()) {
                return Err(Error::InvalidProgram(format!("repeated outcome `{}`", b.outcome)));
            }
        }
        Ok(())
    }

    /// `‖Σ K†K − I‖_max`.
    pub fn completeness_defect(&self) -> f64 {
        let d = self.input_dim();
        let mut sum = CMatrix::zeros(d, d);
        for b in &self.branches {
            sum += b.kraus.adjoint() * &b.kraus;
        }
        qmath::max_abs(&(sum - qmath::identity(d)))
    }
}

/// Matches one earlier outcome: `"*"` matches anything, including a skipped
/// step; any other string matches that outcome exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Pattern {
    Any,
    Is(String),
}

impl From<String> for Pattern {
    fn from(s: String) -> Self {
        if s == "*" { Pattern::Any } else { Pattern::Is(s) }
    }
}

impl From<Pattern> for String {
    fn from(p: Pattern) -> Self {
        match p {
            Pattern::Any => "*".into(),
            Pattern::Is(s) => s,
        }
    }
}

impl Pattern {
    pub fn is(s: impl Into<String>) -> Self {
        Pattern::Is(s.into())
    }

    pub fn matches(&self, outcome: Option<&str>) -> bool {
        match self {
            Pattern::Any => true,
            Pattern::Is(s) => outcome == Some(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub when: Vec<Pattern>,
    /// `None` skips the step.
    pub instrument: Option<LocalInstrument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Fixed { instrument: LocalInstrument },
    /// First matching case wins; no match skips the step.
    Conditioned { on: Vec<String>, cases: Vec<Case> },
}

impl Action {
    pub fn instruments(&self) -> Vec<&LocalInstrument> {
        match self {
            Action::Fixed { instrument } => vec![instrument],
            Action::Conditioned { cases, .. } => cases.iter().filter_map(|c| c.instrument.as_ref()).collect(),
        }
    }

    pub fn dependencies(&self) -> &[String] {
        match self {
            Action::Fixed { .. } => &[],
            Action::Conditioned { on, .. } => on,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolStep {
    pub id: String,
    pub party: Party,
    pub action: Action,
    /// Outcome is broadcast to the other party.
    #[serde(default)]
    pub sends_message: bool,
    /// Other-party messages this step waits for without reading them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waits_for: Vec<String>,
}

impl ProtocolStep {
    pub fn local(id: impl Into<String>, instrument: LocalInstrument) -> Self {
        Self {
            id: id.into(),
            party: instrument.party,
            action: Action::Fixed { instrument },
            sends_message: false,
            waits_for: Vec::new(),
        }
    }

    pub fn conditioned(id: impl Into<String>, party: Party, on: Vec<String>, cases: Vec<Case>) -> Self {
        Self {
            id: id.into(),
            party,
            action: Action::Conditioned { on, cases },
            sends_message: false,
            waits_for: Vec::new(),
        }
    }

    /// Runs `instrument` when the single outcome `on` equals `outcome`.
    pub fn when(id: impl Into<String>, on: impl Into<String>, outcome: &str, instrument: LocalInstrument) -> Self {
        let party = instrument.party;
        Self::conditioned(
            id,
            party,
            vec![on.into()],
            vec![Case { when: vec![Pattern::is(outcome)], instrument: Some(instrument) }],
        )
    }

    pub fn sending(mut self) -> Self {
        self.sends_message = true;
        self
    }

    /// Restricts the step to transcripts matching `when` on `on`.
    pub fn guarded(self, on: &[String], when: &[Pattern]) -> Self {
        let action = match self.action {
            Action::Fixed { instrument } => Action::Conditioned {
                on: on.to_vec(),
                cases: vec![Case { when: when.to_vec(), instrument: Some(instrument) }],
            },
            Action::Conditioned { on: inner_on, cases } => Action::Conditioned {
                on: on.iter().chain(&inner_on).cloned().collect(),
                cases: cases
                    .into_iter()
                    .map(|c| Case { when: when.iter().chain(&c.when).cloned().collect(), instrument: c.instrument })
                    .collect(),
            },
        };
        Self { action, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Usage {
    /// Consumed on every branch.
    Always,
    /// Consumed only on branches whose instruments touch it.
    OnDemand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceDecl {
    pub name: String,
    pub state: PureState,
    pub usage: Usage,
}

impl ResourceDecl {
    pub fn labels(&self) -> Vec<String> {
        self.state.layout().labels()
    }
}

/// Maps an input factor to the factor holding it at the end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoPort {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolProgram {
    pub name: String,
    /// Input factors supplied by the initial state.
    pub layout: SystemLayout,
    pub resources: Vec<ResourceDecl>,
    pub steps: Vec<ProtocolStep>,
    pub io: Vec<IoPort>,
}

impl ProtocolProgram {
    pub fn new(name: impl Into<String>, layout: SystemLayout) -> Self {
        Self { name: name.into(), layout, resources: Vec::new(), steps: Vec::new(), io: Vec::new() }
    }

    pub fn with_resource(mut self, name: impl Into<String>, state: PureState, usage: Usage) -> Self {
        self.resources.push(ResourceDecl { name: name.into(), state, usage });
        self
    }

    pub fn with_io(mut self, pairs: &[(&str, &str)]) -> Self {
        self.io = pairs.iter().map(|&(i, o)| IoPort { input: i.into(), output: o.into() }).collect();
        self
    }

    /// Identity ports for every input factor.
    pub fn with_passthrough_io(mut self) -> Self {
        self.io = self.layout.labels().into_iter().map(|l| IoPort { input: l.clone(), output: l }).collect();
        self
    }

    pub fn push(&mut self, step: ProtocolStep) {
        self.steps.push(step);
    }

    pub fn step(&self, id: &str) -> Option<&ProtocolStep> {
        self.steps.iter().find(|s| s.id == id)
    }

    /// Party, dimension and origin of every label the program may touch.
    fn label_table(&self) -> BTreeMap<String, (Party, usize, Option<usize>)> {
        let mut table = BTreeMap::new();
        for s in self.layout.systems() {
            table.insert(s.label.clone(), (s.owner, s.dim, None));
        }
        for (i, r) in self.resources.iter().enumerate() {
            for s in r.state.layout().systems() {
                table.insert(s.label.clone(), (s.owner, s.dim, Some(i)));
            }
        }
        table
    }

    /// Renames every factor with `f` and prefixes every step id.
    pub fn relabeled(&self, f: &dyn Fn(&str) -> String, id_prefix: &str) -> Result<ProtocolProgram> {
        let rename_inst = |inst: &LocalInstrument| LocalInstrument {
            labels: inst.labels.iter().map(|l| f(l)).collect(),
            ..inst.clone()
        };
        let id = |s: &str| format!("{id_prefix}{s}");
        let steps = self
            .steps
            .iter()
            .map(|st| ProtocolStep {
                id: id(&st.id),
                party: st.party,
                action: match &st.action {
                    Action::Fixed { instrument } => Action::Fixed { instrument: rename_inst(instrument) },
                    Action::Conditioned { on, cases } => Action::Conditioned {
                        on: on.iter().map(|s| id(s)).collect(),
                        cases: cases
                            .iter()
                            .map(|c| Case { when: c.when.clone(), instrument: c.instrument.as_ref().map(rename_inst) })
                            .collect(),
                    },
                },
                sends_message: st.sends_message,
                waits_for: st.waits_for.iter().map(|s| id(s)).collect(),
            })
            .collect();
        Ok(ProtocolProgram {
            name: self.name.clone(),
            layout: self.layout.relabeled(f)?,
            resources: self
                .resources
                .iter()
                .map(|r| {
                    Ok(ResourceDecl { name: id(&r.name), state: r.state.relabeled(f)?, usage: r.usage })
                })
                .collect::<Result<_>>()?,
            steps,
            io: self.io.iter().map(|p| IoPort { input: f(&p.input), output: f(&p.output) }).collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidProgram(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateId,
    DuplicateLabel,
    UnknownLabel,
    UnknownReference,
    Ownership,
    Causality,
    Completeness,
    Shape,
}

/// First problem found by [`validate_program`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramViolation {
    pub kind: ViolationKind,
    pub step: Option<String>,
    pub detail: String,
}

impl fmt::Display for ProgramViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.step {
            Some(s) => write!(f, "{:?} at step `{s}`: {}", self.kind, self.detail),
            None => write!(f, "{:?}: {}", self.kind, self.detail),
        }
    }
}

impl From<ProgramViolation> for Error {
    fn from(v: ProgramViolation) -> Self {
        Error::InvalidProgram(v.to_string())
    }
}

fn violation(kind: ViolationKind, step: Option<&str>, detail: impl Into<String>) -> ProgramViolation {
    ProgramViolation { kind, step: step.map(str::to_string), detail: detail.into() }
}

/// Checks ownership, Kraus completeness and causality. A conditioned step
/// may read its own party's earlier outcomes and the other party's earlier
/// outcomes that were sent as messages.
pub fn validate_program(program: &ProtocolProgram) -> std::result::Result<(), ProgramViolation> {
    use ViolationKind::*;
    let mut labels: BTreeMap<String, Party> = BTreeMap::new();
    for s in program.layout.systems() {
        labels.insert(s.label.clone(), s.owner);
    }
    let mut names = BTreeSet::new();
    for r in &program.resources {
        if !names.insert(r.name.as_str()) {
            return Err(violation(DuplicateId, None, format!("resource `{}` declared twice", r.name)));
        }
        for s in r.state.layout().systems() {
            if labels.insert(s.label.clone(), s.owner).is_some() {
                return Err(violation(DuplicateLabel, None, format!("label `{}` declared twice", s.label)));
            }
            if s.owner == Party::Referee {
                return Err(violation(Ownership, None, format!("resource `{}` holds referee factor `{}`", r.name, s.label)));
            }
        }
    }
    for p in &program.io {
        if !program.layout.contains(&p.input) {
            return Err(violation(UnknownLabel, None, format!("io input `{}` is not an input factor", p.input)));
        }
        if !labels.contains_key(&p.output) {
            return Err(violation(UnknownLabel, None, format!("io output `{}` is unknown", p.output)));
        }
    }

    let mut seen: HashMap<&str, &ProtocolStep> = HashMap::new();
    for step in &program.steps {
        let id = Some(step.id.as_str());
        if seen.contains_key(step.id.as_str()) {
            return Err(violation(DuplicateId, id, "step id repeated"));
        }
        if step.party == Party::Referee {
            return Err(violation(Ownership, id, "the referee cannot act"));
        }
        for inst in step.action.instruments() {
            if inst.party != step.party {
                return Err(violation(Ownership, id, "instrument party differs from step party"));
            }
            if let Err(e) = inst.check_shape() {
                return Err(violation(Shape, id, e.to_string()));
            }
            let mut dim = 1;
            for l in &inst.labels {
                match labels.get(l) {
                    None => return Err(violation(UnknownLabel, id, format!("label `{l}`"))),
                    Some(&owner) if owner != step.party => {
                        return Err(violation(Ownership, id, format!("`{l}` belongs to {owner:?}")));
                    }
                    Some(_) => {}
                }
                dim *= program
                    .layout
                    .get(l)
                    .map(|s| s.dim)
                    .or_else(|_| {
                        program
                            .resources
                            .iter()
                            .find_map(|r| r.state.layout().get(l).ok().map(|s| s.dim))
                            .ok_or(())
                    })
                    .unwrap_or(0);
            }
            if dim != inst.input_dim() {
                return Err(violation(Shape, id, format!("Kraus width {} on factors of dimension {dim}", inst.input_dim())));
            }
            let defect = inst.completeness_defect();
            if defect > COMPLETENESS_TOL {
                return Err(violation(Completeness, id, format!("Σ K†K deviates from I by {defect:.3e}")));
            }
        }
        if let Action::Conditioned { on, cases } = &step.action {
            for case in cases {
                if case.when.len() != on.len() {
                    return Err(violation(Shape, id, "case pattern length differs from dependency list"));
                }
            }
            for dep in on {
                let Some(src) = seen.get(dep.as_str()) else {
                    return Err(violation(UnknownReference, id, format!("`{dep}` is not an earlier step")));
                };
                if src.party != step.party && !src.sends_message {
                    return Err(violation(
                        Causality,
                        id,
                        format!("reads outcome of `{dep}`, which {:?} never sent", src.party),
                    ));
                }
            }
        }
        for dep in &step.waits_for {
            match seen.get(dep.as_str()) {
                None => return Err(violation(UnknownReference, id, format!("`{dep}` is not an earlier step"))),
                Some(src) if src.party == step.party || !src.sends_message => {
                    return Err(violation(Causality, id, format!("`{dep}` is not a message from the other party")));
                }
                Some(_) => {}
            }
        }
        seen.insert(step.id.as_str(), step);
    }
    Ok(())
}

pub type Transcript = Vec<(String, Option<String>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLeaf {
    /// Outcome of every step in order; `None` for skipped steps.
    pub transcript: Transcript,
    pub probability: f64,
    pub state: PureState,
    /// Names of the resources this branch consumed.
    pub touched: Vec<String>,
}

impl BranchLeaf {
    pub fn outcome(&self, id: &str) -> Option<&str> {
        self.transcript.iter().find(|(s, _)| s == id).and_then(|(_, o)| o.as_deref())
    }

    /// Outcomes of non-trivial steps, e.g. `p1.measure_a=-, p1.measure_b=chi`.
    pub fn transcript_key(&self) -> String {
        self.transcript
            .iter()
            .filter_map(|(s, o)| o.as_ref().filter(|o| o.as_str() != "ok").map(|o| format!("{s}={o}")))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchTree {
    pub leaves: Vec<BranchLeaf>,
}

impl BranchTree {
    pub fn total_probability(&self) -> f64 {
        self.leaves.iter().map(|l| l.probability).sum()
    }

    /// Trace of `Σ p |leaf⟩⟨leaf|`.
    pub fn mixture_trace(&self) -> f64 {
        self.leaves.iter().map(|l| l.probability * l.state.amplitudes().norm_squared()).sum()
    }
}

struct Simulator<'a> {
    program: &'a ProtocolProgram,
    owner_of_label: HashMap<String, usize>,
}

#[derive(Clone)]
struct Node {
    state: PureState,
    probability: f64,
    transcript: Transcript,
    touched: Vec<usize>,
}

impl<'a> Simulator<'a> {
    fn new(program: &'a ProtocolProgram, initial: &PureState) -> Result<Self> {
        validate_program(program)?;
        for s in program.layout.systems() {
            let given = initial.layout().get(&s.label)?;
            if given.dim != s.dim {
                return Err(Error::DimensionMismatch(format!(
                    "input `{}` has dimension {} but the program expects {}",
                    s.label, given.dim, s.dim
                )));
            }
        }
        let mut owner_of_label = HashMap::new();
        for (i, r) in program.resources.iter().enumerate() {
            for l in r.labels() {
                if initial.layout().contains(&l) {
                    return Err(Error::LabelConflict(format!("initial state already holds resource factor `{l}`")));
                }
                owner_of_label.insert(l, i);
            }
        }
        Ok(Self { program, owner_of_label })
    }

    fn root(&self, initial: &PureState) -> Node {
        let touched = self
            .program
            .resources
            .iter()
            .enumerate()
            .filter(|(_, r)| r.usage == Usage::Always)
            .map(|(i, _)| i)
            .collect();
        Node { state: initial.clone(), probability: 1.0, transcript: Vec::new(), touched }
    }

    fn choose(&self, step: &'a ProtocolStep, transcript: &Transcript) -> Option<&'a LocalInstrument> {
        match &step.action {
            Action::Fixed { instrument } => Some(instrument),
            Action::Conditioned { on, cases } => {
                let outcomes: Vec<Option<&str>> = on
                    .iter()
                    .map(|d| transcript.iter().find(|(s, _)| s == d).and_then(|(_, o)| o.as_deref()))
                    .collect();
                cases
                    .iter()
                    .find(|c| c.when.iter().zip(&outcomes).all(|(p, o)| p.matches(*o)))
                    .and_then(|c| c.instrument.as_ref())
            }
        }
    }

    /// Tensors in resources the instrument needs that are not yet present.
    fn bring_in(&self, node: &mut Node, inst: &LocalInstrument) -> Result<()> {
        for l in &inst.labels {
            if node.state.layout().contains(l) {
                continue;
            }
            let Some(&r) = self.owner_of_label.get(l) else {
                return Err(Error::UnknownLabel(l.clone()));
            };
            if self.resource_was_loaded(node, r) {
                return Err(Error::InvalidProgram(format!("factor `{l}` was already discarded")));
            }
            let next = node.state.tensor(&self.program.resources[r].state)?;
            if next.layout().total_dim() > MAX_STATE_DIM {
                return Err(Error::TooLarge(next.layout().total_dim(), MAX_STATE_DIM));
            }
            node.state = next;
            if !node.touched.contains(&r) {
                node.touched.push(r);
            }
            node.transcript.push((format!("load:{}", self.program.resources[r].name), None));
        }
        Ok(())
    }

    fn resource_was_loaded(&self, node: &Node, r: usize) -> bool {
        let key = format!("load:{}", self.program.resources[r].name);
        node.transcript.iter().any(|(s, _)| *s == key)
    }

    /// Children of `node` after applying `inst`, with pruned branches removed.
    fn branch(&self, node: &Node, step: &ProtocolStep, inst: &LocalInstrument) -> Result<Vec<Node>> {
        let mut node = node.clone();
        self.bring_in(&mut node, inst)?;
        let mut total = 0.0;
        let mut children = Vec::new();
        for b in &inst.branches {
            let (layout, amps) = node.state.apply_raw(&b.kraus, &inst.labels)?;
            let weight = amps.norm_squared();
            total += weight;
            let probability = node.probability * weight;
            if probability <= PRUNE_PROBABILITY {
                continue;
            }
            let amps = amps / c(weight.sqrt(), 0.0);
            let mut transcript = node.transcript.clone();
            transcript.push((step.id.clone(), Some(b.outcome.clone())));
            children.push(Node {
                state: PureState::normalized(layout, amps)?,
                probability,
                transcript,
                touched: node.touched.clone(),
            });
        }
        if (total - 1.0).abs() > NORM_DRIFT_TOL {
            return Err(Error::NormDrift(total));
        }
        Ok(children)
    }

    fn finish(&self, mut node: Node) -> Result<BranchLeaf> {
        for (r, res) in self.program.resources.iter().enumerate() {
            if res.usage == Usage::Always && !self.resource_was_loaded(&node, r) {
                let next = node.state.tensor(&res.state)?;
                if next.layout().total_dim() > MAX_STATE_DIM {
                    return Err(Error::TooLarge(next.layout().total_dim(), MAX_STATE_DIM));
                }
                node.state = next;
            }
        }
        let mut touched: Vec<usize> = node.touched;
        touched.sort_unstable();
        Ok(BranchLeaf {
            transcript: node.transcript.into_iter().filter(|(s, _)| !s.starts_with("load:")).collect(),
            probability: node.probability,
            state: node.state,
            touched: touched.into_iter().map(|i| self.program.resources[i].name.clone()).collect(),
        })
    }

    fn run(&self, node: Node, at: usize, leaves: &mut Vec<BranchLeaf>) -> Result<()> {
        let Some(step) = self.program.steps.get(at) else {
            leaves.push(self.finish(node)?);
            return Ok(());
        };
        match self.choose(step, &node.transcript) {
            None => {
                let mut node = node;
                node.transcript.push((step.id.clone(), None));
                self.run(node, at + 1, leaves)
            }
            Some(inst) => {
                for child in self.branch(&node, step, inst)? {
                    self.run(child, at + 1, leaves)?;
                }
                Ok(())
            }
        }
    }
}

/// Enumerates every branch of `program` on `initial`. The initial state
/// must hold the program's input factors and may hold further factors
/// (typically referee purifications) that no step touches.
pub fn run_exhaustive(program: &ProtocolProgram, initial: &PureState) -> Result<BranchTree> {
    let sim = Simulator::new(program, initial)?;
    sim.check_initial_size(initial)?;
    let mut leaves = Vec::new();
    sim.run(sim.root(initial), 0, &mut leaves)?;
    Ok(BranchTree { leaves })
}

/// Follows a single branch, drawing each outcome with its Born probability.
pub fn run_sampled<R: Rng + ?Sized>(program: &ProtocolProgram, initial: &PureState, rng: &mut R) -> Result<BranchLeaf> {
    let sim = Simulator::new(program, initial)?;
    sim.check_initial_size(initial)?;
    let mut node = sim.root(initial);
    for step in &program.steps {
        match sim.choose(step, &node.transcript) {
            None => node.transcript.push((step.id.clone(), None)),
            Some(inst) => {
                let children = sim.branch(&node, step, inst)?;
                let weights: Vec<f64> = children.iter().map(|ch| ch.probability).collect();
                let total: f64 = weights.iter().sum();
                let mut draw = rng.random::<f64>() * total;
                let mut pick = children.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if draw < *w {
                        pick = i;
                        break;
                    }
                    draw -= w;
                }
                node = children.into_iter().nth(pick).expect("at least one branch survives");
            }
        }
    }
    let mut leaf = sim.finish(node)?;
    leaf.probability = 1.0;
    Ok(leaf)
}

impl Simulator<'_> {
    fn check_initial_size(&self, initial: &PureState) -> Result<()> {
        let d = initial.layout().total_dim();
        if d > MAX_STATE_DIM {
            return Err(Error::TooLarge(d, MAX_STATE_DIM));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "A->B")]
    AliceToBob,
    #[serde(rename = "B->A")]
    BobToAlice,
    #[serde(rename = "simultaneous")]
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundType {
    A,
    B,
    C,
    D,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundProfile {
    pub round_count: usize,
    pub round_type: RoundType,
    pub directions: Vec<Direction>,
}

/// Round index of every message step, starting at 1.
///
/// A message sits one round after the latest other-party message it
/// depends on, either directly (through a condition or an explicit wait)
/// or through the factors it acts on and its own party's earlier outcomes.
/// Steps touching disjoint factors do not delay each other.
pub fn message_levels(program: &ProtocolProgram) -> Vec<(String, Party, usize)> {
    // knowledge level carried by each step outcome and each factor
    let mut step_level: HashMap<&str, (Party, usize, bool)> = HashMap::new();
    let mut label_level: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::new();
    for step in &program.steps {
        let instruments = step.action.instruments();
        let labels = instruments.iter().flat_map(|i| i.labels.iter().map(String::as_str));
        let mut seen = labels.clone().filter_map(|l| label_level.get(l).copied()).max().unwrap_or(0);
        for dep in step.action.dependencies().iter().chain(&step.waits_for) {
            if let Some(&(party, level, sent)) = step_level.get(dep.as_str()) {
                seen = seen.max(match (party == step.party, sent) {
                    (false, true) => level,
                    (false, false) => 0,
                    (true, true) => level - 1,
                    (true, false) => level,
                });
            }
        }
        for l in labels {
            label_level.insert(l, seen);
        }
        if step.sends_message {
            step_level.insert(step.id.as_str(), (step.party, seen + 1, true));
            out.push((step.id.clone(), step.party, seen + 1));
        } else {
            step_level.insert(step.id.as_str(), (step.party, seen, false));
        }
    }
    out
}

pub fn classify_rounds(program: &ProtocolProgram) -> RoundProfile {
    let levels = message_levels(program);
    let count = levels.iter().map(|m| m.2).max().unwrap_or(0);
    let directions: Vec<Direction> = (1..=count)
        .map(|k| {
            let alice = levels.iter().any(|m| m.2 == k && m.1 == Party::Alice);
            let bob = levels.iter().any(|m| m.2 == k && m.1 == Party::Bob);
            match (alice, bob) {
                (true, true) => Direction::Simultaneous,
                (true, false) => Direction::AliceToBob,
                _ => Direction::BobToAlice,
            }
        })
        .collect();
    let simultaneous = directions.contains(&Direction::Simultaneous);
    let round_type = match (count, simultaneous) {
        (1, false) => RoundType::A,
        (1, true) => RoundType::D,
        (2, false) => RoundType::B,
        (3, false) => RoundType::C,
        _ => RoundType::Other,
    };
    RoundProfile { round_count: count, round_type, directions }
}

/// Delays one party's messages in every simultaneous round until the other
/// party's message of that round has arrived. Instruments are unchanged,
/// so the branch tree is identical.
pub fn serialize_simultaneous(program: &ProtocolProgram) -> Result<ProtocolProgram> {
    let mut out = program.clone();
    for _ in 0..=program.steps.len() {
        let levels = message_levels(&out);
        let Some(level) = (1..=levels.iter().map(|m| m.2).max().unwrap_or(0)).find(|&k| {
            levels.iter().any(|m| m.2 == k && m.1 == Party::Alice) && levels.iter().any(|m| m.2 == k && m.1 == Party::Bob)
        }) else {
            return Ok(out);
        };
        let at_level: Vec<&(String, Party, usize)> = levels.iter().filter(|m| m.2 == level).collect();
        let first_party = at_level[0].1;
        let leaders: Vec<String> = at_level.iter().filter(|m| m.1 == first_party).map(|m| m.0.clone()).collect();
        let position = |steps: &[ProtocolStep], id: &str| steps.iter().position(|s| s.id == id).expect("message step exists");
        let followers: Vec<String> = at_level.iter().filter(|m| m.1 != first_party).map(|m| m.0.clone()).collect();
        for f in followers {
            let fp = position(&out.steps, &f);
            let waits: Vec<String> = leaders.iter().filter(|l| position(&out.steps, l) < fp).cloned().collect();
            if waits.is_empty() {
                return Err(Error::InvalidProgram(format!("message `{f}` cannot be delayed behind its round")));
            }
            let step = &mut out.steps[fp];
            for w in waits {
                if !step.waits_for.contains(&w) {
                    step.waits_for.push(w);
                }
            }
        }
    }
    Err(Error::InvalidProgram("simultaneous rounds could not be serialized".into()))
}

/// Sequential composition. Resources of `second` whose factors are all
/// produced by `first` are treated as supplied by it and dropped.
pub fn compose_merge(first: &ProtocolProgram, second: &ProtocolProgram) -> Result<ProtocolProgram> {
    let first_labels = first.label_table();
    let first_outputs: BTreeSet<&str> = first.io.iter().map(|p| p.output.as_str()).collect();
    let discarded: BTreeSet<&str> = first
        .steps
        .iter()
        .flat_map(|s| s.action.instruments())
        .filter(|i| i.discards())
        .flat_map(|i| i.labels.iter().map(String::as_str))
        .collect();
    let available = |l: &str| (first_labels.contains_key(l) || first_outputs.contains(l)) && !discarded.contains(l);

    let ids: BTreeSet<&str> = first.steps.iter().map(|s| s.id.as_str()).collect();
    if let Some(dup) = second.steps.iter().find(|s| ids.contains(s.id.as_str())) {
        return Err(Error::LabelConflict(format!("step id `{}` used by both programs", dup.id)));
    }

    let mut layout = first.layout.clone();
    for s in second.layout.systems() {
        match first_labels.get(&s.label) {
            Some(&(owner, dim, _)) if owner != s.owner || dim != s.dim => {
                return Err(Error::LabelConflict(format!("factor `{}` differs between programs", s.label)));
            }
            Some(_) => {}
            None => layout = layout.concat(&SystemLayout::new(vec![s.clone()])?)?,
        }
    }

    let mut resources = first.resources.clone();
    for r in &second.resources {
        let labels = r.labels();
        let supplied = labels.iter().filter(|l| available(l)).count();
        if supplied == labels.len() {
            for s in r.state.layout().systems() {
                let &(owner, dim, _) = first_labels.get(&s.label).expect("supplied label");
                if owner != s.owner || dim != s.dim {
                    return Err(Error::LabelConflict(format!("factor `{}` differs between programs", s.label)));
                }
            }
            continue;
        }
        if supplied > 0 {
            return Err(Error::LabelConflict(format!("resource `{}` partially overlaps the first program", r.name)));
        }
        if resources.iter().any(|q| q.name == r.name) {
            return Err(Error::LabelConflict(format!("resource name `{}` used by both programs", r.name)));
        }
        resources.push(r.clone());
    }

    let mut io: Vec<IoPort> = first
        .io
        .iter()
        .map(|p| match second.io.iter().find(|q| q.input == p.output) {
            Some(q) => IoPort { input: p.input.clone(), output: q.output.clone() },
            None => p.clone(),
        })
        .collect();
    for q in &second.io {
        if !first.io.iter().any(|p| p.output == q.input) {
            io.push(q.clone());
        }
    }

    let mut steps = first.steps.clone();
    steps.extend(second.steps.iter().cloned());
    let merged = ProtocolProgram {
        name: format!("{}+{}", first.name, second.name),
        layout,
        resources,
        steps,
        io,
    };
    validate_program(&merged)?;
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCost {
    pub transcript: String,
    pub probability: f64,
    pub ebits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementLedger {
    /// Entanglement entropy of every declared resource, summed.
    pub resource_ebits: f64,
    /// Part of the cost paid on every branch.
    pub unconditional_ebits: f64,
    /// On-demand resources consumed by each branch.
    pub per_branch: Vec<BranchCost>,
    pub expected_ebits: f64,
}

/// Entanglement entropy of a resource across the Alice|Bob cut.
pub fn resource_entropy(r: &ResourceDecl) -> Result<f64> {
    let alice = r.state.layout().owned_by(Party::Alice);
    let bob = r.state.layout().owned_by(Party::Bob);
    if alice.is_empty() || bob.is_empty() || alice.len() + bob.len() != r.state.layout().len() {
        return Err(Error::NotBipartite(r.name.clone()));
    }
    r.state.entanglement_entropy(&alice)
}

pub fn ledger(program: &ProtocolProgram, tree: &BranchTree) -> Result<EntanglementLedger> {
    let mut ebits = HashMap::new();
    let mut resource_ebits = 0.0;
    let mut unconditional = 0.0;
    for r in &program.resources {
        let e = resource_entropy(r)?;
        resource_ebits += e;
        if r.usage == Usage::Always {
            unconditional += e;
        }
        ebits.insert(r.name.as_str(), (e, r.usage));
    }
    let per_branch: Vec<BranchCost> = tree
        .leaves
        .iter()
        .map(|leaf| BranchCost {
            transcript: leaf.transcript_key(),
            probability: leaf.probability,
            ebits: leaf
                .touched
                .iter()
                .filter_map(|n| ebits.get(n.as_str()))
                .filter(|(_, u)| *u == Usage::OnDemand)
                .map(|(e, _)| e)
                .sum(),
        })
        .collect();
    let expected = unconditional + per_branch.iter().map(|b| b.probability * b.ebits).sum::<f64>();
    Ok(EntanglementLedger { resource_ebits, unconditional_ebits: unconditional, per_branch, expected_ebits: expected })
}

/// Factor order used to compare a leaf against the target: io outputs in
/// port order, then every untouched initial factor.
fn comparison_labels(program: &ProtocolProgram, initial: &PureState) -> Result<(Vec<String>, Vec<String>)> {
    let mut before = Vec::new();
    let mut after = Vec::new();
    for p in &program.io {
        if initial.layout().contains(&p.input) {
            before.push(p.input.clone());
            after.push(p.output.clone());
        }
    }
    for l in initial.layout().labels() {
        if program.io.iter().any(|p| p.input == l) {
            continue;
        }
        if program.layout.contains(&l) {
            return Err(Error::UnknownLabel(format!("input `{l}` has no output port")));
        }
        before.push(l.clone());
        after.push(l);
    }
    Ok((before, after))
}

/// Per-leaf fidelity `⟨ψ|ρ_leaf|ψ⟩` with `ψ` the target applied to
/// `initial`, where `ρ_leaf` is the leaf reduced to the outputs and the
/// untouched initial factors.
pub fn branch_fidelities(
    program: &ProtocolProgram,
    tree: &BranchTree,
    target: &GateSpec,
    initial: &PureState,
) -> Result<Vec<f64>> {
    for l in target.labels() {
        if !program.io.iter().any(|p| &p.input == l) {
            return Err(Error::UnknownLabel(format!("target factor `{l}` is not a program input")));
        }
    }
    let (before, after) = comparison_labels(program, initial)?;
    let ideal = initial.apply_gate(target)?.permuted(&before)?.amplitudes().clone();
    tree.leaves
        .iter()
        .map(|leaf| {
            let rest: Vec<String> = leaf.state.layout().labels().into_iter().filter(|l| !after.contains(l)).collect();
            let order: Vec<String> = after.iter().chain(&rest).cloned().collect();
            let v = leaf.state.permuted(&order)?;
            let dk = v.layout().dim_of(&after)?;
            if dk != ideal.len() {
                return Err(Error::DimensionMismatch(format!(
                    "output dimension {dk} differs from target dimension {}",
                    ideal.len()
                )));
            }
            let dr = v.amplitudes().len() / dk;
            let m = CMatrix::from_fn(dk, dr, |i, j| v.amplitudes()[i * dr + j]);
            let proj = ideal.adjoint() * m;
            Ok(proj.norm_squared())
        })
        .collect()
}

/// `1 − F` between the target applied to `initial` and the branch-averaged
/// output.
pub fn protocol_error_of(
    program: &ProtocolProgram,
    tree: &BranchTree,
    target: &GateSpec,
    initial: &PureState,
) -> Result<f64> {
    let f = branch_fidelities(program, tree, target, initial)?;
    let fid: f64 = tree.leaves.iter().zip(&f).map(|(l, f)| l.probability * f).sum();
    Ok((1.0 - fid).max(0.0))
}

pub fn protocol_error(program: &ProtocolProgram, target: &GateSpec, initial: &PureState) -> Result<f64> {
    let tree = run_exhaustive(program, initial)?;
    protocol_error_of(program, &tree, target, initial)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// Cut with the referee grouped with Alice.
    pub initial_alice_side: f64,
    pub final_alice_side: f64,
    /// Cut with the referee grouped with Bob.
    pub initial_bob_side: f64,
    pub final_bob_side: f64,
    pub holds: bool,
}

pub const MONOTONICITY_TOL: f64 = 1e-8;

/// Branch-averaged entanglement entropy across Alice|Bob before and after
/// the protocol, counting unconsumed resources on both sides. LOCC cannot
/// increase it on average.
pub fn monotonicity_diagnostic(
    program: &ProtocolProgram,
    tree: &BranchTree,
    initial: &PureState,
) -> Result<MonotonicityReport> {
    let side = |state: &PureState, referee_with: Party| -> Result<f64> {
        let cut: Vec<String> = state
            .layout()
            .systems()
            .iter()
            .filter(|s| s.owner == Party::Alice || (s.owner == Party::Referee && referee_with == Party::Alice))
            .map(|s| s.label.clone())
            .collect();
        state.entanglement_entropy(&cut)
    };
    let mut resources = 0.0;
    let mut ebits = HashMap::new();
    for r in &program.resources {
        let e = resource_entropy(r)?;
        resources += e;
        ebits.insert(r.name.as_str(), e);
    }
    let mut report = MonotonicityReport {
        initial_alice_side: side(initial, Party::Alice)? + resources,
        final_alice_side: 0.0,
        initial_bob_side: side(initial, Party::Bob)? + resources,
        final_bob_side: 0.0,
        holds: true,
    };
    for leaf in &tree.leaves {
        let unused: f64 = ebits
            .iter()
            .filter(|(n, _)| !leaf.touched.iter().any(|t| t == *n))
            .map(|(_, e)| e)
            .sum();
        report.final_alice_side += leaf.probability * (side(&leaf.state, Party::Alice)? + unused);
        report.final_bob_side += leaf.probability * (side(&leaf.state, Party::Bob)? + unused);
    }
    report.holds = report.final_alice_side <= report.initial_alice_side + MONOTONICITY_TOL
        && report.final_bob_side <= report.initial_bob_side + MONOTONICITY_TOL;
    Ok(report)
}
