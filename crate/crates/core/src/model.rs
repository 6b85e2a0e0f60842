//! Subsystem layouts, states, gates and the generalized Clifford recognizer.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmath::{self, c, CMatrix, CVector, ProbabilityVector, C64};

/// Who may act on a subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Alice,
    Bob,
    /// Reference systems that no instrument may touch.
    Referee,
}

impl Party {
    pub fn other(self) -> Party {
        match self {
            Party::Alice => Party::Bob,
            Party::Bob => Party::Alice,
            Party::Referee => Party::Referee,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsystem {
    pub label: String,
    pub dim: usize,
    pub owner: Party,
}

impl Subsystem {
    pub fn new(label: impl Into<String>, dim: usize, owner: Party) -> Self {
        Self { label: label.into(), dim, owner }
    }
}

/// Ordered tensor factors. The first factor is the most significant index.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Subsystem>", into = "Vec<Subsystem>")]
pub struct SystemLayout {
    systems: Vec<Subsystem>,
}

impl TryFrom<Vec<Subsystem>> for SystemLayout {
    type Error = Error;
    fn try_from(systems: Vec<Subsystem>) -> Result<Self> {
        SystemLayout::new(systems)
    }
}

impl From<SystemLayout> for Vec<Subsystem> {
    fn from(l: SystemLayout) -> Self {
        l.systems
    }
}

impl SystemLayout {
    pub fn new(systems: Vec<Subsystem>) -> Result<Self> {
        for (i, s) in systems.iter().enumerate() {
            if s.dim < 2 {
                return Err(Error::Domain(format!("subsystem `{}` has dimension {}", s.label, s.dim)));
            }
            if systems[..i].iter().any(|t| t.label == s.label) {
                return Err(Error::DuplicateLabel(s.label.clone()));
            }
        }
        Ok(Self { systems })
    }

    /// Shorthand for `(label, dim, owner)` triples.
    pub fn of(entries: &[(&str, usize, Party)]) -> Result<Self> {
        Self::new(entries.iter().map(|&(l, d, o)| Subsystem::new(l, d, o)).collect())
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn systems(&self) -> &[Subsystem] {
        &self.systems
    }

    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.systems.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.systems.iter().map(|s| s.dim).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.systems.iter().map(|s| s.dim).product()
    }

    pub fn labels(&self) -> Vec<String> {
        self.systems.iter().map(|s| s.label.clone()).collect()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.systems.iter().any(|s| s.label == label)
    }

    pub fn get(&self, label: &str) -> Result<&Subsystem> {
        self.systems
            .iter()
            .find(|s| s.label == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn position(&self, label: &str) -> Result<usize> {
        self.systems
            .iter()
            .position(|s| s.label == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn positions<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<usize>> {
        labels.iter().map(|l| self.position(l.as_ref())).collect()
    }

    pub fn dim_of<S: AsRef<str>>(&self, labels: &[S]) -> Result<usize> {
        labels.iter().map(|l| self.get(l.as_ref()).map(|s| s.dim)).product()
    }

    pub fn owned_by(&self, party: Party) -> Vec<String> {
        self.systems
            .iter()
            .filter(|s| s.owner == party)
            .map(|s| s.label.clone())
            .collect()
    }

    /// Appends the factors of `other`; labels must be disjoint.
    pub fn concat(&self, other: &SystemLayout) -> Result<Self> {
        let mut systems = self.systems.clone();
        systems.extend(other.systems.iter().cloned());
        Self::new(systems)
    }

    /// Factors not listed in `labels`, in their original order.
    pub fn without<S: AsRef<str>>(&self, labels: &[S]) -> Self {
        Self {
            systems: self
                .systems
                .iter()
                .filter(|s| !labels.iter().any(|l| l.as_ref() == s.label))
                .cloned()
                .collect(),
        }
    }

    /// Same factors under new labels.
    pub fn relabeled(&self, f: impl Fn(&str) -> String) -> Result<Self> {
        Self::new(
            self.systems
                .iter()
                .map(|s| Subsystem { label: f(&s.label), ..s.clone() })
                .collect(),
        )
    }

    /// Sub-layout in the listed order.
    pub fn select<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self> {
        Self::new(labels.iter().map(|l| self.get(l.as_ref()).cloned()).collect::<Result<_>>()?)
    }
}

/// Normalized state vector over a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    layout: SystemLayout,
    amps: CVector,
}

pub const NORM_TOL: f64 = 1e-10;

impl PureState {
    pub fn new(layout: SystemLayout, amps: CVector) -> Result<Self> {
        if amps.len() != layout.total_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} amplitudes for layout of dimension {}",
                amps.len(),
                layout.total_dim()
            )));
        }
        let norm = amps.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Domain(format!("state norm {norm} is not 1")));
        }
        Ok(Self { layout, amps })
    }

    /// Normalizes `amps` before construction; fails on a zero vector.
    pub fn normalized(layout: SystemLayout, amps: CVector) -> Result<Self> {
        let norm = amps.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Domain("cannot normalize a zero vector".into()));
        }
        Self::new(layout, amps / c(norm, 0.0))
    }

    /// Computational basis state with the given digit for each factor.
    pub fn basis(layout: SystemLayout, digits: &[usize]) -> Result<Self> {
        let dims = layout.dims();
        if digits.len() != dims.len() || digits.iter().zip(&dims).any(|(d, n)| d >= n) {
            return Err(Error::Domain(format!("basis digits {digits:?} do not fit {dims:?}")));
        }
        let st = qmath::strides(&dims);
        let idx: usize = digits.iter().zip(&st).map(|(d, s)| d * s).sum();
        let mut amps = CVector::zeros(layout.total_dim());
        amps[idx] = c(1.0, 0.0);
        Self::new(layout, amps)
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amps
    }

    pub fn into_parts(self) -> (SystemLayout, CVector) {
        (self.layout, self.amps)
    }

    pub fn relabeled(&self, f: impl Fn(&str) -> String) -> Result<PureState> {
        Ok(PureState { layout: self.layout.relabeled(f)?, amps: self.amps.clone() })
    }

    pub fn tensor(&self, other: &PureState) -> Result<PureState> {
        let layout = self.layout.concat(&other.layout)?;
        let amps = self.amps.kronecker(&other.amps);
        Ok(PureState { layout, amps })
    }

    /// Reorders factors so that `order` lists every label exactly once.
    pub fn permuted<S: AsRef<str>>(&self, order: &[S]) -> Result<PureState> {
        if order.len() != self.layout.len() {
            return Err(Error::DimensionMismatch("permutation must list every label".into()));
        }
        let pos = self.layout.positions(order)?;
        let map = qmath::sub_offsets(&self.layout.dims(), &pos);
        let amps = CVector::from_iterator(map.len(), map.iter().map(|&i| self.amps[i]));
        Ok(PureState { layout: self.layout.select(order)?, amps })
    }

    /// Applies `op` to the listed factors. `op` must have as many columns
    /// as the joint dimension of `labels`; if it has a single row those
    /// factors are removed from the layout. The result is not renormalized.
    pub fn apply_raw<S: AsRef<str>>(&self, op: &CMatrix, labels: &[S]) -> Result<(SystemLayout, CVector)> {
        let dims = self.layout.dims();
        let pos = self.layout.positions(labels)?;
        let d_in = self.layout.dim_of(labels)?;
        if op.ncols() != d_in || (op.nrows() != d_in && op.nrows() != 1) {
            return Err(Error::DimensionMismatch(format!(
                "operator {}x{} on factors of joint dimension {d_in}",
                op.nrows(),
                op.ncols()
            )));
        }
        let acting = qmath::sub_offsets(&dims, &pos);
        let rest_pos: Vec<usize> = (0..dims.len()).filter(|i| !pos.contains(i)).collect();
        let rest = qmath::sub_offsets(&dims, &rest_pos);
        let mut block = CVector::zeros(d_in);
        if op.nrows() == d_in {
            let mut out = self.amps.clone();
            for &base in &rest {
                for (k, &o) in acting.iter().enumerate() {
                    block[k] = self.amps[base + o];
                }
                let image = op * &block;
                for (k, &o) in acting.iter().enumerate() {
                    out[base + o] = image[k];
                }
            }
            Ok((self.layout.clone(), out))
        } else {
            let row = op.row(0);
            let out = CVector::from_iterator(
                rest.len(),
                rest.iter().map(|&base| {
                    acting
                        .iter()
                        .enumerate()
                        .map(|(k, &o)| row[k] * self.amps[base + o])
                        .sum::<C64>()
                }),
            );
            Ok((self.layout.without(labels), out))
        }
    }

    /// Applies a unitary on the listed factors.
    pub fn apply<S: AsRef<str>>(&self, op: &CMatrix, labels: &[S]) -> Result<PureState> {
        let (layout, amps) = self.apply_raw(op, labels)?;
        PureState::new(layout, amps)
    }

    pub fn apply_gate(&self, gate: &GateSpec) -> Result<PureState> {
        self.apply(gate.matrix(), gate.labels())
    }

    pub fn density(&self) -> DensityOperator {
        DensityOperator {
            layout: self.layout.clone(),
            matrix: qmath::projector(&self.amps),
        }
    }

    /// Reduced density operator on `keep`, in the listed order.
    pub fn reduced<S: AsRef<str>>(&self, keep: &[S]) -> Result<DensityOperator> {
        let pos = self.layout.positions(keep)?;
        let dims = self.layout.dims();
        let rows = qmath::sub_offsets(&dims, &pos);
        let rest_pos: Vec<usize> = (0..dims.len()).filter(|i| !pos.contains(i)).collect();
        let cols = qmath::sub_offsets(&dims, &rest_pos);
        let m = CMatrix::from_fn(rows.len(), cols.len(), |i, j| self.amps[rows[i] + cols[j]]);
        Ok(DensityOperator {
            layout: self.layout.select(keep)?,
            matrix: &m * m.adjoint(),
        })
    }

    pub fn schmidt_coefficients<S: AsRef<str>>(&self, cut: &[S]) -> Result<ProbabilityVector> {
        let pos = self.layout.positions(cut)?;
        qmath::schmidt_coefficients(&self.amps, &self.layout.dims(), &pos)
    }

    /// Entanglement entropy across `cut` versus the remaining factors.
    pub fn entanglement_entropy<S: AsRef<str>>(&self, cut: &[S]) -> Result<f64> {
        Ok(self.schmidt_coefficients(cut)?.entropy())
    }

    /// `⟨self|other⟩`; layouts must agree.
    pub fn inner(&self, other: &PureState) -> Result<C64> {
        if self.layout != other.layout {
            return Err(Error::DimensionMismatch("layouts differ".into()));
        }
        Ok(self.amps.dotc(&other.amps))
    }
}

/// Positive unit-trace operator over a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    layout: SystemLayout,
    matrix: CMatrix,
}

impl DensityOperator {
    pub fn new(layout: SystemLayout, matrix: CMatrix) -> Result<Self> {
        let d = layout.total_dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} operator for layout of dimension {d}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if d > qmath::MAX_OPERATOR_DIM {
            return Err(Error::TooLarge(d, qmath::MAX_OPERATOR_DIM));
        }
        let matrix = qmath::hermitize(&matrix)?;
        let tr = qmath::trace(&matrix).re;
        if (tr - 1.0).abs() > 1e-8 {
            return Err(Error::Domain(format!("trace {tr} is not 1")));
        }
        Ok(Self { layout, matrix })
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn partial_trace<S: AsRef<str>>(&self, keep: &[S]) -> Result<DensityOperator> {
        let pos = self.layout.positions(keep)?;
        Ok(DensityOperator {
            layout: self.layout.select(keep)?,
            matrix: qmath::partial_trace(&self.matrix, &self.layout.dims(), &pos)?,
        })
    }

    /// Reorders factors to the listed label order.
    pub fn permuted<S: AsRef<str>>(&self, order: &[S]) -> Result<DensityOperator> {
        let pos = self.layout.positions(order)?;
        Ok(DensityOperator {
            layout: self.layout.select(order)?,
            matrix: qmath::permute_operator(&self.matrix, &self.layout.dims(), &pos)?,
        })
    }

    pub fn entropy(&self) -> Result<f64> {
        qmath::von_neumann_entropy(&self.matrix)
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        qmath::hermitian_eigenvalues(&self.matrix)
    }

    pub fn mutual_information<S: AsRef<str>>(&self, p: &[S], q: &[S]) -> Result<f64> {
        let dims = self.layout.dims();
        qmath::mutual_information(&self.matrix, &dims, &self.layout.positions(p)?, &self.layout.positions(q)?)
    }

    pub fn cqmi<S: AsRef<str>>(&self, p: &[S], q: &[S], r: &[S]) -> Result<f64> {
        let dims = self.layout.dims();
        qmath::cqmi(
            &self.matrix,
            &dims,
            &self.layout.positions(p)?,
            &self.layout.positions(q)?,
            &self.layout.positions(r)?,
        )
    }

    pub fn fidelity(&self, other: &DensityOperator) -> Result<f64> {
        self.same_layout(other)?;
        qmath::fidelity(&self.matrix, &other.matrix)
    }

    pub fn trace_distance(&self, other: &DensityOperator) -> Result<f64> {
        self.same_layout(other)?;
        qmath::trace_distance(&self.matrix, &other.matrix)
    }

    fn same_layout(&self, other: &DensityOperator) -> Result<()> {
        if self.layout.dims() != other.layout.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.layout.dims(),
                other.layout.dims()
            )));
        }
        Ok(())
    }
}

/// A unitary acting on named factors, listed most significant first.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSpec {
    matrix: CMatrix,
    labels: Vec<String>,
}

pub const UNITARY_TOL: f64 = 1e-10;

impl GateSpec {
    pub fn new<S: Into<String>>(matrix: CMatrix, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::with_tolerance(matrix, labels, UNITARY_TOL)
    }

    pub fn with_tolerance<S: Into<String>>(
        matrix: CMatrix,
        labels: impl IntoIterator<Item = S>,
        tol: f64,
    ) -> Result<Self> {
        let defect = qmath::unitarity_defect(&matrix);
        if defect > tol || !defect.is_finite() {
            return Err(Error::NotUnitary(defect));
        }
        Ok(Self { matrix, labels: labels.into_iter().map(Into::into).collect() })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Same operator placed on other factors.
    pub fn on<S: Into<String>>(&self, labels: impl IntoIterator<Item = S>) -> GateSpec {
        GateSpec {
            matrix: self.matrix.clone(),
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn adjoint(&self) -> GateSpec {
        GateSpec { matrix: self.matrix.adjoint(), labels: self.labels.clone() }
    }

    /// Local dimension when the gate acts on two equal factors.
    pub fn bipartite_dim(&self) -> Result<usize> {
        let n = self.matrix.nrows();
        let d = (n as f64).sqrt().round() as usize;
        if d * d != n || d < 2 {
            return Err(Error::DimensionMismatch(format!(
                "gate of dimension {n} is not on two equal factors"
            )));
        }
        Ok(d)
    }
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)])
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)])
}

pub fn ket(entries: &[C64]) -> CVector {
    CVector::from_column_slice(entries)
}

pub fn ket_plus() -> CVector {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    ket(&[c(s, 0.0), c(s, 0.0)])
}

pub fn ket_minus() -> CVector {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    ket(&[c(s, 0.0), c(-s, 0.0)])
}

/// `|0⟩⟨0| ⊗ I + |1⟩⟨1| ⊗ target` with the control as first factor.
pub fn controlled(target: &CMatrix) -> CMatrix {
    let d = target.nrows();
    let mut m = CMatrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&qmath::identity(d));
    m.view_mut((d, d), (d, d)).copy_from(target);
    m
}

pub fn cz() -> CMatrix {
    controlled(&pauli_z())
}

/// CNOT with the control as first factor.
pub fn cnot() -> CMatrix {
    controlled(&pauli_x())
}

pub fn swap(d: usize) -> CMatrix {
    let mut m = CMatrix::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            m[(j * d + i, i * d + j)] = c(1.0, 0.0);
        }
    }
    m
}

/// Qudit SUM gate `|x, y⟩ → |x, y + x mod d⟩`.
pub fn sum_gate(d: usize) -> CMatrix {
    let mut m = CMatrix::zeros(d * d, d * d);
    for x in 0..d {
        for y in 0..d {
            m[(x * d + (x + y) % d, x * d + y)] = c(1.0, 0.0);
        }
    }
    m
}

/// `exp(i φ σ_z)`.
pub fn z_rotation(phi: f64) -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[C64::from_polar(1.0, phi), c(0.0, 0.0), c(0.0, 0.0), C64::from_polar(1.0, -phi)])
}

/// Permutation matrix sending basis state `i` to `perm[i]`.
pub fn permutation_matrix(perm: &[usize]) -> CMatrix {
    let n = perm.len();
    let mut m = CMatrix::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        m[(j, i)] = c(1.0, 0.0);
    }
    m
}

pub fn u_theta_matrix(theta: f64) -> CMatrix {
    let zz = qmath::tensor_product(&pauli_z(), &pauli_z());
    qmath::identity(4) * c((theta / 2.0).cos(), 0.0) + zz * c(0.0, (theta / 2.0).sin())
}

/// True for angles in the gate family's nominal range `(0, π/2]`.
pub fn u_theta_in_domain(theta: f64) -> bool {
    theta > 0.0 && theta <= PI / 2.0
}

/// `cos(θ/2) I⊗I + i sin(θ/2) σ_z⊗σ_z` on factors `A`, `B`.
///
/// Any finite angle is accepted so that correction gates outside the
/// nominal range can be built; see [`u_theta_in_domain`].
pub fn make_u_theta(theta: f64) -> Result<GateSpec> {
    if !theta.is_finite() {
        return Err(Error::Domain(format!("non-finite angle {theta}")));
    }
    GateSpec::new(u_theta_matrix(theta), ["A", "B"])
}

/// `Σ_t |t⟩|t⟩ / √d` on factors `a` (Alice) and `b` (Bob).
pub fn make_bell(d: usize) -> Result<PureState> {
    if d < 2 {
        return Err(Error::Domain(format!("Bell state needs d >= 2, got {d}")));
    }
    let layout = SystemLayout::of(&[("a", d, Party::Alice), ("b", d, Party::Bob)])?;
    Ok(PureState { amps: max_entangled_amps(d), layout })
}

pub(crate) fn max_entangled_amps(d: usize) -> CVector {
    let mut amps = CVector::zeros(d * d);
    let w = c(1.0 / (d as f64).sqrt(), 0.0);
    for t in 0..d {
        amps[t * d + t] = w;
    }
    amps
}

/// Maximally entangled state on two named factors.
pub fn bell_on(d: usize, left: (&str, Party), right: (&str, Party)) -> Result<PureState> {
    let layout = SystemLayout::of(&[(left.0, d, left.1), (right.0, d, right.1)])?;
    PureState::new(layout, max_entangled_amps(d))
}

/// `U† (|Φ_d⟩_{A R_A} ⊗ |Φ_d⟩_{B R_B})` on layout `(A, B, R_A, R_B)`.
pub fn make_choi_inverse(u: &GateSpec) -> Result<PureState> {
    let d = u.bipartite_dim()?;
    let start = bell_on(d, ("A", Party::Alice), ("R_A", Party::Referee))?
        .tensor(&bell_on(d, ("B", Party::Bob), ("R_B", Party::Referee))?)?
        .permuted(&["A", "B", "R_A", "R_B"])?;
    start.apply(&u.matrix().adjoint(), &["A", "B"])
}

/// Generalized Pauli `σ_pq = Σ_t e^{2πi q t/d} |t − p⟩⟨t|` with zero-based
/// indices `p, q ∈ {0, …, d−1}`, on factor `A`.
pub fn generalized_pauli(d: usize, p: usize, q: usize) -> Result<GateSpec> {
    if d < 2 || p >= d || q >= d {
        return Err(Error::Domain(format!("Pauli index ({p}, {q}) out of range for d = {d}")));
    }
    Ok(GateSpec { matrix: pauli_matrix(d, p, q), labels: vec!["A".into()] })
}

pub(crate) fn pauli_matrix(d: usize, p: usize, q: usize) -> CMatrix {
    let mut m = CMatrix::zeros(d, d);
    for t in 0..d {
        let phase = 2.0 * PI * ((q * t) % d) as f64 / d as f64;
        m[((t + d - p) % d, t)] = C64::from_polar(1.0, phase);
    }
    m
}

/// `cos(α/2)|00⟩ + i sin(α/2)|11⟩` on `a` (Alice), `b` (Bob).
pub fn resource_phi_alpha(alpha: f64) -> Result<PureState> {
    if !(alpha > 0.0 && alpha < PI) {
        return Err(Error::Domain(format!("resource angle {alpha} outside (0, π)")));
    }
    let layout = SystemLayout::of(&[("a", 2, Party::Alice), ("b", 2, Party::Bob)])?;
    let mut amps = CVector::zeros(4);
    amps[0] = c((alpha / 2.0).cos(), 0.0);
    amps[3] = c(0.0, (alpha / 2.0).sin());
    PureState::new(layout, amps)
}

/// `(U_{Ã B̃} ⊗ I) |Φ_d⟩_{Ã a} |Φ_d⟩_{B̃ b}` on layout `(At, Bt, a, b)`,
/// where `At`, `a` belong to Alice and `Bt`, `b` to Bob.
pub fn resource_psi_u(u: &GateSpec) -> Result<PureState> {
    let d = u.bipartite_dim()?;
    let start = bell_on(d, ("At", Party::Alice), ("a", Party::Alice))?
        .tensor(&bell_on(d, ("Bt", Party::Bob), ("b", Party::Bob))?)?
        .permuted(&["At", "Bt", "a", "b"])?;
    start.apply(u.matrix(), &["At", "Bt"])
}

/// `(p, q, r, s)` indexing `σ_pq ⊗ σ_rs`.
pub type PauliPair = [usize; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffordEntry {
    pub input: PauliPair,
    pub output: PauliPair,
    /// `θ` in `U (σ_pq ⊗ σ_rs) U† = e^{iθ} σ_p'q' ⊗ σ_r's'`.
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffordTable {
    pub d: usize,
    entries: Vec<CliffordEntry>,
    /// Set when some input matched more than one output.
    pub multiple_matches: bool,
}

impl CliffordTable {
    fn index(d: usize, k: PauliPair) -> usize {
        ((k[0] * d + k[1]) * d + k[2]) * d + k[3]
    }

    pub fn entries(&self) -> &[CliffordEntry] {
        &self.entries
    }

    pub fn lookup(&self, key: PauliPair) -> &CliffordEntry {
        &self.entries[Self::index(self.d, key)]
    }

    /// True when every output occurs exactly once.
    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.entries.len()];
        for e in &self.entries {
            let i = Self::index(self.d, e.output);
            if seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliffordCheck {
    Clifford(CliffordTable),
    NotClifford { first_failing: PauliPair },
}

pub const CLIFFORD_TOL: f64 = 1e-8;

fn pauli_pairs(d: usize) -> impl Iterator<Item = PauliPair> {
    (0..d * d * d * d).map(move |i| [i / (d * d * d), (i / (d * d)) % d, (i / d) % d, i % d])
}

fn pauli_pair_matrix(d: usize, k: PauliPair) -> CMatrix {
    qmath::tensor_product(&pauli_matrix(d, k[0], k[1]), &pauli_matrix(d, k[2], k[3]))
}

/// Searches, for every `σ_pq ⊗ σ_rs`, the `d⁴` phased Pauli products for
/// one equal to `U (σ_pq ⊗ σ_rs) U†` within `tol` (max-entry norm).
pub fn clifford_table(u: &GateSpec, tol: f64) -> Result<CliffordCheck> {
    let d = u.bipartite_dim()?;
    let candidates: Vec<(PauliPair, CMatrix)> = pauli_pairs(d).map(|k| (k, pauli_pair_matrix(d, k))).collect();
    let mut entries = Vec::with_capacity(candidates.len());
    let mut multiple = false;
    for (key, sigma) in &candidates {
        let image = u.matrix() * sigma * u.matrix().adjoint();
        let (row, col) = image
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .map(|(i, _)| (i % image.nrows(), i / image.nrows()))
            .expect("non-empty matrix");
        let mut found: Option<CliffordEntry> = None;
        for (out, cand) in &candidates {
            if cand[(row, col)].norm() < 0.5 {
                continue;
            }
            let ratio = image[(row, col)] / cand[(row, col)];
            let phase = ratio.arg();
            let residual = qmath::max_abs(&(&image - cand * C64::from_polar(1.0, phase)));
            if residual <= tol {
                if found.is_some() {
                    multiple = true;
                } else {
                    found = Some(CliffordEntry { input: *key, output: *out, phase });
                }
            }
        }
        match found {
            Some(e) => entries.push(e),
            None => return Ok(CliffordCheck::NotClifford { first_failing: *key }),
        }
    }
    Ok(CliffordCheck::Clifford(CliffordTable { d, entries, multiple_matches: multiple }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn layout_rejects_duplicates_and_small_dims() {
        assert!(matches!(
            SystemLayout::of(&[("A", 2, Party::Alice), ("A", 2, Party::Bob)]),
            Err(Error::DuplicateLabel(_))
        ));
        assert!(SystemLayout::of(&[("A", 1, Party::Alice)]).is_err());
    }

    #[test]
    fn u_theta_limits() {
        let u0 = make_u_theta(0.0).unwrap();
        assert_abs_diff_eq!(qmath::max_abs(&(u0.matrix() - qmath::identity(4))), 0.0, epsilon = 1e-15);
        let u = make_u_theta(PI / 2.0).unwrap();
        let zz = qmath::tensor_product(&pauli_z(), &pauli_z());
        let expect = (qmath::identity(4) + zz * c(0.0, 1.0)) * c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        assert_abs_diff_eq!(qmath::max_abs(&(u.matrix() - expect)), 0.0, epsilon = 1e-15);
        assert!(make_u_theta(f64::NAN).is_err());
        assert!(!u_theta_in_domain(0.0));
        assert!(u_theta_in_domain(PI / 2.0));
    }

    #[test]
    fn bell_state() {
        let bell = make_bell(2).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(bell.amplitudes()[0].re, s, epsilon = 1e-15);
        assert_abs_diff_eq!(bell.amplitudes()[3].re, s, epsilon = 1e-15);
        let red = bell.reduced(&["a"]).unwrap();
        assert_abs_diff_eq!(qmath::max_abs(&(red.matrix() - qmath::identity(2) * c(0.5, 0.0))), 0.0, epsilon = 1e-15);
        let sc = make_bell(3).unwrap().schmidt_coefficients(&["a"]).unwrap();
        sc.weights().iter().for_each(|&w| assert_abs_diff_eq!(w, 1.0 / 3.0, epsilon = 1e-12));
        assert!(make_bell(1).is_err());
    }

    #[test]
    fn choi_of_identity_and_inverse_cancellation() {
        let id = GateSpec::new(qmath::identity(4), ["A", "B"]).unwrap();
        let choi = make_choi_inverse(&id).unwrap();
        let bells = bell_on(2, ("A", Party::Alice), ("R_A", Party::Referee))
            .unwrap()
            .tensor(&bell_on(2, ("B", Party::Bob), ("R_B", Party::Referee)).unwrap())
            .unwrap()
            .permuted(&["A", "B", "R_A", "R_B"])
            .unwrap();
        assert_abs_diff_eq!(choi.inner(&bells).unwrap().norm(), 1.0, epsilon = 1e-12);

        let u = make_u_theta(0.7).unwrap();
        let undone = make_choi_inverse(&u).unwrap().apply_gate(&u).unwrap();
        assert_abs_diff_eq!(undone.inner(&bells).unwrap().norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pauli_identity_and_z() {
        let id = generalized_pauli(3, 0, 0).unwrap();
        assert_eq!(id.matrix(), &qmath::identity(3));
        let z = generalized_pauli(2, 0, 1).unwrap();
        assert_abs_diff_eq!(qmath::max_abs(&(z.matrix() - pauli_z())), 0.0, epsilon = 1e-15);
        assert!(generalized_pauli(2, 2, 0).is_err());
    }

    #[test]
    fn clifford_identity_maps_to_itself() {
        let id = GateSpec::new(qmath::identity(4), ["A", "B"]).unwrap();
        let CliffordCheck::Clifford(table) = clifford_table(&id, CLIFFORD_TOL).unwrap() else {
            panic!("identity must be Clifford");
        };
        for e in table.entries() {
            assert_eq!(e.input, e.output);
            assert_abs_diff_eq!(e.phase, 0.0, epsilon = 1e-12);
        }
        assert!(table.is_bijection());
        assert!(!table.multiple_matches);
    }

    #[test]
    fn phi_alpha_maximal_and_rejected() {
        let s = resource_phi_alpha(PI / 2.0).unwrap();
        assert_abs_diff_eq!(s.entanglement_entropy(&["a"]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.amplitudes()[3].im, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        let s = resource_phi_alpha(0.5).unwrap();
        assert_abs_diff_eq!(s.amplitudes()[0].re, 0.25f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.amplitudes()[3].im, 0.25f64.sin(), epsilon = 1e-15);
        assert!(resource_phi_alpha(0.0).is_err());
        assert!(resource_phi_alpha(PI).is_err());
    }

    #[test]
    fn psi_u_of_identity_has_no_cross_entanglement() {
        let id = GateSpec::new(qmath::identity(4), ["A", "B"]).unwrap();
        let psi = resource_psi_u(&id).unwrap();
        assert_abs_diff_eq!(psi.entanglement_entropy(&["At", "a"]).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn apply_raw_removes_factor_for_bra() {
        let bell = make_bell(2).unwrap();
        let bra0 = CMatrix::from_row_slice(1, 2, &[c(1.0, 0.0), c(0.0, 0.0)]);
        let (layout, amps) = bell.apply_raw(&bra0, &["a"]).unwrap();
        assert_eq!(layout.labels(), vec!["b".to_string()]);
        assert_abs_diff_eq!(amps.norm_squared(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(amps[0].re, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn layout_serde_roundtrip_validates() {
        let l = SystemLayout::of(&[("A", 2, Party::Alice), ("R", 4, Party::Referee)]).unwrap();
        let json = serde_json::to_string(&l).unwrap();
        assert_eq!(serde_json::from_str::<SystemLayout>(&json).unwrap(), l);
        let dup = r#"[{"label":"A","dim":2,"owner":"alice"},{"label":"A","dim":2,"owner":"bob"}]"#;
        assert!(serde_json::from_str::<SystemLayout>(dup).is_err());
    }
}
