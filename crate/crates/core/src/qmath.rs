//! Dense complex linear algebra and information-theoretic functionals.
//!
//! Operators are stored as dense row-major `DMatrix<Complex64>` over a
//! tensor product of factors whose dimensions are passed explicitly as
//! `dims`. The first factor is the most significant index. All entropies
//! are reported in bits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Eigenvalues at or below this are treated as exact zeros before taking logs.
pub const EIGEN_CLAMP: f64 = 1e-12;
/// Largest tolerated asymmetry before a matrix is rejected as non-Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Largest total dimension of a dense operator.
pub const MAX_OPERATOR_DIM: usize = 1 << 12;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity(d: usize) -> CMatrix {
    CMatrix::identity(d, d)
}

/// Kronecker product `a ⊗ b` with `a` as the more significant factor.
pub fn tensor_product(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Kronecker product of a sequence of factors, left to right.
pub fn tensor_all<'a, I>(factors: I) -> CMatrix
where
    I: IntoIterator<Item = &'a CMatrix>,
{
    factors
        .into_iter()
        .fold(CMatrix::identity(1, 1), |acc, f| acc.kronecker(f))
}

/// Row-major strides of a tensor factorisation.
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Flat offsets of every multi-index over the factors at `positions`, with
/// the first listed position as the most significant digit.
pub(crate) fn sub_offsets(dims: &[usize], positions: &[usize]) -> Vec<usize> {
    let st = strides(dims);
    let mut offsets = vec![0usize];
    for &p in positions {
        let mut next = Vec::with_capacity(offsets.len() * dims[p]);
        for &o in &offsets {
            for digit in 0..dims[p] {
                next.push(o + digit * st[p]);
            }
        }
        offsets = next;
    }
    offsets
}

fn complement(n: usize, positions: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !positions.contains(i)).collect()
}

fn check_positions(dims: &[usize], positions: &[usize]) -> Result<()> {
    for (i, &p) in positions.iter().enumerate() {
        if p >= dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "factor index {p} out of range for {} factors",
                dims.len()
            )));
        }
        if positions[..i].contains(&p) {
            return Err(Error::OverlappingLabels(format!("factor {p}")));
        }
    }
    Ok(())
}

/// Reduced operator on the factors at `keep`, in the order listed.
pub fn partial_trace(rho: &CMatrix, dims: &[usize], keep: &[usize]) -> Result<CMatrix> {
    let total: usize = dims.iter().product();
    if rho.nrows() != total || rho.ncols() != total {
        return Err(Error::DimensionMismatch(format!(
            "operator is {}x{}, factors multiply to {total}",
            rho.nrows(),
            rho.ncols()
        )));
    }
    check_positions(dims, keep)?;
    let kept = sub_offsets(dims, keep);
    let rest = sub_offsets(dims, &complement(dims.len(), keep));
    let mut out = CMatrix::zeros(kept.len(), kept.len());
    for (a, &ka) in kept.iter().enumerate() {
        for (b, &kb) in kept.iter().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for &r in &rest {
                acc += rho[(ka + r, kb + r)];
            }
            out[(a, b)] = acc;
        }
    }
    Ok(out)
}

/// Reorders the tensor factors of an operator so that factor `order[i]`
/// becomes factor `i`.
pub fn permute_operator(rho: &CMatrix, dims: &[usize], order: &[usize]) -> Result<CMatrix> {
    check_positions(dims, order)?;
    if order.len() != dims.len() {
        return Err(Error::DimensionMismatch("permutation must list every factor".into()));
    }
    let map = sub_offsets(dims, order);
    let n = map.len();
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = rho[(map[i], map[j])];
        }
    }
    Ok(out)
}

pub fn dagger(m: &CMatrix) -> CMatrix {
    m.adjoint()
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `max |U†U − I|` entrywise.
pub fn unitarity_defect(u: &CMatrix) -> f64 {
    if !u.is_square() {
        return f64::INFINITY;
    }
    max_abs(&(u.adjoint() * u - identity(u.nrows())))
}

pub fn trace(m: &CMatrix) -> C64 {
    m.diagonal().iter().sum()
}

/// Outer product `|v⟩⟨v|`.
pub fn projector(v: &CVector) -> CMatrix {
    v * v.adjoint()
}

/// Symmetrises a nearly Hermitian matrix, rejecting real asymmetry.
pub fn hermitize(m: &CMatrix) -> Result<CMatrix> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch("operator must be square".into()));
    }
    let adj = m.adjoint();
    let asym = max_abs(&(m - &adj));
    if asym > HERMITIAN_TOL || !asym.is_finite() {
        return Err(Error::NotHermitian(asym));
    }
    Ok((m + adj) * C64::new(0.5, 0.0))
}

/// Real eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Result<Vec<f64>> {
    let h = hermitize(m)?;
    let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Applies `f` to the spectrum of a Hermitian matrix.
pub fn hermitian_function(m: &CMatrix, f: impl Fn(f64) -> f64) -> Result<CMatrix> {
    let h = hermitize(m)?;
    let eig = SymmetricEigen::new(h);
    let v = &eig.eigenvectors;
    let diag = CMatrix::from_diagonal(&CVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&x| C64::new(f(x), 0.0)),
    ));
    Ok(v * diag * v.adjoint())
}

/// `−Σ p log₂ p` with tiny or negative weights contributing nothing.
pub fn shannon_entropy(weights: &[f64]) -> f64 {
    weights
        .iter()
        .filter(|&&p| p > EIGEN_CLAMP)
        .map(|&p| -p * p.log2())
        .sum()
}

/// Von Neumann entropy in bits.
pub fn von_neumann_entropy(rho: &CMatrix) -> Result<f64> {
    let ev = hermitian_eigenvalues(rho)?;
    Ok(shannon_entropy(&ev).max(0.0))
}

/// Binary entropy `h(x)` in bits.
pub fn binary_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("binary entropy argument {x} outside [0, 1]")));
    }
    Ok(shannon_entropy(&[x, 1.0 - x]))
}

fn same_shape(rho: &CMatrix, sigma: &CMatrix) -> Result<()> {
    if rho.shape() != sigma.shape() || !rho.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            rho.shape(),
            sigma.shape()
        )));
    }
    Ok(())
}

/// `A` with `ρ = A A†`, keeping eigenvalues above round-off.
fn square_root_factor(rho: &CMatrix) -> Result<CMatrix> {
    let eig = SymmetricEigen::new(hermitize(rho)?);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x));
    let cutoff = top * f64::EPSILON * rho.nrows() as f64;
    let cols: Vec<CVector> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > cutoff)
        .map(|(i, &x)| eig.eigenvectors.column(i) * C64::new(x.sqrt(), 0.0))
        .collect();
    if cols.is_empty() {
        return Ok(CMatrix::zeros(rho.nrows(), 1));
    }
    Ok(CMatrix::from_columns(&cols))
}

/// Uhlmann fidelity `(Tr √(√ρ σ √ρ))²`, computed as `‖A†B‖₁²` for
/// `ρ = AA†`, `σ = BB†`.
pub fn fidelity(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    same_shape(rho, sigma)?;
    let a = square_root_factor(rho)?;
    let b = square_root_factor(sigma)?;
    let root_trace: f64 = (a.adjoint() * b).singular_values().iter().sum();
    Ok((root_trace * root_trace).clamp(0.0, 1.0))
}

/// Trace norm `‖ρ − σ‖₁`, in `[0, 2]` for states.
pub fn trace_distance(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    same_shape(rho, sigma)?;
    Ok(hermitian_eigenvalues(&(rho - sigma))?
        .iter()
        .map(|x| x.abs())
        .sum())
}

/// Entropy of the reduced operator on `keep`.
pub fn subsystem_entropy(rho: &CMatrix, dims: &[usize], keep: &[usize]) -> Result<f64> {
    if keep.is_empty() {
        return Ok(0.0);
    }
    von_neumann_entropy(&partial_trace(rho, dims, keep)?)
}

fn disjoint(sets: &[&[usize]]) -> Result<()> {
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            if let Some(x) = a.iter().find(|x| b.contains(x)) {
                return Err(Error::OverlappingLabels(format!("factor {x}")));
            }
        }
    }
    Ok(())
}

/// Quantum mutual information `S(P) + S(Q) − S(PQ)`.
pub fn mutual_information(rho: &CMatrix, dims: &[usize], p: &[usize], q: &[usize]) -> Result<f64> {
    disjoint(&[p, q])?;
    let pq: Vec<usize> = p.iter().chain(q).copied().collect();
    Ok(subsystem_entropy(rho, dims, p)? + subsystem_entropy(rho, dims, q)?
        - subsystem_entropy(rho, dims, &pq)?)
}

/// Conditional mutual information `I(P:Q|R)`, with round-off negatives
/// of magnitude at most 1e-8 clamped to zero.
pub fn cqmi(rho: &CMatrix, dims: &[usize], p: &[usize], q: &[usize], r: &[usize]) -> Result<f64> {
    disjoint(&[p, q, r])?;
    let join = |sets: &[&[usize]]| -> Vec<usize> { sets.iter().flat_map(|s| s.iter().copied()).collect() };
    let value = subsystem_entropy(rho, dims, &join(&[p, r]))?
        + subsystem_entropy(rho, dims, &join(&[q, r]))?
        - subsystem_entropy(rho, dims, r)?
        - subsystem_entropy(rho, dims, &join(&[p, q, r]))?;
    Ok(if (-1e-8..0.0).contains(&value) { 0.0 } else { value })
}

/// Squared singular values of the amplitude reshaping across `cut`,
/// in descending order.
pub fn schmidt_coefficients(amps: &CVector, dims: &[usize], cut: &[usize]) -> Result<ProbabilityVector> {
    let total: usize = dims.iter().product();
    if amps.len() != total {
        return Err(Error::DimensionMismatch(format!(
            "{} amplitudes for total dimension {total}",
            amps.len()
        )));
    }
    check_positions(dims, cut)?;
    let rows = sub_offsets(dims, cut);
    let cols = sub_offsets(dims, &complement(dims.len(), cut));
    let m = CMatrix::from_fn(rows.len(), cols.len(), |i, j| amps[rows[i] + cols[j]]);
    let sv = m.singular_values();
    let mut w: Vec<f64> = sv.iter().map(|s| s * s).collect();
    w.sort_by(|a, b| b.total_cmp(a));
    ProbabilityVector::new(w)
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub const SUM_TOL: f64 = 1e-10;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let mut w = weights;
        for x in w.iter_mut() {
            if !x.is_finite() || *x < -1e-12 {
                return Err(Error::Domain(format!("invalid probability weight {x}")));
            }
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Domain(format!("weights sum to {sum}")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        shannon_entropy(&self.0)
    }

    pub fn sorted_desc(&self) -> Vec<f64> {
        let mut w = self.0.clone();
        w.sort_by(|a, b| b.total_cmp(a));
        w
    }

    pub fn support(&self) -> usize {
        self.0.iter().filter(|&&x| x > EIGEN_CLAMP).count()
    }
}

/// True when `p` is majorized by `q`: every partial sum of `p` sorted in
/// descending order is at most the corresponding partial sum of `q`, up
/// to 1e-10. Shorter vectors are padded with zeros.
pub fn is_majorized_by(p: &ProbabilityVector, q: &ProbabilityVector) -> bool {
    let (a, b) = (p.sorted_desc(), q.sorted_desc());
    let n = a.len().max(b.len());
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in 0..n {
        sa += a.get(i).copied().unwrap_or(0.0);
        sb += b.get(i).copied().unwrap_or(0.0);
        if sa > sb + 1e-10 {
            return false;
        }
    }
    true
}
