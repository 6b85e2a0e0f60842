//! Closed-form costs, the channel whose fixed point bounds two-round
//! protocols, and typical-set error terms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::model::{bell_on, make_u_theta, DensityOperator, GateSpec, Party, SystemLayout};
use crate::qmath::{self, binary_entropy, c, CMatrix, CVector, ProbabilityVector, C64};

/// `sin²α / (2(1 − cos θ cos α))`.
pub fn success_prob(theta: f64, alpha: f64) -> Result<f64> {
    if !theta.is_finite() || !alpha.is_finite() {
        return Err(Error::Domain("non-finite angle".into()));
    }
    let denom = 2.0 * (1.0 - theta.cos() * alpha.cos());
    if denom <= 0.0 {
        return Err(Error::Domain(format!("success probability undefined at θ = {theta}, α = {alpha}")));
    }
    Ok(alpha.sin().powi(2) / denom)
}

/// Success probability at the resource angle `α = √θ`.
pub fn p_theta(theta: f64) -> Result<f64> {
    check_theta(theta)?;
    success_prob(theta, theta.sqrt())
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= PI / 2.0) {
        return Err(Error::Domain(format!("θ = {theta} outside (0, π/2]")));
    }
    Ok(())
}

/// Schmidt weights `(cos²(√θ/2), sin²(√θ/2))` of the resource state.
pub fn lambda_theta(theta: f64) -> Result<ProbabilityVector> {
    check_theta(theta)?;
    let half = theta.sqrt() / 2.0;
    ProbabilityVector::new(vec![half.cos().powi(2), half.sin().powi(2)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurvePoint {
    pub theta: f64,
    pub p_theta: f64,
    pub h_theta: f64,
    pub e_bar: f64,
}

/// `Ē_θ = 1 − p_θ + h(cos²(√θ/2))`.
pub fn e_bar(theta: f64) -> Result<CostCurvePoint> {
    check_theta(theta)?;
    let p = p_theta(theta)?;
    let h = binary_entropy((theta.sqrt() / 2.0).cos().powi(2))?;
    Ok(CostCurvePoint { theta, p_theta: p, h_theta: h, e_bar: 1.0 - p + h })
}

/// `steps` evenly spaced points on `[theta_min, theta_max]`.
pub fn cost_curve(theta_min: f64, theta_max: f64, steps: usize) -> Result<Vec<CostCurvePoint>> {
    if !(theta_min > 0.0 && theta_min < theta_max && theta_max <= PI / 2.0) || steps < 2 {
        return Err(Error::Domain(format!(
            "need 0 < θmin < θmax ≤ π/2 and at least 2 steps, got [{theta_min}, {theta_max}] with {steps}"
        )));
    }
    (0..steps)
        .map(|i| {
            let t = if i + 1 == steps {
                theta_max
            } else {
                theta_min + (theta_max - theta_min) * i as f64 / (steps - 1) as f64
            };
            e_bar(t)
        })
        .collect()
}

pub const THRESHOLD_GRID: usize = 1000;
pub const THRESHOLD_LOW: f64 = 1e-4;
pub const BISECTION_TOL: f64 = 1e-10;

/// Smallest root of `Ē_θ = 1` in `(10⁻⁴, π/2]`.
pub fn threshold() -> Result<f64> {
    threshold_in(THRESHOLD_LOW, PI / 2.0, THRESHOLD_GRID, BISECTION_TOL)
}

/// Brackets the first sign change of `Ē_θ − 1` on a grid, then bisects.
pub fn threshold_in(lo: f64, hi: f64, grid: usize, tol: f64) -> Result<f64> {
    let f = |t: f64| e_bar(t).map(|p| p.e_bar - 1.0);
    let points: Vec<f64> = (0..grid).map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64).collect();
    let mut bracket = None;
    let mut prev = (points[0], f(points[0])?);
    for &t in &points[1..] {
        let v = f(t)?;
        if prev.1 == 0.0 {
            return Ok(prev.0);
        }
        if prev.1.signum() != v.signum() {
            bracket = Some((prev.0, t));
            break;
        }
        prev = (t, v);
    }
    let Some((mut a, mut b)) = bracket else {
        return Err(Error::NoSignChange(format!("Ē_θ − 1 keeps its sign on [{lo}, {hi}]")));
    };
    let fa_sign = f(a)?.signum();
    while b - a > tol {
        let m = 0.5 * (a + b);
        let fm = f(m)?;
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa_sign {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Superoperator on row-major vectorized `d × d` operators:
/// `vec(X)[i·d + j] = X[i, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub d: usize,
    pub superop: CMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CptpReport {
    /// Largest entry of `Tr_out Choi − I`.
    pub trace_defect: f64,
    pub min_choi_eigenvalue: f64,
    pub ok: bool,
}

pub const CPTP_TOL: f64 = 1e-8;

fn vectorize(x: &CMatrix) -> CVector {
    let d = x.nrows();
    CVector::from_fn(d * d, |k, _| x[(k / d, k % d)])
}

fn unvectorize(v: &CVector, d: usize) -> CMatrix {
    CMatrix::from_fn(d, d, |i, j| v[i * d + j])
}

fn unit(d: usize, i: usize, j: usize) -> CMatrix {
    let mut m = CMatrix::zeros(d, d);
    m[(i, j)] = c(1.0, 0.0);
    m
}

impl ChannelMatrix {
    /// Builds the superoperator of a linear map given on matrix units.
    pub fn from_map(d: usize, map: impl Fn(&CMatrix) -> Result<CMatrix>) -> Result<Self> {
        let mut superop = CMatrix::zeros(d * d, d * d);
        for i in 0..d {
            for j in 0..d {
                let image = map(&unit(d, i, j))?;
                superop.set_column(i * d + j, &vectorize(&image));
            }
        }
        Ok(Self { d, superop })
    }

    pub fn from_kraus(ops: &[CMatrix]) -> Result<Self> {
        let d = ops.first().map(|k| k.nrows()).ok_or_else(|| Error::Domain("no Kraus operators".into()))?;
        Self::from_map(d, |x| Ok(ops.iter().map(|k| k * x * k.adjoint()).fold(CMatrix::zeros(d, d), |a, b| a + b)))
    }

    pub fn apply(&self, x: &CMatrix) -> CMatrix {
        unvectorize(&(&self.superop * vectorize(x)), self.d)
    }

    /// `Σ_ij |i⟩⟨j| ⊗ E(|i⟩⟨j|)`, unnormalized, input factor first.
    pub fn choi(&self) -> CMatrix {
        let d = self.d;
        let mut choi = CMatrix::zeros(d * d, d * d);
        for i in 0..d {
            for j in 0..d {
                let image = self.apply(&unit(d, i, j));
                choi.view_mut((i * d, j * d), (d, d)).copy_from(&image);
            }
        }
        choi
    }

    pub fn cptp_report(&self) -> Result<CptpReport> {
        let d = self.d;
        let mut defect: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let tr = qmath::trace(&self.apply(&unit(d, i, j)));
                let expect = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((tr - c(expect, 0.0)).norm());
            }
        }
        let choi = self.choi();
        let asym = qmath::max_abs(&(&choi - choi.adjoint()));
        let min_eig = if asym > CPTP_TOL {
            f64::NEG_INFINITY
        } else {
            qmath::hermitian_eigenvalues(&qmath::hermitize(&choi).map_err(|e| Error::NotCptp(e.to_string()))?)?
                .first()
                .copied()
                .unwrap_or(0.0)
        };
        Ok(CptpReport {
            trace_defect: defect,
            min_choi_eigenvalue: min_eig,
            ok: defect <= CPTP_TOL && min_eig >= -CPTP_TOL,
        })
    }

    /// Applies the channel to the first factor of a `d·r`-dimensional
    /// operator whose second factor has dimension `r`.
    pub fn apply_first(&self, rho: &CMatrix, r: usize) -> CMatrix {
        let d = self.d;
        let mut out = CMatrix::zeros(d * r, d * r);
        let mut block = CMatrix::zeros(d, d);
        for s in 0..r {
            for t in 0..r {
                for a in 0..d {
                    for b in 0..d {
                        block[(a, b)] = rho[(a * r + s, b * r + t)];
                    }
                }
                let image = self.apply(&block);
                for a in 0..d {
                    for b in 0..d {
                        out[(a * r + s, b * r + t)] = image[(a, b)];
                    }
                }
            }
        }
        out
    }
}

/// `τ ↦ Tr_{B R_B}[U (Tr_B[U† (τ ⊗ I/d) U] ⊗ Φ_{B R_B}) U†]` on `A`.
pub fn e_u_channel(u: &GateSpec, d: usize) -> Result<ChannelMatrix> {
    if u.bipartite_dim()? != d {
        return Err(Error::DimensionMismatch(format!("gate is not on two {d}-dimensional factors")));
    }
    let m = u.matrix();
    let pi_b = qmath::identity(d) * c(1.0 / d as f64, 0.0);
    let phi = bell_on(d, ("B", Party::Bob), ("R_B", Party::Referee))?.density();
    let u_ab = qmath::tensor_product(m, &qmath::identity(d));
    let channel = ChannelMatrix::from_map(d, |tau| {
        let inner = m.adjoint() * qmath::tensor_product(tau, &pi_b) * m;
        let reduced = qmath::partial_trace(&inner, &[d, d], &[0])?;
        let joint = qmath::tensor_product(&reduced, phi.matrix());
        let out = &u_ab * joint * u_ab.adjoint();
        qmath::partial_trace(&out, &[d, d, d], &[0])
    })?;
    let report = channel.cptp_report()?;
    if !report.ok {
        return Err(Error::NotCptp(format!(
            "trace defect {:.3e}, smallest Choi eigenvalue {:.3e}",
            report.trace_defect, report.min_choi_eigenvalue
        )));
    }
    Ok(channel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CesaroMethod {
    Spectral,
    Iterative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CesaroResult {
    /// State on `(A, R_A)`.
    pub state: DensityOperator,
    pub method: CesaroMethod,
    /// Superoperator eigenvalues of modulus one.
    pub peripheral: Vec<C64>,
}

/// Singular values of `S − I` at or below this count as the fixed space.
pub const NULL_CUTOFF: f64 = 1e-12;
/// Smallest singular value above the cutoff needed to trust the split.
pub const SPECTRAL_GAP: f64 = 1e-10;
pub const CESARO_MAX_TERMS: usize = 1_000_000;
pub const PERIPHERAL_TOL: f64 = 1e-10;

/// Eigenvalues from the complex Schur form, resolving any 2×2 blocks.
pub fn superop_eigenvalues(m: &CMatrix) -> Vec<C64> {
    let (_, t) = m.clone().schur().unpack();
    let n = t.nrows();
    let scale = qmath::max_abs(&t).max(1.0);
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].norm() > 1e-13 * scale {
            let (a, b, cc, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let tr = a + d;
            let det = a * d - b * cc;
            let disc = (tr * tr - det * 4.0).sqrt();
            out.push((tr + disc) / 2.0);
            out.push((tr - disc) / 2.0);
            i += 2;
        } else {
            out.push(t[(i, i)]);
            i += 1;
        }
    }
    out
}

fn max_entangled_density(d: usize) -> Result<CMatrix> {
    Ok(bell_on(d, ("A", Party::Alice), ("R_A", Party::Referee))?.density().matrix().clone())
}

fn state_on_a_ra(d: usize, rho: CMatrix) -> Result<DensityOperator> {
    let layout = SystemLayout::of(&[("A", d, Party::Alice), ("R_A", d, Party::Referee)])?;
    DensityOperator::new(layout, rho)
}

/// Null space basis (as columns) of `m` and the smallest singular value
/// kept out of it.
fn null_space(m: &CMatrix) -> (CMatrix, f64) {
    let svd = m.clone().svd(true, true);
    let v_t = svd.v_t.expect("requested");
    let mut cols = Vec::new();
    let mut gap = f64::INFINITY;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= NULL_CUTOFF {
            cols.push(v_t.row(k).adjoint());
        } else {
            gap = gap.min(s);
        }
    }
    (CMatrix::from_columns(&cols), gap)
}

/// Cesàro mean `lim N⁻¹ Σ_{n=1}^N (E^n ⊗ id)(Φ_d)` on `(A, R_A)`.
pub fn cesaro_fixed_state(channel: &ChannelMatrix) -> Result<CesaroResult> {
    let d = channel.d;
    let s = &channel.superop;
    let peripheral: Vec<C64> = superop_eigenvalues(s)
        .into_iter()
        .filter(|l| l.norm() >= 1.0 - PERIPHERAL_TOL)
        .collect();
    let shifted = s - qmath::identity(d * d);
    let (right, gap_r) = null_space(&shifted);
    let (left, gap_l) = null_space(&shifted.adjoint());
    let phi = max_entangled_density(d)?;
    if right.ncols() > 0 && right.ncols() == left.ncols() && gap_r.min(gap_l) >= SPECTRAL_GAP {
        let overlap = left.adjoint() * &right;
        if let Some(inv) = overlap.try_inverse() {
            let projector = ChannelMatrix { d, superop: &right * inv * left.adjoint() };
            let rho = projector.apply_first(&phi, d);
            return Ok(CesaroResult { state: state_on_a_ra(d, rho)?, method: CesaroMethod::Spectral, peripheral });
        }
    }
    let rho = cesaro_converged(channel, 1e-10)?;
    Ok(CesaroResult { state: state_on_a_ra(d, rho)?, method: CesaroMethod::Iterative, peripheral })
}

/// Average of `(E^n ⊗ id)(Φ_d)` over `n = 1..=terms`.
pub fn cesaro_iterative(channel: &ChannelMatrix, terms: usize) -> Result<CMatrix> {
    let d = channel.d;
    let mut current = max_entangled_density(d)?;
    let mut sum = CMatrix::zeros(d * d, d * d);
    for _ in 0..terms {
        current = channel.apply_first(&current, d);
        sum += &current;
    }
    Ok(sum / c(terms.max(1) as f64, 0.0))
}

/// Doubles the number of terms until two successive means agree.
fn cesaro_converged(channel: &ChannelMatrix, tol: f64) -> Result<CMatrix> {
    let d = channel.d;
    let mut current = max_entangled_density(d)?;
    let mut sum = CMatrix::zeros(d * d, d * d);
    let mut done = 0usize;
    let mut previous: Option<CMatrix> = None;
    let mut target = 1024usize;
    while target <= CESARO_MAX_TERMS {
        while done < target {
            current = channel.apply_first(&current, d);
            sum += &current;
            done += 1;
        }
        let mean = &sum / c(done as f64, 0.0);
        if let Some(p) = &previous {
            if qmath::max_abs(&(&mean - p)) < tol {
                return Ok(mean);
            }
        }
        previous = Some(mean);
        target *= 2;
    }
    Err(Error::NoConvergence(CESARO_MAX_TERMS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovCostReport {
    /// `S(Φ_{U,∞})` in ebits.
    pub cost: f64,
    /// Eigenvalues of the fixed state, ascending.
    pub eigenvalues: Vec<f64>,
    pub method: CesaroMethod,
    pub cptp: CptpReport,
    /// Peripheral eigenvalues of the superoperator as `[re, im]`.
    pub peripheral: Vec<[f64; 2]>,
}

/// Entropy of the Cesàro fixed state of `E_U`.
pub fn markov_cost(u: &GateSpec) -> Result<MarkovCostReport> {
    let d = u.bipartite_dim()?;
    let channel = e_u_channel(u, d)?;
    let cptp = channel.cptp_report()?;
    let fixed = cesaro_fixed_state(&channel)?;
    Ok(MarkovCostReport {
        cost: fixed.state.entropy()?,
        eigenvalues: fixed.state.eigenvalues()?,
        method: fixed.method,
        cptp,
        peripheral: fixed.peripheral.iter().map(|z| [z.re, z.im]).collect(),
    })
}

/// Markov cost of `U_θ`.
pub fn markov_cost_u_theta(theta: f64) -> Result<f64> {
    Ok(markov_cost(&make_u_theta(theta)?)?.cost)
}

fn check_typicality_args(n: usize, delta: f64, lam: &ProbabilityVector) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::Domain(format!("δ = {delta} must be positive")));
    }
    if lam.len() != 2 {
        return Err(Error::Domain("typicality is defined here for binary distributions".into()));
    }
    Ok(())
}

/// `log₂ λ_x` of a sequence with `ones` symbols equal to 1.
fn log2_sequence_prob(n: usize, ones: usize, lam: &ProbabilityVector) -> f64 {
    let w = lam.weights();
    let term = |count: usize, p: f64| if count == 0 { 0.0 } else { count as f64 * p.log2() };
    term(n - ones, w[0]) + term(ones, w[1])
}

/// `2^{−n(H+δ)} ≤ λ_x ≤ 2^{−n(H−δ)}`, evaluated on logarithms.
pub fn is_typical_count(n: usize, ones: usize, delta: f64, lam: &ProbabilityVector) -> bool {
    let lp = log2_sequence_prob(n, ones, lam);
    if !lp.is_finite() {
        return false;
    }
    let h = lam.entropy();
    let nf = n as f64;
    let slack = 1e-12 * nf;
    -nf * (h + delta) - slack <= lp && lp <= -nf * (h - delta) + slack
}

/// Membership of a single sequence.
pub fn is_typical(sequence: &[u8], delta: f64, lam: &ProbabilityVector) -> bool {
    let ones = sequence.iter().filter(|&&b| b == 1).count();
    is_typical_count(sequence.len(), ones, delta, lam)
}

fn ln_count_weight(n: usize, ones: usize, lam: &ProbabilityVector) -> f64 {
    ln_binomial(n as u64, ones as u64) + log2_sequence_prob(n, ones, lam) * std::f64::consts::LN_2
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Total probability of the typical set, summed over type classes.
pub fn typical_weight(n: usize, delta: f64, lam: &ProbabilityVector) -> Result<f64> {
    check_typicality_args(n, delta, lam)?;
    let terms: Vec<f64> = (0..=n)
        .filter(|&k| is_typical_count(n, k, delta, lam))
        .map(|k| ln_count_weight(n, k, lam))
        .collect();
    Ok(log_sum_exp(&terms).exp().min(1.0))
}

/// `1 − typical weight`, summed directly so that it does not underflow.
pub fn atypical_weight(n: usize, delta: f64, lam: &ProbabilityVector) -> Result<f64> {
    check_typicality_args(n, delta, lam)?;
    let terms: Vec<f64> = (0..=n)
        .filter(|&k| !is_typical_count(n, k, delta, lam))
        .map(|k| ln_count_weight(n, k, lam))
        .collect();
    Ok(log_sum_exp(&terms).exp().min(1.0))
}

pub const ENUMERATION_MAX: usize = 20;

/// Typical weight by visiting all `2^n` sequences.
pub fn typical_weight_enumerated(n: usize, delta: f64, lam: &ProbabilityVector) -> Result<f64> {
    check_typicality_args(n, delta, lam)?;
    if n > ENUMERATION_MAX {
        return Err(Error::TooLarge(n, ENUMERATION_MAX));
    }
    let w = lam.weights();
    let mut total = 0.0;
    let mut seq = vec![0u8; n];
    for x in 0..(1usize << n) {
        for (i, s) in seq.iter_mut().enumerate() {
            *s = (x >> i & 1) as u8;
        }
        if is_typical(&seq, delta, lam) {
            total += seq.iter().map(|&b| w[b as usize]).product::<f64>();
        }
    }
    Ok(total)
}

/// `2√(1 − w)` for the resource distribution at `θ`.
pub fn epsilon_n_exact(n: usize, delta: f64, theta: f64) -> Result<f64> {
    Ok(2.0 * atypical_weight(n, delta, &lambda_theta(theta)?)?.sqrt())
}

/// `Pr[#successes < n(p − δ)]` for `n` independent trials.
pub fn binomial_lower_tail(n: usize, p: f64, delta: f64) -> f64 {
    let bound = n as f64 * (p - delta);
    let terms: Vec<f64> = (0..=n)
        .filter(|&k| (k as f64) < bound)
        .map(|k| {
            let kf = k as f64;
            let ln_p = if k == 0 { 0.0 } else { kf * p.ln() };
            let ln_q = if k == n { 0.0 } else { (n - k) as f64 * (1.0 - p).ln() };
            ln_binomial(n as u64, k as u64) + ln_p + ln_q
        })
        .collect();
    log_sum_exp(&terms).exp().min(1.0)
}

pub fn epsilon_prime_exact(n: usize, delta: f64, theta: f64) -> Result<f64> {
    check_typicality_args(n, delta, &lambda_theta(theta)?)?;
    Ok(binomial_lower_tail(n, p_theta(theta)?, delta))
}

/// `exp(−2δ²n)`.
pub fn hoeffding(n: usize, delta: f64) -> f64 {
    (-2.0 * delta * delta * n as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypicalityReport {
    pub n: usize,
    pub delta: f64,
    pub theta: f64,
    pub entropy: f64,
    pub typical_weight: f64,
    pub epsilon_n: f64,
    pub epsilon_prime: f64,
    pub hoeffding: f64,
    pub total_error: f64,
    pub n4_total: f64,
    pub dilution_ebits: f64,
}

pub fn total_error(n: usize, delta: f64, theta: f64) -> Result<TypicalityReport> {
    total_error_with(n, delta, theta, &lambda_theta(theta)?)
}

/// As [`total_error`] with an explicit resource distribution.
pub fn total_error_with(n: usize, delta: f64, theta: f64, lam: &ProbabilityVector) -> Result<TypicalityReport> {
    check_typicality_args(n, delta, lam)?;
    // take each weight from whichever sum is small, so w + (1 − w) is exact
    let tail = atypical_weight(n, delta, lam)?;
    let (weight, atypical) = if tail < 0.5 {
        (1.0 - tail, tail)
    } else {
        let w = typical_weight(n, delta, lam)?;
        (w, 1.0 - w)
    };
    let eps_n = 2.0 * atypical.sqrt();
    let eps_p = binomial_lower_tail(n, p_theta(theta)?, delta);
    let total = eps_n + 2.0 * eps_p;
    let entropy = lam.entropy();
    Ok(TypicalityReport {
        n,
        delta,
        theta,
        entropy,
        typical_weight: weight,
        epsilon_n: eps_n,
        epsilon_prime: eps_p,
        hoeffding: hoeffding(n, delta),
        total_error: total,
        n4_total: (n as f64).powi(4) * total,
        dilution_ebits: n as f64 * (entropy + delta),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `ln y` against `x`; nonpositive `y` are rejected.
pub fn log_linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Domain("need at least two paired points".into()));
    }
    if ys.iter().any(|&y| y.is_nan() || y <= 0.0) {
        return Err(Error::Domain("log fit needs positive values".into()));
    }
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit { slope, intercept, r_squared })
}

/// Reference fixed state `½(|00⟩⟨00| + |11⟩⟨11|)` on `(A, R_A)`.
pub fn dephased_bell() -> CMatrix {
    let mut m = CMatrix::zeros(4, 4);
    m[(0, 0)] = c(0.5, 0.0);
    m[(3, 3)] = c(0.5, 0.0);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn alpha_equal_theta_gives_half() {
        for t in [0.1, 0.5, 1.0, 1.5] {
            assert_abs_diff_eq!(success_prob(t, t).unwrap(), 0.5, epsilon = 1e-14);
        }
        assert!(success_prob(0.0, 0.0).is_err());
    }

    #[test]
    fn e_bar_identity_holds() {
        let p = e_bar(0.5).unwrap();
        assert_eq!(p.e_bar, 1.0 - p.p_theta + p.h_theta);
        assert!(e_bar(0.0).is_err());
        assert!(e_bar(2.0).is_err());
    }

    #[test]
    fn identity_channel() {
        let id = GateSpec::new(qmath::identity(4), ["A", "B"]).unwrap();
        let ch = e_u_channel(&id, 2).unwrap();
        assert_abs_diff_eq!(qmath::max_abs(&(&ch.superop - qmath::identity(4))), 0.0, epsilon = 1e-14);
        let fixed = cesaro_fixed_state(&ch).unwrap();
        assert_abs_diff_eq!(fixed.state.entropy().unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn uniform_lambda_everything_typical() {
        let lam = ProbabilityVector::uniform(2);
        for n in [1, 5, 40] {
            assert_abs_diff_eq!(typical_weight(n, 0.01, &lam).unwrap(), 1.0, epsilon = 1e-12);
            assert_eq!(atypical_weight(n, 0.01, &lam).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_shot_tail() {
        let p = p_theta(0.5).unwrap();
        assert_eq!(epsilon_prime_exact(1, 0.7, 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(epsilon_prime_exact(1, 0.1, 0.5).unwrap(), 1.0 - p, epsilon = 1e-14);
    }

    #[test]
    fn bad_delta_rejected() {
        assert!(total_error(10, 0.0, 0.5).is_err());
        assert!(total_error(10, -1.0, 0.5).is_err());
        assert!(total_error(0, 0.1, 0.5).is_err());
    }

    #[test]
    fn fit_of_exact_exponential() {
        let xs: Vec<f64> = (1..6).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * (-0.5 * x).exp()).collect();
        let fit = log_linear_fit(&xs, &ys).unwrap();
        assert_abs_diff_eq!(fit.slope, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
    }
}
