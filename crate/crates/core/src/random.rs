//! Seeded random states and unitaries for test inputs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{PureState, SystemLayout};
use crate::qmath::{c, CMatrix, CVector, C64};

pub fn gaussian_complex<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    c(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Uniformly distributed unit vector of length `n`.
pub fn random_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CVector {
    let v = CVector::from_fn(n, |_, _| gaussian_complex(rng));
    let norm = v.norm();
    v / c(norm, 0.0)
}

/// Haar-random unitary via QR of a Ginibre matrix with phase fixing.
pub fn random_unitary<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CMatrix {
    let g = CMatrix::from_fn(d, d, |_, _| gaussian_complex(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        let diag = r[(j, j)];
        let phase = if diag.norm() > 0.0 { diag / diag.norm() } else { c(1.0, 0.0) };
        for i in 0..d {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Random density operator of the given dimension: the reduced state of a
/// random pure state on the system and an equally sized environment.
pub fn random_density<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CMatrix {
    let m = CMatrix::from_fn(d, d, |_, _| gaussian_complex(rng));
    let rho = &m * m.adjoint();
    let tr = crate::qmath::trace(&rho);
    rho / tr
}

pub fn random_pure_state<R: Rng + ?Sized>(layout: SystemLayout, rng: &mut R) -> PureState {
    let v = random_vector(layout.total_dim(), rng);
    PureState::new(layout, v).expect("random vector is normalized")
}
