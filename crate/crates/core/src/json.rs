//! JSON forms for complex matrices, vectors and pure states.
//!
//! Matrices are written as `{"rows", "cols", "re", "im"}` with the real and
//! imaginary parts flattened in row-major order.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{PureState, SystemLayout};
use crate::qmath::{c, CMatrix, CVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix(m: &CMatrix) -> Self {
        let mut re = Vec::with_capacity(m.len());
        let mut im = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                re.push(m[(i, j)].re);
                im.push(m[(i, j)].im);
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), re, im }
    }

    pub fn to_matrix(&self) -> Result<CMatrix> {
        let n = self.rows * self.cols;
        if self.re.len() != n || self.im.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix with {} real and {} imaginary entries",
                self.rows,
                self.cols,
                self.re.len(),
                self.im.len()
            )));
        }
        Ok(CMatrix::from_fn(self.rows, self.cols, |i, j| {
            let k = i * self.cols + j;
            c(self.re[k], self.im[k])
        }))
    }
}

/// `#[serde(with = "crate::json::matrix")]` adapter.
pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &CMatrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixJson::from_matrix(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CMatrix, D::Error> {
        MatrixJson::deserialize(d)?.to_matrix().map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct VectorJson {
    re: Vec<f64>,
    im: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PureStateJson {
    layout: SystemLayout,
    amplitudes: VectorJson,
}

impl Serialize for PureState {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let amps = self.amplitudes();
        PureStateJson {
            layout: self.layout().clone(),
            amplitudes: VectorJson {
                re: amps.iter().map(|z| z.re).collect(),
                im: amps.iter().map(|z| z.im).collect(),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PureState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = PureStateJson::deserialize(d)?;
        let VectorJson { re, im } = raw.amplitudes;
        if re.len() != im.len() {
            return Err(serde::de::Error::custom("amplitude parts differ in length"));
        }
        let amps = CVector::from_iterator(re.len(), re.iter().zip(&im).map(|(&a, &b)| c(a, b)));
        PureState::new(raw.layout, amps).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_bell, u_theta_matrix};

    #[test]
    fn matrix_roundtrip_is_row_major() {
        let m = u_theta_matrix(0.3);
        let j = MatrixJson::from_matrix(&m);
        assert_eq!(j.re[0], m[(0, 0)].re);
        assert_eq!(j.im[3], m[(0, 3)].im);
        assert_eq!(j.to_matrix().unwrap(), m);
    }

    #[test]
    fn state_roundtrip() {
        let bell = make_bell(3).unwrap();
        let text = serde_json::to_string(&bell).unwrap();
        assert_eq!(serde_json::from_str::<PureState>(&text).unwrap(), bell);
    }

    #[test]
    fn unnormalized_state_rejected() {
        let text = r#"{"layout":[{"label":"a","dim":2,"owner":"alice"}],"amplitudes":{"re":[1,1],"im":[0,0]}}"#;
        assert!(serde_json::from_str::<PureState>(text).is_err());
    }

    #[test]
    fn ragged_matrix_rejected() {
        let j = MatrixJson { rows: 2, cols: 2, re: vec![0.0; 3], im: vec![0.0; 4] };
        assert!(j.to_matrix().is_err());
    }
}
