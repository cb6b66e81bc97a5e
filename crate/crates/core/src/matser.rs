//! Matrix serialization as `{ "rows", "cols", "data": [[row], ...] }`.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct Repr {
    rows: usize,
    cols: usize,
    data: Vec<Vec<f64>>,
}

impl From<&DMatrix<f64>> for Repr {
    fn from(m: &DMatrix<f64>) -> Self {
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl Repr {
    fn into_matrix<E: serde::de::Error>(self) -> Result<DMatrix<f64>, E> {
        if self.data.len() != self.rows || self.data.iter().any(|r| r.len() != self.cols) {
            return Err(E::custom(format!("matrix data does not match {}×{}", self.rows, self.cols)));
        }
        Ok(DMatrix::from_row_iterator(self.rows, self.cols, self.data.into_iter().flatten()))
    }
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    Repr::from(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    Repr::deserialize(d)?.into_matrix()
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(Repr::from).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Option::<Repr>::deserialize(d)?.map(Repr::into_matrix).transpose()
    }
}
