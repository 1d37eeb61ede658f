//! Serde adapters writing dense matrices as arrays of rows.

use nalgebra::DMatrix;
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Builds a matrix from rows; `ncols` is used when `rows` is empty.
pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Option<DMatrix<f64>> {
    let c = rows.first().map_or(ncols, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    to_rows(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(d)?;
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(D::Error::custom("non-finite matrix entry"));
    }
    from_rows(&rows, 0).ok_or_else(|| D::Error::custom("ragged matrix rows"))
}
