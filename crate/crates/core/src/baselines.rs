//! Magnitude and Wanda masks. Both zero weights without compensation.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::obs::{ceil_count, lowest_k, select_nm_mask, KeepMask, SparsitySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Obs,
    Wanda,
    Magnitude,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Obs => "obs",
            Method::Wanda => "wanda",
            Method::Magnitude => "magnitude",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "obs" => Ok(Method::Obs),
            "wanda" => Ok(Method::Wanda),
            "magnitude" => Ok(Method::Magnitude),
            _ => Err(Error::BadConfig(format!("unknown method `{s}`"))),
        }
    }
}

impl serde::Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-row mask from an arbitrary non-negative score matrix.
pub fn mask_from_scores(scores: &Matrix, spec: &SparsitySpec) -> Result<KeepMask> {
    let (rows, n) = scores.shape();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = scores.row(r);
        let keep = match *spec {
            SparsitySpec::Unstructured { ratio } => {
                spec.validate()?;
                let mut keep = vec![true; n];
                lowest_k(row, ceil_count(ratio, n))
                    .into_iter()
                    .for_each(|j| keep[j] = false);
                keep
            }
            SparsitySpec::SemiStructured { n: zeros, m } => select_nm_mask(row, zeros, m)?,
            _ => {
                return Err(Error::BadSpec(format!(
                    "{spec} is not supported by mask baselines"
                )))
            }
        };
        out.push(keep);
    }
    if rows == 0 {
        return Ok(KeepMask::all(0, n));
    }
    Ok(KeepMask::from_rows(out))
}

/// Score `|w|`.
pub fn magnitude_mask(w: &Matrix, spec: &SparsitySpec) -> Result<KeepMask> {
    let scores = Matrix::from_fn(w.rows(), w.cols(), |i, j| w[(i, j)].abs());
    mask_from_scores(&scores, spec)
}

/// Score `|w_ij|·‖x_j‖₂`, ranked within each row.
pub fn wanda_mask(w: &Matrix, activation_column_norms: &[f64], spec: &SparsitySpec) -> Result<KeepMask> {
    if activation_column_norms.len() != w.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{} activation norms for width {}",
            activation_column_norms.len(),
            w.cols()
        )));
    }
    let scores = Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        w[(i, j)].abs() * activation_column_norms[j]
    });
    mask_from_scores(&scores, spec)
}

/// Input feature norms `√diag(H/2)` from an accumulated (undamped) Hessian.
pub fn norms_from_hessian(h: &Matrix) -> Vec<f64> {
    h.diagonal().iter().map(|&d| (d / 2.0).max(0.0).sqrt()).collect()
}
