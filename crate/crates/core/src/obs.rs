//! Unstructured and N:M pruning of one linear layer with OBS compensation.
//!
//! Every row of `W` is an independent least-squares problem under the same
//! Hessian. [`prune_layer_blocked`] walks columns left to right so that all
//! restricted inverses come from a single Cholesky factor of `H⁻¹`;
//! [`prune_row_naive`] re-inverts at every removal and serves as the exact
//! reference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::layer_recon_error;
use crate::hessian::InverseFactor;
use crate::linalg::{self, Matrix};

pub const DEFAULT_BLOCK_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SparsitySpec {
    Unstructured { ratio: f64 },
    /// `n` zeros in every consecutive group of `m` weights along a row.
    SemiStructured { n: usize, m: usize },
    FfnNeurons { ratio: f64 },
    Heads { ratio: f64 },
}

impl SparsitySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsitySpec::Unstructured { ratio }
            | SparsitySpec::FfnNeurons { ratio }
            | SparsitySpec::Heads { ratio } => {
                if !(ratio > 0.0 && ratio < 1.0) {
                    return Err(Error::BadSpec(format!("ratio {ratio} must lie strictly in (0, 1)")));
                }
            }
            SparsitySpec::SemiStructured { n, m } => {
                if n == 0 || n >= m {
                    return Err(Error::BadSpec(format!("{n}:{m} needs 0 < n < m")));
                }
            }
        }
        Ok(())
    }

    pub fn is_structured(&self) -> bool {
        matches!(self, SparsitySpec::FfnNeurons { .. } | SparsitySpec::Heads { .. })
    }
}

impl fmt::Display for SparsitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsitySpec::Unstructured { ratio } => write!(f, "unstructured({ratio})"),
            SparsitySpec::SemiStructured { n, m } => write!(f, "{n}:{m}"),
            SparsitySpec::FfnNeurons { ratio } => write!(f, "ffn({ratio})"),
            SparsitySpec::Heads { ratio } => write!(f, "heads({ratio})"),
        }
    }
}

/// Parses a pattern name: `unstructured`, `ffn`, `heads`, or `N:M`.
/// Ratio-based patterns take `ratio`; `N:M` ignores it.
pub fn parse_pattern(pattern: &str, ratio: f64) -> Result<SparsitySpec> {
    let spec = match pattern {
        "unstructured" => SparsitySpec::Unstructured { ratio },
        "ffn" | "ffn-neurons" => SparsitySpec::FfnNeurons { ratio },
        "heads" => SparsitySpec::Heads { ratio },
        other => {
            let (n, m) = other
                .split_once(':')
                .ok_or_else(|| Error::BadSpec(format!("unknown pattern `{other}`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::BadSpec(format!("bad N:M pattern `{other}`")))
            };
            SparsitySpec::SemiStructured {
                n: parse(n)?,
                m: parse(m)?,
            }
        }
    };
    spec.validate()?;
    Ok(spec)
}

impl FromStr for SparsitySpec {
    type Err = Error;
    /// `unstructured:0.5`, `ffn:0.25`, `heads:0.25` or `2:4`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((kind @ ("unstructured" | "ffn" | "ffn-neurons" | "heads"), r)) => {
                let ratio = r
                    .parse()
                    .map_err(|_| Error::BadSpec(format!("bad ratio in `{s}`")))?;
                parse_pattern(kind, ratio)
            }
            _ => parse_pattern(s, 0.0),
        }
    }
}

/// Row-major keep mask; `true` means the weight survives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl KeepMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let keep: Vec<bool> = rows.into_iter().flatten().collect();
        assert_eq!(keep.len(), n * cols, "ragged mask rows");
        Self { rows: n, cols, keep }
    }

    /// Mask of the nonzero entries of `w`.
    pub fn nonzero(w: &Matrix) -> Self {
        Self {
            rows: w.rows(),
            cols: w.cols(),
            keep: w.as_slice().iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.keep[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn pruned_per_row(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| self.row(i).iter().filter(|k| !**k).count())
            .collect()
    }

    /// Zeroes every pruned entry of `w`.
    pub fn apply(&self, w: &mut Matrix) {
        for (v, &k) in w.as_mut_slice().iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub weights: Matrix,
    pub keep_mask: KeepMask,
    /// `‖WX − ŴX‖²` in Gram form under the damped Hessian.
    pub recon_error: f64,
    /// Saliency `L_q` of each removal, in removal order.
    pub saliency_trace: Option<Vec<f64>>,
}

/// Indices of the `k` smallest scores; ties go to the lower index.
pub(crate) fn lowest_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `⌈ratio·len⌉`, tolerant of representation error just above an integer.
pub(crate) fn ceil_count(ratio: f64, len: usize) -> usize {
    let x = ratio * len as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(len)
}

/// Zeros taken from the block `[start, end)` when spreading `ratio` over a
/// row: cumulative rounding, so every block gets `⌈ratio·B⌉` when it divides
/// evenly and each row stays within one weight of `ratio·n`.
pub(crate) fn block_quota(ratio: f64, start: usize, end: usize) -> usize {
    ceil_count(ratio, end) - ceil_count(ratio, start)
}

/// Keep mask with exactly `n` pruned entries per consecutive group of `m`.
pub fn select_nm_mask(saliency_row: &[f64], n: usize, m: usize) -> Result<Vec<bool>> {
    if n >= m || m == 0 {
        return Err(Error::BadSpec(format!("{n}:{m} needs n < m")));
    }
    if !saliency_row.len().is_multiple_of(m) {
        return Err(Error::BadSpec(format!(
            "row length {} is not divisible by {m}",
            saliency_row.len()
        )));
    }
    let mut keep = vec![true; saliency_row.len()];
    for (g, group) in saliency_row.chunks(m).enumerate() {
        for j in lowest_k(group, n) {
            keep[g * m + j] = false;
        }
    }
    Ok(keep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowPruneResult {
    pub weights: Vec<f64>,
    pub keep: Vec<bool>,
    pub recon_error: f64,
    pub saliency_trace: Vec<f64>,
}

/// Exact greedy OBS on one row: at each of `k_remove` steps invert `H`
/// restricted to the surviving support, remove the weight with the lowest
/// `w_q² / (2[H⁻¹]_qq)`, and apply the optimal update to the rest.
pub fn prune_row_naive(w: &[f64], h_damped: &Matrix, k_remove: usize) -> Result<RowPruneResult> {
    let n = w.len();
    if h_damped.shape() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "row width {n} vs Hessian {:?}",
            h_damped.shape()
        )));
    }
    if k_remove > n {
        return Err(Error::BadSpec(format!("cannot remove {k_remove} of {n} weights")));
    }
    let mut cur = w.to_vec();
    let mut support: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(k_remove);
    for _ in 0..k_remove {
        let inv = linalg::spd_inverse(&h_damped.principal(&support))?;
        let mut best = 0;
        let mut best_score = f64::INFINITY;
        for (p, &q) in support.iter().enumerate() {
            let score = cur[q] * cur[q] / (2.0 * inv[(p, p)]);
            if score < best_score {
                best = p;
                best_score = score;
            }
        }
        let q = support[best];
        let scale = cur[q] / inv[(best, best)];
        for (p, &j) in support.iter().enumerate() {
            cur[j] -= scale * inv[(p, best)];
        }
        cur[q] = 0.0;
        support.remove(best);
        trace.push(best_score);
    }
    let mut keep = vec![false; n];
    support.iter().for_each(|&j| keep[j] = true);
    let delta = Matrix::from_vec(1, n, w.iter().zip(&cur).map(|(a, b)| a - b).collect())?;
    let recon_error = gram_error(&delta, h_damped);
    Ok(RowPruneResult {
        weights: cur,
        keep,
        recon_error,
        saliency_trace: trace,
    })
}

fn gram_error(delta: &Matrix, h: &Matrix) -> f64 {
    (0..delta.rows())
        .map(|r| {
            let d = delta.row(r);
            d.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| v * linalg::dot(h.row(i), d))
                .sum::<f64>()
        })
        .sum::<f64>()
        / 2.0
}

struct RowOutcome {
    weights: Vec<f64>,
    keep: Vec<bool>,
    trace: Vec<f64>,
}

fn prune_row_blocked(w: &[f64], upper: &Matrix, spec: &SparsitySpec, block: usize) -> RowOutcome {
    let n = w.len();
    let mut cur = w.to_vec();
    let mut keep = vec![true; n];
    let mut trace = Vec::new();
    let mut errs = vec![0.0; block];
    let diag: Vec<f64> = (0..n).map(|j| upper[(j, j)]).collect();
    let saliency = |v: f64, j: usize| v * v / (2.0 * diag[j] * diag[j]);

    for i1 in (0..n).step_by(block) {
        let i2 = (i1 + block).min(n);
        if let SparsitySpec::Unstructured { ratio } = *spec {
            let scores: Vec<f64> = (i1..i2).map(|j| saliency(cur[j], j)).collect();
            for p in lowest_k(&scores, block_quota(ratio, i1, i2)) {
                keep[i1 + p] = false;
            }
        }
        errs.iter_mut().for_each(|e| *e = 0.0);
        for j in i1..i2 {
            if let SparsitySpec::SemiStructured { n: zeros, m } = *spec {
                if j % m == 0 {
                    let scores: Vec<f64> = (j..j + m).map(|c| saliency(cur[c], c)).collect();
                    for p in lowest_k(&scores, zeros) {
                        keep[j + p] = false;
                    }
                }
            }
            if keep[j] {
                continue;
            }
            trace.push(saliency(cur[j], j));
            let err = cur[j] / diag[j];
            let urow = upper.row(j);
            for k in j + 1..i2 {
                cur[k] -= err * urow[k];
            }
            cur[j] = 0.0;
            errs[j - i1] = err;
        }
        // lazy flush of this block's removals into the columns to the right
        for k in i2..n {
            let mut s = 0.0;
            for j in i1..i2 {
                s += errs[j - i1] * upper[(j, k)];
            }
            cur[k] -= s;
        }
    }
    RowOutcome {
        weights: cur,
        keep,
        trace,
    }
}

/// Fixed-order OBS over a whole layer in column blocks of `block_size`.
///
/// Unstructured specs pick the lowest-saliency weights of each block when
/// the block is entered; N:M specs pick per group of `m` when the group is
/// entered. Each removal is compensated on the columns to its right.
pub fn prune_layer_blocked(
    w: &Matrix,
    inv: &InverseFactor,
    spec: &SparsitySpec,
    block_size: usize,
) -> Result<PruneResult> {
    spec.validate()?;
    let (rows, n) = w.shape();
    if inv.dim() != n {
        return Err(Error::ShapeMismatch(format!(
            "layer width {n} vs Hessian dim {}",
            inv.dim()
        )));
    }
    if block_size == 0 {
        return Err(Error::BadSpec("block size must be positive".into()));
    }
    match *spec {
        SparsitySpec::Unstructured { .. } => {}
        SparsitySpec::SemiStructured { m, .. } => {
            if n % m != 0 {
                return Err(Error::BadSpec(format!("width {n} is not divisible by {m}")));
            }
            if !block_size.is_multiple_of(m) {
                return Err(Error::BadSpec(format!(
                    "block size {block_size} is not a multiple of {m}"
                )));
            }
        }
        _ => {
            return Err(Error::BadSpec(format!(
                "{spec} is structured; use the structured pruners"
            )))
        }
    }
    let block = block_size.min(n);
    let upper = inv.upper();
    let run = |r: usize| prune_row_blocked(w.row(r), upper, spec, block);
    #[cfg(feature = "parallel")]
    let outcomes: Vec<RowOutcome> = {
        use rayon::prelude::*;
        (0..rows).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<RowOutcome> = (0..rows).map(run).collect();

    let mut weights = Matrix::zeros(rows, n);
    let mut keep = Vec::with_capacity(rows);
    let mut trace = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        weights.row_mut(r).copy_from_slice(&o.weights);
        keep.push(o.keep);
        trace.extend(o.trace);
    }
    let recon_error = layer_recon_error(w, &weights, inv.damped_hessian())?;
    Ok(PruneResult {
        weights,
        keep_mask: KeepMask::from_rows(keep),
        recon_error,
        saliency_trace: Some(trace),
    })
}
