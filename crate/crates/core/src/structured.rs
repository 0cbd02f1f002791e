//! Structured pruning: whole FFN neurons and whole attention heads.
//!
//! A removed neuron or head is a set of input columns of a projection. The
//! columns are eliminated one at a time with the OBS column update
//! `δW = −W[:,q] / [H⁻¹]_qq · H⁻¹[q,:]` using the inverse of `H` restricted
//! to the columns still alive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::layer_recon_error;
use crate::hessian::InverseFactor;
use crate::linalg::{self, Matrix};
use crate::model::{Block, LayerId, LayerKind, ToyModel};
use crate::obs::{ceil_count, lowest_k};

pub const DEFAULT_RRF_K: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronSaliency {
    pub layer: String,
    pub scores: Vec<f64>,
}

fn column_sq_norms(w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for i in 0..w.rows() {
        for (o, v) in out.iter_mut().zip(w.row(i)) {
            *o += v * v;
        }
    }
    out
}

/// `L_q = Σ_r W[r,q]² / (2[H⁻¹]_qq)` for every input column of `W_down`.
pub fn ffn_neuron_saliency(w_down: &Matrix, inv: &InverseFactor) -> Result<NeuronSaliency> {
    if w_down.cols() != inv.dim() {
        return Err(Error::ShapeMismatch(format!(
            "down projection width {} vs Hessian dim {}",
            w_down.cols(),
            inv.dim()
        )));
    }
    let diag = inv.inverse_diag();
    let scores = column_sq_norms(w_down)
        .into_iter()
        .zip(diag)
        .map(|(s, d)| s / (2.0 * d))
        .collect();
    Ok(NeuronSaliency {
        layer: inv.layer.clone(),
        scores,
    })
}

/// Removes column `support[pos]` of `w` with OBS compensation onto the rest
/// of `support`, given `inv = (H[support, support])⁻¹`.
fn eliminate_column(w: &mut Matrix, support: &mut Vec<usize>, pos: usize, inv: &Matrix) {
    let q = support[pos];
    let d = inv[(pos, pos)];
    for r in 0..w.rows() {
        let scale = w[(r, q)] / d;
        if scale == 0.0 {
            continue;
        }
        for (k, &c) in support.iter().enumerate() {
            w[(r, c)] -= scale * inv[(k, pos)];
        }
    }
    for r in 0..w.rows() {
        w[(r, q)] = 0.0;
    }
    support.remove(pos);
}

/// Eliminates `columns` in the given order, re-inverting the restricted
/// Hessian before every step.
pub(crate) fn eliminate_columns_in_order(w: &mut Matrix, h: &Matrix, columns: &[usize]) -> Result<()> {
    let mut support: Vec<usize> = (0..w.cols()).collect();
    for &q in columns {
        let pos = support
            .iter()
            .position(|&c| c == q)
            .ok_or_else(|| Error::BadSpec(format!("column {q} removed twice")))?;
        let inv = linalg::spd_inverse(&h.principal(&support))?;
        eliminate_column(w, &mut support, pos, &inv);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnPruneResult {
    pub down: Matrix,
    pub up: Matrix,
    /// Removed neurons in removal order.
    pub removed: Vec<usize>,
    pub saliency_trace: Vec<f64>,
    pub recon_error: f64,
}

/// Greedily removes `⌈ratio·F⌉` neurons: each time the lowest-saliency
/// column of `W_down` under the current restricted inverse, compensated on
/// the surviving columns, with the matching row of `W_up` zeroed.
pub fn prune_ffn(w_down: &Matrix, w_up: &Matrix, inv: &InverseFactor, ratio: f64) -> Result<FfnPruneResult> {
    let f = w_down.cols();
    if w_up.rows() != f {
        return Err(Error::ShapeMismatch(format!(
            "up projection has {} rows, down projection {f} columns",
            w_up.rows()
        )));
    }
    if inv.dim() != f {
        return Err(Error::ShapeMismatch(format!("down width {f} vs Hessian dim {}", inv.dim())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::BadSpec(format!("neuron ratio {ratio} must lie in (0, 1)")));
    }
    let count = ceil_count(ratio, f);
    let h = inv.damped_hessian();
    let mut down = w_down.clone();
    let mut up = w_up.clone();
    let mut support: Vec<usize> = (0..f).collect();
    let mut removed = Vec::with_capacity(count);
    let mut trace = Vec::with_capacity(count);
    for _ in 0..count {
        let restricted = linalg::spd_inverse(&h.principal(&support))?;
        let norms = column_sq_norms(&down);
        let scores: Vec<f64> = support
            .iter()
            .enumerate()
            .map(|(p, &q)| norms[q] / (2.0 * restricted[(p, p)]))
            .collect();
        let pos = lowest_k(&scores, 1)[0];
        let q = support[pos];
        trace.push(scores[pos]);
        eliminate_column(&mut down, &mut support, pos, &restricted);
        up.row_mut(q).iter_mut().for_each(|v| *v = 0.0);
        removed.push(q);
    }
    let recon_error = layer_recon_error(w_down, &down, h)?;
    Ok(FfnPruneResult {
        down,
        up,
        removed,
        saliency_trace: trace,
        recon_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

/// How the per-head Hessian block is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadBlockMode {
    /// Invert the head's principal `d×d` submatrix of `H`.
    #[default]
    Submatrix,
    /// Read the head's diagonal block of the full `H⁻¹`.
    InverseBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSaliency {
    pub modality: Modality,
    pub head_dim: usize,
    pub scores: Vec<f64>,
}

impl HeadSaliency {
    pub fn head_count(&self) -> usize {
        self.scores.len()
    }
}

/// `L_j = Σ_k ‖W_j[:,k]‖² / (H_j⁻¹)_kk` over the `d` columns of head `j`.
pub fn head_saliency(
    w_out: &Matrix,
    inv: &InverseFactor,
    head_dim: usize,
    modality: Modality,
    mode: HeadBlockMode,
) -> Result<HeadSaliency> {
    let width = w_out.cols();
    if head_dim == 0 || !width.is_multiple_of(head_dim) {
        return Err(Error::BadSpec(format!(
            "projection width {width} is not divisible by head dim {head_dim}"
        )));
    }
    if inv.dim() != width {
        return Err(Error::ShapeMismatch(format!("width {width} vs Hessian dim {}", inv.dim())));
    }
    let norms = column_sq_norms(w_out);
    let full_diag = inv.inverse_diag();
    let scores = (0..width / head_dim)
        .map(|j| -> Result<f64> {
            let cols: Vec<usize> = (j * head_dim..(j + 1) * head_dim).collect();
            let diag = match mode {
                HeadBlockMode::Submatrix => {
                    linalg::spd_inverse(&inv.damped_hessian().principal(&cols))?.diagonal()
                }
                HeadBlockMode::InverseBlock => cols.iter().map(|&c| full_diag[c]).collect(),
            };
            Ok(cols.iter().zip(diag).map(|(&c, d)| norms[c] / d).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(HeadSaliency {
        modality,
        head_dim,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedHeadRanking {
    pub rrf_k: usize,
    pub rank_a: Vec<usize>,
    pub rank_b: Vec<usize>,
    /// `1/(k + rank_A) + 1/(k + rank_B)` per head.
    pub scores: Vec<f64>,
    /// Heads from least to most important; pruning takes a prefix.
    pub prune_order: Vec<usize>,
}

/// Rank 1 is the most salient head; ties give the lower index the better rank.
fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (r, &j) in idx.iter().enumerate() {
        rank[j] = r + 1;
    }
    rank
}

pub fn rrf_fuse(scores_a: &[f64], scores_b: &[f64], rrf_k: usize) -> Result<FusedHeadRanking> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} head scores",
            scores_a.len(),
            scores_b.len()
        )));
    }
    if rrf_k == 0 {
        return Err(Error::BadConfig("rrf_k must be at least 1".into()));
    }
    let rank_a = ranks(scores_a);
    let rank_b = ranks(scores_b);
    let k = rrf_k as f64;
    let scores: Vec<f64> = rank_a
        .iter()
        .zip(&rank_b)
        .map(|(&a, &b)| 1.0 / (k + a as f64) + 1.0 / (k + b as f64))
        .collect();
    let prune_order = lowest_k(&scores, scores.len());
    Ok(FusedHeadRanking {
        rrf_k,
        rank_a,
        rank_b,
        scores,
        prune_order,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadPruneResult {
    pub block: Block,
    /// Removed heads in ascending order.
    pub removed: Vec<usize>,
    pub ranking: FusedHeadRanking,
    pub saliency_a: HeadSaliency,
    pub saliency_b: HeadSaliency,
    pub recon_error_a: f64,
    pub recon_error_b: f64,
}

/// Removes `⌊ratio·H⌋` shared heads chosen by fused rank. The head slabs of
/// both output projections are eliminated column by column with OBS
/// compensation under each stream's own Hessian; the heads' Q/K/V rows are
/// zeroed so they are dead end to end.
pub fn prune_heads(
    block: &Block,
    head_dim: usize,
    inv_a: &InverseFactor,
    inv_b: &InverseFactor,
    ratio: f64,
    rrf_k: usize,
    mode: HeadBlockMode,
) -> Result<HeadPruneResult> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::BadSpec(format!("head ratio {ratio} must lie in (0, 1)")));
    }
    let saliency_a = head_saliency(&block.out_a, inv_a, head_dim, Modality::A, mode)?;
    let saliency_b = head_saliency(&block.out_b, inv_b, head_dim, Modality::B, mode)?;
    let heads = saliency_a.head_count();
    let ranking = rrf_fuse(&saliency_a.scores, &saliency_b.scores, rrf_k)?;
    let count = ((ratio * heads as f64) + 1e-9).floor() as usize;
    if count >= heads {
        return Err(Error::BadSpec(format!("ratio {ratio} would remove all {heads} heads")));
    }
    let mut removed: Vec<usize> = ranking.prune_order[..count].to_vec();
    removed.sort_unstable();

    let mut out = block.clone();
    let columns: Vec<usize> = removed
        .iter()
        .flat_map(|&j| j * head_dim..(j + 1) * head_dim)
        .collect();
    eliminate_columns_in_order(&mut out.out_a, inv_a.damped_hessian(), &columns)?;
    eliminate_columns_in_order(&mut out.out_b, inv_b.damped_hessian(), &columns)?;
    for &row in &columns {
        for w in [&mut out.q, &mut out.k, &mut out.v] {
            w.row_mut(row).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let recon_error_a = layer_recon_error(&block.out_a, &out.out_a, inv_a.damped_hessian())?;
    let recon_error_b = layer_recon_error(&block.out_b, &out.out_b, inv_b.damped_hessian())?;
    Ok(HeadPruneResult {
        block: out,
        removed,
        ranking,
        saliency_a,
        saliency_b,
        recon_error_a,
        recon_error_b,
    })
}

/// Index maps from a shrunk model back to the original layout.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShrinkMap {
    /// Surviving neuron indices per FFN, keyed by its down projection.
    pub kept_neurons: std::collections::BTreeMap<LayerId, Vec<usize>>,
    /// Surviving head indices per block.
    pub kept_heads: std::collections::BTreeMap<usize, Vec<usize>>,
}

fn select_rows(w: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), w.cols(), |i, j| w[(rows[i], j)])
}

fn select_cols(w: &Matrix, cols: &[usize]) -> Matrix {
    Matrix::from_fn(w.rows(), cols.len(), |i, j| w[(i, cols[j])])
}

/// Physically drops every fully dead neuron (zero down column and zero up
/// row) and every fully dead head (zero slabs in both output projections
/// and zero Q/K/V rows). Removing them leaves the forward pass unchanged.
/// At least one neuron per FFN and one head per block is always kept.
pub fn shrink_model(model: &ToyModel) -> (ToyModel, ShrinkMap) {
    let d = model.config.head_dim();
    let mut out = model.clone();
    let mut map = ShrinkMap::default();
    for (bi, blk) in out.blocks.iter_mut().enumerate() {
        for (down_kind, up_kind) in [(LayerKind::DownA, LayerKind::UpA), (LayerKind::DownB, LayerKind::UpB)] {
            let (down, up) = (blk.weight(down_kind), blk.weight(up_kind));
            let mut kept: Vec<usize> = (0..down.cols())
                .filter(|&q| {
                    let dead = (0..down.rows()).all(|r| down[(r, q)] == 0.0) && up.row(q).iter().all(|&v| v == 0.0);
                    !dead
                })
                .collect();
            if kept.is_empty() {
                kept.push(0);
            }
            let new_down = select_cols(down, &kept);
            let new_up = select_rows(up, &kept);
            *blk.weight_mut(down_kind) = new_down;
            *blk.weight_mut(up_kind) = new_up;
            map.kept_neurons.insert(LayerId::new(bi, down_kind), kept);
        }
        let heads = blk.head_count(d);
        let zero_col = |w: &Matrix, c: usize| (0..w.rows()).all(|r| w[(r, c)] == 0.0);
        let zero_row = |w: &Matrix, r: usize| w.row(r).iter().all(|&v| v == 0.0);
        let mut kept: Vec<usize> = (0..heads)
            .filter(|&j| {
                let dead = (j * d..(j + 1) * d).all(|c| {
                    zero_col(&blk.out_a, c) && zero_col(&blk.out_b, c) && zero_row(&blk.q, c) && zero_row(&blk.k, c) && zero_row(&blk.v, c)
                });
                !dead
            })
            .collect();
        if kept.is_empty() {
            kept.push(0);
        }
        let channels: Vec<usize> = kept.iter().flat_map(|&j| j * d..(j + 1) * d).collect();
        blk.q = select_rows(&blk.q, &channels);
        blk.k = select_rows(&blk.k, &channels);
        blk.v = select_rows(&blk.v, &channels);
        blk.out_a = select_cols(&blk.out_a, &channels);
        blk.out_b = select_cols(&blk.out_b, &channels);
        map.kept_heads.insert(bi, kept);
    }
    (out, map)
}
