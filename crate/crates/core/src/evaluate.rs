//! Pruned-versus-dense comparisons: layer reconstruction error, final
//! latent divergence over whole trajectories, and sparsity audits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{CalibrationSet, LayerId, LayerKind, ToyModel};
use crate::obs::SparsitySpec;

/// `trace((W−Ŵ)·(H/2)·(W−Ŵ)ᵀ)`, i.e. `‖WX − ŴX‖²` when `H = 2XXᵀ`.
pub fn layer_recon_error(w: &Matrix, w_hat: &Matrix, h: &Matrix) -> Result<f64> {
    if w.shape() != w_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            w.shape(),
            w_hat.shape()
        )));
    }
    if h.shape() != (w.cols(), w.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "width {} vs Hessian {:?}",
            w.cols(),
            h.shape()
        )));
    }
    let mut total = 0.0;
    let mut delta = vec![0.0; w.cols()];
    for r in 0..w.rows() {
        for ((d, a), b) in delta.iter_mut().zip(w.row(r)).zip(w_hat.row(r)) {
            *d = a - b;
        }
        for (i, &di) in delta.iter().enumerate() {
            if di != 0.0 {
                total += di * linalg::dot(h.row(i), &delta);
            }
        }
    }
    Ok(total / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceStats {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

fn same_shape_family(a: &ToyModel, b: &ToyModel) -> bool {
    let (x, y) = (&a.config, &b.config);
    x.hidden_dim == y.hidden_dim
        && x.num_heads == y.num_heads
        && x.num_blocks == y.num_blocks
        && x.latent_tokens == y.latent_tokens
        && x.cond_tokens == y.cond_tokens
        && x.num_steps == y.num_steps
}

/// Mean squared difference of the final latents, per sample.
pub fn trajectory_divergence(
    dense: &ToyModel,
    pruned: &ToyModel,
    eval_set: &CalibrationSet,
) -> Result<DivergenceStats> {
    if !same_shape_family(dense, pruned) {
        return Err(Error::BadConfig("dense and pruned models have different configs".into()));
    }
    let run = |s| -> Result<f64> {
        let a = dense.run_trajectory(s)?;
        let b = pruned.run_trajectory(s)?;
        let n = a.as_slice().len() as f64;
        Ok(a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n)
    };
    #[cfg(feature = "parallel")]
    let per_sample: Vec<f64> = {
        use rayon::prelude::*;
        eval_set.samples.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let per_sample: Vec<f64> = eval_set.samples.iter().map(run).collect::<Result<_>>()?;
    let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
    let max = per_sample.iter().cloned().fold(0.0, f64::max);
    Ok(DivergenceStats {
        per_sample,
        mean,
        max,
    })
}

/// `sample,divergence` lines for external plotting.
pub fn divergence_csv(stats: &DivergenceStats) -> String {
    let mut out = String::from("sample,divergence\n");
    for (i, d) in stats.per_sample.iter().enumerate() {
        out.push_str(&format!("{i},{d:e}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: LayerId,
    pub zeros: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NmViolation {
    pub layer: LayerId,
    pub row: usize,
    pub group: usize,
    pub zeros: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadUnits {
    pub layer: LayerId,
    pub units: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityAudit {
    pub layers: Vec<LayerSparsity>,
    pub global_zeros: usize,
    pub global_total: usize,
    pub global_fraction: f64,
    /// Groups with fewer zeros than an N:M spec requires.
    pub nm_violations: Vec<NmViolation>,
    /// Groups with more zeros than an N:M spec requires (allowed, but counted).
    pub nm_over_pruned: usize,
    /// FFN neurons whose down-projection column is zero, keyed by down layer.
    pub dead_neurons: Vec<DeadUnits>,
    /// Heads whose slab is zero in both output projections, keyed by `out_a`.
    pub dead_heads: Vec<DeadUnits>,
    /// Partially removed structures (e.g. zero down column with live up row).
    pub structural_violations: Vec<String>,
    pub passed: bool,
}

fn zero_column(w: &Matrix, c: usize) -> bool {
    (0..w.rows()).all(|r| w[(r, c)] == 0.0)
}

fn zero_row(w: &Matrix, r: usize) -> bool {
    w.row(r).iter().all(|&v| v == 0.0)
}

/// Zero-pattern audit of every linear layer. Never fails; problems are
/// listed in the result and clear `passed`.
pub fn sparsity_report(model: &ToyModel, spec: Option<&SparsitySpec>) -> SparsityAudit {
    let mut layers = Vec::new();
    let mut nm_violations = Vec::new();
    let mut nm_over_pruned = 0;
    let mut dead_neurons = Vec::new();
    let mut dead_heads = Vec::new();
    let mut structural_violations = Vec::new();
    let (mut gz, mut gt) = (0, 0);
    let head_dim = model.config.head_dim();

    for id in model.layer_ids() {
        let w = model.weight(id).expect("own layer ids");
        let zeros = w.as_slice().iter().filter(|&&v| v == 0.0).count();
        let total = w.as_slice().len();
        gz += zeros;
        gt += total;
        layers.push(LayerSparsity {
            layer: id,
            zeros,
            total,
            fraction: zeros as f64 / total as f64,
        });
        if let Some(&SparsitySpec::SemiStructured { n, m }) = spec {
            if !w.cols().is_multiple_of(m) {
                structural_violations.push(format!("{id}: width {} not divisible by {m}", w.cols()));
                continue;
            }
            for r in 0..w.rows() {
                for (g, group) in w.row(r).chunks(m).enumerate() {
                    let z = group.iter().filter(|&&v| v == 0.0).count();
                    if z < n {
                        nm_violations.push(NmViolation {
                            layer: id,
                            row: r,
                            group: g,
                            zeros: z,
                        });
                    } else if z > n {
                        nm_over_pruned += 1;
                    }
                }
            }
        }
    }

    let structured = spec.is_some_and(SparsitySpec::is_structured);
    for (bi, blk) in model.blocks.iter().enumerate() {
        for (down_kind, down, up) in [
            (LayerKind::DownA, &blk.down_a, &blk.up_a),
            (LayerKind::DownB, &blk.down_b, &blk.up_b),
        ] {
            let id = LayerId::new(bi, down_kind);
            let dead: Vec<usize> = (0..down.cols()).filter(|&q| zero_column(down, q)).collect();
            if structured {
                for q in 0..down.cols() {
                    if dead.contains(&q) != zero_row(up, q) {
                        structural_violations.push(format!("{id}: neuron {q} only partially removed"));
                    }
                }
            }
            if !dead.is_empty() {
                dead_neurons.push(DeadUnits { layer: id, units: dead });
            }
        }
        let heads = blk.head_count(head_dim);
        let slab_zero = |w: &Matrix, j: usize| (j * head_dim..(j + 1) * head_dim).all(|c| zero_column(w, c));
        let mut dead = Vec::new();
        for j in 0..heads {
            let (za, zb) = (slab_zero(&blk.out_a, j), slab_zero(&blk.out_b, j));
            if za && zb {
                dead.push(j);
            }
            if structured {
                let qkv_zero = (j * head_dim..(j + 1) * head_dim)
                    .all(|r| zero_row(&blk.q, r) && zero_row(&blk.k, r) && zero_row(&blk.v, r));
                if za != zb || (za && !qkv_zero) {
                    structural_violations.push(format!("b{bi}: head {j} only partially removed"));
                }
            }
        }
        if !dead.is_empty() {
            dead_heads.push(DeadUnits {
                layer: LayerId::new(bi, LayerKind::OutA),
                units: dead,
            });
        }
    }

    let passed = nm_violations.is_empty() && structural_violations.is_empty();
    SparsityAudit {
        layers,
        global_zeros: gz,
        global_total: gt,
        global_fraction: if gt == 0 { 0.0 } else { gz as f64 / gt as f64 },
        nm_violations,
        nm_over_pruned,
        dead_neurons,
        dead_heads,
        structural_violations,
        passed,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub divergence: DivergenceStats,
    pub sparsity: SparsityAudit,
    pub eval_seed: u64,
    pub eval_samples: usize,
    pub config: serde_json::Value,
}
