//! Module-package scheduling.
//!
//! Target layers are grouped into Basic Units (layers whose inputs do not
//! depend on each other within one forward pass) and the units into
//! contiguous Module Packages. Packages run in forward order: one
//! trajectory per calibration sample collects timestep-weighted Hessians
//! for every layer of the package on the current model, then the whole
//! package is pruned and written back before the next package is collected.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{magnitude_mask, norms_from_hessian, wanda_mask, Method};
use crate::error::{Error, Result};
use crate::evaluate::layer_recon_error;
use crate::hessian::{
    timestep_weights, HessianAccumulator, InverseFactor, TimestepWeights, WeightScheme, DEFAULT_ALPHA_MAX,
    DEFAULT_ALPHA_MIN, DEFAULT_DAMP,
};
use crate::linalg::Matrix;
use crate::model::{ActivationSink, CalibrationSet, LayerId, LayerKind, ToyModel};
use crate::obs::{prune_layer_blocked, SparsitySpec, DEFAULT_BLOCK_SIZE};
use crate::structured::{prune_ffn, prune_heads, shrink_model, HeadBlockMode, ShrinkMap, DEFAULT_RRF_K};
use crate::tensor_store::{Container, TensorRecord};

pub const DEFAULT_PACKAGES: usize = 4;
pub const DEFAULT_CALIBRATION_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicUnit {
    pub layers: Vec<LayerId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulePackage {
    pub index: usize,
    pub units: Vec<BasicUnit>,
}

impl ModulePackage {
    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.units.iter().flat_map(|u| u.layers.iter().copied())
    }
}

/// Per block, in forward order: `{q,k,v}`, `{out_a,out_b}`,
/// `{ffn_a.up, ffn_b.up}`, `{ffn_a.down, ffn_b.down}`.
pub fn basic_units(model: &ToyModel, exclude_blocks: &[usize]) -> Vec<BasicUnit> {
    use LayerKind::*;
    let groups: [&[LayerKind]; 4] = [&[Q, K, V], &[OutA, OutB], &[UpA, UpB], &[DownA, DownB]];
    (0..model.blocks.len())
        .filter(|b| !exclude_blocks.contains(b))
        .flat_map(|b| {
            groups.iter().map(move |g| BasicUnit {
                layers: g.iter().map(|&k| LayerId::new(b, k)).collect(),
            })
        })
        .collect()
}

/// Splits units into `num_packages` contiguous groups of near-equal size;
/// earlier groups take the remainder.
pub fn partition_units(units: Vec<BasicUnit>, num_packages: usize) -> Result<Vec<ModulePackage>> {
    if num_packages == 0 || num_packages > units.len() {
        return Err(Error::BadConfig(format!(
            "{num_packages} packages requested for {} basic units",
            units.len()
        )));
    }
    let base = units.len() / num_packages;
    let extra = units.len() % num_packages;
    let mut it = units.into_iter();
    Ok((0..num_packages)
        .map(|index| ModulePackage {
            index,
            units: it.by_ref().take(base + usize::from(index < extra)).collect(),
        })
        .collect())
}

pub fn partition_into_packages(model: &ToyModel, num_packages: usize) -> Result<Vec<ModulePackage>> {
    partition_units(basic_units(model, &[]), num_packages)
}

struct HookSink<'a> {
    accs: BTreeMap<LayerId, HessianAccumulator>,
    weights: &'a TimestepWeights,
    scale: f64,
    error: Option<Error>,
}

impl ActivationSink for HookSink<'_> {
    fn wants(&self, layer: LayerId) -> bool {
        self.accs.contains_key(&layer)
    }

    fn record(&mut self, layer: LayerId, step: usize, input: &Matrix) {
        if self.error.is_some() {
            return;
        }
        let alpha = self.weights.alpha(step) * self.scale;
        if let Some(acc) = self.accs.get_mut(&layer) {
            if let Err(e) = acc.accumulate_tokens(input, alpha) {
                self.error = Some(e.in_layer(&layer.to_string()));
            }
        }
    }
}

fn input_width(model: &ToyModel, id: LayerId) -> Result<usize> {
    Ok(model.weight(id)?.cols())
}

/// One full trajectory per calibration sample with hooks on `layers`;
/// step `t` contributes `2·α_t·XᵀX / N` so the result is
/// `2 Σ_t α_t · mean_samples(X_t X_tᵀ)`.
pub fn collect_package_stats(
    model: &ToyModel,
    layers: &[LayerId],
    calib: &CalibrationSet,
    weights: &TimestepWeights,
) -> Result<BTreeMap<LayerId, HessianAccumulator>> {
    if weights.values.len() != model.config.num_steps {
        return Err(Error::BadConfig(format!(
            "{} timestep weights for {} steps",
            weights.values.len(),
            model.config.num_steps
        )));
    }
    if calib.is_empty() {
        return Err(Error::BadConfig("empty calibration set".into()));
    }
    let mut accs = BTreeMap::new();
    for &id in layers {
        accs.insert(id, HessianAccumulator::new(id.to_string(), input_width(model, id)?));
    }
    let mut sink = HookSink {
        accs,
        weights,
        scale: 1.0 / calib.len() as f64,
        error: None,
    };
    for sample in &calib.samples {
        model.run_trajectory_with(sample, &mut sink)?;
        if let Some(e) = sink.error.take() {
            return Err(e);
        }
    }
    Ok(sink.accs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportMode {
    /// Same shapes, pruned weights stored as zeros.
    #[default]
    Masked,
    /// Dead neurons and heads physically removed.
    Shrunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub spec: SparsitySpec,
    pub method: Method,
    pub num_packages: usize,
    pub weighting: WeightScheme,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub damp: f64,
    pub block_size: usize,
    pub rrf_k: usize,
    pub head_block: HeadBlockMode,
    pub exclude_blocks: Vec<usize>,
    pub export: ExportMode,
    /// Keep the finalized Hessians in the output for inspection.
    pub keep_hessians: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            spec: SparsitySpec::Unstructured { ratio: 0.5 },
            method: Method::Obs,
            num_packages: DEFAULT_PACKAGES,
            weighting: WeightScheme::LogDecrease,
            alpha_min: DEFAULT_ALPHA_MIN,
            alpha_max: DEFAULT_ALPHA_MAX,
            damp: DEFAULT_DAMP,
            block_size: DEFAULT_BLOCK_SIZE,
            rrf_k: DEFAULT_RRF_K,
            head_block: HeadBlockMode::Submatrix,
            exclude_blocks: Vec::new(),
            export: ExportMode::Masked,
            keep_hessians: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        self.spec.validate().map_err(|e| match e {
            Error::BadSpec(m) => Error::BadConfig(m),
            e => e,
        })?;
        if self.spec.is_structured() && self.method != Method::Obs {
            return Err(Error::BadConfig(format!(
                "{} only supports unstructured and N:M specs",
                self.method.name()
            )));
        }
        if self.block_size == 0 {
            return Err(Error::BadConfig("block size must be positive".into()));
        }
        if self.rrf_k == 0 {
            return Err(Error::BadConfig("rrf_k must be at least 1".into()));
        }
        if let Some(&b) = self.exclude_blocks.iter().find(|&&b| b >= model.blocks.len()) {
            return Err(Error::BadConfig(format!("excluded block {b} does not exist")));
        }
        timestep_weights(self.weighting, model.config.num_steps, self.alpha_min, self.alpha_max)?;
        let units = basic_units(model, &self.exclude_blocks).len();
        if self.num_packages == 0 || self.num_packages > units {
            return Err(Error::BadConfig(format!(
                "num_packages {} must lie in 1..={units}",
                self.num_packages
            )));
        }
        Ok(())
    }

    /// Layers of `package` that need statistics under this spec.
    fn stat_layers(&self, package: &ModulePackage) -> Vec<LayerId> {
        package
            .layers()
            .filter(|id| match self.spec {
                SparsitySpec::Unstructured { .. } | SparsitySpec::SemiStructured { .. } => true,
                SparsitySpec::FfnNeurons { .. } => matches!(id.kind, LayerKind::DownA | LayerKind::DownB),
                SparsitySpec::Heads { .. } => matches!(id.kind, LayerKind::OutA | LayerKind::OutB),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: LayerId,
    pub package: usize,
    pub recon_error: f64,
    pub zeros: usize,
    pub total: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageReport {
    pub index: usize,
    pub layers: Vec<LayerId>,
    pub collected_layers: usize,
    pub accumulator_bytes: usize,
    pub collect_seconds: f64,
    pub prune_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub weights: Vec<f64>,
    pub calibration_samples: usize,
    pub calibration_passes: usize,
    pub peak_accumulator_bytes: usize,
    pub packages: Vec<PackageReport>,
    pub layers: Vec<LayerReport>,
    pub removed_neurons: BTreeMap<LayerId, Vec<usize>>,
    pub removed_heads: BTreeMap<usize, Vec<usize>>,
    pub target_zeros: usize,
    pub target_total: usize,
    pub target_sparsity: f64,
    pub shrink: Option<ShrinkMap>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: ToyModel,
    pub report: PipelineReport,
    /// Finalized `(H + λI)` factors per layer when `keep_hessians` is set.
    pub hessians: BTreeMap<LayerId, InverseFactor>,
}

impl PipelineOutput {
    /// Hessian snapshot container: raw `H` and its damped inverse per layer.
    pub fn hessian_container(&self) -> Result<Container> {
        let mut records = Vec::new();
        for (id, inv) in &self.hessians {
            let n = inv.dim();
            records.push(TensorRecord::f64(format!("{id}.H"), vec![n, n], inv.hessian().as_slice().to_vec()));
            records.push(TensorRecord::f64(
                format!("{id}.Hinv"),
                vec![n, n],
                inv.inverse().as_slice().to_vec(),
            ));
        }
        let damping: BTreeMap<String, f64> =
            self.hessians.iter().map(|(id, inv)| (id.to_string(), inv.damping)).collect();
        Container::new(&serde_json::json!({ "kind": "hessians", "damping": damping }), records)
    }
}

/// Wall-clock timer; reads zero where the platform has no clock (wasm32).
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    at: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            at: std::time::Instant::now(),
        }
    }

    fn elapsed_secs(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.at.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

fn round_to_model_dtype(w: &mut Matrix) {
    w.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Prunes `model` package by package.
pub fn run_pipeline(model: &ToyModel, calib: &CalibrationSet, config: &PipelineConfig) -> Result<PipelineOutput> {
    let started = Stopwatch::start();
    config.validate(model)?;
    let weights = timestep_weights(config.weighting, model.config.num_steps, config.alpha_min, config.alpha_max)?;
    let packages = partition_units(basic_units(model, &config.exclude_blocks), config.num_packages)?;
    let head_dim = model.config.head_dim();

    let mut current = model.clone();
    let mut passes = 0;
    let mut peak_bytes = 0;
    let mut package_reports = Vec::with_capacity(packages.len());
    let mut layer_reports = Vec::new();
    let mut removed_neurons = BTreeMap::new();
    let mut removed_heads = BTreeMap::new();
    let mut kept_hessians = BTreeMap::new();

    for package in &packages {
        let t0 = Stopwatch::start();
        let stat_layers = config.stat_layers(package);
        let accs = if stat_layers.is_empty() {
            BTreeMap::new()
        } else {
            passes += calib.len();
            collect_package_stats(&current, &stat_layers, calib, &weights)?
        };
        let bytes: usize = accs.values().map(|a| a.dim() * a.dim() * 8).sum();
        peak_bytes = peak_bytes.max(bytes);
        let mut invs = BTreeMap::new();
        for (id, acc) in &accs {
            invs.insert(*id, acc.finalize(config.damp).map_err(|e| e.in_layer(&id.to_string()))?);
        }
        let collect_seconds = t0.elapsed_secs();

        let t1 = Stopwatch::start();
        let inv_of = |id: LayerId| invs.get(&id).ok_or_else(|| Error::NotFinalized(id.to_string()));
        let mut errors: BTreeMap<LayerId, f64> = BTreeMap::new();
        match config.spec {
            SparsitySpec::Unstructured { .. } | SparsitySpec::SemiStructured { .. } => {
                for id in package.layers() {
                    let tag = |e: Error| e.in_layer(&id.to_string());
                    let inv = inv_of(id).map_err(tag)?;
                    let w = current.weight(id)?.clone();
                    let pruned = match config.method {
                        Method::Obs => prune_layer_blocked(&w, inv, &config.spec, config.block_size).map_err(tag)?.weights,
                        Method::Magnitude => {
                            let mut p = w.clone();
                            magnitude_mask(&w, &config.spec).map_err(tag)?.apply(&mut p);
                            p
                        }
                        Method::Wanda => {
                            let norms = norms_from_hessian(inv.hessian());
                            let mut p = w.clone();
                            wanda_mask(&w, &norms, &config.spec).map_err(tag)?.apply(&mut p);
                            p
                        }
                    };
                    errors.insert(id, layer_recon_error(&w, &pruned, inv.damped_hessian())?);
                    let dst = current.weight_mut(id)?;
                    *dst = pruned;
                    round_to_model_dtype(dst);
                }
            }
            SparsitySpec::FfnNeurons { ratio } => {
                for id in package.layers() {
                    let up_kind = match id.kind {
                        LayerKind::DownA => LayerKind::UpA,
                        LayerKind::DownB => LayerKind::UpB,
                        _ => continue,
                    };
                    let tag = |e: Error| e.in_layer(&id.to_string());
                    let inv = inv_of(id).map_err(tag)?;
                    let up_id = LayerId::new(id.block, up_kind);
                    let r = prune_ffn(current.weight(id)?, current.weight(up_id)?, inv, ratio).map_err(tag)?;
                    errors.insert(id, r.recon_error);
                    *current.weight_mut(id)? = r.down;
                    *current.weight_mut(up_id)? = r.up;
                    round_to_model_dtype(current.weight_mut(id)?);
                    round_to_model_dtype(current.weight_mut(up_id)?);
                    let mut removed = r.removed;
                    removed.sort_unstable();
                    removed_neurons.insert(id, removed);
                }
            }
            SparsitySpec::Heads { ratio } => {
                for id in package.layers().filter(|id| id.kind == LayerKind::OutA) {
                    let b_id = LayerId::new(id.block, LayerKind::OutB);
                    let tag = |e: Error| e.in_layer(&id.to_string());
                    let (inv_a, inv_b) = (inv_of(id).map_err(tag)?, inv_of(b_id).map_err(tag)?);
                    let r = prune_heads(
                        &current.blocks[id.block],
                        head_dim,
                        inv_a,
                        inv_b,
                        ratio,
                        config.rrf_k,
                        config.head_block,
                    )
                    .map_err(tag)?;
                    errors.insert(id, r.recon_error_a);
                    errors.insert(b_id, r.recon_error_b);
                    let mut blk = r.block;
                    for k in LayerKind::ALL {
                        round_to_model_dtype(blk.weight_mut(k));
                    }
                    current.blocks[id.block] = blk;
                    removed_heads.insert(id.block, r.removed);
                }
            }
        }
        for id in package.layers() {
            let w = current.weight(id)?;
            let zeros = w.as_slice().iter().filter(|&&v| v == 0.0).count();
            let total = w.as_slice().len();
            layer_reports.push(LayerReport {
                layer: id,
                package: package.index,
                recon_error: errors.get(&id).copied().unwrap_or(0.0),
                zeros,
                total,
                sparsity: zeros as f64 / total as f64,
            });
        }
        if config.keep_hessians {
            kept_hessians.extend(invs);
        }
        package_reports.push(PackageReport {
            index: package.index,
            layers: package.layers().collect(),
            collected_layers: stat_layers.len(),
            accumulator_bytes: bytes,
            collect_seconds,
            prune_seconds: t1.elapsed_secs(),
        });
    }

    let (target_zeros, target_total) = layer_reports
        .iter()
        .fold((0, 0), |(z, t), l| (z + l.zeros, t + l.total));
    let (model_out, shrink) = match config.export {
        ExportMode::Masked => (current, None),
        ExportMode::Shrunk => {
            let (m, map) = shrink_model(&current);
            (m, Some(map))
        }
    };
    let report = PipelineReport {
        config: config.clone(),
        weights: weights.values.clone(),
        calibration_samples: calib.len(),
        calibration_passes: passes,
        peak_accumulator_bytes: peak_bytes,
        packages: package_reports,
        layers: layer_reports,
        removed_neurons,
        removed_heads,
        target_zeros,
        target_total,
        target_sparsity: if target_total == 0 { 0.0 } else { target_zeros as f64 / target_total as f64 },
        shrink,
        total_seconds: started.elapsed_secs(),
    };
    Ok(PipelineOutput {
        model: model_out,
        report,
        hessians: kept_hessians,
    })
}
