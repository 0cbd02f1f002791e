//! A small joint-attention denoiser with the layer layout of an MMDiT
//! block: shared Q/K/V over the concatenated latent and condition streams,
//! one output projection per stream, and one FFN per stream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor_store::{Container, TensorRecord};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_blocks: usize,
    pub latent_tokens: usize,
    pub cond_tokens: usize,
    pub num_steps: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 128,
            num_blocks: 2,
            latent_tokens: 8,
            cond_tokens: 4,
            num_steps: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn total_tokens(&self) -> usize {
        self.latent_tokens + self.cond_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.hidden_dim == 0 || c.num_heads == 0 || c.ffn_dim == 0 || c.num_blocks == 0 {
            return Err(Error::BadConfig("dimensions must be positive".into()));
        }
        if !c.hidden_dim.is_multiple_of(c.num_heads) {
            return Err(Error::BadConfig(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                c.hidden_dim, c.num_heads
            )));
        }
        if c.num_steps == 0 {
            return Err(Error::BadConfig("num_steps must be at least 1".into()));
        }
        if c.latent_tokens == 0 || c.cond_tokens == 0 {
            return Err(Error::BadConfig("each stream needs at least one token".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Q,
    K,
    V,
    OutA,
    OutB,
    UpA,
    UpB,
    DownA,
    DownB,
}

impl LayerKind {
    /// Forward order within a block.
    pub const ALL: [LayerKind; 9] = [
        LayerKind::Q,
        LayerKind::K,
        LayerKind::V,
        LayerKind::OutA,
        LayerKind::OutB,
        LayerKind::UpA,
        LayerKind::UpB,
        LayerKind::DownA,
        LayerKind::DownB,
    ];

    fn path(self) -> &'static str {
        match self {
            LayerKind::Q => "attn.q",
            LayerKind::K => "attn.k",
            LayerKind::V => "attn.v",
            LayerKind::OutA => "attn.out_a",
            LayerKind::OutB => "attn.out_b",
            LayerKind::UpA => "ffn_a.up",
            LayerKind::UpB => "ffn_b.up",
            LayerKind::DownA => "ffn_a.down",
            LayerKind::DownB => "ffn_b.down",
        }
    }
}

/// Stable identifier `b<block>.<path>`, e.g. `b0.attn.q` or `b1.ffn_a.down`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}.{}", self.block, self.kind.path())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownLayer(s.to_string());
        let rest = s.strip_prefix('b').ok_or_else(unknown)?;
        let (block, path) = rest.split_once('.').ok_or_else(unknown)?;
        let block: usize = block.parse().map_err(|_| unknown())?;
        let kind = LayerKind::ALL
            .into_iter()
            .find(|k| k.path() == path)
            .ok_or_else(unknown)?;
        Ok(LayerId { block, kind })
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub out_a: Matrix,
    pub out_b: Matrix,
    pub up_a: Matrix,
    pub down_a: Matrix,
    pub up_b: Matrix,
    pub down_b: Matrix,
    pub ln_attn_a: Vec<f64>,
    pub ln_attn_b: Vec<f64>,
    pub ln_ffn_a: Vec<f64>,
    pub ln_ffn_b: Vec<f64>,
}

impl Block {
    pub fn weight(&self, kind: LayerKind) -> &Matrix {
        match kind {
            LayerKind::Q => &self.q,
            LayerKind::K => &self.k,
            LayerKind::V => &self.v,
            LayerKind::OutA => &self.out_a,
            LayerKind::OutB => &self.out_b,
            LayerKind::UpA => &self.up_a,
            LayerKind::UpB => &self.up_b,
            LayerKind::DownA => &self.down_a,
            LayerKind::DownB => &self.down_b,
        }
    }

    pub fn weight_mut(&mut self, kind: LayerKind) -> &mut Matrix {
        match kind {
            LayerKind::Q => &mut self.q,
            LayerKind::K => &mut self.k,
            LayerKind::V => &mut self.v,
            LayerKind::OutA => &mut self.out_a,
            LayerKind::OutB => &mut self.out_b,
            LayerKind::UpA => &mut self.up_a,
            LayerKind::UpB => &mut self.up_b,
            LayerKind::DownA => &mut self.down_a,
            LayerKind::DownB => &mut self.down_b,
        }
    }

    fn norms(&self) -> [(&'static str, &Vec<f64>); 4] {
        [
            ("ln.attn_a", &self.ln_attn_a),
            ("ln.attn_b", &self.ln_attn_b),
            ("ln.ffn_a", &self.ln_ffn_a),
            ("ln.ffn_b", &self.ln_ffn_b),
        ]
    }

    /// Heads currently present (after a shrink export this can be fewer
    /// than the configured count).
    pub fn head_count(&self, head_dim: usize) -> usize {
        self.q.rows() / head_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    /// `num_steps × hidden_dim`, row `t-1` is added to the latent stream at step `t`.
    pub time_embed: Matrix,
}

/// Receives the exact input matrix (tokens × in_features) each layer sees.
pub trait ActivationSink {
    fn wants(&self, layer: LayerId) -> bool;
    fn record(&mut self, layer: LayerId, step: usize, input: &Matrix);
}

struct NoCapture;

impl ActivationSink for NoCapture {
    fn wants(&self, _: LayerId) -> bool {
        false
    }
    fn record(&mut self, _: LayerId, _: usize, _: &Matrix) {}
}

/// Captured inputs per layer, one matrix per step in step order.
pub type Activations = BTreeMap<LayerId, Vec<Matrix>>;

struct Recorder<'a> {
    layers: &'a BTreeSet<LayerId>,
    out: Activations,
}

impl ActivationSink for Recorder<'_> {
    fn wants(&self, layer: LayerId) -> bool {
        self.layers.contains(&layer)
    }
    fn record(&mut self, layer: LayerId, _step: usize, input: &Matrix) {
        self.out.entry(layer).or_default().push(input.clone());
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| round_f32(normal.sample(rng)))
}

/// Sinusoidal step embedding, one row per step.
fn step_embedding(steps: usize, dim: usize) -> Matrix {
    Matrix::from_fn(steps, dim, |t, i| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = (t + 1) as f64 * freq;
        round_f32(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

pub fn init_model(config: ModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let d = config.hidden_dim;
    let f = config.ffn_dim;
    let out_std = INIT_STD / (config.num_blocks as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let blocks = (0..config.num_blocks)
        .map(|_| Block {
            q: gaussian(&mut rng, d, d, INIT_STD),
            k: gaussian(&mut rng, d, d, INIT_STD),
            v: gaussian(&mut rng, d, d, INIT_STD),
            out_a: gaussian(&mut rng, d, d, out_std),
            out_b: gaussian(&mut rng, d, d, out_std),
            up_a: gaussian(&mut rng, f, d, INIT_STD),
            down_a: gaussian(&mut rng, d, f, out_std),
            up_b: gaussian(&mut rng, f, d, INIT_STD),
            down_b: gaussian(&mut rng, d, f, out_std),
            ln_attn_a: vec![1.0; d],
            ln_attn_b: vec![1.0; d],
            ln_ffn_a: vec![1.0; d],
            ln_ffn_b: vec![1.0; d],
        })
        .collect();
    Ok(ToyModel {
        config,
        blocks,
        time_embed: step_embedding(config.num_steps, d),
    })
}

fn layer_norm(x: &Matrix, gain: &[f64]) -> Matrix {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = (*v - mean) * inv * g;
        }
    }
    out
}

/// tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn stack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data).expect("same width")
}

fn split_rows(m: &Matrix, at: usize) -> (Matrix, Matrix) {
    let cols = m.cols();
    let (top, bottom) = m.as_slice().split_at(at * cols);
    (
        Matrix::from_vec(at, cols, top.to_vec()).unwrap(),
        Matrix::from_vec(m.rows() - at, cols, bottom.to_vec()).unwrap(),
    )
}

fn add_assign(dst: &mut Matrix, src: &Matrix) {
    dst.as_mut_slice()
        .iter_mut()
        .zip(src.as_slice())
        .for_each(|(d, s)| *d += s);
}

fn linear(
    sink: &mut dyn ActivationSink,
    id: LayerId,
    step: usize,
    x: &Matrix,
    w: &Matrix,
) -> Matrix {
    if sink.wants(id) {
        sink.record(id, step, x);
    }
    x.matmul_t(w).expect("layer shapes checked at construction")
}

fn joint_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, head_dim: usize) -> Matrix {
    let n = q.rows();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Matrix::zeros(n, heads * head_dim);
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = crate::linalg::dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let orow = &mut out.row_mut(i)[cols.clone()];
            for (j, s) in scores.iter().enumerate() {
                let p = s / total;
                for (o, vv) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    out
}

impl ToyModel {
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.blocks.len())
            .flat_map(|b| LayerKind::ALL.into_iter().map(move |k| LayerId::new(b, k)))
            .collect()
    }

    pub fn check_layer(&self, id: LayerId) -> Result<()> {
        if id.block < self.blocks.len() {
            Ok(())
        } else {
            Err(Error::UnknownLayer(id.to_string()))
        }
    }

    pub fn weight(&self, id: LayerId) -> Result<&Matrix> {
        self.check_layer(id)?;
        Ok(self.blocks[id.block].weight(id.kind))
    }

    pub fn weight_mut(&mut self, id: LayerId) -> Result<&mut Matrix> {
        self.check_layer(id)?;
        Ok(self.blocks[id.block].weight_mut(id.kind))
    }

    /// Number of scalar parameters actually held.
    pub fn parameter_count(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| {
                let linear: usize = LayerKind::ALL
                    .iter()
                    .map(|&k| b.weight(k).rows() * b.weight(k).cols())
                    .sum();
                linear + b.norms().iter().map(|(_, g)| g.len()).sum::<usize>()
            })
            .sum();
        blocks + self.time_embed.rows() * self.time_embed.cols()
    }

    /// FNV-1a over every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for b in &self.blocks {
            for k in LayerKind::ALL {
                b.weight(k).as_slice().iter().for_each(|&v| feed(v));
            }
            for (_, g) in b.norms() {
                g.iter().for_each(|&v| feed(v));
            }
        }
        self.time_embed.as_slice().iter().for_each(|&v| feed(v));
        h
    }

    fn check_inputs(&self, state: &Matrix, cond: &Matrix, step: usize) -> Result<()> {
        let c = &self.config;
        if step == 0 || step > c.num_steps {
            return Err(Error::BadStep {
                step,
                steps: c.num_steps,
            });
        }
        if state.shape() != (c.latent_tokens, c.hidden_dim) {
            return Err(Error::ShapeMismatch(format!(
                "latent state {:?}, expected {:?}",
                state.shape(),
                (c.latent_tokens, c.hidden_dim)
            )));
        }
        if cond.shape() != (c.cond_tokens, c.hidden_dim) {
            return Err(Error::ShapeMismatch(format!(
                "condition {:?}, expected {:?}",
                cond.shape(),
                (c.cond_tokens, c.hidden_dim)
            )));
        }
        Ok(())
    }

    /// One transformer pass; returns the residual increment of the latent
    /// stream (zero for an all-zero model).
    pub fn model_output(
        &self,
        state: &Matrix,
        cond: &Matrix,
        step: usize,
        sink: &mut dyn ActivationSink,
    ) -> Result<Matrix> {
        self.check_inputs(state, cond, step)?;
        let na = self.config.latent_tokens;
        let head_dim = self.config.head_dim();
        let mut h_a = state.clone();
        let temb = self.time_embed.row(step - 1);
        for i in 0..h_a.rows() {
            h_a.row_mut(i).iter_mut().zip(temb).for_each(|(x, e)| *x += e);
        }
        let start = h_a.clone();
        let mut h_b = cond.clone();

        for (bi, blk) in self.blocks.iter().enumerate() {
            let id = |kind| LayerId::new(bi, kind);
            let z = stack(
                &layer_norm(&h_a, &blk.ln_attn_a),
                &layer_norm(&h_b, &blk.ln_attn_b),
            );
            let q = linear(sink, id(LayerKind::Q), step, &z, &blk.q);
            let k = linear(sink, id(LayerKind::K), step, &z, &blk.k);
            let v = linear(sink, id(LayerKind::V), step, &z, &blk.v);
            let attn = joint_attention(&q, &k, &v, blk.head_count(head_dim), head_dim);
            let (attn_a, attn_b) = split_rows(&attn, na);
            add_assign(&mut h_a, &linear(sink, id(LayerKind::OutA), step, &attn_a, &blk.out_a));
            add_assign(&mut h_b, &linear(sink, id(LayerKind::OutB), step, &attn_b, &blk.out_b));

            for (h, gain, up, down, up_id, down_id) in [
                (&mut h_a, &blk.ln_ffn_a, &blk.up_a, &blk.down_a, LayerKind::UpA, LayerKind::DownA),
                (&mut h_b, &blk.ln_ffn_b, &blk.up_b, &blk.down_b, LayerKind::UpB, LayerKind::DownB),
            ] {
                let u = layer_norm(h, gain);
                let mut hidden = linear(sink, id(up_id), step, &u, up);
                hidden.as_mut_slice().iter_mut().for_each(|x| *x = gelu(*x));
                add_assign(h, &linear(sink, id(down_id), step, &hidden, down));
            }
        }

        let mut out = h_a;
        out.as_mut_slice()
            .iter_mut()
            .zip(start.as_slice())
            .for_each(|(o, s)| *o -= s);
        Ok(out)
    }

    /// `x ← x − γ·model_output` with `γ = 1/T`.
    pub fn denoise_step(&self, state: &Matrix, cond: &Matrix, step: usize) -> Result<Matrix> {
        self.denoise_step_with(state, cond, step, &mut NoCapture)
    }

    pub fn denoise_step_with(
        &self,
        state: &Matrix,
        cond: &Matrix,
        step: usize,
        sink: &mut dyn ActivationSink,
    ) -> Result<Matrix> {
        let out = self.model_output(state, cond, step, sink)?;
        let gamma = 1.0 / self.config.num_steps as f64;
        let mut next = state.clone();
        next.as_mut_slice()
            .iter_mut()
            .zip(out.as_slice())
            .for_each(|(x, o)| *x -= gamma * o);
        Ok(next)
    }

    /// Runs `t = 1..=T` and returns the final latent.
    pub fn run_trajectory_with(
        &self,
        sample: &CalibrationSample,
        sink: &mut dyn ActivationSink,
    ) -> Result<Matrix> {
        let mut state = sample.latent.clone();
        for step in 1..=self.config.num_steps {
            state = self.denoise_step_with(&state, &sample.cond, step, sink)?;
        }
        Ok(state)
    }

    pub fn run_trajectory(&self, sample: &CalibrationSample) -> Result<Matrix> {
        self.run_trajectory_with(sample, &mut NoCapture)
    }

    /// Runs the trajectory and records the inputs of `capture` at every step.
    pub fn run_trajectory_captured(
        &self,
        sample: &CalibrationSample,
        capture: &[LayerId],
    ) -> Result<(Matrix, Activations)> {
        for &id in capture {
            self.check_layer(id)?;
        }
        let layers: BTreeSet<LayerId> = capture.iter().copied().collect();
        let mut rec = Recorder {
            layers: &layers,
            out: Activations::new(),
        };
        let latent = self.run_trajectory_with(sample, &mut rec)?;
        Ok((latent, rec.out))
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Result<Container> {
        let mut records = Vec::new();
        let f32s = |m: &[f64]| m.iter().map(|&v| v as f32).collect::<Vec<f32>>();
        for (bi, blk) in self.blocks.iter().enumerate() {
            for kind in LayerKind::ALL {
                let w = blk.weight(kind);
                records.push(TensorRecord::f32(
                    LayerId::new(bi, kind).to_string(),
                    vec![w.rows(), w.cols()],
                    f32s(w.as_slice()),
                ));
            }
            for (name, g) in blk.norms() {
                records.push(TensorRecord::f32(format!("b{bi}.{name}"), vec![g.len()], f32s(g)));
            }
        }
        records.push(TensorRecord::f32(
            "time_embed",
            vec![self.time_embed.rows(), self.time_embed.cols()],
            f32s(self.time_embed.as_slice()),
        ));
        let mut meta = serde_json::json!({ "kind": "model", "config": self.config });
        if let (Some(obj), serde_json::Value::Object(more)) = (meta.as_object_mut(), extra) {
            obj.extend(more);
        }
        Container::new(&meta, records)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.metadata_json()?;
        let config: ModelConfig = meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::BadMetadata("missing model config".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::BadMetadata(e.to_string())))?;
        config.validate()?;
        let matrix = |name: &str| -> Result<Matrix> {
            let rec = c.get(name).ok_or_else(|| Error::BadMetadata(format!("missing tensor `{name}`")))?;
            if rec.shape.len() != 2 {
                return Err(Error::BadShape {
                    name: name.into(),
                    reason: "expected a matrix".into(),
                });
            }
            Matrix::from_vec(rec.shape[0], rec.shape[1], rec.data.to_f64())
        };
        let vector = |name: &str| -> Result<Vec<f64>> {
            let rec = c.get(name).ok_or_else(|| Error::BadMetadata(format!("missing tensor `{name}`")))?;
            Ok(rec.data.to_f64())
        };
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for bi in 0..config.num_blocks {
            let w = |k| matrix(&LayerId::new(bi, k).to_string());
            let blk = Block {
                q: w(LayerKind::Q)?,
                k: w(LayerKind::K)?,
                v: w(LayerKind::V)?,
                out_a: w(LayerKind::OutA)?,
                out_b: w(LayerKind::OutB)?,
                up_a: w(LayerKind::UpA)?,
                down_a: w(LayerKind::DownA)?,
                up_b: w(LayerKind::UpB)?,
                down_b: w(LayerKind::DownB)?,
                ln_attn_a: vector(&format!("b{bi}.ln.attn_a"))?,
                ln_attn_b: vector(&format!("b{bi}.ln.attn_b"))?,
                ln_ffn_a: vector(&format!("b{bi}.ln.ffn_a"))?,
                ln_ffn_b: vector(&format!("b{bi}.ln.ffn_b"))?,
            };
            check_block_shapes(&config, bi, &blk)?;
            blocks.push(blk);
        }
        let time_embed = matrix("time_embed")?;
        if time_embed.shape() != (config.num_steps, config.hidden_dim) {
            return Err(Error::BadShape {
                name: "time_embed".into(),
                reason: format!("{:?}", time_embed.shape()),
            });
        }
        Ok(ToyModel {
            config,
            blocks,
            time_embed,
        })
    }
}

fn check_block_shapes(c: &ModelConfig, bi: usize, b: &Block) -> Result<()> {
    let d = c.hidden_dim;
    let dh = c.head_dim();
    let bad = |kind: LayerKind, m: &Matrix| Error::BadShape {
        name: LayerId::new(bi, kind).to_string(),
        reason: format!("{:?} inconsistent with config", m.shape()),
    };
    let attn = b.q.rows();
    if attn == 0 || !attn.is_multiple_of(dh) || b.q.cols() != d {
        return Err(bad(LayerKind::Q, &b.q));
    }
    for (kind, m) in [(LayerKind::K, &b.k), (LayerKind::V, &b.v)] {
        if m.shape() != (attn, d) {
            return Err(bad(kind, m));
        }
    }
    for (kind, m) in [(LayerKind::OutA, &b.out_a), (LayerKind::OutB, &b.out_b)] {
        if m.shape() != (d, attn) {
            return Err(bad(kind, m));
        }
    }
    for (up_k, up, down_k, down) in [
        (LayerKind::UpA, &b.up_a, LayerKind::DownA, &b.down_a),
        (LayerKind::UpB, &b.up_b, LayerKind::DownB, &b.down_b),
    ] {
        if up.cols() != d || up.rows() == 0 {
            return Err(bad(up_k, up));
        }
        if down.shape() != (d, up.rows()) {
            return Err(bad(down_k, down));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub id: u64,
    pub latent: Matrix,
    pub cond: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub seed: u64,
    pub samples: Vec<CalibrationSample>,
}

const CALIB_DOMAIN: u64 = 0x0CA1_1B00;
const EVAL_DOMAIN: u64 = 0xE7A1_5E70;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ domain).wrapping_add(index))
}

fn gen_samples(config: &ModelConfig, seed: u64, n: usize, domain: u64) -> Result<CalibrationSet> {
    config.validate()?;
    if n == 0 {
        return Err(Error::BadConfig("need at least one sample".into()));
    }
    let samples = (0..n as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, domain, i));
            CalibrationSample {
                id: i,
                latent: gaussian(&mut rng, config.latent_tokens, config.hidden_dim, 1.0),
                cond: gaussian(&mut rng, config.cond_tokens, config.hidden_dim, 1.0),
            }
        })
        .collect();
    Ok(CalibrationSet { seed, samples })
}

/// Seeded noise latents plus Gaussian condition tokens standing in for
/// prompt embeddings.
pub fn gen_calibration(config: &ModelConfig, seed: u64, n_samples: usize) -> Result<CalibrationSet> {
    gen_samples(config, seed, n_samples, CALIB_DOMAIN)
}

/// Like [`gen_calibration`] but from a seed domain disjoint from it, so
/// evaluation never reuses calibration noise.
pub fn gen_eval_set(config: &ModelConfig, seed: u64, n_samples: usize) -> Result<CalibrationSet> {
    gen_samples(config, seed, n_samples, EVAL_DOMAIN)
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut records = Vec::with_capacity(self.samples.len() * 2);
        for s in &self.samples {
            records.push(TensorRecord::f64(
                format!("s{}.latent", s.id),
                vec![s.latent.rows(), s.latent.cols()],
                s.latent.as_slice().to_vec(),
            ));
            records.push(TensorRecord::f64(
                format!("s{}.cond", s.id),
                vec![s.cond.rows(), s.cond.cols()],
                s.cond.as_slice().to_vec(),
            ));
        }
        let ids: Vec<u64> = self.samples.iter().map(|s| s.id).collect();
        Container::new(
            &serde_json::json!({ "kind": "calibration", "seed": self.seed, "ids": ids }),
            records,
        )
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.metadata_json()?;
        let seed = meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let ids: Vec<u64> = meta
            .get("ids")
            .cloned()
            .ok_or_else(|| Error::BadMetadata("missing sample ids".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::BadMetadata(e.to_string())))?;
        let matrix = |name: String| -> Result<Matrix> {
            let rec = c.get(&name).ok_or_else(|| Error::BadMetadata(format!("missing tensor `{name}`")))?;
            if rec.shape.len() != 2 {
                return Err(Error::BadShape {
                    name,
                    reason: "expected a matrix".into(),
                });
            }
            Matrix::from_vec(rec.shape[0], rec.shape[1], rec.data.to_f64())
        };
        let samples = ids
            .into_iter()
            .map(|id| {
                Ok(CalibrationSample {
                    id,
                    latent: matrix(format!("s{id}.latent"))?,
                    cond: matrix(format!("s{id}.cond"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CalibrationSet { seed, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form_params(c: &ModelConfig) -> usize {
        let (d, f) = (c.hidden_dim, c.ffn_dim);
        c.num_blocks * (5 * d * d + 4 * d * f + 4 * d) + c.num_steps * d
    }

    fn zero_model(config: ModelConfig) -> ToyModel {
        let mut m = init_model(config).unwrap();
        for b in &mut m.blocks {
            for k in LayerKind::ALL {
                b.weight_mut(k).scale(0.0);
            }
            for g in [&mut b.ln_attn_a, &mut b.ln_attn_b, &mut b.ln_ffn_a, &mut b.ln_ffn_b] {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        m.time_embed.scale(0.0);
        m
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig { seed: 7, ..Default::default() };
        assert_eq!(init_model(c).unwrap(), init_model(c).unwrap());
        let other = init_model(ModelConfig { seed: 8, ..c }).unwrap();
        assert_ne!(init_model(c).unwrap().fingerprint(), other.fingerprint());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = ModelConfig { hidden_dim: 32, num_heads: 5, ..Default::default() };
        assert!(matches!(init_model(c), Err(Error::BadConfig(_))));
        let c = ModelConfig { num_steps: 0, ..Default::default() };
        assert!(matches!(init_model(c), Err(Error::BadConfig(_))));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for c in [
            ModelConfig::default(),
            ModelConfig { hidden_dim: 12, num_heads: 3, ffn_dim: 20, num_blocks: 3, num_steps: 5, ..Default::default() },
        ] {
            assert_eq!(init_model(c).unwrap().parameter_count(), closed_form_params(&c));
        }
    }

    #[test]
    fn layer_ids_round_trip_through_strings() {
        let m = init_model(ModelConfig::default()).unwrap();
        for id in m.layer_ids() {
            assert_eq!(id.to_string().parse::<LayerId>().unwrap(), id);
        }
        assert_eq!(LayerId::new(1, LayerKind::DownA).to_string(), "b1.ffn_a.down");
        assert_eq!(LayerId::new(0, LayerKind::OutA).to_string(), "b0.attn.out_a");
        assert!("b0.attn.x".parse::<LayerId>().is_err());
        assert!("q".parse::<LayerId>().is_err());
    }

    #[test]
    fn zero_model_leaves_state_unchanged() {
        let c = ModelConfig::default();
        let m = zero_model(c);
        let calib = gen_calibration(&c, 3, 1).unwrap();
        let s = &calib.samples[0];
        let out = m.model_output(&s.latent, &s.cond, 1, &mut NoCapture).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(m.denoise_step(&s.latent, &s.cond, 1).unwrap(), s.latent);
    }

    #[test]
    fn bad_step_rejected() {
        let c = ModelConfig::default();
        let m = init_model(c).unwrap();
        let s = &gen_calibration(&c, 1, 1).unwrap().samples[0];
        assert!(matches!(m.denoise_step(&s.latent, &s.cond, 0), Err(Error::BadStep { .. })));
        assert!(matches!(m.denoise_step(&s.latent, &s.cond, 9), Err(Error::BadStep { .. })));
    }

    // Straight-line scalar re-evaluation at D=4, H=1, F=4, one token per stream.
    #[test]
    fn step_matches_scalar_evaluator() {
        let c = ModelConfig {
            hidden_dim: 4,
            num_heads: 1,
            ffn_dim: 4,
            num_blocks: 1,
            latent_tokens: 1,
            cond_tokens: 1,
            num_steps: 3,
            seed: 11,
        };
        let mut m = init_model(c).unwrap();
        // make the weights large enough that attention is not uniform
        for k in LayerKind::ALL {
            m.blocks[0].weight_mut(k).scale(20.0);
        }
        m.blocks[0].ln_attn_a = vec![1.0, 0.5, 2.0, 1.5];
        let s = &gen_calibration(&c, 5, 1).unwrap().samples[0];
        let step = 2;
        let got = m.denoise_step(&s.latent, &s.cond, step).unwrap();

        let b = &m.blocks[0];
        let w = |mat: &Matrix, x: &[f64]| -> Vec<f64> {
            let mut y = vec![0.0; mat.rows()];
            for i in 0..mat.rows() {
                for j in 0..mat.cols() {
                    y[i] += mat[(i, j)] * x[j];
                }
            }
            y
        };
        let ln = |x: &[f64], g: &[f64]| -> Vec<f64> {
            let mu = (x[0] + x[1] + x[2] + x[3]) / 4.0;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            let sd = (var + 1e-5).sqrt();
            (0..4).map(|i| (x[i] - mu) / sd * g[i]).collect()
        };
        let mut ha: Vec<f64> = (0..4).map(|i| s.latent[(0, i)] + m.time_embed[(step - 1, i)]).collect();
        let start = ha.clone();
        let mut hb: Vec<f64> = (0..4).map(|i| s.cond[(0, i)]).collect();
        let za = ln(&ha, &b.ln_attn_a);
        let zb = ln(&hb, &b.ln_attn_b);
        let (qa, ka, va) = (w(&b.q, &za), w(&b.k, &za), w(&b.v, &za));
        let (qb, kb, vb) = (w(&b.q, &zb), w(&b.k, &zb), w(&b.v, &zb));
        let dotp = |x: &[f64], y: &[f64]| (0..4).map(|i| x[i] * y[i]).sum::<f64>() / 2.0;
        let attend = |qq: &[f64]| -> Vec<f64> {
            let (sa, sb) = (dotp(qq, &ka), dotp(qq, &kb));
            let mx = sa.max(sb);
            let (ea, eb) = ((sa - mx).exp(), (sb - mx).exp());
            (0..4).map(|i| (ea * va[i] + eb * vb[i]) / (ea + eb)).collect()
        };
        let (oa, ob) = (attend(&qa), attend(&qb));
        let da = w(&b.out_a, &oa);
        let db = w(&b.out_b, &ob);
        for i in 0..4 {
            ha[i] += da[i];
            hb[i] += db[i];
        }
        let ffn = |h: &mut Vec<f64>, g: &[f64], up: &Matrix, down: &Matrix| {
            let u = ln(h, g);
            let hid: Vec<f64> = w(up, &u)
                .into_iter()
                .map(|x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
                .collect();
            let d = w(down, &hid);
            for i in 0..4 {
                h[i] += d[i];
            }
        };
        ffn(&mut ha, &b.ln_ffn_a, &b.up_a, &b.down_a);
        ffn(&mut hb, &b.ln_ffn_b, &b.up_b, &b.down_b);
        for i in 0..4 {
            let want = s.latent[(0, i)] - (ha[i] - start[i]) / 3.0;
            assert!((got[(0, i)] - want).abs() < 1e-6, "{i}: {} vs {want}", got[(0, i)]);
        }
    }

    #[test]
    fn single_step_trajectory() {
        let c = ModelConfig { num_steps: 1, ..Default::default() };
        let m = init_model(c).unwrap();
        let s = &gen_calibration(&c, 2, 1).unwrap().samples[0];
        assert_eq!(
            m.run_trajectory(s).unwrap(),
            m.denoise_step(&s.latent, &s.cond, 1).unwrap()
        );
    }

    #[test]
    fn capture_shapes_and_side_effects() {
        let c = ModelConfig::default();
        let m = init_model(c).unwrap();
        let s = &gen_calibration(&c, 2, 1).unwrap().samples[0];
        let q: LayerId = "b0.attn.q".parse().unwrap();
        let down: LayerId = "b1.ffn_b.down".parse().unwrap();
        let out_a: LayerId = "b0.attn.out_a".parse().unwrap();
        let (latent, acts) = m.run_trajectory_captured(s, &[q, down, out_a]).unwrap();
        assert_eq!(latent, m.run_trajectory(s).unwrap());
        assert_eq!(acts[&q].len(), c.num_steps);
        assert!(acts[&q].iter().all(|x| x.shape() == (12, 32)));
        assert!(acts[&down].iter().all(|x| x.shape() == (4, 128)));
        assert!(acts[&out_a].iter().all(|x| x.shape() == (8, 32)));
        let err = m.run_trajectory_captured(s, &[LayerId::new(5, LayerKind::Q)]);
        assert!(matches!(err, Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn calibration_is_seeded() {
        let c = ModelConfig::default();
        assert_eq!(gen_calibration(&c, 1, 4).unwrap(), gen_calibration(&c, 1, 4).unwrap());
        let a = gen_calibration(&c, 1, 4).unwrap();
        let b = gen_calibration(&c, 2, 4).unwrap();
        assert_ne!(a.samples[0].latent, b.samples[0].latent);
        assert_ne!(a.samples[0].latent, a.samples[1].latent);
        let e = gen_eval_set(&c, 1, 4).unwrap();
        assert_ne!(a.samples[0].latent, e.samples[0].latent);
        assert!(matches!(gen_calibration(&c, 1, 0), Err(Error::BadConfig(_))));
    }

    #[test]
    fn containers_round_trip() {
        let c = ModelConfig { seed: 4, ..Default::default() };
        let m = init_model(c).unwrap();
        let back = ToyModel::from_container(&m.to_container(serde_json::json!({})).unwrap()).unwrap();
        assert_eq!(back, m);
        let calib = gen_calibration(&c, 9, 3).unwrap();
        let back = CalibrationSet::from_container(&calib.to_container().unwrap()).unwrap();
        assert_eq!(back, calib);
    }
}
