//! wasm-bindgen exports behind `www/index.html`: timestep schedules, one
//! random layer pruned three ways, and reciprocal rank fusion of head scores.

use obs_diff::baselines::{magnitude_mask, norms_from_hessian, wanda_mask};
use obs_diff::evaluate::layer_recon_error;
use obs_diff::obs::{parse_pattern, KeepMask};
use obs_diff::structured::rrf_fuse;
use obs_diff::{prune_layer_blocked, timestep_weights, InverseFactor, Matrix, WeightScheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: obs_diff::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Names accepted by [`schedule`], in display order.
#[wasm_bindgen]
pub fn scheme_names() -> Vec<String> {
    WeightScheme::ALL.iter().map(|s| s.name().to_string()).collect()
}

/// `α_1..α_T` for one weighting scheme.
#[wasm_bindgen]
pub fn schedule(scheme: &str, steps: usize, alpha_min: f64, alpha_max: f64) -> Result<Vec<f64>, JsError> {
    let scheme: WeightScheme = scheme.parse().map_err(js_err)?;
    Ok(timestep_weights(scheme, steps, alpha_min, alpha_max).map_err(js_err)?.values)
}

#[wasm_bindgen]
pub struct LayerComparison {
    rows: usize,
    cols: usize,
    obs_error: f64,
    magnitude_error: f64,
    wanda_error: f64,
    obs_mask: Vec<u8>,
    magnitude_mask: Vec<u8>,
    wanda_mask: Vec<u8>,
    weights: Vec<f64>,
}

#[wasm_bindgen]
impl LayerComparison {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[wasm_bindgen(getter)]
    pub fn obs_error(&self) -> f64 {
        self.obs_error
    }
    #[wasm_bindgen(getter)]
    pub fn magnitude_error(&self) -> f64 {
        self.magnitude_error
    }
    #[wasm_bindgen(getter)]
    pub fn wanda_error(&self) -> f64 {
        self.wanda_error
    }
    /// Row-major, 1 = kept.
    pub fn obs_mask(&self) -> Vec<u8> {
        self.obs_mask.clone()
    }
    pub fn magnitude_mask(&self) -> Vec<u8> {
        self.magnitude_mask.clone()
    }
    pub fn wanda_mask(&self) -> Vec<u8> {
        self.wanda_mask.clone()
    }
    /// Dense weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone()
    }
}

fn mask_bytes(m: &KeepMask) -> Vec<u8> {
    m.as_slice().iter().map(|&k| k as u8).collect()
}

/// Prunes one seeded random layer with OBS, magnitude and Wanda under the
/// same Hessian. `correlation` in `[0, 1]` mixes the input features; at 0
/// they are independent and the three criteria nearly agree.
#[wasm_bindgen]
pub fn compare_layer(
    seed: u64,
    rows: usize,
    cols: usize,
    pattern: &str,
    ratio: f64,
    correlation: f64,
) -> Result<LayerComparison, JsError> {
    if rows == 0 || cols == 0 || rows * cols > 1 << 16 {
        return Err(JsError::new("layer must have between 1 and 65536 weights"));
    }
    let spec = parse_pattern(pattern, ratio).map_err(js_err)?;
    let c = correlation.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<f64> = (0..cols).map(|_| rng.random_range(0.2..2.0)).collect();
    let mix = Matrix::from_fn(cols, cols, |i, j| {
        let r: f64 = rng.random_range(-1.0..1.0);
        if i == j { 1.0 - c + c * r } else { c * r }
    });
    let z = Matrix::from_fn(cols, 2 * cols, |i, _| scale[i] * rng.random_range(-1.0..1.0));
    let x = mix.matmul(&z).map_err(js_err)?;
    let mut h = x.matmul_t(&x).map_err(js_err)?;
    h.scale(2.0);
    let w = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));

    let inv = InverseFactor::from_hessian("demo", h, 0.01).map_err(js_err)?;
    let obs = prune_layer_blocked(&w, &inv, &spec, cols.min(32)).map_err(js_err)?;
    let mag = magnitude_mask(&w, &spec).map_err(js_err)?;
    let wan = wanda_mask(&w, &norms_from_hessian(inv.hessian()), &spec).map_err(js_err)?;
    let masked_error = |m: &KeepMask| -> Result<f64, JsError> {
        let mut p = w.clone();
        m.apply(&mut p);
        layer_recon_error(&w, &p, inv.damped_hessian()).map_err(js_err)
    };
    Ok(LayerComparison {
        rows,
        cols,
        obs_error: obs.recon_error,
        magnitude_error: masked_error(&mag)?,
        wanda_error: masked_error(&wan)?,
        obs_mask: mask_bytes(&obs.keep_mask),
        magnitude_mask: mask_bytes(&mag),
        wanda_mask: mask_bytes(&wan),
        weights: w.into_vec(),
    })
}

#[wasm_bindgen]
pub struct Fusion {
    rank_a: Vec<u32>,
    rank_b: Vec<u32>,
    scores: Vec<f64>,
    prune_order: Vec<u32>,
}

#[wasm_bindgen]
impl Fusion {
    pub fn rank_a(&self) -> Vec<u32> {
        self.rank_a.clone()
    }
    pub fn rank_b(&self) -> Vec<u32> {
        self.rank_b.clone()
    }
    pub fn scores(&self) -> Vec<f64> {
        self.scores.clone()
    }
    /// Heads from first to last pruned.
    pub fn prune_order(&self) -> Vec<u32> {
        self.prune_order.clone()
    }
}

/// Fuses per-head saliencies of two streams; higher saliency ranks first.
#[wasm_bindgen]
pub fn fuse_heads(scores_a: &[f64], scores_b: &[f64], rrf_k: usize) -> Result<Fusion, JsError> {
    let f = rrf_fuse(scores_a, scores_b, rrf_k).map_err(js_err)?;
    let u32s = |v: Vec<usize>| v.into_iter().map(|x| x as u32).collect();
    Ok(Fusion {
        rank_a: u32s(f.rank_a),
        rank_b: u32s(f.rank_b),
        scores: f.scores,
        prune_order: u32s(f.prune_order),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_match_core() {
        let v = schedule("log-decrease", 28, 0.1, 1.0).unwrap();
        assert_eq!(v.len(), 28);
        assert_eq!(v[0], 1.0);
        assert_eq!(scheme_names().len(), 5);
    }

    #[test]
    fn layer_comparison_masks_have_the_same_cardinality() {
        for pattern in ["unstructured", "2:4"] {
            let r = compare_layer(3, 8, 32, pattern, 0.5, 0.8).unwrap();
            let kept = |m: Vec<u8>| m.iter().map(|&b| b as usize).sum::<usize>();
            assert_eq!(kept(r.obs_mask()), 128);
            assert_eq!(kept(r.magnitude_mask()), 128);
            assert_eq!(kept(r.wanda_mask()), 128);
            assert!(r.obs_error() <= r.magnitude_error());
            assert_eq!(r.weights().len(), 256);
        }
    }

    #[test]
    fn fusion_fixture() {
        let f = fuse_heads(&[4.0, 3.0, 2.0, 1.0], &[2.0, 3.0, 4.0, 1.0], 60).unwrap();
        assert_eq!(f.rank_a()[0], 1);
        assert_eq!(f.rank_b()[0], 3);
        assert!((f.scores()[0] - 124.0 / 3843.0).abs() < 1e-12);
        assert_eq!(f.prune_order()[0], 3);
    }
}
