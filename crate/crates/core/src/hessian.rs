//! Timestep-weighted Hessian statistics `H = 2 Σ_t α_t E[X_t X_tᵀ]` and the
//! damped inverse factors every OBS routine reads from.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::tensor_store::TensorRecord;

pub const DEFAULT_ALPHA_MIN: f64 = 0.1;
pub const DEFAULT_ALPHA_MAX: f64 = 1.0;
pub const DEFAULT_DAMP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    Uniform,
    LinearIncrease,
    LinearDecrease,
    LogIncrease,
    LogDecrease,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 5] = [
        WeightScheme::Uniform,
        WeightScheme::LinearIncrease,
        WeightScheme::LinearDecrease,
        WeightScheme::LogIncrease,
        WeightScheme::LogDecrease,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::LinearIncrease => "linear-increase",
            WeightScheme::LinearDecrease => "linear-decrease",
            WeightScheme::LogIncrease => "log-increase",
            WeightScheme::LogDecrease => "log-decrease",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightScheme::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown weighting scheme `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepWeights {
    pub scheme: WeightScheme,
    pub steps: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// `values[t-1]` is `α_t`.
    pub values: Vec<f64>,
}

impl TimestepWeights {
    pub fn alpha(&self, step: usize) -> f64 {
        self.values[step - 1]
    }
}

/// Per-step weights for `t = 1..=T`.
///
/// The log-decrease schedule is `α_t = α_min + (α_max − α_min)·ln(T−t+1)/ln T`;
/// log-increase is its time reversal and the linear schemes interpolate
/// between the same endpoints. For `T = 1` every non-uniform scheme yields
/// `α_1 = α_max`.
pub fn timestep_weights(
    scheme: WeightScheme,
    steps: usize,
    alpha_min: f64,
    alpha_max: f64,
) -> Result<TimestepWeights> {
    if steps == 0 {
        return Err(Error::BadConfig("T must be at least 1".into()));
    }
    if !(alpha_min > 0.0) || !alpha_max.is_finite() || alpha_min > alpha_max {
        return Err(Error::BadConfig(format!(
            "need 0 < alpha_min <= alpha_max, got {alpha_min}, {alpha_max}"
        )));
    }
    let big_t = steps as f64;
    let values = (1..=steps)
        .map(|t| {
            let t = t as f64;
            if steps == 1 {
                return match scheme {
                    WeightScheme::Uniform => 1.0,
                    _ => alpha_max,
                };
            }
            // fraction of the way from alpha_min to alpha_max
            let r = match scheme {
                WeightScheme::Uniform => return 1.0,
                WeightScheme::LogDecrease => (big_t - t + 1.0).ln() / big_t.ln(),
                WeightScheme::LogIncrease => t.ln() / big_t.ln(),
                WeightScheme::LinearDecrease => (big_t - t) / (big_t - 1.0),
                WeightScheme::LinearIncrease => (t - 1.0) / (big_t - 1.0),
            };
            // written as a convex blend so both endpoints are hit exactly
            alpha_max * r + alpha_min * (1.0 - r)
        })
        .collect();
    Ok(TimestepWeights {
        scheme,
        steps,
        alpha_min,
        alpha_max,
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    pub layer: String,
    pub h: Matrix,
    /// Activation columns folded in so far.
    pub sample_count: usize,
}

impl HessianAccumulator {
    pub fn new(layer: impl Into<String>, dim: usize) -> Self {
        Self {
            layer: layer.into(),
            h: Matrix::zeros(dim, dim),
            sample_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.h.rows()
    }

    /// `H += 2·α·X·Xᵀ` for `X` laid out features × samples.
    pub fn accumulate(&mut self, x: &Matrix, alpha: f64) -> Result<()> {
        if x.rows() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "`{}`: activation has {} rows, accumulator dim {}",
                self.layer,
                x.rows(),
                self.dim()
            )));
        }
        check_alpha(alpha)?;
        let n = self.dim();
        let c = 2.0 * alpha;
        for i in 0..n {
            let xi = x.row(i);
            for j in i..n {
                let v = c * linalg::dot(xi, x.row(j));
                self.h[(i, j)] += v;
                if i != j {
                    self.h[(j, i)] += v;
                }
            }
        }
        self.sample_count += x.cols();
        Ok(())
    }

    /// Same update for `X` laid out tokens × features, the shape layers
    /// see in the forward pass.
    pub fn accumulate_tokens(&mut self, x: &Matrix, alpha: f64) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "`{}`: activation has {} features, accumulator dim {}",
                self.layer,
                x.cols(),
                self.dim()
            )));
        }
        check_alpha(alpha)?;
        let n = self.dim();
        let c = 2.0 * alpha;
        let mut upper = vec![0.0; n * n];
        for r in 0..x.rows() {
            let row = x.row(r);
            for i in 0..n {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                let dst = &mut upper[i * n..(i + 1) * n];
                for j in i..n {
                    dst[j] += a * row[j];
                }
            }
        }
        for i in 0..n {
            for j in i..n {
                let v = c * upper[i * n + j];
                self.h[(i, j)] += v;
                if i != j {
                    self.h[(j, i)] += v;
                }
            }
        }
        self.sample_count += x.rows();
        Ok(())
    }

    pub fn finalize(&self, damp_rel: f64) -> Result<InverseFactor> {
        if self.sample_count == 0 {
            return Err(Error::NotFinalized(self.layer.clone()));
        }
        InverseFactor::from_hessian(self.layer.clone(), self.h.clone(), damp_rel)
    }

    pub fn to_record(&self) -> TensorRecord {
        TensorRecord::f64(
            format!("{}.H", self.layer),
            vec![self.dim(), self.dim()],
            self.h.as_slice().to_vec(),
        )
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::BadConfig(format!("timestep weight must be positive, got {alpha}")))
    }
}

/// Damped Hessian with its inverse and the upper Cholesky factor of the
/// inverse, `(H+λI)⁻¹ = UᵀU`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseFactor {
    pub layer: String,
    pub damping: f64,
    hessian: Matrix,
    damped: Matrix,
    inverse: Matrix,
    upper: Matrix,
}

impl InverseFactor {
    /// `λ = damp_rel · mean(diag(H))`.
    pub fn from_hessian(layer: impl Into<String>, hessian: Matrix, damp_rel: f64) -> Result<Self> {
        if hessian.rows() != hessian.cols() || hessian.rows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "Hessian must be square and non-empty, got {:?}",
                hessian.shape()
            )));
        }
        if !(damp_rel >= 0.0) {
            return Err(Error::BadConfig(format!("damping must be non-negative, got {damp_rel}")));
        }
        let n = hessian.rows();
        let mean_diag = hessian.diagonal().iter().sum::<f64>() / n as f64;
        let damping = damp_rel * mean_diag;
        let mut damped = hessian.clone();
        damped.add_diagonal(damping);
        let inverse = linalg::spd_inverse(&damped)?;
        let upper = linalg::cholesky_lower(&inverse)?.transpose();
        Ok(Self {
            layer: layer.into(),
            damping,
            hessian,
            damped,
            inverse,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.hessian.rows()
    }

    /// The accumulated statistic before damping.
    pub fn hessian(&self) -> &Matrix {
        &self.hessian
    }

    pub fn damped_hessian(&self) -> &Matrix {
        &self.damped
    }

    pub fn inverse(&self) -> &Matrix {
        &self.inverse
    }

    pub fn inverse_diag(&self) -> Vec<f64> {
        self.inverse.diagonal()
    }

    pub fn inverse_column(&self, q: usize) -> Vec<f64> {
        self.inverse.column(q)
    }

    pub fn upper(&self) -> &Matrix {
        &self.upper
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn log_decrease_endpoints_and_midpoint() {
        let w = timestep_weights(WeightScheme::LogDecrease, 28, 0.1, 1.0).unwrap();
        assert_eq!(w.alpha(1), 1.0);
        assert_eq!(w.alpha(28), 0.1);
        let want = 0.1 + 0.9 * 15f64.ln() / 28f64.ln();
        assert!((w.alpha(14) - want).abs() < 1e-12);
        assert!((w.alpha(14) - 0.8314).abs() < 1e-4);
    }

    #[test]
    fn uniform_is_all_ones() {
        let w = timestep_weights(WeightScheme::Uniform, 8, 0.1, 1.0).unwrap();
        assert_eq!(w.values, vec![1.0; 8]);
    }

    #[test]
    fn increase_schemes_reverse_decrease() {
        for (inc, dec) in [
            (WeightScheme::LogIncrease, WeightScheme::LogDecrease),
            (WeightScheme::LinearIncrease, WeightScheme::LinearDecrease),
        ] {
            let a = timestep_weights(inc, 10, 0.2, 0.9).unwrap().values;
            let mut b = timestep_weights(dec, 10, 0.2, 0.9).unwrap().values;
            b.reverse();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_uses_alpha_max() {
        let w = timestep_weights(WeightScheme::LogDecrease, 1, 0.1, 0.7).unwrap();
        assert_eq!(w.values, vec![0.7]);
    }

    #[test]
    fn schedule_errors() {
        assert!(timestep_weights(WeightScheme::LogDecrease, 0, 0.1, 1.0).is_err());
        assert!(timestep_weights(WeightScheme::LogDecrease, 4, 0.0, 1.0).is_err());
        assert!(timestep_weights(WeightScheme::LogDecrease, 4, -0.1, 1.0).is_err());
        assert!(timestep_weights(WeightScheme::LogDecrease, 4, 2.0, 1.0).is_err());
        assert!("log-sideways".parse::<WeightScheme>().is_err());
        assert_eq!("log-decrease".parse::<WeightScheme>().unwrap(), WeightScheme::LogDecrease);
    }

    #[test]
    fn basis_vector_outer_product() {
        let mut acc = HessianAccumulator::new("l", 3);
        let x = Matrix::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        acc.accumulate(&x, 0.5).unwrap();
        let mut want = Matrix::zeros(3, 3);
        want[(0, 0)] = 1.0;
        assert_eq!(acc.h, want);
        assert_eq!(acc.sample_count, 1);
    }

    #[test]
    fn accumulation_is_additive() {
        let x1 = random(5, 3, 1);
        let x2 = random(5, 4, 2);
        let joined = Matrix::from_fn(5, 7, |i, j| if j < 3 { x1[(i, j)] } else { x2[(i, j - 3)] });
        let mut a = HessianAccumulator::new("l", 5);
        a.accumulate(&x1, 0.7).unwrap();
        a.accumulate(&x2, 0.7).unwrap();
        let mut b = HessianAccumulator::new("l", 5);
        b.accumulate(&joined, 0.7).unwrap();
        assert!(a.h.max_abs_diff(&b.h) < 1e-10);
        assert_eq!(a.sample_count, 7);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let x = random(4, 7, 3);
        let mut acc = HessianAccumulator::new("l", 4);
        acc.accumulate(&x, 0.3).unwrap();
        let mut tokens = HessianAccumulator::new("l", 4);
        tokens.accumulate_tokens(&x.transpose(), 0.3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += x[(i, k)] * x[(j, k)];
                }
                let want = 2.0 * 0.3 * s;
                assert!((acc.h[(i, j)] - want).abs() < 1e-9);
                assert!((tokens.h[(i, j)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn accumulate_errors() {
        let mut acc = HessianAccumulator::new("l", 4);
        assert!(matches!(acc.accumulate(&random(3, 2, 0), 1.0), Err(Error::ShapeMismatch(_))));
        assert!(matches!(acc.accumulate_tokens(&random(2, 3, 0), 1.0), Err(Error::ShapeMismatch(_))));
        assert!(acc.accumulate(&random(4, 2, 0), 0.0).is_err());
        assert!(matches!(acc.finalize(0.01), Err(Error::NotFinalized(_))));
    }

    #[test]
    fn finalize_identity_and_diagonal() {
        let inv = InverseFactor::from_hessian("l", Matrix::identity(5), 0.0).unwrap();
        assert!(inv.inverse_diag().iter().all(|&d| (d - 1.0).abs() < 1e-15));
        let inv = InverseFactor::from_hessian("l", Matrix::diag(&[4.0, 1.0]), 0.0).unwrap();
        let d = inv.inverse_diag();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn finalize_random_spd_residual() {
        let x = random(8, 20, 9);
        let mut acc = HessianAccumulator::new("l", 8);
        acc.accumulate(&x, 1.0).unwrap();
        let inv = acc.finalize(DEFAULT_DAMP).unwrap();
        let mean_diag = acc.h.diagonal().iter().sum::<f64>() / 8.0;
        assert!((inv.damping - 0.01 * mean_diag).abs() < 1e-15);
        let prod = inv.damped_hessian().matmul(inv.inverse()).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(8)) < 1e-6);
        let rebuilt = inv.upper().transpose().matmul(inv.upper()).unwrap();
        assert!(rebuilt.max_abs_diff(inv.inverse()) < 1e-10);
    }

    #[test]
    fn all_zero_activations_are_degenerate() {
        let mut acc = HessianAccumulator::new("l", 3);
        acc.accumulate(&Matrix::zeros(3, 4), 1.0).unwrap();
        assert!(matches!(acc.finalize(0.01), Err(Error::NotPositiveDefinite { .. })));
    }

    proptest! {
        #[test]
        fn log_decrease_strictly_decreasing(t in 2usize..200, lo in 0.001f64..1.0, gap in 0.001f64..5.0) {
            let w = timestep_weights(WeightScheme::LogDecrease, t, lo, lo + gap).unwrap();
            prop_assert!(w.values.windows(2).all(|p| p[0] > p[1]));
            prop_assert!(w.values.iter().all(|&a| a > 0.0));
        }

        #[test]
        fn accumulated_h_is_symmetric_psd(seed in any::<u64>(), cols in 1usize..12) {
            let x = random(6, cols, seed);
            let mut acc = HessianAccumulator::new("l", 6);
            acc.accumulate(&x, 0.4).unwrap();
            let norm = acc.h.frobenius_norm();
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert!((acc.h[(i, j)] - acc.h[(j, i)]).abs() <= 1e-9 * norm.max(1e-300));
                }
            }
            // PSD: vᵀHv >= 0 for a few probe vectors
            for probe in 0..4u64 {
                let v = random(6, 1, seed ^ probe).into_vec();
                let hv: f64 = (0..6).map(|i| v[i] * linalg::dot(acc.h.row(i), &v)).sum();
                prop_assert!(hv >= -1e-6 * norm);
            }
        }
    }
}
