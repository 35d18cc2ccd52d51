//! Per-sample logit mathematics: normalization, softmax, entropy, the
//! interpolation weight between the generalist and the adapter, and the
//! convex logit fusion itself.
//!
//! Every function works on plain slices so it can be fed either the
//! validated [`LogitVector`]/[`ProbVector`] newtypes (which deref to `[f64]`)
//! or rows of a batch matrix.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SailError};

/// Tolerance used when validating that a probability vector sums to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Variance guard for z-score normalization.
pub const ZSCORE_EPS: f64 = 1e-12;

/// Per-sample class scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(SailError::invalid(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for LogitVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(SailError::invalid("empty probability vector"));
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SailError::invalid("probability outside [0, 1]"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(SailError::invalid(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// How raw logits are brought to a comparable scale before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationStrategy {
    /// Subtract log-sum-exp: the output is a log-probability vector.
    #[default]
    Lse,
    /// Replace logits by their softmax probabilities.
    Softmax,
    ZScore,
    L2,
    MinMax,
}

impl NormalizationStrategy {
    pub const ALL: [NormalizationStrategy; 5] = [
        NormalizationStrategy::Lse,
        NormalizationStrategy::Softmax,
        NormalizationStrategy::ZScore,
        NormalizationStrategy::L2,
        NormalizationStrategy::MinMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormalizationStrategy::Lse => "lse",
            NormalizationStrategy::Softmax => "softmax",
            NormalizationStrategy::ZScore => "z-score",
            NormalizationStrategy::L2 => "l2",
            NormalizationStrategy::MinMax => "min-max",
        }
    }
}

impl fmt::Display for NormalizationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormalizationStrategy {
    type Err = SailError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| SailError::Config(format!("unknown normalization strategy `{s}`")))
    }
}

/// How the per-sample interpolation weight λ is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightStrategy {
    /// Softmax over the two models' maximum class probabilities.
    #[default]
    Confidence,
    Average,
    /// Softmax over negative batch-mean entropies; one λ for the whole batch.
    BatchEntropy,
    /// Softmax over negative per-sample entropies.
    SampleEntropy,
}

impl WeightStrategy {
    pub const ALL: [WeightStrategy; 4] = [
        WeightStrategy::Confidence,
        WeightStrategy::Average,
        WeightStrategy::BatchEntropy,
        WeightStrategy::SampleEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightStrategy::Confidence => "confidence",
            WeightStrategy::Average => "average",
            WeightStrategy::BatchEntropy => "batch-entropy",
            WeightStrategy::SampleEntropy => "sample-entropy",
        }
    }
}

impl fmt::Display for WeightStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightStrategy {
    type Err = SailError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| SailError::Config(format!("unknown weight strategy `{s}`")))
    }
}

fn check_finite(z: &[f64]) -> Result<()> {
    if let Some(i) = z.iter().position(|x| !x.is_finite()) {
        return Err(SailError::invalid(format!("non-finite logit at index {i}")));
    }
    Ok(())
}

/// `log Σ exp(z_j)` with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(SailError::invalid("log-sum-exp of empty vector"));
    }
    check_finite(z)?;
    Ok(lse_unchecked(z))
}

fn lse_unchecked(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax via `exp(z_j - LSE(z))`.
pub fn softmax(z: &[f64]) -> Result<ProbVector> {
    let lse = log_sum_exp(z)?;
    Ok(ProbVector(softmax_with_lse(z, lse)))
}

fn softmax_with_lse(z: &[f64], lse: f64) -> Vec<f64> {
    z.iter().map(|&x| (x - lse).exp()).collect()
}

/// Log-softmax of a finite vector, without validation.
pub(crate) fn log_softmax_raw(z: &[f64]) -> Vec<f64> {
    let lse = lse_unchecked(z);
    z.iter().map(|&x| x - lse).collect()
}

/// Softmax of a finite vector, without validation.
pub(crate) fn softmax_raw(z: &[f64]) -> Vec<f64> {
    softmax_with_lse(z, lse_unchecked(z))
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

fn mean_and_pop_var(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn min_max_index(z: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &x) in z.iter().enumerate() {
        if x < z[lo] {
            lo = i;
        }
        if x > z[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Applies `strategy` to a single logit vector.
pub fn normalize_logits(z: &[f64], strategy: NormalizationStrategy) -> Result<LogitVector> {
    check_finite(z)?;
    if z.is_empty() {
        return Err(SailError::invalid("empty logit vector"));
    }
    let out = match strategy {
        NormalizationStrategy::Lse => {
            let lse = lse_unchecked(z);
            z.iter().map(|&x| x - lse).collect()
        }
        NormalizationStrategy::Softmax => softmax_raw(z),
        NormalizationStrategy::ZScore => {
            let (lo, hi) = min_max_index(z);
            if z[lo] == z[hi] {
                return Err(SailError::DegenerateInput {
                    strategy: "z-score",
                    reason: "constant logit vector has zero variance".into(),
                });
            }
            let (mean, var) = mean_and_pop_var(z);
            let sd = (var + ZSCORE_EPS).sqrt();
            z.iter().map(|&x| (x - mean) / sd).collect()
        }
        NormalizationStrategy::L2 => {
            let n = crate::linalg::norm(z);
            if n == 0.0 {
                return Err(SailError::DegenerateInput {
                    strategy: "l2",
                    reason: "zero logit vector".into(),
                });
            }
            z.iter().map(|&x| x / n).collect()
        }
        NormalizationStrategy::MinMax => {
            let (lo, hi) = min_max_index(z);
            let range = z[hi] - z[lo];
            if range <= 0.0 {
                return Err(SailError::DegenerateInput {
                    strategy: "min-max",
                    reason: "max equals min".into(),
                });
            }
            z.iter().map(|&x| (x - z[lo]) / range).collect()
        }
    };
    Ok(LogitVector(out))
}

/// Vector-Jacobian product of [`normalize_logits`]: given `upstream = ∂L/∂y`
/// for `y = normalize(z)`, returns `∂L/∂z`.
pub fn normalize_backward(
    z: &[f64],
    strategy: NormalizationStrategy,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    if z.len() != upstream.len() {
        return Err(SailError::invalid("normalize_backward shape mismatch"));
    }
    let k = z.len() as f64;
    let grad = match strategy {
        NormalizationStrategy::Lse => {
            // Jacobian I - 1·softmax(z)ᵀ
            let p = softmax_raw(z);
            let total: f64 = upstream.iter().sum();
            upstream
                .iter()
                .zip(&p)
                .map(|(g, pj)| g - pj * total)
                .collect()
        }
        NormalizationStrategy::Softmax => {
            let p = softmax_raw(z);
            let inner = crate::linalg::dot(&p, upstream);
            p.iter()
                .zip(upstream)
                .map(|(pj, g)| pj * (g - inner))
                .collect()
        }
        NormalizationStrategy::ZScore => {
            let y = normalize_logits(z, strategy)?;
            let (_, var) = mean_and_pop_var(z);
            let sd = (var + ZSCORE_EPS).sqrt();
            let g_mean = upstream.iter().sum::<f64>() / k;
            let gy_mean = crate::linalg::dot(upstream, &y) / k;
            upstream
                .iter()
                .zip(y.iter())
                .map(|(g, yj)| (g - g_mean - yj * gy_mean) / sd)
                .collect()
        }
        NormalizationStrategy::L2 => {
            let n = crate::linalg::norm(z);
            if n == 0.0 {
                return Err(SailError::DegenerateInput {
                    strategy: "l2",
                    reason: "zero logit vector".into(),
                });
            }
            let y: Vec<f64> = z.iter().map(|&x| x / n).collect();
            let inner = crate::linalg::dot(&y, upstream);
            upstream
                .iter()
                .zip(&y)
                .map(|(g, yj)| (g - yj * inner) / n)
                .collect()
        }
        NormalizationStrategy::MinMax => {
            let y = normalize_logits(z, strategy)?;
            let (lo, hi) = min_max_index(z);
            let range = z[hi] - z[lo];
            let mut out: Vec<f64> = upstream.iter().map(|g| g / range).collect();
            let to_min: f64 = upstream
                .iter()
                .zip(y.iter())
                .map(|(g, yj)| g * (yj - 1.0))
                .sum();
            let to_max: f64 = -crate::linalg::dot(upstream, &y);
            out[lo] += to_min / range;
            out[hi] += to_max / range;
            out
        }
    };
    Ok(grad)
}

/// Interpolation weights λ_i for a batch, one per sample. Inputs are the
/// softmax probabilities of the generalist and the adapter.
pub fn interpolation_weights<P: Deref<Target = [f64]>>(
    p_vlm: &[P],
    p_ada: &[P],
    strategy: WeightStrategy,
) -> Result<Vec<f64>> {
    if p_vlm.is_empty() {
        return Err(SailError::invalid("empty batch"));
    }
    if p_vlm.len() != p_ada.len() {
        return Err(SailError::invalid(format!(
            "batch length mismatch: {} vs {}",
            p_vlm.len(),
            p_ada.len()
        )));
    }
    if p_vlm
        .iter()
        .zip(p_ada)
        .any(|(a, b)| a.len() != b.len() || a.is_empty())
    {
        return Err(SailError::invalid("class count mismatch in batch"));
    }
    let max = |p: &[f64]| p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = p_vlm.len();
    let out = match strategy {
        WeightStrategy::Confidence => p_vlm
            .iter()
            .zip(p_ada)
            .map(|(v, a)| two_way_softmax(max(v), max(a)))
            .collect(),
        WeightStrategy::Average => vec![0.5; n],
        WeightStrategy::SampleEntropy => p_vlm
            .iter()
            .zip(p_ada)
            .map(|(v, a)| two_way_softmax(-entropy(v), -entropy(a)))
            .collect(),
        WeightStrategy::BatchEntropy => {
            let hv = p_vlm.iter().map(|p| entropy(p)).sum::<f64>() / n as f64;
            let ha = p_ada.iter().map(|p| entropy(p)).sum::<f64>() / n as f64;
            vec![two_way_softmax(-hv, -ha); n]
        }
    };
    Ok(out)
}

/// `exp(a) / (exp(a) + exp(b))`, evaluated as a logistic of the difference.
fn two_way_softmax(a: f64, b: f64) -> f64 {
    1.0 / (1.0 + (b - a).exp())
}

/// `λ·z_vlm + (1 − λ)·z_ada`.
pub fn fuse(z_vlm: &[f64], z_ada: &[f64], lambda: f64) -> Result<LogitVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SailError::invalid(format!("λ = {lambda} outside [0, 1]")));
    }
    if z_vlm.len() != z_ada.len() {
        return Err(SailError::invalid("fuse: class count mismatch"));
    }
    Ok(LogitVector(fuse_raw(z_vlm, z_ada, lambda)))
}

pub(crate) fn fuse_raw(z_vlm: &[f64], z_ada: &[f64], lambda: f64) -> Vec<f64> {
    // Endpoints are exact: 0·x contributes +0 and 1·x is x.
    z_vlm
        .iter()
        .zip(z_ada)
        .map(|(v, a)| lambda * v + (1.0 - lambda) * a)
        .collect()
}

/// One batch after normalization and fusion. The raw adapter logits are kept
/// so losses can be differentiated back through the normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBatch {
    pub normalization: NormalizationStrategy,
    pub ada_raw: Vec<Vec<f64>>,
    pub vlm_norm: Vec<Vec<f64>>,
    pub ada_norm: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
    pub fused: Vec<Vec<f64>>,
    /// `softmax(fused)` per sample.
    pub probs: Vec<Vec<f64>>,
}

impl FusedBatch {
    /// Normalizes both models' raw logits and fuses them with the given
    /// per-sample weights.
    pub fn build<R: AsRef<[f64]>>(
        vlm_raw: &[R],
        ada_raw: &[R],
        lambdas: &[f64],
        normalization: NormalizationStrategy,
    ) -> Result<Self> {
        let n = vlm_raw.len();
        if n == 0 || ada_raw.len() != n || lambdas.len() != n {
            return Err(SailError::invalid(format!(
                "fused batch shape mismatch: {} generalist rows, {} adapter rows, {} weights",
                n,
                ada_raw.len(),
                lambdas.len()
            )));
        }
        let mut vlm_norm = Vec::with_capacity(n);
        let mut ada_norm = Vec::with_capacity(n);
        let mut fused = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for i in 0..n {
            let v = normalize_logits(vlm_raw[i].as_ref(), normalization)?.into_inner();
            let a = normalize_logits(ada_raw[i].as_ref(), normalization)?.into_inner();
            let u = fuse(&v, &a, lambdas[i])?.into_inner();
            probs.push(softmax_raw(&u));
            fused.push(u);
            vlm_norm.push(v);
            ada_norm.push(a);
        }
        Ok(Self {
            normalization,
            ada_raw: ada_raw.iter().map(|r| r.as_ref().to_vec()).collect(),
            vlm_norm,
            ada_norm,
            lambdas: lambdas.to_vec(),
            fused,
            probs,
        })
    }

    /// Computes λ from the softmax of the raw logits and builds the batch.
    pub fn with_strategy<R: AsRef<[f64]>>(
        vlm_raw: &[R],
        ada_raw: &[R],
        weights: WeightStrategy,
        normalization: NormalizationStrategy,
    ) -> Result<Self> {
        let lambdas = raw_interpolation_weights(vlm_raw, ada_raw, weights)?;
        Self::build(vlm_raw, ada_raw, &lambdas, normalization)
    }

    pub fn len(&self) -> usize {
        self.fused.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fused.is_empty()
    }

    /// Argmax of each fused row, lowest index on ties.
    pub fn predictions(&self) -> Vec<usize> {
        self.fused.iter().map(|u| crate::linalg::argmax(u)).collect()
    }
}

/// λ per sample from raw logits of both models.
pub fn raw_interpolation_weights<R: AsRef<[f64]>>(
    vlm_raw: &[R],
    ada_raw: &[R],
    strategy: WeightStrategy,
) -> Result<Vec<f64>> {
    let pv = vlm_raw
        .iter()
        .map(|z| softmax(z.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let pa = ada_raw
        .iter()
        .map(|z| softmax(z.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    interpolation_weights(&pv, &pa, strategy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;
    const LN10: f64 = std::f64::consts::LN_10;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn lse_examples() {
        assert!(close(log_sum_exp(&[0.0, 0.0]).unwrap(), LN2, 1e-15));
        assert!(close(log_sum_exp(&[5.0, 5.0]).unwrap(), 5.0 + LN2, 1e-14));
        // 30-digit reference value.
        assert!(close(log_sum_exp(&[1.0, 2.0, 3.0]).unwrap(), 3.407_605_964_444_380_3, 1e-14));
        assert!(log_sum_exp(&[700.0, 699.0, -700.0]).unwrap().is_finite());
    }

    #[test]
    fn lse_rejects_non_finite() {
        assert!(matches!(
            log_sum_exp(&[0.0, f64::NAN]),
            Err(SailError::InvalidInput(_))
        ));
        assert!(log_sum_exp(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn normalize_lse_examples() {
        let u = normalize_logits(&[0.0, 0.0], NormalizationStrategy::Lse).unwrap();
        assert!(u.iter().all(|&x| close(x, -LN2, 1e-15)));
        let v = normalize_logits(&[1.0, 2.0, 3.0], NormalizationStrategy::Lse).unwrap();
        let want = [-2.407_605_964_444_380_3, -1.407_605_964_444_380_3, -0.407_605_964_444_380_3];
        for (a, b) in v.iter().zip(want) {
            assert!(close(*a, b, 1e-14));
        }
        assert!(close(log_sum_exp(&v).unwrap(), 0.0, 1e-9));
    }

    #[test]
    fn normalize_other_strategies() {
        let z = [1.0, 2.0, 4.0];
        let mm = normalize_logits(&z, NormalizationStrategy::MinMax).unwrap();
        assert_eq!(&*mm, &[0.0, 1.0 / 3.0, 1.0]);
        let l2 = normalize_logits(&z, NormalizationStrategy::L2).unwrap();
        assert!(close(crate::linalg::norm(&l2), 1.0, 1e-15));
        let zs = normalize_logits(&z, NormalizationStrategy::ZScore).unwrap();
        let (m, v) = mean_and_pop_var(&zs);
        assert!(close(m, 0.0, 1e-15) && close(v, 1.0, 1e-9));
        let sm = normalize_logits(&z, NormalizationStrategy::Softmax).unwrap();
        assert!(close(sm.iter().sum::<f64>(), 1.0, 1e-15));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        for s in [NormalizationStrategy::MinMax, NormalizationStrategy::ZScore] {
            assert!(matches!(
                normalize_logits(&[3.0, 3.0, 3.0], s),
                Err(SailError::DegenerateInput { .. })
            ));
        }
        assert!(matches!(
            normalize_logits(&[0.0, 0.0], NormalizationStrategy::L2),
            Err(SailError::DegenerateInput { .. })
        ));
        // lse and softmax are fine on constant vectors
        assert!(normalize_logits(&[3.0, 3.0], NormalizationStrategy::Lse).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.iter().all(|&x| close(x, 0.25, 1e-16)));
        let p = softmax(&[100.0, 0.0]).unwrap();
        assert!(close(p[0], 1.0, 1e-40_f64.max(1e-15)) && p[1] > 0.0 && p[1] < 1e-40);
        let p = softmax(&[1.0, 2.0]).unwrap();
        assert!(close(p[0], 0.268_941_421_369_995_12, 1e-15));
        assert!(close(p[1], 0.731_058_578_630_004_9, 1e-15));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!(close(entropy(&[0.1; 10]), LN10, 1e-14));
        assert!(close(entropy(&[0.9, 0.1]), 0.325_082_973_391_448_24, 1e-15));
    }

    #[test]
    fn interpolation_weight_examples() {
        let v = [ProbVector::new(vec![0.9, 0.1]).unwrap()];
        let a = [ProbVector::new(vec![0.6, 0.4]).unwrap()];
        let lam = interpolation_weights(&v, &a, WeightStrategy::Confidence).unwrap();
        assert!(close(lam[0], 0.574_442_516_811_659, 1e-15));
        let eq = interpolation_weights(&v, &v, WeightStrategy::Confidence).unwrap();
        assert_eq!(eq[0], 0.5);
        assert_eq!(interpolation_weights(&v, &a, WeightStrategy::Average).unwrap(), vec![0.5]);
        let empty: [ProbVector; 0] = [];
        assert!(interpolation_weights(&empty, &empty, WeightStrategy::Confidence).is_err());
    }

    #[test]
    fn entropy_weights_favour_sharper_model() {
        let v = vec![
            ProbVector::new(vec![0.98, 0.02]).unwrap(),
            ProbVector::new(vec![0.5, 0.5]).unwrap(),
        ];
        let a = vec![
            ProbVector::new(vec![0.5, 0.5]).unwrap(),
            ProbVector::new(vec![0.99, 0.01]).unwrap(),
        ];
        let s = interpolation_weights(&v, &a, WeightStrategy::SampleEntropy).unwrap();
        assert!(s[0] > 0.5 && s[1] < 0.5);
        let b = interpolation_weights(&v, &a, WeightStrategy::BatchEntropy).unwrap();
        assert_eq!(b[0], b[1]);
    }

    #[test]
    fn fuse_examples() {
        let v = [0.0, 2.0];
        let a = [2.0, 0.0];
        assert_eq!(&*fuse(&v, &a, 1.0).unwrap(), &v);
        assert_eq!(&*fuse(&v, &a, 0.0).unwrap(), &a);
        assert_eq!(&*fuse(&v, &a, 0.5).unwrap(), &[1.0, 1.0]);
        assert!(fuse(&v, &a, 1.5).is_err());
        assert!(fuse(&v, &a, -0.1).is_err());
    }

    fn fd_check(z: &[f64], s: NormalizationStrategy, g: &[f64]) {
        let analytic = normalize_backward(z, s, g).unwrap();
        let h = 1e-6;
        for j in 0..z.len() {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[j] += h;
            zm[j] -= h;
            let fp: f64 = crate::linalg::dot(&normalize_logits(&zp, s).unwrap(), g);
            let fm: f64 = crate::linalg::dot(&normalize_logits(&zm, s).unwrap(), g);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-6);
            assert!(err < 1e-5, "{s}: j={j} fd={fd} analytic={}", analytic[j]);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let z = [0.3, -1.2, 2.5, 0.9];
        let g = [0.7, -0.4, 1.1, 0.2];
        for s in NormalizationStrategy::ALL {
            fd_check(&z, s, &g);
        }
    }

    proptest! {
        #[test]
        fn lse_shift_invariant(z in prop::collection::vec(-50.0..50.0f64, 2..12), c in -100.0..100.0f64) {
            let a = normalize_logits(&z, NormalizationStrategy::Lse).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let b = normalize_logits(&shifted, NormalizationStrategy::Lse).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn entropy_bounded(raw in prop::collection::vec(0.0..1.0f64, 2..12)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-6);
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let h = entropy(&p);
            prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn self_fusion_preserves_argmax(z in prop::collection::vec(-10.0..10.0f64, 2..12), lam in 0.0..=1.0f64) {
            let f = fuse(&z, &z, lam).unwrap();
            prop_assert_eq!(crate::linalg::argmax(&f), crate::linalg::argmax(&z));
        }

        #[test]
        fn confidence_weight_monotone(v1 in 0.5..1.0f64, dv in 0.0..0.5f64, a in 0.5..1.0f64) {
            let mk = |m: f64| ProbVector::new(vec![m, 1.0 - m]).unwrap();
            let lo = interpolation_weights(&[mk(v1)], &[mk(a)], WeightStrategy::Confidence).unwrap()[0];
            let hi = interpolation_weights(&[mk((v1 + dv).min(1.0))], &[mk(a)], WeightStrategy::Confidence).unwrap()[0];
            prop_assert!(hi >= lo);
            let hi_ada = interpolation_weights(&[mk(v1)], &[mk((a + dv).min(1.0))], WeightStrategy::Confidence).unwrap()[0];
            let lo_ada = interpolation_weights(&[mk(v1)], &[mk(a)], WeightStrategy::Confidence).unwrap()[0];
            prop_assert!(hi_ada <= lo_ada);
        }
    }
}
