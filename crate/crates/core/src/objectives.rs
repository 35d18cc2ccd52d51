//! Self-supervised objective for the adapter: cross-entropy towards the
//! (detached) fused prediction, a category-balance regularizer, and entropy
//! minimization of the fused prediction, optionally with confidence-based
//! sample weights. Gradients are returned with respect to the adapter's raw
//! logits.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SailError};
use crate::fusion::{self, FusedBatch};

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which distribution the category-balance term averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceTarget {
    /// Mean of the fused probabilities, differentiated through the adapter
    /// path with λ held constant.
    #[default]
    Fused,
    /// Mean of the adapter's own probabilities.
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyperparams {
    /// Coefficient of the category-balance term.
    pub balance_coef: f64,
    /// Coefficient of the entropy term.
    pub entropy_coef: f64,
    pub weighting: bool,
    /// Entropy threshold (nats) for sample weighting. `None` means
    /// `0.4 · ln K`.
    pub entropy_threshold: Option<f64>,
    pub balance_target: BalanceTarget,
    pub align_enabled: bool,
    pub entropy_enabled: bool,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        Self {
            balance_coef: 1.0,
            entropy_coef: 1.0,
            weighting: false,
            entropy_threshold: None,
            balance_target: BalanceTarget::Fused,
            align_enabled: true,
            entropy_enabled: true,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("balance_coef", self.balance_coef),
            ("entropy_coef", self.entropy_coef),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SailError::Config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if let Some(e0) = self.entropy_threshold {
            if !(e0.is_finite() && e0 > 0.0) {
                return Err(SailError::Config(format!(
                    "entropy_threshold must be positive, got {e0}"
                )));
            }
        }
        Ok(())
    }

    /// Weighting threshold for `classes` classes.
    pub fn threshold_for(&self, classes: usize) -> f64 {
        self.entropy_threshold
            .unwrap_or_else(|| default_entropy_threshold(classes))
    }
}

/// `0.4 · ln K`.
pub fn default_entropy_threshold(classes: usize) -> f64 {
    0.4 * (classes as f64).ln()
}

/// Loss values for one batch. `total = align_ce + balance + γ_e·ent`, where
/// disabled terms are reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align_ce: f64,
    pub balance: f64,
    pub ent: f64,
    pub total: f64,
    pub mean_weight: f64,
}

/// `∂total/∂z_ada` for every sample, same shape as the adapter's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub d_total_d_zada: Vec<Vec<f64>>,
}

/// Value and partial derivatives of the alignment loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLoss {
    pub ce: f64,
    pub balance: f64,
    pub value: f64,
    /// `∂ce/∂z_ada` per sample, taken through the adapter softmax.
    pub d_ce_d_zada: Vec<Vec<f64>>,
    /// `∂balance/∂p_ic`; identical for every sample `i`.
    pub d_balance_d_p: Vec<f64>,
}

fn check_shapes<P: Deref<Target = [f64]>>(a: &[P], b: &[P]) -> Result<usize> {
    if a.is_empty() {
        return Err(SailError::invalid("empty batch"));
    }
    if a.len() != b.len() {
        return Err(SailError::invalid("batch size mismatch"));
    }
    let k = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != k) {
        return Err(SailError::invalid("class count mismatch"));
    }
    Ok(k)
}

fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Column means of a batch of probability rows.
fn class_means<R: AsRef<[f64]>>(rows: &[R]) -> Vec<f64> {
    let k = rows[0].as_ref().len();
    let mut q = vec![0.0; k];
    for r in rows {
        for (acc, p) in q.iter_mut().zip(r.as_ref()) {
            *acc += p;
        }
    }
    let n = rows.len() as f64;
    q.iter_mut().for_each(|x| *x /= n);
    q
}

/// `Σ_c q_c ln q_c` (the negative entropy of the mean prediction).
fn neg_entropy_clamped(q: &[f64]) -> f64 {
    q.iter().map(|&x| x * clamped_ln(x)).sum()
}

/// Cross-entropy from the detached target `p_fused` to `p_ada`, plus
/// `balance_coef · Σ q̄ ln q̄` over the class means of `p_fused`.
pub fn alignment_loss<P: Deref<Target = [f64]>>(
    p_fused: &[P],
    p_ada: &[P],
    balance_coef: f64,
) -> Result<AlignmentLoss> {
    let k = check_shapes(p_fused, p_ada)?;
    let n = p_fused.len() as f64;
    let mut ce = 0.0;
    let mut d_ce = Vec::with_capacity(p_fused.len());
    for (p, pa) in p_fused.iter().zip(p_ada) {
        ce -= p.iter().zip(pa.iter()).map(|(t, a)| t * clamped_ln(*a)).sum::<f64>();
        let mass: f64 = p.iter().sum();
        d_ce.push(
            pa.iter()
                .zip(p.iter())
                .map(|(a, t)| (a * mass - t) / n)
                .collect(),
        );
    }
    ce /= n;
    let rows: Vec<&[f64]> = p_fused.iter().map(|p| &**p).collect();
    let q = class_means(&rows);
    let balance = balance_coef * neg_entropy_clamped(&q);
    let d_balance_d_p = (0..k)
        .map(|c| balance_coef * (clamped_ln(q[c]) + 1.0) / n)
        .collect();
    Ok(AlignmentLoss {
        ce,
        balance,
        value: ce + balance,
        d_ce_d_zada: d_ce,
        d_balance_d_p,
    })
}

/// `w(H) = exp(E0 − H)` when `H < E0`, else 0.
pub fn sample_weight(entropy: f64, threshold: f64) -> f64 {
    if entropy < threshold {
        (threshold - entropy).exp()
    } else {
        0.0
    }
}

/// `(1/n) Σ_i w_i H(p_i)`.
pub fn entropy_loss<P: Deref<Target = [f64]>>(p: &[P], weights: &[f64]) -> Result<f64> {
    if p.len() != weights.len() {
        return Err(SailError::invalid("entropy_loss: weights length mismatch"));
    }
    if p.is_empty() {
        return Err(SailError::invalid("empty batch"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(SailError::invalid("sample weights must be nonnegative"));
    }
    let s: f64 = p
        .iter()
        .zip(weights)
        .map(|(row, w)| w * fusion::entropy(row))
        .sum();
    Ok(s / p.len() as f64)
}

/// Vector-Jacobian product of softmax: `p ⊙ (g − ⟨p, g⟩)`.
fn softmax_vjp(p: &[f64], g: &[f64]) -> Vec<f64> {
    let inner = crate::linalg::dot(p, g);
    p.iter().zip(g).map(|(pj, gj)| pj * (gj - inner)).collect()
}

/// Evaluates every loss term on `batch` and differentiates the total with
/// respect to the adapter's raw logits. λ and the generalist's logits are
/// constants; the fused target of the cross-entropy is detached.
pub fn total_loss_and_grad(
    batch: &FusedBatch,
    hyper: &LossHyperparams,
    step: usize,
) -> Result<(LossBreakdown, BatchGradients)> {
    let n = batch.len();
    if n == 0 {
        return Err(SailError::invalid("empty batch"));
    }
    let k = batch.fused[0].len();
    let nf = n as f64;
    let fail = |what: &str| SailError::NumericalFailure {
        step,
        context: what.to_string(),
    };

    let log_p: Vec<Vec<f64>> = batch.fused.iter().map(|u| fusion::log_softmax_raw(u)).collect();
    let log_pa: Vec<Vec<f64>> = batch
        .ada_norm
        .iter()
        .map(|a| fusion::log_softmax_raw(a))
        .collect();
    let p_ada: Vec<Vec<f64>> = log_pa
        .iter()
        .map(|r| r.iter().map(|x| x.exp()).collect())
        .collect();
    let entropies: Vec<f64> = batch
        .probs
        .iter()
        .zip(&log_p)
        .map(|(p, lp)| -crate::linalg::dot(p, lp))
        .collect();
    let threshold = hyper.threshold_for(k);
    let weights: Vec<f64> = if hyper.weighting {
        entropies.iter().map(|&h| sample_weight(h, threshold)).collect()
    } else {
        vec![1.0; n]
    };

    // gradient w.r.t. the normalized adapter logits
    let mut grad_a = vec![vec![0.0; k]; n];
    let mut breakdown = LossBreakdown {
        mean_weight: weights.iter().sum::<f64>() / nf,
        ..Default::default()
    };

    if hyper.align_enabled {
        let mut ce = 0.0;
        for i in 0..n {
            let target = &batch.probs[i];
            ce -= crate::linalg::dot(target, &log_pa[i]);
            let mass: f64 = target.iter().sum();
            for c in 0..k {
                grad_a[i][c] += (p_ada[i][c] * mass - target[c]) / nf;
            }
        }
        breakdown.align_ce = ce / nf;

        if hyper.balance_coef != 0.0 {
            let (rows, through_fusion) = match hyper.balance_target {
                BalanceTarget::Fused => (&batch.probs, true),
                BalanceTarget::Adapter => (&p_ada, false),
            };
            let q = class_means(rows);
            breakdown.balance = hyper.balance_coef * neg_entropy_clamped(&q);
            let g_p: Vec<f64> = q
                .iter()
                .map(|&qc| hyper.balance_coef * (clamped_ln(qc) + 1.0) / nf)
                .collect();
            for i in 0..n {
                let g_logits = softmax_vjp(&rows[i], &g_p);
                let scale = if through_fusion {
                    1.0 - batch.lambdas[i]
                } else {
                    1.0
                };
                for c in 0..k {
                    grad_a[i][c] += scale * g_logits[c];
                }
            }
        }
    }

    if hyper.entropy_enabled {
        breakdown.ent = entropies
            .iter()
            .zip(&weights)
            .map(|(h, w)| w * h)
            .sum::<f64>()
            / nf;
        if hyper.entropy_coef != 0.0 {
            for i in 0..n {
                let scale = hyper.entropy_coef * weights[i] * (1.0 - batch.lambdas[i]) / nf;
                if scale == 0.0 {
                    continue;
                }
                let h = entropies[i];
                for c in 0..k {
                    let p = batch.probs[i][c];
                    grad_a[i][c] -= scale * p * (log_p[i][c] + h);
                }
            }
        }
    }

    breakdown.total = breakdown.align_ce + breakdown.balance + hyper.entropy_coef * breakdown.ent;
    if !breakdown.total.is_finite() {
        return Err(fail("non-finite loss"));
    }

    let mut d_raw = Vec::with_capacity(n);
    for i in 0..n {
        let g = fusion::normalize_backward(&batch.ada_raw[i], batch.normalization, &grad_a[i])?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(fail("non-finite adapter-logit gradient"));
        }
        d_raw.push(g);
    }
    Ok((breakdown, BatchGradients { d_total_d_zada: d_raw }))
}
