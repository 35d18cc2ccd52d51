//! Fusion-only evaluation of logits recorded from external models.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SailError};
use crate::fusion::{self, FusedBatch, NormalizationStrategy, WeightStrategy};
use crate::generalist::{self, LogitRecord};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub samples: usize,
    /// Samples carrying a label; accuracies are over these only.
    pub labeled: usize,
    pub acc_fused: f64,
    pub acc_vlm: f64,
    pub acc_ada: f64,
    pub lambda_mean: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Per sample, in generalist-file order.
    pub sample_ids: Vec<String>,
    pub lambdas: Vec<f64>,
    pub fused_predictions: Vec<usize>,
}

fn read_all(path: &Path) -> Result<Vec<LogitRecord>> {
    generalist::load_external_logits(path)?.collect()
}

/// Reads both files and fuses them in batches of `batch_size` (relevant for
/// the batch-entropy weight).
pub fn replay(
    vlm_path: &Path,
    ada_path: &Path,
    weights: WeightStrategy,
    normalization: NormalizationStrategy,
    batch_size: usize,
) -> Result<ReplayReport> {
    replay_records(&read_all(vlm_path)?, &read_all(ada_path)?, weights, normalization, batch_size)
}

/// Samples are matched by id; both files must hold the same id set and
/// agree on labels where both give one.
pub fn replay_records(
    vlm: &[LogitRecord],
    ada: &[LogitRecord],
    weights: WeightStrategy,
    normalization: NormalizationStrategy,
    batch_size: usize,
) -> Result<ReplayReport> {
    if batch_size == 0 {
        return Err(SailError::Config("replay batch size must be positive".into()));
    }
    if vlm.is_empty() {
        return Err(SailError::invalid("replay needs at least one sample"));
    }
    if vlm.len() != ada.len() {
        return Err(SailError::invalid(format!(
            "logit files differ in length: {} vs {}",
            vlm.len(),
            ada.len()
        )));
    }
    let by_id: HashMap<&str, &LogitRecord> = ada.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut pairs = Vec::with_capacity(vlm.len());
    for v in vlm {
        let a = by_id
            .get(v.sample_id.as_str())
            .ok_or_else(|| SailError::invalid(format!("sample `{}` missing from adapter logits", v.sample_id)))?;
        if a.logits.len() != v.logits.len() {
            return Err(SailError::invalid(format!("sample `{}` has different class counts", v.sample_id)));
        }
        let label = match (v.label, a.label) {
            (Some(x), Some(y)) if x != y => {
                return Err(SailError::invalid(format!("sample `{}` has conflicting labels", v.sample_id)))
            }
            (x, y) => x.or(y),
        };
        pairs.push((v, *a, label));
    }

    let mut lambdas = Vec::with_capacity(pairs.len());
    let mut fused_predictions = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size) {
        let vr: Vec<&[f64]> = chunk.iter().map(|(v, _, _)| v.logits.as_slice()).collect();
        let ar: Vec<&[f64]> = chunk.iter().map(|(_, a, _)| a.logits.as_slice()).collect();
        let lam = fusion::raw_interpolation_weights(&vr, &ar, weights)?;
        let batch = FusedBatch::build(&vr, &ar, &lam, normalization)?;
        fused_predictions.extend(batch.predictions());
        lambdas.extend(lam);
    }

    let (mut labeled, mut hf, mut hv, mut ha) = (0usize, 0usize, 0usize, 0usize);
    for (i, (v, a, label)) in pairs.iter().enumerate() {
        if let Some(y) = *label {
            labeled += 1;
            hf += usize::from(fused_predictions[i] == y);
            hv += usize::from(linalg::argmax(&v.logits) == y);
            ha += usize::from(linalg::argmax(&a.logits) == y);
        }
    }
    let frac = |h: usize| if labeled == 0 { f64::NAN } else { h as f64 / labeled as f64 };
    Ok(ReplayReport {
        samples: pairs.len(),
        labeled,
        acc_fused: frac(hf),
        acc_vlm: frac(hv),
        acc_ada: frac(ha),
        lambda_mean: lambdas.iter().sum::<f64>() / lambdas.len() as f64,
        lambda_min: lambdas.iter().cloned().fold(f64::INFINITY, f64::min),
        lambda_max: lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        sample_ids: pairs.iter().map(|(v, _, _)| v.sample_id.clone()).collect(),
        lambdas,
        fused_predictions,
    })
}
