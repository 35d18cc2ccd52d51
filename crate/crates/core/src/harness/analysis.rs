//! Per-sample entropy/confidence diagnostics and their correlation with the
//! cross-entropy against the true label.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion;
use crate::linalg;

use super::RunReport;

/// Quadrants with fewer points are skipped.
pub const MIN_QUADRANT_POINTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostic {
    pub step: usize,
    pub label: usize,
    pub fused_pred: usize,
    pub vlm_pred: usize,
    pub ada_pred: usize,
    pub vlm_entropy: f64,
    pub vlm_confidence: f64,
    pub vlm_ce: f64,
    pub ada_entropy: f64,
    pub ada_confidence: f64,
    pub ada_ce: f64,
}

impl SampleDiagnostic {
    pub(crate) fn from_batch(
        step: usize,
        vlm: &[Vec<f64>],
        ada: &[Vec<f64>],
        fused_pred: &[usize],
        labels: &[usize],
    ) -> Vec<Self> {
        let stats = |z: &[f64], y: usize| {
            let lp = fusion::log_softmax_raw(z);
            let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
            let conf = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (linalg::argmax(z), fusion::entropy(&p), conf, -lp[y])
        };
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let (vp, vh, vc, vce) = stats(&vlm[i], y);
                let (ap, ah, ac, ace) = stats(&ada[i], y);
                Self {
                    step,
                    label: y,
                    fused_pred: fused_pred[i],
                    vlm_pred: vp,
                    ada_pred: ap,
                    vlm_entropy: vh,
                    vlm_confidence: vc,
                    vlm_ce: vce,
                    ada_entropy: ah,
                    ada_confidence: ac,
                    ada_ce: ace,
                }
            })
            .collect()
    }

    pub fn vlm_correct(&self) -> bool {
        self.vlm_pred == self.label
    }

    pub fn ada_correct(&self) -> bool {
        self.ada_pred == self.label
    }
}

/// Pearson correlation. NaN when either variable has zero variance or fewer
/// than two points are given.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantStats {
    pub vlm_correct: bool,
    pub ada_correct: bool,
    pub count: usize,
    /// Set when the quadrant was skipped.
    pub note: Option<String>,
    pub r_vlm_entropy: f64,
    pub r_vlm_confidence: f64,
    pub r_ada_entropy: f64,
    pub r_ada_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub total: usize,
    pub quadrants: Vec<QuadrantStats>,
}

fn fmt_r(r: f64) -> String {
    if r.is_nan() {
        "NaN".to_string()
    } else {
        format!("{r:.6}")
    }
}

impl CorrelationReport {
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "vlm_correct,ada_correct,count,r_vlm_entropy_ce,r_vlm_confidence_ce,r_ada_entropy_ce,r_ada_confidence_ce,note"
        )?;
        for q in &self.quadrants {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                u8::from(q.vlm_correct),
                u8::from(q.ada_correct),
                q.count,
                fmt_r(q.r_vlm_entropy),
                fmt_r(q.r_vlm_confidence),
                fmt_r(q.r_ada_entropy),
                fmt_r(q.r_ada_confidence),
                q.note.as_deref().unwrap_or("")
            )?;
        }
        Ok(())
    }
}

/// Scatter points, one row per sample.
pub fn write_scatter<W: Write>(samples: &[SampleDiagnostic], mut w: W) -> Result<()> {
    writeln!(
        w,
        "step,label,fused_pred,vlm_pred,ada_pred,vlm_entropy,vlm_confidence,vlm_ce,ada_entropy,ada_confidence,ada_ce"
    )?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.step,
            s.label,
            s.fused_pred,
            s.vlm_pred,
            s.ada_pred,
            s.vlm_entropy,
            s.vlm_confidence,
            s.vlm_ce,
            s.ada_entropy,
            s.ada_confidence,
            s.ada_ce
        )?;
    }
    Ok(())
}

/// Pearson r of entropy and of confidence against per-sample cross-entropy,
/// for each model, within each (generalist correct, adapter correct) quadrant.
pub fn analyze_correlations(samples: &[SampleDiagnostic]) -> CorrelationReport {
    let mut quadrants = Vec::with_capacity(4);
    for vlm_correct in [true, false] {
        for ada_correct in [true, false] {
            let pts: Vec<&SampleDiagnostic> = samples
                .iter()
                .filter(|s| s.vlm_correct() == vlm_correct && s.ada_correct() == ada_correct)
                .collect();
            let col = |f: fn(&SampleDiagnostic) -> f64| pts.iter().map(|s| f(s)).collect::<Vec<f64>>();
            let mut q = QuadrantStats {
                vlm_correct,
                ada_correct,
                count: pts.len(),
                note: None,
                r_vlm_entropy: f64::NAN,
                r_vlm_confidence: f64::NAN,
                r_ada_entropy: f64::NAN,
                r_ada_confidence: f64::NAN,
            };
            if pts.len() < MIN_QUADRANT_POINTS {
                q.note = Some(format!("skipped: {} points", pts.len()));
            } else {
                let (vce, ace) = (col(|s| s.vlm_ce), col(|s| s.ada_ce));
                q.r_vlm_entropy = pearson(&col(|s| s.vlm_entropy), &vce);
                q.r_vlm_confidence = pearson(&col(|s| s.vlm_confidence), &vce);
                q.r_ada_entropy = pearson(&col(|s| s.ada_entropy), &ace);
                q.r_ada_confidence = pearson(&col(|s| s.ada_confidence), &ace);
            }
            quadrants.push(q);
        }
    }
    CorrelationReport {
        total: samples.len(),
        quadrants,
    }
}

impl RunReport {
    pub fn correlations(&self) -> CorrelationReport {
        analyze_correlations(&self.diagnostics)
    }
}
