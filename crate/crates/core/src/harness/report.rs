use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::analysis::SampleDiagnostic;
use crate::drift::ResetEvent;
use crate::error::Result;
use crate::fusion;
use crate::objectives::LossBreakdown;
use crate::streamgen::StreamSchedule;

pub const CSV_HEADER: &str =
    "step,domain_id,acc_fused,acc_vlm,acc_ada,lambda_mean,loss_align,loss_balance,loss_ent,loss_total,gdi,reset_flag";

/// Mean prediction entropy of each model over the samples it got right and
/// wrong. NaN when a group is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySplit {
    pub vlm_correct: f64,
    pub vlm_wrong: f64,
    pub ada_correct: f64,
    pub ada_wrong: f64,
}

impl EntropySplit {
    pub(crate) fn compute(
        vlm: &[Vec<f64>],
        ada: &[Vec<f64>],
        vlm_pred: &[usize],
        ada_pred: &[usize],
        labels: &[usize],
    ) -> Self {
        let split = |rows: &[Vec<f64>], pred: &[usize]| {
            let (mut sc, mut nc, mut sw, mut nw) = (0.0, 0usize, 0.0, 0usize);
            for ((z, &p), &y) in rows.iter().zip(pred).zip(labels) {
                let h = fusion::entropy(&fusion::softmax_raw(z));
                if p == y {
                    sc += h;
                    nc += 1;
                } else {
                    sw += h;
                    nw += 1;
                }
            }
            let m = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
            (m(sc, nc), m(sw, nw))
        };
        let (vlm_correct, vlm_wrong) = split(vlm, vlm_pred);
        let (ada_correct, ada_wrong) = split(ada, ada_pred);
        Self {
            vlm_correct,
            vlm_wrong,
            ada_correct,
            ada_wrong,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based batch index.
    pub step: usize,
    pub domain_id: String,
    pub acc_fused: f64,
    pub acc_vlm: f64,
    pub acc_ada: f64,
    pub lambda_mean: f64,
    pub loss: LossBreakdown,
    pub gdi: f64,
    pub reset_flag: bool,
    pub entropy: EntropySplit,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.domain_id,
            self.acc_fused,
            self.acc_vlm,
            self.acc_ada,
            self.lambda_mean,
            self.loss.align_ce,
            self.loss.balance,
            self.loss.ent,
            self.loss.total,
            self.gdi,
            u8::from(self.reset_flag)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAccuracy {
    pub index: usize,
    pub domain_id: String,
    /// First and last 1-based step of the segment.
    pub first_step: usize,
    pub last_step: usize,
    pub acc_fused: f64,
    pub acc_vlm: f64,
    pub acc_ada: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDetection {
    /// Last step of the outgoing domain.
    pub transition: usize,
    /// Steps from the transition to the first reset inside the window.
    pub delay: Option<usize>,
    /// Steps from the transition to the first later reset, window or not.
    pub first_reset_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub window: usize,
    pub transitions: Vec<TransitionDetection>,
    pub detected: usize,
    /// Resets outside every detection window.
    pub false_positives: usize,
}

impl DetectionMetrics {
    /// A transition at `t` is detected if some reset lands in `(t, t + window]`.
    pub fn compute(transitions: &[usize], reset_steps: &[usize], window: usize) -> Self {
        let per: Vec<TransitionDetection> = transitions
            .iter()
            .map(|&t| {
                let after = reset_steps.iter().copied().filter(|&s| s > t).min();
                TransitionDetection {
                    transition: t,
                    delay: after.filter(|&s| s <= t + window).map(|s| s - t),
                    first_reset_after: after.map(|s| s - t),
                }
            })
            .collect();
        let false_positives = reset_steps
            .iter()
            .filter(|&&s| !transitions.iter().any(|&t| s > t && s <= t + window))
            .count();
        Self {
            window,
            detected: per.iter().filter(|d| d.delay.is_some()).count(),
            transitions: per,
            false_positives,
        }
    }

    pub fn detection_rate(&self) -> f64 {
        if self.transitions.is_empty() {
            return f64::NAN;
        }
        self.detected as f64 / self.transitions.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub events: Vec<ResetEvent>,
    pub segments: Vec<SegmentAccuracy>,
    /// First-visit minus revisit fused accuracy, averaged over revisits.
    pub forgetting: BTreeMap<String, f64>,
    pub detection: DetectionMetrics,
    #[serde(skip)]
    pub diagnostics: Vec<SampleDiagnostic>,
    pub wall_time_secs: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl RunReport {
    pub(crate) fn assemble(
        seed: u64,
        schedule: &StreamSchedule,
        records: Vec<StepRecord>,
        events: Vec<ResetEvent>,
        diagnostics: Vec<SampleDiagnostic>,
        window: usize,
        wall_time_secs: f64,
    ) -> Self {
        let lengths: Vec<usize> = schedule.segments.iter().map(|s| s.batches).collect();
        let mut report = Self::from_records(seed, &lengths, records, window);
        report.events = events;
        report.diagnostics = diagnostics;
        report.wall_time_secs = wall_time_secs;
        report
    }

    /// Recomputes every aggregate from the step records alone, given the
    /// segment lengths of the schedule.
    pub fn from_records(seed: u64, segment_lengths: &[usize], records: Vec<StepRecord>, window: usize) -> Self {
        let mut segments = Vec::with_capacity(segment_lengths.len());
        let mut start = 0;
        for (index, &len) in segment_lengths.iter().enumerate() {
            let end = (start + len).min(records.len());
            let rows = &records[start..end];
            if rows.is_empty() {
                break;
            }
            segments.push(SegmentAccuracy {
                index,
                domain_id: rows[0].domain_id.clone(),
                first_step: rows[0].step,
                last_step: rows[rows.len() - 1].step,
                acc_fused: mean(rows.iter().map(|r| r.acc_fused)),
                acc_vlm: mean(rows.iter().map(|r| r.acc_vlm)),
                acc_ada: mean(rows.iter().map(|r| r.acc_ada)),
            });
            start = end;
        }
        let mut forgetting = BTreeMap::new();
        for (i, seg) in segments.iter().enumerate() {
            if segments[..i].iter().any(|s| s.domain_id == seg.domain_id) {
                continue;
            }
            let revisits: Vec<f64> = segments[i + 1..]
                .iter()
                .filter(|s| s.domain_id == seg.domain_id)
                .map(|s| seg.acc_fused - s.acc_fused)
                .collect();
            if !revisits.is_empty() {
                forgetting.insert(seg.domain_id.clone(), mean(revisits.into_iter()));
            }
        }
        let mut transitions = Vec::new();
        let mut acc = 0;
        for &len in &segment_lengths[..segment_lengths.len().saturating_sub(1)] {
            acc += len;
            transitions.push(acc);
        }
        let resets: Vec<usize> = records.iter().filter(|r| r.reset_flag).map(|r| r.step).collect();
        let detection = DetectionMetrics::compute(&transitions, &resets, window);
        Self {
            seed,
            records,
            events: Vec::new(),
            segments,
            forgetting,
            detection,
            diagnostics: Vec::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn mean_acc_fused(&self) -> f64 {
        mean(self.records.iter().map(|r| r.acc_fused))
    }

    pub fn mean_acc_vlm(&self) -> f64 {
        mean(self.records.iter().map(|r| r.acc_vlm))
    }

    pub fn mean_acc_ada(&self) -> f64 {
        mean(self.records.iter().map(|r| r.acc_ada))
    }

    /// Mean forgetting over recurring domains; NaN if none recur.
    pub fn mean_forgetting(&self) -> f64 {
        mean(self.forgetting.values().copied())
    }

    pub fn reset_count(&self) -> usize {
        self.records.iter().filter(|r| r.reset_flag).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }

    pub fn write_events_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            let line = serde_json::to_string(e).map_err(|e| crate::SailError::Io(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Aggregates rounded to 9 significant digits.
    pub fn summary(&self) -> RunSummary {
        let r = round_sig;
        RunSummary {
            seed: self.seed,
            steps: self.records.len(),
            acc_fused: r(self.mean_acc_fused()),
            acc_vlm: r(self.mean_acc_vlm()),
            acc_ada: r(self.mean_acc_ada()),
            lambda_mean: r(mean(self.records.iter().map(|x| x.lambda_mean))),
            loss_total_mean: r(mean(self.records.iter().map(|x| x.loss.total))),
            resets: self.reset_count(),
            segment_acc_fused: self.segments.iter().map(|s| r(s.acc_fused)).collect(),
            forgetting: self.forgetting.iter().map(|(k, v)| (k.clone(), r(*v))).collect(),
            detected: self.detection.detected,
            transitions: self.detection.transitions.len(),
            false_positives: self.detection.false_positives,
        }
    }
}

/// Deterministic aggregates of one run, as stored in golden files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub acc_fused: f64,
    pub acc_vlm: f64,
    pub acc_ada: f64,
    pub lambda_mean: f64,
    pub loss_total_mean: f64,
    pub resets: usize,
    pub segment_acc_fused: Vec<f64>,
    pub forgetting: BTreeMap<String, f64>,
    pub detected: usize,
    pub transitions: usize,
    pub false_positives: usize,
}

impl RunSummary {
    /// Largest absolute difference over every real-valued field, scaled by
    /// `max(1, |golden|)`; `None` if the integer fields or shapes differ.
    pub fn max_scaled_diff(&self, golden: &RunSummary) -> Option<f64> {
        if self.seed != golden.seed
            || self.steps != golden.steps
            || self.resets != golden.resets
            || self.detected != golden.detected
            || self.transitions != golden.transitions
            || self.false_positives != golden.false_positives
            || self.segment_acc_fused.len() != golden.segment_acc_fused.len()
            || self.forgetting.keys().ne(golden.forgetting.keys())
        {
            return None;
        }
        let d = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        let mut worst = 0.0f64;
        for (a, b) in [
            (self.acc_fused, golden.acc_fused),
            (self.acc_vlm, golden.acc_vlm),
            (self.acc_ada, golden.acc_ada),
            (self.lambda_mean, golden.lambda_mean),
            (self.loss_total_mean, golden.loss_total_mean),
        ]
        .into_iter()
        .chain(self.segment_acc_fused.iter().copied().zip(golden.segment_acc_fused.iter().copied()))
        .chain(self.forgetting.values().copied().zip(golden.forgetting.values().copied()))
        {
            worst = worst.max(d(a, b));
        }
        Some(worst)
    }
}

/// `x` rounded to 9 significant decimal digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_windows() {
        let m = DetectionMetrics::compute(&[10, 20, 30], &[3, 12, 16, 26, 35], 5);
        assert_eq!(m.detected, 2);
        assert_eq!(m.transitions[0].delay, Some(2));
        assert_eq!(m.transitions[1].delay, None);
        assert_eq!(m.transitions[1].first_reset_after, Some(6));
        assert_eq!(m.transitions[2].delay, Some(5));
        // 3, 16 and 26 fall outside every window
        assert_eq!(m.false_positives, 3);
    }

    #[test]
    fn window_excludes_transition_step() {
        let m = DetectionMetrics::compute(&[10], &[10], 5);
        assert_eq!(m.detected, 0);
        assert_eq!(m.false_positives, 1);
    }

    #[test]
    fn round_sig_digits() {
        assert_eq!(round_sig(0.123456789123), 0.123456789);
        assert_eq!(round_sig(12345.6789012), 12345.6789);
        assert_eq!(round_sig(0.0), 0.0);
        assert!(round_sig(f64::NAN).is_nan());
    }
}
