#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sail_core::generalist::LogitRecord;
use sail_core::harness::{self, presets, RunSummary};
use sail_core::linalg::Matrix;
use sail_core::streamgen::{self, DomainSpec};
use serde::{Deserialize, Serialize};

/// Set to regenerate the files under tests/golden instead of checking them.
pub const BLESS_ENV: &str = "SAIL_BLESS";

pub fn blessing() -> bool {
    std::env::var_os(BLESS_ENV).is_some()
}

pub fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden").join(name)
}

pub fn read_golden(name: &str) -> String {
    let p = golden_path(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e} (regenerate with {BLESS_ENV}=1)", p.display()))
}

pub fn write_golden(name: &str, contents: &str) {
    std::fs::write(golden_path(name), contents).unwrap();
}

pub const GOLDEN_SEED: u64 = 2022;

/// 64 samples of a held-out severity-3 domain.
pub fn golden_batch(prepared: &harness::Prepared) -> (Matrix, Vec<usize>) {
    let domain = DomainSpec::new("golden", 3).with_rotation(presets::STYLE_AXIS, 0.9);
    let pool = streamgen::sample_pool(&prepared.base, &domain, 64, 7).unwrap();
    (pool.features, pool.labels)
}

pub fn records(logits: &Matrix, labels: &[usize]) -> Vec<LogitRecord> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| LogitRecord {
            sample_id: format!("g{i}"),
            label: Some(y),
            logits: logits.row(i).to_vec(),
        })
        .collect()
}

/// Frozen development measurements the acceptance thresholds refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Full method minus no-backward mean fused accuracy, corruption
    /// schedule, in accuracy points.
    pub corruption_gain_points: f64,
    /// No-reset minus with-reset mean forgetting, recurring schedule, in
    /// accuracy points.
    pub recurring_forgetting_gap_points: f64,
    /// Fraction of transitions detected on the abrupt schedule.
    pub abrupt_detection_rate: f64,
    /// Largest false-positive count of any seed on the abrupt schedule.
    pub abrupt_max_false_positives: usize,
}

pub const MARGINS_FILE: &str = "margins.toml";
pub const SUMMARIES_FILE: &str = "summaries.json";

pub fn load_margins() -> Margins {
    toml::from_str(&read_golden(MARGINS_FILE)).unwrap()
}

pub fn load_summaries() -> BTreeMap<String, Vec<RunSummary>> {
    serde_json::from_str(&read_golden(SUMMARIES_FILE)).unwrap()
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean forgetting over seeds with and without resets on the recurring
/// schedule.
pub fn recurring_forgetting() -> (f64, f64) {
    let c = presets::recurring();
    let mut nr = c.clone();
    nr.modes.disable_reset = true;
    let with = harness::run_seeds(&c).unwrap();
    let without = harness::run_seeds(&nr).unwrap();
    (
        mean(with.iter().map(|r| r.mean_forgetting())),
        mean(without.iter().map(|r| r.mean_forgetting())),
    )
}

/// Detection rate over all seeds and the worst per-seed false-positive
/// count on the abrupt schedule.
pub fn abrupt_detection() -> (f64, usize, Vec<String>) {
    let reports = harness::run_seeds(&presets::abrupt()).unwrap();
    let detected: usize = reports.iter().map(|r| r.detection.detected).sum();
    let total: usize = reports.iter().map(|r| r.detection.transitions.len()).sum();
    let worst = reports.iter().map(|r| r.detection.false_positives).max().unwrap();
    let per = reports
        .iter()
        .map(|r| format!("seed {}: {}/{} fp {}", r.seed, r.detection.detected, r.detection.transitions.len(), r.detection.false_positives))
        .collect();
    (detected as f64 / total as f64, worst, per)
}
