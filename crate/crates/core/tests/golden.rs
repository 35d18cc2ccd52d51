//! Checked-in reference outputs. Run with SAIL_BLESS=1 to regenerate.

mod common;

use std::collections::BTreeMap;

use common::*;
use sail_core::adapter;
use sail_core::generalist;
use sail_core::harness::{self, presets, RunSummary};

fn check_or_bless(name: &str, produced: &str) {
    if blessing() {
        write_golden(name, produced);
        return;
    }
    assert!(read_golden(name) == produced, "{name} differs from the regenerated output");
}

fn logits_text(records: &[generalist::LogitRecord]) -> String {
    let mut buf = Vec::new();
    generalist::write_external_logits(records, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn adapter_and_generalist_logits_regenerate_bitwise() {
    let prepared = harness::prepare(&presets::corruption(), GOLDEN_SEED).unwrap();
    let (x, y) = golden_batch(&prepared);
    let (za, _) = adapter::forward(&prepared.adapter, &x).unwrap();
    let zv = prepared.generalist.predict(&x);
    check_or_bless("adapter-2022.logits", &logits_text(&records(&za, &y)));
    check_or_bless("generalist-2022.logits", &logits_text(&records(&zv, &y)));
}

#[test]
fn golden_logits_files_parse() {
    for name in ["adapter-2022.logits", "generalist-2022.logits"] {
        let recs: Vec<_> = generalist::load_external_logits(&golden_path(name))
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(recs.len(), 64);
        assert!(recs.iter().all(|r| r.logits.len() == 10 && r.label.is_some()));
    }
}

#[test]
fn preset_summaries_match_golden() {
    let mut produced: BTreeMap<String, Vec<RunSummary>> = BTreeMap::new();
    for name in presets::NAMES {
        let c = presets::by_name(name).unwrap();
        let reports = harness::run_seeds(&c).unwrap();
        produced.insert(name.to_string(), reports.iter().map(|r| r.summary()).collect());
    }
    if blessing() {
        write_golden(SUMMARIES_FILE, &(serde_json::to_string_pretty(&produced).unwrap() + "\n"));
        return;
    }
    let golden = load_summaries();
    assert_eq!(golden.keys().collect::<Vec<_>>(), produced.keys().collect::<Vec<_>>());
    for (name, runs) in &produced {
        for (got, want) in runs.iter().zip(&golden[name]) {
            let d = got.max_scaled_diff(want).unwrap_or_else(|| panic!("{name} seed {}: structure differs", got.seed));
            assert!(d <= 1e-9, "{name} seed {}: scaled difference {d:e}", got.seed);
        }
    }
}

#[test]
fn development_margins() {
    let table = harness::run_ablation_grid(&presets::corruption()).unwrap();
    let gain = 100.0 * (table.cell(true, true, true).mean - table.cell(false, false, false).mean);
    let (with, without) = recurring_forgetting();
    let (rate, worst, _) = abrupt_detection();
    let measured = Margins {
        corruption_gain_points: round4(gain),
        recurring_forgetting_gap_points: round4(100.0 * (without - with)),
        abrupt_detection_rate: round4(rate),
        abrupt_max_false_positives: worst,
    };
    if blessing() {
        write_golden(MARGINS_FILE, &toml::to_string(&measured).unwrap());
        return;
    }
    assert_eq!(load_margins(), measured);
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}
