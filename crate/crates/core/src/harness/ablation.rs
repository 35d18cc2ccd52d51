use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{mean_std, prepare_seeds, run_variants, RunConfig, RunReport};
use crate::drift::ResetStrategy;
use crate::error::Result;
use crate::fusion::{NormalizationStrategy, WeightStrategy};

/// One {entropy, alignment, reset} combination across the seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub ent: bool,
    pub align: bool,
    pub reset: bool,
    /// Mean fused accuracy of each seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

/// Table rows as (label, ent, align, reset).
const TABLE_ROWS: [(&str, bool, bool, bool); 5] = [
    ("(1) No Backward", false, false, false),
    ("(2)", true, false, true),
    ("(3)", false, true, true),
    ("(4)", true, true, false),
    ("(5) SAIL", true, true, true),
];

impl AblationTable {
    pub fn cell(&self, ent: bool, align: bool, reset: bool) -> &AblationCell {
        self.cells
            .iter()
            .find(|c| c.ent == ent && c.align == align && c.reset == reset)
            .expect("grid holds every combination")
    }

    /// The five ablation rows: no backward, entropy + reset, alignment +
    /// reset, both losses without reset, everything.
    pub fn rows(&self) -> Vec<(&'static str, &AblationCell)> {
        TABLE_ROWS
            .iter()
            .map(|&(label, e, a, r)| (label, self.cell(e, a, r)))
            .collect()
    }

    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "x" } else { " " };
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} | Ent | Align | reset | fused acc (%)", "");
        let _ = writeln!(s, "{}", "-".repeat(58));
        for (label, c) in self.rows() {
            let _ = writeln!(
                s,
                "{:<16} |  {}  |   {}   |   {}   | {:6.2} ± {:.2}",
                label,
                mark(c.ent),
                mark(c.align),
                mark(c.reset),
                100.0 * c.mean,
                100.0 * c.std
            );
        }
        s
    }
}

fn cell_config(base: &RunConfig, ent: bool, align: bool, reset: bool) -> RunConfig {
    let mut c = base.clone();
    c.modes.no_backward = false;
    c.modes.disable_ent = !ent;
    c.modes.disable_align = !align;
    c.modes.disable_reset = !reset;
    c
}

/// Runs all eight {ent, align, reset} combinations over the seed list.
pub fn run_ablation_grid(config: &RunConfig) -> Result<AblationTable> {
    config.validate()?;
    let mut combos = Vec::new();
    for ent in [false, true] {
        for align in [false, true] {
            for reset in [false, true] {
                combos.push((ent, align, reset));
            }
        }
    }
    let configs: Vec<RunConfig> = combos.iter().map(|&(e, a, r)| cell_config(config, e, a, r)).collect();
    let prepared = prepare_seeds(config)?;
    let accs: Vec<f64> = run_variants(&configs, &prepared)?
        .iter()
        .map(RunReport::mean_acc_fused)
        .collect();
    let per_cell = config.seeds.len();
    let cells = combos
        .iter()
        .enumerate()
        .map(|(i, &(ent, align, reset))| {
            let per_seed = accs[i * per_cell..(i + 1) * per_cell].to_vec();
            let (mean, std) = mean_std(&per_seed);
            AblationCell {
                ent,
                align,
                reset,
                per_seed,
                mean,
                std,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: config.seeds.clone(),
        cells,
    })
}

/// A single hyperparameter varied over a list of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "axis", content = "values")]
pub enum SweepAxis {
    Threshold(Vec<f64>),
    Interval(Vec<usize>),
    Alpha(Vec<f64>),
    Strategy(Vec<ResetStrategy>),
    Weight(Vec<WeightStrategy>),
    Normalization(Vec<NormalizationStrategy>),
}

impl SweepAxis {
    fn variants(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        fn each<T: Clone>(values: &[T], base: &RunConfig, f: impl Fn(&mut RunConfig, T) -> String) -> Vec<(String, RunConfig)> {
            values
                .iter()
                .map(|v| {
                    let mut c = base.clone();
                    let label = f(&mut c, v.clone());
                    (label, c)
                })
                .collect()
        }
        match self {
            SweepAxis::Threshold(v) => each(v, base, |c, x| {
                c.reset.threshold = x;
                format!("tau={x}")
            }),
            SweepAxis::Interval(v) => each(v, base, |c, x| {
                c.reset.interval = x;
                format!("s={x}")
            }),
            SweepAxis::Alpha(v) => each(v, base, |c, x| {
                c.reset.alpha = x;
                format!("alpha={x}")
            }),
            SweepAxis::Strategy(v) => each(v, base, |c, x| {
                c.reset.strategy = x;
                format!("strategy={x}")
            }),
            SweepAxis::Weight(v) => each(v, base, |c, x| {
                c.weight_strategy = x;
                format!("weight={x}")
            }),
            SweepAxis::Normalization(v) => each(v, base, |c, x| {
                c.normalization = x;
                format!("normalization={x}")
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub resets_mean: f64,
    /// NaN when the schedule has no recurring domain.
    pub forgetting_mean: f64,
    /// NaN when the schedule has no transition.
    pub detection_rate: f64,
    pub false_positives_mean: f64,
}

/// Runs every value of `axis` over the seed list.
pub fn run_sweep(config: &RunConfig, axis: &SweepAxis) -> Result<Vec<SweepRow>> {
    let variants = axis.variants(config);
    for (_, c) in &variants {
        c.validate()?;
    }
    let configs: Vec<RunConfig> = variants.iter().map(|(_, c)| c.clone()).collect();
    let reports = run_variants(&configs, &prepare_seeds(config)?)?;
    let k = config.seeds.len();
    Ok(variants
        .iter()
        .enumerate()
        .map(|(i, (label, _))| {
            let rs = &reports[i * k..(i + 1) * k];
            let col = |f: &dyn Fn(&RunReport) -> f64| rs.iter().map(f).collect::<Vec<f64>>();
            let (acc_mean, acc_std) = mean_std(&col(&|r| r.mean_acc_fused()));
            let detected: usize = rs.iter().map(|r| r.detection.detected).sum();
            let transitions: usize = rs.iter().map(|r| r.detection.transitions.len()).sum();
            SweepRow {
                label: label.clone(),
                acc_mean,
                acc_std,
                resets_mean: mean_std(&col(&|r| r.reset_count() as f64)).0,
                forgetting_mean: mean_std(&col(&|r| r.mean_forgetting())).0,
                detection_rate: if transitions == 0 {
                    f64::NAN
                } else {
                    detected as f64 / transitions as f64
                },
                false_positives_mean: mean_std(&col(&|r| r.detection.false_positives as f64)).0,
            }
        })
        .collect())
}
