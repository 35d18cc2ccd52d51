//! Built-in schedules.
//!
//! All presets share one synthetic world: ten classes in 32 dimensions, an
//! adapter pretrained on the unrotated low-noise source domain, and a
//! generalist whose prototypes average the source and four domains further
//! along the same style path the targets are drawn from.

use crate::adapter::{AdapterArchitecture, PretrainConfig};
use crate::drift::ResetConfig;
use crate::fusion::{NormalizationStrategy, WeightStrategy};
use crate::generalist::GeneralistConfig;
use crate::objectives::LossHyperparams;
use crate::streamgen::{DomainSpec, Segment, StreamSchedule};

use super::{ArtifactPaths, DataConfig, ModeFlags, ReplayPaths, RunConfig};

pub const NAMES: [&str; 4] = ["corruption", "domain-generalization", "recurring", "abrupt"];

pub const GOLDEN_SEEDS: [u64; 3] = [2022, 2023, 2024];

const CLASSES: usize = 10;
const DIM: usize = 32;
const BATCH: usize = 64;

/// Rotation seed shared by every domain: domains differ by how far they sit
/// along this one path (their angle) and by noise severity.
pub const STYLE_AXIS: u64 = 100;

/// Angles of the generalist's broad domains besides the source.
pub const BROAD_ANGLES: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

fn styled(id: impl Into<String>, angle: f64, severity: u8) -> DomainSpec {
    DomainSpec::new(id, severity).with_rotation(STYLE_AXIS, angle)
}

fn world() -> DataConfig {
    let mut broad = vec![DomainSpec::new("source", 1)];
    broad.extend(BROAD_ANGLES.iter().map(|&a| styled(format!("broad-{a}"), a, 2)));
    DataConfig {
        base_seed: 2022,
        source: DomainSpec::new("source", 1),
        source_samples: 3000,
        generalist_domains: broad,
        generalist_samples: 500,
    }
}

fn config(name: &str, segments: Vec<Segment>) -> RunConfig {
    RunConfig {
        name: name.to_string(),
        seeds: GOLDEN_SEEDS.to_vec(),
        lr: 0.5,
        architecture: AdapterArchitecture::new(DIM, vec![32, 32], CLASSES),
        data: world(),
        pretrain: PretrainConfig::default(),
        generalist: GeneralistConfig::default(),
        schedule: StreamSchedule {
            segments,
            batch_size: BATCH,
            seed: 0,
            label_skew: 0.0,
        },
        loss: LossHyperparams::default(),
        weight_strategy: WeightStrategy::Confidence,
        normalization: NormalizationStrategy::Lse,
        reset: ResetConfig::default(),
        modes: ModeFlags::default(),
        replay: ReplayPaths::default(),
        artifacts: ArtifactPaths::default(),
        detection_window: 5,
        diagnostics: false,
    }
}

fn seg(domain: DomainSpec, batches: usize) -> Segment {
    Segment { domain, batches }
}

/// Severity 1 through 5 at one fixed angle.
pub fn corruption() -> RunConfig {
    let segments = (1..=5u8)
        .map(|s| seg(styled(format!("corrupt-s{s}"), 0.9, s), 30))
        .collect();
    config("corruption", segments)
}

/// Four style-like domains: rotation plus mean shift at severity 1.
pub fn domain_generalization() -> RunConfig {
    let segments = [0.4, 0.8, 1.2, 1.6]
        .iter()
        .enumerate()
        .map(|(i, &a)| seg(styled(format!("style-{i}"), a, 1).with_shift(40 + i as u64, 2.0), 30))
        .collect();
    config("domain-generalization", segments)
}

/// A, B, A.
pub fn recurring() -> RunConfig {
    let a = styled("A", 0.6, 3);
    let b = styled("B", 1.4, 3);
    config("recurring", vec![seg(a.clone(), 40), seg(b, 40), seg(a, 40)])
}

/// Six domains alternating between the near and far ends of the style path:
/// five abrupt transitions.
pub fn abrupt() -> RunConfig {
    let spots = [(0.4, 3), (1.4, 3), (0.5, 2), (1.5, 2), (0.3, 4), (1.3, 4)];
    let segments = spots
        .iter()
        .enumerate()
        .map(|(i, &(a, s))| seg(styled(format!("D{i}"), a, s), 25))
        .collect();
    config("abrupt", segments)
}

pub fn by_name(name: &str) -> Option<RunConfig> {
    match name {
        "corruption" => Some(corruption()),
        "domain-generalization" => Some(domain_generalization()),
        "recurring" => Some(recurring()),
        "abrupt" => Some(abrupt()),
        _ => None,
    }
}
