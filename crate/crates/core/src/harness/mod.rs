//! Episode orchestration: configuration, the per-batch adaptation loop,
//! baselines, ablations and reports.

mod ablation;
mod analysis;
pub mod presets;
mod replay;
mod report;

pub use ablation::{run_ablation_grid, run_sweep, AblationCell, AblationTable, SweepAxis, SweepRow};
pub use analysis::{analyze_correlations, pearson, write_scatter, CorrelationReport, QuadrantStats, SampleDiagnostic};
pub use replay::{replay, ReplayReport};
pub use report::{
    round_sig, DetectionMetrics, RunReport, RunSummary, SegmentAccuracy, StepRecord, TransitionDetection,
    CSV_HEADER,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterArchitecture, AdapterParams, LabeledData, PretrainConfig, SourceSnapshot};
use crate::drift::{AnchorState, ResetConfig, ResetStrategy};
use crate::error::{Result, SailError};
use crate::fusion::{self, FusedBatch, NormalizationStrategy, WeightStrategy};
use crate::generalist::{self, GeneralistConfig, PrototypeClassifier};
use crate::linalg::{self, Matrix};
use crate::objectives::{self, LossBreakdown, LossHyperparams};
use crate::streamgen::{self, DomainSpec, GaussianBase, StreamSchedule};

/// Environment variable capping concurrent episodes.
pub const THREADS_ENV: &str = "SAIL_STREAM_THREADS";

/// Independent random streams derived from a run seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum SeedStream {
    Stream = 1,
    AdapterInit = 2,
    SourceData = 3,
    Generalist = 4,
    GeneralistData = 5,
    Reset = 6,
}

fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

/// Synthetic world shared by every seed: the base mixture and the domains the
/// two models are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the base mixture means.
    pub base_seed: u64,
    pub source: DomainSpec,
    pub source_samples: usize,
    /// Domains the generalist's prototypes are averaged over.
    pub generalist_domains: Vec<DomainSpec>,
    pub generalist_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeFlags {
    /// Fuse only; never update the adapter.
    pub no_backward: bool,
    pub disable_align: bool,
    pub disable_ent: bool,
    pub disable_reset: bool,
    /// Debug: λ = 1 for every sample.
    pub force_lambda_one: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayPaths {
    pub vlm_logits: Option<PathBuf>,
    pub ada_logits: Option<PathBuf>,
}

impl ReplayPaths {
    pub fn is_active(&self) -> bool {
        self.vlm_logits.is_some() || self.ada_logits.is_some()
    }
}

/// Paths to prebuilt artifacts; when absent they are built from the seed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactPaths {
    pub adapter: Option<PathBuf>,
    pub generalist: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub architecture: AdapterArchitecture,
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub generalist: GeneralistConfig,
    pub schedule: StreamSchedule,
    #[serde(default)]
    pub loss: LossHyperparams,
    #[serde(default)]
    pub weight_strategy: WeightStrategy,
    #[serde(default)]
    pub normalization: NormalizationStrategy,
    #[serde(default)]
    pub reset: ResetConfig,
    #[serde(default)]
    pub modes: ModeFlags,
    #[serde(default)]
    pub replay: ReplayPaths,
    #[serde(default)]
    pub artifacts: ArtifactPaths,
    /// Batches after a transition within which a reset counts as a detection.
    #[serde(default = "default_window")]
    pub detection_window: usize,
    /// Keep per-sample diagnostics for correlation analysis.
    #[serde(default)]
    pub diagnostics: bool,
}

fn default_window() -> usize {
    5
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SailError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SailError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            SailError::Config(m) => SailError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SailError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(SailError::Config("seed list is empty".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(SailError::Config(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        self.architecture.validate()?;
        self.loss.validate()?;
        self.reset.validate()?;
        if self.detection_window == 0 {
            return Err(SailError::Config("detection_window must be positive".into()));
        }
        if self.replay.is_active() {
            if self.replay.vlm_logits.is_none() || self.replay.ada_logits.is_none() {
                return Err(SailError::Config(
                    "replay needs logits files for both models; a replayed model cannot be paired with a synthetic one"
                        .into(),
                ));
            }
            if self.artifacts.adapter.is_some() || self.artifacts.generalist.is_some() {
                return Err(SailError::Config(
                    "replay logits and model artifacts cannot both be given".into(),
                ));
            }
            return Ok(());
        }
        self.schedule.validate()?;
        self.data.source.validate()?;
        for d in &self.data.generalist_domains {
            d.validate()?;
        }
        if self.data.generalist_domains.is_empty() {
            return Err(SailError::Config("generalist needs at least one domain".into()));
        }
        if self.data.source_samples < self.architecture.classes || self.data.generalist_samples < self.architecture.classes {
            return Err(SailError::Config("too few samples to cover every class".into()));
        }
        if self.generalist.feature_dim == 0 || !(self.generalist.temperature > 0.0) {
            return Err(SailError::Config("generalist needs feature_dim > 0 and temperature > 0".into()));
        }
        Ok(())
    }

    /// Loss terms after applying the mode flags.
    pub fn effective_loss(&self) -> LossHyperparams {
        let mut h = self.loss.clone();
        h.align_enabled &= !self.modes.disable_align;
        h.entropy_enabled &= !self.modes.disable_ent;
        h
    }

    fn updates_enabled(&self) -> bool {
        let h = self.effective_loss();
        !self.modes.no_backward && (h.align_enabled || h.entropy_enabled) && self.lr > 0.0
    }

    fn effective_reset(&self, seed: u64) -> ResetConfig {
        let mut r = self.reset;
        if self.modes.disable_reset {
            r.strategy = ResetStrategy::None;
        }
        r.seed = derive_seed(seed, SeedStream::Reset);
        r
    }
}

/// Everything built before the stream starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub base: GaussianBase,
    pub generalist: PrototypeClassifier,
    pub adapter: AdapterParams,
    pub source: SourceSnapshot,
}

/// Builds the base mixture, fits the generalist and pretrains the adapter
/// (or loads them from the configured artifacts).
pub fn prepare(config: &RunConfig, seed: u64) -> Result<Prepared> {
    let arch = &config.architecture;
    let base = streamgen::make_base(arch.classes, arch.d_in, config.data.base_seed)?;
    let generalist = match &config.artifacts.generalist {
        Some(path) => load_generalist(path)?,
        None => build_generalist(config, &base, seed)?,
    };
    let (adapter, source) = match &config.artifacts.adapter {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| SailError::Io(format!("{}: {e}", path.display())))?;
            let p = adapter::read_snapshot(std::io::BufReader::new(f))?;
            if p.architecture() != arch {
                return Err(SailError::Config(format!(
                    "adapter artifact {} does not match the configured architecture",
                    path.display()
                )));
            }
            let s = p.snapshot();
            (p, s)
        }
        None => {
            let pool = streamgen::sample_pool(
                &base,
                &config.data.source,
                config.data.source_samples,
                derive_seed(seed, SeedStream::SourceData),
            )?;
            let data = LabeledData {
                features: pool.features,
                labels: pool.labels,
            };
            adapter::pretrain(arch, &data, &config.pretrain, derive_seed(seed, SeedStream::AdapterInit))?
        }
    };
    if generalist.classes() != arch.classes || generalist.d_in() != arch.d_in {
        return Err(SailError::Config("generalist shape does not match the architecture".into()));
    }
    Ok(Prepared {
        base,
        generalist,
        adapter,
        source,
    })
}

/// Fits prototypes on the union of the configured generalist domains.
pub fn build_generalist(config: &RunConfig, base: &GaussianBase, seed: u64) -> Result<PrototypeClassifier> {
    let data_seed = derive_seed(seed, SeedStream::GeneralistData);
    let d = base.dim();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, domain) in config.data.generalist_domains.iter().enumerate() {
        let pool = streamgen::sample_pool(base, domain, config.data.generalist_samples, data_seed.wrapping_add(i as u64))?;
        rows.extend_from_slice(pool.features.as_slice());
        labels.extend(pool.labels);
    }
    let x = Matrix::from_vec(labels.len(), d, rows);
    generalist::fit_prototypes(
        &x,
        &labels,
        base.classes(),
        &config.generalist,
        derive_seed(seed, SeedStream::Generalist),
    )
}

pub fn load_generalist(path: &Path) -> Result<PrototypeClassifier> {
    let text = std::fs::read_to_string(path).map_err(|e| SailError::Io(format!("{}: {e}", path.display())))?;
    let c: PrototypeClassifier =
        serde_json::from_str(&text).map_err(|e| SailError::parse(path.display().to_string(), e.to_string()))?;
    c.validate()?;
    Ok(c)
}

/// Accuracy of the frozen generalist and of the adapter as given, on `n`
/// fresh samples of `domain` fed in batches of `batch_size`.
pub fn evaluate_domain(
    prepared: &Prepared,
    domain: &DomainSpec,
    n: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if batch_size < 2 {
        return Err(SailError::Config("evaluation batch size must be at least 2".into()));
    }
    let pool = streamgen::sample_pool(&prepared.base, domain, n, seed)?;
    let (mut hv, mut ha, mut seen) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..pool.labels.len()).collect();
    for chunk in idx.chunks(batch_size).filter(|c| c.len() >= 2) {
        let x = pool.features.select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| pool.labels[i]).collect();
        let (za, _) = adapter::forward(&prepared.adapter, &x)?;
        hv += adapter::accuracy(&prepared.generalist.predict(&x), &y) * y.len() as f64;
        ha += adapter::accuracy(&za, &y) * y.len() as f64;
        seen += y.len();
    }
    Ok((hv / seen as f64, ha / seen as f64))
}

/// The configured schedule with its stream seed derived from `seed`: the
/// exact batches an episode for `seed` sees.
pub fn episode_schedule(config: &RunConfig, seed: u64) -> StreamSchedule {
    let mut schedule = config.schedule.clone();
    schedule.seed = derive_seed(seed, SeedStream::Stream);
    schedule
}

/// Hook observing each step after drift handling. Used by instrumented runs.
pub trait StepObserver {
    fn after_step(&mut self, _step: usize, _anchor: &AnchorState, _theta: &[f64], _reset: bool) {}
}

impl StepObserver for () {}

/// Runs one episode for `seed`.
pub fn run_episode(config: &RunConfig, seed: u64) -> Result<RunReport> {
    run_episode_observed(config, seed, &mut ())
}

/// Like [`run_episode`], calling `observer` after every step.
pub fn run_episode_observed(config: &RunConfig, seed: u64, observer: &mut dyn StepObserver) -> Result<RunReport> {
    config.validate()?;
    if config.replay.is_active() {
        return Err(SailError::Config("config is in replay mode; use replay()".into()));
    }
    let prepared = prepare(config, seed)?;
    run_prepared(config, seed, prepared, observer)
}

/// The adaptation loop proper, on already-built models.
pub fn run_prepared(
    config: &RunConfig,
    seed: u64,
    prepared: Prepared,
    observer: &mut dyn StepObserver,
) -> Result<RunReport> {
    let started = Instant::now();
    let Prepared {
        base,
        generalist,
        mut adapter,
        source,
    } = prepared;
    let hyper = config.effective_loss();
    let train = config.updates_enabled();
    let depth: Vec<usize> = (0..source.values().len()).collect();
    let mut anchor = AnchorState::new(source.values().to_vec(), depth, config.effective_reset(seed))?;
    let schedule = episode_schedule(config, seed);

    let mut records = Vec::with_capacity(schedule.total_batches());
    let mut events = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, batch) in schedule.stream(&base)?.enumerate() {
        let step = i + 1;
        let z_vlm = generalist.predict(&batch.features);
        let (z_ada, cache) = adapter::forward(&adapter, &batch.features)?;
        let vlm_rows = z_vlm.row_vecs();
        let ada_rows = z_ada.row_vecs();
        let lambdas = if config.modes.force_lambda_one {
            vec![1.0; vlm_rows.len()]
        } else {
            fusion::raw_interpolation_weights(&vlm_rows, &ada_rows, config.weight_strategy)?
        };
        let fused = FusedBatch::build(&vlm_rows, &ada_rows, &lambdas, config.normalization)?;
        let preds = fused.predictions();

        let (loss, grads) = if hyper.align_enabled || hyper.entropy_enabled {
            let (l, g) = objectives::total_loss_and_grad(&fused, &hyper, step)?;
            (l, Some(g))
        } else {
            (LossBreakdown::default(), None)
        };
        if train {
            let g = grads.expect("losses enabled when training");
            let d_logits = Matrix::from_rows(&g.d_total_d_zada);
            let d_theta = adapter::backward(&adapter, &cache, &d_logits)?;
            adapter.sgd_step(&d_theta, config.lr).map_err(|_| SailError::NumericalFailure {
                step,
                context: "non-finite parameter gradient".into(),
            })?;
        }
        let mut theta = adapter.flatten();
        let event = anchor.observe_step(&mut theta)?;
        if event.is_some() {
            adapter.unflatten(&theta)?;
        }
        if !theta.iter().all(|x| x.is_finite()) {
            return Err(SailError::NumericalFailure {
                step,
                context: "non-finite adapter parameters".into(),
            });
        }
        observer.after_step(step, &anchor, &theta, event.is_some());

        let hits = |pred: &dyn Fn(usize) -> usize| {
            batch.labels.iter().enumerate().filter(|&(j, &y)| pred(j) == y).count() as f64 / batch.labels.len() as f64
        };
        let vlm_pred: Vec<usize> = vlm_rows.iter().map(|r| linalg::argmax(r)).collect();
        let ada_pred: Vec<usize> = ada_rows.iter().map(|r| linalg::argmax(r)).collect();
        let split = report::EntropySplit::compute(&vlm_rows, &ada_rows, &vlm_pred, &ada_pred, &batch.labels);
        records.push(StepRecord {
            step,
            domain_id: batch.domain_id.clone(),
            acc_fused: hits(&|j| preds[j]),
            acc_vlm: hits(&|j| vlm_pred[j]),
            acc_ada: hits(&|j| ada_pred[j]),
            lambda_mean: lambdas.iter().sum::<f64>() / lambdas.len() as f64,
            loss,
            gdi: anchor.last_gdi(),
            reset_flag: event.is_some(),
            entropy: split,
        });
        if config.diagnostics {
            diagnostics.extend(SampleDiagnostic::from_batch(step, &vlm_rows, &ada_rows, &preds, &batch.labels));
        }
        events.extend(event);
    }
    Ok(RunReport::assemble(
        seed,
        &schedule,
        records,
        events,
        diagnostics,
        config.detection_window,
        started.elapsed().as_secs_f64(),
    ))
}

/// Thread count for concurrent episodes: `SAIL_STREAM_THREADS` if set and
/// positive, otherwise the available parallelism.
pub fn stream_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` on a pool capped by [`stream_threads`], returning results in
/// input order.
pub(crate) fn run_parallel<T, R, F>(jobs: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(stream_threads())
        .build()
        .map_err(|e| SailError::Config(format!("thread pool: {e}")))?;
    pool.install(|| jobs.into_par_iter().map(&f).collect())
}

/// Models for every configured seed, in seed-list order.
pub fn prepare_seeds(config: &RunConfig) -> Result<Vec<Prepared>> {
    config.validate()?;
    run_parallel(config.seeds.clone(), |seed| prepare(config, seed))
}

/// One episode per configured seed, in seed-list order.
pub fn run_seeds(config: &RunConfig) -> Result<Vec<RunReport>> {
    let prepared = prepare_seeds(config)?;
    run_variants(std::slice::from_ref(config), &prepared)
}

/// Runs every variant on every seed, reusing models built once per seed.
/// Variants must share the data, architecture, pretraining and generalist
/// settings of the config the models were built from. Results are ordered
/// variant-major.
pub(crate) fn run_variants(variants: &[RunConfig], prepared: &[Prepared]) -> Result<Vec<RunReport>> {
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..prepared.len()).map(move |s| (v, s)))
        .collect();
    run_parallel(jobs, |(v, s)| {
        let c = &variants[v];
        c.validate()?;
        run_prepared(c, c.seeds[s], prepared[s].clone(), &mut ())
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
