//! `sail`: run, ablate and inspect fused test-time adaptation on synthetic
//! shift streams.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sail_core::adapter::{self, SnapshotEncoding};
use sail_core::drift::ResetStrategy;
use sail_core::fusion::{NormalizationStrategy, WeightStrategy};
use sail_core::generalist::{self, LogitRecord};
use sail_core::harness::{self, presets, RunConfig, RunReport, SweepAxis};
use sail_core::streamgen;
use sail_core::SailError;

const LOGITS_GRAMMAR: &str = "\
Logits files hold one record per line:

  record    := sample_id \",\" label \",\" logit (\",\" logit)+
  sample_id := characters other than \",\" and whitespace
  label     := \"-\" | class index
  logit     := finite decimal number

Blank lines and lines starting with '#' are skipped. All records carry the
same number of logits (at least 2); sample ids are unique. The two files are
joined by sample id.";

#[derive(Parser, Debug)]
#[command(name = "sail", version, about = "Fused generalist/adapter test-time adaptation with drift-triggered resets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the adapter snapshot and generalist for one seed.
    Pretrain(PretrainArgs),
    /// Run one episode per seed and write reports.
    Run(RunArgs),
    /// Run the {entropy, alignment, reset} grid and print the ablation table.
    Ablate(GridArgs),
    /// Vary one hyperparameter over a list of values.
    Sweep(SweepArgs),
    /// Dump a seed's stream to CSV, optionally with both models' logits.
    GenStream(GenStreamArgs),
    /// Run with per-sample diagnostics and write correlation statistics.
    Analyze(AnalyzeArgs),
    /// Fuse logits recorded from two external models, without training.
    #[command(after_help = LOGITS_GRAMMAR)]
    Replay(ReplayArgs),
    /// Print a built-in configuration as TOML.
    Preset {
        /// One of: corruption, domain-generalization, recurring, abrupt.
        name: String,
    },
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration name (see `sail preset`).
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    lr: Option<f64>,
    /// GDI reset threshold τ.
    #[arg(long)]
    threshold: Option<f64>,
    /// Anchor refresh interval s, in steps.
    #[arg(long)]
    interval: Option<usize>,
    /// Percentage of trainable parameters restored per reset.
    #[arg(long)]
    alpha: Option<f64>,
    /// deep, shallow, random, max-drift, full or none.
    #[arg(long)]
    strategy: Option<ResetStrategy>,
    /// confidence, average, batch-entropy or sample-entropy.
    #[arg(long)]
    weight: Option<WeightStrategy>,
    /// lse, softmax, z-score, l2 or min-max.
    #[arg(long)]
    normalization: Option<NormalizationStrategy>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    balance_coef: Option<f64>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    /// Enable entropy-based sample weighting.
    #[arg(long)]
    weighting: bool,
    #[arg(long)]
    detection_window: Option<usize>,
    #[arg(long)]
    no_backward: bool,
    #[arg(long)]
    disable_align: bool,
    #[arg(long)]
    disable_ent: bool,
    #[arg(long)]
    disable_reset: bool,
    /// Adapter snapshot to load instead of pretraining.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Generalist JSON to load instead of fitting.
    #[arg(long)]
    generalist: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, SailError> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => presets::by_name(name).ok_or_else(|| unknown_preset(name))?,
            (None, None) => return Err(SailError::Config("one of --config or --preset is required".into())),
        };
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.threshold {
            c.reset.threshold = v;
        }
        if let Some(v) = self.interval {
            c.reset.interval = v;
        }
        if let Some(v) = self.alpha {
            c.reset.alpha = v;
        }
        if let Some(v) = self.strategy {
            c.reset.strategy = v;
        }
        if let Some(v) = self.weight {
            c.weight_strategy = v;
        }
        if let Some(v) = self.normalization {
            c.normalization = v;
        }
        if let Some(v) = self.batch_size {
            c.schedule.batch_size = v;
        }
        if let Some(v) = self.balance_coef {
            c.loss.balance_coef = v;
        }
        if let Some(v) = self.entropy_coef {
            c.loss.entropy_coef = v;
        }
        if let Some(v) = self.detection_window {
            c.detection_window = v;
        }
        c.loss.weighting |= self.weighting;
        c.modes.no_backward |= self.no_backward;
        c.modes.disable_align |= self.disable_align;
        c.modes.disable_ent |= self.disable_ent;
        c.modes.disable_reset |= self.disable_reset;
        if self.adapter.is_some() {
            c.artifacts.adapter = self.adapter.clone();
        }
        if self.generalist.is_some() {
            c.artifacts.generalist = self.generalist.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn unknown_preset(name: &str) -> SailError {
    SailError::Config(format!("unknown preset `{name}`; expected one of {}", presets::NAMES.join(", ")))
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed to build for; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "artifacts")]
    out_dir: PathBuf,
    /// text or binary.
    #[arg(long, default_value = "text")]
    encoding: SnapshotEncoding,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// threshold, interval, alpha, strategy, weight or normalization.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenStreamArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "stream.csv")]
    out: PathBuf,
    /// Also write generalist.logits and adapter.logits (pretrained adapter,
    /// no adaptation) into this directory.
    #[arg(long)]
    logits_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    vlm_logits: PathBuf,
    #[arg(long)]
    ada_logits: PathBuf,
    #[arg(long, default_value = "confidence")]
    weight: WeightStrategy,
    #[arg(long, default_value = "lse")]
    normalization: NormalizationStrategy,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Write the full report, including per-sample λ and predictions.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &SailError) -> u8 {
    match e {
        SailError::NumericalFailure { .. } | SailError::PretrainingFailure { .. } | SailError::DegenerateInput { .. } => 3,
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<(), SailError> {
    match cmd {
        Command::Pretrain(a) => pretrain(a),
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::GenStream(a) => gen_stream(a),
        Command::Analyze(a) => analyze(a),
        Command::Replay(a) => replay(a),
        Command::Preset { name } => {
            let c = presets::by_name(&name).ok_or_else(|| unknown_preset(&name))?;
            print!("{}", c.to_toml_string()?);
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, SailError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SailError::Io(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| SailError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), SailError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| SailError::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn seed_or_first(c: &RunConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(c.seeds[0])
}

fn label(c: &RunConfig) -> &str {
    if c.name.is_empty() {
        "run"
    } else {
        &c.name
    }
}

fn pretrain(a: PretrainArgs) -> Result<(), SailError> {
    let c = a.config.load()?;
    let seed = seed_or_first(&c, a.seed);
    let prepared = harness::prepare(&c, seed)?;
    let snap = a.out_dir.join(format!("adapter-{seed}.snap"));
    let mut w = create(&snap)?;
    adapter::write_snapshot(&prepared.adapter, a.encoding, &mut w)?;
    w.flush()?;
    let gen = a.out_dir.join(format!("generalist-{seed}.json"));
    write_json(&gen, &prepared.generalist)?;
    let (g, ad) = harness::evaluate_domain(&prepared, &c.data.source, 2000, c.schedule.batch_size, seed ^ 0x9e37_79b9)?;
    println!("seed {seed}: source accuracy generalist {g:.4} adapter {ad:.4}");
    println!("wrote {} and {}", snap.display(), gen.display());
    Ok(())
}

fn write_reports(dir: &Path, name: &str, r: &RunReport) -> Result<(), SailError> {
    let stem = format!("{name}-seed{}", r.seed);
    let mut csv = create(&dir.join(format!("{stem}.csv")))?;
    r.write_csv(&mut csv)?;
    csv.flush()?;
    write_json(&dir.join(format!("{stem}.json")), &r.summary())?;
    let mut ev = create(&dir.join(format!("{stem}-events.jsonl")))?;
    r.write_events_jsonl(&mut ev)?;
    ev.flush()?;
    Ok(())
}

fn print_report(r: &RunReport) {
    let d = &r.detection;
    println!(
        "seed {:>6}  fused {:.4}  generalist {:.4}  adapter {:.4}  resets {:>3}  detected {}/{}  false positives {}",
        r.seed,
        r.mean_acc_fused(),
        r.mean_acc_vlm(),
        r.mean_acc_ada(),
        r.reset_count(),
        d.detected,
        d.transitions.len(),
        d.false_positives
    );
}

fn run(a: RunArgs) -> Result<(), SailError> {
    let mut c = a.config.load()?;
    if let Some(s) = a.seed {
        c.seeds = vec![s];
    }
    let reports = harness::run_seeds(&c)?;
    for r in &reports {
        write_reports(&a.out_dir, label(&c), r)?;
        print_report(r);
    }
    if reports.len() > 1 {
        let accs: Vec<f64> = reports.iter().map(RunReport::mean_acc_fused).collect();
        let (m, s) = harness::mean_std(&accs);
        println!("mean fused accuracy {m:.4} ± {s:.4} over {} seeds", reports.len());
    }
    println!("reports in {}", a.out_dir.display());
    Ok(())
}

fn ablate(a: GridArgs) -> Result<(), SailError> {
    let c = a.config.load()?;
    let table = harness::run_ablation_grid(&c)?;
    print!("{}", table.render());
    if let Some(p) = a.json {
        write_json(&p, &table)?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(values: &[String]) -> Result<Vec<T>, SailError>
where
    T::Err: std::fmt::Display,
{
    values
        .iter()
        .map(|v| v.trim().parse::<T>().map_err(|e| SailError::Config(format!("bad sweep value `{v}`: {e}"))))
        .collect()
}

fn sweep(a: SweepArgs) -> Result<(), SailError> {
    let c = a.config.load()?;
    let axis = match a.axis.as_str() {
        "threshold" => SweepAxis::Threshold(parse_list(&a.values)?),
        "interval" => SweepAxis::Interval(parse_list(&a.values)?),
        "alpha" => SweepAxis::Alpha(parse_list(&a.values)?),
        "strategy" => SweepAxis::Strategy(parse_list(&a.values)?),
        "weight" => SweepAxis::Weight(parse_list(&a.values)?),
        "normalization" => SweepAxis::Normalization(parse_list(&a.values)?),
        other => return Err(SailError::Config(format!("unknown sweep axis `{other}`"))),
    };
    let rows = harness::run_sweep(&c, &axis)?;
    println!(
        "{:<28} {:>16} {:>8} {:>11} {:>10} {:>6}",
        "setting", "fused acc (%)", "resets", "forgetting", "detected", "fp"
    );
    for r in &rows {
        println!(
            "{:<28} {:>7.2} ± {:<6.2} {:>8.1} {:>11.4} {:>10.2} {:>6.1}",
            r.label,
            100.0 * r.acc_mean,
            100.0 * r.acc_std,
            r.resets_mean,
            r.forgetting_mean,
            r.detection_rate,
            r.false_positives_mean
        );
    }
    if let Some(p) = a.json {
        write_json(&p, &rows)?;
    }
    Ok(())
}

fn gen_stream(a: GenStreamArgs) -> Result<(), SailError> {
    let c = a.config.load()?;
    let seed = seed_or_first(&c, a.seed);
    let schedule = harness::episode_schedule(&c, seed);
    let prepared = match &a.logits_dir {
        Some(_) => Some(harness::prepare(&c, seed)?),
        None => None,
    };
    let base = match &prepared {
        Some(p) => p.base.clone(),
        None => streamgen::make_base(c.architecture.classes, c.architecture.d_in, c.data.base_seed)?,
    };
    let mut w = create(&a.out)?;
    write!(w, "step,sample,domain_id,label")?;
    for j in 0..base.dim() {
        write!(w, ",x{j}")?;
    }
    writeln!(w)?;
    let (mut vlm, mut ada) = (Vec::new(), Vec::new());
    for (i, batch) in schedule.stream(&base)?.enumerate() {
        let step = i + 1;
        for (r, &y) in batch.labels.iter().enumerate() {
            write!(w, "{step},{r},{},{y}", batch.domain_id)?;
            for v in batch.features.row(r) {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        if let Some(p) = &prepared {
            let zv = p.generalist.predict(&batch.features);
            let (za, _) = adapter::forward(&p.adapter, &batch.features)?;
            for (r, &y) in batch.labels.iter().enumerate() {
                let id = format!("s{step}-{r}");
                vlm.push(LogitRecord { sample_id: id.clone(), label: Some(y), logits: zv.row(r).to_vec() });
                ada.push(LogitRecord { sample_id: id, label: Some(y), logits: za.row(r).to_vec() });
            }
        }
    }
    w.flush()?;
    println!("wrote {} ({} batches)", a.out.display(), schedule.total_batches());
    if let Some(dir) = &a.logits_dir {
        for (name, recs) in [("generalist.logits", &vlm), ("adapter.logits", &ada)] {
            let path = dir.join(name);
            let mut lw = create(&path)?;
            generalist::write_external_logits(recs, &mut lw)?;
            lw.flush()?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<(), SailError> {
    let mut c = a.config.load()?;
    c.diagnostics = true;
    let seed = seed_or_first(&c, a.seed);
    let r = harness::run_episode(&c, seed)?;
    let report = r.correlations();
    let stem = format!("{}-seed{seed}", label(&c));
    let table = a.out_dir.join(format!("{stem}-correlations.csv"));
    let mut w = create(&table)?;
    report.write_table(&mut w)?;
    w.flush()?;
    let scatter = a.out_dir.join(format!("{stem}-scatter.csv"));
    let mut w = create(&scatter)?;
    harness::write_scatter(&r.diagnostics, &mut w)?;
    w.flush()?;
    report.write_table(io::stdout().lock())?;
    println!("wrote {} and {}", table.display(), scatter.display());
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<(), SailError> {
    let r = harness::replay(&a.vlm_logits, &a.ada_logits, a.weight, a.normalization, a.batch_size)?;
    println!("samples {}  labeled {}", r.samples, r.labeled);
    println!(
        "accuracy fused {:.4}  generalist {:.4}  adapter {:.4}",
        r.acc_fused, r.acc_vlm, r.acc_ada
    );
    println!("lambda mean {:.4}  min {:.4}  max {:.4}", r.lambda_mean, r.lambda_min, r.lambda_max);
    if let Some(p) = a.json {
        write_json(&p, &r)?;
    }
    Ok(())
}
