//! `ulsnn`: benchmarks, training runs, reduce simulation, flop accounting and
//! plot data.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ulsnn_core::cluster::{
    build_bunyip, cost_of, plan, reduce_speedup_curve, topology_json, write_speedup_csv, ClusterTopology, CostModel,
    PlanKind, SpeedupCfg, TopologyFile, COST_CSV_HEADER,
};
use ulsnn_core::datagen::{build_dataset, Dataset, DatasetCfg, DEFAULT_MARGIN};
use ulsnn_core::gemm::{bench_gemm, write_bench_csv, BenchOptions, BlockConfig, Kernel, KernelKind};
use ulsnn_core::nn::{classification_error, MlpParams, NetShape};
use ulsnn_core::optim::{cg_train_with, write_history_csv, CgConfig};
use ulsnn_core::trainer::{
    per_process_pass_flops, scaling_study, Backend, ScalingMode, Trainer, TrainerCfg, SCALING_CSV_HEADER,
};

#[derive(Parser)]
#[command(name = "ulsnn", version, about = "Desk-scale ULSNN training stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time naive and blocked SGEMM on square matrices and write the CSV.
    GemmBench(GemmBenchArgs),
    /// Train a network with conjugate gradient from a JSON config.
    Train(TrainArgs),
    /// Price a reduce plan on the 194-process cluster and write the stage CSV.
    ReduceSim(ReduceSimArgs),
    /// Print the flop counts of one error and one gradient pass.
    Flops(FlopsArgs),
    /// Write a synthetic glyph dataset.
    Datagen(DatagenArgs),
    /// Write the cluster topology and bandwidth table as JSON.
    Topology(TopologyArgs),
    /// Write the speedup of the optimised reduce over the library reduce.
    Speedup(SpeedupArgs),
    /// Write modelled parallel efficiency against worker count.
    Scaling(ScalingArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelChoice {
    Naive,
    Blocked,
    Both,
}

#[derive(clap::Args)]
struct GemmBenchArgs {
    /// Matrix sizes (m = n = k).
    #[arg(long, value_delimiter = ',', default_value = "64,128,192,256,320,384,448,512,576,640,672,700")]
    sizes: Vec<usize>,
    /// Row stride of every operand; raised to the size when smaller.
    #[arg(long, default_value_t = 700)]
    stride: usize,
    #[arg(long, value_enum, default_value = "both")]
    kernel: KernelChoice,
    /// Timed repetitions per point; the median is reported (at least 3).
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// L2 size in KiB; the flush buffer is four times this.
    #[arg(long, default_value_t = 1024)]
    l2_kib: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON training config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Weight initialisation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    /// Dataset file from `datagen`; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// History CSV destination.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Checkpoint destination for the trained weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Simulated,
    Threads,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanChoice {
    Naive,
    Logn,
    Bunyip,
    All,
}

#[derive(clap::Args)]
struct ReduceSimArgs {
    #[arg(long, value_enum, default_value = "bunyip")]
    plan: PlanChoice,
    /// Size of the reduced vector.
    #[arg(long, default_value_t = 6_917_760)]
    bytes: u64,
    /// Topology file as written by `topology`; its bandwidth table is used
    /// unless `--model` is given.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Cost model JSON; missing keys take their defaults.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FlopsArgs {
    #[arg(long)]
    ni: usize,
    #[arg(long)]
    nh: usize,
    #[arg(long)]
    no: usize,
    #[arg(long)]
    np: usize,
    /// Also report per-process flops for this many processes.
    #[arg(long)]
    procs: Option<usize>,
    /// Fraction of patterns processed before the halt.
    #[arg(long, default_value_t = 0.8)]
    halt: f64,
}

#[derive(clap::Args)]
struct DatagenArgs {
    #[arg(long, default_value_t = 50)]
    classes: usize,
    #[arg(long, default_value_t = 400)]
    per_class: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Index of the first image; use a later range for a held-out set.
    #[arg(long, default_value_t = 0)]
    first_index: u64,
    /// Minimum L2 distance between class prototypes.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: f32,
    /// Amplitude of the additive noise distortion.
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TopologyArgs {
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SpeedupArgs {
    /// Training-set sizes.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "100000,200000,500000,1000000,2000000,5000000,9264000,20000000,50000000"
    )]
    patterns: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingChoice {
    Weak,
    Strong,
}

#[derive(clap::Args)]
struct ScalingArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    workers: Vec<usize>,
    #[arg(long, value_enum, default_value = "weak")]
    mode: ScalingChoice,
    /// Patterns per worker (weak) or in total (strong).
    #[arg(long, default_value_t = 32_000)]
    patterns: usize,
    /// Sustained flop rate of one worker.
    #[arg(long, default_value_t = 1.0754e9)]
    flops_per_sec: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A bad flag value or config file, reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GemmBench(a) => gemm_bench(a),
        Command::Train(a) => train(a),
        Command::ReduceSim(a) => reduce_sim(a),
        Command::Flops(a) => flops(a),
        Command::Datagen(a) => datagen(a),
        Command::Topology(a) => topology(a),
        Command::Speedup(a) => speedup(a),
        Command::Scaling(a) => scaling(a),
    }
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Maps core validation failures to usage errors.
fn validated(r: ulsnn_core::Result<()>, what: &str) -> Result<()> {
    r.map_err(|e| usage(format!("{what}: {e}")))
}

fn gemm_bench(a: GemmBenchArgs) -> Result<()> {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return Err(usage("--sizes must list positive sizes"));
    }
    if a.stride == 0 {
        return Err(usage("--stride must be positive"));
    }
    let kinds: &[KernelKind] = match a.kernel {
        KernelChoice::Naive => &[KernelKind::Naive],
        KernelChoice::Blocked => &[KernelKind::Blocked],
        KernelChoice::Both => &[KernelKind::Naive, KernelKind::Blocked],
    };
    let opts = BenchOptions {
        stride: a.stride,
        reps: a.reps,
        l2_bytes: a.l2_kib * 1024,
        ..BenchOptions::default()
    };
    let cfg = BlockConfig::default();
    let mut records = Vec::new();
    for &kind in kinds {
        records.extend(bench_gemm(&a.sizes, kind, &cfg, &opts)?);
    }
    for r in records.iter().filter(|r| r.stride_overridden) {
        eprintln!("note: size {} exceeds stride {}; stride set to {}", r.m, a.stride, r.stride);
    }
    let mut w = sink(a.out.as_deref())?;
    write_bench_csv(&mut w, &records)?;
    w.flush()?;
    Ok(())
}

/// The `train --config` file. Flags override these values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainConfig {
    shape: NetShape,
    /// Weight initialisation seed.
    seed: u64,
    /// Training set from `datagen`; generated from `data` when absent.
    dataset: Option<PathBuf>,
    data: DatasetCfg,
    /// Held-out images per class, generated after the training range; 0
    /// skips the held-out evaluation.
    holdout_per_class: usize,
    trainer: TrainerCfg,
    cg: CgConfig,
    history: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shape: NetShape::new(400, 64, 50),
            seed: 1,
            dataset: None,
            data: DatasetCfg::default(),
            holdout_per_class: 40,
            trainer: TrainerCfg::default(),
            cg: CgConfig {
                epochs: 30,
                ..CgConfig::default()
            },
            history: None,
            checkpoint: None,
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.cg.epochs = e;
    }
    if let Some(w) = a.workers {
        cfg.trainer.workers = w;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.backend {
        cfg.trainer.backend = match b {
            BackendChoice::Simulated => Backend::Simulated,
            BackendChoice::Threads => Backend::Threads,
        };
    }
    if a.dataset.is_some() {
        cfg.dataset = a.dataset;
    }
    if a.history.is_some() {
        cfg.history = a.history;
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if cfg.cg.epochs == 0 {
        return Err(usage("cg.epochs: must be at least 1"));
    }
    validated(cfg.trainer.validate(), "trainer")?;
    validated(cfg.cg.line.validate(), "cg.line")?;
    validated(cfg.data.mix.validate(), "data.mix")?;

    let data = match &cfg.dataset {
        Some(p) => Dataset::open(p).with_context(|| format!("loading {}", p.display()))?,
        None => build_dataset(&cfg.data)?,
    };
    if data.n_classes != cfg.shape.n_o || cfg.shape.n_i != ulsnn_core::datagen::PIXELS {
        return Err(usage(format!(
            "shape: net {}/{}/{} does not fit {} pixels and {} classes",
            cfg.shape.n_i,
            cfg.shape.n_h,
            cfg.shape.n_o,
            ulsnn_core::datagen::PIXELS,
            data.n_classes
        )));
    }
    let batch = data.to_batch()?;
    let params = MlpParams::random(cfg.shape, cfg.seed);
    let mut trainer = Trainer::new(params, batch, Kernel::default(), cfg.trainer.clone())?;
    let report = cg_train_with(&mut trainer, &cfg.cg, |r| {
        println!(
            "epoch {:>3}  error {:.6e}  step {:.6e}  seconds {:.3}  gflops {:.3}",
            r.epoch, r.error, r.step, r.seconds, r.gflops
        );
    })?;
    println!(
        "decreasing epochs {}/{}",
        report.decreasing_epochs(),
        report.history.len()
    );

    if cfg.holdout_per_class > 0 && cfg.dataset.is_none() {
        let held = build_dataset(&DatasetCfg {
            per_class: cfg.holdout_per_class,
            first_index: cfg.data.first_index + (cfg.data.n_classes * cfg.data.per_class) as u64,
            ..cfg.data
        })?;
        let hb = held.to_batch()?;
        let err = classification_error(trainer.params(), &hb.x, &held.labels(), &Kernel::default())?;
        println!("holdout classification error {err:.4} on {} patterns", held.len());
    }
    if let Some(p) = &cfg.history {
        let mut w = sink(Some(p))?;
        write_history_csv(&mut w, &report.history)?;
        w.flush()?;
    }
    if let Some(p) = &cfg.checkpoint {
        let f = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
        let mut w = BufWriter::new(f);
        trainer.params().write_checkpoint(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn reduce_sim(a: ReduceSimArgs) -> Result<()> {
    if a.bytes == 0 {
        return Err(usage("--bytes must be positive"));
    }
    let (topo, mut model): (ClusterTopology, CostModel) = match &a.topology {
        Some(p) => {
            let f: TopologyFile = read_json(p)?;
            validated(f.topology.validate(), "topology")?;
            (f.topology, f.bandwidth)
        }
        None => (build_bunyip(), CostModel::default()),
    };
    if let Some(p) = &a.model {
        model = read_json(p)?;
    }
    validated(model.validate(), "model")?;
    let kinds: &[PlanKind] = match a.plan {
        PlanChoice::Naive => &[PlanKind::Naive],
        PlanChoice::Logn => &[PlanKind::Logn],
        PlanChoice::Bunyip => &[PlanKind::Bunyip],
        PlanChoice::All => &[PlanKind::Naive, PlanKind::Logn, PlanKind::Bunyip],
    };
    let mut w = sink(a.out.as_deref())?;
    writeln!(w, "{COST_CSV_HEADER}")?;
    for &kind in kinds {
        let p = plan(kind, &topo)?;
        let report = cost_of(&p, &topo, a.bytes, &model)?;
        report.write_csv(&mut w, false)?;
        eprintln!(
            "{kind}: {} stages, total {:.3} s",
            report.stages.len(),
            report.total_seconds
        );
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct FlopsReport {
    params: usize,
    vector_bytes: u64,
    error_flops: u64,
    gradient_flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_process_error_flops: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_process_gradient_flops: Option<f64>,
}

fn flops(a: FlopsArgs) -> Result<()> {
    if !(a.halt > 0.0 && a.halt <= 1.0) {
        return Err(usage("--halt must lie in (0, 1]"));
    }
    let shape = NetShape::new(a.ni, a.nh, a.no);
    let per = match a.procs {
        Some(0) => return Err(usage("--procs must be positive")),
        Some(p) => Some(per_process_pass_flops(shape, a.np, a.halt, p)?),
        None => None,
    };
    let report = FlopsReport {
        params: shape.param_count(),
        vector_bytes: shape.vector_bytes(),
        error_flops: shape.error_flops(a.np)?,
        gradient_flops: shape.gradient_flops(a.np)?,
        per_process_error_flops: per.map(|p| p.0),
        per_process_gradient_flops: per.map(|p| p.1),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let mut cfg = DatasetCfg {
        n_classes: a.classes,
        per_class: a.per_class,
        seed: a.seed,
        margin: a.margin,
        first_index: a.first_index,
        ..DatasetCfg::default()
    };
    if let Some(n) = a.noise {
        cfg.mix.noise_amplitude = n;
    }
    validated(cfg.mix.validate(), "noise")?;
    if a.classes < 2 || a.per_class == 0 {
        return Err(usage("need at least 2 classes and 1 image per class"));
    }
    let data = build_dataset(&cfg)?;
    data.save(&a.out)?;
    eprintln!("wrote {} images in {} classes to {}", data.len(), data.n_classes, a.out.display());
    Ok(())
}

fn topology(a: TopologyArgs) -> Result<()> {
    let mut w = sink(a.out.as_deref())?;
    writeln!(w, "{}", topology_json(&build_bunyip(), &CostModel::default())?)?;
    w.flush()?;
    Ok(())
}

fn speedup(a: SpeedupArgs) -> Result<()> {
    if a.patterns.is_empty() || a.patterns.contains(&0) {
        return Err(usage("--patterns must list positive counts"));
    }
    let points = reduce_speedup_curve(&a.patterns, &SpeedupCfg::default(), &CostModel::default())?;
    let mut w = sink(a.out.as_deref())?;
    write_speedup_csv(&mut w, &points)?;
    w.flush()?;
    Ok(())
}

fn scaling(a: ScalingArgs) -> Result<()> {
    if a.workers.is_empty() || a.workers.contains(&0) || a.patterns == 0 {
        return Err(usage("--workers and --patterns must be positive"));
    }
    let mode = match a.mode {
        ScalingChoice::Weak => ScalingMode::Weak {
            patterns_per_worker: a.patterns,
        },
        ScalingChoice::Strong => ScalingMode::Strong {
            total_patterns: a.patterns,
        },
    };
    let cfg = TrainerCfg {
        model_flops_per_sec: a.flops_per_sec,
        ..TrainerCfg::default()
    };
    validated(cfg.validate(), "scaling")?;
    let points = scaling_study(NetShape::jocr(), &a.workers, mode, &cfg, &CostModel::default())?;
    let mut w = sink(a.out.as_deref())?;
    writeln!(w, "{SCALING_CSV_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            p.workers, p.n_patterns, p.compute_seconds, p.reduce_seconds, p.seconds, p.efficiency
        )?;
    }
    w.flush()?;
    Ok(())
}
