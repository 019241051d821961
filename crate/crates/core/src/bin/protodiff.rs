use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protodiff::data::{generate_synthetic, load_embeddings, sample_episode, save_embeddings, SyntheticConfig};
use protodiff::denoiser::DenoiserModel;
use protodiff::diffusion::{sample_prototypes, NoiseSchedule};
use protodiff::harness::{
    chain_seed, export_report, export_rows, meta_test, run_ablation, run_baseline, sidecar_path, task_seed,
    AblationAxis, AblationSpec, EvalReport, ReportFormat, RunConfig,
};
use protodiff::overfit::OverfitCache;
use protodiff::protonet::vanilla_prototypes;
use protodiff::training::{train_until, write_history, TrainState};
use protodiff::{Error, Result};

#[derive(Parser)]
#[command(name = "protodiff", version, about = "Diffusion over few-shot class prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture embedding file
    GenData(GenData),
    /// Meta-train a denoiser and write checkpoint, loss table and config
    Train(Train),
    /// Meta-test a trained checkpoint
    Eval(Eval),
    /// Evaluate vanilla prototypes on the same task stream
    Baseline(Baseline),
    /// Sweep one axis and write a report table
    Ablate(Ablate),
    /// Record the prototypes at every sampling step of one task
    Trace(Trace),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 0.5)]
    std: f64,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    samples: usize,
    /// Id of the first class; use disjoint ranges for train and test files
    #[arg(long, default_value_t = 0)]
    first_class: u32,
    /// Output path; a `.csv` extension writes text, anything else binary
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set beta=0.5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint at `--out` if it exists
    #[arg(long)]
    resume: bool,
    /// Also write the checkpoint every this many episodes
    #[arg(long)]
    save_every: Option<usize>,
}

/// Task-stream flags shared by `eval` and `baseline`.
#[derive(Args)]
struct TaskArgs {
    /// Meta-test embedding file; defaults to the config's test split
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; `.json` writes JSON, anything else CSV
    #[arg(long)]
    report: Option<PathBuf>,
}

impl TaskArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        push(&mut o, "n_way", self.ways);
        push(&mut o, "k_shot", self.shots);
        push(&mut o, "q_query", self.queries);
        push(&mut o, "n_tasks", self.tasks);
        push(&mut o, "eval_seed", self.seed);
        o
    }
}

fn push<V: ToString>(out: &mut Vec<String>, key: &str, v: Option<V>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    tasks: TaskArgs,
    /// direct, ancestral or ddim
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    mc: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Baseline {
    #[command(flatten)]
    tasks: TaskArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Ablate {
    /// T, ddim_stride, mc_samples, cond_mode, residual, metric, beta or denoiser_size
    #[arg(long)]
    axis: String,
    /// Comma-separated values
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory receiving `<axis>.csv` and `<axis>.json`
    #[arg(long)]
    report_dir: PathBuf,
}

#[derive(Args)]
struct Trace {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Task index in the evaluation stream
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if e.is_data() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::Ablate(a) => ablate(a),
        Command::Trace(a) => trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let ds = generate_synthetic(&SyntheticConfig {
        dim: a.dim,
        n_classes: a.classes,
        samples_per_class: a.samples,
        scale: a.scale,
        std: a.std,
        seed: a.seed,
        first_class: a.first_class,
    })?;
    save_embeddings(&ds, &a.out)?;
    println!(
        "wrote {} records of {} classes to {}",
        ds.len(),
        ds.n_classes(),
        a.out.display()
    );
    Ok(())
}

fn loss_table_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.tsv")
}

fn train(a: Train) -> Result<()> {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref(), &a.cfg.overrides)?;
    let (train_ds, _) = cfg.datasets()?;
    // The sidecar must rebuild the same model shape, whatever the source.
    cfg.dim = train_ds.dim();
    cfg.train_classes = train_ds.n_classes();
    let mut tcfg = cfg.train_config()?;
    tcfg.divergence_dump = Some(a.out.with_extension("diverged.tsv"));
    let mut state = if a.resume && a.out.exists() {
        let s = TrainState::load(&a.out, cfg.denoiser_config()?)?;
        println!("resuming at episode {}", s.episodes);
        s
    } else {
        TrainState::new(&tcfg, &train_ds)?
    };
    let sidecar = sidecar_path(&a.out);
    fs::write(&sidecar, cfg.to_toml()).map_err(|e| Error::io(&sidecar, e))?;
    let mut cache = OverfitCache::new();
    let step = match a.save_every {
        Some(0) => return Err(Error::Config("--save-every must be positive".into())),
        Some(n) => n.div_ceil(tcfg.task_batch_size) * tcfg.task_batch_size,
        None => tcfg.total_episodes.max(1),
    };
    while state.episodes < tcfg.total_episodes {
        let stop = ((state.episodes / step + 1) * step).min(tcfg.total_episodes);
        let mut part = tcfg.clone();
        part.total_episodes = stop;
        train_until(&train_ds, &part, &mut state, &mut cache)?;
        state.save(&a.out)?;
        if let Some(last) = state.history.last() {
            println!(
                "episode {}: ce {:.4} diff {:.4} total {:.4}",
                state.episodes, last.ce, last.diff, last.total
            );
        }
    }
    state.save(&a.out)?;
    write_history(&state.history, loss_table_path(&a.out))?;
    println!("wrote {} (config hash {})", a.out.display(), cfg.hash());
    Ok(())
}

/// Config for an existing checkpoint: the sidecar unless `--config` is given.
fn checkpoint_config(checkpoint: &Path, cfg: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig> {
    let sidecar = sidecar_path(checkpoint);
    let path = match &cfg.config {
        Some(p) => Some(p.clone()),
        None if sidecar.exists() => Some(sidecar),
        None => None,
    };
    let mut overrides = extra;
    overrides.extend(cfg.overrides.iter().cloned());
    RunConfig::load(path.as_deref(), &overrides)
}

fn test_data(cfg: &RunConfig, data: Option<&Path>) -> Result<protodiff::data::EmbeddingDataset> {
    match data {
        Some(p) => load_embeddings(p),
        None => Ok(cfg.datasets()?.1),
    }
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label}: {:.4} ± {:.4} over {} tasks ({:.3} ms/task)",
        r.mean, r.ci95, r.n_tasks, r.ms_per_task
    );
}

fn write_report(label: &str, r: &EvalReport, cfg: &RunConfig, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        export_report(label, r, cfg, p, ReportFormat::for_path(p))?;
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let mut extra = a.tasks.overrides();
    push(&mut extra, "mode", a.mode.as_ref().map(|m| format!("{m:?}")));
    push(&mut extra, "stride", a.stride);
    push(&mut extra, "mc_samples", a.mc);
    let cfg = checkpoint_config(&a.checkpoint, &a.cfg, extra)?;
    let model = DenoiserModel::load(&a.checkpoint, cfg.denoiser_config()?)?;
    let ds = test_data(&cfg, a.tasks.data.as_deref())?;
    let report = meta_test(&model, &ds, &cfg.eval_config()?)?;
    print_report("protodiff", &report);
    write_report("protodiff", &report, &cfg, a.tasks.report.as_deref())
}

fn baseline(a: Baseline) -> Result<()> {
    let mut overrides = a.tasks.overrides();
    overrides.extend(a.cfg.overrides.iter().cloned());
    let cfg = RunConfig::load(a.cfg.config.as_deref(), &overrides)?;
    let ds = test_data(&cfg, a.tasks.data.as_deref())?;
    let report = run_baseline(&ds, &cfg.eval_config()?)?;
    print_report("baseline", &report);
    write_report("baseline", &report, &cfg, a.tasks.report.as_deref())
}

fn ablate(a: Ablate) -> Result<()> {
    let axis: AblationAxis = a.axis.parse()?;
    let base = RunConfig::load(a.cfg.config.as_deref(), &a.cfg.overrides)?;
    let (train_ds, test_ds) = base.datasets()?;
    fs::create_dir_all(&a.report_dir).map_err(|e| Error::io(&a.report_dir, e))?;
    let spec = AblationSpec {
        axis,
        values: a.values,
        base,
    };
    let csv = a.report_dir.join(format!("{}.csv", axis.name()));
    let rows = run_ablation(&spec, &train_ds, &test_ds, Some((&csv, ReportFormat::Csv)))?;
    export_rows(
        &rows,
        &a.report_dir.join(format!("{}.json", axis.name())),
        ReportFormat::Json,
    )?;
    for r in &rows {
        println!(
            "{}={}: {:.4} ± {:.4} ({:.3} ms/task)",
            axis.name(),
            r.axis_value,
            r.mean,
            r.ci95,
            r.ms_per_task
        );
    }
    Ok(())
}

fn trace(a: Trace) -> Result<()> {
    let cfg = checkpoint_config(&a.checkpoint, &a.cfg, vec![])?;
    let model = DenoiserModel::load(&a.checkpoint, cfg.denoiser_config()?)?;
    let ds = test_data(&cfg, a.data.as_deref())?;
    let ecfg = cfg.eval_config()?;
    let seed = task_seed(ecfg.seed, a.seed as usize);
    let ep = sample_episode(&ds, ecfg.n_way, ecfg.k_shot, ecfg.q_query, seed)?;
    let vanilla = vanilla_prototypes::<f32>(&ep)?;
    let sched = NoiseSchedule::linear(model.config().steps)?;
    let mut sampler = ecfg.sampler.clone();
    sampler.mc_samples = 1;
    let out = sample_prototypes(
        &model.for_episode(&ep.class_ids),
        &vanilla,
        &sched,
        &sampler,
        chain_seed(seed, ecfg.sample_seed),
        true,
    )?;
    let tr = out.trace.expect("trace requested");
    tr.write_tsv(&a.out)?;
    println!("wrote {} steps to {}", tr.entries().len(), a.out.display());
    Ok(())
}
