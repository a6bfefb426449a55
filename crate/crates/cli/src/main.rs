//! `convemo` — train, evaluate, and inspect conversation emotion models.
//!
//! Exit codes: 0 on success, 1 on validation/configuration errors, 2 on
//! numerical failures (non-finite values, failed gradient checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use convemo_core::checkpoint;
use convemo_core::config::{AblationFlags, Modalities, RunConfig};
use convemo_core::data::{generate_synthetic, load_dataset, save_dataset, Conversation};
use convemo_core::diagnostics;
use convemo_core::metrics::Metrics;
use convemo_core::model::Model;
use convemo_core::train::{
    evaluate_model, extract_embeddings, train, write_embeddings_csv, write_history_csv,
    TrainReport,
};
use convemo_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "convemo",
    version,
    about = "Multimodal emotion recognition in conversation: training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a key-value config file
    Train(TrainArgs),
    /// Score a saved checkpoint on a dataset
    Eval(EvalArgs),
    /// Generate a synthetic dataset from a key-value config file
    GenData(GenDataArgs),
    /// Write per-utterance fused features and predictions to CSV
    DumpEmbeddings(DumpEmbeddingsArgs),
    /// Check analytic gradients against central finite differences
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file (see README for keys)
    #[arg(long)]
    config: PathBuf,
    /// Override the seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Run K seeds (seed, seed+1, ...) and report mean ± std of the best
    /// validation metrics
    #[arg(long)]
    seeds: Option<u64>,
    /// Comma-separated ablations: no_mpt,no_ucl,no_scl,no_rgcn,full_audio,full_visual
    #[arg(long)]
    ablate: Option<String>,
    /// Comma-separated input modalities, e.g. `t,a,v` or `t`
    #[arg(long)]
    modalities: Option<String>,
    /// Override the config's train_data path
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the config's val_data path
    #[arg(long)]
    val: Option<PathBuf>,
    /// Override the config's out_dir path
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint stem or its .manifest/.bin path
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset to score
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Flat `key = value` synthetic-data config file
    #[arg(long)]
    synthetic_config: PathBuf,
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpEmbeddingsArgs {
    /// Checkpoint stem or its .manifest/.bin path
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset to embed
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Restrict to one suite: tensor, encoders, graph, mpt, or losses
    #[arg(long)]
    module: Option<String>,
    /// Randomized instances per suite
    #[arg(long, default_value_t = 5)]
    instances: usize,
    /// Base seed for the randomized instances
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1, // bad usage is a validation error
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::GenData(args) => run_gen_data(args),
        Command::DumpEmbeddings(args) => run_dump_embeddings(args),
        Command::GradCheck(args) => run_grad_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::default();
    cfg.apply_kv_text(&text)?;
    Ok(cfg)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &args.modalities {
        cfg.modalities = Modalities::parse(m)?;
    }
    if let Some(a) = &args.ablate {
        cfg.ablate = AblationFlags::parse(a)?;
    }
    if let Some(p) = args.data {
        cfg.train_data = Some(p);
    }
    if let Some(p) = args.val {
        cfg.val_data = Some(p);
    }
    if let Some(p) = args.out_dir {
        cfg.out_dir = Some(p);
    }
    cfg.validate()?;

    let train_path = cfg.train_data.clone().ok_or_else(|| {
        Error::Config("train_data is not set; add it to the config or pass --data".into())
    })?;
    let train_set = load_dataset(&train_path, &cfg.spec)?;
    let val_set: Option<Vec<Conversation>> = match &cfg.val_data {
        Some(p) => Some(load_dataset(p, &cfg.spec)?),
        None => None,
    };
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;

    println!(
        "training on {} conversations ({} utterances), validating on {}",
        train_set.len(),
        train_set.iter().map(|c| c.len()).sum::<usize>(),
        match &val_set {
            Some(v) => format!("{} conversations", v.len()),
            None => "the training set".to_string(),
        }
    );

    match args.seeds {
        None => {
            run_one_seed(&cfg, &train_set, val_set.as_deref(), &out_dir, None)?;
        }
        Some(0) => {
            return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
        }
        Some(k) => {
            let mut accs = Vec::with_capacity(k as usize);
            let mut wf1s = Vec::with_capacity(k as usize);
            for i in 0..k {
                let mut seeded = cfg.clone();
                seeded.seed = cfg.seed.wrapping_add(i);
                let report = run_one_seed(
                    &seeded,
                    &train_set,
                    val_set.as_deref(),
                    &out_dir,
                    Some(seeded.seed),
                )?;
                let best = &report.history[report.best_epoch - 1];
                accs.push(best.val_acc);
                wf1s.push(best.val_wf1);
            }
            let (acc_mean, acc_std) = mean_std(&accs);
            let (wf1_mean, wf1_std) = mean_std(&wf1s);
            println!(
                "sweep over {k} seeds: val_acc {acc_mean:.4} ± {acc_std:.4}, val_wf1 {wf1_mean:.4} ± {wf1_std:.4}"
            );
        }
    }
    Ok(())
}

fn run_one_seed(
    cfg: &RunConfig,
    train_set: &[Conversation],
    val_set: Option<&[Conversation]>,
    out_dir: &Path,
    seed_tag: Option<u64>,
) -> Result<TrainReport> {
    let suffix = seed_tag.map(|s| format!("_seed{s}")).unwrap_or_default();
    let mut model = Model::new(cfg.clone())?;
    println!(
        "seed {}: model has {} parameters in {} tensors",
        cfg.seed,
        model.params.numel(),
        model.params.len()
    );
    let report = train(&mut model, train_set, val_set)?;

    let history_path = out_dir.join(format!("history{suffix}.csv"));
    write_history_csv(&history_path, &report.history)?;
    let stem = out_dir.join(format!("model{suffix}"));
    checkpoint::save(&stem, &model)?;

    let best = &report.history[report.best_epoch - 1];
    println!(
        "seed {}: best epoch {} of {}: val_acc {:.4} val_wf1 {:.4}",
        cfg.seed,
        report.best_epoch,
        report.history.len(),
        best.val_acc,
        best.val_wf1
    );
    println!("seed {}: wrote {}", cfg.seed, history_path.display());
    println!(
        "seed {}: wrote {} and {}",
        cfg.seed,
        stem.with_extension("manifest").display(),
        stem.with_extension("bin").display()
    );
    Ok(report)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() < 2 {
        0.0
    } else {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var.sqrt())
}

fn print_metrics(m: &Metrics) {
    println!("accuracy: {:.6}", m.accuracy);
    println!("weighted_f1: {:.6}", m.weighted_f1);
    for (c, f1) in m.per_class_f1.iter().enumerate() {
        println!("f1[class {c}]: {f1:.6}");
    }
    println!("confusion (rows = true class, columns = predicted):");
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        println!("  {}", cells.join(" "));
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = load_dataset(&args.data, &model.config().spec)?;
    let metrics = evaluate_model(&model, &data)?;
    print_metrics(&metrics);
    Ok(())
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.synthetic_config).map_err(|e| {
        Error::Config(format!(
            "cannot read synthetic config {}: {e}",
            args.synthetic_config.display()
        ))
    })?;
    let cfg = convemo_core::config::synthetic_from_kv(&text)?;
    let data = generate_synthetic(&cfg)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_dataset(&args.out, &data)?;
    println!(
        "wrote {} conversations ({} utterances) to {}",
        data.len(),
        data.iter().map(|c| c.len()).sum::<usize>(),
        args.out.display()
    );
    Ok(())
}

fn run_dump_embeddings(args: DumpEmbeddingsArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = load_dataset(&args.data, &model.config().spec)?;
    let rows = extract_embeddings(&model, &data)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_embeddings_csv(&args.out, &rows)?;
    println!(
        "wrote {} rows × {} columns to {}",
        rows.len(),
        4 + rows.first().map(|r| r.fusion.len()).unwrap_or(0),
        args.out.display()
    );
    Ok(())
}

fn run_grad_check(args: GradCheckArgs) -> Result<()> {
    let outcomes = match &args.module {
        Some(m) => diagnostics::run_module(m, args.instances, args.seed)?,
        None => diagnostics::run_all(args.instances, args.seed)?,
    };
    let mut failures = 0usize;
    for o in &outcomes {
        println!(
            "{} {}: {} (max rel err {:.3e}, {} non-smooth coordinates skipped)",
            o.module,
            o.case,
            if o.passed { "PASS" } else { "FAIL" },
            o.max_rel_err,
            o.excluded
        );
        if !o.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Numerical(format!(
            "{failures} of {} gradient checks failed",
            outcomes.len()
        )));
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(())
}
