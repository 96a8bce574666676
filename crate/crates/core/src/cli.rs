//! Command-line front end. Every command prints JSON (or CSV files) and maps
//! failures to the exit codes of [`Error::exit_code`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{feature_similarity, weight_similarity, SimilarityKind};
use crate::bench::{run_bench, BenchOptions};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
use crate::data::{DatasetHandle, DatasetSpec};
use crate::error::{Error, Result};
use crate::flops::{flops_report, FlopsInput};
use crate::reparam::{absorb_affines, collapse, probe_images, verify_equivalence};
use crate::train::{evaluate, metrics_csv, AtLambda, Classifier, MetricsRow, TrainConfig, Trainer, METRICS_HEADER};
use crate::vit::ModelConfig;

/// λ must be exactly this before collapse is allowed without `--force`.
const JOINED: f64 = 1.0;

#[derive(Debug, Parser)]
#[command(name = "branchfuse", version, about = "Train, collapse and inspect multi-branch vision transformers")]
pub struct Cli {
    /// JSON config file (training config, or model config for flops/bench).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of any command that uses randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a multi-branch model; writes metrics.csv and checkpoints into --out.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress per-step progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Collapse a joined multi-branch checkpoint into a deployed one.
    Collapse {
        input: PathBuf,
        /// Also fold LayerNorm affines into adjacent weights.
        #[arg(long)]
        absorb: bool,
        /// Collapse even if the checkpoint was not fully joined.
        #[arg(long)]
        force: bool,
    },
    /// Compare a multi-branch checkpoint at λ = 1 against a deployed one.
    Verify {
        multi_branch: PathBuf,
        deployed: PathBuf,
        #[arg(long, default_value_t = 16)]
        probes: usize,
    },
    /// Accuracy and loss of either checkpoint kind.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// λ for multi-branch checkpoints; defaults to the stored phase.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Closed-form FLOP and parameter counts.
    Flops(FlopsArgs),
    /// Wall-clock forward time of a deployed model against a deeper baseline.
    Bench {
        deployed: PathBuf,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Baseline depth; defaults to blocks × branches.
        #[arg(long)]
        baseline_layers: Option<usize>,
    },
    /// Branch cosine-similarity matrices; one CSV per site plus similarity.json.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long, default_value = "weights")]
        kind: SimilarityKind,
        #[command(flatten)]
        data: DataArg,
        /// Random probe images used for features when no dataset is given.
        #[arg(long, default_value_t = 32)]
        probes: usize,
    },
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset spec: a JSON file path or inline JSON.
    #[arg(long)]
    pub data: Option<String>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub dim: Option<u64>,
    #[arg(long)]
    pub heads: Option<u64>,
    #[arg(long)]
    pub tokens: Option<u64>,
    #[arg(long)]
    pub ffn_hidden: Option<u64>,
    #[arg(long)]
    pub patch_dim: Option<u64>,
    #[arg(long)]
    pub classes: Option<u64>,
    #[arg(long)]
    pub blocks: Option<u64>,
    #[arg(long)]
    pub branches: Option<u64>,
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train { resume, quiet } => cmd_train(cli, resume.as_deref(), *quiet),
        Command::Collapse { input, absorb, force } => cmd_collapse(cli, input, *absorb, *force),
        Command::Verify {
            multi_branch,
            deployed,
            probes,
        } => cmd_verify(cli, multi_branch, deployed, *probes),
        Command::Eval {
            checkpoint,
            data,
            lambda,
        } => cmd_eval(checkpoint, data, *lambda),
        Command::Flops(args) => cmd_flops(cli, args),
        Command::Bench {
            deployed,
            iters,
            warmup,
            batch,
            baseline_layers,
        } => cmd_bench(
            cli,
            deployed,
            &BenchOptions {
                iters: *iters,
                warmup: *warmup,
                batch: *batch,
                seed: cli.seed.unwrap_or(0),
                baseline_layers: *baseline_layers,
            },
        ),
        Command::Analyze {
            checkpoint,
            kind,
            data,
            probes,
        } => cmd_analyze(cli, checkpoint, *kind, data, *probes),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_json_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn dataset_spec(arg: &str) -> Result<DatasetSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        read_json_file(Path::new(arg))?
    };
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("dataset spec: {e}")))
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

/// Training config stored in a checkpoint, if any.
fn stored_train_config(ck: &Checkpoint) -> Option<TrainConfig> {
    ck.config.train.clone().and_then(|v| serde_json::from_value(v).ok())
}

/// `--data` if given, else the held-out split of the checkpoint's training
/// config, else its training split.
fn resolve_dataset(data: &DataArg, ck: &Checkpoint) -> Result<DatasetHandle> {
    let spec = match &data.data {
        Some(s) => dataset_spec(s)?,
        None => {
            let cfg = stored_train_config(ck)
                .ok_or_else(|| Error::Config("checkpoint carries no training config; pass --data".into()))?;
            cfg.eval_dataset.unwrap_or(cfg.dataset)
        }
    };
    Ok(spec.load()?)
}

fn cmd_train(cli: &Cli, resume: Option<&Path>, quiet: bool) -> Result<i32> {
    let resumed = resume.map(load).transpose()?;
    let mut cfg = match (&cli.config, &resumed) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(ck)) => stored_train_config(ck)
            .ok_or_else(|| Error::Config("checkpoint carries no training config; pass --config".into()))?,
        (None, None) => return Err(Error::Config("train needs --config".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&out)?;
    let train = cfg.dataset.load()?;
    let eval = cfg.eval_dataset.as_ref().map(DatasetSpec::load).transpose()?;

    let mut trainer = match &resumed {
        Some(ck) => Trainer::resume(&cfg, &train, eval.as_ref(), ck)?,
        None => Trainer::new(&cfg, &train, eval.as_ref())?,
    };
    let start = trainer.step;
    let metrics_path = out.join("metrics.csv");
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    if start > 0 {
        // keep rows of the run being continued
        if let Ok(old) = fs::read_to_string(&metrics_path) {
            for line in old.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s < start) {
                    csv.push_str(line);
                    csv.push('\n');
                }
            }
        }
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    let result = trainer.run(|t, row| {
        if !quiet && (row.eval_acc.is_some() || t.step % 100 == 0) {
            let acc = row.eval_acc.map_or(String::new(), |a| format!(" eval_acc={a:.4}"));
            eprintln!("step {} λ={:.4} loss={:.5}{acc}", t.step, row.lambda, row.loss);
        }
        rows.push(row.clone());
        let every = t.config().checkpoint_every;
        if every > 0 && t.step % every == 0 && !t.finished() {
            save_checkpoint(out.join(format!("step_{}.ckpt", t.step)), &t.checkpoint()?)?;
        }
        Ok(())
    });
    // metrics are flushed even when training diverges
    let body = metrics_csv(&rows);
    csv.push_str(body.split_once('\n').map_or("", |(_, rest)| rest));
    fs::write(&metrics_path, csv)?;
    result?;
    let ck = trainer.checkpoint()?;
    let final_path = out.join("final.ckpt");
    save_checkpoint(&final_path, &ck)?;
    print_json(&json!({
        "checkpoint": final_path,
        "metrics": metrics_path,
        "steps": trainer.step,
        "lambda": ck.phase.lambda,
        "seed": cfg.seed,
        "final_eval_acc": rows.iter().rev().find_map(|r| r.eval_acc),
    }))?;
    Ok(0)
}

fn cmd_collapse(cli: &Cli, input: &Path, absorb: bool, force: bool) -> Result<i32> {
    let ck = load(input)?;
    let mb = ck.multi_branch()?;
    if ck.phase.lambda != JOINED {
        let msg = format!(
            "checkpoint was trained to λ = {} at step {}; collapse is exact only at λ = 1",
            ck.phase.lambda, ck.phase.step
        );
        if !force {
            return Err(Error::Precondition(format!("{msg} (use --force to override)")));
        }
        eprintln!("warning: {msg}");
    }
    let mut dp = collapse(&mb)?;
    let mut absorbed_exact = None;
    if absorb {
        let a = absorb_affines(&dp)?;
        if !a.exact {
            eprintln!("warning: pre-attention affine moved across a normalization; deployed model is approximate");
        }
        absorbed_exact = Some(a.exact);
        dp = a.model;
    }
    let out = cli.out.clone().unwrap_or_else(|| input.with_extension("deployed.ckpt"));
    let mut dck = Checkpoint::from_deployed(&dp, ck.phase, absorbed_exact);
    dck.config.train = ck.config.train.clone();
    save_checkpoint(&out, &dck)?;
    print_json(&json!({
        "checkpoint": out,
        "blocks": dp.blocks.len(),
        "branches_collapsed": mb.config.branches,
        "parameters": dp.parameter_count(),
        "absorbed_exact": absorbed_exact,
        "lambda": ck.phase.lambda,
    }))?;
    Ok(0)
}

fn cmd_verify(cli: &Cli, mb: &Path, dp: &Path, probes: usize) -> Result<i32> {
    let mb_ck = load(mb)?;
    let dp_ck = load(dp)?;
    if mb_ck.kind() != ModelKind::MultiBranch || dp_ck.kind() != ModelKind::Deployed {
        return Err(Error::ModelMismatch(
            "verify expects a multi-branch checkpoint followed by a deployed one".into(),
        ));
    }
    let report = verify_equivalence(&mb_ck.multi_branch()?, &dp_ck.deployed()?, probes, cli.seed.unwrap_or(0))?;
    print_json(&report)?;
    Ok(if report.pass { 0 } else { 1 })
}

#[derive(Serialize)]
struct EvalJson {
    accuracy: f64,
    correct: usize,
    samples: usize,
    /// Rounded so that numerically equivalent models print identically.
    loss: String,
}

fn cmd_eval(checkpoint: &Path, data: &DataArg, lambda: Option<f64>) -> Result<i32> {
    let ck = load(checkpoint)?;
    let dataset = resolve_dataset(data, &ck)?;
    let report = match ck.kind() {
        ModelKind::Deployed => evaluate(&ck.deployed()?, &dataset)?,
        ModelKind::MultiBranch => {
            let model = ck.multi_branch()?;
            let at = AtLambda {
                model: &model,
                lambda: lambda.unwrap_or(ck.phase.lambda),
            };
            evaluate(&at as &dyn Classifier, &dataset)?
        }
    };
    print_json(&EvalJson {
        accuracy: report.accuracy,
        correct: report.correct,
        samples: report.samples,
        loss: format!("{:.10}", report.loss),
    })?;
    Ok(0)
}

/// `--config` may hold a training config or a bare model config.
fn model_config_from(path: &Path) -> Result<ModelConfig> {
    let text = read_json_file(path)?;
    if let Ok(t) = TrainConfig::from_json(&text) {
        return Ok(t.model);
    }
    let m: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    m.validate()?;
    Ok(m)
}

fn cmd_flops(cli: &Cli, a: &FlopsArgs) -> Result<i32> {
    let model = match &cli.config {
        Some(p) => model_config_from(p)?,
        None => ModelConfig::default(),
    };
    let mut x = FlopsInput::from(&model);
    let set = |slot: &mut u64, v: Option<u64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut x.dim, a.dim);
    set(&mut x.heads, a.heads);
    set(&mut x.tokens, a.tokens);
    set(&mut x.ffn_hidden, a.ffn_hidden);
    set(&mut x.patch_dim, a.patch_dim);
    set(&mut x.num_classes, a.classes);
    set(&mut x.deploy_blocks, a.blocks);
    set(&mut x.branches, a.branches);
    if x.heads == 0 || x.dim % x.heads != 0 {
        return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", x.dim, x.heads)));
    }
    let report = flops_report(&x);
    print!("{}", report.table());
    print_json(&report)?;
    if let Some(out) = &cli.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(0)
}

fn cmd_bench(cli: &Cli, deployed: &Path, opts: &BenchOptions) -> Result<i32> {
    let dp = load(deployed)?.deployed()?;
    let baseline = match &cli.config {
        Some(p) => model_config_from(p)?,
        None => dp.config.clone(),
    };
    let report = run_bench(&dp, &baseline, opts)?;
    print_json(&report)?;
    if let Some(out) = &cli.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(0)
}

fn cmd_analyze(cli: &Cli, checkpoint: &Path, kind: SimilarityKind, data: &DataArg, probes: usize) -> Result<i32> {
    let ck = load(checkpoint)?;
    let model = ck.multi_branch()?;
    let seed = cli.seed.unwrap_or(0);
    let sims = match kind {
        SimilarityKind::Weights => weight_similarity(&model)?,
        SimilarityKind::Features => {
            let images = match &data.data {
                Some(s) => {
                    let d = dataset_spec(s)?.load()?;
                    crate::train::check_compatible(&model.config, &d)?;
                    (0..d.len()).map(|i| d.image(i)).collect()
                }
                None => probe_images(&model.config, probes, seed),
            };
            feature_similarity(&model, &images, ck.phase.lambda, 64)?
        }
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("analysis"));
    fs::create_dir_all(&out)?;
    let mut files = Vec::with_capacity(sims.len());
    for s in &sims {
        let path = out.join(format!("{}.csv", s.site()));
        fs::write(&path, s.to_csv())?;
        files.push(path);
    }
    let summary = json!({
        "checkpoint": checkpoint,
        "kind": kind,
        "lambda": ck.phase.lambda,
        "seed": seed,
        "sites": sims,
    });
    fs::write(out.join("similarity.json"), serde_json::to_string_pretty(&summary)?)?;
    print_json(&json!({ "files": files, "json": out.join("similarity.json") }))?;
    Ok(0)
}
