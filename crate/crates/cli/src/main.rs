use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nartag::bench::{measure_latency, speedup_table, BenchOptions};
use nartag::corpus::{load_split, Split};
use nartag::refine::{Mode, Refiner};
use nartag::tagcodec::validate_crf_rules;
use nartag::trainer::{evaluate_checkpoint, load_checkpoint, train, TrainConfig};
use nartag::verify::gradient_suite;
use nartag::Error;

#[derive(Parser)]
#[command(name = "nartag", version, about = "Joint intent detection and slot filling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint, run report and curve.
    Train(TrainArgs),
    /// Print metrics of a checkpoint on a split as JSON.
    Eval(EvalArgs),
    /// Tag utterances, one per line, as `<intent>\t<tags>`.
    Tag(TagArgs),
    /// Per-utterance decode latency for each mode.
    Bench(BenchArgs),
    /// List uncoordinated slots in tag sequences.
    Audit(AuditArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Defaults to the mode the checkpoint was trained with.
    #[arg(long)]
    mode: Option<Mode>,
    /// Defaults to the data directory recorded with the checkpoint.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TagArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    /// Reads standard input when absent.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "one_pass,two_pass,one_pass_crf")]
    modes: Vec<Mode>,
    #[arg(long, default_value = "one_pass_crf")]
    reference: Mode,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write the full reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// `seq.out` style file, or `tag` output (tags after the tab).
    input: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// Failure with a process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Divergence { .. }) => 3,
            Some(Error::Config(_)) => 1,
            _ => 2,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Tag(a) => cmd_tag(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        cfg.apply(&nartag::config::read(path)?)?;
    }
    if let Some(p) = &a.preset {
        cfg.set("preset", p)?;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &a.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for kv in &a.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")).into());
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(&a)?;
    let report = train(&cfg)?;
    log::info!(
        "best epoch {} dev sentence accuracy {:.4}; report in {}",
        report.best_epoch,
        report.best_dev.sentence_accuracy,
        cfg.output_dir.join("run_report.json").display()
    );
    print_json(&report.best_dev)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let metrics = evaluate_checkpoint(&a.checkpoint, a.split, a.mode, a.data_dir.as_deref())?;
    print_json(&metrics)?;
    Ok(())
}

fn read_lines(input: Option<&Path>) -> anyhow::Result<Vec<String>> {
    match input {
        Some(p) => Ok(fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(String::from)
            .collect()),
        None => io::stdin().lock().lines().collect::<io::Result<_>>().map_err(Into::into),
    }
}

fn cmd_tag(a: TagArgs) -> CmdResult {
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let refiner = Refiner::new(&model, &meta.vocab)?;
    let mode = a.mode.unwrap_or(meta.mode);
    let mut out = BufWriter::new(io::stdout().lock());
    for (i, line) in read_lines(a.input.as_deref())?.iter().enumerate() {
        let ids: Vec<usize> = line
            .split_whitespace()
            .map(|t| meta.vocab.token_id(&t.to_lowercase()))
            .collect();
        if ids.is_empty() {
            return Err(anyhow::anyhow!("line {}: empty utterance", i + 1).into());
        }
        let labels = refiner.decode_single(&ids, mode)?.to_labels(&meta.vocab);
        writeln!(out, "{}\t{}", labels.intent, labels.slot_tags.join(" ")).map_err(anyhow::Error::from)?;
    }
    out.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    if !a.modes.contains(&a.reference) {
        return Err(Error::Config(format!("reference {} is not among --modes", a.reference)).into());
    }
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let data = load_split(a.data_dir.as_deref().unwrap_or(&meta.data_dir), a.split)?;
    let opts = BenchOptions {
        warmup: a.warmup,
        repeats: a.repeats,
        threads: a.threads,
    };
    let mut reports = Vec::new();
    for mode in &a.modes {
        log::info!("timing {mode} on {} utterances", data.len());
        reports.push(measure_latency(&model, &meta.vocab, &data, *mode, opts)?);
    }
    let table = speedup_table(&mut reports, a.reference.as_str())?;
    print!("{}", table.to_text());
    if let Some(hw) = reports.first().map(|r| &r.hardware) {
        println!("# {hw}");
    }
    if let Some(p) = &a.csv {
        fs::write(p, table.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_vec_pretty(&reports).map_err(anyhow::Error::from)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> CmdResult {
    let mut out = BufWriter::new(io::stdout().lock());
    let mut total = 0usize;
    for (i, line) in read_lines(Some(&a.input))?.iter().enumerate() {
        let tags_part = line.split_once('\t').map_or(line.as_str(), |(_, t)| t);
        let tags: Vec<&str> = tags_part.split_whitespace().collect();
        for v in validate_crf_rules(&tags)? {
            total += 1;
            writeln!(out, "{}:{} {} {}", i + 1, v.pos, v.prev_tag.as_deref().unwrap_or("<s>"), v.tag)
                .map_err(anyhow::Error::from)?;
        }
    }
    writeln!(out, "total {total}").map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()).into());
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = gradient_suite(&seeds, a.tolerance);
    print_json(&report)?;
    if !report.passed {
        bail_numeric(report.max_rel_error)?;
    }
    Ok(())
}

fn bail_numeric(err: f64) -> CmdResult {
    Err(Failure {
        code: 3,
        error: anyhow::anyhow!("gradient check failed (max relative error {err:.3e})"),
    })
}
