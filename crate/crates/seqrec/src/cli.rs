//! Command-line pipeline: datagen, pretrain, sft, eval, serve-bench, plus a
//! line-delimited serve mode. Every run writes a manifest with the resolved
//! configuration and input hashes before doing any work.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::eval::{self, build_eval_cases, build_index, EvalReport};
use crate::model::{sha256_file, Model};
use crate::serve::{latency_bench, write_bench_csv, ServeOptions, ServeRequest, Server};
use crate::synth::{
    generate_dataset, group_by_user, read_events_jsonl, read_items_jsonl, write_events_jsonl,
    write_items_jsonl, CorpusIndex, UserLog,
};
use crate::train::{train_stage, StageMode};

#[derive(Parser)]
#[command(name = "seqrec", version, about = "Time-aware multi-item retrieval pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// flat key=value config file, or a previous run's manifest.json
    #[arg(long)]
    config: Option<PathBuf>,
    /// config override, repeatable: --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// overrides the seed config key
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and interaction logs
    Datagen {
        #[command(flatten)]
        common: Common,
        /// output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a model on interaction logs
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// training objective: nip, mip, or tamip
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Fine-tune a pre-trained checkpoint on the conditioned split
    Sft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        /// pre-training checkpoint to start from (required)
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: general, conditioned, or horizon mode
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["general", "conditioned", "horizon"])]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure batched-inference latency scaling across condition counts
    ServeBench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve requests as line-delimited JSON over stdin/stdout
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// optional logs to pre-compute per-user instructions from
        #[arg(long)]
        logs: Option<PathBuf>,
    },
}

pub fn cli_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ── manifest ─────────────────────────────────────────────────────────

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: Option<u64>,
}

impl RunManifest {
    fn new(subcommand: &str, cfg: &AppConfig, inputs: &[&Path]) -> Result<RunManifest> {
        let mut hashed = BTreeMap::new();
        for path in inputs {
            hashed.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            seed: cfg.u64("seed")?,
            config: cfg.entries().clone(),
            inputs: hashed,
            outputs: Vec::new(),
            started_unix: now_unix(),
            finished_unix: None,
        })
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let line = serde_json::to_string(self)?;
        std::fs::write(out_dir.join("manifest.json"), line + "\n")?;
        Ok(())
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn parse_overrides(common: &Common) -> Result<Vec<(String, String)>> {
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set '{kv}' is not key=value")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    Ok(overrides)
}

fn resolve_config(common: &Common) -> Result<AppConfig> {
    let overrides = parse_overrides(common)?;
    let cfg = AppConfig::load(common.config.as_deref(), &overrides)?;
    for (k, v) in cfg.entries() {
        eprintln!("config {k}={v}");
    }
    Ok(cfg)
}

fn load_world(corpus_path: &Path, logs_path: &Path, cfg: &AppConfig) -> Result<(CorpusIndex, Vec<UserLog>)> {
    let items = read_items_jsonl(corpus_path)?;
    if items.is_empty() {
        return Err(Error::Data(format!("{}: empty corpus", corpus_path.display())));
    }
    let events = read_events_jsonl(logs_path)?;
    if events.is_empty() {
        return Err(Error::Data(format!("{}: empty logs", logs_path.display())));
    }
    let corpus = CorpusIndex::new(items, cfg.u32("gen.genres")?);
    let logs = group_by_user(&events)?;
    Ok((corpus, logs))
}

// ── subcommands ──────────────────────────────────────────────────────

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Datagen { common, out } => cmd_datagen(&common, &out),
        Cmd::Pretrain { common, corpus, logs, out, ablation } => {
            cmd_train(&common, &corpus, &logs, None, &out, ablation.as_deref(), StageMode::Pretrain)
        }
        Cmd::Sft { common, corpus, logs, checkpoint, out } => {
            cmd_train(&common, &corpus, &logs, Some(&checkpoint), &out, None, StageMode::Sft)
        }
        Cmd::Eval { common, corpus, logs, checkpoint, mode, out } => {
            cmd_eval(&common, &corpus, &logs, &checkpoint, &mode, &out)
        }
        Cmd::ServeBench { common, corpus, logs, checkpoint, out } => {
            cmd_serve_bench(&common, &corpus, &logs, &checkpoint, &out)
        }
        Cmd::Serve { common, corpus, checkpoint, logs } => {
            cmd_serve(&common, &corpus, &checkpoint, logs.as_deref())
        }
    }
}

fn cmd_datagen(common: &Common, out: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("datagen", &cfg, &[])?;
    manifest.outputs = vec!["corpus.jsonl".into(), "logs.jsonl".into()];
    manifest.write(out)?;

    let gen = cfg.gen_config()?;
    let (items, events) = generate_dataset(&gen);
    write_items_jsonl(&out.join("corpus.jsonl"), &items)?;
    write_events_jsonl(&out.join("logs.jsonl"), &events)?;
    eprintln!("datagen: {} items, {} events", items.len(), events.len());

    manifest.finished_unix = Some(now_unix());
    manifest.write(out)?;
    Ok(())
}

fn cmd_train(
    common: &Common,
    corpus_path: &Path,
    logs_path: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    ablation: Option<&str>,
    mode: StageMode,
) -> Result<()> {
    let mut overrides = parse_overrides(common)?;
    if let Some(ablation) = ablation {
        overrides.push(("train.ablation".to_string(), ablation.to_string()));
    }
    let cfg = AppConfig::load(common.config.as_deref(), &overrides)?;
    for (k, v) in cfg.entries() {
        eprintln!("config {k}={v}");
    }
    std::fs::create_dir_all(out)?;

    let mut inputs = vec![corpus_path, logs_path];
    if let Some(ckpt) = checkpoint {
        inputs.push(ckpt);
    }
    let name = match mode {
        StageMode::Pretrain => "pretrain",
        StageMode::Sft => "sft",
    };
    let mut manifest = RunManifest::new(name, &cfg, &inputs)?;
    manifest.outputs = vec!["checkpoint.ckpt".into(), "loss.csv".into()];
    manifest.write(out)?;

    let (corpus, logs) = load_world(corpus_path, logs_path, &cfg)?;
    let train_cfg = cfg.train_config()?;
    let mut model = match mode {
        StageMode::Pretrain => Model::new(cfg.model_config()?)?,
        StageMode::Sft => {
            let ckpt = checkpoint.expect("sft requires a checkpoint");
            Model::load(ckpt)?
        }
    };
    let report = train_stage(&mut model, &corpus, &logs, &train_cfg, mode, Some(&out.join("loss.csv")))?;
    model.save(&out.join("checkpoint.ckpt"))?;
    eprintln!(
        "{name}: {} steps, loss {:.4} -> {:.4} ({} examples, {} skipped, delta_tau {}s, \
         masked fraction {:.4}, mean masked positions {:.2})",
        report.steps_run,
        report.first_loss,
        report.final_loss,
        report.examples_available,
        report.skipped_examples,
        report.delta_tau,
        report.masked_fraction,
        report.masked_count_mean,
    );

    manifest.finished_unix = Some(now_unix());
    manifest.write(out)?;
    Ok(())
}

fn cmd_eval(
    common: &Common,
    corpus_path: &Path,
    logs_path: &Path,
    checkpoint: &Path,
    mode: &str,
    out: &Path,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("eval", &cfg, &[corpus_path, logs_path, checkpoint])?;
    manifest.outputs = vec!["report.csv".into(), "report.json".into()];
    if mode == "horizon" {
        manifest.outputs.push("horizon.csv".into());
    }
    manifest.write(out)?;

    let (corpus, logs) = load_world(corpus_path, logs_path, &cfg)?;
    let model = Model::load(checkpoint)?;
    let index = build_index(&model, &corpus.items, &sha256_file(checkpoint)?)?;
    let family = cfg.condition_family()?;
    let context_len = cfg.usize("eval.context_len")?.min(model.config.max_seq_len);
    let holdout = cfg.usize("train.holdout_requests")?;
    let (cases, skipped) = build_eval_cases(&logs, holdout, context_len);
    let ks = cfg.usize_list("eval.hr_ks")?;

    let report = match mode {
        "general" => {
            let hr = eval::hr_at_k(&index, &model, &corpus, &logs, &cases, &ks, false, family)?;
            EvalReport { hr, cc: None, horizon: None, num_cases: cases.len(), skipped }
        }
        "conditioned" => {
            let hr = eval::hr_at_k(&index, &model, &corpus, &logs, &cases, &ks, true, family)?;
            let cc = eval::cc_eval(&index, &model, &corpus, &logs, &cases, &ks, true, family)?;
            EvalReport { hr, cc: Some(cc), horizon: None, num_cases: cases.len(), skipped }
        }
        "horizon" => {
            let horizon = eval::horizon_eval(
                &index,
                &model,
                &corpus,
                &logs,
                &cases,
                cfg.usize("eval.horizon")?,
                cfg.usize("eval.horizon_k")?,
            )?;
            eval::write_horizon_csv(&out.join("horizon.csv"), &horizon)?;
            let hr = vec![(cfg.usize("eval.horizon_k")?, horizon[0].hr)];
            EvalReport { hr, cc: None, horizon: Some(horizon), num_cases: cases.len(), skipped }
        }
        other => return Err(Error::Config(format!("unknown eval mode '{other}'"))),
    };
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    std::fs::write(out.join("report.json"), report.to_json_line()? + "\n")?;
    eprintln!("eval {mode}: {} cases ({} skipped)", report.num_cases, report.skipped);

    manifest.finished_unix = Some(now_unix());
    manifest.write(out)?;
    Ok(())
}

fn cmd_serve_bench(
    common: &Common,
    corpus_path: &Path,
    logs_path: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("serve-bench", &cfg, &[corpus_path, logs_path, checkpoint])?;
    manifest.outputs = vec!["latency.csv".into(), "retrieval_digest.txt".into()];
    manifest.write(out)?;

    let (corpus, logs) = load_world(corpus_path, logs_path, &cfg)?;
    let model = Model::load(checkpoint)?;
    let index = build_index(&model, &corpus.items, &sha256_file(checkpoint)?)?;
    let opts = ServeOptions {
        family: cfg.condition_family()?,
        temporal: None,
    };
    let bench_log = logs
        .iter()
        .max_by_key(|l| (l.events.len(), std::cmp::Reverse(l.user_id)))
        .ok_or_else(|| Error::Data("no user log to benchmark against".into()))?;
    let outcome = latency_bench(
        &model,
        &index,
        &corpus,
        bench_log,
        &cfg.usize_list("serve.bench_sweep")?,
        cfg.usize("serve.bench_trials")?,
        cfg.usize("serve.k")?,
        &opts,
    )?;
    write_bench_csv(&out.join("latency.csv"), &outcome.rows)?;
    std::fs::write(out.join("retrieval_digest.txt"), outcome.retrieval_digest + "\n")?;
    for row in &outcome.rows {
        eprintln!(
            "bench P={} {}: median {}us p95 {}us",
            row.p, row.stage, row.median_us, row.p95_us
        );
    }

    manifest.finished_unix = Some(now_unix());
    manifest.write(out)?;
    Ok(())
}

fn cmd_serve(
    common: &Common,
    corpus_path: &Path,
    checkpoint: &Path,
    logs_path: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let items = read_items_jsonl(corpus_path)?;
    let corpus = CorpusIndex::new(items, cfg.u32("gen.genres")?);
    let model = Model::load(checkpoint)?;
    let index = build_index(&model, &corpus.items, &sha256_file(checkpoint)?)?;
    let opts = ServeOptions {
        family: cfg.condition_family()?,
        temporal: None,
    };
    let mut server = Server::new(
        &model,
        &index,
        &corpus,
        opts,
        cfg.usize("serve.window")?,
        cfg.usize("serve.p")?,
    );
    if let Some(path) = logs_path {
        let events = read_events_jsonl(path)?;
        server.warm_cache(&group_by_user(&events)?)?;
    }

    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: ServeRequest = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("bad request line: {e}")))?;
        let response = server.serve(&request)?;
        writeln!(stdout, "{}", serde_json::to_string(&response)?)?;
        stdout.flush()?;
    }
    Ok(())
}
