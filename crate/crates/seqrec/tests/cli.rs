//! End-to-end checks of the command-line pipeline: exit codes, artifact
//! round-trips, manifest-driven reruns, and the data-generation time budget.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqrec"))
}

fn small_args(dir: &Path) -> Vec<String> {
    let cfg = dir.join("run.cfg");
    if !cfg.exists() {
        std::fs::write(
            &cfg,
            "gen.users=120\n\
             gen.items=500\n\
             gen.requests_per_user=14\n\
             train.batch_size=16\n\
             train.pretrain_steps=12\n\
             train.sft_steps=8\n\
             train.context_len=16\n\
             serve.bench_trials=4\n",
        )
        .unwrap();
    }
    vec!["--config".into(), cfg.display().to_string()]
}

fn run_ok(args: &[String]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_roundtrip_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let common = small_args(root);

    // datagen output must feed pretrain directly
    let data = root.join("data");
    let mut args: Vec<String> = vec!["datagen".into(), "--out".into(), data.display().to_string()];
    args.extend(common.clone());
    run_ok(&args);
    assert!(data.join("corpus.jsonl").exists());
    assert!(data.join("logs.jsonl").exists());
    assert!(data.join("manifest.json").exists());

    let pt = root.join("pt");
    let mut args: Vec<String> = vec![
        "pretrain".into(),
        "--corpus".into(),
        data.join("corpus.jsonl").display().to_string(),
        "--logs".into(),
        data.join("logs.jsonl").display().to_string(),
        "--out".into(),
        pt.display().to_string(),
        "--ablation".into(),
        "tamip".into(),
    ];
    args.extend(common.clone());
    run_ok(&args);
    assert!(pt.join("checkpoint.ckpt").exists());
    let loss_csv = std::fs::read_to_string(pt.join("loss.csv")).unwrap();
    assert!(loss_csv.starts_with("step,loss,head_1,head_2"));
    assert_eq!(loss_csv.lines().count(), 13); // header + 12 steps

    let sft = root.join("sft");
    let mut args: Vec<String> = vec![
        "sft".into(),
        "--corpus".into(),
        data.join("corpus.jsonl").display().to_string(),
        "--logs".into(),
        data.join("logs.jsonl").display().to_string(),
        "--checkpoint".into(),
        pt.join("checkpoint.ckpt").display().to_string(),
        "--out".into(),
        sft.display().to_string(),
    ];
    args.extend(common.clone());
    run_ok(&args);

    for mode in ["general", "conditioned", "horizon"] {
        let out = root.join(format!("eval_{mode}"));
        let mut args: Vec<String> = vec![
            "eval".into(),
            "--corpus".into(),
            data.join("corpus.jsonl").display().to_string(),
            "--logs".into(),
            data.join("logs.jsonl").display().to_string(),
            "--checkpoint".into(),
            sft.join("checkpoint.ckpt").display().to_string(),
            "--mode".into(),
            mode.into(),
            "--out".into(),
            out.display().to_string(),
        ];
        args.extend(common.clone());
        run_ok(&args);
        let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
        assert!(report.contains("hr,10,") || mode == "horizon");
        match mode {
            "general" => assert!(!report.contains("cc,")),
            "conditioned" => {
                assert!(report.contains("cc,10,") && report.contains("cc,50,"));
            }
            "horizon" => {
                let horizon = std::fs::read_to_string(out.join("horizon.csv")).unwrap();
                assert_eq!(horizon.lines().count(), 11); // header + 10 offsets
                assert!(horizon.starts_with("offset,hr,n"));
            }
            _ => unreachable!(),
        }
    }

    let bench = root.join("bench");
    let mut args: Vec<String> = vec![
        "serve-bench".into(),
        "--corpus".into(),
        data.join("corpus.jsonl").display().to_string(),
        "--logs".into(),
        data.join("logs.jsonl").display().to_string(),
        "--checkpoint".into(),
        sft.join("checkpoint.ckpt").display().to_string(),
        "--out".into(),
        bench.display().to_string(),
    ];
    args.extend(common.clone());
    run_ok(&args);
    let latency = std::fs::read_to_string(bench.join("latency.csv")).unwrap();
    assert!(latency.starts_with("P,stage,median_us,p95_us"));
    assert!(latency.contains("\n1,backbone,"));
    assert!(latency.contains("\n8,total,"));

    // usage errors exit 1
    let out = bin().args(["sft", "--corpus", "x", "--logs", "y", "--out", "z"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "sft without --checkpoint must be a usage error");
    let out = bin().args(["eval", "--mode", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin()
        .args(["datagen", "--out", "/tmp/x", "--set", "no.such.key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // data errors exit 2
    let mut args: Vec<String> = vec![
        "pretrain".into(),
        "--corpus".into(),
        "/nonexistent/corpus.jsonl".into(),
        "--logs".into(),
        "/nonexistent/logs.jsonl".into(),
        "--out".into(),
        root.join("nope").display().to_string(),
    ];
    args.extend(common.clone());
    let out = bin().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rerun_from_manifest_reproduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let common = small_args(root);

    let data = root.join("data");
    let mut args: Vec<String> = vec!["datagen".into(), "--out".into(), data.display().to_string()];
    args.extend(common.clone());
    run_ok(&args);

    let run = |out: &PathBuf, config: Vec<String>| {
        let mut args: Vec<String> = vec![
            "pretrain".into(),
            "--corpus".into(),
            data.join("corpus.jsonl").display().to_string(),
            "--logs".into(),
            data.join("logs.jsonl").display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ];
        args.extend(config);
        run_ok(&args);
    };
    let a = root.join("a");
    run(&a, common.clone());
    // resume purely from the recorded manifest
    let b = root.join("b");
    run(&b, vec!["--config".into(), a.join("manifest.json").display().to_string()]);
    assert_eq!(
        std::fs::read_to_string(a.join("loss.csv")).unwrap(),
        std::fs::read_to_string(b.join("loss.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(b.join("checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn datagen_default_scale_under_budget() {
    // the full 10k-user benchmark must generate in under a minute
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("full");
    let started = std::time::Instant::now();
    run_ok(&["datagen".into(), "--out".into(), out.display().to_string()]);
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "default datagen took {secs:.1}s, budget 60s");
    let logs = std::fs::metadata(out.join("logs.jsonl")).unwrap();
    assert!(logs.len() > 10_000_000, "expected a multi-megabyte log file");
}

#[test]
fn serve_line_mode_answers_requests() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let common = small_args(root);

    let data = root.join("data");
    let mut args: Vec<String> = vec!["datagen".into(), "--out".into(), data.display().to_string()];
    args.extend(common.clone());
    run_ok(&args);
    let pt = root.join("pt");
    let mut args: Vec<String> = vec![
        "pretrain".into(),
        "--corpus".into(),
        data.join("corpus.jsonl").display().to_string(),
        "--logs".into(),
        data.join("logs.jsonl").display().to_string(),
        "--out".into(),
        pt.display().to_string(),
    ];
    args.extend(common.clone());
    run_ok(&args);

    let events = seqrec::synth::read_events_jsonl(&data.join("logs.jsonl")).unwrap();
    let logs = seqrec::synth::group_by_user(&events).unwrap();
    let request = seqrec::serve::ServeRequest {
        user_id: logs[0].user_id,
        events: logs[0].events.clone(),
        k: 8,
    };

    let mut args: Vec<String> = vec![
        "serve".into(),
        "--corpus".into(),
        data.join("corpus.jsonl").display().to_string(),
        "--checkpoint".into(),
        pt.join("checkpoint.ckpt").display().to_string(),
        "--logs".into(),
        data.join("logs.jsonl").display().to_string(),
    ];
    args.extend(common.clone());
    let mut child = bin()
        .args(&args)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, "{}", serde_json::to_string(&request).unwrap()).unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let line = String::from_utf8(out.stdout).unwrap();
    let response: seqrec::serve::ServeResponse = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(response.user_id, request.user_id);
    assert_eq!(response.results.len(), 4); // serve.p default
    for r in &response.results {
        assert_eq!(r.items.len(), 8);
        assert!(r.error.is_none());
    }
}
