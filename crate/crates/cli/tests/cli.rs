use std::path::Path;
use std::process::{Command, Output};

fn sptx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sptx"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn verify_exit_codes() {
    let ok = sptx(&["verify", "--pattern", "strided:1024:32", "--p", "2"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("\"valid\":true"));
    let bad = sptx(&["verify", "--pattern", "local:1024:32", "--p", "2"]);
    assert_eq!(bad.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(stdout(&bad).trim()).unwrap();
    assert!(report["witness"].is_array());
    assert_eq!(
        sptx(&["verify", "--pattern", "full:64", "--p", "1"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        sptx(&["verify", "--pattern", "strided:64"]).status.code(),
        Some(2)
    );
}

#[test]
fn viz_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fixed.pgm");
    let o = sptx(&["viz", "--pattern", "fixed:64:8:2", "--out", p(&out)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("P2\n64 64\n255\n"));
    let layout = dir.path().join("layout.pgm");
    assert!(sptx(&[
        "viz",
        "--pattern",
        "strided:64:8",
        "--head",
        "1",
        "--layout",
        "--out",
        p(&layout)
    ])
    .status
    .success());
    assert!(!sptx(&[
        "viz",
        "--pattern",
        "strided:64:8",
        "--head",
        "2",
        "--out",
        p(&layout)
    ])
    .status
    .success());
    let s = sptx(&["stats", "--pattern", "strided:12288:128"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&s).trim()).unwrap();
    assert!(v["dense_ratio"].as_f64().unwrap() >= 20.0);
}

#[test]
fn bench_reports_every_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples.ndjson");
    let o = sptx(&[
        "bench",
        "--pattern",
        "strided:256:16",
        "--d",
        "32",
        "--heads",
        "2",
        "--repeats",
        "5",
        "--out",
        p(&samples),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(&samples).unwrap();
    assert_eq!(lines.lines().count(), 10);
    let rows: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    for key in ["impl", "n", "d", "ms", "mac_count"] {
        assert!(rows[0].get(key).is_some());
    }
}

#[test]
fn train_eval_sample_round() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.bin");
    assert!(sptx(&["synth", "--out", p(&corpus), "--seed", "2"])
        .status
        .success());
    assert_eq!(std::fs::metadata(&corpus).unwrap().len(), 1 << 20);
    let run = dir.path().join("run");
    let o = sptx(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out",
        p(&run),
        "--set",
        "train.total_steps=6",
        "--set",
        "train.warmup_steps=2",
        "--set",
        "train.checkpoint_every=3",
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    let echoed = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 4") && echoed.contains("total_steps = 6"));
    let metrics = std::fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 6);

    let held_out = dir.path().join("held_out.bin");
    std::fs::write(&held_out, &std::fs::read(&corpus).unwrap()[..2048]).unwrap();
    let e = sptx(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&held_out),
        "--min-context",
        "0,128,255",
    ]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let reports: Vec<serde_json::Value> = stdout(&e)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports[2]["scored"], reports[2]["windows"]);

    let s1 = dir.path().join("s1.bin");
    let s2 = dir.path().join("s2.bin");
    for out in [&s1, &s2] {
        let s = sptx(&[
            "sample",
            "--checkpoint",
            p(&ckpt),
            "--temperature",
            "0",
            "--seed",
            "7",
            "--length",
            "40",
            "--out",
            p(out),
        ]);
        assert!(s.status.success());
    }
    let a = std::fs::read(&s1).unwrap();
    assert_eq!(a.len(), 40);
    assert_eq!(a, std::fs::read(&s2).unwrap());
}

#[test]
fn interrupted_run_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.bin");
    assert!(sptx(&["synth", "--len", "20000", "--out", p(&corpus)])
        .status
        .success());
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--corpus",
            p(&corpus),
            "--out",
            p(out),
            "--set",
            "model.n_ctx=64",
            "--set",
            "model.pattern.stride=8",
            "--set",
            "train.total_steps=8",
            "--set",
            "train.warmup_steps=2",
        ];
        args.extend(extra);
        let o = sptx(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let full = dir.path().join("full");
    train(&full, &[]);
    let part = dir.path().join("part");
    train(&part, &["--stop-at", "3"]);
    assert_eq!(
        std::fs::read_to_string(part.join("metrics.ndjson"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    train(&part, &["--resume"]);
    for file in ["metrics.ndjson", "model.ckpt"] {
        assert_eq!(
            std::fs::read(full.join(file)).unwrap(),
            std::fs::read(part.join(file)).unwrap()
        );
    }
}

#[test]
fn mulaw_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pcm = dir.path().join("a.pcm");
    let samples: Vec<u8> = (0..1000i32)
        .flat_map(|k| (((k as f64 * 0.05).sin() * 20000.0) as i16).to_le_bytes())
        .collect();
    std::fs::write(&pcm, &samples).unwrap();
    let enc = dir.path().join("a.mu");
    let dec = dir.path().join("b.pcm");
    assert!(
        sptx(&["mulaw", "encode", "--input", p(&pcm), "--out", p(&enc)])
            .status
            .success()
    );
    assert!(
        sptx(&["mulaw", "decode", "--input", p(&enc), "--out", p(&dec)])
            .status
            .success()
    );
    assert_eq!(std::fs::read(&enc).unwrap().len(), 1000);
    assert_eq!(std::fs::read(&dec).unwrap().len(), 2000);
}

#[test]
fn empty_corpus_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty.bin");
    std::fs::write(&corpus, []).unwrap();
    let o = sptx(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus too small"));
}
