use std::path::Path;
use std::process::{Command, Output};

fn citrinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_citrinet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = citrinet(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--repeat", "1", "--channels", "8", "--epilog-channels", "8", "--layout", "K1", "--batch-size", "4",
    "--total-steps", "4", "--warmup-steps", "1", "--eval-every", "2", "--peak-lr", "0.01",
];

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = data.join("manifest.json");
    let tok = dir.path().join("tok.txt");
    let lm = dir.path().join("lm.txt");
    let run = dir.path().join("run");

    ok(&["synth-data", "--out", s(&data), "--num", "6", "--words", "5", "--seed", "3"]);
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 6);
    ok(&["train-tokenizer", "--manifest", s(&manifest), "--kind", "char", "--vocab-size", "6", "--out", s(&tok)]);
    ok(&["train-lm", "--manifest", s(&manifest), "--tokenizer", s(&tok), "--order", "2", "--out", s(&lm)]);

    let mut args = vec!["train", "--train-manifest", s(&manifest), "--dev-manifest", s(&manifest)];
    args.extend(["--out", s(&run), "--tokenizer", s(&tok), "--seed", "1"]);
    args.extend(TINY);
    let stdout = ok(&args);
    assert!(stdout.contains("trained 4 steps"), "{stdout}");
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].is_f64() && v["lr"].is_f64() && v["step"].is_u64());
    }
    assert!(metrics.lines().nth(1).unwrap().contains("\"wer\""));

    let ckpt = run.join("best.ckpt");
    let report = ok(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--tokenizer", s(&tok)]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["utterances"], 6);
    assert_eq!(report["decoding"], "greedy");

    let dump = dir.path().join("hyps.json");
    let beam = ok(&[
        "evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--tokenizer", s(&tok), "--lm", s(&lm),
        "--beam-width", "4", "--alpha", "0.3", "--dump", s(&dump),
    ]);
    assert!(beam.contains("beam width=4"), "{beam}");
    let hyps: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(hyps.as_array().unwrap().len(), 6);

    let wav = data.join("utt_0000.wav");
    let decoded = ok(&["decode", "--checkpoint", s(&ckpt), "--tokenizer", s(&tok), s(&wav)]);
    assert!(decoded.starts_with(s(&wav)));

    // resuming a finished run, config taken from the checkpoint, changes nothing
    let again = ok(&["train", "--train-manifest", s(&manifest), "--out", s(&run), "--resume"]);
    assert!(again.contains("trained 4 steps"), "{again}");
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap(), metrics);
}

#[test]
fn vocab_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = data.join("manifest.json");
    let (tok, big_tok, run) = (dir.path().join("t"), dir.path().join("t2"), dir.path().join("run"));
    ok(&["synth-data", "--out", s(&data), "--num", "3", "--seed", "1"]);
    ok(&["train-tokenizer", "--manifest", s(&manifest), "--kind", "char", "--vocab-size", "6", "--out", s(&tok)]);
    ok(&["train-tokenizer", "--manifest", s(&manifest), "--vocab-size", "12", "--out", s(&big_tok)]);
    let mut args = vec!["train", "--train-manifest", s(&manifest), "--out", s(&run), "--tokenizer", s(&tok)];
    args.extend(TINY);
    ok(&args);
    let out = citrinet(&[
        "evaluate", "--checkpoint", s(&run.join("last.ckpt")), "--manifest", s(&manifest), "--tokenizer", s(&big_tok),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary mismatch"));
}

#[test]
fn analyze_reports_layout_and_size() {
    let out = ok(&["analyze", "--gamma", "0.5", "--channels", "256"]);
    assert!(out.contains("5 | 5,7,7,9,9,11 | 7,7,9,9,11,11,13 | 13,13,15,15,17,17,19,19 | 41"), "{out}");
    assert!(out.contains("parameters:"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small\nchannels = 1024\n").unwrap();
    let out = ok(&["analyze", "--config", s(&cfg)]);
    assert!(out.contains("C=1024"), "{out}");
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "bogus = 3\n").unwrap();
    let out = citrinet(&["analyze", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn training_without_tokenizer_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--out", s(&data), "--num", "2"]);
    let out = citrinet(&["train", "--train-manifest", s(&data.join("manifest.json")), "--out", s(dir.path())]);
    assert!(!out.status.success());
}
