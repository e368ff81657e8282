use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn reder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reder")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = reder(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_corpus(dir: &Path) {
    ok(&[
        "gen", "--out", p(dir), "--task", "cipher-swap", "--pairs", "64", "--dev-pairs", "8", "--test-pairs", "8",
        "--vocab-size", "8", "--min-len", "3", "--max-len", "5", "--seed", "3",
    ]);
}

const TINY: &[&str] = &[
    "--d-model", "16", "--d-ff", "32", "--heads", "2", "--layers", "2", "--batch-size", "16", "--warmup", "4",
    "--eval-every", "2", "--quiet",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    reder(&args)
}

#[test]
fn gen_is_deterministic_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_corpus(&a);
    small_corpus(&b);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let vocab = fs::read_to_string(a.join("vocab.txt")).unwrap();
    assert!(vocab.starts_with("<pad>\n<blank>\n"));
    let first: Value = serde_json::from_str(fs::read_to_string(a.join("train.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert!(first["src"].is_string() && first["tgt"].is_string());

    assert_eq!(code(&reder(&["gen", "--out", p(&a)])), 2);
    assert_eq!(code(&reder(&["gen", "--out", p(&tmp.path().join("c")), "--pairs", "0"])), 2);
    ok(&["gen", "--out", p(&a), "--pairs", "32", "--vocab-size", "8", "--overwrite"]);
    assert!(!fs::read_dir(&a).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "tmp")));
}

#[test]
fn train_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data);
    let out = tmp.path().join("run");
    let o = train(&data, &out, &["--total-updates", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["last.ckpt", "best.ckpt", "metrics.jsonl", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let cfg = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("d_model = 16"));
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert!(kinds.contains(&"train".to_string()) && kinds.contains(&"dev".to_string()));

    assert_eq!(code(&train(&data, &out, &["--total-updates", "4"])), 2);
    assert_eq!(code(&train(&data, &tmp.path().join("x"), &["--no-revnet-symmetric"])), 2);
    assert_eq!(code(&train(&data, &tmp.path().join("y"), &["--recompute", "--dropout", "0.1"])), 2);
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data);
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    let run = &["--total-updates", "8", "--stage1-fraction", "0.5"];
    assert_eq!(code(&train(&data, &full, run)), 0);
    let mut stop = run.to_vec();
    stop.extend(["--stop-after", "3"]);
    assert_eq!(code(&train(&data, &part, &stop)), 0);
    let mut resume = run.to_vec();
    resume.push("--resume");
    assert_eq!(code(&train(&data, &part, &resume)), 0);
    assert_eq!(fs::read(full.join("last.ckpt")).unwrap(), fs::read(part.join("last.ckpt")).unwrap());
    assert_eq!(
        fs::read_to_string(full.join("metrics.jsonl")).unwrap(),
        fs::read_to_string(part.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn translate_eval_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data);
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&data, &run, &["--total-updates", "4"])), 0);
    let ck = run.join("last.ckpt");

    let input = tmp.path().join("in.txt");
    let first: Value = serde_json::from_str(fs::read_to_string(data.join("test.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    fs::write(&input, format!("{}\n\n", first["src"].as_str().unwrap())).unwrap();
    let there = tmp.path().join("there.txt");
    ok(&["translate", "--checkpoint", p(&ck), "--direction", "x2y", "--input", p(&input), "--output", p(&there)]);
    assert_eq!(fs::read_to_string(&there).unwrap().lines().count(), 2);
    assert!(tmp.path().join("there.txt.config.toml").exists());
    let back = tmp.path().join("back.txt");
    ok(&[
        "translate", "--checkpoint", p(&ck), "--direction", "y2x", "--input", p(&there), "--output", p(&back),
        "--decode", "beam", "--beam", "4", "--rerank", "reverse-likelihood",
    ]);
    assert_eq!(fs::read_to_string(&back).unwrap().lines().count(), 2);

    let empty = tmp.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = tmp.path().join("empty.out");
    ok(&["translate", "--checkpoint", p(&ck), "--direction", "x2y", "--input", p(&empty), "--output", p(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "t0 nonsense\n").unwrap();
    let o = reder(&["translate", "--checkpoint", p(&ck), "--direction", "x2y", "--input", p(&bad), "--output", p(&tmp.path().join("bad.out"))]);
    assert_eq!(code(&o), 3);
    assert!(!tmp.path().join("bad.out").exists());

    let report = tmp.path().join("eval.jsonl");
    let text = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--split", "test", "--out", p(&report)]);
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        for key in ["exact_match", "bleu", "reconstruction_em", "reconstruction_bleu", "length_ratio"] {
            assert!(l[key].is_number(), "{key}");
        }
        assert!((0.0..=100.0).contains(&l["bleu"].as_f64().unwrap()));
    }
    assert_eq!(fs::read_to_string(&report).unwrap(), text);

    let inspect: Value = serde_json::from_str(&ok(&["inspect-reversibility", "--checkpoint", p(&ck)])).unwrap();
    assert!(inspect["continuous_residual_max"].as_f64().unwrap() <= 1e-6);

    let corrupt = tmp.path().join("corrupt.ckpt");
    let mut bytes = fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&corrupt, bytes).unwrap();
    assert_eq!(code(&reder(&["inspect-reversibility", "--checkpoint", p(&corrupt)])), 3);
}

#[test]
fn fresh_models_are_continuously_reversible() {
    let zero: Value = serde_json::from_str(&ok(&["inspect-reversibility", "--zero-layers"])).unwrap();
    assert_eq!(zero["continuous_residual_max"].as_f64().unwrap(), 0.0);
    let deep: Value = serde_json::from_str(&ok(&[
        "inspect-reversibility", "--layers", "12", "--d-model", "32", "--random-samples", "8",
    ]))
    .unwrap();
    assert!(deep["continuous_residual_max"].as_f64().unwrap() <= 1e-6, "{deep}");
    assert_eq!(deep["layers"], 12);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&reder(&[])), 2);
    assert_eq!(code(&reder(&["train"])), 2);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nno_such_field = 1\n").unwrap();
    assert_eq!(code(&reder(&["gen", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))])), 2);
}
