use std::path::Path;
use std::process::{Command, Output};

fn lemon(ws: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lemon"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env_remove("LEMON_LLM_ENDPOINT")
        .env_remove("LEMON_SCORE_ENDPOINT")
        .env_remove("LEMON_DETECT_ENDPOINT")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "lemon {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synthetic_corpus_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, ws, out) = (dir.path().join("corpus"), dir.path().join("ws"), dir.path().join("dataset"));
    let s = |p: &Path| p.display().to_string();
    lemon(&ws, &["synth", "--out", &s(&corpus)]);
    let copy = dir.path().join("copy.jsonl");
    lemon(&ws, &["--auto-approve", "ingest", "--sources", &s(&corpus.join("sources.jsonl")), "--manifest", &s(&copy)]);
    assert_eq!(std::fs::read_to_string(&copy).unwrap().lines().count(), 20);
    lemon(&ws, &["--auto-approve", "storyboard"]);
    lemon(&ws, &["--auto-approve", "scores-import", "--file", &s(&corpus.join("scores.jsonl"))]);
    lemon(&ws, &["--auto-approve", "trim", "--theta", "0.5", "--max-nonsurgical", "0.10"]);
    lemon(&ws, &["--auto-approve", "obliterate", "--boxes", &s(&corpus.join("boxes.jsonl")), "--min-conf", "0.25"]);
    let ann = stdout(&lemon(&ws, &["--auto-approve", "annotate", "--keywords", "builtin"]));
    assert!(ann.contains("awaiting-review"), "{ann}");
    let pending = stdout(&lemon(&ws, &["tasks", "--kind", "label_qc"]));
    assert_eq!(pending.lines().count(), 1, "{pending}");
    let exp = stdout(&lemon(&ws, &["export", "--out", &s(&out)]));
    assert!(exp.contains("exported 14 videos"), "{exp}");
    let stats: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["videos"], 14);

    // A human fixes the unmatched title; a second export picks it up.
    let task = pending.split('\t').next().unwrap().to_string();
    lemon(&ws, &["decide", &task, "--action", "correct", "--procedures", "appendectomy", "--actor", "alice"]);
    let exp = stdout(&lemon(&ws, &["export", "--out", &s(&out)]));
    assert!(exp.contains("exported 15 videos"), "{exp}");
    let audit = std::fs::read_to_string(ws.join("audit.jsonl")).unwrap();
    assert!(audit.lines().any(|l| l.contains("\"actor\":\"alice\"")));
    assert!(audit.lines().filter(|l| l.contains("ci-bot")).count() >= 14 * 3);
}

#[test]
fn eval_and_distill_commands() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(
        &pred,
        "{\"video_id\":\"a\",\"frames\":[{\"gt\":0,\"pred\":0},{\"gt\":1,\"pred\":1},{\"gt\":1,\"pred\":0}]}\n",
    )
    .unwrap();
    let table = stdout(&lemon(dir.path(), &["eval", "--pred", &pred.display().to_string(), "--metric", "accuracy,jaccard"]));
    assert!(table.contains("accuracy"), "{table}");
    let json = stdout(&lemon(dir.path(), &["eval", "--pred", &pred.display().to_string(), "--metric", "accuracy", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let acc = v["rows"][0]["value"].as_f64().unwrap();
    assert!((acc - 200.0 / 3.0).abs() < 1e-9, "{v}");

    let cfg = dir.path().join("experiment.toml");
    std::fs::write(&cfg, "C = 8\nl = 0.996\nm = 0.9\nsteps = 5\n").unwrap();
    let trace = dir.path().join("trace.jsonl");
    let o = stdout(&lemon(dir.path(), &["distill", "--config", &cfg.display().to_string(), "--trace", &trace.display().to_string()]));
    assert!(o.contains("steps 5"), "{o}");
    assert_eq!(std::fs::read_to_string(trace).unwrap().lines().count(), 5);
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lemon"))
        .args(["--workspace", &dir.path().display().to_string(), "eval", "--pred", "missing.jsonl"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_lemon"))
        .args(["--workspace", &dir.path().display().to_string(), "trim", "--theta", "2"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("theta"));
}
