use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn latdial(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latdial"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = latdial(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A quick POS run on the toy corpus, writing its config into `dir`.
fn quick_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(root().join("configs/toy-pos.json")).unwrap()).unwrap();
    cfg["corpus"] = json!(root().join("data/toy.jsonl"));
    cfg["out_dir"] = json!(dir.join("run"));
    cfg["pretrain_predictor"]["epochs"] = json!(2);
    cfg["pretrain_generator"]["epochs"] = json!(2);
    cfg["joint"]["epochs"] = json!(4);
    edit(&mut cfg);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn pretrained(dir: &Path, config: &str) {
    ok(dir, &["prepare", "--config", config]);
    ok(dir, &["pretrain", "--which", "predictor", "--config", config]);
    ok(dir, &["pretrain", "--which", "generator", "--config", config]);
}

#[test]
fn missing_corpus_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), |c| c["corpus"] = json!("/nonexistent/corpus.jsonl"));
    let out = latdial(tmp.path(), &["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/corpus.jsonl"), "{}", stderr(&out));
}

#[test]
fn invalid_variant_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), |c| c["variant"] = json!("sample-everything"));
    let out = latdial(tmp.path(), &["pretrain", "--which", "predictor", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let cfg = quick_config(tmp.path(), |_| {});
    let out = latdial(tmp.path(), &["prepare", "--variant", "nope", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn inconsistent_candidate_sizes_are_rejected_before_touching_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), |c| {
        c["corpus"] = json!("/nonexistent/corpus.jsonl");
        c["k_s"] = json!(8);
    });
    let out = latdial(tmp.path(), &["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!stderr(&out).contains("/nonexistent"), "{}", stderr(&out));
    let out = latdial(tmp.path(), &["prepare"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prepare_writes_candidates_and_labels_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), |_| {});
    let cfg = cfg.to_str().unwrap();
    let stdout = ok(tmp.path(), &["prepare", "--config", cfg]);
    assert!(stdout.contains("candidates 4"), "{stdout}");
    let run = tmp.path().join("run");
    let candidates = std::fs::read(run.join("candidates.jsonl")).unwrap();
    let labels = std::fs::read_to_string(run.join("labels.tsv")).unwrap();
    assert_eq!(candidates.iter().filter(|&&b| b == b'\n').count(), 4);
    let ids: Vec<usize> = labels.lines().filter_map(|l| l.split('\t').nth(1)?.parse().ok()).collect();
    assert_eq!(ids.len(), 100);
    assert!(ids.iter().all(|&l| l < 4));

    ok(tmp.path(), &["prepare", "--config", cfg]);
    assert_eq!(std::fs::read(run.join("candidates.jsonl")).unwrap(), candidates);
    assert_eq!(std::fs::read_to_string(run.join("labels.tsv")).unwrap(), labels);
}

#[test]
fn zero_epoch_pretraining_writes_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), |c| {
        c["pretrain_predictor"]["epochs"] = json!(0);
        c["pretrain_generator"]["epochs"] = json!(0);
    });
    let cfg = cfg.to_str().unwrap();
    pretrained(tmp.path(), cfg);
    for name in ["predictor.json", "generator.json"] {
        assert!(tmp.path().join("run").join(name).is_file(), "{name}");
    }
}

#[test]
fn missing_prepared_data_or_checkpoints_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), |_| {});
    let cfg = cfg.to_str().unwrap();
    let out = latdial(tmp.path(), &["pretrain", "--which", "generator", "--config", cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    ok(tmp.path(), &["prepare", "--config", cfg]);
    let out = latdial(tmp.path(), &["train-joint", "--config", cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("predictor.json"), "{}", stderr(&out));
    let out = latdial(tmp.path(), &["generate", "--stage", "pretrained", "--config", cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

fn joint_artifacts(run: &Path) -> Vec<Vec<u8>> {
    [
        "predictor.joint.json",
        "generator.joint.json",
        "joint_state.json",
        "events.jsonl",
        "joint_epochs.csv",
        "edit_distance.csv",
    ]
    .iter()
    .map(|n| std::fs::read(run.join(n)).unwrap())
    .collect()
}

#[test]
fn resumed_training_continues_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), |_| {});
    let cfg = cfg.to_str().unwrap();
    pretrained(tmp.path(), cfg);
    let run = tmp.path().join("run");
    let other = tmp.path().join("other");

    ok(tmp.path(), &["train-joint", "--config", cfg]);
    let straight = joint_artifacts(&run);

    std::fs::create_dir_all(&other).unwrap();
    for e in std::fs::read_dir(&run).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), other.join(e.file_name())).unwrap();
    }
    let out = other.to_str().unwrap();
    ok(
        tmp.path(),
        &["train-joint", "--joint-epochs", "2", "--out-dir", out, "--config", cfg],
    );
    assert_ne!(joint_artifacts(&other), straight);
    let stdout = ok(tmp.path(), &["train-joint", "--resume", "--out-dir", out, "--config", cfg]);
    assert_eq!(stdout.lines().count(), 4);
    assert_eq!(joint_artifacts(&other), straight);
}

#[test]
fn generate_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), |c| c["joint"]["epochs"] = json!(1));
    let cfg = cfg.to_str().unwrap();
    pretrained(tmp.path(), cfg);
    ok(tmp.path(), &["train-joint", "--config", cfg]);
    let run = tmp.path().join("run");

    let input = tmp.path().join("posts.txt");
    std::fs::write(&input, "who red cat runs\nhow big tree sings\nwhat is this\n").unwrap();
    let dump = tmp.path().join("dump.tsv");
    let stdout = ok(
        tmp.path(),
        &[
            "generate",
            "--input",
            input.to_str().unwrap(),
            "--output",
            dump.to_str().unwrap(),
            "--config",
            cfg,
        ],
    );
    assert!(stdout.starts_with("3 rows"), "{stdout}");
    let rows = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.lines().all(|l| l.split('\t').nth(1) == Some("pos-sampled")), "{rows}");

    ok(tmp.path(), &["generate", "--config", cfg]);
    let generated = std::fs::read(run.join("generations.tsv")).unwrap();
    ok(tmp.path(), &["generate", "--config", cfg]);
    assert_eq!(std::fs::read(run.join("generations.tsv")).unwrap(), generated);

    // A dump answering every post with its own first reference.
    let corpus = std::fs::read_to_string(root().join("data/toy.jsonl")).unwrap();
    let mut own = String::new();
    for (i, line) in corpus.lines().step_by(2).enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        own.push_str(&format!(
            "{i}\tpos-sampled\t{}\t{}\n",
            v["response_pos"].as_str().unwrap(),
            v["response"].as_str().unwrap()
        ));
    }
    let own_path = tmp.path().join("own.tsv");
    std::fs::write(&own_path, own).unwrap();
    let stdout = ok(tmp.path(), &["evaluate", "--dump", own_path.to_str().unwrap(), "--config", cfg]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["bleu"], json!([100.0, 100.0, 100.0, 100.0]), "{stdout}");
    assert_eq!(report["n"], json!(50));

    let gen = run.join("generations.tsv");
    ok(
        tmp.path(),
        &[
            "evaluate",
            "--dump",
            &format!("kp4={}", gen.display()),
            "--dump",
            &format!("own={}", own_path.display()),
            "--config",
            cfg,
        ],
    );
    let sweep = std::fs::read_to_string(run.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "label,bleu1,bleu2,bleu3,bleu4,overlap1,edit_distance,n");
    assert!(lines[1].starts_with("kp4,") && lines[2].starts_with("own,"), "{sweep}");
    assert!(run.join("report_kp4.json").is_file() && run.join("report_own.json").is_file());

    let bad = tmp.path().join("bad.tsv");
    std::fs::write(&bad, "99\tpos-sampled\tn v\tcat runs\n").unwrap();
    let out = latdial(tmp.path(), &["evaluate", "--dump", bad.to_str().unwrap(), "--config", cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
