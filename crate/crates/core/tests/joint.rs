use std::path::Path;

use dialogue_core::pipeline::{prepare, pretrain, train_joint, RunConfig, Which};
use dialogue_core::rl::events_from_jsonl;
use dialogue_core::toy::{toy_jsonl, NUM_PAIRS};

fn config(dir: &Path, predictor_lr: f64, epochs: usize) -> RunConfig {
    let corpus = dir.join("toy.jsonl");
    std::fs::write(&corpus, toy_jsonl()).unwrap();
    let text = format!(
        r#"{{
            "seed": 3, "variant": "sample-pos", "corpus": "{}", "out_dir": "{}", "k_p": 4,
            "model": {{"transformer": {{"dim": 16, "heads": 2, "ff_dim": 32, "encoder_layers": 1, "decoder_layers": 1, "max_len": 16}}, "pos_max_len": 8}},
            "pretrain_predictor": {{"epochs": 3, "batch_size": 8, "schedule": {{"kind": "constant", "rate": 0.003}}, "clip": 5.0, "seed": 0}},
            "pretrain_generator": {{"epochs": 3, "batch_size": 8, "schedule": {{"kind": "constant", "rate": 0.003}}, "clip": 5.0, "seed": 0}},
            "joint": {{"epochs": {epochs}, "predictor_lr": {predictor_lr}, "generator_schedule": {{"kind": "constant", "rate": 0.002}},
                      "episodes_per_step": 10, "beam": 1, "max_len": 8}}
        }}"#,
        corpus.display(),
        dir.join("run").display()
    );
    RunConfig::from_json(&text).unwrap()
}

fn pretrained(cfg: &RunConfig) {
    prepare(cfg).unwrap();
    pretrain(cfg, Which::Predictor).unwrap();
    pretrain(cfg, Which::Generator).unwrap();
}

fn params(path: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["params"].clone()
}

#[test]
fn frozen_predictor_still_lowers_generator_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), 0.0, 4);
    pretrained(&cfg);
    let epochs = train_joint(&cfg, false).unwrap();
    assert!(epochs.last().unwrap().mean_gen_loss < epochs[0].mean_gen_loss, "{epochs:?}");
    assert_eq!(params(&cfg.path("predictor.json")), params(&cfg.path("predictor.joint.json")));
    assert_ne!(params(&cfg.path("generator.json")), params(&cfg.path("generator.joint.json")));
}

#[test]
fn event_log_covers_every_step_and_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), 1e-3, 2);
    pretrained(&cfg);
    let epochs = train_joint(&cfg, false).unwrap();
    let events = events_from_jsonl(&std::fs::read_to_string(cfg.path("events.jsonl")).unwrap()).unwrap();
    let steps_per_epoch = NUM_PAIRS.div_ceil(10);
    assert_eq!(events.len(), 2 * steps_per_epoch);
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.step, i as u64 + 1);
        assert_eq!(e.epoch, i / steps_per_epoch);
        assert!((0.0..=1.0).contains(&e.mean_q));
        assert!(e.gen_loss.is_finite() && e.gen_loss >= 0.0);
        assert!(e.mean_edit_distance.is_some_and(|d| d.is_finite() && d >= 0.0));
    }
    assert_eq!(epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), [0, 1]);
    let csv = std::fs::read_to_string(cfg.path("edit_distance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().next(), Some("epoch,mean_edit_distance"));
}

#[test]
fn identical_seeds_reproduce_training() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let runs: Vec<_> = [a.path(), b.path()]
        .into_iter()
        .map(|dir| {
            let cfg = config(dir, 1e-3, 2);
            pretrained(&cfg);
            train_joint(&cfg, false).unwrap();
            ["events.jsonl", "predictor.joint.json", "generator.joint.json", "joint_state.json"]
                .map(|n| std::fs::read(cfg.path(n)).unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
