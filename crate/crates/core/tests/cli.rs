//! End-to-end runs of the `holi` command surface on tiny corpora.

use std::path::{Path, PathBuf};

use clap::Parser;
use serde_json::Value;

use holi::cli::{error_line, execute, main_with_args, Cli};
use holi::stats::CooccurrenceStats;

fn smoke() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml").display().to_string()
}

// tiny overrides so every command finishes in seconds
fn cli(out: &Path, seed: u64, rest: &[&str]) -> Cli {
    let mut args: Vec<String> = ["holi", "--config", &smoke(), "--out", &out.display().to_string(), "--seed", &seed.to_string()]
        .iter()
        .map(|s| s.to_string())
        .collect();
    args.extend(["--n", "8", "--n-test", "4", "--max-steps", "3"].map(String::from));
    args.extend(rest.iter().map(|s| s.to_string()));
    Cli::try_parse_from(args).unwrap()
}

fn run(out: &Path, seed: u64, rest: &[&str]) -> Vec<PathBuf> {
    execute(&cli(out, seed, rest)).unwrap()
}

fn run_dir(out: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    v.sort();
    v
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn run_dir_is_hash_plus_seed() {
    let out = tempfile::tempdir().unwrap();
    run(out.path(), 4, &["gen"]);
    run(out.path(), 9, &["gen"]);
    let dirs = run_dir(out.path());
    assert_eq!(dirs.len(), 2);
    let names: Vec<String> = dirs.iter().map(|d| d.file_name().unwrap().to_string_lossy().into_owned()).collect();
    let (h4, s4) = names[0].split_once('-').unwrap();
    let (h9, s9) = names[1].split_once('-').unwrap();
    assert_eq!(h4, h9);
    assert_eq!(h4.len(), 12);
    assert_eq!((s4, s9), ("4", "9"));
    assert!(dirs[0].join("config.toml").exists());
    let train = read_json(&dirs[0].join("train.json"));
    assert_eq!(train["provenance"]["run"]["seed"], 4);
    assert_eq!(train["provenance"]["run"]["config_hash"], h4);
}

#[test]
fn stats_on_hand_annotations() {
    let out = tempfile::tempdir().unwrap();
    let file = out.path().join("hand.json");
    let bbox = [10.0, 10.0, 5.0, 5.0];
    let ann = |img: &str, c: i64| serde_json::json!({"image_id": img, "category_id": c, "bbox": bbox});
    let doc = serde_json::json!({
        "images": [
            {"id": "a", "width": 64, "height": 64},
            {"id": "b", "width": 64, "height": 64},
            {"id": "c", "width": 64, "height": 64},
        ],
        "annotations": [ann("a", 1), ann("a", 2), ann("b", 1), ann("b", 3), ann("c", 1), ann("c", 2)],
        "categories": (0..4).map(|i| serde_json::json!({"id": i, "name": format!("k{i}")})).collect::<Vec<_>>(),
    });
    std::fs::write(&file, doc.to_string()).unwrap();
    let paths = run(out.path(), 1, &["stats", "--corpus", file.to_str().unwrap()]);
    let stats = CooccurrenceStats::load(&paths[0]).unwrap();
    assert_eq!(stats.counts.get(1, 2), 2);
    assert_eq!(stats.normalized_count.get(1, 2), 1.0 / 3.0);
    assert_eq!(stats.normalized_count.get(2, 1), 0.5);
    assert_eq!(stats.tanh_pmi.get(1, 2), 0.0);
    let dir = paths[0].parent().unwrap();
    for m in ["normalized_count", "pearson", "tanh_pmi"] {
        assert!(dir.join(format!("stats-{m}.csv")).exists(), "{m} csv");
    }
}

#[test]
fn failure_leaves_marker_and_one_line_error() {
    let out = tempfile::tempdir().unwrap();
    let c = cli(out.path(), 1, &["eval"]);
    let err = execute(&c).unwrap_err();
    let line = error_line("eval", &err);
    assert!(!line.contains('\n'));
    let v: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("not found"));
    let dir = &run_dir(out.path())[0];
    assert!(dir.join("eval.incomplete").exists());

    let code = main_with_args(["holi", "--out", out.path().to_str().unwrap(), "eval"]);
    assert_eq!(code, 1);
    assert_eq!(main_with_args(["holi", "no-such-command"]), 2);
    assert_eq!(main_with_args(["holi", "--seed", "x", "gen"]), 2);
}

#[test]
fn train_eval_debug_and_report() {
    let out = tempfile::tempdir().unwrap();
    for cmd in [&["train"][..], &["eval"], &["eval", "--ablate", "none"], &["debug-context", "--scene", "1"], &["debug-attn"]] {
        run(out.path(), 2, cmd);
    }
    let dir = run_dir(out.path()).remove(0);
    assert!(!std::fs::read_dir(&dir).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "incomplete")));

    let metrics = std::fs::read_to_string(dir.join("train/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    for k in ["total", "cls", "l1", "giou", "lr", "grad_norm"] {
        assert!(first[k].as_f64().unwrap().is_finite(), "{k}");
    }

    let full = read_json(&dir.join("eval-co+pos+kp.json"));
    let none = read_json(&dir.join("eval-none.json"));
    assert_eq!(full["checkpoint"], "train/model.bin");
    assert_eq!(full["corpus_checksum"], none["corpus_checksum"]);
    assert_eq!(full["provenance"]["seed"], 2);

    let ctx = read_json(&dir.join("debug-context-1.json"));
    // smoke model has 3 decoder layers, context on the top three
    let layers = ctx["layers"].as_array().unwrap();
    assert!(!layers.is_empty());
    let n = layers[0]["n"].as_u64().unwrap() as usize;
    assert_eq!(layers[0]["R_P"]["data"].as_array().unwrap().len(), n * n * 4);
    let attn = read_json(&dir.join("debug-attn-0.json"));
    assert!(attn["layers"].as_array().unwrap().iter().any(|l| l["relation_weights"].is_object()));

    let inputs = [dir.join("eval-none.json"), dir.join("eval-co+pos+kp.json")];
    let args: Vec<&str> = inputs.iter().map(|p| p.to_str().unwrap()).collect();
    let paths = run(out.path(), 2, &[&["report"][..], &args].concat());
    let table = std::fs::read_to_string(&paths[0]).unwrap();
    assert!(table.contains("none") && table.contains("co+pos+kp"));
    assert!(std::fs::read_to_string(&paths[2]).unwrap().starts_with("<svg"));
}

#[test]
fn report_refuses_mixed_corpora() {
    let out = tempfile::tempdir().unwrap();
    let mut evals = Vec::new();
    for seed in [5, 6] {
        run(out.path(), seed, &["train"]);
        evals.extend(run(out.path(), seed, &["eval"]));
    }
    let args: Vec<&str> = evals.iter().map(|p| p.to_str().unwrap()).collect();
    let err = execute(&cli(out.path(), 5, &[&["report"][..], &args].concat())).unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(err.to_string().contains("corpus"), "{err}");
}

#[test]
fn ablate_set_trains_baseline_plus_each_branch() {
    let out = tempfile::tempdir().unwrap();
    run(out.path(), 3, &["ablate", "--set", "co,pos,kp"]);
    let dir = run_dir(out.path()).remove(0);
    for tag in ["none", "co", "pos", "kp"] {
        let r = read_json(&dir.join(format!("ablate/{tag}/eval.json")));
        assert_eq!(r["label"], tag);
        assert!(dir.join(format!("ablate/{tag}/model.bin")).exists());
    }
    let report = read_json(&dir.join("ablate/report.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn gradcheck_command_passes() {
    let out = tempfile::tempdir().unwrap();
    let paths = run(out.path(), 1, &["gradcheck"]);
    let doc = read_json(&paths[0]);
    assert_eq!(doc["pass"], true);
    assert!(doc["primitive_max_rel_error"].as_f64().unwrap() < 1e-5);
    assert!(doc["end_to_end"]["max_rel_error"].as_f64().unwrap() < 1e-4);
}
