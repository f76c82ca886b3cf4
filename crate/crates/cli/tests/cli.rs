use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairkb"))
        .args(args)
        .env_remove("PAIRKB_CONFIG")
        .env_remove("PAIRKB_DATA_DIR")
        .env_remove("PAIRKB_ENCODER_URL")
        .output()
        .unwrap()
}

fn json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn top_ids(v: &Value) -> Vec<u64> {
    v["hits"].as_array().unwrap().iter().map(|h| h["id"].as_u64().unwrap()).collect()
}

#[test]
fn help_lists_commands() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["build-index", "retrieve", "refine", "eval", "sweep", "classify", "curriculum", "gen-fixture", "serve"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec!["retrieve", "--kb", "x.pkb", "--strategy", "nearest", "--query", "[1,0]"],
        vec!["retrieve", "--kb", "x.pkb", "--strategy", "pair_to_pair", "--W", "-0.1", "--query", "[1,0]"],
        vec!["retrieve", "--kb", "x.pkb", "--strategy", "audio_to_audio", "--k", "0", "--query", "[1,0]"],
        vec!["gen-fixture", "--toy", "--n", "5", "--out", "x.pkb"],
        vec!["frobnicate"],
    ] {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_1() {
    let toy = fixture("toy.pkb");
    let out = run(&["retrieve", "--kb", &toy, "--strategy", "audio_to_audio", "--query", "[1,0,0]"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    // a weight on a single-modality strategy
    let out = run(&["retrieve", "--kb", &toy, "--strategy", "audio_to_audio", "--W", "0.5", "--query", "[1,0]"]);
    assert_eq!(out.status.code(), Some(1));
    // pair strategy without a text query
    let out = run(&["retrieve", "--kb", &toy, "--strategy", "pair_to_pair", "--query", "[1,0]"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn retrieve_with_exclusions_and_text_flag() {
    let toy = fixture("toy.pkb");
    let v = json(&["retrieve", "--kb", &toy, "--strategy", "audio_to_audio", "--k", "2", "--query", "[1,0]", "--exclude", "1"]);
    assert_eq!(top_ids(&v), [3, 2]);
    let v = json(&["retrieve", "--kb", &toy, "--strategy", "pair_to_pair", "--W", "0.5", "--k", "1", "--query", "[1,0]", "--text", "[0,1]"]);
    assert_eq!(top_ids(&v), [3]);
    assert_eq!(v["W"], 0.5);
    assert_eq!(v["hits"][0]["caption"], "dog barking in the rain");
}

#[test]
fn retrieve_writes_context() {
    let dir = tempfile::tempdir().unwrap();
    let ctx_path = dir.path().join("ctx.json");
    json(&[
        "retrieve", "--kb", &fixture("toy.pkb"), "--strategy", "pair_to_pair", "--k", "3",
        "--query", &fixture("query.pkb"), "--context-out", ctx_path.to_str().unwrap(),
    ]);
    let ctx: Value = serde_json::from_slice(&std::fs::read(&ctx_path).unwrap()).unwrap();
    let demos = ctx["demonstrations"].as_array().unwrap();
    assert_eq!(demos.len(), 3);
    assert_eq!(ctx["query_audio_ref"], "clip-1");
    // most similar demonstration sits next to the query
    assert_eq!(demos[2]["audio_ref"], "clip-3");
}

#[test]
fn eval_reports_similarity() {
    let v = json(&[
        "eval", "--kb", &fixture("toy.pkb"), "--queries", &fixture("queries.jsonl"),
        "--strategy", "audio_to_audio", "--k", "1", "--metrics", "recall_at_k,accuracy", "--similarity",
    ]);
    assert_eq!(v["metrics"]["recall_at_k"], 0.5);
    assert_eq!(v["metrics"]["accuracy"], 0.5);
    assert_eq!(v["n_queries"], 2);
    assert_eq!(v["similarity"]["mean_audio_sim"], 1.0);
}

#[test]
fn classify_and_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let classes = dir.path().join("classes.jsonl");
    let queries = dir.path().join("queries.jsonl");
    std::fs::write(
        &classes,
        "{\"id\":1,\"text\":\"dog\",\"emb\":[1,0]}\n{\"id\":2,\"text\":\"rain\",\"emb\":[0,1]}\n",
    )
    .unwrap();
    std::fs::write(
        &queries,
        "{\"id\":10,\"audio\":[1,0],\"gen_text\":[1,0],\"label\":1}\n{\"id\":11,\"audio\":[0.6,0.8],\"gen_text\":[1,0],\"label\":2}\n",
    )
    .unwrap();
    let v = json(&["classify", "--classes", classes.to_str().unwrap(), "--queries", queries.to_str().unwrap()]);
    let preds: Vec<u64> = v["predictions"].as_array().unwrap().iter().map(|p| p["class_id"].as_u64().unwrap()).collect();
    assert_eq!(preds, [1, 1]);
    assert_eq!(v["accuracy"], 0.5);
}

#[test]
fn curriculum_writes_two_phases() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "curriculum", "--kb", &fixture("toy.pkb"), "--trainset", &fixture("train.pkb"),
        "--max-k", "2", "--seed", "3", "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let p1 = std::fs::read_to_string(dir.path().join("phase1.jsonl")).unwrap();
    let p2 = std::fs::read_to_string(dir.path().join("phase2.jsonl")).unwrap();
    let l1: Value = serde_json::from_str(p1.lines().next().unwrap()).unwrap();
    let l2: Value = serde_json::from_str(p2.lines().next().unwrap()).unwrap();
    assert_eq!(l1["k"], 0);
    let k = l2["k"].as_u64().unwrap();
    assert!((1..=2).contains(&k));
    assert_eq!(l2["demonstrations"].as_array().unwrap().len() as u64, k);
}

#[test]
fn config_file_sets_data_dir_and_weight() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: PathBuf = dir.path().join("pairkb.toml");
    std::fs::write(&cfg, format!("data_dir = {:?}\ndefault_w = 0.0\n", fixture(""))).unwrap();
    let v = json(&[
        "--config", cfg.to_str().unwrap(), "retrieve", "--kb", "toy.pkb",
        "--strategy", "pair_to_pair", "--k", "1", "--query", "[1,0]", "--text", "[0,1]",
    ]);
    assert_eq!(top_ids(&v), [2]);
    assert_eq!(v["W"], 0.0);

    std::fs::write(&cfg, "default_w = 2.0\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "gen-fixture", "--toy", "--out", "unused.pkb"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn clustered_index_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("syn.pkb");
    let idx = dir.path().join("syn.audio.pkix");
    run(&["gen-fixture", "--n", "300", "--d-audio", "8", "--d-text", "8", "--seed", "2", "--out", kb.to_str().unwrap()]);
    let tidx = dir.path().join("syn.text.pkix");
    for (field, path) in [("audio", &idx), ("text", &tidx)] {
        let out = run(&[
            "build-index", "--kb", kb.to_str().unwrap(), "--field", field, "--kind", "clustered",
            "--clusters", "9", "--probe", "9", "--out", path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let q = "[1,0,0,0,0,0,0,0]";
    let args = ["retrieve", "--kb", kb.to_str().unwrap(), "--strategy", "pair_to_pair", "--k", "5", "--query", q, "--text", q];
    let with_index = json(&[&args[..], &["--audio-index", idx.to_str().unwrap(), "--text-index", tidx.to_str().unwrap()]].concat());
    let scan = json(&args);
    assert_eq!(with_index["hits"], scan["hits"]);
}
