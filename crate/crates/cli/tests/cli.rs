use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rignn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rignn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Five users, two weekly sessions each, over items a..e.
fn write_reviews(path: &Path) {
    let day = 86_400;
    let mut lines = Vec::new();
    for u in 0..5 {
        for (w, items) in [["a", "b", "c"], ["c", "d", "e"]].iter().enumerate() {
            for (j, item) in items.iter().enumerate() {
                let t = 7 * day * (10 + 3 * w as i64 + u) + j as i64 * 3600;
                lines.push(format!(
                    r#"{{"reviewerID":"u{u}","asin":"{item}","unixReviewTime":{t},"reviewText":"{item} is a fine thing"}}"#
                ));
            }
        }
    }
    lines.push("not json".into());
    std::fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn missing_subcommand_is_usage_error() {
    let out = rignn(&[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(&rignn(&["stats", "--bogus"])), 1);
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&rignn(&["--help"])), 0);
    assert_eq!(code(&rignn(&["--version"])), 0);
    assert_eq!(code(&rignn(&["train", "--help"])), 0);
}

#[test]
fn missing_bundle_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rignn(&["stats", "--bundle", s(&dir.path().join("nothing"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn ingest_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("reviews.json");
    write_reviews(&input);
    let bundle = dir.path().join("bundle");
    let out = rignn(&[
        "-q",
        "ingest",
        "--input",
        s(&input),
        "--out",
        s(&bundle),
        "--min-count",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(bundle.join("manifest.json").is_file());

    let out = rignn(&["-q", "stats", "--bundle", s(&bundle)]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["interactions"], 30);
    assert_eq!(report["malformed_lines"], 1);
    assert_eq!(report["items"], 5);
    assert_eq!(report["sessions_built"], 10);
}

#[test]
fn bad_config_key_and_value_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = rignn(&["-q", "synth", "--set", "session_count=50", "--out", s(&data)]);
    assert_eq!(code(&out), 0);
    let run = dir.path().join("run");
    assert_eq!(
        code(&rignn(&[
            "-q",
            "train",
            "--bundle",
            s(&data),
            "--set",
            "bogus=1",
            "--out",
            s(&run)
        ])),
        1
    );
    assert_eq!(
        code(&rignn(&[
            "-q",
            "train",
            "--bundle",
            s(&data),
            "--set",
            "dropout=1.5",
            "--out",
            s(&run)
        ])),
        1
    );
    assert_eq!(
        code(&rignn(&[
            "-q",
            "train",
            "--bundle",
            s(&data),
            "--set",
            "lr",
            "--out",
            s(&run)
        ])),
        1
    );
    assert_eq!(
        code(&rignn(&["-q", "synth", "--set", "nonsense=3", "--out", s(&data)])),
        1
    );
}

#[test]
fn config_file_is_overridden_by_set() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&rignn(&["-q", "synth", "--set", "session_count=60", "--out", s(&data)])),
        0
    );
    let cfg = dir.path().join("model.txt");
    std::fs::write(
        &cfg,
        "d = 6\nd_w = 6\nh = 1\nd_q = 3\nd_k = 3\nd_v = 3\nepochs = 3\nseed = 4\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = rignn(&[
        "-q",
        "train",
        "--bundle",
        s(&data),
        "--config",
        s(&cfg),
        "--set",
        "epochs=0",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("initial.ckpt").is_file());
    assert!(!run.join("best.ckpt").exists());
    let resolved = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("epochs = 0"));
    assert!(resolved.contains("d = 6"));
    assert!(resolved.contains("seed = 4"));
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["seeds"][0], 4);
    assert_eq!(manifest["config"]["epochs"], "0");
}

#[test]
fn synth_topics_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = rignn(&[
        "-q",
        "synth",
        "--set",
        "session_count=150",
        "--set",
        "seed=2",
        "--out",
        s(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["bundle.json", "ground_truth.json", "recovery.json", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let recovery = read_json(&data.join("recovery.json"));
    assert_eq!(recovery["rig"]["recall"], 1.0);

    let out = rignn(&["-q", "topics", "--bundle", s(&data), "--topics", "8", "--sweeps", "30"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("topics.json").is_file());
    assert!(data.join("topics.manifest.json").is_file());

    let graph = dir.path().join("graph.json");
    let out = rignn(&[
        "-q",
        "graph",
        "--bundle",
        s(&data),
        "--session",
        "0",
        "--out",
        s(&graph),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let g = read_json(&graph);
    assert!(!g["aig"].as_array().unwrap().is_empty());

    let run = dir.path().join("run");
    let small = [
        "--set", "d=8", "--set", "d_w=8", "--set", "h=1", "--set", "d_q=4", "--set", "d_k=4", "--set", "d_v=4",
        "--set", "epochs=2", "--set", "lr=0.01",
    ];
    let mut args = vec!["-q", "train", "--bundle", s(&data), "--out", s(&run)];
    args.extend(small);
    let out = rignn(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["MRR@20"].is_number());

    let metrics = dir.path().join("eval.json");
    let out = rignn(&[
        "-q",
        "eval",
        "--bundle",
        s(&data),
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--out",
        s(&metrics),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_json(&metrics);
    for ranker in ["rignn", "s-pop", "s-knn"] {
        let block = &m["results"][ranker];
        let p = block["P@20"].as_f64().unwrap();
        let mrr = block["MRR@20"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&p) && mrr <= p, "{ranker}");
    }
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(m["config_hash"], manifest["config_hash"]);

    let again = dir.path().join("eval2.json");
    let out = rignn(&[
        "-q",
        "eval",
        "--bundle",
        s(&data),
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--out",
        s(&again),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(read_json(&again)["results"], m["results"]);

    let ablation = dir.path().join("ablation.json");
    let mut args = vec![
        "-q",
        "ablate",
        "--bundle",
        s(&data),
        "--seeds",
        "2",
        "--out",
        s(&ablation),
    ];
    args.extend(small);
    args.extend(["--set", "epochs=1"]);
    let out = rignn(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = read_json(&ablation);
    assert_eq!(a["records"].as_array().unwrap().len(), 8);
    assert_eq!(a["summary"]["no-ril"]["paired_vs_full"]["n"], 2);
}

#[test]
fn inline_graph_filters_cross_topic_edges() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("g.json");
    let out = rignn(&[
        "-q",
        "graph",
        "--items",
        "v1,v2,v3",
        "--item-topics",
        "0,1,0",
        "--out",
        s(&out_path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let g = read_json(&out_path);
    let rig = g["rig"].as_array().unwrap();
    assert_eq!(rig.len(), 1);
    assert_eq!(
        (rig[0]["from"].as_str(), rig[0]["to"].as_str()),
        (Some("v1"), Some("v3"))
    );
    assert_eq!(g["aig"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("g.manifest.json").is_file());

    let bad = rignn(&[
        "-q",
        "graph",
        "--items",
        "a,b",
        "--item-topics",
        "0",
        "--out",
        s(&out_path),
    ]);
    assert_eq!(code(&bad), 1);
}
