use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn him(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_him"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn synth(dir: &Path) {
    let o = him(&["synth", "--branching", "3", "--min-branching", "2", "--depth", "4", "--seed", "7", "--out", "data"], dir);
    assert_eq!(json(&o)["entities"], 38);
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Value {
    let mut args = vec!["train", "--data", "data", "--out", out, "--epochs", "2"];
    args.extend_from_slice(extra);
    json(&him(&args, dir))
}

fn metrics(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let o = him(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    let flags: [(&str, &[&str]); 6] = [
        ("synth", &["--branching", "--depth", "--seed", "--out"]),
        ("pretrain", &["--corpus", "--config", "--seed"]),
        ("train", &["--manifold", "--task", "--fixed-curvature", "--resume", "--seed", "--config"]),
        ("eval", &["--checkpoint", "--pairs", "--val-pairs", "--threshold"]),
        ("hyperbolicity", &["--quadruples", "--seed", "--exact"]),
        ("embed", &["--checkpoint", "--out"]),
    ];
    for (cmd, wanted) in flags {
        let o = him(&[cmd, "--help"], dir.path());
        assert_eq!(code(&o), 0, "{cmd}");
        let text = String::from_utf8_lossy(&o.stdout);
        for f in wanted {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let o = him(&["synth", "--branching", "3", "--depth", "5", "--seed", "7", "--out", out], dir.path());
        assert_eq!(code(&o), 0);
        let e = std::fs::read(dir.path().join(out).join("entities.tsv")).unwrap();
        let g = std::fs::read(dir.path().join(out).join("edges.tsv")).unwrap();
        (e, g)
    };
    assert_eq!(run("a"), run("b"));
    assert_eq!(code(&him(&["synth", "--depth", "1", "--out", "c"], dir.path())), 2);
    assert_eq!(code(&him(&["synth", "--branching", "2", "--min-branching", "3", "--out", "c"], dir.path())), 2);
    assert_eq!(code(&him(&["synth", "--bogus"], dir.path())), 2);
}

#[test]
fn hyperbolicity_reports() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let r = json(&him(&["hyperbolicity", "--data", "data", "--quadruples", "1234", "--seed", "3"], dir.path()));
    assert_eq!(r["quadruples"], 1234);
    assert_eq!(r["mean_delta"], 0.0);
    assert_eq!(r["mean_normalized_delta"], 0.0);

    // a 4-cycle through an extra parent edge is no longer a tree
    std::fs::write(dir.path().join("data/edges.tsv"), "n1\tn0\nn2\tn0\nn3\tn1\nn3\tn2\n").unwrap();
    std::fs::write(dir.path().join("data/entities.tsv"), "n0\ta\nn1\tb\nn2\tc\nn3\td\n").unwrap();
    let a = him(&["hyperbolicity", "--data", "data", "--quadruples", "500", "--seed", "9"], dir.path());
    let b = him(&["hyperbolicity", "--data", "data", "--quadruples", "500", "--seed", "9"], dir.path());
    assert_eq!(a.stdout, b.stdout);
    let exact = json(&him(&["hyperbolicity", "--data", "data", "--exact"], dir.path()));
    assert_eq!(exact["mean_delta"], 1.0);

    assert_eq!(code(&him(&["hyperbolicity", "--data", "missing"], dir.path())), 1);
}

#[test]
fn train_eval_embed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let summary = train(d, "run", &["--manifold", "lorentz", "--seed", "4"]);
    assert_eq!(summary["epochs"], 2);
    for f in ["model.ckpt", "metrics.jsonl", "config.json", "val_pairs.tsv", "test_pairs.tsv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    let eval = ["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--pairs", "run/test_pairs.tsv"];
    let with_val = [&eval[..], &["--val-pairs", "run/val_pairs.tsv"]].concat();
    let a = him(&with_val, d);
    let b = him(&with_val, d);
    assert_eq!(a.stdout, b.stdout);
    let report = json(&a);
    let mut keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["f1", "n_neg", "n_pos", "per_hop", "precision", "recall", "task", "threshold"]);
    assert_eq!(report["task"], "mixed");

    let fixed = json(&him(&[&eval[..], &["--threshold", "0.5"]].concat(), d));
    assert_eq!(fixed["threshold"], 0.5);
    assert_eq!(code(&him(&eval, d)), 2);
    assert_eq!(code(&him(&[&eval[..], &["--threshold", "1", "--manifold", "poincare"]].concat(), d)), 1);

    std::fs::write(d.join("bad.ckpt"), b"HIMCKPT1 definitely not a checkpoint").unwrap();
    let bad = ["eval", "--checkpoint", "bad.ckpt", "--data", "data", "--pairs", "run/test_pairs.tsv", "--threshold", "1"];
    assert_eq!(code(&him(&bad, d)), 1);

    let emb = json(&him(&["embed", "--checkpoint", "run/model.ckpt", "--data", "data", "--out", "e.tsv"], d));
    assert_eq!(emb["rows"], 38);
    let text = std::fs::read_to_string(d.join("e.tsv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(&header[..4], ["#id", "label", "depth", "h_norm"]);
    // Lorentz points carry the time coordinate on top of the 64 model dimensions
    assert_eq!(header.len() - 4, 65);
    assert_eq!(text.lines().count(), 39);
}

#[test]
fn euclidean_curvature_is_constant_and_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    train(d, "euc", &["--manifold", "euclidean"]);
    let log = metrics(&d.join("euc/metrics.jsonl"));
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|m| m["c"] == 1.0 && m["gamma"] == log[0]["gamma"]));

    let first = train(d, "run", &["--manifold", "poincare", "--fixed-curvature", "-2"]);
    let log = metrics(&d.join("run/metrics.jsonl"));
    assert!(log.iter().all(|m| m["c"] == 0.5));
    let more = json(&him(&["train", "--data", "data", "--out", "run", "--resume", "run/model.ckpt", "--epochs", "3"], d));
    assert_eq!(more["epochs"], 3);
    let per_epoch = first["global_step"].as_u64().unwrap() / 2;
    assert_eq!(more["global_step"].as_u64().unwrap(), 3 * per_epoch);
    assert_eq!(metrics(&d.join("run/metrics.jsonl")).len(), 3);
}

#[test]
fn same_seed_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    train(d, "a", &["--seed", "5", "--task", "multi"]);
    train(d, "b", &["--seed", "5", "--task", "multi"]);
    let strip = |mut v: Vec<Value>| {
        for m in &mut v {
            m.as_object_mut().unwrap().remove("wallclock_s");
        }
        v
    };
    assert_eq!(strip(metrics(&d.join("a/metrics.jsonl"))), strip(metrics(&d.join("b/metrics.jsonl"))));
    assert_eq!(
        std::fs::read(d.join("a/test_pairs.tsv")).unwrap(),
        std::fs::read(d.join("b/test_pairs.tsv")).unwrap()
    );
}

#[test]
fn configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    std::fs::write(d.join("typo.json"), r#"{"train": {"epoch": 2}}"#).unwrap();
    let o = him(&["train", "--data", "data", "--out", "x", "--config", "typo.json"], d);
    assert_eq!(code(&o), 1);

    std::fs::write(d.join("ok.json"), r#"{"train": {"epochs": 1, "batch_size": 8}}"#).unwrap();
    train(d, "y", &["--config", "ok.json", "--batch-size", "16"]);
    let resolved: Value = serde_json::from_str(&std::fs::read_to_string(d.join("y/config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["batch_size"], 16);
    assert_eq!(resolved["train"]["epochs"], 2);

    assert_eq!(code(&him(&["train", "--data", "nowhere", "--out", "z"], d)), 1);
    assert_eq!(code(&him(&["train", "--data", "data", "--out", "z", "--fixed-curvature", "1"], d)), 2);
    assert_eq!(code(&him(&["train", "--data", "data", "--out", "z", "--manifold", "sphere"], d)), 2);
}

#[test]
fn divergence_exits_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let o = him(&["train", "--data", "data", "--out", "div", "--lr", "1e9"], d);
    assert_eq!(code(&o), 3);
    let (model, state) = him::training::load_checkpoint(&d.join("div/model.ckpt")).unwrap();
    assert!(model.named().iter().all(|(_, t)| t.all_finite()));
    assert!(state.is_some());
}

#[test]
fn pretrain_then_train() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let words = ["oak", "elm", "ash", "fir", "yew", "bay", "box", "fig", "lime", "pine"];
    let mut corpus = String::new();
    for i in 0..100 {
        let (a, b) = (words[i % 10], words[(i / 10) % 10]);
        corpus.push_str(&format!("{{\"text_a\": \"{a} near {b}\", \"text_b\": \"{a} by the {b}\"}}\n"));
    }
    std::fs::write(d.join("pairs.jsonl"), corpus).unwrap();
    let out = json(&him(
        &["pretrain", "--corpus", "pairs.jsonl", "--out", "pre.ckpt", "--epochs", "4", "--lr", "3e-3"],
        d,
    ));
    let losses: Vec<f64> = out["losses"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(losses.len(), 4);
    assert!(losses[3] < losses[0], "{losses:?}");

    let summary = train(d, "ft", &["--init", "pre.ckpt"]);
    assert_eq!(summary["epochs"], 2);
    assert_eq!(code(&him(&["pretrain", "--corpus", "none.jsonl", "--out", "p.ckpt"], d)), 1);
}
