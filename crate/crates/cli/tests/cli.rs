use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const COMMANDS: [&str; 8] = ["gen", "encode", "train", "components", "recon", "eval", "edit", "serve"];

fn meshmodes(args: &[&str]) -> Output {
    meshmodes_env(args, &[])
}

fn meshmodes_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_meshmodes"));
    cmd.args(args).env_remove("MESHMODES_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny bar dataset, its cache and a config small enough to train in
/// well under a second.
struct Workspace {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (config, data) = (dir.path().join("cfg.json"), dir.path().join("data"));
        let ws = Self { dir, config, data };
        let cfg = json!({
            "bar": {"segments": 8, "ring_vertices": 6},
            "count": 12,
            "kz0": 3,
            "kz1": 2,
            "epochs": 40,
            "split": "every-nth:2",
        });
        std::fs::write(&ws.config, cfg.to_string()).unwrap();
        ok(meshmodes(&["gen", "--config", s(ws.config()), "--out", s(ws.data())]));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> &Path {
        &self.config
    }

    fn data(&self) -> &Path {
        &self.data
    }

    fn train(&self, checkpoint: &str, extra: &[&str]) -> PathBuf {
        let ckpt = self.path(checkpoint);
        let mut args = vec!["train", "--config", s(self.config()), "--data", s(self.data()), "--checkpoint", s(&ckpt)];
        args.extend_from_slice(extra);
        ok(meshmodes(&args));
        ckpt
    }
}

#[test]
fn help_documents_every_command() {
    let out = ok(meshmodes(&["--help"]));
    let text = String::from_utf8_lossy(&out.stdout);
    for c in COMMANDS {
        assert!(text.contains(c), "{c}");
    }
    assert!(text.contains("MESHMODES_THREADS") && text.contains("Exit codes"));
    let flags: &[(&str, &[&str])] = &[
        ("gen", &["--config", "--out", "--count", "--seed", "params.json"]),
        ("encode", &["--config", "--data", "--cache"]),
        (
            "train",
            &["--config", "--data", "--cache", "--checkpoint", "--split", "--epochs", "--seed", "--log", "recon0"],
        ),
        ("components", &["--config", "--checkpoint", "--out", "index.json", "similarity.csv"]),
        ("recon", &["--config", "--data", "--checkpoint", "--split", "--out"]),
        ("eval", &["--config", "--data", "--checkpoint", "--split", "--recon", "--format", "e_rms"]),
        ("edit", &["--config", "--checkpoint", "--constraints", "--weights", "--out", "\"vertex\""]),
        ("serve", &["--config", "--checkpoint", "--port", "503"]),
    ];
    for (c, expected) in flags {
        let out = ok(meshmodes(&[c, "--help"]));
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in *expected {
            assert!(text.contains(flag), "{c} --help lacks {flag}");
        }
    }
}

#[test]
fn pipeline_outputs() {
    let ws = Workspace::new();
    let shapes: Vec<_> = std::fs::read_dir(ws.data()).unwrap().filter_map(|e| e.ok()).collect();
    assert_eq!(shapes.iter().filter(|e| e.path().extension().is_some_and(|x| x == "obj")).count(), 12);
    assert!(ws.data().join("params.json").is_file());

    let cache = ws.path("features.bin");
    ok(meshmodes(&["encode", "--data", s(ws.data()), "--cache", s(&cache)]));
    assert!(cache.is_file());

    let ckpt = ws.train("model.ckpt", &["--cache", s(&cache)]);
    let log = std::fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,recon0,sparsity0,nontrivial0,recon_second,sparsity_second,nontrivial_second,total"
    );
    assert!(lines.count() > 0);
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(ckpt.with_extension("json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["epochs"], 40);
    assert_eq!(meta["train"].as_array().unwrap().len(), 6);

    // the cache and a fresh encoding give the same model
    let fresh = ws.train("fresh.ckpt", &[]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&fresh).unwrap());

    let comps = ws.path("components");
    ok(meshmodes(&["components", "--checkpoint", s(&ckpt), "--out", s(&comps)]));
    let index: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(comps.join("index.json")).unwrap()).unwrap();
    assert_eq!(index.len(), 3 + 3 * 2);
    for entry in &index {
        match entry["file"].as_str() {
            Some(file) => {
                assert!(entry["kept"].as_bool().unwrap());
                assert!(comps.join(file).is_file());
            }
            None => assert!(!entry["kept"].as_bool().unwrap()),
        }
    }
    let sim = std::fs::read_to_string(comps.join("similarity.csv")).unwrap();
    assert_eq!(sim.lines().count(), 4);

    let recon = ws.path("recon");
    ok(meshmodes(&[
        "recon",
        "--config",
        s(ws.config()),
        "--data",
        s(ws.data()),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&recon),
    ]));
    let mut names: Vec<String> =
        std::fs::read_dir(&recon).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["bar_001.obj", "bar_003.obj", "bar_005.obj", "bar_007.obj", "bar_009.obj", "bar_011.obj"]);

    // evaluating the written reconstructions matches evaluating through the model
    let report = ws.path("report.json");
    let base = ["eval", "--config", s(ws.config()), "--data", s(ws.data()), "--checkpoint", s(&ckpt)];
    let direct = ok(meshmodes(&[&base[..], &["--format", "json", "--out", s(&report)]].concat()));
    let direct: Value = serde_json::from_slice(&direct.stdout).unwrap();
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(direct, saved);
    let via_files = ok(meshmodes(&[&base[..], &["--format", "json", "--recon", s(&recon)]].concat()));
    let via_files: Value = serde_json::from_slice(&via_files.stdout).unwrap();
    assert_eq!(direct["shapes"].as_array().unwrap().len(), 6);
    let (a, b) = (direct["e_rms"].as_f64().unwrap(), via_files["e_rms"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-6 * a.max(1e-12), "{a} vs {b}");

    let table = ok(meshmodes(&base));
    assert!(String::from_utf8_lossy(&table.stdout).contains("sted_simplified"));
}

#[test]
fn eval_of_ground_truth_is_zero() {
    let ws = Workspace::new();
    let out = ok(meshmodes(&["eval", "--data", s(ws.data()), "--recon", s(ws.data()), "--format", "json"]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["e_rms"], 0.0);
    assert_eq!(report["percentage"], 0.0);
    assert_eq!(report["shapes"].as_array().unwrap().len(), 12);
}

#[test]
fn training_is_repeatable_across_thread_counts() {
    let ws = Workspace::new();
    let run = |name: &str, threads: &str| {
        let ckpt = ws.path(name);
        ok(meshmodes_env(
            &["train", "--config", s(ws.config()), "--data", s(ws.data()), "--checkpoint", s(&ckpt), "--seed", "7"],
            &[("MESHMODES_THREADS", threads)],
        ));
        (std::fs::read(&ckpt).unwrap(), std::fs::read(ckpt.with_extension("csv")).unwrap())
    };
    let first = run("a.ckpt", "1");
    assert_eq!(first, run("b.ckpt", "1"));
    assert_eq!(first, run("c.ckpt", "2"));
    let other = ws.train("d.ckpt", &["--seed", "8"]);
    assert_ne!(first.0, std::fs::read(other).unwrap());
}

#[test]
fn edit_weights_and_constraints() {
    let ws = Workspace::new();
    let ckpt = ws.train("model.ckpt", &[]);
    let weights = ws.path("weights.json");
    std::fs::write(&weights, json!([{"level": 1, "ae": 0, "index": 1, "value": 2.0}]).to_string()).unwrap();
    let mesh = ws.path("edited.obj");
    let out = ok(meshmodes(&["edit", "--checkpoint", s(&ckpt), "--weights", s(&weights), "--out", s(&mesh)]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["weights"][0]["value"], 2.0);
    assert!(std::fs::read_to_string(&mesh).unwrap().lines().any(|l| l.starts_with("f ")));

    // pinning vertices where the reference has them is solved by zero latents
    let reference = std::fs::read_to_string(ws.data().join("bar_000.obj")).unwrap();
    let positions: Vec<Vec<f64>> = reference
        .lines()
        .filter(|l| l.starts_with("v "))
        .map(|l| l.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect())
        .collect();
    let constraints: Vec<Value> =
        [5usize, 20, 40].iter().map(|&v| json!({"vertex": v, "target": positions[v]})).collect();
    let file = ws.path("constraints.json");
    std::fs::write(&file, Value::from(constraints).to_string()).unwrap();
    let out = ok(meshmodes(&["edit", "--checkpoint", s(&ckpt), "--constraints", s(&file), "--out", s(&mesh)]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["residual"].as_f64().unwrap() < 1e-6, "{report}");

    let out = meshmodes(&[
        "edit",
        "--checkpoint",
        s(&ckpt),
        "--weights",
        s(&weights),
        "--constraints",
        s(&file),
        "--out",
        s(&mesh),
    ]);
    assert_eq!(code(&out), 1);
    let bad = ws.path("bad_weights.json");
    std::fs::write(&bad, json!([{"level": 1, "ae": 0, "index": 99, "value": 1.0}]).to_string()).unwrap();
    assert_eq!(code(&meshmodes(&["edit", "--checkpoint", s(&ckpt), "--weights", s(&bad), "--out", s(&mesh)])), 2);
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    let missing = ws.path("missing");
    let cfg = s(ws.config());
    let data = s(ws.data());

    // usage
    assert_eq!(code(&meshmodes(&[])), 1);
    assert_eq!(code(&meshmodes(&["train", "--bogus"])), 1);
    assert_eq!(code(&meshmodes(&["train", "--data", data])), 1, "missing --checkpoint");
    assert_eq!(code(&meshmodes(&["train", "--split", "half", "--data", data])), 1);
    assert_eq!(code(&meshmodes(&["edit", "--checkpoint", "x", "--out", "y.obj"])), 1);
    let typo = ws.path("typo.json");
    std::fs::write(&typo, r#"{"epoch": 3}"#).unwrap();
    assert_eq!(code(&meshmodes(&["gen", "--config", s(&typo), "--out", s(&missing)])), 1);
    let bad_train = ws.path("bad_train.json");
    std::fs::write(&bad_train, r#"{"kz0": 0}"#).unwrap();
    let ckpt = ws.path("never.ckpt");
    assert_eq!(code(&meshmodes(&["train", "--config", s(&bad_train), "--data", data, "--checkpoint", s(&ckpt)])), 1);
    assert_eq!(code(&meshmodes_env(&["gen", "--config", cfg, "--out", s(&missing)], &[("MESHMODES_THREADS", "0")])), 1);
    assert!(!missing.exists(), "nothing is written on a usage error");

    // data
    assert_eq!(code(&meshmodes(&["encode", "--data", s(&missing), "--cache", s(&ws.path("c.bin"))])), 2);
    assert_eq!(
        code(&meshmodes(&["train", "--config", cfg, "--data", data, "--checkpoint", s(&ws.path("nodir/m.ckpt"))])),
        2
    );
    let corrupt = ws.path("corrupt.ckpt");
    std::fs::write(&corrupt, b"not a checkpoint").unwrap();
    assert_eq!(code(&meshmodes(&["components", "--checkpoint", s(&corrupt), "--out", s(&ws.path("comps"))])), 2);
    assert_eq!(code(&meshmodes(&["eval", "--data", data, "--checkpoint", s(&missing)])), 2);
    let broken = ws.path("broken");
    std::fs::create_dir(&broken).unwrap();
    std::fs::write(broken.join("a.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
    std::fs::write(broken.join("b.obj"), "v 0 0 0\nf 1 2 9\n").unwrap();
    assert_eq!(code(&meshmodes(&["encode", "--data", s(&broken), "--cache", s(&ws.path("c.bin"))])), 2);
    assert!(!ws.path("nodir").exists() && !ckpt.exists());

    // numerical
    let diverge = ws.path("diverge.json");
    std::fs::write(&diverge, json!({"kz0": 3, "kz1": 2, "epochs": 20, "learning_rate": 1e300}).to_string()).unwrap();
    let out = meshmodes(&["train", "--config", s(&diverge), "--data", data, "--checkpoint", s(&ws.path("nan.ckpt"))]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn commands_are_idempotent() {
    let ws = Workspace::new();
    let again = ws.path("again");
    ok(meshmodes(&["gen", "--config", s(ws.config()), "--out", s(&again)]));
    for entry in std::fs::read_dir(ws.data()).unwrap() {
        let p = entry.unwrap().path();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(again.join(p.file_name().unwrap())).unwrap());
    }
    let ckpt = ws.train("model.ckpt", &[]);
    let dirs = [ws.path("c1"), ws.path("c2")];
    for d in &dirs {
        ok(meshmodes(&["components", "--checkpoint", s(&ckpt), "--out", s(d)]));
    }
    for entry in std::fs::read_dir(&dirs[0]).unwrap() {
        let p = entry.unwrap().path();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dirs[1].join(p.file_name().unwrap())).unwrap());
    }
}
