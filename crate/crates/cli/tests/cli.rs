use std::path::Path;
use std::process::{Command, Output};

use mega_core::model::Ablation;
use mega_core::training::Checkpoint;

fn mega(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mega"))
        .args(args)
        .env_remove("MEGA_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mega(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a corpus and builds its graphs under `dir`.
fn prepare(dir: &Path) -> std::path::PathBuf {
    let (c, g) = (dir.join("c"), dir.join("g"));
    ok(&[
        "synth",
        "--methods",
        "50",
        "--apis",
        "30",
        "--pairs",
        "5",
        "--seed",
        "1",
        "--out",
        s(&c),
    ]);
    ok(&[
        "build-graphs",
        "--corpus",
        s(&c),
        "--epsilon",
        "3",
        "--buckets",
        "15",
        "--out",
        s(&g),
    ]);
    g
}

const QUICK: [&str; 8] = ["--dim", "8", "--set-size", "4", "--batch", "64", "--epochs", "2"];

#[test]
fn pipeline_writes_graph_files() {
    let dir = tempfile::tempdir().unwrap();
    let g = prepare(dir.path());
    for f in ["interaction.bin", "cooc.bin", "hier.bin", "bucketizer.json"] {
        assert!(g.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn manifest_echoes_training_flags() {
    let dir = tempfile::tempdir().unwrap();
    let g = prepare(dir.path());
    let m = dir.path().join("m.ckpt");
    let log = dir.path().join("train.jsonl");
    ok(&[
        "train",
        "--graphs",
        s(&g),
        "--dim",
        "8",
        "--hops",
        "2",
        "--set-size",
        "4",
        "--lr",
        "0.01",
        "--l2",
        "0.0001",
        "--batch",
        "32",
        "--epochs",
        "3",
        "--seed",
        "5",
        "--neg-ratio",
        "2",
        "--ablate",
        "no-hs",
        "--out",
        s(&m),
        "--log",
        s(&log),
    ]);
    let ck = Checkpoint::load(&m, None).unwrap();
    let mf = &ck.manifest;
    assert_eq!((mf.dim, mf.hops, mf.set_size), (8, 2, 4));
    assert_eq!((mf.lr, mf.l2), (0.01, 0.0001));
    assert_eq!((mf.batch, mf.epochs, mf.epoch, mf.seed, mf.neg_ratio), (32, 3, 3, 5, 2));
    assert_eq!((mf.buckets, mf.ablation), (15, Ablation::NoHs));

    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i + 1);
        assert!(l["loss"].as_f64().unwrap().is_finite());
        assert!(l["wall_ms"].is_u64());
    }
}

#[test]
fn evaluate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let g = prepare(dir.path());
    let m = dir.path().join("m.ckpt");
    let mut train = vec!["train", "--graphs", s(&g), "--out", s(&m)];
    train.extend(QUICK);
    ok(&train);
    let report = |name: &str| {
        let r = dir.path().join(name);
        ok(&[
            "evaluate",
            "--model",
            s(&m),
            "--graphs",
            s(&g),
            "--k",
            "1,5,10,20",
            "--report",
            s(&r),
        ]);
        (
            std::fs::read(&r).unwrap(),
            std::fs::read(r.with_extension("csv")).unwrap(),
        )
    };
    let first = report("r1.json");
    assert_eq!(first, report("r2.json"));
    let json: serde_json::Value = serde_json::from_slice(&first.0).unwrap();
    assert_eq!(json["ks"], serde_json::json!([1, 5, 10, 20]));
    assert!(String::from_utf8(first.1)
        .unwrap()
        .starts_with("variant,k,slice,sr,p,r\n"));

    let out = ok(&[
        "recommend",
        "--model",
        s(&m),
        "--graphs",
        s(&g),
        "--context",
        "synth.planted.Pair0.first()",
        "--k",
        "3",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "rank\tapi\tscore");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("1\t"));
}

#[test]
fn seed_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let g = prepare(dir.path());
    let run = |name: &str, seed: &str, env: Option<&str>| {
        let m = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mega"));
        cmd.args(["train", "--graphs", s(&g), "--seed", seed, "--out", s(&m)])
            .args(QUICK);
        match env {
            Some(v) => cmd.env("MEGA_SEED", v),
            None => cmd.env_remove("MEGA_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(m).unwrap()
    };
    let via_env = run("a.ckpt", "1", Some("7"));
    assert_eq!(via_env, run("b.ckpt", "7", None));
    assert_ne!(via_env, run("c.ckpt", "1", None));
}

#[test]
fn ablate_flag_accepts_exactly_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let g = prepare(dir.path());
    for v in ["none", "no-hs", "no-co", "no-hc"] {
        let m = dir.path().join(format!("{v}.ckpt"));
        let mut args = vec![
            "train",
            "--graphs",
            s(&g),
            "--ablate",
            v,
            "--out",
            s(&m),
            "--epochs",
            "1",
            "--dim",
            "4",
        ];
        args.extend(&QUICK[2..6]);
        ok(&args);
        assert_eq!(Checkpoint::load(&m, None).unwrap().manifest.ablation.as_str(), v);
    }
    for bad in ["no_hc", "NONE", "hc", ""] {
        let out = mega(&["train", "--graphs", s(&g), "--ablate", bad, "--out", "x"]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mega(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(mega(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mega(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("nowhere");
    let out = mega(&[
        "build-graphs",
        "--corpus",
        s(&missing),
        "--out",
        s(&dir.path().join("g")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());

    let g = prepare(dir.path());
    let out = mega(&[
        "train",
        "--graphs",
        s(&g),
        "--lr",
        "1e300",
        "--epochs",
        "2",
        "--dim",
        "8",
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // checkpoint trained on other graphs
    let other = dir.path().join("other");
    std::fs::create_dir(&other).unwrap();
    let (c2, g2) = (other.join("c"), other.join("g"));
    ok(&[
        "synth",
        "--methods",
        "30",
        "--apis",
        "20",
        "--seed",
        "2",
        "--out",
        s(&c2),
    ]);
    ok(&["build-graphs", "--corpus", s(&c2), "--out", s(&g2)]);
    let m = other.join("m.ckpt");
    let mut train = vec!["train", "--graphs", s(&g2), "--out", s(&m)];
    train.extend(QUICK);
    ok(&train);
    let out = mega(&[
        "evaluate",
        "--model",
        s(&m),
        "--graphs",
        s(&g),
        "--report",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let bad_seed = Command::new(env!("CARGO_BIN_EXE_mega"))
        .args(["synth", "--out", s(&dir.path().join("c3"))])
        .env("MEGA_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(bad_seed.status.code(), Some(2));
    assert_eq!(
        mega(&["--threads", "0", "synth", "--out", s(&dir.path().join("c4"))])
            .status
            .code(),
        Some(2)
    );
}
