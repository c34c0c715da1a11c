use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use adpo_core::mlp::read_checkpoint;

fn adpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adpo"))
        .args(args)
        .output()
        .expect("spawn adpo")
}

fn ok(args: &[&str]) -> Output {
    let out = adpo(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path, seed: &str) {
    ok(&[
        "gen-data",
        "--seed",
        seed,
        "--n",
        "120",
        "--n-heldout",
        "40",
        "--out",
        s(dir),
    ]);
}

fn quick_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(
        &p,
        format!("epochs = 2\nbatch_size = 16\nsnapshot_interval = 5\neval_every = 5\n{extra}"),
    )
    .unwrap();
    p
}

#[test]
fn gen_data_is_byte_identical_on_rerun() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    small_data(&a, "7");
    small_data(&b, "7");
    for f in ["train.jsonl", "heldout.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let c = t.path().join("c");
    small_data(&c, "8");
    assert_ne!(
        fs::read(a.join("train.jsonl")).unwrap(),
        fs::read(c.join("train.jsonl")).unwrap()
    );
}

#[test]
fn train_rerun_gives_identical_artifacts() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    small_data(&data, "1");
    let cfg = quick_config(t.path(), "");
    for run in ["r1", "r2"] {
        let out = t.path().join(run);
        ok(&[
            "train",
            "--config",
            s(&cfg),
            "--dataset",
            s(&data),
            "--out",
            s(&out),
            "--flip-rate",
            "0.2",
            "--seed",
            "3",
        ]);
    }
    for f in [
        "checkpoint.bin",
        "reference.bin",
        "run_log.jsonl",
        "metrics.jsonl",
        "final_metrics.jsonl",
    ] {
        let a = fs::read(t.path().join("r1").join(f)).unwrap();
        assert!(!a.is_empty(), "{f}");
        assert_eq!(a, fs::read(t.path().join("r2").join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(t.path().join("r1/run_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["header"]["seed"], 3);
    assert_eq!(first["header"]["config"]["loss"]["rho"], 15.0);
}

#[test]
fn adaptive_with_k1_zero_and_no_margin_matches_dpo_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    small_data(&data, "2");
    let cfg = quick_config(t.path(), "k1 = 0\nmargin = \"none\"\n");
    let dpo = t.path().join("dpo");
    let ada = t.path().join("ada");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--dataset",
        s(&data),
        "--out",
        s(&dpo),
        "--method",
        "dpo",
        "--flip-rate",
        "0",
    ]);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--dataset",
        s(&data),
        "--out",
        s(&ada),
        "--method",
        "adaptive-dpo",
    ]);
    let load = |d: &Path| {
        read_checkpoint(BufReader::new(
            fs::File::open(d.join("checkpoint.bin")).unwrap(),
        ))
        .unwrap()
        .1
    };
    let (a, b) = (load(&dpo), load(&ada));
    let bits = |m: &adpo_core::mlp::Mlp| m.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn sweep_writes_six_reproducible_rows() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    small_data(&data, "4");
    let cfg = quick_config(t.path(), "");
    let run = |name: &str| {
        let out = t.path().join(name);
        ok(&[
            "sweep",
            "--config",
            s(&cfg),
            "--dataset",
            s(&data),
            "--out",
            s(&out),
            "--flip-rate",
            "0.1,0.2,0.3",
            "--method",
            "dpo,adaptive-dpo",
        ]);
        fs::read_to_string(out.join("summary.tsv")).unwrap()
    };
    let a = run("s1");
    assert_eq!(a, run("s2"));
    let lines: Vec<&str> = a.lines().collect();
    assert!(lines[0].starts_with("# "));
    assert!(lines[1].starts_with("method\tflip_rate\tseed\tsteps\tacc\tauc"));
    assert_eq!(lines.len() - 2, 6);
    assert_eq!(
        fs::read(t.path().join("s1/dpo_q0.2_s0/checkpoint.bin")).unwrap(),
        fs::read(t.path().join("s2/dpo_q0.2_s0/checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_and_bins_write_tables_with_headers() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    small_data(&data, "5");
    let cfg = quick_config(t.path(), "");
    let run = t.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--dataset",
        s(&data),
        "--out",
        s(&run),
        "--flip-rate",
        "0.2",
    ]);

    let out = t.path().join("tables");
    ok(&[
        "eval",
        "--dataset",
        s(&data),
        "--run",
        s(&run),
        "--out",
        s(&out),
    ]);
    let eval = fs::read_to_string(out.join("eval.tsv")).unwrap();
    let lines: Vec<&str> = eval.lines().collect();
    assert!(lines[0].starts_with("# ") && lines[0].contains("\"config\""));
    assert_eq!(lines[1], "run\tacc\tauc");
    let acc: f64 = lines[2].split('\t').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(&["bins", "--run", s(&run), "--bins", "5", "--out", s(&out)]);
    let bins = fs::read_to_string(out.join("bins.tsv")).unwrap();
    let lines: Vec<&str> = bins.lines().collect();
    assert!(lines[0].starts_with("# ") && lines[0].contains("\"seed\""));
    assert_eq!(lines[1], "bin\tlo\thi\tcount\tflipped\tflipped_ratio");
    let total: usize = lines[2..7]
        .iter()
        .map(|l| l.split('\t').nth(3).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 120);
}

#[test]
fn exit_codes() {
    assert_eq!(adpo(&[]).status.code(), Some(2));
    assert_eq!(adpo(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(
        adpo(&["train", "--dataset", "x", "--out", "y", "--method", "ppo"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(adpo(&["gen-data"]).status.code(), Some(2));

    let t = tempfile::tempdir().unwrap();
    let missing = adpo(&[
        "train",
        "--dataset",
        s(&t.path().join("nope")),
        "--out",
        s(&t.path().join("o")),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(!missing.stderr.is_empty());

    let bad = t.path().join("bad.toml");
    fs::write(&bad, "M = 1\n").unwrap();
    let data = t.path().join("data");
    small_data(&data, "0");
    let out = adpo(&[
        "train",
        "--config",
        s(&bad),
        "--dataset",
        s(&data),
        "--out",
        s(&t.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains('M'));

    let unknown = t.path().join("unknown.toml");
    fs::write(&unknown, "beta = 1.0\nlearning_rat = 0.1\n").unwrap();
    let out = adpo(&[
        "train",
        "--config",
        s(&unknown),
        "--dataset",
        s(&data),
        "--out",
        s(&t.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}
