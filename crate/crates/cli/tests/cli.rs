//! End-to-end tests of the `cgir` binary: artifact layout, JSON schema,
//! exit codes, determinism, and the sweep output contract.

use std::path::Path;
use std::process::{Command, Output};

fn cgir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgir"))
        .args(args)
        .output()
        .expect("failed to spawn cgir")
}

fn write_fast_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        "epochs = 2\nembed_dim = 4\nhidden_dim = 8\ndisc_hidden_dim = 8\nm_factor = 2\n",
    )
    .unwrap();
    path
}

const SYNTH: &str = "n=40,c=2,p_in=0.4,p_out=0.05,d=5,sep=5,seed=9";

#[test]
fn gen_synth_writes_deterministic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = cgir(&[
            "gen-synth",
            "--nodes", "30",
            "--classes", "3",
            "--dim", "4",
            "--separation", "5",
            "--seed", "11",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{output:?}");
    }
    for file in ["edges.txt", "features.csv", "labels.txt"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file} differs between identical generations");
    }
}

#[test]
fn run_produces_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fast_config(dir.path());
    let out = dir.path().join("out");
    let output = cgir(&[
        "run",
        "--synth", SYNTH,
        "--config", config.to_str().unwrap(),
        "--ratio", "0.25",
        "--repeats", "1",
        "--seed", "4",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");

    let metrics: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    assert!(metrics.contains(&"metrics_r0.25.json".to_string()), "{metrics:?}");
    assert!(metrics.contains(&"history_r0.25_rep0.csv".to_string()));
    assert!(metrics.contains(&"embedding_r0.25_rep0.mat".to_string()));
    assert!(metrics.contains(&"manifest.txt".to_string()));
    assert_eq!(metrics.len(), 4);

    // manifest covers every artifact except itself
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    for line in manifest.lines() {
        let (hash, name) = line.split_once("  ").unwrap();
        assert_eq!(hash.len(), 64);
        assert!(out.join(name).exists());
    }

    // history CSV column contract
    let history = std::fs::read_to_string(out.join("history_r0.25_rep0.csv")).unwrap();
    assert!(history.starts_with("epoch,L_sub,L_ad1,L_ad2,L_con,L_gra,L_total\n"));
    assert_eq!(history.lines().count(), 3); // header + 2 epochs
}

#[test]
fn repeats_populate_per_run_list() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fast_config(dir.path());
    let out = dir.path().join("out");
    let output = cgir(&[
        "run",
        "--synth", SYNTH,
        "--config", config.to_str().unwrap(),
        "--ratio", "0.2",
        "--repeats", "10",
        "--seed", "4",
        "--jobs", "2",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics_r0.20.json")).unwrap())
            .unwrap();
    assert_eq!(json["per_run"].as_array().unwrap().len(), 10);
    assert_eq!(json["seed_list"].as_array().unwrap().len(), 10);
    assert!(json["mean"]["acc"].is_number());
    assert!(json["std"]["nmi"].is_number());
    assert_eq!(json["missing_ratio"].as_f64().unwrap(), 0.2);
}

#[test]
fn invalid_ratio_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let output = cgir(&[
        "run",
        "--synth", SYNTH,
        "--ratio", "1.5",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
    assert!(!out.exists(), "no artifacts may be written on invalid input");
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let output = cgir(&[
        "run",
        "--edges", "/nonexistent/e.txt",
        "--features", "/nonexistent/x.csv",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn sweep_emits_consolidated_rows_in_ratio_order() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fast_config(dir.path());
    let out = dir.path().join("out");
    let output = cgir(&[
        "sweep",
        "--synth", SYNTH,
        "--config", config.to_str().unwrap(),
        "--repeats", "1",
        "--seed", "4",
        "--jobs", "4",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "ratio,variant,metric,mean,std");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40); // 10 ratios x 4 metrics
    let mut last_ratio = -1.0f64;
    for chunk in rows.chunks(4) {
        let ratio: f64 = chunk[0].split(',').next().unwrap().parse().unwrap();
        assert!(ratio > last_ratio, "ratio blocks must be increasing");
        last_ratio = ratio;
        let metrics: Vec<&str> = chunk.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
        assert_eq!(metrics, vec!["acc", "nmi", "ari", "f1"]);
        for row in chunk {
            assert_eq!(row.split(',').nth(1).unwrap(), "full");
        }
    }
}

#[test]
fn ablation_flag_reaches_variant_column() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fast_config(dir.path());
    let out = dir.path().join("out");
    let output = cgir(&[
        "sweep",
        "--synth", SYNTH,
        "--config", config.to_str().unwrap(),
        "--ratios", "0.1,0.3",
        "--repeats", "1",
        "--wo-gi",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    for row in csv.lines().skip(1) {
        assert_eq!(row.split(',').nth(1).unwrap(), "wo_gi");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics_r0.10.json")).unwrap())
            .unwrap();
    assert_eq!(json["variant"].as_str().unwrap(), "wo_gi");
}

#[test]
fn identical_specs_rewrite_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fast_config(dir.path());
    let out = dir.path().join("out");
    let args = [
        "run",
        "--synth", SYNTH,
        "--config", config.to_str().unwrap(),
        "--ratio", "0.3",
        "--repeats", "2",
        "--seed", "7",
        "--out", out.to_str().unwrap(),
    ];
    assert!(cgir(&args).status.success());
    let manifest_a = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    let json_a = std::fs::read(out.join("metrics_r0.30.json")).unwrap();
    assert!(cgir(&args).status.success());
    let manifest_b = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    let json_b = std::fs::read(out.join("metrics_r0.30.json")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    assert_eq!(json_a, json_b);
}

#[test]
fn parallel_jobs_match_serial_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fast_config(dir.path());
    let serial = dir.path().join("serial");
    let parallel = dir.path().join("parallel");
    for (out, jobs) in [(&serial, "1"), (&parallel, "4")] {
        let output = cgir(&[
            "run",
            "--synth", SYNTH,
            "--config", config.to_str().unwrap(),
            "--ratio", "0.4",
            "--repeats", "4",
            "--seed", "2",
            "--jobs", jobs,
            "--out", out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{output:?}");
    }
    let a = std::fs::read_to_string(serial.join("manifest.txt")).unwrap();
    let b = std::fs::read_to_string(parallel.join("manifest.txt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn run_on_generated_files_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let output = cgir(&[
        "gen-synth",
        "--nodes", "40",
        "--classes", "2",
        "--dim", "5",
        "--p-in", "0.4",
        "--p-out", "0.05",
        "--separation", "5",
        "--seed", "9",
        "--out", data.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let config = write_fast_config(dir.path());
    let out = dir.path().join("out");
    let output = cgir(&[
        "run",
        "--edges", data.join("edges.txt").to_str().unwrap(),
        "--features", data.join("features.csv").to_str().unwrap(),
        "--labels", data.join("labels.txt").to_str().unwrap(),
        "--config", config.to_str().unwrap(),
        "--ratio", "0.2",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    assert!(out.join("metrics_r0.20.json").exists());
}
