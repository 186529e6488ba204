use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use fdgnn_cli::config::RunConfig;
use fdgnn_cli::manifest::RunManifest;
use tempfile::TempDir;

const SMOKE: &str = r#"
num_links = 10
num_train = 50
num_test = 20
validation_fraction = 0.0
epochs = 2
batch_size = 10
"#;

fn fdgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdgnn"))
        .args(args)
        .env_remove("FDGNN_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fdgnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_owned).collect())
        .collect();
    (header, rows)
}

#[test]
fn defaults_parse_and_match_the_library() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(
        cfg.network(0),
        fdgnn_core::netgen::ExperimentConfig::default()
    );
    assert_eq!(cfg.model(), fdgnn_core::fgnn::FgnnConfig::default());
    assert_eq!((cfg.num_train, cfg.num_test), (10_000, 1_000));
}

#[test]
fn unknown_key_is_named() {
    let err = RunConfig::parse("num_links = 50\nlearnig_rate = 0.1\n").unwrap_err();
    assert!(format!("{err:#}").contains("learnig_rate"), "{err:#}");

    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "area_side = 100.0\n");
    let out = fdgnn(&[
        "generate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("area_side"));
}

#[test]
fn invalid_values_are_rejected() {
    assert!(RunConfig::parse("num_links = 5\nfd_fraction = 0.3\n").is_err());
    assert!(RunConfig::parse("validation_fraction = 1.0\n").is_err());
    assert!(RunConfig::parse("f_c_widths = [35, 16, 1]\n").is_err());
    assert!(RunConfig::parse("num_links = \"fifty\"\n").is_err());
}

#[test]
fn generate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "k1.toml",
        "num_links = 1\nfd_fraction = 0.0\nnum_train = 8\nnum_test = 2\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "generate",
            "--config",
            s(&cfg),
            "--seed",
            "7",
            "--out",
            s(d),
        ]);
    }
    let lines = |p: PathBuf| std::fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(
        lines(a.join("train.jsonl")) + lines(a.join("test.jsonl")),
        10
    );
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
    let (ma, mb) = (
        RunManifest::read(&a.join("manifest.json")).unwrap(),
        RunManifest::read(&b.join("manifest.json")).unwrap(),
    );
    assert_eq!(ma.input_hash, mb.input_hash);
    assert_eq!(ma.outputs.len(), 2);

    let c = dir.path().join("c");
    ok(&[
        "generate",
        "--config",
        s(&cfg),
        "--seed",
        "8",
        "--out",
        s(&c),
    ]);
    assert_ne!(
        std::fs::read(a.join("test.jsonl")).unwrap(),
        std::fs::read(c.join("test.jsonl")).unwrap()
    );
}

#[test]
fn smoke_training_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "smoke.toml", SMOKE);
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);

    let ckpt = dir.path().join("model.json");
    let start = Instant::now();
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
    ]);
    assert!(start.elapsed().as_secs() < 60);

    let (header, rows) = csv_rows(&dir.path().join("model.log.csv"));
    assert_eq!(header, ["epoch", "loss", "validation_ratio", "wall_time_s"]);
    let losses: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(losses.len(), 2);
    assert!(losses[1] < losses[0], "{losses:?}");

    let m = RunManifest::read(&dir.path().join("model.manifest.json")).unwrap();
    assert_eq!(m.command, "train");
    assert!(m.inputs.iter().any(|p| p.ends_with("train.jsonl")));
    assert_eq!(m.summary["optimizer_steps"], 10);

    let results = dir.path().join("results.csv");
    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&results),
    ]);
    let (header, rows) = csv_rows(&results);
    assert_eq!(
        header,
        ["method", "K", "lambda", "mean_sum_rate", "ratio_vs_wmmse"]
    );
    let methods: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["fgnn", "wmmse", "greedy"]);
    assert_eq!(rows[1][4].parse::<f64>().unwrap(), 1.0);
    for r in &rows {
        assert_eq!(r[1], "10");
        assert!(r[3].parse::<f64>().unwrap() > 0.0);
    }

    let again = dir.path().join("again.csv");
    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        std::fs::read(&results).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn resume_continues_the_same_schedule() {
    let dir = TempDir::new().unwrap();
    let two = write_config(dir.path(), "two.toml", SMOKE);
    let one = write_config(
        dir.path(),
        "one.toml",
        &SMOKE.replace("epochs = 2", "epochs = 1"),
    );

    let straight = dir.path().join("straight.json");
    ok(&[
        "train",
        "--config",
        s(&two),
        "--seed",
        "3",
        "--out",
        s(&straight),
    ]);
    let half = dir.path().join("half.json");
    ok(&[
        "train",
        "--config",
        s(&one),
        "--seed",
        "3",
        "--out",
        s(&half),
    ]);
    let resumed = dir.path().join("resumed.json");
    ok(&[
        "train",
        "--config",
        s(&two),
        "--seed",
        "3",
        "--resume",
        s(&half),
        "--out",
        s(&resumed),
    ]);

    assert_eq!(
        std::fs::read(&straight).unwrap(),
        std::fs::read(&resumed).unwrap()
    );
    let (_, a) = csv_rows(&dir.path().join("straight.log.csv"));
    let (_, b) = csv_rows(&dir.path().join("resumed.log.csv"));
    assert_eq!(b.len(), 1);
    assert_eq!(a[1][..2], b[0][..2]);
}

#[test]
fn truncation_is_recorded_and_worker_count_is_honoured() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "smoke.toml",
        &SMOKE.replace("epochs = 2", "epochs = 1"),
    );
    let ckpt = dir.path().join("t.json");
    let out = Command::new(env!("CARGO_BIN_EXE_fdgnn"))
        .args([
            "train",
            "--config",
            s(&cfg),
            "--truncate-t",
            "20",
            "--out",
            s(&ckpt),
        ])
        .env("FDGNN_WORKERS", "2")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = RunManifest::read(&dir.path().join("t.manifest.json")).unwrap();
    assert_eq!(m.config.truncate_t_m, Some(20.0));

    let bad = Command::new(env!("CARGO_BIN_EXE_fdgnn"))
        .args(["train", "--config", s(&cfg), "--out", s(&ckpt)])
        .env("FDGNN_WORKERS", "many")
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("FDGNN_WORKERS"));
}

#[test]
fn eval_rejects_an_empty_dataset() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "smoke.toml",
        &SMOKE.replace("epochs = 2", "epochs = 1"),
    );
    let ckpt = dir.path().join("m.json");
    ok(&["train", "--config", s(&cfg), "--out", s(&ckpt)]);
    let data = dir.path().join("empty");
    std::fs::create_dir(&data).unwrap();
    std::fs::write(data.join("test.jsonl"), "").unwrap();
    let out = fdgnn(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&dir.path().join("r.csv")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));

    let missing = fdgnn(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("nope.json")),
        "--out",
        s(&dir.path().join("r.csv")),
    ]);
    assert!(!missing.status.success());
}

#[test]
fn single_instance_bench() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "bench.toml",
        "bench_links = [10, 20]\nbench_instances = 1\nbench_repeats = 5\n",
    );
    let out = dir.path().join("timing.csv");
    ok(&["bench-time", "--config", s(&cfg), "--out", s(&out)]);
    let (header, rows) = csv_rows(&out);
    assert_eq!(rows.len(), 2);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for r in &rows {
        assert_eq!(r[col("single_instance")], "true");
        assert_eq!(r[col("instances")], "1");
        assert!(r[col("fgnn_ms_median")].parse::<f64>().unwrap() > 0.0);
        assert!(r[col("wmmse_over_fgnn")].parse::<f64>().unwrap() > 0.0);
    }
    assert!(dir.path().join("timing.manifest.json").exists());
}

#[test]
fn small_threshold_sweep() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.toml",
        &(SMOKE.replace("epochs = 2", "epochs = 1")
            + "thresholds_m = [0.0, 200.0]\nideal_target = 0.0\n"),
    );
    let out = dir.path().join("sweep.csv");
    ok(&["threshold-sweep", "--config", s(&cfg), "--out", s(&out)]);
    let (header, rows) = csv_rows(&out);
    assert_eq!(
        header,
        [
            "t_m",
            "analytic_expected_edges",
            "empirical_mean_edges",
            "normalized_performance",
            "training_time_s"
        ]
    );
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "0.0");
    assert_eq!(rows[0][2], "0.0");
    assert_eq!(rows[1][1], "45.0");
    let m = RunManifest::read(&dir.path().join("sweep.manifest.json")).unwrap();
    assert_eq!(m.summary["ideal_threshold_m"], 0.0);
}
