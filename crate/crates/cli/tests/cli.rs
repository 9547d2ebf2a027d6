use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use evbalance::data::format_timestamp;
use evbalance_cli::manifest::RunManifest;

fn evb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evb"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("evb runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = evb(dir, args);
    assert!(
        out.status.success(),
        "evb {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synthetic(dir: &Path) {
    ok(dir, &["preprocess", "--synthetic", "8", "72", "7", "--out", "data"]);
}

/// Raw 5-minute files for two stations, with occupancy from `occupancy`.
fn write_raw(dir: &Path, rows: usize, occupancy: impl Fn(usize, usize) -> f64) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(
        dir.join("regions.csv"),
        "region_id,lon,lat,pile_count\n1,114.0,22.5,10\n2,114.1,22.6,20\n3,114.05,22.55,0\n",
    )
    .unwrap();
    let mut occ = String::from("time,1,2\n");
    let mut price = String::from("time,1,2\n");
    let start = 1_718_755_200i64;
    for t in 0..rows {
        let ts = format_timestamp(start + 300 * t as i64);
        writeln!(occ, "{ts},{},{}", occupancy(t, 0), occupancy(t, 1)).unwrap();
        writeln!(price, "{ts},0.99,0.93").unwrap();
    }
    std::fs::write(dir.join("occupancy.csv"), occ).unwrap();
    std::fs::write(dir.join("price.csv"), price).unwrap();
}

#[test]
fn synthetic_preprocess_writes_bundle_and_network() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path());
    let data = tmp.path().join("data");
    for f in [
        "occupancy.csv",
        "price.csv",
        "regions.csv",
        "stations.csv",
        "edges.csv",
        "manifest.json",
    ] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let occ = std::fs::read_to_string(data.join("occupancy.csv")).unwrap();
    assert_eq!(occ.lines().count(), 73);
    assert_eq!(RunManifest::read(&data).unwrap().seed, 7);
}

#[test]
fn raw_month_aggregates_to_720_hours() {
    let tmp = tempfile::tempdir().unwrap();
    write_raw(&tmp.path().join("raw"), 8640, |t, s| ((t + s) % 10) as f64);
    ok(tmp.path(), &["preprocess", "raw", "--out", "data"]);
    let occ = std::fs::read_to_string(tmp.path().join("data/occupancy.csv")).unwrap();
    assert_eq!(occ.lines().count(), 721);
    let manifest = RunManifest::read(&tmp.path().join("data")).unwrap();
    assert_eq!(manifest.inputs.len(), 3);
    assert!(manifest.inputs.iter().all(|d| d.sha256.len() == 64));
}

#[test]
fn missing_price_file_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    write_raw(&tmp.path().join("raw"), 24, |_, _| 1.0);
    std::fs::remove_file(tmp.path().join("raw/price.csv")).unwrap();
    let out = evb(tmp.path(), &["preprocess", "raw", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("price.csv"));
}

#[test]
fn malformed_region_table_reports_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    write_raw(&tmp.path().join("raw"), 24, |_, _| 1.0);
    std::fs::write(
        tmp.path().join("raw/regions.csv"),
        "region_id,lon,lat,pile_count\n1,114.0,22.5,10\n1,114.1,22.6,3\n",
    )
    .unwrap();
    let out = evb(tmp.path(), &["preprocess", "raw", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("regions.csv") && err.contains("line 3"), "{err}");
}

#[test]
fn pretrain_is_deterministic_and_warns_on_zero_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path());
    ok(
        tmp.path(),
        &[
            "pretrain", "--data", "data", "--epochs", "20", "--seed", "3", "--out", "a",
        ],
    );
    ok(
        tmp.path(),
        &[
            "pretrain", "--data", "data", "--epochs", "20", "--seed", "3", "--out", "b",
        ],
    );
    let a = std::fs::read(tmp.path().join("a/gnn_params.txt")).unwrap();
    assert_eq!(a, std::fs::read(tmp.path().join("b/gnn_params.txt")).unwrap());

    let out = evb(
        tmp.path(),
        &["pretrain", "--data", "data", "--epochs", "0", "--out", "zero"],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("final_mse"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0 epochs"));
    assert!(tmp.path().join("zero/gnn_params.txt").exists());
}

#[test]
fn pretrain_fits_constant_data() {
    let tmp = tempfile::tempdir().unwrap();
    write_raw(&tmp.path().join("raw"), 12 * 48, |_, s| if s == 0 { 4.0 } else { 6.0 });
    ok(tmp.path(), &["preprocess", "raw", "--out", "data"]);
    let stdout = ok(
        tmp.path(),
        &["pretrain", "--data", "data", "--epochs", "200", "--out", "gnn"],
    );
    let mse: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("final_mse = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(mse <= 1e-3, "{mse}");
}

#[test]
fn train_writes_outputs_and_echoes_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path());
    std::fs::write(tmp.path().join("run.conf"), "episodes = 3\nlambda = 2\n").unwrap();
    ok(
        tmp.path(),
        &[
            "train", "--config", "run.conf", "--data", "data", "--lambda", "10", "--out", "run",
        ],
    );
    let run = tmp.path().join("run");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(std::fs::read_to_string(run.join("qparams.txt"))
        .unwrap()
        .starts_with("evb-q v1 F=4 H1=64 H2=64 A=7"));
    let manifest = RunManifest::read(&run).unwrap();
    assert_eq!(manifest.config["lambda"], "10");
    assert_eq!(manifest.config["episodes"], "3");
    assert!(manifest.inputs.iter().any(|d| d.path.ends_with("run.conf")));
}

#[test]
fn default_training_runs_one_hundred_episodes() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path());
    ok(tmp.path(), &["train", "--data", "data", "--out", "run"]);
    let metrics = std::fs::read_to_string(tmp.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 101);
}

#[test]
fn gnn_model_trains_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path());
    ok(
        tmp.path(),
        &["pretrain", "--data", "data", "--epochs", "10", "--out", "gnn"],
    );
    let model = ["--model", "gnn", "--gnn-params", "gnn/gnn_params.txt"];
    let mut args = vec!["train", "--data", "data", "--episodes", "2", "--out", "run"];
    args.extend(model);
    ok(tmp.path(), &args);
    let mut args = vec![
        "evaluate",
        "--data",
        "data",
        "--params",
        "run/qparams.txt",
        "--out",
        "eval",
    ];
    args.extend(model);
    ok(tmp.path(), &args);
    let eval = std::fs::read_to_string(tmp.path().join("eval/evaluation.csv")).unwrap();
    assert_eq!(eval.lines().count(), 2);

    let out = evb(tmp.path(), &["train", "--data", "data", "--model", "gnn", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path());
    let out = evb(
        tmp.path(),
        &[
            "train",
            "--data",
            "data",
            "--episodes",
            "2",
            "--set",
            "lr=1e300",
            "--out",
            "run",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}

#[test]
fn bad_settings_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path());
    for extra in [["--set", "warp=9"], ["--set", "gamma=2"], ["--model", "oracle"]] {
        let mut args = vec!["train", "--data", "data", "--episodes", "1", "--out", "run"];
        args.extend(extra);
        assert_eq!(evb(tmp.path(), &args).status.code(), Some(2), "{extra:?}");
    }
}

#[test]
fn report_merges_runs() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path());
    for (lambda, dir) in [("1", "l1"), ("10", "l10")] {
        ok(
            tmp.path(),
            &[
                "train",
                "--data",
                "data",
                "--episodes",
                "3",
                "--lambda",
                lambda,
                "--out",
                dir,
            ],
        );
    }
    ok(tmp.path(), &["report", "l1", "l10", "--out", "rep"]);
    let comparison = std::fs::read_to_string(tmp.path().join("rep/comparison.csv")).unwrap();
    let rows: Vec<&str> = comparison.lines().collect();
    assert_eq!(rows[0], "lambda,final_variance_penalty,final_overload_penalty");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1,") && rows[2].starts_with("10,"));
    let long = std::fs::read_to_string(tmp.path().join("rep/long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 2 * 3 * 7);
    assert!(long.lines().nth(1).unwrap().starts_with("l1,1,mean_q,"));

    ok(tmp.path(), &["report", "l1", "--out", "single"]);
    let single = std::fs::read_to_string(tmp.path().join("single/comparison.csv")).unwrap();
    assert_eq!(single.lines().count(), 2);

    let out = evb(tmp.path(), &["report", "l1", "missing", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("metrics.csv"));
}
