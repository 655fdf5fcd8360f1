mod common;

use std::fs;

use common::*;
use gode_cf_cli::experiment::{verify_manifest, METRICS_FILE, TRAIN_LOG_FILE};

fn small_run_args<'a>(data: &'a str, out: &'a str) -> Vec<String> {
    [
        "train",
        "--set",
        &format!("data={data}"),
        "--set",
        "core_k=3",
        "--set",
        "dims=8",
        "--set",
        "learning_rate=0.01",
        "--set",
        "max_epochs=6",
        "--set",
        "batch_size=64",
        "--set",
        &format!("output_dir={out}"),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn missing_dataset_fails_with_path() {
    let o = run(&["train", "--set", "data=/definitely/not/here.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.txt"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_1_and_name_the_field() {
    let o = run(&["train", "--set", "t1=soon"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`t1`"), "{}", stderr(&o));

    let o = run(&["train", "--set", "n_layers=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_layers"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.conf");
    fs::write(&cfg, "data = x\nlearning_rate = -1\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    let o = run(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_complete_artifacts_and_evaluate_reproduces_them() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_clustered(tmp.path());
    let out = tmp.path().join("run");
    let args = small_run_args(data.to_str().unwrap(), out.to_str().unwrap());
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    verify_manifest(&out).unwrap();
    let log = fs::read_to_string(out.join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,loss,recall20,ndcg20,seconds"));
    assert_eq!(log.lines().count(), 7);

    let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let test_rows: Vec<&str> = metrics.lines().filter(|l| l.starts_with("test,")).collect();
    assert_eq!(test_rows.len(), 2);

    let o = run(&["evaluate", "--run", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = stdout(&o);
    for row in &test_rows {
        assert!(printed.contains(row), "{printed}\nvs\n{metrics}");
    }
}

#[test]
fn output_root_env_resolves_relative_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_clustered(tmp.path());
    let args = small_run_args(data.to_str().unwrap(), "nested/run");
    let o = bin()
        .args(&args)
        .args(["--set", "max_epochs=1"])
        .env("GODE_CF_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("nested/run").join(METRICS_FILE).exists());
}

#[test]
fn prepare_data_then_train_on_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_clustered(tmp.path());
    let split = tmp.path().join("split");
    let o = run(&[
        "prepare-data",
        "--set",
        &format!("data={}", data.display()),
        "--out",
        split.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["train.txt", "val.txt", "test.txt", "user_ids.txt", "item_ids.txt"] {
        assert!(split.join(f).exists(), "{f}");
    }
    let out = tmp.path().join("run");
    let mut args = small_run_args(split.to_str().unwrap(), out.to_str().unwrap());
    args.extend(["--set".into(), "data_format=split".into(), "--set".into(), "max_epochs=2".into()]);
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn isolated_node_error_suggests_the_switch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_toy(tmp.path());
    let o = run(&[
        "train",
        "--set",
        &format!("data={}", data.display()),
        "--set",
        "core_k=1",
        "--set",
        &format!("output_dir={}", tmp.path().join("r").display()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("allow_isolated"), "{}", stderr(&o));
}

#[test]
fn t1_sweep_over_the_grid_gives_seven_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_clustered(tmp.path());
    let out = tmp.path().join("sweep");
    let mut args = small_run_args(data.to_str().unwrap(), out.to_str().unwrap());
    args[0] = "sweep".into();
    args.extend(
        [
            "--set",
            "max_epochs=2",
            "--set",
            "sweep_param=t1",
            "--set",
            "sweep_values=0.7,0.75,0.8,0.85,0.9,0.95,1",
        ]
        .map(String::from),
    );
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "param,value,recall20,ndcg20,best_epoch,seconds");
    assert_eq!(lines.len(), 8);
    let values: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["0.7", "0.75", "0.8", "0.85", "0.9", "0.95", "1"]);
}

#[test]
fn parallel_layer_sweep_and_weight_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_clustered(tmp.path());
    for (param, values, rows) in [("n_hops", "1,2,3", 3), ("use_weights", "false,true", 2)] {
        let out = tmp.path().join(param);
        let mut args = small_run_args(data.to_str().unwrap(), out.to_str().unwrap());
        args[0] = "sweep".into();
        args.extend(
            [
                "--set".to_string(),
                "max_epochs=2".into(),
                "--set".into(),
                format!("sweep_param={param}"),
                "--set".into(),
                format!("sweep_values={values}"),
                "--set".into(),
                "parallel_runs=true".into(),
            ],
        );
        let o = bin().args(&args).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
        assert_eq!(table.lines().count(), rows + 1, "{table}");
        assert!(table.lines().skip(1).all(|l| l.starts_with(&format!("{param},"))));
    }
}

#[test]
fn lightgcn_and_gode_cf_reports_are_comparable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_clustered(tmp.path());
    let mut reports = Vec::new();
    for (model, extra) in [("gode_cf", "n_hops=2"), ("lightgcn", "lightgcn_layers=2")] {
        let out = tmp.path().join(model);
        let mut args = small_run_args(data.to_str().unwrap(), out.to_str().unwrap());
        args.extend(["--set".into(), format!("model={model}"), "--set".into(), extra.into()]);
        let o = bin().args(&args).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(fs::read_to_string(out.join(METRICS_FILE)).unwrap());
    }
    let shape = |r: &str| -> Vec<String> {
        r.lines().map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect()
    };
    assert_eq!(shape(&reports[0]), shape(&reports[1]));
    assert_ne!(reports[0], reports[1]);
}

#[test]
fn rerun_is_byte_identical_in_deterministic_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_clustered(tmp.path());
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("r{k}"));
        let mut args = small_run_args(data.to_str().unwrap(), out.to_str().unwrap());
        args.extend(["--set".into(), "deterministic=true".into()]);
        let o = bin().args(&args).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((
            fs::read(out.join(TRAIN_LOG_FILE)).unwrap(),
            fs::read(out.join(METRICS_FILE)).unwrap(),
            fs::read(out.join("e0.txt")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn gradcheck_verb_reports_max_error() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 13);
    let last = out.lines().last().unwrap();
    let err: f64 = last.trim_start_matches("max relative error: ").parse().unwrap();
    assert!(err < 1e-5);
}
