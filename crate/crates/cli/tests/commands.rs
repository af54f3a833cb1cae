use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use otcsurv::data::{load_dataset, save_dataset, PatientRecord};
use otcsurv::encoder::AttentionRecord;
use otcsurv::{Checkpoint, Model, ModelConfig, OntologyDag, OtcError, RunConfig};
use otcsurv_cli::{
    cmd_evaluate, cmd_explain, cmd_predict, cmd_simulate, cmd_train, CliError, EvaluateArgs, ExplainArgs,
    PredictArgs, SimulateArgs, TrainArgs,
};

fn simulate(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let args = SimulateArgs {
        out: dir.to_path_buf(),
        n_patients: Some(n),
        censoring_rate: None,
        base_hazard: None,
        seed: Some(seed),
    };
    cmd_simulate(&RunConfig::default(), &args).unwrap();
    dir.join("dataset.jsonl")
}

fn train_args(data: &Path, out: &Path, warmup: usize, contrast: usize) -> TrainArgs {
    TrainArgs {
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        warmup_epochs: Some(warmup),
        contrast_epochs: Some(contrast),
        batch_size: Some(16),
        seed: Some(3),
        split_seed: None,
    }
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn read_curve(path: &Path) -> Vec<(u32, f64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.deserialize().map(|row| row.unwrap()).collect()
}

#[test]
fn simulate_is_byte_identical_and_counts_match() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    simulate(&a, 100, 7);
    simulate(&b, 100, 7);
    for f in ["dataset.jsonl", "sidecar.jsonl", "summary.json", "km.csv", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(line_count(&a.join("dataset.jsonl")), 100);
    assert_eq!(line_count(&a.join("sidecar.jsonl")), 100);
    let summary: otcsurv_cli::SimulationSummary =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let records = load_dataset(&a.join("dataset.jsonl"), &OntologyDag::toy(), &ModelConfig::default().limits()).unwrap();
    assert_eq!(summary.n, records.len());
    assert_eq!(summary.observed, records.iter().filter(|r| r.observed()).count());
    assert_eq!(summary.observed + summary.censored, summary.n);
    assert!(fs::read_dir(&a).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".partial")));
}

#[test]
fn high_censoring_target_is_met() {
    let tmp = tempfile::tempdir().unwrap();
    let args = SimulateArgs {
        out: tmp.path().to_path_buf(),
        n_patients: Some(1000),
        censoring_rate: Some(0.84),
        base_hazard: Some(0.03),
        seed: Some(11),
    };
    let s = cmd_simulate(&RunConfig::default(), &args).unwrap();
    assert!((s.censoring_rate - 0.84).abs() <= 0.03, "{}", s.censoring_rate);
}

#[test]
fn sidecar_evaluation_reproduces_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(&tmp.path().join("sim"), 400, 5);
    let summary: otcsurv_cli::SimulationSummary =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("sim/summary.json")).unwrap()).unwrap();
    let out = tmp.path().join("eval");
    let report = cmd_evaluate(
        &RunConfig::default(),
        &EvaluateArgs {
            data,
            out: out.clone(),
            checkpoint: None,
            sidecar: Some(tmp.path().join("sim/sidecar.jsonl")),
        },
    )
    .unwrap();
    assert_eq!(Some(report.ctd), summary.oracle_ctd);
    assert_eq!(report.n, 400);
    assert_eq!(report.n_observed, summary.observed);
    for f in ["km_all.csv", "km_observed.csv", "mean_surv_all.csv", "mean_surv_observed.csv"] {
        let curve = read_curve(&out.join(f));
        assert_eq!(curve.len(), 10, "{f}");
        assert_eq!(curve[0], (0, 1.0));
        assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1), "{f} increases");
    }
}

#[test]
fn zero_epoch_training_saves_initial_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(&tmp.path().join("sim"), 120, 2);
    let out = tmp.path().join("train");
    let summary = cmd_train(&RunConfig::default(), &train_args(&data, &out, 0, 0)).unwrap();
    assert_eq!(summary.best_epoch, None);
    let log = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("epoch,phase,loglik,ranking,supwcon,mse,total,val_ctd,val_mae"));
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    let fresh = Model::new(&ck.config, OntologyDag::toy(), 3).unwrap();
    let fresh_params = fresh.store.snapshot(|n| !n.starts_with("proj."));
    assert_eq!(ck.params, fresh_params);
    assert!(out.join("config.toml").exists());
    let total: usize = ["train", "val", "test"]
        .iter()
        .map(|s| line_count(&out.join(format!("splits/{s}.jsonl"))))
        .sum();
    assert_eq!(total, 120);
}

#[test]
fn training_reruns_give_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(&tmp.path().join("sim"), 160, 4);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    cmd_train(&RunConfig::default(), &train_args(&data, &a, 1, 1)).unwrap();
    cmd_train(&RunConfig::default(), &train_args(&data, &b, 1, 1)).unwrap();
    let log = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(log, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 3);
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
}

fn trained(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = simulate(&tmp.join("sim"), 150, 8);
    let out = tmp.join("train");
    cmd_train(&RunConfig::default(), &train_args(&data, &out, 1, 0)).unwrap();
    (data, out.join("checkpoint.json"))
}

#[test]
fn predict_and_evaluate_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = trained(tmp.path());
    let out = tmp.path().join("pred");
    cmd_predict(
        &RunConfig::default(),
        &PredictArgs {
            checkpoint: ck.clone(),
            data: data.clone(),
            out: out.clone(),
        },
    )
    .unwrap();
    let mut r = csv::Reader::from_path(out.join("predictions.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header.len(), 1 + 9 + 9 + 1);
    assert_eq!((header[1].as_str(), header[10].as_str(), header[19].as_str()), ("r1", "S1", "mu"));
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 150);
    for row in &rows {
        let v: Vec<f64> = row.iter().skip(1).map(|x| x.parse().unwrap()).collect();
        let s = &v[9..18];
        assert!(s.windows(2).all(|w| w[1] <= w[0]));
        assert!((v[18] - s.iter().sum::<f64>()).abs() < 1e-12);
    }

    let report = cmd_evaluate(
        &RunConfig::default(),
        &EvaluateArgs {
            data,
            out: tmp.path().join("eval"),
            checkpoint: Some(ck),
            sidecar: None,
        },
    )
    .unwrap();
    assert_eq!(report.n, 150);
    assert!((0.0..=1.0).contains(&report.ctd));
    assert!(report.mae.is_finite());
}

#[test]
fn evaluating_an_incompatible_dataset_names_both_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(&tmp.path().join("sim"), 80, 1);
    let short = RunConfig::from_toml("[model]\nt_max = 4\n").unwrap();
    let mut records = load_dataset(&data, &OntologyDag::toy(), &ModelConfig::default().limits()).unwrap();
    for r in &mut records {
        r.t = r.t.min(4);
    }
    let short_data = tmp.path().join("short.jsonl");
    save_dataset(&short_data, &records).unwrap();
    cmd_train(&short, &train_args(&short_data, &tmp.path().join("train"), 0, 0)).unwrap();
    let mut long = records.clone();
    long[0].t = 9;
    long[0].k = 0;
    let long_data = tmp.path().join("long.jsonl");
    save_dataset(&long_data, &long).unwrap();
    let err = cmd_evaluate(
        &RunConfig::default(),
        &EvaluateArgs {
            data: long_data,
            out: tmp.path().join("eval"),
            checkpoint: Some(tmp.path().join("train/checkpoint.json")),
            sidecar: None,
        },
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CliError::Core(OtcError::Compatibility(_))), "{msg}");
    assert!(msg.contains("t_max 4") && msg.contains("t_max 9"), "{msg}");
    assert_eq!(err.exit_code(), 2);
}

fn check_weights(rec: &AttentionRecord) {
    let close = |s: f64| (s - 1.0).abs() <= 1e-9;
    assert!(close(rec.visits.iter().map(|v| v.weight).sum()));
    for v in &rec.visits {
        assert!(close(v.codes.iter().map(|c| c.weight).sum()));
        for c in &v.codes {
            assert!(close(c.ancestors.iter().map(|a| a.weight).sum()));
            assert_eq!(c.ancestors[0].id, c.code);
        }
    }
}

#[test]
fn explain_writes_normalized_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = trained(tmp.path());
    let mut records = load_dataset(&data, &OntologyDag::toy(), &ModelConfig::default().limits()).unwrap();
    let multi = records.iter().find(|r| r.visits.len() > 1).unwrap().id.clone();
    let mut single: PatientRecord = records[0].clone();
    single.id = "single".into();
    single.visits.truncate(1);
    records.push(single);
    let with_single = tmp.path().join("with_single.jsonl");
    save_dataset(&with_single, &records).unwrap();

    let out = tmp.path().join("explain");
    for id in [multi.as_str(), "single"] {
        let args = ExplainArgs {
            checkpoint: ck.clone(),
            data: with_single.clone(),
            id: id.to_string(),
            out: out.clone(),
        };
        cmd_explain(&RunConfig::default(), &args).unwrap();
        let text = fs::read_to_string(out.join(format!("attention_{id}.json"))).unwrap();
        let rec: AttentionRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(rec.patient_id, id);
        check_weights(&rec);
    }
    let text = fs::read_to_string(out.join("attention_single.json")).unwrap();
    let rec: AttentionRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(rec.visits.len(), 1);
    assert_eq!(rec.visits[0].weight, 1.0);

    let err = cmd_explain(
        &RunConfig::default(),
        &ExplainArgs {
            checkpoint: ck,
            data: with_single,
            id: "missing".into(),
            out,
        },
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Core(OtcError::Lookup(_))));
}

fn bin() -> Process {
    let mut p = Process::new(env!("CARGO_BIN_EXE_otcsurv"));
    p.env_remove(otcsurv_cli::CONFIG_ENV).env("RUST_LOG", "error");
    p
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let ok = bin()
        .args(["simulate", "--n-patients", "50", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(ok.success());
    assert_eq!(line_count(&out.join("dataset.jsonl")), 50);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatch_size = 1\n").unwrap();
    let st = bin().arg("--config").arg(&bad).args(["simulate", "--out"]).arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(2));

    let st = bin()
        .args(["simulate", "--censoring-rate", "1.5", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));

    let st = bin()
        .args(["train", "--data"])
        .arg(tmp.path().join("nope.jsonl"))
        .arg("--out")
        .arg(tmp.path().join("t"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(4));
}

#[test]
fn config_path_is_read_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[synthetic]\nn_patients = 37\n").unwrap();
    let out = tmp.path().join("sim");
    let st = bin()
        .env(otcsurv_cli::CONFIG_ENV, &cfg)
        .args(["simulate", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(line_count(&out.join("dataset.jsonl")), 37);
    let echoed = RunConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.synthetic.n_patients, 37);
}
