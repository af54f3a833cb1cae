//! Command implementations behind the `otcsurv` binary.
//!
//! Every command writes into an output directory. Files are staged under a
//! `.partial` suffix and renamed once complete, and the effective
//! configuration is echoed as `config.toml` next to the outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use otcsurv::data::{balance_train, load_dataset, save_dataset, split, PatientRecord};
use otcsurv::metrics::{c_td, kaplan_meier, mae_observed, mean_survival_curve, EvalRecord, Subset};
use otcsurv::synthetic::{generate_synthetic, oracle_ctd, true_survival, SidecarEntry};
use otcsurv::train::{eval_records, train};
use otcsurv::{Checkpoint, Model, OtcError, RunConfig};

pub const CONFIG_ENV: &str = "OTCSURV_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] OtcError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for configuration and validation problems, 3 for numeric
    /// divergence, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                OtcError::Divergence { .. }
                | OtcError::Numeric(_)
                | OtcError::Domain(_)
                | OtcError::DegenerateInput(_) => 3,
                OtcError::Io(_) => 4,
                _ => 2,
            },
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Csv(_) => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "otcsurv", version, about = "Discrete-time survival analysis on coded visit sequences")]
pub struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Train on a JSONL dataset and write the best checkpoint.
    Train(TrainArgs),
    /// Compute C^td, MAE and comparison curves.
    Evaluate(EvaluateArgs),
    /// Write per-patient survival curves.
    Predict(PredictArgs),
    /// Export attention weights for one patient.
    Explain(ExplainArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_patients: Option<usize>,
    #[arg(long)]
    pub censoring_rate: Option<f64>,
    #[arg(long)]
    pub base_hazard: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub contrast_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model checkpoint to evaluate.
    #[arg(long, conflicts_with = "sidecar", required_unless_present = "sidecar")]
    pub checkpoint: Option<PathBuf>,
    /// Use the ground-truth curves of a synthetic sidecar as predictions.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Usage(format!("config file {} not found", p.display())));
            }
            Ok(RunConfig::load(p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(&cfg, a).map(|_| ()),
        Command::Train(a) => cmd_train(&cfg, a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&cfg, a),
        Command::Explain(a) => cmd_explain(&cfg, a),
    }
}

/// Writes `bytes` through a `.partial` sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    fs::write(&partial, bytes).map_err(io_err(&partial))?;
    fs::rename(&partial, path).map_err(io_err(path))
}

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())
}

fn json_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(OtcError::from)?;
    v.push(b'\n');
    Ok(v)
}

fn jsonl_bytes<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(OtcError::from)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Usage(format!("csv buffer: {e}")))
}

/// Header-only CSV, for empty logs.
fn csv_header(columns: &[&str]) -> Vec<u8> {
    let mut s = columns.join(",");
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Clone, Serialize)]
struct CurvePoint {
    t: u32,
    value: f64,
}

fn curve_csv(values: impl IntoIterator<Item = (u32, f64)>) -> CliResult<Vec<u8>> {
    csv_bytes(values.into_iter().map(|(t, value)| CurvePoint { t, value }))
}

fn prefixed_curve(s: &[f64]) -> Vec<(u32, f64)> {
    std::iter::once((0, 1.0))
        .chain(s.iter().enumerate().map(|(i, v)| (i as u32 + 1, *v)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SimulationSummary {
    pub n: usize,
    pub observed: usize,
    pub censored: usize,
    pub censoring_rate: f64,
    pub target_censoring_rate: f64,
    pub censor_hazard: f64,
    pub oracle_ctd: Option<f64>,
}

pub fn cmd_simulate(base: &RunConfig, a: &SimulateArgs) -> CliResult<SimulationSummary> {
    let mut cfg = base.clone();
    let s = &mut cfg.synthetic;
    if let Some(n) = a.n_patients {
        s.n_patients = n;
    }
    if let Some(r) = a.censoring_rate {
        s.censoring_rate = r;
    }
    if let Some(h) = a.base_hazard {
        s.base_hazard = h;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    cfg.validate()?;
    let dag = cfg.ontology()?;
    let data = generate_synthetic(&cfg.synthetic, &dag, &cfg.model.limits())?;
    prepare_dir(&a.out, &cfg)?;

    let outcomes: Vec<_> = data.records.iter().map(PatientRecord::outcome).collect();
    let observed = outcomes.iter().filter(|o| o.observed).count();
    let n = data.records.len();
    let summary = SimulationSummary {
        n,
        observed,
        censored: n - observed,
        censoring_rate: (n - observed) as f64 / n as f64,
        target_censoring_rate: cfg.synthetic.censoring_rate,
        censor_hazard: data.censor_hazard,
        oracle_ctd: oracle_ctd(&data.sidecar, &data.records).ok(),
    };
    let km = kaplan_meier(&outcomes)?;
    write_atomic(&a.out.join("dataset.jsonl"), &jsonl_bytes(&data.records)?)?;
    write_atomic(&a.out.join("sidecar.jsonl"), &jsonl_bytes(&data.sidecar)?)?;
    write_atomic(
        &a.out.join("km.csv"),
        &curve_csv((0..=cfg.model.t_max).map(|t| (t, km.at(t))))?,
    )?;
    write_atomic(&a.out.join("summary.json"), &json_bytes(&summary)?)?;
    log::info!("simulated {n} patients, censoring {:.3}", summary.censoring_rate);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TrainSummary {
    pub n_train: usize,
    pub n_train_balanced: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: Option<usize>,
    pub best_val_ctd: Option<f64>,
}

const METRIC_COLUMNS: [&str; 9] = [
    "epoch", "phase", "loglik", "ranking", "supwcon", "mse", "total", "val_ctd", "val_mae",
];

pub fn cmd_train(base: &RunConfig, a: &TrainArgs) -> CliResult<TrainSummary> {
    let mut cfg = base.clone();
    if let Some(v) = a.warmup_epochs {
        cfg.train.warmup_epochs = v;
    }
    if let Some(v) = a.contrast_epochs {
        cfg.train.contrast_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.split_seed {
        cfg.split_seed = v;
    }
    cfg.validate()?;
    let dag = cfg.ontology()?;
    let records = load_dataset(&a.data, &dag, &cfg.model.limits())?;
    let splits = split(&records, &cfg.split, cfg.split_seed)?;
    let train_set = if cfg.balance {
        balance_train(&splits.train)?
    } else {
        splits.train.clone()
    };
    let mut model = Model::new(&cfg.model, dag, cfg.train.seed)?;
    prepare_dir(&a.out, &cfg)?;
    let report = train(&mut model, &train_set, &splits.val, &cfg.train)?;

    let split_dir = a.out.join("splits");
    fs::create_dir_all(&split_dir).map_err(io_err(&split_dir))?;
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let path = split_dir.join(format!("{name}.jsonl"));
        save_dataset(&path, part)?;
    }
    let log = if report.log.is_empty() {
        csv_header(&METRIC_COLUMNS)
    } else {
        csv_bytes(&report.log)?
    };
    write_atomic(&a.out.join("metrics.csv"), &log)?;
    let ck = Checkpoint::from_model(&model, report.best_epoch, report.best_val_ctd);
    write_atomic(&a.out.join("checkpoint.json"), ck.to_json().as_bytes())?;
    let summary = TrainSummary {
        n_train: splits.train.len(),
        n_train_balanced: train_set.len(),
        n_val: splits.val.len(),
        n_test: splits.test.len(),
        best_epoch: report.best_epoch,
        best_val_ctd: report.best_val_ctd,
    };
    write_atomic(&a.out.join("train_summary.json"), &json_bytes(&summary)?)?;
    Ok(summary)
}

fn load_model(path: &Path) -> CliResult<Model> {
    Ok(Checkpoint::load(path)?.into_model()?)
}

/// Loads a dataset under the checkpoint's limits. Records that do not fit
/// are reported as a compatibility error naming both configurations.
fn load_for_model(base: &RunConfig, model: &Model, data: &Path) -> CliResult<Vec<PatientRecord>> {
    let lim = model.cfg.limits();
    load_dataset(data, &model.dag, &lim).map_err(|e| match e {
        OtcError::Validation { .. } | OtcError::MissingCode(_) => {
            let run = base.model.limits();
            CliError::Core(OtcError::Compatibility(format!(
                "{} does not fit the checkpoint (t_max {}, max_visits {}, max_codes {}, demo_dim {}); \
                 run config has (t_max {}, max_visits {}, max_codes {}, demo_dim {}): {e}",
                data.display(),
                lim.t_max,
                lim.max_visits,
                lim.max_codes,
                lim.demo_dim,
                run.t_max,
                run.max_visits,
                run.max_codes,
                run.demo_dim
            )))
        }
        other => CliError::Core(other),
    })
}

/// Effective config for inference commands: the file config with the
/// checkpoint's model section.
fn inference_config(base: &RunConfig, model: &Model) -> RunConfig {
    RunConfig {
        model: model.cfg.clone(),
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub ctd: f64,
    pub mae: f64,
    pub n: usize,
    pub n_observed: usize,
}

fn load_sidecar(path: &Path) -> CliResult<Vec<SidecarEntry>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Core(OtcError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
        })
        .collect()
}

pub fn cmd_evaluate(base: &RunConfig, a: &EvaluateArgs) -> CliResult<EvalReport> {
    let (cfg, evals) = match (&a.checkpoint, &a.sidecar) {
        (Some(ck), None) => {
            let model = load_model(ck)?;
            let records = load_for_model(base, &model, &a.data)?;
            (inference_config(base, &model), eval_records(&model, &records)?)
        }
        (None, Some(sc)) => {
            base.validate()?;
            let dag = base.ontology()?;
            let records = load_dataset(&a.data, &dag, &base.model.limits())?;
            let sidecar = otcsurv::synthetic::align_sidecar(&load_sidecar(sc)?, &records)?;
            let evals = records
                .iter()
                .zip(&sidecar)
                .map(|(r, s)| {
                    let curve = true_survival(&s.true_hazard);
                    EvalRecord {
                        id: r.id.clone(),
                        t: r.t,
                        observed: r.observed(),
                        mu: curve.iter().sum(),
                        s: curve,
                    }
                })
                .collect();
            (base.clone(), evals)
        }
        _ => return Err(CliError::Usage("pass exactly one of --checkpoint or --sidecar".into())),
    };
    if evals.is_empty() {
        return Err(CliError::Core(OtcError::UndefinedMetric("empty dataset".into())));
    }
    let report = EvalReport {
        ctd: c_td(&evals)?,
        mae: mae_observed(&evals)?,
        n: evals.len(),
        n_observed: evals.iter().filter(|e| e.observed).count(),
    };
    prepare_dir(&a.out, &cfg)?;
    let t_max = cfg.model.t_max;
    for (subset, suffix) in [(Subset::All, "all"), (Subset::ObservedOnly, "observed")] {
        let outcomes: Vec<_> = evals
            .iter()
            .filter(|e| subset.includes(e.observed))
            .map(EvalRecord::outcome)
            .collect();
        if outcomes.is_empty() {
            continue;
        }
        let km = kaplan_meier(&outcomes)?;
        write_atomic(
            &a.out.join(format!("km_{suffix}.csv")),
            &curve_csv((0..=t_max).map(|t| (t, km.at(t))))?,
        )?;
        let mean = mean_survival_curve(&evals, subset)?;
        write_atomic(&a.out.join(format!("mean_surv_{suffix}.csv")), &curve_csv(prefixed_curve(&mean))?)?;
    }
    write_atomic(&a.out.join("metrics.json"), &json_bytes(&report)?)?;
    Ok(report)
}

pub fn cmd_predict(base: &RunConfig, a: &PredictArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let records = load_for_model(base, &model, &a.data)?;
    let preds = model.predict(&records)?;
    let t_max = model.cfg.t_max as usize;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend((1..=t_max).map(|t| format!("r{t}")));
    header.extend((1..=t_max).map(|t| format!("S{t}")));
    header.push("mu".into());
    w.write_record(&header)?;
    for (rec, p) in records.iter().zip(&preds) {
        let mut row = vec![rec.id.clone()];
        row.extend(p.r.iter().map(f64::to_string));
        row.extend(p.s.iter().map(f64::to_string));
        row.push(p.mu.to_string());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(format!("csv buffer: {e}")))?;
    prepare_dir(&a.out, &inference_config(base, &model))?;
    write_atomic(&a.out.join("predictions.csv"), &bytes)
}

pub fn cmd_explain(base: &RunConfig, a: &ExplainArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let records = load_for_model(base, &model, &a.data)?;
    let rec = records
        .iter()
        .find(|r| r.id == a.id)
        .ok_or_else(|| OtcError::Lookup(format!("patient {} not in {}", a.id, a.data.display())))?;
    let record = model.explain(rec)?;
    prepare_dir(&a.out, &inference_config(base, &model))?;
    write_atomic(&a.out.join(format!("attention_{}.json", a.id)), &json_bytes(&record)?)
}

/// Flushes stderr-bound diagnostics; used by the binary on failure.
pub fn report_error(err: &CliError) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "error: {err}");
}
