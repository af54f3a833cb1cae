//! Two-phase training loop with RMSprop and best-validation selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::contrast::{supwcon_loss, Outcome};
use crate::data::{make_batches, PatientRecord};
use crate::error::{OtcError, Result};
use crate::losses::{loglik_loss, mse_loss, ranking_loss, total_loss, LossComponents, LossWeights, Phase};
use crate::metrics::{c_td, mae_observed, EvalRecord};
use crate::model::{BatchContext, DemoNorm, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// RMSprop smoothing constant.
    pub alpha: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 2e-5,
            alpha: 0.99,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.alpha)
            && self.eps > 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(OtcError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub warmup_epochs: usize,
    pub contrast_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Use `-Σ ln S` for censored instances instead of `-Σ S`.
    pub censored_log: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 20,
            contrast_epochs: 25,
            batch_size: 32,
            seed: 1,
            weights: LossWeights::default(),
            censored_log: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(OtcError::Config("batch_size must be at least 2".into()));
        }
        self.weights.validate()?;
        self.optimizer.validate()
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch <= self.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Contrastive
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub loglik: f64,
    pub ranking: f64,
    /// Absent during warm-up.
    pub supwcon: Option<f64>,
    pub mse: f64,
    pub total: f64,
    pub val_ctd: Option<f64>,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept, if any validation C^td was defined.
    pub best_epoch: Option<usize>,
    pub best_val_ctd: Option<f64>,
}

/// RMSprop with L2 decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct RmsProp {
    cfg: OptimizerConfig,
    square_avg: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        Self {
            cfg: cfg.clone(),
            square_avg: store.ids().map(|id| vec![0.0; store.value(id).len()]).collect(),
        }
    }

    /// Clips the accumulated gradients and applies one update.
    pub fn step(&mut self, store: &mut ParamStore) {
        let norm = store.grad_norm();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let grad: Vec<f64> = store.grad(id).to_vec();
            let sq = &mut self.square_avg[slot];
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i] * clip + self.cfg.weight_decay * value[i];
                sq[i] = self.cfg.alpha * sq[i] + (1.0 - self.cfg.alpha) * g * g;
                value[i] -= self.cfg.lr * g / (sq[i].sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Builds the weighted batch objective; returns it with the unweighted
/// component values `(loglik, ranking, supwcon, mse)`.
pub fn batch_objective<'t, R: Rng>(
    model: &Model,
    ctx: &BatchContext<'t>,
    batch: &[&PatientRecord],
    phase: Phase,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<(Var<'t>, [f64; 4])> {
    let tape = ctx.params.tape();
    let contrastive = phase == Phase::Contrastive && schedule.weights.supwcon > 0.0;
    let outcomes: Vec<Outcome> = batch.iter().map(|r| r.outcome()).collect();
    let mut nll = Vec::with_capacity(batch.len());
    let mut mu = Vec::with_capacity(batch.len());
    let mut z = Vec::new();
    for (rec, out) in batch.iter().zip(&outcomes) {
        let f = model.forward(ctx, rec)?;
        nll.push(loglik_loss(f.surv.s, *out, schedule.censored_log)?);
        mu.push(f.surv.mu);
        if contrastive {
            z.push(model.project(ctx, f.u)?);
        }
    }
    let parts = LossComponents {
        loglik: crate::autodiff::add_all(&nll)?.expect("non-empty batch"),
        ranking: ranking_loss(tape, &mu, &outcomes, rng)?,
        supwcon: if contrastive {
            Some(supwcon_loss(
                &z,
                &outcomes,
                model.cfg.contrast.tau_pos,
                model.cfg.contrast.window,
            )?)
        } else {
            None
        },
        mse: mse_loss(tape, &mu, &outcomes)?,
    };
    let total = total_loss(&parts, &schedule.weights, phase)?;
    Ok((total, parts.values()))
}

pub fn eval_records(model: &Model, records: &[PatientRecord]) -> Result<Vec<EvalRecord>> {
    Ok(model
        .predict(records)?
        .into_iter()
        .zip(records)
        .map(|(out, r)| EvalRecord {
            id: r.id.clone(),
            t: r.t,
            observed: r.observed(),
            s: out.s,
            mu: out.mu,
        })
        .collect())
}

fn check_finite(epoch: usize, names: &[&str], values: &[f64]) -> Result<()> {
    match names.iter().zip(values).find(|(_, v)| !v.is_finite()) {
        Some((term, _)) => Err(OtcError::Divergence {
            epoch,
            term: term.to_string(),
        }),
        None => Ok(()),
    }
}

/// Trains `model` in place and restores the parameters of the epoch with
/// the best validation C^td. Demographic standardization is fit on
/// `train`.
pub fn train(
    model: &mut Model,
    train: &[PatientRecord],
    val: &[PatientRecord],
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(OtcError::Config("training set is empty".into()));
    }
    model.demo_norm = DemoNorm::fit(train, model.cfg.encoder.demo_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut opt = RmsProp::new(&schedule.optimizer, &model.store);
    let mut report = TrainReport {
        log: Vec::new(),
        best_epoch: None,
        best_val_ctd: None,
    };
    let mut best = None;
    let epochs = schedule.warmup_epochs + schedule.contrast_epochs;
    for epoch in 1..=epochs {
        let phase = schedule.phase(epoch);
        let batches = make_batches(train.len(), schedule.batch_size, &mut rng)?;
        let mut sums = [0.0; 5];
        for idx in &batches {
            let batch: Vec<&PatientRecord> = idx.iter().map(|&i| &train[i]).collect();
            let tape = Tape::new();
            let ctx = model.bind(&tape)?;
            let (loss, parts) = batch_objective(model, &ctx, &batch, phase, schedule, &mut rng)
                .map_err(|e| match e {
                    OtcError::Numeric(_) | OtcError::Contract(_) | OtcError::Domain(_) => {
                        OtcError::Divergence {
                            epoch,
                            term: format!("forward ({e})"),
                        }
                    }
                    other => other,
                })?;
            let total = loss.item();
            check_finite(epoch, &["loglik", "ranking", "supwcon", "mse", "total"], &[
                parts[0], parts[1], parts[2], parts[3], total,
            ])?;
            let grads = tape.backward(loss)?;
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store);
            if !model.store.grad_norm().is_finite() {
                return Err(OtcError::Divergence {
                    epoch,
                    term: "gradient".into(),
                });
            }
            opt.step(&mut model.store);
            for (s, v) in sums.iter_mut().zip(parts.iter().chain([&total])) {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        let (val_ctd, val_mae) = if val.is_empty() {
            (None, None)
        } else {
            let evals = eval_records(model, val)?;
            (c_td(&evals).ok(), mae_observed(&evals).ok())
        };
        if let Some(c) = val_ctd {
            if report.best_val_ctd.is_none_or(|b| c > b) {
                report.best_val_ctd = Some(c);
                report.best_epoch = Some(epoch);
                best = Some(model.store.snapshot(|_| true));
            }
        }
        let row = EpochMetrics {
            epoch,
            phase,
            loglik: sums[0] / nb,
            ranking: sums[1] / nb,
            supwcon: (phase == Phase::Contrastive && schedule.weights.supwcon > 0.0).then_some(sums[2] / nb),
            mse: sums[3] / nb,
            total: sums[4] / nb,
            val_ctd,
            val_mae,
        };
        log::info!(
            "epoch {epoch} [{phase}] total {:.4} val_ctd {}",
            row.total,
            val_ctd.map_or("-".into(), |c| format!("{c:.4}"))
        );
        report.log.push(row);
    }
    if let Some(snap) = best {
        model.store.restore(&snap);
    }
    Ok(report)
}
