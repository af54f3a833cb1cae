//! Survival training objectives and their weighted combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{add_all, Tape, Var};
use crate::contrast::Outcome;
use crate::error::{OtcError, Result};
use crate::tensor::Tensor;

/// Negative log-likelihood style loss for one instance.
///
/// Observed at `t`: `-Σ_{s<t} ln S(s) - Σ_{s≥t} ln(1 - S(s))`.
/// Censored at `t`: `-Σ_{s≤t} S(s)`, or `-Σ_{s≤t} ln S(s)` when
/// `censored_log` is set.
pub fn loglik_loss<'t>(s: Var<'t>, outcome: Outcome, censored_log: bool) -> Result<Var<'t>> {
    let horizon = s.value().len();
    let t = outcome.t as usize;
    if t == 0 || t > horizon {
        return Err(OtcError::Bounds {
            index: t,
            len: horizon,
        });
    }
    if let Some(bad) = s.value().data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(OtcError::Contract(format!("survival value {bad} outside (0, 1)")));
    }
    let tape = s.tape();
    let mut terms = Vec::with_capacity(2);
    if outcome.observed {
        if t > 1 {
            terms.push(s.slice_cols(0, t - 1)?.log()?.sum());
        }
        terms.push(s.slice_cols(t - 1, horizon - t + 1)?.one_minus().log()?.sum());
    } else {
        let head = s.slice_cols(0, t)?;
        terms.push(if censored_log { head.log()?.sum() } else { head.sum() });
    }
    Ok(add_all(&terms)?
        .unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
        .neg())
}

/// One `(i, j)` comparison per observed `i` with `t_j > t_i`, partners drawn
/// uniformly with replacement. Instances without a later partner are
/// skipped.
pub fn sample_ranking_pairs<R: Rng>(outcomes: &[Outcome], rng: &mut R) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, oi) in outcomes.iter().enumerate() {
        if !oi.observed {
            continue;
        }
        let later: Vec<usize> = (0..outcomes.len())
            .filter(|&j| outcomes[j].t > oi.t)
            .collect();
        if later.is_empty() {
            continue;
        }
        pairs.push((i, later[rng.gen_range(0..later.len())]));
    }
    pairs
}

/// `Σ max(0, (t_j - t_i) - (μ_j - μ_i))` over the given pairs.
pub fn ranking_loss_pairs<'t>(
    tape: &'t Tape,
    mu: &[Var<'t>],
    outcomes: &[Outcome],
    pairs: &[(usize, usize)],
) -> Result<Var<'t>> {
    let hinges = pairs
        .iter()
        .map(|&(i, j)| {
            let gap = f64::from(outcomes[j].t) - f64::from(outcomes[i].t);
            Ok(mu[i].sub(mu[j])?.add_scalar(gap).relu())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(add_all(&hinges)?.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

pub fn ranking_loss<'t, R: Rng>(
    tape: &'t Tape,
    mu: &[Var<'t>],
    outcomes: &[Outcome],
    rng: &mut R,
) -> Result<Var<'t>> {
    let pairs = sample_ranking_pairs(outcomes, rng);
    ranking_loss_pairs(tape, mu, outcomes, &pairs)
}

/// Mean squared duration error over observed instances; zero without any.
pub fn mse_loss<'t>(tape: &'t Tape, mu: &[Var<'t>], outcomes: &[Outcome]) -> Result<Var<'t>> {
    let sq = mu
        .iter()
        .zip(outcomes)
        .filter(|(_, o)| o.observed)
        .map(|(m, o)| {
            let err = m.add_scalar(-f64::from(o.t));
            err.mul(err)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = sq.len();
    Ok(match add_all(&sq)? {
        Some(total) => total.scale(1.0 / n as f64),
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub loglik: f64,
    pub ranking: f64,
    pub supwcon: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loglik: 1.0,
            ranking: 1.0,
            supwcon: 0.1,
            mse: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.loglik, self.ranking, self.supwcon, self.mse];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OtcError::Config(format!("loss weights must be nonnegative: {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(OtcError::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Contrastive term switched off.
    Warmup,
    Contrastive,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Contrastive => "contrastive",
        })
    }
}

/// The four batch losses, each a one-element value.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents<'t> {
    pub loglik: Var<'t>,
    pub ranking: Var<'t>,
    pub supwcon: Option<Var<'t>>,
    pub mse: Var<'t>,
}

impl LossComponents<'_> {
    /// `(loglik, ranking, supwcon, mse)` values.
    pub fn values(&self) -> [f64; 4] {
        [
            self.loglik.item(),
            self.ranking.item(),
            self.supwcon.map_or(0.0, |v| v.item()),
            self.mse.item(),
        ]
    }
}

pub fn total_loss<'t>(
    parts: &LossComponents<'t>,
    weights: &LossWeights,
    phase: Phase,
) -> Result<Var<'t>> {
    weights.validate()?;
    let mut terms = vec![
        parts.loglik.scale(weights.loglik),
        parts.ranking.scale(weights.ranking),
        parts.mse.scale(weights.mse),
    ];
    if let (Phase::Contrastive, Some(sc)) = (phase, parts.supwcon) {
        terms.push(sc.scale(weights.supwcon));
    }
    Ok(add_all(&terms)?.expect("non-empty terms"))
}
