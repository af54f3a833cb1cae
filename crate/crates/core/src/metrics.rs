//! Evaluation metrics: time-dependent concordance, MAE on observed
//! instances, Kaplan-Meier and mean predicted survival curves.

use serde::{Deserialize, Serialize};

use crate::contrast::Outcome;
use crate::error::{OtcError, Result};

/// One patient's prediction paired with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub t: u32,
    pub observed: bool,
    /// `Ŝ(1..=T_max)`.
    pub s: Vec<f64>,
    pub mu: f64,
}

impl EvalRecord {
    pub fn outcome(&self) -> Outcome {
        Outcome::new(self.t, self.observed)
    }

    fn survival_at(&self, t: u32) -> Result<f64> {
        let idx = t as usize;
        if idx == 0 || idx > self.s.len() {
            return Err(OtcError::Bounds {
                index: idx,
                len: self.s.len(),
            });
        }
        Ok(self.s[idx - 1])
    }
}

/// Time-dependent concordance.
///
/// Comparable pairs are `(i, j)` with `k_i = 1` and `t_i < t_j`; the pair is
/// concordant when `Ŝ_i(t_i) < Ŝ_j(t_i)` and ties count one half.
pub fn c_td(records: &[EvalRecord]) -> Result<f64> {
    let mut times: Vec<u32> = records.iter().filter(|r| r.observed).map(|r| r.t).collect();
    times.sort_unstable();
    times.dedup();
    let mut concordant = 0.0;
    let mut comparable = 0u64;
    for &tau in &times {
        let mut later = records
            .iter()
            .filter(|r| r.t > tau)
            .map(|r| r.survival_at(tau))
            .collect::<Result<Vec<f64>>>()?;
        if later.is_empty() {
            continue;
        }
        later.sort_by(f64::total_cmp);
        for r in records.iter().filter(|r| r.observed && r.t == tau) {
            let v = r.survival_at(tau)?;
            let below_or_eq = later.partition_point(|x| *x <= v);
            let below = later.partition_point(|x| *x < v);
            let above = later.len() - below_or_eq;
            concordant += above as f64 + 0.5 * (below_or_eq - below) as f64;
            comparable += later.len() as u64;
        }
    }
    if comparable == 0 {
        return Err(OtcError::UndefinedMetric("no comparable pairs for C^td".into()));
    }
    Ok(concordant / comparable as f64)
}

/// Mean `|t - μ̂|` over observed records.
pub fn mae_observed(records: &[EvalRecord]) -> Result<f64> {
    let errs: Vec<f64> = records
        .iter()
        .filter(|r| r.observed)
        .map(|r| (f64::from(r.t) - r.mu).abs())
        .collect();
    if errs.is_empty() {
        return Err(OtcError::UndefinedMetric("no observed records for MAE".into()));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Product-limit step curve; `survival[i]` holds on `[time_points[i], next)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub time_points: Vec<u32>,
    pub survival: Vec<f64>,
}

impl KmCurve {
    /// Step-function value at any integer time.
    pub fn at(&self, t: u32) -> f64 {
        match self.time_points.partition_point(|p| *p <= t) {
            0 => 1.0,
            i => self.survival[i - 1],
        }
    }
}

/// Kaplan-Meier estimate over all distinct record times, preceded by
/// `S(0) = 1`. A record censored at `t` stays at risk through `t`.
pub fn kaplan_meier(outcomes: &[Outcome]) -> Result<KmCurve> {
    if outcomes.is_empty() {
        return Err(OtcError::UndefinedMetric("Kaplan-Meier of an empty set".into()));
    }
    let mut times: Vec<u32> = outcomes.iter().map(|o| o.t).collect();
    times.sort_unstable();
    times.dedup();
    let mut curve = KmCurve {
        time_points: vec![0],
        survival: vec![1.0],
    };
    let mut s = 1.0;
    for &t in &times {
        let at_risk = outcomes.iter().filter(|o| o.t >= t).count();
        let events = outcomes.iter().filter(|o| o.observed && o.t == t).count();
        s = s * (at_risk - events) as f64 / at_risk as f64;
        curve.time_points.push(t);
        curve.survival.push(s);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    ObservedOnly,
}

impl Subset {
    pub fn includes(self, observed: bool) -> bool {
        matches!(self, Subset::All) || observed
    }
}

/// Pointwise mean of predicted curves over the subset.
pub fn mean_survival_curve(records: &[EvalRecord], subset: Subset) -> Result<Vec<f64>> {
    let chosen: Vec<&EvalRecord> = records.iter().filter(|r| subset.includes(r.observed)).collect();
    let Some(first) = chosen.first() else {
        return Err(OtcError::UndefinedMetric(format!("no records in subset {subset:?}")));
    };
    let mut mean = vec![0.0; first.s.len()];
    for r in &chosen {
        if r.s.len() != mean.len() {
            return Err(OtcError::Dimension {
                op: "mean_survival_curve",
                left: vec![mean.len()],
                right: vec![r.s.len()],
            });
        }
        mean.iter_mut().zip(&r.s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= chosen.len() as f64);
    Ok(mean)
}
