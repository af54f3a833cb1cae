//! Synthetic EHR cohorts with a known multiplicative hazard law.
//!
//! A patient either carries one designated risk code somewhere in its
//! visit history or none. Its per-interval event probability is the base
//! hazard times the multipliers of the risk codes present. Event and
//! censoring intervals are independent geometric draws; the censoring
//! hazard is solved so the expected censored fraction hits the target.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{PatientRecord, RecordLimits};
use crate::error::{OtcError, Result};
use crate::metrics::{c_td, EvalRecord};
use crate::ontology::OntologyDag;

/// Per-interval probabilities are kept inside `[EPS, 1 - EPS]`.
pub const HAZARD_EPS: f64 = 1e-6;

const MAX_CODES_PER_VISIT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub censoring_rate: f64,
    pub risk_coefficients: BTreeMap<String, f64>,
    pub base_hazard: f64,
    /// Probability that a patient carries one of the risk codes.
    pub risk_prevalence: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            censoring_rate: 0.6,
            risk_coefficients: BTreeMap::from([("428.0".into(), 8.0), ("428.3".into(), 8.0)]),
            base_hazard: 0.08,
            risk_prevalence: 0.4,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, dag: &OntologyDag) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(OtcError::Config(format!("synthetic.{name} must lie in (0, 1), got {v}")))
            }
        };
        prob("base_hazard", self.base_hazard)?;
        prob("censoring_rate", self.censoring_rate)?;
        if !(0.0..=1.0).contains(&self.risk_prevalence) {
            return Err(OtcError::Config("synthetic.risk_prevalence must lie in [0, 1]".into()));
        }
        if self.n_patients == 0 {
            return Err(OtcError::Config("synthetic.n_patients must be positive".into()));
        }
        if self.risk_coefficients.len() < 2 {
            return Err(OtcError::Config("need at least two designated risk codes".into()));
        }
        for (code, m) in &self.risk_coefficients {
            if !dag.is_leaf(code) {
                return Err(OtcError::Config(format!("risk code {code:?} is not a leaf")));
            }
            if !(m.is_finite() && *m > 0.0) {
                return Err(OtcError::Config(format!("risk multiplier for {code} must be positive")));
            }
        }
        if dag.num_leaves() <= self.risk_coefficients.len() {
            return Err(OtcError::Config("no non-risk leaves left for background codes".into()));
        }
        Ok(())
    }

    fn clamp(h: f64) -> f64 {
        h.clamp(HAZARD_EPS, 1.0 - HAZARD_EPS)
    }

    /// `(weight, hazard)` for the baseline group and each risk code.
    fn groups(&self) -> Vec<(f64, f64)> {
        let share = self.risk_prevalence / self.risk_coefficients.len() as f64;
        std::iter::once((1.0 - self.risk_prevalence, Self::clamp(self.base_hazard)))
            .chain(
                self.risk_coefficients
                    .values()
                    .map(|m| (share, Self::clamp(self.base_hazard * m))),
            )
            .collect()
    }
}

/// Ground truth kept beside each record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub id: String,
    pub true_hazard: Vec<f64>,
    /// Day the event is recorded (`interval + 1`), when it falls inside the
    /// horizon.
    pub event_day: Option<u32>,
    /// Censoring day, capped at the horizon.
    pub censor_day: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<PatientRecord>,
    pub sidecar: Vec<SidecarEntry>,
    /// Solved per-interval censoring probability.
    pub censor_hazard: f64,
}

/// Probability that the event lands inside the horizon no later than the
/// censoring interval.
fn observed_probability(h: f64, c: f64, t_max: u32) -> f64 {
    let q = (1.0 - h) * (1.0 - c);
    (0..t_max).map(|s| h * q.powi(s as i32)).sum()
}

/// Expected censored fraction for a censoring hazard `c`.
pub fn expected_censoring(spec: &SyntheticSpec, c: f64, t_max: u32) -> f64 {
    1.0 - spec
        .groups()
        .iter()
        .map(|(w, h)| w * observed_probability(*h, c, t_max))
        .sum::<f64>()
}

/// Bisects the censoring hazard. A target below the administrative
/// censoring floor yields `0`.
pub fn solve_censor_hazard(spec: &SyntheticSpec, t_max: u32) -> Result<f64> {
    let target = spec.censoring_rate;
    if expected_censoring(spec, 0.0, t_max) >= target {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0 - HAZARD_EPS);
    if expected_censoring(spec, hi, t_max) < target {
        return Err(OtcError::Config(format!(
            "censoring rate {target} is unreachable with these hazards"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected_censoring(spec, mid, t_max) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn geometric<R: Rng>(rng: &mut R, p: f64) -> u32 {
    if p <= 0.0 {
        return u32::MAX;
    }
    let mut k = 1;
    while !rng.gen_bool(p) {
        k += 1;
        if k == u32::MAX {
            break;
        }
    }
    k
}

fn demographics<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let age = Normal::new(59.47f64, 15.0).expect("valid normal");
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    (0..dim)
        .map(|i| match i {
            0 => age.sample(rng).clamp(18.0, 95.0),
            1 => f64::from(u8::from(rng.gen_bool(0.52))),
            _ => std.sample(rng),
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec, dag: &OntologyDag, lim: &RecordLimits) -> Result<SyntheticData> {
    spec.validate(dag)?;
    let t_max = lim.t_max;
    let censor_hazard = solve_censor_hazard(spec, t_max)?;
    let risk: Vec<(&String, f64)> = spec.risk_coefficients.iter().map(|(c, m)| (c, *m)).collect();
    let background: Vec<&str> = dag
        .leaves()
        .filter(|l| !spec.risk_coefficients.contains_key(*l))
        .collect();
    let per_visit = MAX_CODES_PER_VISIT.min(lim.max_codes).min(background.len());

    let mut records = Vec::with_capacity(spec.n_patients);
    let mut sidecar = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);

        let n_visits = rng.gen_range(1..=lim.max_visits);
        let mut visits: Vec<Vec<String>> = (0..n_visits)
            .map(|_| {
                let m = rng.gen_range(1..=per_visit);
                background
                    .choose_multiple(&mut rng, m)
                    .map(|c| c.to_string())
                    .collect()
            })
            .collect();
        let mut multiplier = 1.0;
        if rng.gen_bool(spec.risk_prevalence) {
            let (code, m) = risk[rng.gen_range(0..risk.len())];
            let visit = &mut visits[rng.gen_range(0..n_visits)];
            if visit.len() == lim.max_codes {
                visit.pop();
            }
            visit.push(code.clone());
            multiplier = m;
        }
        let demo = demographics(&mut rng, lim.demo_dim);
        let h = SyntheticSpec::clamp(spec.base_hazard * multiplier);
        let event = geometric(&mut rng, h);
        let censor = geometric(&mut rng, censor_hazard);

        let observed = event <= censor && event <= t_max;
        let t = if observed { event } else { censor.min(t_max) };
        let id = format!("P{i:05}");
        sidecar.push(SidecarEntry {
            id: id.clone(),
            true_hazard: vec![h; t_max as usize],
            event_day: (event <= t_max).then_some(event + 1),
            censor_day: censor.min(t_max),
        });
        records.push(PatientRecord {
            id,
            visits,
            demo,
            t,
            k: u8::from(observed),
        });
    }
    Ok(SyntheticData {
        records,
        sidecar,
        censor_hazard,
    })
}

/// True survival curve `S(t) = Π_{s≤t} (1 - h_s)`.
pub fn true_survival(hazard: &[f64]) -> Vec<f64> {
    hazard
        .iter()
        .scan(1.0, |s, h| {
            *s *= 1.0 - h;
            Some(*s)
        })
        .collect()
}

/// C^td of the ground-truth curves on these records.
pub fn oracle_ctd(sidecar: &[SidecarEntry], records: &[PatientRecord]) -> Result<f64> {
    if sidecar.len() != records.len() {
        return Err(OtcError::Lookup(format!(
            "sidecar has {} entries for {} records",
            sidecar.len(),
            records.len()
        )));
    }
    let evals = sidecar
        .iter()
        .zip(records)
        .map(|(sc, r)| {
            if sc.id != r.id {
                return Err(OtcError::Lookup(format!("sidecar id {} does not match record {}", sc.id, r.id)));
            }
            let s = true_survival(&sc.true_hazard);
            Ok(EvalRecord {
                id: r.id.clone(),
                t: r.t,
                observed: r.observed(),
                mu: s.iter().sum(),
                s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    c_td(&evals)
}

/// Sidecar entries for a subset of records, in record order.
pub fn align_sidecar(sidecar: &[SidecarEntry], records: &[PatientRecord]) -> Result<Vec<SidecarEntry>> {
    let by_id: BTreeMap<&str, &SidecarEntry> = sidecar.iter().map(|s| (s.id.as_str(), s)).collect();
    records
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| OtcError::Lookup(format!("no sidecar entry for {}", r.id)))
        })
        .collect()
}
