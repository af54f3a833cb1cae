//! Patient records, JSONL ingestion, splitting, balancing and batching.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::Outcome;
use crate::error::{OtcError, Result};
use crate::ontology::OntologyDag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub id: String,
    /// Ordered visits, each a set of leaf code ids.
    pub visits: Vec<Vec<String>>,
    pub demo: Vec<f64>,
    /// Observed: intervals up to the day before the event. Censored:
    /// intervals up to the censoring day.
    pub t: u32,
    /// `1` observed, `0` censored.
    pub k: u8,
}

impl PatientRecord {
    pub fn observed(&self) -> bool {
        self.k == 1
    }

    pub fn outcome(&self) -> Outcome {
        Outcome::new(self.t, self.observed())
    }
}

/// Shape limits every record must respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordLimits {
    pub t_max: u32,
    pub max_visits: usize,
    pub max_codes: usize,
    pub demo_dim: usize,
}

pub fn validate_record(rec: &PatientRecord, dag: &OntologyDag, lim: &RecordLimits) -> std::result::Result<(), String> {
    if rec.id.is_empty() {
        return Err("empty id".into());
    }
    if rec.visits.is_empty() {
        return Err("no visits".into());
    }
    if rec.visits.len() > lim.max_visits {
        return Err(format!("{} visits exceed the limit {}", rec.visits.len(), lim.max_visits));
    }
    for (v, visit) in rec.visits.iter().enumerate() {
        if visit.is_empty() {
            return Err(format!("visit {v} is empty"));
        }
        if visit.len() > lim.max_codes {
            return Err(format!("visit {v} has {} codes, limit {}", visit.len(), lim.max_codes));
        }
        let mut seen = HashSet::new();
        for code in visit {
            if !dag.is_leaf(code) {
                return Err(format!("visit {v}: unknown leaf code {code:?}"));
            }
            if !seen.insert(code) {
                return Err(format!("visit {v}: duplicate code {code:?}"));
            }
        }
    }
    if rec.demo.len() != lim.demo_dim {
        return Err(format!("demo has {} values, expected {}", rec.demo.len(), lim.demo_dim));
    }
    if rec.demo.iter().any(|d| !d.is_finite()) {
        return Err("non-finite demographic value".into());
    }
    if rec.t == 0 || rec.t > lim.t_max {
        return Err(format!("t = {} outside [1, {}]", rec.t, lim.t_max));
    }
    if rec.k > 1 {
        return Err(format!("k = {} is not 0 or 1", rec.k));
    }
    Ok(())
}

/// Parses and validates JSON Lines. Blank lines are skipped; line numbers
/// in diagnostics are 1-based.
pub fn parse_dataset<R: BufRead>(reader: R, dag: &OntologyDag, lim: &RecordLimits) -> Result<Vec<PatientRecord>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| OtcError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let invalid = |reason: String| OtcError::Validation {
            line: lineno,
            id: rec.id.clone(),
            reason,
        };
        validate_record(&rec, dag, lim).map_err(invalid)?;
        if !ids.insert(rec.id.clone()) {
            return Err(invalid("duplicate id".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, dag: &OntologyDag, lim: &RecordLimits) -> Result<Vec<PatientRecord>> {
    let file = std::fs::File::open(path)?;
    parse_dataset(BufReader::new(file), dag, lim)
}

pub fn write_dataset<W: Write>(mut w: W, records: &[PatientRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut w, records)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(OtcError::Config(format!("split fractions must be nonnegative and sum to 1: {f:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<PatientRecord>,
    pub val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Seeded split stratified on the event flag. Each stratum is cut at
/// rounded cumulative fractions.
pub fn split(records: &[PatientRecord], fractions: &SplitFractions, seed: u64) -> Result<Splits> {
    fractions.validate()?;
    let f = [fractions.train, fractions.val, fractions.test];
    let parts = f.iter().filter(|x| **x > 0.0).count();
    if records.len() < parts {
        return Err(OtcError::Config(format!(
            "{} records cannot fill {parts} splits",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: [Vec<PatientRecord>; 3] = Default::default();
    for flag in [0u8, 1] {
        let mut stratum: Vec<&PatientRecord> = records.iter().filter(|r| r.k == flag).collect();
        stratum.shuffle(&mut rng);
        let m = stratum.len() as f64;
        let (mut start, mut cum) = (0usize, 0.0);
        for (b, frac) in f.iter().enumerate() {
            cum += frac;
            let end = if b == 2 { stratum.len() } else { (m * cum).round() as usize };
            buckets[b].extend(stratum[start..end].iter().map(|r| (*r).clone()));
            start = end;
        }
    }
    for b in &mut buckets {
        b.shuffle(&mut rng);
    }
    let [train, val, test] = buckets;
    Ok(Splits { train, val, test })
}

/// Duplicates the minority event class round-robin until the classes differ
/// by at most one. Majority records keep their positions.
pub fn balance_train(train: &[PatientRecord]) -> Result<Vec<PatientRecord>> {
    let observed: Vec<&PatientRecord> = train.iter().filter(|r| r.observed()).collect();
    let censored: Vec<&PatientRecord> = train.iter().filter(|r| !r.observed()).collect();
    if observed.is_empty() || censored.is_empty() {
        return Err(OtcError::Balancing(format!(
            "need both classes, got {} observed and {} censored",
            observed.len(),
            censored.len()
        )));
    }
    let (minority, target) = if observed.len() <= censored.len() {
        (&observed, censored.len())
    } else {
        (&censored, observed.len())
    };
    let mut out = train.to_vec();
    out.extend((0..target - minority.len()).map(|i| minority[i % minority.len()].clone()));
    Ok(out)
}

/// Seeded shuffle of `0..n` cut into batches of `batch_size`; the last batch
/// may be smaller.
pub fn make_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(OtcError::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
