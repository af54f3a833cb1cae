//! Discrete-time survival head and survival-curve algebra.
//!
//! The head outputs `r(t) = 1 - λ(t)` per interval through an elementwise
//! sigmoid, `S(t) = Π_{s≤t} r(s)` with `S(0) = 1`, and the expected
//! duration `μ = Σ_t S(t)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Var};
use crate::error::{OtcError, Result};
use crate::layers::Linear;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutput {
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub mu: f64,
}

impl SurvivalOutput {
    /// Builds the curve from hazard complements.
    pub fn from_complements(r: Vec<f64>) -> Result<Self> {
        if r.is_empty() {
            return Err(OtcError::Config("empty horizon".into()));
        }
        if let Some(bad) = r.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(OtcError::Numeric(format!("hazard complement {bad} outside [0, 1]")));
        }
        let s: Vec<f64> = r
            .iter()
            .scan(1.0, |acc, v| {
                *acc *= v;
                Some(*acc)
            })
            .collect();
        let mu = s.iter().sum();
        Ok(Self { r, s, mu })
    }

    pub fn horizon(&self) -> usize {
        self.r.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.r.len() {
            return Err(OtcError::Bounds {
                index: t,
                len: self.r.len(),
            });
        }
        Ok(())
    }

    /// `S(t)` with `S(0) = 1`.
    pub fn survival_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.s[t - 1]
        }
    }

    /// Discrete hazard `λ(t) = 1 - r(t)` for `1 ≤ t ≤ T_max`.
    pub fn hazard(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(1.0 - self.r[t - 1])
    }

    /// Hazard recovered from the curve, `(S(t-1) - S(t)) / S(t-1)`.
    pub fn hazard_from_survival(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        let prev = self.survival_at(t - 1);
        Ok((prev - self.survival_at(t)) / prev)
    }

    /// Event probability mass `f(t) = S(t-1) - S(t)`.
    pub fn event_pmf(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.survival_at(t - 1) - self.survival_at(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurvivalHeadConfig {
    /// Hidden widths between the patient vector and the `T_max` outputs.
    pub hidden: Vec<usize>,
}

impl Default for SurvivalHeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurvivalHead {
    layers: Vec<Linear>,
    pub horizon: usize,
}

/// Differentiable head outputs for one patient.
#[derive(Debug, Clone, Copy)]
pub struct SurvivalVars<'t> {
    pub r: Var<'t>,
    pub s: Var<'t>,
    pub mu: Var<'t>,
}

impl SurvivalVars<'_> {
    pub fn output(&self) -> SurvivalOutput {
        SurvivalOutput {
            r: self.r.value().data().to_vec(),
            s: self.s.value().data().to_vec(),
            mu: self.mu.item(),
        }
    }
}

impl SurvivalHead {
    pub fn new<R: Rng>(
        in_dim: usize,
        cfg: &SurvivalHeadConfig,
        horizon: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(OtcError::Config("t_max must be at least 1".into()));
        }
        if cfg.hidden.contains(&0) {
            return Err(OtcError::Config("survival head widths must be positive".into()));
        }
        let mut dims = vec![in_dim];
        dims.extend(&cfg.hidden);
        dims.push(horizon);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("surv.layer{i}"), w[0], w[1], store, rng))
            .collect();
        Ok(Self { layers, horizon })
    }

    /// Maps the patient vector to `r`, `S` and `μ`.
    pub fn predict<'t>(&self, p: &Bound<'t>, u: Var<'t>) -> Result<SurvivalVars<'t>> {
        let mut x = u;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x)?;
            if i < last {
                x = x.relu();
            }
        }
        if !x.value().is_finite() {
            return Err(OtcError::Numeric("survival head produced non-finite logits".into()));
        }
        let r = x.sigmoid();
        let s = r.cumprod();
        let mu = s.sum();
        Ok(SurvivalVars { r, s, mu })
    }

    /// Same as [`Self::predict`] with injected pre-squash logits.
    pub fn from_logits<'t>(logits: Var<'t>) -> SurvivalVars<'t> {
        let r = logits.sigmoid();
        let s = r.cumprod();
        let mu = s.sum();
        SurvivalVars { r, s, mu }
    }
}
