//! Small reusable building blocks.

use rand::Rng;

use crate::autodiff::{Bound, ParamId, ParamStore, Var};
use crate::error::Result;

/// Affine map `x·W + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng),
            b: store.add_filled(format!("{name}.b"), out_dim, 0.0),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.w))?.add_bias(p.get(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: &str, dim: usize, store: &mut ParamStore) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), dim, 1.0),
            bias: store.add_filled(format!("{name}.bias"), dim, 0.0),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gain), p.get(self.bias), Self::EPS)
    }
}

/// Attention-weighted average of the rows of a matrix.
///
/// Energies are `relu(x·W1 + b1)·W2`, normalized by a masked softmax.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    hidden: Linear,
    score: ParamId,
}

impl AttentionPool {
    pub fn new<R: Rng>(
        name: &str,
        in_dim: usize,
        hidden: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(&format!("{name}.hidden"), in_dim, hidden, store, rng),
            score: store.add_glorot(format!("{name}.score"), hidden, 1, rng),
        }
    }

    pub fn ids(&self) -> (ParamId, ParamId, ParamId) {
        (self.hidden.w, self.hidden.b, self.score)
    }

    /// Returns the pooled `1×d` row and the weights. The caller guarantees
    /// at least one row is unmasked.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        rows: Var<'t>,
        mask: &[bool],
    ) -> Result<(Var<'t>, Vec<f64>)> {
        let energy = self
            .hidden
            .forward(p, rows)?
            .relu()
            .matmul(p.get(self.score))?
            .transpose();
        let alpha = energy.softmax(Some(mask))?;
        let pooled = alpha.matmul(rows)?;
        let weights = alpha.value().data().to_vec();
        Ok((pooled, weights))
    }
}
