//! Triplet-style losses with analytic gradients with respect to the embeddings.
//!
//! Every loss is written as a sum of scalar terms, each a function of a few
//! pairwise distances. Gradients are first accumulated as `∂L/∂D(i, j)`
//! coefficients and then pushed through the metric onto the embedding rows.

mod distance;
mod lifted;
mod lmnn;
mod margin;
mod triplet;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use distance::{pairwise_distances, DistanceMatrix, Metric, DIST_GRAD_FLOOR, SQ_DIST_FLOOR};
pub use lifted::{lifted_generalized_loss, lifted_loss};
pub use lmnn::{lmnn_loss, lmnn_loss_with_metric};
pub use margin::{margin_apply, sigmoid, softplus, MarginMode};
pub use triplet::{batch_all_loss, batch_hard_loss, classic_triplet_loss};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A term counts as active when it exceeds this value.
pub const ACTIVE_THRESHOLD: f64 = 1e-5;

/// Identity label of a sample.
pub type Label = i64;

/// How summed terms are turned into the scalar loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Divide by the number of terms.
    #[default]
    All,
    /// Divide by the number of active terms only.
    Nonzero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub grad: Matrix,
    pub num_terms: usize,
    pub num_active: usize,
    pub per_term: Vec<f64>,
}

impl LossReport {
    pub fn active_fraction(&self) -> f64 {
        if self.num_terms == 0 {
            0.0
        } else {
            self.num_active as f64 / self.num_terms as f64
        }
    }
}

pub(crate) fn count_active(terms: &[f64]) -> usize {
    terms.iter().filter(|&&t| t > ACTIVE_THRESHOLD).count()
}

/// Per-row identity labels of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLabels {
    labels: Vec<Label>,
    pk: Option<(usize, usize)>,
}

impl BatchLabels {
    pub fn new(labels: Vec<Label>) -> Self {
        let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_default() += 1;
        }
        let mut sizes = counts.values().copied();
        let pk = sizes.next().and_then(|k| {
            if sizes.all(|c| c == k) {
                Some((counts.len(), k))
            } else {
                None
            }
        });
        Self { labels, pk }
    }

    pub fn as_slice(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(P, K)` if every label occurs equally often.
    pub fn pk(&self) -> Option<(usize, usize)> {
        self.pk
    }

    /// Validates the PK structure the batch losses need.
    pub fn require_pk(&self) -> Result<(usize, usize)> {
        let (p, k) = self.pk.ok_or_else(|| {
            Error::contract("batch labels do not form P identities with K samples each")
        })?;
        if k < 2 {
            return Err(Error::contract("K < 2: anchors have no positive in the batch"));
        }
        if p < 2 {
            return Err(Error::contract("P < 2: anchors have no negative in the batch"));
        }
        Ok((p, k))
    }
}

impl From<Vec<Label>> for BatchLabels {
    fn from(v: Vec<Label>) -> Self {
        Self::new(v)
    }
}

/// Accumulates `coef · ∂D(i, j)` into an embedding-shaped gradient.
pub(crate) struct PairGrads<'a> {
    emb: &'a Matrix,
    metric: Metric,
    grad: Matrix,
}

impl<'a> PairGrads<'a> {
    pub(crate) fn new(emb: &'a Matrix, metric: Metric) -> Self {
        Self {
            emb,
            metric,
            grad: Matrix::zeros(emb.rows(), emb.cols()),
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, i: usize, j: usize, dist: f64, coef: f64) {
        if i == j || coef == 0.0 {
            return;
        }
        let cols = self.emb.cols();
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let (head, tail) = self.grad.as_mut_slice().split_at_mut(hi * cols);
        let g_lo = &mut head[lo * cols..(lo + 1) * cols];
        let g_hi = &mut tail[..cols];
        // D is symmetric, so the pair orientation does not matter.
        self.metric
            .accumulate_grad(self.emb.row(lo), self.emb.row(hi), dist, coef, g_lo, g_hi);
    }

    pub(crate) fn into_grad(self, scale: f64) -> Matrix {
        if scale == 1.0 {
            self.grad
        } else {
            self.grad.scale(scale)
        }
    }
}

/// Averages `terms` and scales the summed gradient to match.
pub(crate) fn finish(terms: Vec<f64>, grads: PairGrads<'_>, averaging: Averaging) -> LossReport {
    let num_active = count_active(&terms);
    let divisor = match averaging {
        Averaging::All => terms.len(),
        Averaging::Nonzero => num_active,
    };
    let (loss, grad) = if divisor == 0 {
        let shape = grads.grad.shape();
        (0.0, Matrix::zeros(shape.0, shape.1))
    } else {
        let inv = 1.0 / divisor as f64;
        (terms.iter().sum::<f64>() * inv, grads.into_grad(inv))
    };
    LossReport {
        loss,
        grad,
        num_terms: terms.len(),
        num_active,
        per_term: terms,
    }
}

/// Loss variants selectable from configuration and the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Classic triplet loss on uniformly sampled triplets.
    Triplet,
    /// Classic triplet loss on offline hard-mined triplets.
    TripletOhm,
    BatchHard,
    BatchHardNnz,
    BatchAll,
    BatchAllNnz,
    Lifted,
    LiftedGen,
    Lmnn,
}

impl LossKind {
    pub const ALL: [LossKind; 9] = [
        LossKind::Triplet,
        LossKind::TripletOhm,
        LossKind::BatchHard,
        LossKind::BatchHardNnz,
        LossKind::BatchAll,
        LossKind::BatchAllNnz,
        LossKind::Lifted,
        LossKind::LiftedGen,
        LossKind::Lmnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::TripletOhm => "triplet_ohm",
            LossKind::BatchHard => "batch_hard",
            LossKind::BatchHardNnz => "batch_hard_nnz",
            LossKind::BatchAll => "batch_all",
            LossKind::BatchAllNnz => "batch_all_nnz",
            LossKind::Lifted => "lifted",
            LossKind::LiftedGen => "lifted_gen",
            LossKind::Lmnn => "lmnn",
        }
    }

    /// Losses fed with stacked (anchor, positive, negative) rows.
    pub fn uses_triplets(self) -> bool {
        matches!(self, LossKind::Triplet | LossKind::TripletOhm)
    }

    pub fn averaging(self) -> Averaging {
        match self {
            LossKind::BatchHardNnz | LossKind::BatchAllNnz => Averaging::Nonzero,
            _ => Averaging::All,
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = LossKind::ALL.iter().map(|k| k.name()).collect();
                Error::Parse(format!("unknown loss '{s}', expected one of {}", names.join(", ")))
            })
    }
}
