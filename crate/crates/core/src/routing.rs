// SPDX-License-Identifier: MIT OR Apache-2.0

//! Routing primitives shared by the model, the statistics and the trace
//! format: expert addressing, phase tags, per-token routing records and the
//! softmax / Top-K pipeline.
//!
//! The pipeline order is fixed:
//!
//! ```text
//! router logits -> (optional hook edit) -> softmax over all E routed experts
//!               -> Top-K selection (ties: lowest index) -> renormalize over K
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for "sums to one" checks on internally produced vectors.
pub const INTERNAL_SUM_TOLERANCE: f64 = 1e-9;

/// One routed expert `E_{l,i}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertId {
    pub layer: usize,
    pub index: usize,
}

impl ExpertId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

impl std::fmt::Display for ExpertId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "E[{},{}]", self.layer, self.index)
    }
}

/// Geometry of the routed-expert grid: `num_layers x experts_per_layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertGrid {
    pub num_layers: usize,
    pub experts_per_layer: usize,
}

impl ExpertGrid {
    pub fn new(num_layers: usize, experts_per_layer: usize) -> Self {
        Self {
            num_layers,
            experts_per_layer,
        }
    }

    pub fn len(&self) -> usize {
        self.num_layers * self.experts_per_layer
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: ExpertId) -> bool {
        id.layer < self.num_layers && id.index < self.experts_per_layer
    }

    pub fn check(&self, id: ExpertId) -> Result<()> {
        if self.contains(id) {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange(format!(
                "{id} outside grid {}x{}",
                self.num_layers, self.experts_per_layer
            )))
        }
    }

    pub fn ensure_same(&self, other: &ExpertGrid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.num_layers,
                self.experts_per_layer,
                other.num_layers,
                other.experts_per_layer
            )))
        }
    }

    /// Row-major position of an expert in a flat per-grid vector.
    pub fn offset(&self, id: ExpertId) -> usize {
        id.layer * self.experts_per_layer + id.index
    }

    pub fn experts(&self) -> impl Iterator<Item = ExpertId> + '_ {
        (0..self.num_layers)
            .flat_map(move |l| (0..self.experts_per_layer).map(move |i| ExpertId::new(l, i)))
    }
}

/// Whether a token was consumed as input or produced by decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prompt,
    Generation,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prompt => "prompt",
            Phase::Generation => "generation",
        }
    }
}

/// Routing decision for one token at one layer.
///
/// `logits` are the router outputs before any hook edit and
/// `adjusted_logits` is set only when a hook changed at least one entry;
/// `probabilities` are always computed from the effective (possibly
/// adjusted) logits. Records read from traces recorded without logits carry
/// neither logits nor probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub token_position: usize,
    pub layer: usize,
    pub phase: Phase,
    pub num_experts: usize,
    pub logits: Option<Vec<f64>>,
    pub adjusted_logits: Option<Vec<f64>>,
    pub probabilities: Option<Vec<f64>>,
    pub topk_indices: Vec<usize>,
    pub topk_weights: Vec<f64>,
}

impl RoutingRecord {
    /// Runs the routing pipeline on an already-edited logit vector.
    pub fn route(
        token_position: usize,
        layer: usize,
        phase: Phase,
        raw_logits: Vec<f64>,
        adjusted_logits: Option<Vec<f64>>,
        top_k: usize,
    ) -> Self {
        let effective = adjusted_logits.as_deref().unwrap_or(&raw_logits);
        let probabilities = softmax(effective);
        let (topk_indices, topk_weights) = select_top_k(&probabilities, top_k);
        Self {
            token_position,
            layer,
            phase,
            num_experts: raw_logits.len(),
            logits: Some(raw_logits),
            adjusted_logits,
            probabilities: Some(probabilities),
            topk_indices,
            topk_weights,
        }
    }

    /// The logits the softmax actually consumed.
    pub fn effective_logits(&self) -> Option<&[f64]> {
        self.adjusted_logits.as_deref().or(self.logits.as_deref())
    }

    pub fn expert_ids(&self) -> impl Iterator<Item = ExpertId> + '_ {
        self.topk_indices
            .iter()
            .map(move |&i| ExpertId::new(self.layer, i))
    }

    /// Compares every field by bit pattern.
    pub fn bit_identical(&self, other: &Self) -> bool {
        fn opt(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> bool {
            match (a, b) {
                (Some(a), Some(b)) => bits_eq(a, b),
                (None, None) => true,
                _ => false,
            }
        }
        self.token_position == other.token_position
            && self.layer == other.layer
            && self.phase == other.phase
            && self.num_experts == other.num_experts
            && self.topk_indices == other.topk_indices
            && bits_eq(&self.topk_weights, &other.topk_weights)
            && opt(&self.logits, &other.logits)
            && opt(&self.adjusted_logits, &other.adjusted_logits)
            && opt(&self.probabilities, &other.probabilities)
    }
}

pub(crate) fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Indices of the `k` largest scores, in descending score order; equal
/// scores are ordered by lowest index. Returns the indices and the scores
/// renormalized to sum to one over the selection.
pub fn select_top_k(scores: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    let total: f64 = order.iter().map(|&i| scores[i]).sum();
    let weights = order.iter().map(|&i| scores[i] / total).collect();
    (order, weights)
}
