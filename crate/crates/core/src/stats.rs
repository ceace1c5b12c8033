// SPDX-License-Identifier: MIT OR Apache-2.0

//! Routing statistics: per-layer Gini specialization, Top-K activation
//! frequency, frequency differences and Jensen-Shannon routing divergence.
//!
//! Every statistic is available as a streaming accumulator (`push` one
//! record at a time) and as a one-shot function over an iterator; the
//! one-shot functions are thin wrappers around the accumulators, so both
//! paths agree bit-for-bit on the same record order. All arithmetic is
//! `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{ExpertGrid, ExpertId, Phase, RoutingRecord, INTERNAL_SUM_TOLERANCE};

/// Gini coefficient of an importance vector `q`:
/// `sum_i sum_j |q_i - q_j| / (2 E sum_k q_k)`, evaluated pairwise.
pub fn gini(q: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::Empty("gini of an empty vector".into()));
    }
    let total: f64 = q.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidDistribution(
            "gini needs a positive total importance".into(),
        ));
    }
    let mut pairwise = 0.0;
    for a in q {
        for b in q {
            pairwise += (a - b).abs();
        }
    }
    Ok(pairwise / (2.0 * q.len() as f64 * total))
}

/// Running mean of router probability vectors for one layer.
#[derive(Debug, Clone)]
pub struct ImportanceAccumulator {
    sums: Vec<f64>,
    count: u64,
}

impl ImportanceAccumulator {
    pub fn new() -> Self {
        Self {
            sums: Vec::new(),
            count: 0,
        }
    }

    pub fn push(&mut self, record: &RoutingRecord) -> Result<()> {
        let p = record.probabilities.as_deref().ok_or(Error::Capability {
            operation: "gini",
            requirement: "logits",
        })?;
        if self.count == 0 {
            self.sums = vec![0.0; p.len()];
        } else if p.len() != self.sums.len() {
            return Err(Error::DimensionMismatch {
                expected: self.sums.len(),
                actual: p.len(),
            });
        }
        for (s, x) in self.sums.iter_mut().zip(p) {
            *s += x;
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// `q_l`: the mean probability vector.
    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::Empty("no routing records".into()));
        }
        let n = self.count as f64;
        Ok(self.sums.iter().map(|s| s / n).collect())
    }

    pub fn gini(&self) -> Result<f64> {
        gini(&self.mean()?)
    }
}

impl Default for ImportanceAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

/// Gini specialization `G_l` over the records of one layer.
pub fn gini_per_layer<'a>(records: impl IntoIterator<Item = &'a RoutingRecord>) -> Result<f64> {
    let mut acc = ImportanceAccumulator::new();
    let mut layer = None;
    for r in records {
        if *layer.get_or_insert(r.layer) != r.layer {
            return Err(Error::Config(format!(
                "gini_per_layer got records from layers {} and {}",
                layer.unwrap_or_default(),
                r.layer
            )));
        }
        acc.push(r)?;
    }
    acc.gini()
}

/// Per-layer Gini over a mixed-layer record stream.
#[derive(Debug, Clone)]
pub struct GiniAccumulator {
    grid: ExpertGrid,
    layers: Vec<ImportanceAccumulator>,
}

impl GiniAccumulator {
    pub fn new(grid: ExpertGrid) -> Self {
        Self {
            grid,
            layers: vec![ImportanceAccumulator::new(); grid.num_layers],
        }
    }

    pub fn push(&mut self, record: &RoutingRecord) -> Result<()> {
        check_record(&self.grid, record)?;
        self.layers[record.layer].push(record)
    }

    /// `G_l` for every layer, indexed by layer.
    pub fn finish(&self) -> Result<Vec<f64>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, acc)| {
                acc.gini().map_err(|e| match e {
                    Error::Empty(_) => Error::Empty(format!("no routing records for layer {l}")),
                    other => other,
                })
            })
            .collect()
    }
}

pub fn gini_profile<'a>(
    grid: ExpertGrid,
    records: impl IntoIterator<Item = &'a RoutingRecord>,
) -> Result<Vec<f64>> {
    let mut acc = GiniAccumulator::new(grid);
    for r in records {
        acc.push(r)?;
    }
    acc.finish()
}

fn check_record(grid: &ExpertGrid, r: &RoutingRecord) -> Result<()> {
    if r.layer >= grid.num_layers {
        return Err(Error::IndexOutOfRange(format!(
            "layer {} outside grid of {} layers",
            r.layer, grid.num_layers
        )));
    }
    if r.num_experts != grid.experts_per_layer {
        return Err(Error::GridMismatch(format!(
            "record has {} experts, grid has {}",
            r.num_experts, grid.experts_per_layer
        )));
    }
    if let Some(&i) = r.topk_indices.iter().find(|&&i| i >= grid.experts_per_layer) {
        return Err(Error::IndexOutOfRange(format!("expert index {i}")));
    }
    Ok(())
}

/// `Phi(E_{l,i}, D)` for every expert of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationFrequencyTable {
    pub dataset_label: String,
    pub grid: ExpertGrid,
    /// `N_D`: tokens seen per layer.
    pub token_count: u64,
    /// Number of samples the tokens came from, when known.
    #[serde(default)]
    pub sample_count: usize,
    /// `values[layer][index]`.
    pub values: Vec<Vec<f64>>,
}

impl ActivationFrequencyTable {
    pub fn get(&self, id: ExpertId) -> f64 {
        self.values[id.layer][id.index]
    }

    pub fn with_sample_count(mut self, samples: usize) -> Self {
        self.sample_count = samples;
        self
    }
}

/// Counts Top-K memberships per expert.
#[derive(Debug, Clone)]
pub struct FrequencyAccumulator {
    grid: ExpertGrid,
    selections: Vec<u64>,
    tokens: Vec<u64>,
}

impl FrequencyAccumulator {
    pub fn new(grid: ExpertGrid) -> Self {
        Self {
            grid,
            selections: vec![0; grid.len()],
            tokens: vec![0; grid.num_layers],
        }
    }

    pub fn push(&mut self, record: &RoutingRecord) -> Result<()> {
        check_record(&self.grid, record)?;
        for id in record.expert_ids() {
            self.selections[self.grid.offset(id)] += 1;
        }
        self.tokens[record.layer] += 1;
        Ok(())
    }

    pub fn finish(&self, label: &str) -> Result<ActivationFrequencyTable> {
        if self.tokens.iter().all(|&t| t == 0) {
            return Err(Error::Empty(format!("no routing records for `{label}`")));
        }
        if let Some(l) = self.tokens.iter().position(|&t| t == 0) {
            return Err(Error::Empty(format!("no routing records for layer {l} of `{label}`")));
        }
        let e = self.grid.experts_per_layer;
        let values = (0..self.grid.num_layers)
            .map(|l| {
                let n = self.tokens[l] as f64;
                self.selections[l * e..(l + 1) * e]
                    .iter()
                    .map(|&c| c as f64 / n)
                    .collect()
            })
            .collect();
        Ok(ActivationFrequencyTable {
            dataset_label: label.to_string(),
            grid: self.grid,
            token_count: self.tokens.iter().copied().max().unwrap_or(0),
            sample_count: 0,
            values,
        })
    }
}

pub fn activation_frequency<'a>(
    grid: ExpertGrid,
    records: impl IntoIterator<Item = &'a RoutingRecord>,
    label: &str,
) -> Result<ActivationFrequencyTable> {
    let mut acc = FrequencyAccumulator::new(grid);
    for r in records {
        acc.push(r)?;
    }
    acc.finish(label)
}

/// `dPhi = Phi(domain) - Phi(general)` per expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyDifference {
    pub grid: ExpertGrid,
    pub domain_label: String,
    pub general_label: String,
    pub values: Vec<Vec<f64>>,
}

impl FrequencyDifference {
    pub fn get(&self, id: ExpertId) -> f64 {
        self.values[id.layer][id.index]
    }
}

pub fn frequency_difference(
    domain: &ActivationFrequencyTable,
    general: &ActivationFrequencyTable,
) -> Result<FrequencyDifference> {
    domain.grid.ensure_same(&general.grid, "frequency tables")?;
    let values = domain
        .values
        .iter()
        .zip(&general.values)
        .map(|(d, g)| d.iter().zip(g).map(|(a, b)| a - b).collect())
        .collect();
    Ok(FrequencyDifference {
        grid: domain.grid,
        domain_label: domain.dataset_label.clone(),
        general_label: general.dataset_label.clone(),
        values,
    })
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if let Some(x) = p.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidDistribution(format!("{name} has entry {x}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > INTERNAL_SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// Base-2 Jensen-Shannon divergence, in `[0, 1]`. Zero-probability terms
/// contribute zero.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            kl_p += a * (a / m).log2();
        }
        if b > 0.0 {
            kl_q += b * (b / m).log2();
        }
    }
    Ok((0.5 * (kl_p + kl_q)).clamp(0.0, 1.0))
}

/// Per-layer Top-K selection counts over the prompt-phase tokens of one
/// sample; normalized, these are the `Phi_l(x)` of the divergence profile.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRouting {
    grid: ExpertGrid,
    counts: Vec<u64>,
    tokens: Vec<u64>,
}

impl PromptRouting {
    pub fn new(grid: ExpertGrid) -> Self {
        Self {
            grid,
            counts: vec![0; grid.len()],
            tokens: vec![0; grid.num_layers],
        }
    }

    pub fn from_records<'a>(
        grid: ExpertGrid,
        records: impl IntoIterator<Item = &'a RoutingRecord>,
    ) -> Result<Self> {
        let mut s = Self::new(grid);
        for r in records {
            s.push(r)?;
        }
        Ok(s)
    }

    /// Generation-phase records are ignored.
    pub fn push(&mut self, record: &RoutingRecord) -> Result<()> {
        check_record(&self.grid, record)?;
        if record.phase != Phase::Prompt {
            return Ok(());
        }
        for id in record.expert_ids() {
            self.counts[self.grid.offset(id)] += 1;
        }
        self.tokens[record.layer] += 1;
        Ok(())
    }

    pub fn grid(&self) -> ExpertGrid {
        self.grid
    }

    /// Normalized selection counts for `layer`.
    pub fn distribution(&self, layer: usize) -> Result<Vec<f64>> {
        let e = self.grid.experts_per_layer;
        let row = &self.counts[layer * e..(layer + 1) * e];
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(Error::Empty(format!("no prompt-phase tokens at layer {layer}")));
        }
        Ok(row.iter().map(|&c| c as f64 / total as f64).collect())
    }
}

/// How `Phi_l(x)` is normalized in a [`DivergenceProfile`].
pub const PHI_NORMALIZATION: &str = "topk-selection-counts";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceProfile {
    /// `Div_l`, indexed by layer.
    pub per_layer: Vec<f64>,
    pub sample_count: usize,
    pub phi_normalization: String,
}

/// Mean per-sample JSD between the text and image routing distributions of
/// each layer. Pairs are evaluated in parallel and reduced in input order.
pub fn divergence_profile(pairs: &[(PromptRouting, PromptRouting)]) -> Result<DivergenceProfile> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::Empty("divergence profile needs at least one pair".into()));
    };
    let grid = first.grid;
    for (t, i) in pairs {
        grid.ensure_same(&t.grid, "divergence pair")?;
        grid.ensure_same(&i.grid, "divergence pair")?;
    }
    let per_pair: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|(text, image)| {
            (0..grid.num_layers)
                .map(|l| jsd(&text.distribution(l)?, &image.distribution(l)?))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![0.0; grid.num_layers];
    for row in &per_pair {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = pairs.len() as f64;
    Ok(DivergenceProfile {
        per_layer: sums.into_iter().map(|s| s / n).collect(),
        sample_count: pairs.len(),
        phi_normalization: PHI_NORMALIZATION.to_string(),
    })
}
