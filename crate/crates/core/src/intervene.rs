// SPDX-License-Identifier: MIT OR Apache-2.0

//! Routing-weight interventions applied through the router-logit hook.
//!
//! * **Soft**: `r'_k = r_k + lambda * s(r)` for every target `k`, where
//!   `s(r)` is the population standard deviation of the original logits.
//!   All targets of a layer are adjusted simultaneously from the original
//!   vector.
//! * **Hard**: `r'_k = max_j r_j + delta_k`, `delta_k ~ N(0, delta_std^2)`
//!   drawn fresh per target per routing call; the maximum is taken once over
//!   the original vector.
//! * **Random**: the soft rule applied to a control set with the same
//!   per-layer counts as the target set, sampled uniformly without
//!   replacement.
//!
//! Adjustments apply to both prompt and generation tokens on the layers of
//! an inclusive range; other layers are untouched.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertSet, SetLabel};
use crate::model::{ForwardHook, ForwardRecord, HookBundle, HookSite, Model, TokenSequence};
use crate::routing::ExpertGrid;

/// `delta ~ N(0, 1e-4)`, i.e. standard deviation `1e-2`.
pub const DEFAULT_DELTA_STD: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Soft,
    Hard,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Strategy::Soft),
            "hard" => Ok(Strategy::Hard),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Intervention layers and strengths per model family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionPreset {
    pub layers: (usize, usize),
    pub tau: f64,
    pub lambda: f64,
}

impl InterventionPreset {
    pub fn for_model(name: &str) -> Option<Self> {
        let (layers, tau, lambda) = match name {
            "kimi-like" => ((0, 20), 0.3, 0.5),
            "qwen-like" => ((6, 42), 0.3, 0.5),
            "llama-like" => ((8, 40), 0.3, 0.2),
            "desk" => ((1, 2), 0.3, 0.5),
            _ => return None,
        };
        Some(Self {
            layers,
            tau,
            lambda,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub strategy: Strategy,
    pub lambda: f64,
    pub delta_std: f64,
    /// Inclusive `[lo, hi]`.
    pub layer_range: (usize, usize),
    pub seed: u64,
    pub target_set: ExpertSet,
}

impl InterventionConfig {
    pub fn new(
        strategy: Strategy,
        lambda: f64,
        layer_range: (usize, usize),
        seed: u64,
        target_set: ExpertSet,
    ) -> Self {
        Self {
            strategy,
            lambda,
            delta_std: DEFAULT_DELTA_STD,
            layer_range,
            seed,
            target_set,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_range.0 > self.layer_range.1 {
            return Err(Error::Config(format!(
                "layer range {}:{} is empty",
                self.layer_range.0, self.layer_range.1
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.strategy == Strategy::Hard && !(self.delta_std > 0.0) {
            return Err(Error::Config("hard intervention needs delta_std > 0".into()));
        }
        Ok(())
    }

    pub fn in_range(&self, layer: usize) -> bool {
        (self.layer_range.0..=self.layer_range.1).contains(&layer)
    }
}

fn check_targets(len: usize, targets: &[usize]) -> Result<BTreeSet<usize>> {
    if let Some(&t) = targets.iter().find(|&&t| t >= len) {
        return Err(Error::IndexOutOfRange(format!(
            "target expert {t} with {len} logits"
        )));
    }
    Ok(targets.iter().copied().collect())
}

/// Population standard deviation (divides by `E`).
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Soft enhancement of the targeted logits.
pub fn adjust_logits_soft(logits: &[f64], targets: &[usize], lambda: f64) -> Result<Vec<f64>> {
    let targets = check_targets(logits.len(), targets)?;
    let mut out = logits.to_vec();
    let boost = lambda * population_std(logits);
    if boost != 0.0 {
        for t in targets {
            out[t] += boost;
        }
    }
    Ok(out)
}

/// Result of a hard adjustment, with the noise actually drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct HardAdjustment {
    pub logits: Vec<f64>,
    /// `(target, delta)` in ascending target order.
    pub deltas: Vec<(usize, f64)>,
}

/// Hard maximization of the targeted logits, reporting the draws.
pub fn hard_adjustment<R: rand::Rng + ?Sized>(
    logits: &[f64],
    targets: &[usize],
    rng: &mut R,
    delta_std: f64,
) -> Result<HardAdjustment> {
    let targets = check_targets(logits.len(), targets)?;
    if targets.is_empty() {
        return Err(Error::Empty("hard intervention needs at least one target".into()));
    }
    let noise = Normal::new(0.0, delta_std)
        .map_err(|e| Error::Config(format!("delta_std {delta_std}: {e}")))?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.to_vec();
    let mut deltas = Vec::with_capacity(targets.len());
    for t in targets {
        let delta = noise.sample(rng);
        out[t] = max + delta;
        deltas.push((t, delta));
    }
    Ok(HardAdjustment {
        logits: out,
        deltas,
    })
}

/// Hard maximization of the targeted logits.
pub fn adjust_logits_hard<R: rand::Rng + ?Sized>(
    logits: &[f64],
    targets: &[usize],
    rng: &mut R,
    delta_std: f64,
) -> Result<Vec<f64>> {
    hard_adjustment(logits, targets, rng, delta_std).map(|h| h.logits)
}

/// Control set with the target set's per-layer counts, sampled uniformly
/// without replacement at each layer.
pub fn select_random_targets<R: rand::Rng + ?Sized>(
    domain_set: &ExpertSet,
    grid: ExpertGrid,
    rng: &mut R,
) -> Result<ExpertSet> {
    domain_set.grid.ensure_same(&grid, "random control")?;
    let mut members = Vec::with_capacity(domain_set.len());
    for (layer, count) in domain_set.counts_per_layer().into_iter().enumerate() {
        if count > grid.experts_per_layer {
            return Err(Error::Config(format!(
                "{count} experts requested at layer {layer} of {}",
                grid.experts_per_layer
            )));
        }
        if count == 0 {
            continue;
        }
        let picked = rand::seq::index::sample(rng, grid.experts_per_layer, count);
        members.extend(picked.into_iter().map(|i| crate::routing::ExpertId::new(layer, i)));
    }
    ExpertSet::new(
        SetLabel::RandomControl,
        domain_set.tau,
        members,
        domain_set.source_datasets.clone(),
        domain_set.sample_count,
        grid,
    )
}

/// An intervention with its targets resolved, ready to hand out one hook
/// per sequence.
#[derive(Debug, Clone)]
pub struct PreparedIntervention {
    pub config: InterventionConfig,
    /// Experts actually adjusted (the control set for `Random`).
    pub applied_set: ExpertSet,
    per_layer: Vec<Vec<usize>>,
}

impl PreparedIntervention {
    /// Validates the configuration against `grid`. For `Random`, the
    /// control set is drawn from stream 0 of `ChaCha8Rng(seed)`.
    pub fn new(config: InterventionConfig, grid: ExpertGrid) -> Result<Self> {
        config.validate()?;
        config.target_set.grid.ensure_same(&grid, "intervention targets")?;
        let applied_set = match config.strategy {
            Strategy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                select_random_targets(&config.target_set, grid, &mut rng)?
            }
            Strategy::Soft | Strategy::Hard => config.target_set.clone(),
        };
        if applied_set.is_empty() {
            log::warn!("intervention target set is empty; the intervention is the identity");
        }
        let per_layer = (0..grid.num_layers)
            .map(|l| {
                if config.in_range(l) {
                    applied_set.at_layer(l)
                } else {
                    Vec::new()
                }
            })
            .collect();
        Ok(Self {
            config,
            applied_set,
            per_layer,
        })
    }

    /// Hook for sequence `sequence_id`; its noise stream is
    /// `ChaCha8Rng(seed)` stream `sequence_id + 1`.
    pub fn hook(&self, sequence_id: u64) -> InterventionHook<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(sequence_id.wrapping_add(1));
        InterventionHook {
            prepared: self,
            rng,
            adjusted_calls: vec![0; self.per_layer.len()],
        }
    }

    pub fn targets_at(&self, layer: usize) -> &[usize] {
        self.per_layer.get(layer).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Router-logit hook implementing one prepared intervention.
pub struct InterventionHook<'a> {
    prepared: &'a PreparedIntervention,
    rng: ChaCha8Rng,
    adjusted_calls: Vec<u64>,
}

impl InterventionHook<'_> {
    /// Number of routing calls adjusted at each layer.
    pub fn adjusted_calls(&self) -> &[u64] {
        &self.adjusted_calls
    }
}

impl ForwardHook for InterventionHook<'_> {
    fn on_router_logits(&mut self, site: &HookSite, logits: &mut [f64]) {
        let targets = self.prepared.targets_at(site.layer);
        if targets.is_empty() {
            return;
        }
        let cfg = &self.prepared.config;
        // targets were range-checked against the grid at preparation time
        let adjusted = match cfg.strategy {
            Strategy::Soft | Strategy::Random => adjust_logits_soft(logits, targets, cfg.lambda),
            Strategy::Hard => adjust_logits_hard(logits, targets, &mut self.rng, cfg.delta_std),
        }
        .expect("targets validated against the grid");
        logits.copy_from_slice(&adjusted);
        self.adjusted_calls[site.layer] += 1;
    }
}

/// Per-layer counts of adjusted routing calls.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InterventionAudit {
    pub adjusted_calls_per_layer: Vec<u64>,
}

impl InterventionAudit {
    fn add(&mut self, calls: &[u64]) {
        if self.adjusted_calls_per_layer.len() < calls.len() {
            self.adjusted_calls_per_layer.resize(calls.len(), 0);
        }
        for (a, c) in self.adjusted_calls_per_layer.iter_mut().zip(calls) {
            *a += c;
        }
    }
}

/// Forward pass with the intervention installed (sequence id 0).
pub fn run_intervened_forward(
    model: &Model,
    seq: &TokenSequence,
    config: &InterventionConfig,
) -> Result<(ForwardRecord, InterventionAudit)> {
    let prepared = PreparedIntervention::new(config.clone(), model.grid())?;
    let mut hook = prepared.hook(0);
    let record = model.forward(seq, &mut HookBundle::empty().with(&mut hook))?;
    let mut audit = InterventionAudit::default();
    audit.add(hook.adjusted_calls());
    Ok((record, audit))
}

/// Runs many sequences in parallel; sequence `i` uses noise stream `i + 1`.
/// Results keep input order.
pub fn run_intervened_batch(
    model: &Model,
    prepared: &PreparedIntervention,
    seqs: &[TokenSequence],
) -> Result<(Vec<ForwardRecord>, InterventionAudit)> {
    prepared
        .config
        .target_set
        .grid
        .ensure_same(&model.grid(), "intervention targets")?;
    let results: Vec<(ForwardRecord, Vec<u64>)> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut hook = prepared.hook(i as u64);
            let rec = model.forward(seq, &mut HookBundle::empty().with(&mut hook))?;
            Ok((rec, hook.adjusted_calls().to_vec()))
        })
        .collect::<Result<_>>()?;
    let mut audit = InterventionAudit::default();
    let mut records = Vec::with_capacity(results.len());
    for (rec, calls) in results {
        audit.add(&calls);
        records.push(rec);
    }
    Ok((records, audit))
}
