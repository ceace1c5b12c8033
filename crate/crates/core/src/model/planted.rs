// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted specialization: a hand-wired model whose domain experts, task
//! mapping and modality-induced routing shift are known exactly.
//!
//! # Channel layout
//!
//! With vocabulary size `V` the residual stream is split into
//!
//! | block    | width | content                                              |
//! |----------|-------|------------------------------------------------------|
//! | text     | `V`   | one-hot token identity (text tokens, aligned images) |
//! | visual   | `V`   | one-hot identity of image tokens before alignment    |
//! | answer   | `V`   | votes written by experts, read by the unembedding    |
//! | bias     | 1     | constant 1                                           |
//! | domain   | 1     | 1 for domain tokens                                  |
//! | image    | 1     | the modality offset: 1 for image tokens              |
//!
//! so `hidden_dim >= 3V + 3`. Remaining channels stay zero.
//!
//! # Router
//!
//! Let `eps` be the noise amplitude, `m` the margin, `s` the modality offset
//! strength and `g = max(4 eps, m / 4)` the rank spacing. At each layer the
//! non-planted experts get distinct rank biases `g * rank` (visual experts
//! take the lowest ranks, the rest a seeded permutation), so their relative
//! order never depends on the token. With `beta` the top rank bias:
//!
//! * planted expert: `-(m + 2 eps)` on bias, `beta + 2m + 4 eps` on domain,
//!   `-s` on image. Domain tokens put it at least `m` above every
//!   non-planted expert; other tokens put it at least `m` below.
//! * visual expert: `beta + m + 2 eps` on image (only at its own layers).
//! * every expert: `U(-eps, eps)` weights on the text and visual blocks, the
//!   only token-dependent part of the logits, bounded by `eps`.
//!
//! Routers never read the answer block, so routing at a layer is
//! independent of routing at earlier layers.
//!
//! # Experts
//!
//! Expert inner units detect text-block tokens (`relu(text[u])`). Planted
//! experts write `+1` on `answer[correct(u)]` for domain tokens; every other
//! routed expert writes `wrong_vote` on `answer[u]` (the echo mapping).
//! Routed experts below `alignment_layer` write nothing, so the answer
//! block is a read-out of the layers from `alignment_layer` on.
//! Shared experts are zero. The correct mapping sends the `i`-th domain
//! token to the `(i+1)`-th, cyclically.
//!
//! # Alignment
//!
//! At entry to `alignment_layer`, image positions copy the visual block into
//! the text block and clear the visual and answer blocks. Before that layer
//! an image position carries no text-space identity.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AlignmentStep, FeedForward, Matrix, Model, MoeLayer, ToyMoEConfig};
use crate::error::{Error, Result};
use crate::routing::ExpertId;

fn default_noise() -> f64 {
    0.05
}

fn default_wrong_vote() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub planted_experts: Vec<ExpertId>,
    pub domain_token_ids: BTreeSet<usize>,
    pub logit_margin: f64,
    pub modality_offset_strength: f64,
    /// Bound on the token-dependent router logit noise.
    #[serde(default = "default_noise")]
    pub noise_amplitude: f64,
    /// Experts pulled toward image tokens (disjoint from the planted set).
    #[serde(default)]
    pub visual_experts: Vec<ExpertId>,
    /// Layer at whose entry image positions are aligned into text space.
    #[serde(default)]
    pub alignment_layer: usize,
    /// Vote strength of non-planted experts for the echo mapping.
    #[serde(default = "default_wrong_vote")]
    pub wrong_vote: f64,
}

/// Residual-stream channel offsets of a planted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub vocab: usize,
}

impl ChannelLayout {
    pub fn text(&self, token: usize) -> usize {
        token
    }

    pub fn visual(&self, token: usize) -> usize {
        self.vocab + token
    }

    pub fn answer(&self, token: usize) -> usize {
        2 * self.vocab + token
    }

    pub fn bias(&self) -> usize {
        3 * self.vocab
    }

    pub fn domain(&self) -> usize {
        3 * self.vocab + 1
    }

    pub fn image(&self) -> usize {
        3 * self.vocab + 2
    }

    pub fn required_dim(&self) -> usize {
        3 * self.vocab + 3
    }
}

/// Ground truth carried by a planted model.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTask {
    pub spec: PlantedSpec,
    pub layout: ChannelLayout,
    /// Spacing between consecutive non-planted rank biases.
    pub rank_spacing: f64,
    correct: Vec<Option<usize>>,
}

impl PlantedTask {
    pub fn is_domain(&self, token: usize) -> bool {
        self.spec.domain_token_ids.contains(&token)
    }

    /// Correct answer for a domain token.
    pub fn answer(&self, token: usize) -> Option<usize> {
        self.correct.get(token).copied().flatten()
    }

    /// Answer produced by the non-planted (echo) mapping.
    pub fn wrong_answer(&self, token: usize) -> usize {
        token
    }

    pub fn general_tokens(&self) -> Vec<usize> {
        (0..self.layout.vocab).filter(|t| !self.is_domain(*t)).collect()
    }

    pub fn domain_tokens(&self) -> Vec<usize> {
        self.spec.domain_token_ids.iter().copied().collect()
    }

    pub fn planted_layers(&self) -> BTreeSet<usize> {
        self.spec.planted_experts.iter().map(|e| e.layer).collect()
    }

    pub fn visual_layers(&self) -> BTreeSet<usize> {
        self.spec.visual_experts.iter().map(|e| e.layer).collect()
    }
}

impl PlantedSpec {
    /// Margin 2.0, noise 0.05, domain tokens = lower half of the vocabulary,
    /// `top_k` planted experts per layer on the middle layers
    /// `[L/4, L-1-L/4]`, one visual expert per remaining layer, alignment at
    /// layer 1 (0 for single-layer models) and an offset strength inside the
    /// distraction regime (see [`PlantedSpec::distraction_strength`]).
    pub fn standard(config: &ToyMoEConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let l = config.num_layers;
        let lo = l / 4;
        let hi = (l - 1 - l / 4).max(lo);
        let e = config.num_routed_experts_per_layer;
        let k = config.top_k;
        let mut planted = Vec::new();
        let mut visual = Vec::new();
        for layer in 0..l {
            let mut order: Vec<usize> = (0..e).collect();
            order.shuffle(&mut rng);
            if (lo..=hi).contains(&layer) {
                let take = k.min(e.saturating_sub(k));
                planted.extend(order[..take].iter().map(|&i| ExpertId::new(layer, i)));
            } else if e > k {
                visual.push(ExpertId::new(layer, order[0]));
            }
        }
        planted.sort();
        visual.sort();
        let margin = 2.0;
        let noise = default_noise();
        Self {
            planted_experts: planted,
            domain_token_ids: (0..config.vocab_size / 2).collect(),
            logit_margin: margin,
            modality_offset_strength: Self::distraction_strength(margin, noise),
            noise_amplitude: noise,
            visual_experts: visual,
            alignment_layer: usize::from(l > 1),
            wrong_vote: default_wrong_vote(),
        }
    }

    /// Rank spacing `max(4 eps, m / 4)`.
    pub fn rank_spacing(margin: f64, noise: f64) -> f64 {
        (4.0 * noise).max(margin / 4.0)
    }

    /// `m + 4 eps + g / 4`: every planted expert falls below the top
    /// non-planted expert on image domain tokens, but stays above the
    /// second one.
    pub fn distraction_strength(margin: f64, noise: f64) -> f64 {
        margin + 4.0 * noise + Self::rank_spacing(margin, noise) / 4.0
    }

    pub fn with_offset_strength(mut self, strength: f64) -> Self {
        self.modality_offset_strength = strength;
        self
    }

    pub fn validate(&self, config: &ToyMoEConfig) -> Result<()> {
        config.validate()?;
        let grid = config.grid();
        let layout = ChannelLayout {
            vocab: config.vocab_size,
        };
        if config.hidden_dim < layout.required_dim() {
            return Err(Error::Config(format!(
                "planted models need hidden_dim >= {} for vocab {}",
                layout.required_dim(),
                config.vocab_size
            )));
        }
        if config.expert_ffn_dim < config.vocab_size {
            return Err(Error::Config(
                "planted models need expert_ffn_dim >= vocab_size".into(),
            ));
        }
        if !(self.logit_margin > 0.0) {
            return Err(Error::Config("logit_margin must be positive".into()));
        }
        if !(self.noise_amplitude >= 0.0) || self.logit_margin <= self.noise_amplitude {
            return Err(Error::Config(
                "logit_margin must strictly exceed the noise amplitude".into(),
            ));
        }
        if !(self.modality_offset_strength >= 0.0) || !(self.wrong_vote >= 0.0) {
            return Err(Error::Config(
                "modality_offset_strength and wrong_vote must be non-negative".into(),
            ));
        }
        if self.domain_token_ids.len() < 2 {
            return Err(Error::Config("need at least two domain tokens".into()));
        }
        if let Some(t) = self.domain_token_ids.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::Config(format!("domain token {t} outside vocabulary")));
        }
        if self.alignment_layer >= config.num_layers {
            return Err(Error::Config("alignment_layer outside the model".into()));
        }
        for id in self.planted_experts.iter().chain(&self.visual_experts) {
            grid.check(*id)?;
        }
        let planted: BTreeSet<ExpertId> = self.planted_experts.iter().copied().collect();
        let visual: BTreeSet<ExpertId> = self.visual_experts.iter().copied().collect();
        if planted.len() != self.planted_experts.len() || visual.len() != self.visual_experts.len()
        {
            return Err(Error::Config("duplicate expert in planted spec".into()));
        }
        if let Some(id) = planted.intersection(&visual).next() {
            return Err(Error::Config(format!("{id} is both planted and visual")));
        }
        let per_layer = |set: &BTreeSet<ExpertId>| {
            let mut counts = BTreeMap::<usize, usize>::new();
            for id in set {
                *counts.entry(id.layer).or_default() += 1;
            }
            counts
        };
        for (layer, count) in per_layer(&planted) {
            if count > config.top_k {
                return Err(Error::Config(format!(
                    "{count} planted experts at layer {layer} exceed top_k {}",
                    config.top_k
                )));
            }
            if config.num_routed_experts_per_layer - count < config.top_k {
                return Err(Error::Config(format!(
                    "layer {layer} keeps fewer than top_k non-planted experts"
                )));
            }
        }
        for (layer, count) in per_layer(&visual) {
            if count > config.top_k {
                return Err(Error::Config(format!(
                    "{count} visual experts at layer {layer} exceed top_k {}",
                    config.top_k
                )));
            }
        }
        Ok(())
    }
}

impl Model {
    /// Builds a planted model. Router noise is drawn from `config.seed`:
    /// per layer, the rank permutation first, then the noise weights
    /// expert by expert (text block, then visual block).
    pub fn planted(config: ToyMoEConfig, spec: PlantedSpec) -> Result<Self> {
        spec.validate(&config)?;
        let v = config.vocab_size;
        let d = config.hidden_dim;
        let e = config.num_routed_experts_per_layer;
        let f = config.expert_ffn_dim;
        let layout = ChannelLayout { vocab: v };
        let eps = spec.noise_amplitude;
        let m = spec.logit_margin;
        let g = PlantedSpec::rank_spacing(m, eps);

        let domain: Vec<usize> = spec.domain_token_ids.iter().copied().collect();
        let mut correct = vec![None; v];
        for (i, &t) in domain.iter().enumerate() {
            correct[t] = Some(domain[(i + 1) % domain.len()]);
        }

        let mut text_embed = Matrix::zeros(v, d);
        let mut visual_embed = Matrix::zeros(v, d);
        for t in 0..v {
            let dom = if spec.domain_token_ids.contains(&t) { 1.0 } else { 0.0 };
            text_embed.set(t, layout.text(t), 1.0);
            visual_embed.set(t, layout.visual(t), 1.0);
            for table in [&mut text_embed, &mut visual_embed] {
                table.set(t, layout.bias(), 1.0);
                table.set(t, layout.domain(), dom);
            }
        }
        let mut modality_offset = vec![0.0; d];
        modality_offset[layout.image()] = 1.0;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let planted: BTreeSet<usize> = spec
                .planted_experts
                .iter()
                .filter(|id| id.layer == l)
                .map(|id| id.index)
                .collect();
            let visual: BTreeSet<usize> = spec
                .visual_experts
                .iter()
                .filter(|id| id.layer == l)
                .map(|id| id.index)
                .collect();
            let mut rest: Vec<usize> = (0..e)
                .filter(|i| !planted.contains(i) && !visual.contains(i))
                .collect();
            rest.shuffle(&mut rng);
            let ranked: Vec<usize> = visual.iter().copied().chain(rest).collect();
            let beta = g * ranked.len().saturating_sub(1) as f64;

            let mut router = Matrix::zeros(e, d);
            for j in 0..e {
                for t in 0..v {
                    router.set(j, layout.text(t), eps * rng.random_range(-1.0..1.0));
                }
                for t in 0..v {
                    router.set(j, layout.visual(t), eps * rng.random_range(-1.0..1.0));
                }
            }
            for (rank, &j) in ranked.iter().enumerate() {
                router.set(j, layout.bias(), g * rank as f64);
            }
            for &j in &visual {
                router.set(j, layout.image(), beta + m + 2.0 * eps);
            }
            for &j in &planted {
                router.set(j, layout.bias(), -(m + 2.0 * eps));
                router.set(j, layout.domain(), beta + 2.0 * m + 4.0 * eps);
                router.set(j, layout.image(), -spec.modality_offset_strength);
            }

            let experts = (0..e)
                .map(|j| {
                    let mut ff = FeedForward::zeros(d, f);
                    for u in 0..v {
                        ff.w_in.set(u, layout.text(u), 1.0);
                    }
                    if l < spec.alignment_layer {
                        // no read-out before the alignment layer
                    } else if planted.contains(&j) {
                        for &u in &domain {
                            let target = correct[u].expect("domain token has an answer");
                            ff.w_out.set(layout.answer(target), u, 1.0);
                        }
                    } else {
                        for u in 0..v {
                            ff.w_out.set(layout.answer(u), u, spec.wrong_vote);
                        }
                    }
                    ff
                })
                .collect();
            let shared = (0..config.num_shared_experts_per_layer)
                .map(|_| FeedForward::zeros(d, f))
                .collect();
            layers.push(MoeLayer {
                router,
                experts,
                shared,
            });
        }

        let mut unembed = Matrix::zeros(v, d);
        for t in 0..v {
            unembed.set(t, layout.answer(t), 1.0);
        }

        let alignment = AlignmentStep {
            layer: spec.alignment_layer,
            gate: layout.image(),
            source: layout.visual(0)..layout.visual(0) + v,
            target: layout.text(0)..layout.text(0) + v,
            reset: vec![layout.answer(0)..layout.answer(0) + v],
        };

        Ok(Self {
            config,
            text_embed,
            visual_embed,
            modality_offset,
            layers,
            unembed,
            alignment: Some(alignment),
            planted: Some(PlantedTask {
                spec,
                layout,
                rank_spacing: g,
                correct,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HookBundle, TokenSequence};

    fn desk() -> (ToyMoEConfig, PlantedSpec) {
        let cfg = ToyMoEConfig::desk(11);
        let spec = PlantedSpec::standard(&cfg);
        (cfg, spec)
    }

    #[test]
    fn standard_desk_spec_plants_middle_layers() {
        let (_, spec) = desk();
        let layers: BTreeSet<usize> = spec.planted_experts.iter().map(|e| e.layer).collect();
        assert_eq!(layers, BTreeSet::from([1, 2]));
        assert_eq!(spec.planted_experts.len(), 4);
        let vis: BTreeSet<usize> = spec.visual_experts.iter().map(|e| e.layer).collect();
        assert_eq!(vis, BTreeSet::from([0, 3]));
    }

    #[test]
    fn rejects_more_planted_than_top_k() {
        let (cfg, mut spec) = desk();
        spec.planted_experts = (0..3).map(|i| ExpertId::new(1, i)).collect();
        assert!(matches!(Model::planted(cfg, spec), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_margin_not_above_noise() {
        let (cfg, mut spec) = desk();
        spec.noise_amplitude = 2.0;
        assert!(Model::planted(cfg, spec).is_err());
    }

    #[test]
    fn rejects_small_hidden_dim() {
        let (mut cfg, spec) = desk();
        cfg.hidden_dim = 20;
        assert!(Model::planted(cfg, spec).is_err());
    }

    // Exhaustive over every domain token: the planted experts hold the
    // whole Top-K at their layers with the designed margin.
    #[test]
    fn margin_dominates_for_every_domain_token() {
        let (cfg, spec) = desk();
        let spec = spec.with_offset_strength(0.0);
        let model = Model::planted(cfg, spec.clone()).unwrap();
        let task = model.planted_task().unwrap().clone();
        for t in task.domain_tokens() {
            let rec = model
                .forward(&TokenSequence::text(vec![t], 0), &mut HookBundle::empty())
                .unwrap();
            for r in &rec.routing_records {
                let planted: BTreeSet<usize> = spec
                    .planted_experts
                    .iter()
                    .filter(|e| e.layer == r.layer)
                    .map(|e| e.index)
                    .collect();
                if planted.is_empty() {
                    continue;
                }
                let selected: BTreeSet<usize> = r.topk_indices.iter().copied().collect();
                assert_eq!(selected, planted);
                let logits = r.logits.as_ref().unwrap();
                let low = planted.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
                let high = (0..8)
                    .filter(|i| !planted.contains(i))
                    .map(|i| logits[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(low - high >= spec.logit_margin - 1e-12);
            }
        }
    }

    #[test]
    fn clean_task_accuracy_is_one_for_both_modalities() {
        let (cfg, spec) = desk();
        let model = Model::planted(cfg, spec.with_offset_strength(0.0)).unwrap();
        let task = model.planted_task().unwrap().clone();
        for t in task.domain_tokens() {
            for seq in [TokenSequence::text(vec![t], 1), TokenSequence::image(vec![t], 1)] {
                let rec = model.forward(&seq, &mut HookBundle::empty()).unwrap();
                assert_eq!(rec.first_generated(), task.answer(t), "token {t}");
            }
        }
    }
}
