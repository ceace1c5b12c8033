// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small, deterministic mixture-of-experts stack.
//!
//! # Architecture
//!
//! ```text
//! token --(text table | visual table + modality offset)--> h
//!   for each layer l:
//!     [alignment step, planted models only, at its configured layer]
//!     hook_hidden(l)                      residual entering the MoE block
//!     r = router_l . h
//!     hook_router(l)                      logits before softmax
//!     p = softmax(r); Top-K; renormalize
//!     h = h + sum_k w_k expert_k(h) + sum shared(h)
//!   logits = unembed . h
//! ```
//!
//! Every position is processed independently (there is no attention), and
//! decoding is greedy. Weights are immutable after construction, so a
//! [`Model`] can be shared across threads and concurrent forward passes.
//!
//! # Weight initialization order
//!
//! All draws come from one `ChaCha8Rng` seeded with `config.seed`, in this
//! order: text embedding table, visual embedding table, modality offset,
//! then per layer (layer-major) the router followed by each routed expert
//! and each shared expert (`w_in`, then `w_out`), and finally the
//! unembedding. Matrices are drawn row-major from `N(0, 1/fan_in)`;
//! embeddings and the offset from `N(0, 1)`; biases are zero.

mod config;
mod hooks;
mod planted;
mod sequence;

pub use config::{ToyMoEConfig, PRESET_DIR_ENV, PRESET_NAMES};
pub use hooks::{ForwardHook, HookBundle, HookSite, LogitShift};
pub use planted::{ChannelLayout, PlantedSpec, PlantedTask};
pub use sequence::{Modality, TokenSequence};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::routing::{bits_eq, ExpertGrid, Phase, RoutingRecord};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    pub fn bit_identical(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && bits_eq(&self.data, &other.data)
    }
}

/// Two-layer ReLU feed-forward block: `w_out . relu(w_in . x + b_in) + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl FeedForward {
    fn zeros(hidden: usize, ffn: usize) -> Self {
        Self {
            w_in: Matrix::zeros(ffn, hidden),
            b_in: vec![0.0; ffn],
            w_out: Matrix::zeros(hidden, ffn),
            b_out: vec![0.0; hidden],
        }
    }

    fn random(hidden: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_in: Matrix::random(ffn, hidden, (hidden as f64).recip().sqrt(), rng),
            b_in: vec![0.0; ffn],
            w_out: Matrix::random(hidden, ffn, (ffn as f64).recip().sqrt(), rng),
            b_out: vec![0.0; hidden],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut inner = self.w_in.matvec(x);
        for (v, b) in inner.iter_mut().zip(&self.b_in) {
            *v = (*v + b).max(0.0);
        }
        let mut out = self.w_out.matvec(&inner);
        for (v, b) in out.iter_mut().zip(&self.b_out) {
            *v += b;
        }
        out
    }

    fn bit_identical(&self, other: &Self) -> bool {
        self.w_in.bit_identical(&other.w_in)
            && self.w_out.bit_identical(&other.w_out)
            && bits_eq(&self.b_in, &other.b_in)
            && bits_eq(&self.b_out, &other.b_out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    /// `E x hidden_dim` linear router.
    pub router: Matrix,
    pub experts: Vec<FeedForward>,
    pub shared: Vec<FeedForward>,
}

/// Modality alignment used by planted models: at entry to `layer`, for every
/// position whose `gate` channel exceeds 0.5, the `target` channel block is
/// overwritten with the `source` block, the source is cleared and every
/// `reset` block is zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentStep {
    pub layer: usize,
    pub gate: usize,
    pub source: std::ops::Range<usize>,
    pub target: std::ops::Range<usize>,
    pub reset: Vec<std::ops::Range<usize>>,
}

impl AlignmentStep {
    fn apply(&self, h: &mut [f64]) {
        if h[self.gate] <= 0.5 {
            return;
        }
        for (t, s) in self.target.clone().zip(self.source.clone()) {
            h[t] = h[s];
            h[s] = 0.0;
        }
        for range in &self.reset {
            h[range.clone()].fill(0.0);
        }
    }
}

/// Immutable weight bundle.
#[derive(Debug, Clone)]
pub struct Model {
    config: ToyMoEConfig,
    text_embed: Matrix,
    visual_embed: Matrix,
    modality_offset: Vec<f64>,
    layers: Vec<MoeLayer>,
    unembed: Matrix,
    alignment: Option<AlignmentStep>,
    planted: Option<PlantedTask>,
}

/// Everything a forward pass produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    /// Input tokens followed by generated tokens.
    pub tokens: Vec<usize>,
    pub generated: Vec<usize>,
    /// Vocabulary logits that produced each generated token.
    pub output_logits: Vec<Vec<f64>>,
    /// One record per (token, layer), ordered by position then layer.
    pub routing_records: Vec<RoutingRecord>,
    /// `[layer][position]` residual vectors at the hidden hook point, after
    /// hook edits. Present only when requested.
    pub hidden_snapshots: Option<Vec<Vec<Vec<f64>>>>,
}

impl ForwardRecord {
    pub fn bit_identical(&self, other: &Self) -> bool {
        let snaps = match (&self.hidden_snapshots, &other.hidden_snapshots) {
            (Some(a), Some(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|(la, lb)| {
                        la.len() == lb.len() && la.iter().zip(lb).all(|(x, y)| bits_eq(x, y))
                    })
            }
            (None, None) => true,
            _ => false,
        };
        self.tokens == other.tokens
            && self.generated == other.generated
            && self.output_logits.len() == other.output_logits.len()
            && self
                .output_logits
                .iter()
                .zip(&other.output_logits)
                .all(|(a, b)| bits_eq(a, b))
            && self.routing_records.len() == other.routing_records.len()
            && self
                .routing_records
                .iter()
                .zip(&other.routing_records)
                .all(|(a, b)| a.bit_identical(b))
            && snaps
    }

    /// Routing records of one layer, in position order.
    pub fn layer_records(&self, layer: usize) -> impl Iterator<Item = &RoutingRecord> {
        self.routing_records.iter().filter(move |r| r.layer == layer)
    }

    pub fn first_generated(&self) -> Option<usize> {
        self.generated.first().copied()
    }
}

impl Model {
    /// Draws a model with random weights from `config.seed`.
    pub fn build(config: ToyMoEConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let v = config.vocab_size;
        let e = config.num_routed_experts_per_layer;
        let f = config.expert_ffn_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let text_embed = Matrix::random(v, d, 1.0, &mut rng);
        let visual_embed = Matrix::random(v, d, 1.0, &mut rng);
        let modality_offset: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let layers = (0..config.num_layers)
            .map(|_| {
                let router = Matrix::random(e, d, (d as f64).recip().sqrt(), &mut rng);
                let experts = (0..e).map(|_| FeedForward::random(d, f, &mut rng)).collect();
                let shared = (0..config.num_shared_experts_per_layer)
                    .map(|_| FeedForward::random(d, f, &mut rng))
                    .collect();
                MoeLayer {
                    router,
                    experts,
                    shared,
                }
            })
            .collect();
        let unembed = Matrix::random(v, d, (d as f64).recip().sqrt(), &mut rng);

        Ok(Self {
            config,
            text_embed,
            visual_embed,
            modality_offset,
            layers,
            unembed,
            alignment: None,
            planted: None,
        })
    }

    pub fn config(&self) -> &ToyMoEConfig {
        &self.config
    }

    pub fn grid(&self) -> ExpertGrid {
        self.config.grid()
    }

    pub fn layers(&self) -> &[MoeLayer] {
        &self.layers
    }

    pub fn text_embedding(&self, token: usize) -> &[f64] {
        self.text_embed.row(token)
    }

    pub fn modality_offset(&self) -> &[f64] {
        &self.modality_offset
    }

    /// Ground truth of a planted model; `None` for random models.
    pub fn planted_task(&self) -> Option<&PlantedTask> {
        self.planted.as_ref()
    }

    /// Bit-level equality of every weight.
    pub fn weights_bit_identical(&self, other: &Self) -> bool {
        self.config == other.config
            && self.text_embed.bit_identical(&other.text_embed)
            && self.visual_embed.bit_identical(&other.visual_embed)
            && bits_eq(&self.modality_offset, &other.modality_offset)
            && self.unembed.bit_identical(&other.unembed)
            && self.alignment == other.alignment
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.router.bit_identical(&b.router)
                    && a.experts.len() == b.experts.len()
                    && a.experts.iter().zip(&b.experts).all(|(x, y)| x.bit_identical(y))
                    && a.shared.len() == b.shared.len()
                    && a.shared.iter().zip(&b.shared).all(|(x, y)| x.bit_identical(y))
            })
    }

    fn embed(&self, token: usize, modality: Modality) -> Vec<f64> {
        match modality {
            Modality::Text => self.text_embed.row(token).to_vec(),
            Modality::Image => self
                .visual_embed
                .row(token)
                .iter()
                .zip(&self.modality_offset)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Runs the stack over one position. Returns the vocabulary logits.
    fn run_position(
        &self,
        token: usize,
        position: usize,
        modality: Modality,
        phase: Phase,
        hooks: &mut HookBundle<'_>,
        records: &mut Vec<RoutingRecord>,
        snapshots: &mut Option<Vec<Vec<Vec<f64>>>>,
    ) -> Vec<f64> {
        let mut h = self.embed(token, modality);
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(step) = self.alignment.as_ref().filter(|s| s.layer == l) {
                step.apply(&mut h);
            }
            let site = HookSite {
                layer: l,
                position,
                token,
                modality,
                phase,
            };
            hooks.fire_hidden(&site, &mut h);
            if let Some(snaps) = snapshots.as_mut() {
                snaps[l].push(h.clone());
            }

            let raw = layer.router.matvec(&h);
            let mut edited = raw.clone();
            hooks.fire_router(&site, &mut edited);
            let adjusted = (!bits_eq(&raw, &edited)).then_some(edited);
            let record =
                RoutingRecord::route(position, l, phase, raw, adjusted, self.config.top_k);

            let mut update = vec![0.0; h.len()];
            for (&idx, &w) in record.topk_indices.iter().zip(&record.topk_weights) {
                for (u, y) in update.iter_mut().zip(layer.experts[idx].apply(&h)) {
                    *u += w * y;
                }
            }
            for shared in &layer.shared {
                for (u, y) in update.iter_mut().zip(shared.apply(&h)) {
                    *u += y;
                }
            }
            for (x, u) in h.iter_mut().zip(update) {
                *x += u;
            }
            records.push(record);
        }
        self.unembed.matvec(&h)
    }

    /// Greedy forward pass. With an empty hook bundle the result is a pure
    /// function of `(self, seq)`.
    pub fn forward(&self, seq: &TokenSequence, hooks: &mut HookBundle<'_>) -> Result<ForwardRecord> {
        if seq.token_ids.len() != seq.modality_tags.len()
            || seq.token_ids.len() != seq.phase_tags.len()
        {
            return Err(Error::Config("token sequence tag lengths differ".into()));
        }
        let vocab = self.config.vocab_size;
        if let Some((position, &token)) =
            seq.token_ids.iter().enumerate().find(|(_, &t)| t >= vocab)
        {
            return Err(Error::OutOfVocab {
                token,
                position,
                vocab_size: vocab,
            });
        }
        if seq.is_empty() && seq.max_new_tokens > 0 {
            return Err(Error::Config("cannot decode from an empty prompt".into()));
        }

        let total = seq.len() + seq.max_new_tokens;
        let mut records = Vec::with_capacity(total * self.layers.len());
        let mut snapshots = hooks
            .captures_hidden()
            .then(|| vec![Vec::with_capacity(total); self.layers.len()]);
        let mut tokens = seq.token_ids.clone();
        let mut generated = Vec::with_capacity(seq.max_new_tokens);
        let mut output_logits = Vec::with_capacity(seq.max_new_tokens);

        let mut last = Vec::new();
        for (pos, &token) in seq.token_ids.iter().enumerate() {
            last = self.run_position(
                token,
                pos,
                seq.modality_tags[pos],
                seq.phase_tags[pos],
                hooks,
                &mut records,
                &mut snapshots,
            );
        }
        for _ in 0..seq.max_new_tokens {
            let next = argmax(&last);
            output_logits.push(std::mem::take(&mut last));
            generated.push(next);
            tokens.push(next);
            last = self.run_position(
                next,
                tokens.len() - 1,
                Modality::Text,
                Phase::Generation,
                hooks,
                &mut records,
                &mut snapshots,
            );
        }

        Ok(ForwardRecord {
            tokens,
            generated,
            output_logits,
            routing_records: records,
            hidden_snapshots: snapshots,
        })
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::INTERNAL_SUM_TOLERANCE;

    fn prompt() -> TokenSequence {
        TokenSequence::new(
            vec![1, 5, 3],
            vec![Modality::Text, Modality::Image, Modality::Text],
            vec![Phase::Prompt; 3],
            2,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_gives_bit_identical_weights() {
        let a = Model::build(ToyMoEConfig::desk(7)).unwrap();
        let b = Model::build(ToyMoEConfig::desk(7)).unwrap();
        assert!(a.weights_bit_identical(&b));
        let c = Model::build(ToyMoEConfig::desk(8)).unwrap();
        assert!(!a.weights_bit_identical(&c));
    }

    #[test]
    fn qwen_like_has_full_grid() {
        let m = Model::build(ToyMoEConfig::qwen_like(1)).unwrap();
        assert_eq!(m.layers().len(), 48);
        assert!(m.layers().iter().all(|l| l.experts.len() == 128 && l.router.rows() == 128));
    }

    #[test]
    fn rejects_top_k_above_expert_count() {
        let cfg = ToyMoEConfig {
            top_k: 9,
            ..ToyMoEConfig::desk(0)
        };
        assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn forward_is_deterministic_and_records_every_token_layer() {
        let m = Model::build(ToyMoEConfig::desk(3)).unwrap();
        let a = m.forward(&prompt(), &mut HookBundle::empty()).unwrap();
        let b = m.forward(&prompt(), &mut HookBundle::empty()).unwrap();
        assert!(a.bit_identical(&b));
        assert_eq!(a.routing_records.len(), 5 * 4);
        assert_eq!(a.generated.len(), 2);
        for r in &a.routing_records {
            let sum: f64 = r.topk_weights.iter().sum();
            assert!((sum - 1.0).abs() < INTERNAL_SUM_TOLERANCE);
            assert!(r.adjusted_logits.is_none());
        }
        let gen_phase = a
            .routing_records
            .iter()
            .filter(|r| r.phase == Phase::Generation)
            .count();
        assert_eq!(gen_phase, 2 * 4);
    }

    #[test]
    fn zero_logit_shift_is_identity() {
        let m = Model::build(ToyMoEConfig::desk(3)).unwrap();
        let base = m.forward(&prompt(), &mut HookBundle::empty()).unwrap();
        let mut shift = LogitShift(0.0);
        let shifted = m
            .forward(&prompt(), &mut HookBundle::empty().with(&mut shift))
            .unwrap();
        assert!(base.bit_identical(&shifted));
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let m = Model::build(ToyMoEConfig::desk(3)).unwrap();
        let seq = TokenSequence::text(vec![0, 8], 0);
        assert!(matches!(
            m.forward(&seq, &mut HookBundle::empty()),
            Err(Error::OutOfVocab { token: 8, position: 1, .. })
        ));
    }

    #[test]
    fn shared_experts_never_appear_in_top_k() {
        let m = Model::build(ToyMoEConfig::kimi_like(2)).unwrap();
        let rec = m
            .forward(&TokenSequence::text(vec![1, 2], 1), &mut HookBundle::empty())
            .unwrap();
        for r in &rec.routing_records {
            assert_eq!(r.topk_indices.len(), 6);
            assert!(r.topk_indices.iter().all(|&i| i < 64));
        }
    }

    struct ReplaceHidden {
        layer: usize,
        value: Vec<f64>,
    }

    impl ForwardHook for ReplaceHidden {
        fn on_hidden(&mut self, site: &HookSite, hidden: &mut [f64]) {
            if site.layer == self.layer {
                hidden.copy_from_slice(&self.value);
            }
        }
    }

    #[test]
    fn hidden_hook_edits_are_captured() {
        let m = Model::build(ToyMoEConfig::desk(3)).unwrap();
        let seq = TokenSequence::text(vec![4], 0);
        let mut hook = ReplaceHidden {
            layer: 2,
            value: vec![0.5; 32],
        };
        let rec = m
            .forward(&seq, &mut HookBundle::empty().with(&mut hook).capture_hidden())
            .unwrap();
        let snaps = rec.hidden_snapshots.unwrap();
        assert_eq!(snaps.len(), 4);
        assert_eq!(snaps[2][0], vec![0.5; 32]);
    }
}
