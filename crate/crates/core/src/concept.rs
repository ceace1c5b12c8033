// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-modal concept intervention on hidden states.
//!
//! `h' = h - alpha * h_src + alpha * h_tgt`, applied at the hidden hook
//! point of a single layer and only at IMAGE positions. Concept vectors are
//! captured from pure-text prompts at the same hook point.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardHook, HookBundle, HookSite, Modality, Model, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVectorBank {
    pub per_layer_src: BTreeMap<usize, Vec<f64>>,
    pub per_layer_tgt: BTreeMap<usize, Vec<f64>>,
    pub alpha: f64,
}

impl ConceptVectorBank {
    pub fn new(
        per_layer_src: BTreeMap<usize, Vec<f64>>,
        per_layer_tgt: BTreeMap<usize, Vec<f64>>,
        alpha: f64,
    ) -> Result<Self> {
        if !per_layer_src.keys().eq(per_layer_tgt.keys()) {
            return Err(Error::Config(
                "source and target concept vectors cover different layers".into(),
            ));
        }
        for (s, t) in per_layer_src.values().zip(per_layer_tgt.values()) {
            if s.len() != t.len() {
                return Err(Error::DimensionMismatch {
                    expected: s.len(),
                    actual: t.len(),
                });
            }
        }
        Ok(Self {
            per_layer_src,
            per_layer_tgt,
            alpha,
        })
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_layer_src.keys().copied()
    }

    fn pair(&self, layer: usize) -> Result<(&[f64], &[f64])> {
        match (self.per_layer_src.get(&layer), self.per_layer_tgt.get(&layer)) {
            (Some(s), Some(t)) => Ok((s, t)),
            _ => Err(Error::IndexOutOfRange(format!("layer {layer} not in concept bank"))),
        }
    }
}

/// Hidden states of both prompts at `position`, for every layer.
pub fn extract_concept_vectors(
    model: &Model,
    src_prompt: &TokenSequence,
    tgt_prompt: &TokenSequence,
    position: usize,
) -> Result<ConceptVectorBank> {
    let capture = |prompt: &TokenSequence| -> Result<BTreeMap<usize, Vec<f64>>> {
        if position >= prompt.len() {
            return Err(Error::IndexOutOfRange(format!(
                "position {position} in a prompt of {} tokens",
                prompt.len()
            )));
        }
        let mut seq = prompt.clone();
        seq.max_new_tokens = 0;
        let rec = model.forward(&seq, &mut HookBundle::empty().capture_hidden())?;
        let snaps = rec.hidden_snapshots.expect("hidden capture requested");
        Ok(snaps
            .into_iter()
            .enumerate()
            .map(|(l, mut per_pos)| (l, per_pos.swap_remove(position)))
            .collect())
    };
    ConceptVectorBank::new(capture(src_prompt)?, capture(tgt_prompt)?, 1.0)
}

/// `hidden - alpha * h_src + alpha * h_tgt`. `alpha = 0` returns `hidden`
/// unchanged.
pub fn apply_concept_edit(
    hidden: &[f64],
    bank: &ConceptVectorBank,
    layer: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    let (src, tgt) = bank.pair(layer)?;
    if hidden.len() != src.len() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            actual: hidden.len(),
        });
    }
    if alpha == 0.0 {
        return Ok(hidden.to_vec());
    }
    Ok(hidden
        .iter()
        .zip(src.iter().zip(tgt))
        .map(|(h, (s, t))| h - alpha * s + alpha * t)
        .collect())
}

/// Hidden-state hook applying the bank's edit at one layer, IMAGE
/// positions only.
pub struct ConceptEditHook<'a> {
    bank: &'a ConceptVectorBank,
    layer: usize,
    edits: usize,
}

impl<'a> ConceptEditHook<'a> {
    pub fn new(bank: &'a ConceptVectorBank, layer: usize) -> Result<Self> {
        bank.pair(layer)?;
        Ok(Self {
            bank,
            layer,
            edits: 0,
        })
    }

    /// Number of positions edited so far.
    pub fn edits(&self) -> usize {
        self.edits
    }
}

impl ForwardHook for ConceptEditHook<'_> {
    fn on_hidden(&mut self, site: &HookSite, hidden: &mut [f64]) {
        if site.layer != self.layer || site.modality != Modality::Image {
            return;
        }
        let edited = apply_concept_edit(hidden, self.bank, self.layer, self.bank.alpha)
            .expect("bank layer checked at construction");
        hidden.copy_from_slice(&edited);
        self.edits += 1;
    }
}

/// One sweep instance: a prompt containing IMAGE positions, the answer of
/// the target concept, and the concept vectors for this instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTask {
    pub prompt: TokenSequence,
    pub target_answer: usize,
    pub bank: ConceptVectorBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub per_layer_success_rate: BTreeMap<usize, f64>,
    pub trials: usize,
}

impl SweepResult {
    /// `layer,success_rate` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,success_rate\n");
        for (l, r) in &self.per_layer_success_rate {
            out.push_str(&format!("{l},{r}\n"));
        }
        out
    }
}

/// Exact match on the first generated token.
pub fn exact_match(output: Option<usize>, target: usize) -> bool {
    output == Some(target)
}

/// For every model layer independently, edits IMAGE positions at that layer
/// and reports the fraction of instances whose output satisfies
/// `success(output, target_answer)`. Layers run concurrently and are
/// reduced in layer order.
pub fn sweep_layers<F>(model: &Model, tasks: &[ConceptTask], success: F) -> Result<SweepResult>
where
    F: Fn(Option<usize>, usize) -> bool + Sync,
{
    if tasks.is_empty() {
        return Err(Error::Empty("concept sweep needs at least one instance".into()));
    }
    let num_layers = model.config().num_layers;
    let rates: Vec<(usize, f64)> = (0..num_layers)
        .into_par_iter()
        .map(|layer| {
            let mut hits = 0usize;
            for task in tasks {
                let mut seq = task.prompt.clone();
                seq.max_new_tokens = seq.max_new_tokens.max(1);
                let mut hook = ConceptEditHook::new(&task.bank, layer)?;
                let rec = model.forward(&seq, &mut HookBundle::empty().with(&mut hook))?;
                if success(rec.first_generated(), task.target_answer) {
                    hits += 1;
                }
            }
            Ok((layer, hits as f64 / tasks.len() as f64))
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        per_layer_success_rate: rates.into_iter().collect(),
        trials: tasks.len(),
    })
}

/// Concept tasks on a planted model: for each ordered pair of distinct
/// domain tokens `(a, b)`, the IMAGE prompt `[a]` with target answer
/// `answer(b)` and concept vectors from the TEXT prompts `[a]` and `[b]`.
pub fn planted_concept_tasks(model: &Model, alpha: f64) -> Result<Vec<ConceptTask>> {
    let task = model.planted_task().ok_or_else(|| Error::Capability {
        operation: "planted concept tasks".into(),
        requirement: "a planted model".into(),
    })?;
    let domain = task.domain_tokens();
    let mut tasks = Vec::new();
    for &a in &domain {
        for &b in &domain {
            if a == b {
                continue;
            }
            let bank = extract_concept_vectors(
                model,
                &TokenSequence::text(vec![a], 0),
                &TokenSequence::text(vec![b], 0),
                0,
            )?
            .with_alpha(alpha);
            tasks.push(ConceptTask {
                prompt: TokenSequence::image(vec![a], 1),
                target_answer: task.answer(b).expect("domain token has an answer"),
                bank,
            });
        }
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PlantedSpec, ToyMoEConfig};

    fn planted() -> Model {
        let cfg = ToyMoEConfig::desk(7);
        let spec = PlantedSpec::standard(&cfg).with_offset_strength(0.0);
        Model::planted(cfg, spec).unwrap()
    }

    fn bank() -> ConceptVectorBank {
        let src = BTreeMap::from([(0, vec![1.0, 2.0, 3.0])]);
        let tgt = BTreeMap::from([(0, vec![-1.0, 0.5, 4.0])]);
        ConceptVectorBank::new(src, tgt, 1.0).unwrap()
    }

    #[test]
    fn edit_algebra() {
        let b = bank();
        let h = [0.3, -0.7, 1.1];
        assert_eq!(apply_concept_edit(&h, &b, 0, 0.0).unwrap(), h.to_vec());
        assert_eq!(apply_concept_edit(&[1.0, 2.0, 3.0], &b, 0, 1.0).unwrap(), vec![-1.0, 0.5, 4.0]);
        let once = apply_concept_edit(&h, &b, 0, 1.0).unwrap();
        let twice = apply_concept_edit(&once, &b, 0, 1.0).unwrap();
        let direct = apply_concept_edit(&h, &b, 0, 2.0).unwrap();
        for (x, y) in twice.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            apply_concept_edit(&[1.0], &b, 0, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(apply_concept_edit(&h, &b, 1, 1.0).is_err());
    }

    #[test]
    fn bank_requires_matching_layers() {
        let src = BTreeMap::from([(0, vec![1.0])]);
        let tgt = BTreeMap::from([(1, vec![1.0])]);
        assert!(ConceptVectorBank::new(src, tgt, 1.0).is_err());
    }

    #[test]
    fn extraction_cases() {
        let model = planted();
        let p = TokenSequence::text(vec![1, 2], 0);
        let same = extract_concept_vectors(&model, &p, &p, 1).unwrap();
        assert_eq!(same.per_layer_src, same.per_layer_tgt);
        assert_eq!(same, extract_concept_vectors(&model, &p, &p, 1).unwrap());
        assert!(matches!(
            extract_concept_vectors(&model, &p, &p, 2),
            Err(Error::IndexOutOfRange(_))
        ));
        let a = TokenSequence::text(vec![1], 0);
        let b = TokenSequence::text(vec![3], 0);
        let bank = extract_concept_vectors(&model, &a, &b, 0).unwrap();
        let diff: Vec<f64> = bank.per_layer_tgt[&0]
            .iter()
            .zip(&bank.per_layer_src[&0])
            .map(|(t, s)| t - s)
            .collect();
        let expect: Vec<f64> = model
            .text_embedding(3)
            .iter()
            .zip(model.text_embedding(1))
            .map(|(t, s)| t - s)
            .collect();
        assert_eq!(diff, expect);
    }

    #[test]
    fn text_positions_are_untouched() {
        let model = planted();
        let b = extract_concept_vectors(
            &model,
            &TokenSequence::text(vec![1], 0),
            &TokenSequence::text(vec![2], 0),
            0,
        )
        .unwrap();
        let seq = TokenSequence::text(vec![1, 3], 1);
        let base = model.forward(&seq, &mut HookBundle::empty()).unwrap();
        for layer in 0..4 {
            let mut hook = ConceptEditHook::new(&b, layer).unwrap();
            let rec = model.forward(&seq, &mut HookBundle::empty().with(&mut hook)).unwrap();
            assert!(base.bit_identical(&rec));
            assert_eq!(hook.edits(), 0);
        }
    }

    #[test]
    fn sweep_cases() {
        let model = planted();
        let tasks = planted_concept_tasks(&model, 1.0).unwrap();
        assert!(sweep_layers(&model, &[], exact_match).is_err());
        let always = sweep_layers(&model, &tasks, |_, _| true).unwrap();
        assert!(always.per_layer_success_rate.values().all(|&r| r == 1.0));
        let align = model.planted_task().unwrap().spec.alignment_layer;
        let sweep = sweep_layers(&model, &tasks, exact_match).unwrap();
        for (&l, &r) in &sweep.per_layer_success_rate {
            assert_eq!(r, if l < align { 0.0 } else { 1.0 }, "layer {l}");
        }
        assert_eq!(sweep.trials, tasks.len());
        assert!(sweep.to_csv().starts_with("layer,success_rate\n0,0\n"));
    }

    #[test]
    fn zero_alpha_sweep_is_baseline() {
        let model = planted();
        let tasks = planted_concept_tasks(&model, 0.0).unwrap();
        let baseline = tasks
            .iter()
            .filter(|t| {
                let rec = model.forward(&t.prompt, &mut HookBundle::empty()).unwrap();
                exact_match(rec.first_generated(), t.target_answer)
            })
            .count() as f64
            / tasks.len() as f64;
        let sweep = sweep_layers(&model, &tasks, exact_match).unwrap();
        assert!(sweep.per_layer_success_rate.values().all(|&r| r == baseline));
    }
}
