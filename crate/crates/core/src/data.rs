// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded sample generators over a planted task.
//!
//! Sample `i` of dataset `d` under seed `s` is drawn from
//! `ChaCha8Rng(s)` on stream `(d << 32) | i`, so any subset of samples can
//! be regenerated independently and in any order.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardRecord, Modality, PlantedTask, TokenSequence};

/// Default prompt length of generated samples.
pub const DEFAULT_PROMPT_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    DomainText,
    GeneralText,
    DomainImage,
    GeneralImage,
}

impl Dataset {
    pub const ALL: [Dataset; 4] = [
        Dataset::DomainText,
        Dataset::GeneralText,
        Dataset::DomainImage,
        Dataset::GeneralImage,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Dataset::DomainText => "domain-text",
            Dataset::GeneralText => "general-text",
            Dataset::DomainImage => "domain-image",
            Dataset::GeneralImage => "general-image",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Dataset::DomainText | Dataset::GeneralText => Modality::Text,
            Dataset::DomainImage | Dataset::GeneralImage => Modality::Image,
        }
    }

    pub fn is_domain(self) -> bool {
        matches!(self, Dataset::DomainText | Dataset::DomainImage)
    }

    /// The same content in the other modality.
    pub fn counterpart(self) -> Dataset {
        match self {
            Dataset::DomainText => Dataset::DomainImage,
            Dataset::DomainImage => Dataset::DomainText,
            Dataset::GeneralText => Dataset::GeneralImage,
            Dataset::GeneralImage => Dataset::GeneralText,
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            Dataset::DomainText => 0,
            Dataset::GeneralText => 1,
            Dataset::DomainImage => 2,
            Dataset::GeneralImage => 3,
        }
    }
}

impl std::str::FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dataset::ALL
            .into_iter()
            .find(|d| d.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `"<dataset>-<index>"`; text and image renderings of the same content
    /// share the index.
    pub id: String,
    pub index: u64,
    pub dataset: Dataset,
    pub prompt: TokenSequence,
    /// Expected first generated token.
    pub answer: usize,
}

/// Sample `index` of `dataset`. Prompt tokens are drawn uniformly from the
/// dataset's token pool; the expected answer is the task answer of the last
/// prompt token (domain) or its echo (general).
pub fn sample(
    task: &PlantedTask,
    dataset: Dataset,
    seed: u64,
    index: u64,
    prompt_len: usize,
) -> Result<Sample> {
    if prompt_len == 0 {
        return Err(Error::Config("prompt_len must be positive".into()));
    }
    let pool = if dataset.is_domain() {
        task.domain_tokens()
    } else {
        task.general_tokens()
    };
    if pool.is_empty() {
        return Err(Error::Empty(format!("{} has no tokens", dataset.label())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // image and text renderings share content, hence the modality-free tag
    rng.set_stream(((dataset.stream_tag() & 1) << 32) | index);
    let tokens: Vec<usize> = (0..prompt_len)
        .map(|_| *pool.choose(&mut rng).expect("non-empty pool"))
        .collect();
    let last = *tokens.last().expect("non-empty prompt");
    let answer = task.answer(last).unwrap_or_else(|| task.wrong_answer(last));
    let base = match dataset.modality() {
        Modality::Text => dataset,
        Modality::Image => dataset.counterpart(),
    };
    Ok(Sample {
        id: format!("{}-{index}", base.label().trim_end_matches("-text")),
        index,
        dataset,
        prompt: TokenSequence::prompt(tokens, dataset.modality(), 1),
        answer,
    })
}

/// Samples `0..count` of `dataset`.
pub fn samples(
    task: &PlantedTask,
    dataset: Dataset,
    seed: u64,
    count: usize,
    prompt_len: usize,
) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| sample(task, dataset, seed, i, prompt_len))
        .collect()
}

/// Fraction of records whose first generated token equals the sample answer.
pub fn task_accuracy(samples: &[Sample], records: &[ForwardRecord]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("accuracy over zero samples".into()));
    }
    if samples.len() != records.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            actual: records.len(),
        });
    }
    let hits = samples
        .iter()
        .zip(records)
        .filter(|(s, r)| r.first_generated() == Some(s.answer))
        .count();
    Ok(hits as f64 / samples.len() as f64)
}
