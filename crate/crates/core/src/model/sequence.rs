// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Input tokens with per-token modality and phase tags, plus the number of
/// tokens to decode greedily after the last input token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub modality_tags: Vec<Modality>,
    pub phase_tags: Vec<Phase>,
    #[serde(default)]
    pub max_new_tokens: usize,
}

impl TokenSequence {
    pub fn new(
        token_ids: Vec<usize>,
        modality_tags: Vec<Modality>,
        phase_tags: Vec<Phase>,
        max_new_tokens: usize,
    ) -> Result<Self> {
        if token_ids.len() != modality_tags.len() || token_ids.len() != phase_tags.len() {
            return Err(Error::Config(format!(
                "token sequence tag lengths differ: {} tokens, {} modality tags, {} phase tags",
                token_ids.len(),
                modality_tags.len(),
                phase_tags.len()
            )));
        }
        Ok(Self {
            token_ids,
            modality_tags,
            phase_tags,
            max_new_tokens,
        })
    }

    /// A prompt whose tokens all share one modality.
    pub fn prompt(token_ids: Vec<usize>, modality: Modality, max_new_tokens: usize) -> Self {
        let n = token_ids.len();
        Self {
            token_ids,
            modality_tags: vec![modality; n],
            phase_tags: vec![Phase::Prompt; n],
            max_new_tokens,
        }
    }

    pub fn text(token_ids: Vec<usize>, max_new_tokens: usize) -> Self {
        Self::prompt(token_ids, Modality::Text, max_new_tokens)
    }

    pub fn image(token_ids: Vec<usize>, max_new_tokens: usize) -> Self {
        Self::prompt(token_ids, Modality::Image, max_new_tokens)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Same tokens, every position retagged with `modality`.
    pub fn with_modality(&self, modality: Modality) -> Self {
        Self {
            modality_tags: vec![modality; self.len()],
            ..self.clone()
        }
    }
}
