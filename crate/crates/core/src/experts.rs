// SPDX-License-Identifier: MIT OR Apache-2.0

//! Domain and visual expert identification by thresholding activation
//! frequency differences, plus set overlap and layer histograms.
//!
//! An [`ExpertSet`] serializes to the JSON document exchanged between the
//! `identify` and `intervene` commands:
//!
//! ```json
//! {"label":"domain","tau":0.3,"members":[{"layer":1,"index":4}],
//!  "source_datasets":["gsm","alpaca"],"sample_count":20,
//!  "grid":{"num_layers":4,"experts_per_layer":8}}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{ExpertGrid, ExpertId};
use crate::stats::{frequency_difference, ActivationFrequencyTable};

/// Default threshold for domain experts.
pub const DOMAIN_TAU: f64 = 0.3;
/// Default threshold for visual experts.
pub const VISUAL_TAU: f64 = 0.2;
/// Default reference-sample budget for identification.
pub const DEFAULT_SAMPLE_BUDGET: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetLabel {
    Domain,
    Visual,
    RandomControl,
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSet {
    pub label: SetLabel,
    pub tau: f64,
    /// Sorted by `(layer, index)`, no duplicates.
    pub members: Vec<ExpertId>,
    pub source_datasets: (String, String),
    pub sample_count: usize,
    pub grid: ExpertGrid,
}

impl ExpertSet {
    pub fn new(
        label: SetLabel,
        tau: f64,
        members: impl IntoIterator<Item = ExpertId>,
        source_datasets: (String, String),
        sample_count: usize,
        grid: ExpertGrid,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("tau {tau} outside (0, 1)")));
        }
        let members: BTreeSet<ExpertId> = members.into_iter().collect();
        for id in &members {
            grid.check(*id)?;
        }
        Ok(Self {
            label,
            tau,
            members: members.into_iter().collect(),
            source_datasets,
            sample_count,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: ExpertId) -> bool {
        self.members.binary_search(&id).is_ok()
    }

    pub fn member_set(&self) -> BTreeSet<ExpertId> {
        self.members.iter().copied().collect()
    }

    /// Expert indices of one layer.
    pub fn at_layer(&self, layer: usize) -> Vec<usize> {
        self.members
            .iter()
            .filter(|id| id.layer == layer)
            .map(|id| id.index)
            .collect()
    }

    /// Members per layer, for every layer of the grid.
    pub fn counts_per_layer(&self) -> Vec<usize> {
        let mut counts = vec![0; self.grid.num_layers];
        for id in &self.members {
            counts[id.layer] += 1;
        }
        counts
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_str(&text)?;
        Self::new(
            set.label,
            set.tau,
            set.members,
            set.source_datasets,
            set.sample_count,
            set.grid,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// `budget` distinct sample positions out of `available`, drawn uniformly
/// and returned in ascending order. Fewer available samples is an error.
pub fn select_samples<R: rand::Rng + ?Sized>(
    available: usize,
    budget: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if available < budget {
        return Err(Error::InsufficientSamples {
            requested: budget,
            available,
        });
    }
    let mut chosen = rand::seq::index::sample(rng, available, budget).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `{E_{l,i} : dPhi_{l,i} > tau}` with strict inequality. An empty result
/// is returned as-is with a warning.
pub fn identify(
    domain: &ActivationFrequencyTable,
    general: &ActivationFrequencyTable,
    tau: f64,
    label: SetLabel,
) -> Result<ExpertSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau {tau} outside (0, 1)")));
    }
    let diff = frequency_difference(domain, general)?;
    let members = diff.grid.experts().filter(|&id| diff.get(id) > tau);
    let set = ExpertSet::new(
        label,
        tau,
        members,
        (domain.dataset_label.clone(), general.dataset_label.clone()),
        domain.sample_count,
        domain.grid,
    )?;
    if set.is_empty() {
        log::warn!(
            "no experts exceed tau={tau} for {} vs {}",
            domain.dataset_label,
            general.dataset_label
        );
    }
    Ok(set)
}

/// Intersection, labelled [`SetLabel::Overlap`]; `tau` and sample count are
/// taken from `a`, source datasets are the two set labels' datasets.
pub fn overlap(a: &ExpertSet, b: &ExpertSet) -> Result<ExpertSet> {
    a.grid.ensure_same(&b.grid, "overlap")?;
    let bs = b.member_set();
    ExpertSet::new(
        SetLabel::Overlap,
        a.tau,
        a.members.iter().copied().filter(|id| bs.contains(id)),
        (a.source_datasets.0.clone(), b.source_datasets.0.clone()),
        a.sample_count,
        a.grid,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub counts: BTreeMap<usize, usize>,
    /// Present when a second set was given.
    pub overlap_counts: Option<BTreeMap<usize, usize>>,
}

pub fn layer_histogram(set: &ExpertSet, other: Option<&ExpertSet>) -> Result<LayerHistogram> {
    let to_map = |v: Vec<usize>| v.into_iter().enumerate().collect::<BTreeMap<_, _>>();
    let counts = to_map(set.counts_per_layer());
    let overlap_counts = match other {
        Some(b) => Some(to_map(overlap(set, b)?.counts_per_layer())),
        None => None,
    };
    Ok(LayerHistogram {
        counts,
        overlap_counts,
    })
}
