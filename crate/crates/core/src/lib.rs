// SPDX-License-Identifier: MIT OR Apache-2.0

//! Routing analysis and routing-guided interventions for mixture-of-experts
//! models.

pub mod error;
pub mod model;
pub mod routing;
pub mod stats;
pub mod experts;
pub mod intervene;
pub mod concept;
pub mod data;
pub mod trace;
pub mod report;
pub mod cli;

pub use error::{Error, Result};
