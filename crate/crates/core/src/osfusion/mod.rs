// SPDX-License-Identifier: MIT OR Apache-2.0

//! Optimize-then-suppress fusion: learn a subject delta for the new fact,
//! attribute the old fact to subject embedding dimensions, and subtract a
//! share of the original embedding at the most attributed ones.

mod attribution;
mod config;
mod optimize;
mod pipeline;
mod request;

pub use attribution::{attribute, attribution_scores, fuse, select_keds, AttributionReport};
pub use config::FusionConfig;
pub use optimize::{context_prefixes, optimize_delta, optimize_delta_with_prefixes, DeltaOutcome, EditObjective, ObjectiveValue};
pub use pipeline::{edit, fuse_all, fuse_request, EditOutcome, FusedEdit, FusionParts, FusionSummary, RequestFailure};
pub use request::*;

#[cfg(test)]
mod tests;
