// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic fact corpus, edit metrics, and batch / sequential / sweep runners.

mod corpus;
mod metrics;
mod runner;

pub use corpus::*;
pub use metrics::*;
pub use runner::*;
