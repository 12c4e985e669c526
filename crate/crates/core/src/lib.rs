// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod io;
pub mod matcher;
pub mod optim;
pub mod osfusion;
pub mod store;
pub mod toylm;

pub use error::{Error, Result};
