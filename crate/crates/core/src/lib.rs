// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod canon;
pub mod circuit;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod par;
pub mod steering;
pub mod trace;
pub mod veena;

pub use error::{Error, Result};
