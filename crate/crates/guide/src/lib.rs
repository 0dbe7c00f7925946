//! The guide chapters under `book/src`, included here so that every Rust
//! snippet runs as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/batches.md")]
pub mod batches {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/adaptation.md")]
pub mod adaptation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
