// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluate sparse autoencoders by how well they causally isolate concepts.
//!
//! The pipeline runs from activation stores ([`store`]) through SAEs
//! ([`sae`]), linear probes ([`probes`]) and latent attribution
//! ([`attribution`]) to the two metrics, spurious correlation removal
//! ([`scr`]) and targeted probe perturbation ([`tpp`]). [`judge`] filters
//! latents with a language-model judge, [`report`] aggregates results and
//! [`sweep`] runs whole suites from one configuration file.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod error;
pub mod judge;
pub mod numcore;
pub mod probes;
pub mod report;
pub mod sae;
pub mod scr;
pub mod store;
pub mod sweep;
pub mod tpp;

mod container;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/store.md")]
mod book_store {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/sae.md")]
mod book_sae {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/attribution.md")]
mod book_attribution {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/scr.md")]
mod book_scr {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/tpp.md")]
mod book_tpp {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/judge.md")]
mod book_judge {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/reports.md")]
mod book_reports {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
