//! Library surface of the `mrseg` command-line tool: configuration loading,
//! the build pipeline, corpus statistics, and validation. The binary in
//! `main.rs` is a thin wrapper; integration tests drive these functions
//! directly as well as through the binary.

pub mod config;
pub mod pipeline;
pub mod refiner_http;
pub mod stats;
pub mod validate;

use std::collections::BTreeMap;

use anyhow::{bail, Result};

use mrseg_core::convgen::Conversation;
use mrseg_core::eval::GroundTruth;

use crate::pipeline::LoadedBuild;

/// Index every ground-truth round of a loaded build, per source corpus.
pub fn ground_truth_of(build: &LoadedBuild) -> Result<GroundTruth> {
    let mut by_source: BTreeMap<&str, Vec<&Conversation>> = BTreeMap::new();
    for sc in &build.conversations {
        by_source
            .entry(sc.source.as_str())
            .or_default()
            .push(&sc.conversation);
    }
    let mut gt = GroundTruth::default();
    for (source, conversations) in by_source {
        let Some(corpus) = build.corpus_of(source) else {
            bail!("no corpus dump for source {source:?}");
        };
        gt.add_source(conversations, corpus)?;
    }
    Ok(gt)
}
