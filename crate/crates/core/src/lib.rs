//! Core library for building and scoring multi-round referring-segmentation
//! datasets.
//!
//! The pipeline turns standard annotation corpora (COCO-style instances,
//! referring expressions, part taxonomies, relationship triples) into
//! multi-round conversations in which later queries reference masks produced
//! in earlier rounds, and scores per-round mask predictions with mIoU/cIoU.
//!
//! Modules:
//! - [`annotations`]: source-corpus parsing into a unified in-memory model
//! - [`maskops`]: RLE codec, rasterization, IoU, mask preprocessing, loss oracles
//! - [`relations`]: spatial relation classification between boxes
//! - [`convgen`]: seeded multi-round conversation generation
//! - [`templates`]: query template pools and the two-pass text refinement protocol
//! - [`protocol`]: token-stream layouts, decoder query specs, baseline flattening
//! - [`eval`]: per-round mIoU/cIoU scoring and report emission

pub mod annotations;
pub mod convgen;
pub mod eval;
pub mod maskops;
pub mod protocol;
pub mod relations;
pub mod seeding;
pub mod templates;
pub mod tokens;

pub use annotations::{Corpus, ImageRecord, InstanceRecord, MaskSpec, PartLink, RelationshipTriple};
pub use convgen::{Conversation, Family, GenConfig, ReferenceMode, Round};
pub use eval::{EvalReport, PredictionRecord};
pub use maskops::{BBox, EmbeddingSpec, LossConfig, MaskGrid, PixelImage, ProbGrid};
pub use relations::RelationLabel;
pub use templates::{Split, TemplateSet};
