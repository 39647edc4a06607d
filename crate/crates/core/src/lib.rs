//! Concept-level explanations for image classifiers.
//!
//! The engine discovers candidate concepts with a guide heat map and a
//! promptable segmenter, scores them with exact Shapley values against the
//! classifier, and measures how faithful any ranked explanation is with
//! size-weighted insertion and deletion curves. Classifiers, segmenters and
//! guides are reached through the [`oracle::Oracle`] trait, either in
//! process or over a newline-delimited JSON protocol.

pub mod concepts;
pub mod error;
pub mod faithfulness;
pub mod harness;
pub mod mask;
pub mod oracle;
pub mod rle;
pub mod shapley;

pub use concepts::{discover_concepts, ConceptMask, ConceptSet, DiscoveryConfig};
pub use error::{EndpointError, Error, Result};
pub use faithfulness::{evaluate, ExplanationSequence, FaithfulnessReport};
pub use mask::{BinaryMask, BoundingBox, DatasetStats, Image};
pub use oracle::{Capability, Oracle};
pub use shapley::{exact_shapley, select_explanation, Explanation, ShapleyResult};
