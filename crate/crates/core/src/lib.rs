//! Decision-tree chain-of-thought defect grading.
//!
//! The crate is organised along the grading pipeline:
//!
//! - [`dtree`]: grading logic as a decision tree, its DSL and CoT validation.
//! - [`dataprep`]: image resizing, detector box overlays and few-shot splits.
//! - [`promptkit`]: grading / Q&A-generation prompt composition.
//! - [`gateway`]: chat-completion clients, record/replay fixtures, CoT parsing.
//! - [`evalharness`]: accuracy, macro-F1 and tabular reports.
//! - [`pipeline`]: evaluation runs, model selection, Q&A store, review and export.
//! - [`config`]: the project configuration file.
//! - [`synth`]: a deterministic synthetic project (images, manifests, fixtures).

pub mod config;
pub mod cot;
pub mod dataprep;
pub mod dtree;
pub mod evalharness;
pub mod gateway;
pub mod pipeline;
pub mod promptkit;
pub mod synth;

mod fsutil;

pub use cot::{CoTResult, CotStep, ParseStatus};
pub use dtree::{AnswerLabel, DecisionTree, Grade, NodeId};
