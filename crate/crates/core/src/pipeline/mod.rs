//! Grading evaluation, SOTA selection, Q&A generation, review and export.

mod eval;
mod export;
mod prep;
mod qa;
mod review;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataprep::{DataprepError, ImageRecord};
use crate::dtree::{DecisionTree, Grade};
use crate::evalharness::MetricsError;
use crate::fsutil::atomic_write;
use crate::gateway::GatewayError;
use crate::promptkit::{
    build_dg_prompt, build_qa_prompt, Placement, PromptBundle, PromptCase, PromptError, PromptTemplates,
    ReferenceExample,
};

pub use eval::{run_grading_eval, run_path, select_sota, Candidate, EvalRecord, EvalRun, RunOptions, SotaSelection};
pub use export::{export_sft, ExportOptions, ExportReport, Message, Refusal, SftRecord, TaskCounts, UserPart};
pub use prep::{prepare_task, prepared_path, PrepInput, PreparedImage, PreparedTask};
pub use qa::{generate_qas, AuditEntry, GenerateOptions, GenerateReport, QAPair, QaStore, ReviewState};
pub use review::{approve_all_verified, review_session, ReviewStats};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error(transparent)]
    Dataprep(#[from] DataprepError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("task {0}: the test set is empty")]
    EmptyTestSet(String),
    #[error("run stopped after {done} of {total} records")]
    Interrupted {
        done: usize,
        total: usize,
        #[source]
        source: GatewayError,
    },
    #[error("no runs to select from")]
    NoRuns,
    #[error("runs are not comparable: {0}")]
    MixedRuns(String),
    #[error("run for {model} on task {task} is incomplete")]
    IncompleteRun { model: String, task: String },
    #[error("reference {record}: {message}")]
    ReferenceTrace { record: String, message: String },
    #[error("pair {task}/{pair} was changed concurrently (version {version} exists)")]
    VersionConflict { task: String, pair: String, version: u32 },
    #[error("no pair {task}/{pair}")]
    UnknownPair { task: String, pair: String },
    #[error("task {0} has no approved or edited pairs to export")]
    NoApprovedPairs(String),
    #[error("no tree for task {0}")]
    UnknownTask(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Everything needed to build a task's prompts.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub tree: DecisionTree,
    pub templates: PromptTemplates,
    pub references: Vec<ReferenceExample>,
    pub drop_tree_without_cot: bool,
}

impl TaskContext {
    pub fn new(tree: DecisionTree, templates: PromptTemplates, references: Vec<ReferenceExample>) -> Self {
        TaskContext {
            tree,
            templates,
            references,
            drop_tree_without_cot: false,
        }
    }

    /// Context for a prepared task: its references carry the CoTs derived
    /// from their manifest traces.
    pub fn from_prepared(tree: DecisionTree, templates: PromptTemplates, prepared: &PreparedTask) -> Self {
        let references = prepared
            .split
            .references
            .iter()
            .map(|r| ReferenceExample {
                record: r.clone(),
                cot: prepared.reference_cots.get(&r.id).cloned(),
            })
            .collect();
        TaskContext::new(tree, templates, references)
    }

    pub fn task_id(&self) -> &str {
        self.tree.task_id()
    }

    pub fn grades(&self) -> &[Grade] {
        self.tree.grades()
    }

    fn components(&self, objective: &ImageRecord, grade: Option<Grade>) -> crate::promptkit::PromptComponents {
        let mut c = self
            .templates
            .components(&self.tree, self.references.clone(), objective.clone(), grade);
        c.drop_tree_without_cot = self.drop_tree_without_cot;
        c
    }

    /// Grading prompt for `objective`.
    pub fn dg_prompt(
        &self,
        objective: &ImageRecord,
        case: PromptCase,
        placement: Placement,
    ) -> Result<PromptBundle, PromptError> {
        build_dg_prompt(&self.components(objective, None), case, placement)
    }

    /// Q&A-generation prompt for `objective`, carrying its expert grade.
    pub fn qa_prompt(
        &self,
        objective: &ImageRecord,
        case: PromptCase,
        placement: Placement,
    ) -> Result<PromptBundle, PromptError> {
        build_qa_prompt(
            &self.components(objective, Some(objective.grade.clone())),
            case,
            placement,
        )
    }
}

/// Bounded worker pool for per-record fan-out.
pub(crate) fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}
