use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io_err, pool, PipelineError, TaskContext};
use crate::cot::{CoTResult, ParseStatus};
use crate::dataprep::ImageRecord;
use crate::dtree::{validate_cot, DecisionTree, Grade};
use crate::fsutil::atomic_create_new;
use crate::gateway::{parse_cot, ChatClient, ModelEndpoint};
use crate::promptkit::{Placement, PromptBundle, PromptCase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    Pending,
    Approved,
    Edited,
    Rejected,
}

impl ReviewState {
    pub fn exportable(self) -> bool {
        matches!(self, ReviewState::Approved | ReviewState::Edited)
    }
}

impl std::fmt::Display for ReviewState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReviewState::Pending => "pending",
            ReviewState::Approved => "approved",
            ReviewState::Edited => "edited",
            ReviewState::Rejected => "rejected",
        })
    }
}

/// A grading prompt with a generated step-by-step answer, under review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    /// The objective record's id; unique within a task.
    pub id: String,
    pub task: String,
    /// Store version this state was written as; starts at 1.
    pub version: u32,
    pub objective: ImageRecord,
    /// Grading prompt (case 4, corresponding placement).
    pub prompt: PromptBundle,
    pub answer: CoTResult,
    /// Expert grade of the objective image.
    pub truth: Grade,
    pub source_model: String,
    /// Model output the answer was parsed from.
    pub raw_response: String,
    pub review_state: ReviewState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_note: Option<String>,
    /// Problems found by the machine check at generation time.
    #[serde(default)]
    pub auto_flags: Vec<String>,
}

impl QAPair {
    /// Passes the tree check and agrees with the expert grade.
    pub fn machine_verified(&self, tree: &DecisionTree) -> bool {
        validate_cot(tree, &self.answer).machine_verified() && self.answer.grade == self.truth
    }
}

/// Flags for a generated answer; empty when it passes every check.
pub fn auto_flags(tree: &DecisionTree, answer: &CoTResult, truth: &Grade) -> Vec<String> {
    let mut flags = Vec::new();
    if answer.parse_status != ParseStatus::Ok {
        flags.push("parse failure".to_string());
    }
    if answer.grade != *truth {
        flags.push("grade mismatch".to_string());
    }
    if answer.parse_status == ParseStatus::Ok {
        let report = validate_cot(tree, answer);
        if !report.machine_verified() {
            flags.push(format!("invalid trace: {}", report.issues.join("; ")));
        }
    }
    flags
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub task: String,
    pub pair: String,
    pub version: u32,
    pub action: String,
    pub state: ReviewState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// A stored pair, or why its file could not be read.
pub type LenientPair = Result<QAPair, String>;

/// Append-only pair store.
///
/// Every state of a pair is its own file `<task>/pairs/<id>.v<N>.json`,
/// created exclusively, so a write either lands as a new version or fails
/// because someone else wrote that version first. Readers take the
/// highest version. Decisions are appended to `audit.jsonl`.
#[derive(Debug)]
pub struct QaStore {
    dir: PathBuf,
    audit_lock: Mutex<()>,
}

impl QaStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(QaStore {
            dir,
            audit_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn pairs_dir(&self, task: &str) -> PathBuf {
        self.dir.join(task).join("pairs")
    }

    pub fn audit_path(&self) -> PathBuf {
        self.dir.join("audit.jsonl")
    }

    fn version_path(&self, task: &str, id: &str, version: u32) -> PathBuf {
        self.pairs_dir(task).join(format!("{id}.v{version}.json"))
    }

    /// (id, version) of every stored file of a task.
    fn versions(&self, task: &str) -> Result<BTreeMap<String, u32>, PipelineError> {
        let dir = self.pairs_dir(task);
        let mut out = BTreeMap::new();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(source) => return Err(PipelineError::Io { path: dir, source }),
        };
        for entry in entries {
            let name = entry.map_err(io_err(&dir))?.file_name().to_string_lossy().into_owned();
            let Some(stem) = name.strip_suffix(".json") else {
                continue;
            };
            let Some((id, v)) = stem.rsplit_once(".v") else {
                continue;
            };
            let Ok(v) = v.parse::<u32>() else { continue };
            if id.starts_with('.') {
                continue;
            }
            let slot = out.entry(id.to_string()).or_insert(0);
            *slot = (*slot).max(v);
        }
        Ok(out)
    }

    pub fn tasks(&self) -> Result<Vec<String>, PipelineError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let entry = entry.map_err(io_err(&self.dir))?;
            if entry.path().join("pairs").is_dir() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn get(&self, task: &str, id: &str) -> Result<Option<QAPair>, PipelineError> {
        match self.versions(task)?.get(id) {
            Some(&v) => super::read_json(&self.version_path(task, id, v)).map(Some),
            None => Ok(None),
        }
    }

    /// Latest state of every pair of a task, by id.
    pub fn list(&self, task: &str) -> Result<Vec<QAPair>, PipelineError> {
        self.versions(task)?
            .into_iter()
            .map(|(id, v)| super::read_json(&self.version_path(task, &id, v)))
            .collect()
    }

    /// Like [`QaStore::list`], but a pair file that cannot be read is
    /// returned as an error in its place.
    pub fn list_lenient(&self, task: &str) -> Result<Vec<(String, LenientPair)>, PipelineError> {
        Ok(self
            .versions(task)?
            .into_iter()
            .map(|(id, v)| {
                let pair = super::read_json::<QAPair>(&self.version_path(task, &id, v))
                    .map_err(|e| format!("unreadable: {e}"))
                    .and_then(|p| {
                        if p.id == id {
                            Ok(p)
                        } else {
                            Err(format!("file holds pair {}", p.id))
                        }
                    });
                (id, pair)
            })
            .collect())
    }

    /// Stores `pair` as version `pair.version`; fails if that version
    /// already exists.
    fn put(&self, pair: &QAPair) -> Result<(), PipelineError> {
        let path = self.version_path(&pair.task, &pair.id, pair.version);
        let mut bytes = serde_json::to_vec_pretty(pair).expect("pair serializes");
        bytes.push(b'\n');
        atomic_create_new(&path, &bytes).map_err(|e| {
            if e.kind() == io::ErrorKind::AlreadyExists {
                PipelineError::VersionConflict {
                    task: pair.task.clone(),
                    pair: pair.id.clone(),
                    version: pair.version,
                }
            } else {
                PipelineError::Io { path, source: e }
            }
        })
    }

    /// Writes a new pair as version 1.
    pub fn insert(&self, mut pair: QAPair, action: &str) -> Result<QAPair, PipelineError> {
        pair.version = 1;
        self.put(&pair)?;
        self.audit(&pair, action)?;
        Ok(pair)
    }

    /// Writes `next` as the successor of the version it was read at.
    pub fn update(&self, mut next: QAPair, action: &str) -> Result<QAPair, PipelineError> {
        next.version += 1;
        self.put(&next)?;
        self.audit(&next, action)?;
        Ok(next)
    }

    fn audit(&self, pair: &QAPair, action: &str) -> Result<(), PipelineError> {
        let _guard = self.audit_lock.lock();
        let path = self.audit_path();
        let seq = self.audit_log()?.len() as u64 + 1;
        let entry = AuditEntry {
            seq,
            task: pair.task.clone(),
            pair: pair.id.clone(),
            version: pair.version,
            action: action.to_string(),
            state: pair.review_state,
            note: pair.reviewer_note.clone(),
        };
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.write_all(line.as_bytes()).map_err(io_err(&path))
    }

    pub fn audit_log(&self) -> Result<Vec<AuditEntry>, PipelineError> {
        let path = self.audit_path();
        let f = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => return Err(PipelineError::Io { path, source }),
        };
        BufReader::new(f)
            .lines()
            .map(|line| {
                let line = line.map_err(io_err(&path))?;
                serde_json::from_str(&line).map_err(|e| PipelineError::Json {
                    path: path.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub jobs: usize,
    /// Replace existing pairs with freshly generated pending versions.
    pub regenerate: bool,
    /// Restrict to these record ids.
    pub only: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub created: usize,
    pub regenerated: usize,
    pub skipped: usize,
    pub flagged: BTreeMap<String, Vec<String>>,
    pub failures: BTreeMap<String, String>,
}

/// Asks `endpoint` for a step-by-step answer to each training record,
/// given its expert grade, and stores every result as a pending pair.
///
/// Pairs that already exist are left alone unless `regenerate` is set.
/// A request error is recorded against its record and the batch goes on,
/// except for errors that would repeat for every record (missing or
/// rejected credentials, exhausted retries), which stop it.
pub fn generate_qas(
    client: &dyn ChatClient,
    endpoint: &ModelEndpoint,
    ctx: &TaskContext,
    train: &[ImageRecord],
    store: &QaStore,
    opts: &GenerateOptions,
) -> Result<GenerateReport, PipelineError> {
    let task = ctx.task_id();
    let existing = store.versions(task)?;
    let mut report = GenerateReport::default();
    let todo: Vec<&ImageRecord> = train
        .iter()
        .filter(|r| opts.only.as_ref().is_none_or(|ids| ids.contains(&r.id)))
        .filter(|r| {
            let keep = opts.regenerate || !existing.contains_key(&r.id);
            if !keep {
                report.skipped += 1;
            }
            keep
        })
        .collect();

    let results: Vec<(String, Result<QAPair, PipelineError>)> = pool(opts.jobs).install(|| {
        todo.par_iter()
            .map(|r| {
                let res = (|| {
                    let qa = ctx.qa_prompt(r, PromptCase::FULL, Placement::Corresponding)?;
                    let dg = ctx.dg_prompt(r, PromptCase::FULL, Placement::Corresponding)?;
                    let resp = client.complete(endpoint, &qa)?;
                    let answer = parse_cot(&resp.raw_text, &ctx.tree);
                    Ok(QAPair {
                        id: r.id.clone(),
                        task: task.to_string(),
                        version: 0,
                        objective: (*r).clone(),
                        prompt: dg,
                        auto_flags: auto_flags(&ctx.tree, &answer, &r.grade),
                        answer,
                        truth: r.grade.clone(),
                        source_model: endpoint.id.clone(),
                        raw_response: resp.raw_text,
                        review_state: ReviewState::Pending,
                        reviewer_note: None,
                    })
                })();
                (r.id.clone(), res)
            })
            .collect()
    });

    let mut fatal = None;
    for (id, res) in results {
        match res {
            Ok(pair) => {
                if !pair.auto_flags.is_empty() {
                    report.flagged.insert(id.clone(), pair.auto_flags.clone());
                }
                match existing.get(&id) {
                    Some(&v) => {
                        store.update(QAPair { version: v, ..pair }, "regenerate")?;
                        report.regenerated += 1;
                    }
                    None => {
                        store.insert(pair, "generate")?;
                        report.created += 1;
                    }
                }
            }
            Err(PipelineError::Gateway(e)) if e.is_fatal() => {
                report.failures.insert(id, e.to_string());
                fatal.get_or_insert(e);
            }
            Err(e) => {
                report.failures.insert(id, e.to_string());
            }
        }
    }
    match fatal {
        Some(e) => Err(PipelineError::Interrupted {
            done: report.created + report.regenerated,
            total: todo.len(),
            source: e,
        }),
        None => Ok(report),
    }
}
