use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, write_json, PipelineError, QAPair, QaStore};
use crate::dtree::{validate_cot, DecisionTree, Grade};
use crate::fsutil::{atomic_write, sha256_hex};
use crate::promptkit::Segment;

/// One task to export: its tree and the expert grade of every record.
pub struct ExportOptions<'a> {
    pub tasks: Vec<(&'a DecisionTree, BTreeMap<String, Grade>)>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UserPart {
    Text { text: String },
    Image { image: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Message {
    System { content: String },
    User { content: Vec<UserPart> },
    Assistant { content: String },
}

/// One conversation line of the SFT dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub task: String,
    pub messages: Vec<Message>,
}

impl SftRecord {
    fn from_pair(pair: &QAPair) -> Self {
        let user = pair
            .prompt
            .messages
            .iter()
            .map(|s| match s {
                Segment::Text { text, .. } => UserPart::Text { text: text.clone() },
                Segment::ImageSlot { image, .. } => UserPart::Image {
                    image: image.path.clone(),
                },
            })
            .collect();
        SftRecord {
            id: format!("{}/{}", pair.task, pair.id),
            task: pair.task.clone(),
            messages: vec![
                Message::System {
                    content: pair.prompt.system.clone(),
                },
                Message::User { content: user },
                Message::Assistant {
                    content: pair.answer.to_answer_json(),
                },
            ],
        }
    }
}

/// An approved or edited pair the export check turned away.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refusal {
    pub task: String,
    pub pair: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub records: usize,
    pub grades: BTreeMap<String, usize>,
    /// Pairs left out because of their review state.
    pub not_approved: BTreeMap<String, usize>,
}

/// Written next to the dataset as `<name>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub dataset: String,
    pub sha256: String,
    pub seed: u64,
    pub records: usize,
    pub tasks: BTreeMap<String, TaskCounts>,
    pub refused: Vec<Refusal>,
}

fn check(pair: &QAPair, task: &str, tree: &DecisionTree, truth: &BTreeMap<String, Grade>) -> Result<(), String> {
    if pair.task != task {
        return Err(format!("stored under task {task} but labelled task {}", pair.task));
    }
    let expected = truth.get(&pair.id).ok_or("record is not part of the task's dataset")?;
    let report = validate_cot(tree, &pair.answer);
    if !report.machine_verified() {
        return Err(format!("trace fails the tree check: {}", report.issues.join("; ")));
    }
    if pair.answer.grade != *expected {
        return Err(format!(
            "grade {} differs from the expert grade {expected}",
            pair.answer.grade
        ));
    }
    match pair.prompt.objective() {
        Some(img) if img.record_id == pair.id => {}
        _ => return Err("prompt does not show the pair's objective image".into()),
    }
    if pair
        .prompt
        .texts()
        .any(|(c, _)| c == crate::promptkit::Component::GradeResult)
    {
        return Err("prompt carries the expert grade".into());
    }
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

/// Writes approved and edited pairs as JSON-lines conversations.
///
/// Every candidate is re-checked regardless of its review state: the trace
/// must pass the tree check, reach the expert grade recorded for the task
/// and belong to a prompt showing that record. Failures are listed in the
/// report and left out. A single task is written in id order; several
/// tasks are shuffled together with `seed`.
pub fn export_sft(store: &QaStore, opts: &ExportOptions<'_>, out: &Path) -> Result<ExportReport, PipelineError> {
    let mut records = Vec::new();
    let mut tasks = BTreeMap::new();
    let mut refused = Vec::new();
    for (tree, truth) in &opts.tasks {
        let task = tree.task_id();
        let mut counts = TaskCounts::default();
        for (id, pair) in store.list_lenient(task)? {
            let pair = match pair {
                Ok(p) => p,
                Err(reason) => {
                    refused.push(Refusal {
                        task: task.to_string(),
                        pair: id,
                        reason,
                    });
                    continue;
                }
            };
            if !pair.review_state.exportable() {
                *counts.not_approved.entry(pair.review_state.to_string()).or_default() += 1;
                continue;
            }
            if let Err(reason) = check(&pair, task, tree, truth) {
                refused.push(Refusal {
                    task: task.to_string(),
                    pair: id,
                    reason,
                });
                continue;
            }
            counts.records += 1;
            *counts.grades.entry(pair.answer.grade.to_string()).or_default() += 1;
            records.push(SftRecord::from_pair(&pair));
        }
        if counts.records == 0 {
            return Err(PipelineError::NoApprovedPairs(task.to_string()));
        }
        tasks.insert(task.to_string(), counts);
    }
    if opts.tasks.len() > 1 {
        records.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    }

    let mut bytes = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut bytes, r).expect("record serializes");
        bytes.push(b'\n');
    }
    atomic_write(out, &bytes).map_err(io_err(out))?;
    let report = ExportReport {
        dataset: out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_hex(&bytes),
        seed: opts.seed,
        records: records.len(),
        tasks,
        refused,
    };
    write_json(&manifest_path(out), &report)?;
    Ok(report)
}
