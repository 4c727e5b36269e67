use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{PipelineError, PreparedImage, QAPair, QaStore, ReviewState};
use crate::cot::{CoTResult, CotStep, ParseStatus};
use crate::dtree::{validate_cot, AnswerLabel, DecisionTree, NodeId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub approved: usize,
    pub edited: usize,
    pub rejected: usize,
    pub skipped: usize,
    pub refused: usize,
}

const HELP: &str = "commands: a [note] approve | r [note] reject | e <step> <answer> edit answer | \
v <step> <text> set evidence | d <step> drop steps from <step> on | + <node> <answer> append step | \
u undo edits | s skip | q quit";

fn show<W: Write>(
    out: &mut W,
    pair: &QAPair,
    draft: &CoTResult,
    tree: &DecisionTree,
    images: Option<&PreparedImage>,
) -> std::io::Result<()> {
    writeln!(
        out,
        "== {}/{} (v{}, {}) ==",
        pair.task, pair.id, pair.version, pair.review_state
    )?;
    match images {
        Some(img) => {
            writeln!(out, "image:   {}", img.resized)?;
            writeln!(out, "overlay: {}", img.overlay)?;
        }
        None => writeln!(out, "image:   {}", pair.objective.path)?,
    }
    writeln!(out, "expert grade: {}", pair.truth)?;
    writeln!(out, "source model: {}", pair.source_model)?;
    if !pair.auto_flags.is_empty() {
        writeln!(out, "flags: {}", pair.auto_flags.join("; "))?;
    }
    if draft.steps.is_empty() {
        writeln!(out, "steps: (none)")?;
    }
    for (i, s) in draft.steps.iter().enumerate() {
        let title = tree.node(&s.node_id).map(|n| n.title.as_str()).unwrap_or("?");
        write!(out, "  {}. [{}] {} -> {}", i + 1, s.node_id, title, s.answer)?;
        match &s.evidence {
            Some(e) => writeln!(out, "  ({e})")?,
            None => writeln!(out)?,
        }
    }
    writeln!(out, "grade: {}", draft.grade)?;
    let report = validate_cot(tree, draft);
    if report.machine_verified() && draft.grade == pair.truth {
        writeln!(out, "check: ok")?;
    } else {
        let mut issues = report.issues.clone();
        if draft.grade != pair.truth {
            issues.push(format!(
                "grade {} differs from the expert grade {}",
                draft.grade, pair.truth
            ));
        }
        writeln!(out, "check: {}", issues.join("; "))?;
    }
    Ok(())
}

/// Re-derives the grade from the trace when the trace reaches a leaf.
fn rederive(tree: &DecisionTree, draft: &mut CoTResult) {
    draft.parse_status = ParseStatus::Ok;
    if let Ok(g) = tree.evaluate(&draft.answers()) {
        draft.grade = g;
    }
}

fn step_index(arg: Option<&str>, len: usize) -> Result<usize, String> {
    let n: usize = arg
        .ok_or("missing step number")?
        .parse()
        .map_err(|_| "step must be a number".to_string())?;
    if n == 0 || n > len {
        return Err(format!("step must be between 1 and {len}"));
    }
    Ok(n - 1)
}

fn rest(line: &str, skip: usize) -> Option<String> {
    let mut it = line.splitn(skip + 1, char::is_whitespace);
    for _ in 0..skip {
        it.next();
    }
    it.next().map(str::trim).filter(|s| !s.is_empty()).map(String::from)
}

enum Outcome {
    Next,
    Quit,
    /// The draft changed; show it again.
    Redraw,
}

/// Interactive review of a task's pending pairs.
///
/// Each pair is shown with its images, expert grade, flags, steps and the
/// machine check. Edits change step answers or evidence; the grade always
/// follows from the trace. Approval is refused unless the trace passes
/// the tree check and reaches the expert grade.
pub fn review_session<R: BufRead, W: Write>(
    store: &QaStore,
    tree: &DecisionTree,
    images: &BTreeMap<String, PreparedImage>,
    input: &mut R,
    out: &mut W,
) -> Result<ReviewStats, PipelineError> {
    let task = tree.task_id();
    let mut stats = ReviewStats::default();
    let io = |e: std::io::Error| PipelineError::Io {
        path: "<terminal>".into(),
        source: e,
    };
    let pending: Vec<QAPair> = store
        .list(task)?
        .into_iter()
        .filter(|p| p.review_state == ReviewState::Pending)
        .collect();
    writeln!(out, "{} pending pair(s) for task {task}. {HELP}", pending.len()).map_err(io)?;

    'pairs: for pair in pending {
        let mut draft = pair.answer.clone();
        let mut edited = false;
        show(out, &pair, &draft, tree, images.get(&pair.id)).map_err(io)?;
        loop {
            write!(out, "> ").map_err(io)?;
            out.flush().map_err(io)?;
            let mut line = String::new();
            if input.read_line(&mut line).map_err(io)? == 0 {
                break 'pairs;
            }
            let line = line.trim();
            let mut words = line.split_whitespace();
            let cmd = words.next().unwrap_or("");
            let result: Result<Outcome, String> = match cmd {
                "a" => {
                    let report = validate_cot(tree, &draft);
                    if report.machine_verified() && draft.grade == pair.truth {
                        let state = if edited {
                            ReviewState::Edited
                        } else {
                            ReviewState::Approved
                        };
                        let next = QAPair {
                            answer: draft.clone(),
                            review_state: state,
                            reviewer_note: rest(line, 1),
                            ..pair.clone()
                        };
                        store.update(next, if edited { "edit" } else { "approve" })?;
                        if edited {
                            stats.edited += 1;
                        } else {
                            stats.approved += 1;
                        }
                        writeln!(out, "{state}.").map_err(io)?;
                        Ok(Outcome::Next)
                    } else {
                        stats.refused += 1;
                        let mut issues = report.issues;
                        if draft.grade != pair.truth {
                            issues.push(format!(
                                "grade {} differs from the expert grade {}",
                                draft.grade, pair.truth
                            ));
                        }
                        Err(format!("refused: {}", issues.join("; ")))
                    }
                }
                "r" => {
                    let next = QAPair {
                        review_state: ReviewState::Rejected,
                        reviewer_note: rest(line, 1),
                        ..pair.clone()
                    };
                    store.update(next, "reject")?;
                    stats.rejected += 1;
                    writeln!(out, "rejected.").map_err(io)?;
                    Ok(Outcome::Next)
                }
                "s" => {
                    stats.skipped += 1;
                    Ok(Outcome::Next)
                }
                "q" => Ok(Outcome::Quit),
                "e" => step_index(words.next(), draft.steps.len()).and_then(|i| {
                    let label: AnswerLabel = words
                        .collect::<Vec<_>>()
                        .join(" ")
                        .parse()
                        .map_err(|e: crate::dtree::UnknownLabel| e.to_string())?;
                    draft.steps[i].answer = label;
                    edited = true;
                    rederive(tree, &mut draft);
                    Ok(Outcome::Redraw)
                }),
                "v" => step_index(words.next(), draft.steps.len()).map(|i| {
                    draft.steps[i].evidence = rest(line, 2);
                    edited = true;
                    rederive(tree, &mut draft);
                    Outcome::Redraw
                }),
                "d" => step_index(words.next(), draft.steps.len()).map(|i| {
                    draft.steps.truncate(i);
                    edited = true;
                    rederive(tree, &mut draft);
                    Outcome::Redraw
                }),
                "+" => match (words.next(), rest(line, 2)) {
                    (Some(node), Some(label)) => match label.parse::<AnswerLabel>() {
                        Ok(answer) => {
                            draft.steps.push(CotStep {
                                node_id: NodeId::new(node),
                                answer,
                                evidence: None,
                            });
                            edited = true;
                            rederive(tree, &mut draft);
                            Ok(Outcome::Redraw)
                        }
                        Err(e) => Err(e.to_string()),
                    },
                    _ => Err("usage: + <node> <answer>".into()),
                },
                "u" => {
                    draft = pair.answer.clone();
                    edited = false;
                    Ok(Outcome::Redraw)
                }
                _ => Err(HELP.to_string()),
            };
            match result {
                Ok(Outcome::Next) => continue 'pairs,
                Ok(Outcome::Quit) => break 'pairs,
                Ok(Outcome::Redraw) => show(out, &pair, &draft, tree, images.get(&pair.id)).map_err(io)?,
                Err(msg) => writeln!(out, "{msg}").map_err(io)?,
            }
        }
    }
    Ok(stats)
}

/// Approves every pending pair that passes the machine check. Returns the
/// number approved.
pub fn approve_all_verified(store: &QaStore, tree: &DecisionTree) -> Result<usize, PipelineError> {
    let mut n = 0;
    for pair in store.list(tree.task_id())? {
        if pair.review_state == ReviewState::Pending && pair.machine_verified(tree) {
            let next = QAPair {
                review_state: ReviewState::Approved,
                reviewer_note: Some("machine verified".into()),
                ..pair
            };
            store.update(next, "approve-verified")?;
            n += 1;
        }
    }
    Ok(n)
}
