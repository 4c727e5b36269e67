//! Tree DSL.
//!
//! ```text
//! # comment
//! task: 3
//! grades: Else, Kind, Major, Urgent
//!
//! 1. Insulator present: Is at least one insulator string visible in the image?
//!    |- Not Exists -> grade result is "Else"
//!    |- Exists -> 2
//! ```
//!
//! A node header is `<id>. <title>: <question>`; each following `|-` line is a
//! branch whose target is either another node id or `grade "<label>"`
//! (`grade result is "<label>"` is accepted too). The first node is the root.
//! A leading `Work through checks ...` line, as produced by the prompt
//! renderer, is skipped. Documents starting with `{` are read as the
//! canonical JSON form.

use serde::{Deserialize, Serialize};

use super::{AnswerLabel, DecisionTree, Grade, Node, NodeId, SemanticError, Target};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Semantic(#[from] SemanticError),
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

/// Parses either the DSL or the canonical JSON form.
pub fn parse_tree(source: &str) -> Result<DecisionTree, ParseError> {
    if source.trim_start().starts_with('{') {
        parse_json(source)
    } else {
        parse_dsl(source)
    }
}

pub(super) const PREAMBLE_PREFIX: &str = "Work through checks";

struct PendingNode {
    node: Node,
    line: usize,
}

fn parse_dsl(source: &str) -> Result<DecisionTree, ParseError> {
    let mut task: Option<String> = None;
    let mut grades: Option<Vec<Grade>> = None;
    let mut nodes: Vec<PendingNode> = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let lineno = idx + 1;
        let indent = raw.len() - raw.trim_start().len();
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with(PREAMBLE_PREFIX) && task.is_none() && nodes.is_empty() {
            continue;
        }
        if let Some(rest) = strip_branch_marker(line) {
            let col = indent + (line.len() - rest.len()) + 1;
            let Some(current) = nodes.last_mut() else {
                return Err(syntax(lineno, indent + 1, "branch before any node header"));
            };
            let (label, target) = parse_branch(rest, lineno, col)?;
            current.node.branches.push((label, target));
            continue;
        }
        if let Some(value) = key_value(line, "task") {
            if task.is_some() {
                return Err(syntax(lineno, indent + 1, "duplicate `task` field"));
            }
            if value.is_empty() {
                return Err(syntax(lineno, indent + 1, "empty task id"));
            }
            task = Some(value.to_string());
            continue;
        }
        if let Some(value) = key_value(line, "grades") {
            if grades.is_some() {
                return Err(syntax(lineno, indent + 1, "duplicate `grades` field"));
            }
            let list: Vec<Grade> = value
                .split(',')
                .map(|g| g.trim().trim_matches('"'))
                .filter(|g| !g.is_empty())
                .map(Grade::new)
                .collect();
            if list.is_empty() {
                return Err(syntax(lineno, indent + 1, "empty grade list"));
            }
            grades = Some(list);
            continue;
        }
        let node = parse_header(line, lineno, indent + 1)?;
        nodes.push(PendingNode { node, line: lineno });
    }

    let task = task.ok_or_else(|| syntax(1, 1, "missing `task` field"))?;
    let grades = grades.ok_or_else(|| syntax(1, 1, "missing `grades` field"))?;
    if let Some(p) = nodes.iter().find(|p| p.node.branches.is_empty()) {
        return Err(syntax(p.line, 1, format!("node {} has no branches", p.node.id)));
    }
    Ok(DecisionTree::new(
        task,
        grades,
        nodes.into_iter().map(|p| p.node).collect(),
    )?)
}

fn strip_branch_marker(line: &str) -> Option<&str> {
    ["|-", "├", "⊢", "\\-"]
        .iter()
        .find_map(|m| line.strip_prefix(m))
        .map(str::trim_start)
}

fn key_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let (k, v) = line.split_once(':')?;
    k.trim().eq_ignore_ascii_case(key).then(|| v.trim())
}

fn parse_header(line: &str, lineno: usize, col: usize) -> Result<Node, ParseError> {
    let Some((id, rest)) = line.split_once(". ") else {
        return Err(syntax(
            lineno,
            col,
            "expected `<id>. <title>: <question>`, `task:`, `grades:` or a `|-` branch",
        ));
    };
    let id = id.trim();
    if !NodeId::is_valid(id) {
        return Err(syntax(lineno, col, format!("invalid node id {id:?}")));
    }
    let rest_col = col + line.len() - rest.len();
    let Some((title, question)) = rest.split_once(':') else {
        return Err(syntax(lineno, rest_col, "expected `<title>: <question>`"));
    };
    let title = title.trim();
    let question = question.trim();
    if title.is_empty() {
        return Err(syntax(lineno, rest_col, "empty node title"));
    }
    if question.is_empty() {
        return Err(syntax(lineno, rest_col + title.len() + 1, "empty question"));
    }
    Ok(Node {
        id: NodeId::new(id),
        title: title.to_string(),
        question: question.to_string(),
        branches: Vec::new(),
    })
}

fn parse_branch(rest: &str, lineno: usize, col: usize) -> Result<(AnswerLabel, Target), ParseError> {
    let arrow = rest
        .find("->")
        .map(|i| (i, 2))
        .or_else(|| rest.find('→').map(|i| (i, '→'.len_utf8())));
    let Some((at, width)) = arrow else {
        return Err(syntax(lineno, col, "expected `<answer> -> <target>`"));
    };
    let label_text = rest[..at].trim();
    let label = label_text
        .parse::<AnswerLabel>()
        .map_err(|e| syntax(lineno, col, e.to_string()))?;
    let target_text = rest[at + width..].trim();
    let target_col = col + at + width + (rest[at + width..].len() - rest[at + width..].trim_start().len());
    if target_text.is_empty() {
        return Err(syntax(lineno, target_col, "missing branch target"));
    }
    let grade_body = target_text
        .strip_prefix("grade result is")
        .or_else(|| target_text.strip_prefix("grade"));
    if let Some(body) = grade_body {
        let body = body.trim();
        let quoted = body
            .strip_prefix('"')
            .and_then(|b| b.strip_suffix('"'))
            .ok_or_else(|| syntax(lineno, target_col, "grade label must be double-quoted"))?;
        if quoted.is_empty() {
            return Err(syntax(lineno, target_col, "empty grade label"));
        }
        return Ok((label, Target::Grade(Grade::new(quoted))));
    }
    if !NodeId::is_valid(target_text) {
        return Err(syntax(lineno, target_col, format!("invalid target {target_text:?}")));
    }
    Ok((label, Target::Node(NodeId::new(target_text))))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTree {
    task: String,
    grades: Vec<Grade>,
    nodes: Vec<JsonNode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonNode {
    id: NodeId,
    title: String,
    question: String,
    branches: Vec<JsonBranch>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBranch {
    answer: AnswerLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    next: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grade: Option<Grade>,
}

fn parse_json(source: &str) -> Result<DecisionTree, ParseError> {
    let doc: JsonTree = serde_json::from_str(source).map_err(|e| syntax(e.line(), e.column(), e.to_string()))?;
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for n in doc.nodes {
        let mut branches = Vec::with_capacity(n.branches.len());
        for b in n.branches {
            let target = match (b.next, b.grade) {
                (Some(next), None) => Target::Node(next),
                (None, Some(grade)) => Target::Grade(grade),
                _ => {
                    return Err(syntax(
                        1,
                        1,
                        format!(
                            "node {} branch {}: exactly one of `next` or `grade` is required",
                            n.id, b.answer
                        ),
                    ))
                }
            };
            branches.push((b.answer, target));
        }
        nodes.push(Node {
            id: n.id,
            title: n.title,
            question: n.question,
            branches,
        });
    }
    Ok(DecisionTree::new(doc.task, doc.grades, nodes)?)
}

pub(super) fn to_json(tree: &DecisionTree) -> String {
    let doc = JsonTree {
        task: tree.task_id().to_string(),
        grades: tree.grades().to_vec(),
        nodes: tree
            .nodes()
            .map(|n| JsonNode {
                id: n.id.clone(),
                title: n.title.clone(),
                question: n.question.clone(),
                branches: n
                    .branches
                    .iter()
                    .map(|(l, t)| match t {
                        Target::Node(id) => JsonBranch {
                            answer: *l,
                            next: Some(id.clone()),
                            grade: None,
                        },
                        Target::Grade(g) => JsonBranch {
                            answer: *l,
                            next: None,
                            grade: Some(g.clone()),
                        },
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("tree serializes")
}
