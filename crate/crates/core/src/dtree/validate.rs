use serde::{Deserialize, Serialize};

use super::{DecisionTree, Grade, Node, Target};
use crate::cot::{CoTResult, ParseStatus};

/// Outcome of checking a recorded CoT against a tree. Inconsistencies are
/// reported here rather than raised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Each recorded step is the check reached by the previous answers and
    /// carries one of that check's answer labels.
    pub path_consistent: bool,
    /// The grade reached by the trace equals the claimed grade.
    pub grade_consistent: bool,
    /// The trace ends exactly at a leaf: no missing and no surplus steps.
    pub complete: bool,
    pub derived_grade: Option<Grade>,
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn machine_verified(&self) -> bool {
        self.path_consistent && self.grade_consistent && self.complete
    }
}

pub fn validate_cot(tree: &DecisionTree, cot: &CoTResult) -> ValidationReport {
    let mut issues = Vec::new();
    let mut path_consistent = true;
    let mut complete = true;
    let mut derived = None;

    if cot.parse_status == ParseStatus::Failed {
        issues.push("model output could not be parsed".to_string());
    }

    let mut current: Option<&Node> = Some(tree.root());
    let mut steps = cot.steps.iter().enumerate();
    for (i, step) in steps.by_ref() {
        let Some(node) = current else {
            complete = false;
            issues.push(format!(
                "{} surplus step(s) after the grade was reached, starting at step {}",
                cot.steps.len() - i,
                step.node_id
            ));
            break;
        };
        if step.node_id != node.id {
            path_consistent = false;
            issues.push(format!(
                "step {} records node {} but the trace is at node {}",
                i + 1,
                step.node_id,
                node.id
            ));
            break;
        }
        match node.branch(step.answer) {
            None => {
                path_consistent = false;
                let allowed: Vec<String> = node.labels().map(|l| l.to_string()).collect();
                issues.push(format!(
                    "node {} has no branch for answer {} (expected one of {})",
                    node.id,
                    step.answer,
                    allowed.join(", ")
                ));
                break;
            }
            Some(Target::Node(next)) => current = tree.node(next),
            Some(Target::Grade(g)) => {
                derived = Some(g.clone());
                current = None;
            }
        }
    }
    if path_consistent {
        if let Some(node) = current {
            complete = false;
            issues.push(format!("trace stops before node {} ({})", node.id, node.title));
        }
    }

    let grade_consistent = match &derived {
        Some(g) if *g == cot.grade => true,
        Some(g) => {
            issues.push(format!("claimed grade {} but the trace leads to {}", cot.grade, g));
            false
        }
        None => {
            if path_consistent && !complete {
                issues.push(format!(
                    "claimed grade {} cannot be confirmed from an incomplete trace",
                    cot.grade
                ));
            }
            false
        }
    };
    if !tree.has_grade(&cot.grade) {
        issues.push(format!("grade {:?} is not in the task's grade set", cot.grade.as_str()));
    }

    ValidationReport {
        path_consistent,
        grade_consistent,
        complete,
        derived_grade: derived,
        issues,
    }
}
