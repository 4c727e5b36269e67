//! Structured step-by-step grading answers.

use serde::{Deserialize, Serialize};

use crate::dtree::{AnswerLabel, Grade, NodeId, PathOutcome};

/// One answered check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotStep {
    #[serde(rename = "node", alias = "node_id", alias = "step", alias = "id")]
    pub node_id: NodeId,
    pub answer: AnswerLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    /// Strict JSON parse of the model output.
    Ok,
    /// Grade recovered by scanning free text; steps are empty.
    Repaired,
    /// Nothing usable; the grade is the sentinel.
    Failed,
}

/// A step-by-step grading answer: the JSON object models are asked to emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTResult {
    pub steps: Vec<CotStep>,
    pub grade: Grade,
    pub parse_status: ParseStatus,
}

/// Model-facing shape, without the parse bookkeeping.
#[derive(Serialize)]
struct AnswerJson<'a> {
    steps: &'a [CotStep],
    grade: &'a Grade,
}

impl CoTResult {
    pub fn failed() -> Self {
        CoTResult {
            steps: Vec::new(),
            grade: Grade::sentinel(),
            parse_status: ParseStatus::Failed,
        }
    }

    /// A CoT whose steps follow an enumerated tree path.
    pub fn from_path(path: &PathOutcome) -> Self {
        CoTResult {
            steps: path
                .nodes
                .iter()
                .zip(&path.answers)
                .map(|(node, answer)| CotStep {
                    node_id: node.clone(),
                    answer: *answer,
                    evidence: None,
                })
                .collect(),
            grade: path.grade.clone(),
            parse_status: ParseStatus::Ok,
        }
    }

    pub fn answers(&self) -> Vec<AnswerLabel> {
        self.steps.iter().map(|s| s.answer).collect()
    }

    /// Compact JSON in the format models are asked to produce.
    pub fn to_answer_json(&self) -> String {
        serde_json::to_string(&AnswerJson {
            steps: &self.steps,
            grade: &self.grade,
        })
        .expect("CoT serializes")
    }

    /// Indented variant of [`CoTResult::to_answer_json`] for prompts.
    pub fn to_answer_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&AnswerJson {
            steps: &self.steps,
            grade: &self.grade,
        })
        .expect("CoT serializes")
    }
}
