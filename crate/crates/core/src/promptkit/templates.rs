use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PromptComponents, ReferenceExample};
use crate::dataprep::ImageRecord;
use crate::dtree::{DecisionTree, Grade};

#[derive(Debug, thiserror::Error)]
#[error("template {path}: {source}")]
pub struct TemplateError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

/// Authored text for the role, task, format and question components.
///
/// Templates may use `{task_id}`, `{task_name}` and `{grades}`
/// (comma-separated grade labels). A template directory holds any of
/// `role.txt`, `task.txt`, `format.txt`, `q1.txt`, `q2.txt`; missing files
/// fall back to the built-in text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub task_id: String,
    pub task_name: String,
    pub role: String,
    pub task: String,
    pub format: String,
    pub q1: String,
    pub q2: String,
}

const ROLE: &str = "You are an inspection engineer grading defects of power transmission \
equipment in UAV inspection photographs. You reason through an expert decision tree one check \
at a time and report your reasoning and the final grade as JSON.";

const FORMAT: &str = r#"Reply with a single JSON object and nothing else, in this shape:
{"steps": [{"node": "<check id>", "answer": "<branch label>", "evidence": "<what in the image supports the answer>"}], "grade": "<one of: {grades}>"}
List the checks in the order you execute them and stop at the check whose branch gives the grade."#;

const Q1: &str = "Using the task description, the decision tree and the reference examples \
above, grade the defect in the objective image.";

const Q2: &str = "The expert grade of the objective image is given above. Walk the decision \
tree for the objective image, answer each check on the path that leads to that grade, and reply \
in the JSON format used by the reference examples.";

fn task_text(task_id: &str) -> (&'static str, &'static str) {
    match task_id {
        "1" => (
            "tension clamp crimping",
            "Task {task_id} ({task_name}): the marked box in the objective image contains a \
             tension clamp. Judge whether its crimped connection is sound from the shape of the \
             crimped barrel. Possible grades: {grades}.",
        ),
        "2" => (
            "guying fitting corrosion",
            "Task {task_id} ({task_name}): the marked box in the objective image contains a \
             guying fitting. Judge its corrosion degree from surface colour and the extent of \
             the affected area. Possible grades: {grades}.",
        ),
        "3" => (
            "bird's nest on tangent tower",
            "Task {task_id} ({task_name}): the objective image shows a tangent tower with a \
             bird's nest. Judge the risk the nest poses to the insulators from where it sits \
             and its condition. Possible grades: {grades}.",
        ),
        _ => (
            "defect grading",
            "Task {task_id} ({task_name}): grade the defect visible in the marked region of the \
             objective image. Possible grades: {grades}.",
        ),
    }
}

impl PromptTemplates {
    pub fn builtin(task_id: &str) -> Self {
        let (name, task) = task_text(task_id);
        PromptTemplates {
            task_id: task_id.to_string(),
            task_name: name.to_string(),
            role: ROLE.to_string(),
            task: task.to_string(),
            format: FORMAT.to_string(),
            q1: Q1.to_string(),
            q2: Q2.to_string(),
        }
    }

    /// Built-in text overridden by whichever files exist in `dir`.
    pub fn load(dir: &Path, task_id: &str) -> Result<Self, TemplateError> {
        let mut t = Self::builtin(task_id);
        for (file, slot) in [
            ("role.txt", &mut t.role),
            ("task.txt", &mut t.task),
            ("format.txt", &mut t.format),
            ("q1.txt", &mut t.q1),
            ("q2.txt", &mut t.q2),
        ] {
            let path = dir.join(file);
            match fs::read_to_string(&path) {
                Ok(text) => *slot = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => return Err(TemplateError { path, source }),
            }
        }
        Ok(t)
    }

    /// Writes every template file to `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TemplateError> {
        fs::create_dir_all(dir).map_err(|source| TemplateError {
            path: dir.to_path_buf(),
            source,
        })?;
        for (file, text) in [
            ("role.txt", &self.role),
            ("task.txt", &self.task),
            ("format.txt", &self.format),
            ("q1.txt", &self.q1),
            ("q2.txt", &self.q2),
        ] {
            let path = dir.join(file);
            fs::write(&path, text).map_err(|source| TemplateError { path, source })?;
        }
        Ok(())
    }

    fn fill(&self, text: &str, grades: &[Grade]) -> String {
        let list = grades.iter().map(Grade::as_str).collect::<Vec<_>>().join(", ");
        text.replace("{task_id}", &self.task_id)
            .replace("{task_name}", &self.task_name)
            .replace("{grades}", &list)
    }

    /// Fills the templates for `tree`'s task and bundles them with the
    /// references and objective image.
    pub fn components(
        &self,
        tree: &DecisionTree,
        references: Vec<ReferenceExample>,
        objective: ImageRecord,
        grade_result: Option<Grade>,
    ) -> PromptComponents {
        let grades = tree.grades();
        PromptComponents {
            role: self.fill(&self.role, grades),
            task: self.fill(&self.task, grades),
            decision_tree: tree.render_prompt_text(),
            format: self.fill(&self.format, grades),
            grades: grades.to_vec(),
            references,
            objective,
            grade_result,
            q1: self.fill(&self.q1, grades),
            q2: self.fill(&self.q2, grades),
            drop_tree_without_cot: false,
        }
    }
}
