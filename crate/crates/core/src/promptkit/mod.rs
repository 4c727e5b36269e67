//! Grading and Q&A-generation prompt composition.
//!
//! A grading prompt is the concatenation
//! `role + task + decision tree + format + references + objective image + Q1`;
//! the Q&A-generation prompt appends the expert grade before the question and
//! asks Q2 instead. Four cases toggle whether reference annotations carry the
//! full decision-tree CoT and whether reference images are attached, and
//! three placement modes decide where image slots sit relative to the text.

mod templates;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cot::CoTResult;
use crate::dataprep::ImageRecord;
use crate::dtree::Grade;

pub use templates::{PromptTemplates, TemplateError};

/// Cost charged per image slot by [`PromptBundle::token_estimate`].
pub const IMAGE_TOKEN_ESTIMATE: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("invalid prompt case {0}; expected 1-4")]
    InvalidCase(u8),
    #[error("missing prompt component: {0}")]
    MissingComponent(&'static str),
    #[error("reference set does not cover grade(s): {}", join(.0))]
    ReferencesIncomplete(Vec<Grade>),
    #[error("more than one reference for grade {0}")]
    DuplicateReference(Grade),
    #[error("reference for grade {0} is not in the grade set")]
    UnknownReferenceGrade(Grade),
    #[error("reference for grade {0} has no CoT annotation but the case requires one")]
    MissingCot(Grade),
    #[error("grading prompts must not carry the expert grade")]
    UnexpectedGradeResult,
    #[error("Q&A generation needs the expert grade of the objective image")]
    MissingGradeResult,
}

fn join(grades: &[Grade]) -> String {
    grades.iter().map(Grade::as_str).collect::<Vec<_>>().join(", ")
}

/// Prompt setting: case 1 = grade-only references without images, 2 = CoT
/// references without images, 3 = grade-only references with images,
/// 4 = CoT references with images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PromptCase(u8);

impl PromptCase {
    pub const ALL: [PromptCase; 4] = [PromptCase(1), PromptCase(2), PromptCase(3), PromptCase(4)];
    pub const FULL: PromptCase = PromptCase(4);

    pub fn new(id: u8) -> Result<Self, PromptError> {
        (1..=4)
            .contains(&id)
            .then_some(PromptCase(id))
            .ok_or(PromptError::InvalidCase(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn include_cot(self) -> bool {
        self.0 == 2 || self.0 == 4
    }

    pub fn include_reference_images(self) -> bool {
        self.0 >= 3
    }
}

impl TryFrom<u8> for PromptCase {
    type Error = PromptError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        PromptCase::new(v)
    }
}

impl From<PromptCase> for u8 {
    fn from(c: PromptCase) -> u8 {
        c.0
    }
}

impl fmt::Display for PromptCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// All image slots before the first text segment.
    Front,
    /// Each image right after its caption.
    #[default]
    Corresponding,
    /// All image slots after the last text segment.
    End,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Front, Placement::Corresponding, Placement::End];

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Front => "front",
            Placement::Corresponding => "corresponding",
            Placement::End => "end",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "front" => Ok(Placement::Front),
            "corresponding" => Ok(Placement::Corresponding),
            "end" => Ok(Placement::End),
            other => Err(format!(
                "unknown placement {other:?}; expected front, corresponding or end"
            )),
        }
    }
}

/// Which prompt component a segment realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Task,
    DecisionTree,
    Format,
    ReferenceCaption,
    ReferenceImage,
    ReferenceAnnotation,
    ObjectiveCaption,
    /// Called the target image in some notations.
    ObjectiveImage,
    GradeResult,
    Question,
}

/// An image slot: the record it shows and its project-relative path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub record_id: String,
    pub path: String,
}

impl From<&ImageRecord> for ImageRef {
    fn from(r: &ImageRecord) -> Self {
        ImageRef {
            record_id: r.id.clone(),
            path: r.path.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Text { component: Component, text: String },
    ImageSlot { component: Component, image: ImageRef },
}

impl Segment {
    fn text(component: Component, text: impl Into<String>) -> Self {
        Segment::Text {
            component,
            text: text.into(),
        }
    }

    pub fn component(&self) -> Component {
        match self {
            Segment::Text { component, .. } | Segment::ImageSlot { component, .. } => *component,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Segment::ImageSlot { .. })
    }
}

/// An ordered, role-tagged prompt ready to be sent to a chat model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub messages: Vec<Segment>,
    pub case: PromptCase,
    pub placement: Placement,
}

impl PromptBundle {
    pub fn image_slots(&self) -> impl Iterator<Item = &ImageRef> {
        self.messages.iter().filter_map(|s| match s {
            Segment::ImageSlot { image, .. } => Some(image),
            Segment::Text { .. } => None,
        })
    }

    pub fn image_count(&self) -> usize {
        self.image_slots().count()
    }

    /// Text segments in order.
    pub fn texts(&self) -> impl Iterator<Item = (Component, &str)> {
        self.messages.iter().filter_map(|s| match s {
            Segment::Text { component, text } => Some((*component, text.as_str())),
            Segment::ImageSlot { .. } => None,
        })
    }

    pub fn objective(&self) -> Option<&ImageRef> {
        self.messages.iter().find_map(|s| match s {
            Segment::ImageSlot {
                component: Component::ObjectiveImage,
                image,
            } => Some(image),
            _ => None,
        })
    }

    /// Whitespace-delimited words plus a flat per-image cost. Not tied to
    /// any tokenizer; only used for relative comparisons.
    pub fn token_estimate(&self) -> usize {
        let words = |s: &str| s.split_whitespace().count();
        words(&self.system)
            + self
                .messages
                .iter()
                .map(|s| match s {
                    Segment::Text { text, .. } => words(text),
                    Segment::ImageSlot { .. } => IMAGE_TOKEN_ESTIMATE,
                })
                .sum::<usize>()
    }

    /// Chat-completion `messages` array. Images appear as `image_url` parts
    /// whose URL is the project-relative path; transports substitute inline
    /// data before sending.
    pub fn to_chat_messages(&self) -> Value {
        let parts: Vec<Value> = self
            .messages
            .iter()
            .map(|s| match s {
                Segment::Text { text, .. } => json!({"type": "text", "text": text}),
                Segment::ImageSlot { image, .. } => {
                    json!({"type": "image_url", "image_url": {"url": image.path}})
                }
            })
            .collect();
        json!([
            {"role": "system", "content": self.system},
            {"role": "user", "content": parts},
        ])
    }

    /// Canonical serialization (sorted keys, compact).
    pub fn to_canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("bundle serializes");
        serde_json::to_string(&v).expect("value serializes")
    }
}

/// A reference image with its expert annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceExample {
    pub record: ImageRecord,
    /// Decision-tree CoT for the image; required by cases 2 and 4.
    pub cot: Option<CoTResult>,
}

impl ReferenceExample {
    pub fn grade(&self) -> &Grade {
        &self.record.grade
    }
}

/// Everything a prompt is assembled from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptComponents {
    /// System prompt.
    pub role: String,
    pub task: String,
    /// Rendered decision tree.
    pub decision_tree: String,
    /// JSON output schema instruction.
    pub format: String,
    pub grades: Vec<Grade>,
    pub references: Vec<ReferenceExample>,
    pub objective: ImageRecord,
    /// Expert grade of the objective image; only for Q&A generation.
    pub grade_result: Option<Grade>,
    pub q1: String,
    pub q2: String,
    /// Drop the decision-tree text in cases without CoT annotations.
    #[serde(default)]
    pub drop_tree_without_cot: bool,
}

/// Reference annotation: the full CoT JSON, or a single grade line.
pub fn render_reference_annotation(reference: &ReferenceExample, include_cot: bool) -> Result<String, PromptError> {
    if include_cot {
        let cot = reference
            .cot
            .as_ref()
            .ok_or_else(|| PromptError::MissingCot(reference.grade().clone()))?;
        Ok(cot.to_answer_json_pretty())
    } else {
        Ok(format!("Grade: {}", reference.grade()))
    }
}

fn ordered_references(c: &PromptComponents) -> Result<Vec<&ReferenceExample>, PromptError> {
    let mut out = Vec::with_capacity(c.grades.len());
    for r in &c.references {
        if !c.grades.contains(r.grade()) {
            return Err(PromptError::UnknownReferenceGrade(r.grade().clone()));
        }
    }
    let mut missing = Vec::new();
    for g in &c.grades {
        let mut matches = c.references.iter().filter(|r| r.grade() == g);
        match (matches.next(), matches.next()) {
            (Some(r), None) => out.push(r),
            (Some(_), Some(_)) => return Err(PromptError::DuplicateReference(g.clone())),
            (None, _) => missing.push(g.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(PromptError::ReferencesIncomplete(missing));
    }
    Ok(out)
}

fn check_text(text: &str, name: &'static str) -> Result<(), PromptError> {
    if text.trim().is_empty() {
        Err(PromptError::MissingComponent(name))
    } else {
        Ok(())
    }
}

fn assemble(
    c: &PromptComponents,
    case: PromptCase,
    placement: Placement,
    qa: bool,
) -> Result<PromptBundle, PromptError> {
    check_text(&c.role, "role")?;
    check_text(&c.task, "task")?;
    check_text(&c.decision_tree, "decision tree")?;
    check_text(&c.format, "format")?;
    check_text(if qa { &c.q2 } else { &c.q1 }, if qa { "Q2" } else { "Q1" })?;
    if c.grades.is_empty() {
        return Err(PromptError::MissingComponent("grade set"));
    }
    let refs = ordered_references(c)?;

    let mut segs = Vec::new();
    segs.push(Segment::text(Component::Task, c.task.trim_end()));
    if case.include_cot() || !c.drop_tree_without_cot {
        segs.push(Segment::text(Component::DecisionTree, c.decision_tree.trim_end()));
    }
    segs.push(Segment::text(Component::Format, c.format.trim_end()));
    for (i, r) in refs.iter().enumerate() {
        segs.push(Segment::text(
            Component::ReferenceCaption,
            format!("Reference example {}:", i + 1),
        ));
        if case.include_reference_images() {
            segs.push(Segment::ImageSlot {
                component: Component::ReferenceImage,
                image: (&r.record).into(),
            });
        }
        segs.push(Segment::text(
            Component::ReferenceAnnotation,
            render_reference_annotation(r, case.include_cot())?,
        ));
    }
    segs.push(Segment::text(Component::ObjectiveCaption, "Objective image:"));
    segs.push(Segment::ImageSlot {
        component: Component::ObjectiveImage,
        image: (&c.objective).into(),
    });
    if qa {
        let g = c.grade_result.as_ref().ok_or(PromptError::MissingGradeResult)?;
        segs.push(Segment::text(
            Component::GradeResult,
            format!("Expert grade of the objective image: {g}"),
        ));
        segs.push(Segment::text(Component::Question, c.q2.trim_end()));
    } else {
        segs.push(Segment::text(Component::Question, c.q1.trim_end()));
    }

    let messages = match placement {
        Placement::Corresponding => segs,
        Placement::Front | Placement::End => {
            let (images, texts): (Vec<_>, Vec<_>) = segs.into_iter().partition(Segment::is_image);
            if placement == Placement::Front {
                images.into_iter().chain(texts).collect()
            } else {
                texts.into_iter().chain(images).collect()
            }
        }
    };
    Ok(PromptBundle {
        system: c.role.trim_end().to_string(),
        messages,
        case,
        placement,
    })
}

/// Grading prompt (role, task, tree, format, references, objective, Q1).
pub fn build_dg_prompt(
    components: &PromptComponents,
    case: PromptCase,
    placement: Placement,
) -> Result<PromptBundle, PromptError> {
    if components.grade_result.is_some() {
        return Err(PromptError::UnexpectedGradeResult);
    }
    assemble(components, case, placement, false)
}

/// Q&A-generation prompt: the grading prompt with the expert grade appended
/// and Q2 in place of Q1.
pub fn build_qa_prompt(
    components: &PromptComponents,
    case: PromptCase,
    placement: Placement,
) -> Result<PromptBundle, PromptError> {
    assemble(components, case, placement, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::ImageDims;
    use crate::dtree::builtin;

    pub(crate) fn record(id: &str, grade: &str) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            task_id: "1".into(),
            path: format!("images/{id}.png"),
            dims: ImageDims::new(64, 64),
            grade: Grade::new(grade),
            boxes: vec![],
            reference: false,
        }
    }

    fn components(task: &str) -> PromptComponents {
        let tree = match task {
            "1" => builtin::task1(),
            _ => builtin::task3(),
        };
        let t = PromptTemplates::builtin(task);
        let paths = tree.enumerate_paths();
        let references = tree
            .grades()
            .iter()
            .map(|g| {
                let p = paths.iter().find(|p| &p.grade == g).unwrap();
                ReferenceExample {
                    record: record(&format!("ref-{g}"), g.as_str()),
                    cot: Some(CoTResult::from_path(p)),
                }
            })
            .collect();
        t.components(&tree, references, record("obj", "Else"), None)
    }

    #[test]
    fn case_flags() {
        let flags: Vec<_> = PromptCase::ALL
            .iter()
            .map(|c| (c.include_cot(), c.include_reference_images()))
            .collect();
        assert_eq!(flags, vec![(false, false), (true, false), (false, true), (true, true)]);
        assert!(PromptCase::new(0).is_err());
        assert!(PromptCase::new(5).is_err());
    }

    #[test]
    fn task1_case4_corresponding() {
        let b = build_dg_prompt(&components("1"), PromptCase::FULL, Placement::Corresponding).unwrap();
        assert_eq!(b.image_count(), 3);
        for (i, s) in b.messages.iter().enumerate() {
            if let Segment::ImageSlot { component, .. } = s {
                let caption = match component {
                    Component::ReferenceImage => Component::ReferenceCaption,
                    _ => Component::ObjectiveCaption,
                };
                assert_eq!(b.messages[i - 1].component(), caption);
            }
        }
        let order: Vec<Component> = b.messages.iter().map(Segment::component).collect();
        assert_eq!(order.first(), Some(&Component::Task));
        assert_eq!(order.last(), Some(&Component::Question));
    }

    #[test]
    fn case1_has_grade_only_references() {
        let b = build_dg_prompt(&components("1"), PromptCase::new(1).unwrap(), Placement::Corresponding).unwrap();
        assert_eq!(b.image_count(), 1);
        let annotations: Vec<&str> = b
            .texts()
            .filter(|(c, _)| *c == Component::ReferenceAnnotation)
            .map(|(_, t)| t)
            .collect();
        assert_eq!(annotations, vec!["Grade: Else", "Grade: Kind"]);
    }

    #[test]
    fn front_moves_images_first() {
        let c = components("3");
        let corr = build_dg_prompt(&c, PromptCase::FULL, Placement::Corresponding).unwrap();
        let front = build_dg_prompt(&c, PromptCase::FULL, Placement::Front).unwrap();
        let end = build_dg_prompt(&c, PromptCase::FULL, Placement::End).unwrap();
        assert!(front.messages[..5].iter().all(Segment::is_image));
        assert!(end.messages[end.messages.len() - 5..].iter().all(Segment::is_image));
        let imgs = |b: &PromptBundle| b.image_slots().cloned().collect::<Vec<_>>();
        assert_eq!(imgs(&front), imgs(&corr));
        assert_eq!(imgs(&end), imgs(&corr));
        let texts = |b: &PromptBundle| b.texts().map(|(_, t)| t.to_string()).collect::<Vec<_>>();
        assert_eq!(texts(&front), texts(&corr));
    }

    #[test]
    fn qa_prompt_needs_grade() {
        let mut c = components("3");
        assert_eq!(
            build_qa_prompt(&c, PromptCase::FULL, Placement::Corresponding),
            Err(PromptError::MissingGradeResult)
        );
        c.grade_result = Some(Grade::new("Major"));
        let b = build_qa_prompt(&c, PromptCase::FULL, Placement::Corresponding).unwrap();
        assert!(b
            .texts()
            .any(|(_, t)| t.contains("Major") && t.starts_with("Expert grade")));
        assert!(b.texts().any(|(_, t)| t == c.q2.trim_end()));
        assert_eq!(
            build_dg_prompt(&c, PromptCase::FULL, Placement::Corresponding),
            Err(PromptError::UnexpectedGradeResult)
        );
    }

    #[test]
    fn reference_annotation_forms() {
        let c = components("3");
        let urgent = c.references.iter().find(|r| r.grade().as_str() == "Urgent").unwrap();
        let text = render_reference_annotation(urgent, true).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["steps"].as_array().unwrap().len(), 4);
        assert_eq!(v["grade"], "Urgent");
        let kind = c.references.iter().find(|r| r.grade().as_str() == "Kind").unwrap();
        assert_eq!(render_reference_annotation(kind, false).unwrap(), "Grade: Kind");
        let bare = ReferenceExample {
            record: record("x", "Kind"),
            cot: None,
        };
        assert_eq!(
            render_reference_annotation(&bare, true),
            Err(PromptError::MissingCot(Grade::new("Kind")))
        );
    }

    #[test]
    fn reference_coverage_errors() {
        let mut c = components("3");
        c.references.pop();
        assert_eq!(
            build_dg_prompt(&c, PromptCase::FULL, Placement::Corresponding),
            Err(PromptError::ReferencesIncomplete(vec![Grade::new("Urgent")]))
        );
        let mut c = components("3");
        let dup = c.references[0].clone();
        c.references.push(dup);
        assert!(matches!(
            build_dg_prompt(&c, PromptCase::FULL, Placement::Corresponding),
            Err(PromptError::DuplicateReference(_))
        ));
        let mut c = components("3");
        c.format.clear();
        assert_eq!(
            build_dg_prompt(&c, PromptCase::FULL, Placement::Corresponding),
            Err(PromptError::MissingComponent("format"))
        );
    }

    #[test]
    fn strict_minimal_drops_tree() {
        let mut c = components("3");
        c.drop_tree_without_cot = true;
        let b1 = build_dg_prompt(&c, PromptCase::new(1).unwrap(), Placement::Corresponding).unwrap();
        assert!(b1.texts().all(|(k, _)| k != Component::DecisionTree));
        let b2 = build_dg_prompt(&c, PromptCase::new(2).unwrap(), Placement::Corresponding).unwrap();
        assert!(b2.texts().any(|(k, _)| k == Component::DecisionTree));
    }

    #[test]
    fn chat_messages_shape() {
        let b = build_dg_prompt(&components("1"), PromptCase::FULL, Placement::Corresponding).unwrap();
        let m = b.to_chat_messages();
        assert_eq!(m[0]["role"], "system");
        assert_eq!(m[1]["role"], "user");
        let parts = m[1]["content"].as_array().unwrap();
        assert_eq!(parts.iter().filter(|p| p["type"] == "image_url").count(), 3);
    }
}
