//! Decision-tree grading logic.
//!
//! A [`DecisionTree`] is an expert-authored sequence of categorical checks.
//! Every check answers a question with a small label (`Yes`, `No`, `Exists`,
//! `Not Exists`) and either moves on to another check or terminates with a
//! grade. A terminal branch ends evaluation immediately: later checks are not
//! asked.

mod parse;
mod render;
mod validate;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use parse::parse_tree;
pub use validate::{validate_cot, ValidationReport};

/// A defect grade label such as `Else`, `Kind`, `Major` or `Urgent`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Grade(String);

impl Grade {
    const SENTINEL: &'static str = "<unparsed>";

    pub fn new(label: impl Into<String>) -> Self {
        Grade(label.into())
    }

    /// Grade carried by model outputs that could not be parsed. Never a
    /// member of any task's grade set, so it always scores as incorrect.
    pub fn sentinel() -> Self {
        Grade(Self::SENTINEL.to_string())
    }

    pub fn is_sentinel(&self) -> bool {
        self.0 == Self::SENTINEL
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Grade {
    fn from(s: &str) -> Self {
        Grade::new(s)
    }
}

/// Identifier of a check step, e.g. `1` or `4A`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub(crate) fn is_valid(id: &str) -> bool {
        !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId::new(s)
    }
}

/// Answer to a single check. Ordering is alphabetical by canonical spelling
/// and defines the lexicographic order of enumerated paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnswerLabel {
    Exists,
    No,
    NotExists,
    Yes,
}

impl AnswerLabel {
    pub const ALL: [AnswerLabel; 4] = [
        AnswerLabel::Exists,
        AnswerLabel::No,
        AnswerLabel::NotExists,
        AnswerLabel::Yes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerLabel::Exists => "Exists",
            AnswerLabel::No => "No",
            AnswerLabel::NotExists => "Not Exists",
            AnswerLabel::Yes => "Yes",
        }
    }
}

impl fmt::Display for AnswerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown answer label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for AnswerLabel {
    type Err = UnknownLabel;

    /// Case-insensitive with a fixed synonym table; `Not` is shorthand for
    /// `Not Exists`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s
            .trim()
            .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '!')
            .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
            .to_ascii_lowercase();
        match norm.as_str() {
            "yes" => Ok(AnswerLabel::Yes),
            "no" => Ok(AnswerLabel::No),
            "exists" | "exist" => Ok(AnswerLabel::Exists),
            "not exists" | "not exist" | "not" | "notexists" | "does not exist" => Ok(AnswerLabel::NotExists),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}

impl Serialize for AnswerLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AnswerLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where a branch leads.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Node(NodeId),
    Grade(Grade),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub title: String,
    pub question: String,
    /// In authoring order.
    pub branches: Vec<(AnswerLabel, Target)>,
}

impl Node {
    pub fn branch(&self, label: AnswerLabel) -> Option<&Target> {
        self.branches.iter().find(|(l, _)| *l == label).map(|(_, t)| t)
    }

    pub fn labels(&self) -> impl Iterator<Item = AnswerLabel> + '_ {
        self.branches.iter().map(|(l, _)| *l)
    }
}

/// Structural problems found while assembling a tree.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SemanticError {
    #[error("tree has no nodes")]
    Empty,
    #[error("grade set is empty")]
    NoGrades,
    #[error("grade {0:?} listed twice")]
    DuplicateGrade(Grade),
    #[error("grade label {0:?} is reserved")]
    ReservedGrade(Grade),
    #[error("node {0} defined twice")]
    DuplicateNode(NodeId),
    #[error("node {0} needs at least two branches")]
    TooFewBranches(NodeId),
    #[error("node {node} has two branches for answer {label}")]
    DuplicateLabel { node: NodeId, label: AnswerLabel },
    #[error("node {node} branch {label} targets undefined node {target}")]
    DanglingTarget {
        node: NodeId,
        label: AnswerLabel,
        target: NodeId,
    },
    #[error("node {node} branch {label} yields grade {grade:?} which is not in the grade set")]
    UnknownGrade {
        node: NodeId,
        label: AnswerLabel,
        grade: Grade,
    },
    #[error("branches point back to node {0}, forming a cycle")]
    Cycle(NodeId),
    #[error("node {0} is referenced by more than one branch")]
    MultipleParents(NodeId),
    #[error("node {0} is unreachable from the root")]
    UnreachableNode(NodeId),
    #[error("grade {0:?} is not reachable from the root")]
    UnreachableGrade(Grade),
}

/// Errors from [`DecisionTree::evaluate`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("incomplete trace: no answer for node {node} after {consumed} answers")]
    Incomplete { node: NodeId, consumed: usize },
    #[error("answer {label} is not a branch of node {node}")]
    UnknownAnswer { node: NodeId, label: AnswerLabel },
    #[error("{surplus} surplus answers after reaching grade {grade}")]
    Surplus { grade: Grade, surplus: usize },
}

/// One root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathOutcome {
    pub answers: Vec<AnswerLabel>,
    pub nodes: Vec<NodeId>,
    pub grade: Grade,
}

/// Immutable, validated grading tree. The first node is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionTree {
    task_id: String,
    grades: Vec<Grade>,
    nodes: IndexMap<NodeId, Node>,
}

impl DecisionTree {
    /// Assembles a tree, checking every structural invariant. The first node
    /// in `nodes` is the root.
    pub fn new(task_id: impl Into<String>, grades: Vec<Grade>, nodes: Vec<Node>) -> Result<Self, SemanticError> {
        if grades.is_empty() {
            return Err(SemanticError::NoGrades);
        }
        let mut seen = BTreeSet::new();
        for g in &grades {
            if g.is_sentinel() {
                return Err(SemanticError::ReservedGrade(g.clone()));
            }
            if !seen.insert(g) {
                return Err(SemanticError::DuplicateGrade(g.clone()));
            }
        }
        if nodes.is_empty() {
            return Err(SemanticError::Empty);
        }
        let mut map = IndexMap::with_capacity(nodes.len());
        for node in nodes {
            if map.contains_key(&node.id) {
                return Err(SemanticError::DuplicateNode(node.id));
            }
            map.insert(node.id.clone(), node);
        }
        let root = map.get_index(0).map(|(k, _)| k.clone()).unwrap();

        let mut parents: HashMap<&NodeId, usize> = HashMap::new();
        for node in map.values() {
            if node.branches.len() < 2 {
                return Err(SemanticError::TooFewBranches(node.id.clone()));
            }
            let mut labels = BTreeSet::new();
            for (label, target) in &node.branches {
                if !labels.insert(*label) {
                    return Err(SemanticError::DuplicateLabel {
                        node: node.id.clone(),
                        label: *label,
                    });
                }
                match target {
                    Target::Node(t) => {
                        if !map.contains_key(t) {
                            return Err(SemanticError::DanglingTarget {
                                node: node.id.clone(),
                                label: *label,
                                target: t.clone(),
                            });
                        }
                        if *t == root || *t == node.id {
                            return Err(SemanticError::Cycle(t.clone()));
                        }
                        let n = parents.entry(t).or_default();
                        *n += 1;
                        if *n > 1 {
                            return Err(SemanticError::MultipleParents(t.clone()));
                        }
                    }
                    Target::Grade(g) => {
                        if !seen.contains(g) {
                            return Err(SemanticError::UnknownGrade {
                                node: node.id.clone(),
                                label: *label,
                                grade: g.clone(),
                            });
                        }
                    }
                }
            }
        }

        // With a single parent per node and a parentless root, reachability
        // from the root rules out detached cycles.
        let mut reached_nodes = BTreeSet::new();
        let mut reached_grades = BTreeSet::new();
        let mut stack = vec![&root];
        while let Some(id) = stack.pop() {
            if !reached_nodes.insert(id) {
                return Err(SemanticError::Cycle(id.clone()));
            }
            for (_, target) in &map[id].branches {
                match target {
                    Target::Node(t) => stack.push(t),
                    Target::Grade(g) => {
                        reached_grades.insert(g);
                    }
                }
            }
        }
        if let Some(id) = map.keys().find(|id| !reached_nodes.contains(id)) {
            // A node that is referenced yet unreachable sits on a cycle.
            if parents.contains_key(id) {
                return Err(SemanticError::Cycle(id.clone()));
            }
            return Err(SemanticError::UnreachableNode(id.clone()));
        }
        if let Some(g) = grades.iter().find(|g| !reached_grades.contains(g)) {
            return Err(SemanticError::UnreachableGrade(g.clone()));
        }

        Ok(DecisionTree {
            task_id: task_id.into(),
            grades,
            nodes: map,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn grades(&self) -> &[Grade] {
        &self.grades
    }

    pub fn has_grade(&self, grade: &Grade) -> bool {
        self.grades.contains(grade)
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    /// Nodes in authoring order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of terminal branches.
    pub fn leaf_count(&self) -> usize {
        self.nodes()
            .flat_map(|n| n.branches.iter())
            .filter(|(_, t)| matches!(t, Target::Grade(_)))
            .count()
    }

    /// Longest root-to-leaf path, counted in checks.
    pub fn depth(&self) -> usize {
        self.enumerate_paths()
            .iter()
            .map(|p| p.answers.len())
            .max()
            .unwrap_or(0)
    }

    /// Follows `answers` from the root. Exactly as many answers as checks on
    /// the induced path must be supplied.
    pub fn evaluate(&self, answers: &[AnswerLabel]) -> Result<Grade, EvalError> {
        let mut node = self.root();
        for (i, label) in answers.iter().enumerate() {
            match node.branch(*label) {
                None => {
                    return Err(EvalError::UnknownAnswer {
                        node: node.id.clone(),
                        label: *label,
                    })
                }
                Some(Target::Node(next)) => node = &self.nodes[next],
                Some(Target::Grade(g)) => {
                    let surplus = answers.len() - i - 1;
                    if surplus > 0 {
                        return Err(EvalError::Surplus {
                            grade: g.clone(),
                            surplus,
                        });
                    }
                    return Ok(g.clone());
                }
            }
        }
        Err(EvalError::Incomplete {
            node: node.id.clone(),
            consumed: answers.len(),
        })
    }

    /// Every root-to-leaf path, ordered lexicographically by answer sequence.
    pub fn enumerate_paths(&self) -> Vec<PathOutcome> {
        let mut out = Vec::with_capacity(self.leaf_count());
        let mut answers = Vec::new();
        let mut nodes = Vec::new();
        self.walk(self.root(), &mut answers, &mut nodes, &mut out);
        out.sort_by(|a, b| a.answers.cmp(&b.answers));
        out
    }

    fn walk(&self, node: &Node, answers: &mut Vec<AnswerLabel>, nodes: &mut Vec<NodeId>, out: &mut Vec<PathOutcome>) {
        nodes.push(node.id.clone());
        for (label, target) in &node.branches {
            answers.push(*label);
            match target {
                Target::Node(next) => self.walk(&self.nodes[next], answers, nodes, out),
                Target::Grade(g) => out.push(PathOutcome {
                    answers: answers.clone(),
                    nodes: nodes.clone(),
                    grade: g.clone(),
                }),
            }
            answers.pop();
        }
        nodes.pop();
    }

    /// Human-readable rendering used as the decision-tree prompt component.
    /// It is also valid DSL input for [`parse_tree`].
    pub fn render_prompt_text(&self) -> String {
        render::render(self)
    }

    /// Canonical JSON form, accepted by [`parse_tree`].
    pub fn to_json(&self) -> String {
        parse::to_json(self)
    }
}

/// The trees shipped for the three reference tasks.
pub mod builtin {
    use super::{parse_tree, DecisionTree};

    pub const TASK1_SOURCE: &str = include_str!("../../assets/trees/task1.dt");
    pub const TASK2_SOURCE: &str = include_str!("../../assets/trees/task2.dt");
    pub const TASK3_SOURCE: &str = include_str!("../../assets/trees/task3.dt");

    /// Tension clamp crimping: {Else, Kind}.
    pub fn task1() -> DecisionTree {
        parse_tree(TASK1_SOURCE).expect("builtin task 1 tree")
    }

    /// Guying fitting corrosion: {Else, Kind, Major}.
    pub fn task2() -> DecisionTree {
        parse_tree(TASK2_SOURCE).expect("builtin task 2 tree")
    }

    /// Bird's nest on tangent towers: {Else, Kind, Major, Urgent}.
    pub fn task3() -> DecisionTree {
        parse_tree(TASK3_SOURCE).expect("builtin task 3 tree")
    }

    pub fn source(task: &str) -> Option<&'static str> {
        match task {
            "1" => Some(TASK1_SOURCE),
            "2" => Some(TASK2_SOURCE),
            "3" => Some(TASK3_SOURCE),
            _ => None,
        }
    }
}
