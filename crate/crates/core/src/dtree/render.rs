use std::fmt::Write;

use super::parse::PREAMBLE_PREFIX;
use super::{DecisionTree, Target};

pub(super) fn render(tree: &DecisionTree) -> String {
    let ids: Vec<&str> = tree.nodes().map(|n| n.id.as_str()).collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{PREAMBLE_PREFIX} {} starting at check {}. Take the branch that matches each answer \
         and stop as soon as a branch names a grade result.",
        ids.join(", "),
        ids[0],
    );
    let _ = writeln!(out, "task: {}", tree.task_id());
    let grades: Vec<&str> = tree.grades().iter().map(|g| g.as_str()).collect();
    let _ = writeln!(out, "grades: {}", grades.join(", "));
    for node in tree.nodes() {
        let _ = writeln!(out);
        let _ = writeln!(out, "{}. {}: {}", node.id, node.title, node.question);
        for (label, target) in &node.branches {
            match target {
                Target::Node(next) => {
                    let _ = writeln!(out, "   |- {label} -> {next}");
                }
                Target::Grade(g) => {
                    let _ = writeln!(out, "   |- {label} -> grade result is \"{g}\"");
                }
            }
        }
    }
    out
}
