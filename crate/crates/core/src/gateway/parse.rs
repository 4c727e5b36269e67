use serde_json::{Map, Value};

use crate::cot::{CoTResult, CotStep, ParseStatus};
use crate::dtree::{AnswerLabel, DecisionTree, Grade, NodeId};

/// Parses model output into a CoT.
///
/// The first JSON object in `raw` is read strictly against the answer
/// schema. If there is none, or it does not fit, the text is scanned for
/// grade labels and the last mention wins (`Repaired`, no steps). With no
/// mention at all the result is `Failed` with the sentinel grade.
pub fn parse_cot(raw: &str, tree: &DecisionTree) -> CoTResult {
    if let Some(obj) = first_object(raw) {
        if let Some(cot) = interpret(&obj, tree) {
            return cot;
        }
    }
    match scan_grade(raw, tree.grades()) {
        Some(grade) => CoTResult {
            steps: Vec::new(),
            grade,
            parse_status: ParseStatus::Repaired,
        },
        None => CoTResult::failed(),
    }
}

fn first_object(raw: &str) -> Option<Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

fn match_grade(label: &str, grades: &[Grade]) -> Option<Grade> {
    let label = label.trim();
    grades.iter().find(|g| g.as_str().eq_ignore_ascii_case(label)).cloned()
}

fn interpret(obj: &Map<String, Value>, tree: &DecisionTree) -> Option<CoTResult> {
    let grade = match_grade(obj.get("grade")?.as_str()?, tree.grades())?;
    let steps = obj
        .get("steps")?
        .as_array()?
        .iter()
        .map(interpret_step)
        .collect::<Option<Vec<_>>>()?;
    Some(CoTResult {
        steps,
        grade,
        parse_status: ParseStatus::Ok,
    })
}

fn interpret_step(v: &Value) -> Option<CotStep> {
    let obj = v.as_object()?;
    let node = ["node", "node_id", "step", "id"].iter().find_map(|k| obj.get(*k))?;
    let node_id = match node {
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        _ => return None,
    };
    let answer: AnswerLabel = obj.get("answer")?.as_str()?.parse().ok()?;
    let evidence = match obj.get("evidence") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return None,
    };
    Some(CotStep {
        node_id: NodeId::new(node_id),
        answer,
        evidence,
    })
}

/// Last whole-word, case-insensitive mention of a grade label; at equal
/// positions the longer label wins.
fn scan_grade(raw: &str, grades: &[Grade]) -> Option<Grade> {
    let hay = raw.to_ascii_lowercase();
    let bytes = hay.as_bytes();
    let boundary = |i: Option<usize>| i.and_then(|i| bytes.get(i)).is_none_or(|b| !b.is_ascii_alphanumeric());
    let mut best: Option<(usize, usize, &Grade)> = None;
    for g in grades {
        let needle = g.as_str().to_ascii_lowercase();
        if needle.is_empty() {
            continue;
        }
        for (start, _) in hay.match_indices(&needle) {
            let end = start + needle.len();
            if boundary(start.checked_sub(1)) && boundary(Some(end)) {
                let cand = (start, needle.len(), g);
                if best.is_none_or(|(s, l, _)| (start, needle.len()) > (s, l)) {
                    best = Some(cand);
                }
            }
        }
    }
    best.map(|(_, _, g)| g.clone())
}
