use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use super::{
    canonical_request, fingerprint_value, AssetStore, ChatClient, GatewayError, ModelEndpoint, ModelResponse,
    TokenUsage,
};
use crate::cot::CoTResult;
use crate::dataprep::ImageRecord;
use crate::dtree::{DecisionTree, Grade, PathOutcome};
use crate::promptkit::{Component, PromptBundle};

/// How one simulated endpoint answers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimBehaviour {
    /// Grading accuracy per (task, case). Case 0 applies to every case of
    /// the task that has no entry of its own.
    pub accuracy: BTreeMap<(String, u8), f64>,
    /// Share of Q&A-generation answers that are wrong.
    pub qa_noise: f64,
    /// Among wrong grading answers, the share given as prose without JSON.
    pub prose_share: f64,
    /// Among wrong grading answers, the share with no usable content.
    pub garbage_share: f64,
}

impl SimBehaviour {
    pub fn new() -> Self {
        SimBehaviour {
            prose_share: 0.1,
            garbage_share: 0.05,
            ..Default::default()
        }
    }

    pub fn with_accuracy(mut self, task: &str, case: u8, acc: f64) -> Self {
        self.accuracy.insert((task.to_string(), case), acc);
        self
    }

    pub fn with_qa_noise(mut self, noise: f64) -> Self {
        self.qa_noise = noise;
        self
    }

    fn accuracy_for(&self, task: &str, case: u8) -> Option<f64> {
        self.accuracy
            .get(&(task.to_string(), case))
            .or_else(|| self.accuracy.get(&(task.to_string(), 0)))
            .copied()
    }
}

#[derive(Debug, Clone)]
struct Truth {
    task: String,
    record_id: String,
    grade: Grade,
}

/// Deterministic stand-in for a set of commercial endpoints.
///
/// Each endpoint id maps to a [`SimBehaviour`]. For a registered cohort of
/// records (typically a test set) exactly `round(acc · n)` grading answers
/// are correct; which ones is fixed by a hash of endpoint, case, placement
/// and record id. Outside a cohort each record is correct with probability
/// `acc` under the same hash. Q&A-generation prompts are answered with a
/// valid trace to the expert grade unless the Q&A noise hash says
/// otherwise.
#[derive(Debug, Clone, Default)]
pub struct SimulatedModel {
    trees: HashMap<String, DecisionTree>,
    truth: HashMap<String, Truth>,
    cohorts: HashMap<String, Vec<String>>,
    behaviours: HashMap<String, SimBehaviour>,
    assets: Option<AssetStore>,
}

fn unit(parts: &[&str]) -> f64 {
    let digest = Sha256::digest(parts.join("|").as_bytes());
    let n = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    (n >> 11) as f64 / (1u64 << 53) as f64
}

impl SimulatedModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_tree(mut self, tree: DecisionTree) -> Self {
        self.trees.insert(tree.task_id().to_string(), tree);
        self
    }

    /// Registers ground truth, keyed by image path.
    pub fn with_records<'a>(mut self, records: impl IntoIterator<Item = &'a ImageRecord>) -> Self {
        for r in records {
            self.truth.insert(
                r.path.clone(),
                Truth {
                    task: r.task_id.clone(),
                    record_id: r.id.clone(),
                    grade: r.grade.clone(),
                },
            );
        }
        self
    }

    /// Records over which accuracies are met exactly.
    pub fn with_cohort(mut self, task: &str, record_ids: impl IntoIterator<Item = String>) -> Self {
        self.cohorts.entry(task.to_string()).or_default().extend(record_ids);
        self
    }

    pub fn with_endpoint(mut self, id: &str, behaviour: SimBehaviour) -> Self {
        self.behaviours.insert(id.to_string(), behaviour);
        self
    }

    /// Fills in response fingerprints; without assets they are left empty.
    pub fn with_assets(mut self, assets: AssetStore) -> Self {
        self.assets = Some(assets);
        self
    }

    fn err(&self, endpoint: &ModelEndpoint, message: String) -> GatewayError {
        GatewayError::Simulation {
            model: endpoint.id.clone(),
            message,
        }
    }

    fn grading_correct(&self, endpoint: &str, t: &Truth, salt: &str, acc: f64) -> bool {
        let key = |id: &str| unit(&[endpoint, &t.task, salt, id]);
        match self.cohorts.get(&t.task).filter(|c| c.contains(&t.record_id)) {
            Some(cohort) => {
                let mut ranked: Vec<(f64, &String)> = cohort.iter().map(|id| (key(id), id)).collect();
                ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
                let quota = (acc * cohort.len() as f64).round() as usize;
                let rank = ranked
                    .iter()
                    .position(|(_, id)| **id == t.record_id)
                    .expect("member of cohort");
                rank < quota
            }
            None => key(&t.record_id) < acc,
        }
    }

    fn path_to<'t>(paths: &'t [PathOutcome], grade: &Grade, u: f64) -> &'t PathOutcome {
        let options: Vec<&PathOutcome> = paths.iter().filter(|p| &p.grade == grade).collect();
        options[((u * options.len() as f64) as usize).min(options.len() - 1)]
    }

    fn trace_json(tree: &DecisionTree, path: &PathOutcome) -> String {
        let mut cot = CoTResult::from_path(path);
        for step in &mut cot.steps {
            let node = tree.node(&step.node_id).expect("path node exists");
            step.evidence = Some(format!("{}: {}", node.title, step.answer));
        }
        cot.to_answer_json()
    }

    fn other_grade(grades: &[Grade], truth: &Grade, u: f64) -> Grade {
        let others: Vec<&Grade> = grades.iter().filter(|g| *g != truth).collect();
        if others.is_empty() {
            return truth.clone();
        }
        others[((u * others.len() as f64) as usize).min(others.len() - 1)].clone()
    }
}

const GARBAGE: &str = "I am unable to assess the component in this photograph with confidence.";

impl ChatClient for SimulatedModel {
    fn complete(&self, endpoint: &ModelEndpoint, bundle: &PromptBundle) -> Result<ModelResponse, GatewayError> {
        let behaviour = self
            .behaviours
            .get(&endpoint.id)
            .ok_or_else(|| self.err(endpoint, "endpoint not configured".into()))?;
        let objective = bundle
            .objective()
            .ok_or_else(|| self.err(endpoint, "prompt has no objective image".into()))?;
        let truth = self
            .truth
            .get(&objective.path)
            .ok_or_else(|| self.err(endpoint, format!("no ground truth for {}", objective.path)))?;
        let tree = self
            .trees
            .get(&truth.task)
            .ok_or_else(|| self.err(endpoint, format!("no tree for task {}", truth.task)))?;
        let paths = tree.enumerate_paths();
        let qa = bundle.texts().any(|(c, _)| c == Component::GradeResult);
        let salt = format!("{}/{}/{}", if qa { "qa" } else { "dg" }, bundle.case, bundle.placement);
        let u = |tag: &str| unit(&[&endpoint.id, &salt, &truth.record_id, tag]);

        let raw_text = if qa {
            let noise = u("noise");
            if noise >= behaviour.qa_noise {
                Self::trace_json(tree, Self::path_to(&paths, &truth.grade, u("path")))
            } else if noise < behaviour.qa_noise / 2.0 {
                GARBAGE.to_string()
            } else {
                let wrong = Self::other_grade(tree.grades(), &truth.grade, u("wrong"));
                Self::trace_json(tree, Self::path_to(&paths, &wrong, u("path")))
            }
        } else {
            let acc = behaviour.accuracy_for(&truth.task, bundle.case.id()).ok_or_else(|| {
                self.err(
                    endpoint,
                    format!("no accuracy for task {} case {}", truth.task, bundle.case),
                )
            })?;
            if self.grading_correct(&endpoint.id, truth, &salt, acc) {
                Self::trace_json(tree, Self::path_to(&paths, &truth.grade, u("path")))
            } else {
                let wrong = Self::other_grade(tree.grades(), &truth.grade, u("wrong"));
                let style = u("style");
                if style < behaviour.garbage_share {
                    GARBAGE.to_string()
                } else if style < behaviour.garbage_share + behaviour.prose_share {
                    format!("After working through the checks, the defect grade is {wrong}.")
                } else {
                    Self::trace_json(tree, Self::path_to(&paths, &wrong, u("path")))
                }
            }
        };

        let fingerprint = match &self.assets {
            Some(a) => fingerprint_value(&canonical_request(endpoint, bundle, a)?),
            None => String::new(),
        };
        let words = |s: &str| s.split_whitespace().count() as u64;
        let completion = words(&raw_text);
        let prompt = bundle.token_estimate() as u64;
        Ok(ModelResponse {
            usage: Some(TokenUsage {
                prompt_tokens: prompt,
                completion_tokens: completion,
                total_tokens: prompt + completion,
            }),
            latency_ms: 0,
            raw_text,
            endpoint_id: endpoint.id.clone(),
            fingerprint,
        })
    }
}
