use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pool, read_json, write_json, PipelineError, TaskContext};
use crate::cot::CoTResult;
use crate::dataprep::ImageRecord;
use crate::dtree::Grade;
use crate::evalharness::{summarize, LabeledPair, ReportRow, Summary};
use crate::gateway::{parse_cot, ChatClient, ModelEndpoint};
use crate::promptkit::{Placement, PromptCase};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub record_id: String,
    pub truth: Grade,
    pub cot: CoTResult,
    /// Request fingerprint; names the fixture in replay mode.
    pub fingerprint: String,
}

/// One model's grading run over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub model: String,
    pub task: String,
    pub case: PromptCase,
    pub placement: Placement,
    pub modules: String,
    /// Hash of the configuration the run was made under.
    pub config_hash: String,
    pub complete: bool,
    pub records: Vec<EvalRecord>,
    pub summary: Option<Summary>,
}

impl EvalRun {
    pub fn pairs(&self) -> Vec<LabeledPair> {
        self.records
            .iter()
            .map(|r| LabeledPair {
                predicted: r.cot.grade.clone(),
                truth: r.truth.clone(),
            })
            .collect()
    }

    pub fn correct(&self) -> u64 {
        self.records.iter().filter(|r| r.cot.grade == r.truth).count() as u64
    }

    pub fn report_row(&self) -> Option<ReportRow> {
        let s = self.summary?;
        Some(ReportRow {
            task: self.task.clone(),
            model: self.model.clone(),
            case: self.case.id(),
            placement: self.placement,
            modules: self.modules.clone(),
            acc: s.acc,
            mf1: s.mf1,
            n: s.n,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Concurrent requests.
    pub jobs: usize,
    pub config_hash: String,
    /// Directory runs are persisted to and resumed from.
    pub runs_dir: Option<PathBuf>,
}

/// `<runs>/<task>/<model>.case<c>.<placement>.json`
pub fn run_path(runs_dir: &Path, task: &str, model: &str, case: PromptCase, placement: Placement) -> PathBuf {
    runs_dir.join(task).join(format!("{model}.case{case}.{placement}.json"))
}

/// Grades every record of `records` with `endpoint`.
///
/// With a runs directory, the run is saved there. A saved run with the
/// same configuration hash is resumed: records already answered are kept
/// and only the rest are requested. If a request fails, the records
/// answered so far are saved as an incomplete run and the error returned.
pub fn run_grading_eval(
    client: &dyn ChatClient,
    endpoint: &ModelEndpoint,
    ctx: &TaskContext,
    case: PromptCase,
    placement: Placement,
    records: &[ImageRecord],
    opts: &RunOptions,
) -> Result<EvalRun, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::EmptyTestSet(ctx.task_id().to_string()));
    }
    let path = opts
        .runs_dir
        .as_ref()
        .map(|d| run_path(d, ctx.task_id(), &endpoint.id, case, placement));
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();

    let mut done: HashMap<String, EvalRecord> = HashMap::new();
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let prev: EvalRun = read_json(p)?;
        let same_set = prev
            .records
            .iter()
            .map(|r| r.record_id.as_str())
            .collect::<BTreeSet<_>>()
            == ids.iter().copied().collect::<BTreeSet<_>>();
        if prev.config_hash == opts.config_hash {
            if prev.complete && same_set {
                return Ok(prev);
            }
            done = prev.records.into_iter().map(|r| (r.record_id.clone(), r)).collect();
        }
    }

    let pending: Vec<&ImageRecord> = records.iter().filter(|r| !done.contains_key(&r.id)).collect();
    let results: Vec<Result<EvalRecord, PipelineError>> = pool(opts.jobs).install(|| {
        pending
            .par_iter()
            .map(|r| {
                let bundle = ctx.dg_prompt(r, case, placement)?;
                let resp = client.complete(endpoint, &bundle)?;
                Ok(EvalRecord {
                    record_id: r.id.clone(),
                    truth: r.grade.clone(),
                    cot: parse_cot(&resp.raw_text, &ctx.tree),
                    fingerprint: resp.fingerprint,
                })
            })
            .collect()
    });

    let mut first_err = None;
    for res in results {
        match res {
            Ok(rec) => {
                done.insert(rec.record_id.clone(), rec);
            }
            Err(e) if first_err.is_none() => first_err = Some(e),
            Err(_) => {}
        }
    }
    let ordered: Vec<EvalRecord> = ids.iter().filter_map(|id| done.remove(*id)).collect();
    let mut run = EvalRun {
        model: endpoint.id.clone(),
        task: ctx.task_id().to_string(),
        case,
        placement,
        modules: "none".into(),
        config_hash: opts.config_hash.clone(),
        complete: first_err.is_none(),
        records: ordered,
        summary: None,
    };
    if let Some(err) = first_err {
        if let Some(p) = &path {
            write_json(p, &run)?;
        }
        return Err(match err {
            PipelineError::Gateway(source) => PipelineError::Interrupted {
                done: run.records.len(),
                total: records.len(),
                source,
            },
            other => other,
        });
    }
    run.summary = Some(summarize(ctx.grades(), &run.pairs())?);
    if let Some(p) = &path {
        write_json(p, &run)?;
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub model: String,
    pub correct: u64,
    pub n: u64,
}

impl Candidate {
    pub fn acc(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }

    /// Exact comparison of accuracies.
    fn cmp_acc(&self, other: &Candidate) -> Ordering {
        (u128::from(self.correct) * u128::from(other.n)).cmp(&(u128::from(other.correct) * u128::from(self.n)))
    }
}

/// Outcome of a tournament; candidates are ranked best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SotaSelection {
    pub task: String,
    pub case: PromptCase,
    pub model: String,
    pub ranking: Vec<Candidate>,
}

/// The model with the highest accuracy; equal accuracies go to the
/// lexicographically smallest model id.
pub fn select_sota(runs: &[EvalRun]) -> Result<SotaSelection, PipelineError> {
    let first = runs.first().ok_or(PipelineError::NoRuns)?;
    let mut seen = BTreeSet::new();
    let mut ranking = Vec::with_capacity(runs.len());
    for r in runs {
        if r.task != first.task || r.case != first.case {
            return Err(PipelineError::MixedRuns(format!(
                "task {} case {} vs task {} case {}",
                first.task, first.case, r.task, r.case
            )));
        }
        if !r.complete || r.records.is_empty() {
            return Err(PipelineError::IncompleteRun {
                model: r.model.clone(),
                task: r.task.clone(),
            });
        }
        if !seen.insert(r.model.as_str()) {
            return Err(PipelineError::MixedRuns(format!("model {} appears twice", r.model)));
        }
        ranking.push(Candidate {
            model: r.model.clone(),
            correct: r.correct(),
            n: r.records.len() as u64,
        });
    }
    ranking.sort_by(|a, b| b.cmp_acc(a).then_with(|| a.model.cmp(&b.model)));
    Ok(SotaSelection {
        task: first.task.clone(),
        case: first.case,
        model: ranking[0].model.clone(),
        ranking,
    })
}
