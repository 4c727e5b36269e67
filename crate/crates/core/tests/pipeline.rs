use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use dgrade_core::config::Project;
use dgrade_core::cot::{CoTResult, ParseStatus};
use dgrade_core::dataprep::{ImageDims, ImageRecord};
use dgrade_core::dtree::{builtin, AnswerLabel, Grade};
use dgrade_core::gateway::{
    AssetStore, ChatClient, FixtureStore, GatewayError, ModelEndpoint, ModelResponse, ReplayClient, SimBehaviour,
    SimulatedModel,
};
use dgrade_core::pipeline::{
    approve_all_verified, export_sft, generate_qas, prepared_path, read_json, review_session, run_grading_eval,
    run_path, select_sota, ExportOptions, GenerateOptions, PipelineError, PreparedTask, QaStore, ReviewState,
    RunOptions, TaskContext,
};
use dgrade_core::promptkit::{Placement, PromptBundle, PromptCase, PromptTemplates, ReferenceExample};
use dgrade_core::synth::{self, SynthModel, SynthSpec};

fn small_spec() -> SynthSpec {
    let model = |id: &str, acc: [f64; 3]| SynthModel {
        id: id.into(),
        accuracy: [("1", acc[0]), ("2", acc[1]), ("3", acc[2])]
            .into_iter()
            .map(|(t, a)| (t.to_string(), [a; 4]))
            .collect(),
    };
    SynthSpec {
        seed: 11,
        per_grade: 4,
        test_size: 12,
        large_every: 7,
        cases: vec![PromptCase::FULL],
        models: vec![
            model("alpha", [0.5, 0.75, 0.5]),
            model("beta", [0.75, 0.5, 0.5]),
            model("gamma", [0.25, 0.25, 0.75]),
        ],
        qa_noise: 0.0,
        jobs: 4,
    }
}

struct Ctx {
    project: Project,
    prepared: PreparedTask,
    ctx: TaskContext,
    client: ReplayClient,
}

fn load(root: &Path, task: &str) -> Ctx {
    let project = Project::load(&root.join(synth::CONFIG_FILE)).unwrap();
    let prep_dir = project.path(&project.config.paths.prepared);
    let prepared: PreparedTask = read_json(&prepared_path(&prep_dir, task)).unwrap();
    let ctx = TaskContext::from_prepared(project.tree(task).unwrap(), project.templates(task).unwrap(), &prepared);
    let client = ReplayClient::strict(
        FixtureStore::new(project.path(&project.config.paths.fixtures)),
        AssetStore::new(root),
    );
    Ctx {
        project,
        prepared,
        ctx,
        client,
    }
}

fn eval_all(c: &Ctx, runs: Option<&Path>) -> Vec<dgrade_core::pipeline::EvalRun> {
    c.project
        .config
        .endpoints
        .iter()
        .map(|e| {
            let opts = RunOptions {
                jobs: 3,
                config_hash: c.project.config.run_hash(c.ctx.task_id(), &e.id),
                runs_dir: runs.map(Path::to_path_buf),
            };
            run_grading_eval(
                &c.client,
                e,
                &c.ctx,
                PromptCase::FULL,
                Placement::Corresponding,
                &c.prepared.split.test,
                &opts,
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn replayed_tournament_matches_seeded_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let report = synth::generate(dir.path(), &small_spec()).unwrap();
    assert_eq!(report.sota["1"], "beta");
    assert_eq!(report.sota["2"], "alpha");
    assert_eq!(report.sota["3"], "gamma");

    for (task, expected) in [("1", [6, 9, 3]), ("3", [6, 6, 9])] {
        let c = load(dir.path(), task);
        let runs = eval_all(&c, Some(&dir.path().join("runs")));
        let correct: Vec<u64> = runs.iter().map(|r| r.correct()).collect();
        assert_eq!(correct, expected, "task {task}");
        for r in &runs {
            let s = r.summary.unwrap();
            assert_eq!(s.n, 12);
            assert_eq!(s.acc, r.correct() as f64 / 12.0);
        }
        assert_eq!(select_sota(&runs).unwrap().model, report.sota[task]);
    }
}

#[test]
fn rerun_is_idempotent_and_persisted() {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(dir.path(), &small_spec()).unwrap();
    let c = load(dir.path(), "2");
    let runs_dir = dir.path().join("runs");
    let first = eval_all(&c, Some(&runs_dir));
    let path = run_path(&runs_dir, "2", "alpha", PromptCase::FULL, Placement::Corresponding);
    let bytes = fs::read(&path).unwrap();
    let second = eval_all(&c, Some(&runs_dir));
    assert_eq!(first, second);
    assert_eq!(fs::read(&path).unwrap(), bytes);
    let fresh = eval_all(&c, None);
    assert_eq!(
        first.iter().map(|r| r.summary).collect::<Vec<_>>(),
        fresh.iter().map(|r| r.summary).collect::<Vec<_>>()
    );
}

/// Fails with a fatal error once `budget` calls have been made.
struct Flaky<'a> {
    inner: &'a dyn ChatClient,
    budget: usize,
    calls: AtomicUsize,
}

impl ChatClient for Flaky<'_> {
    fn complete(&self, endpoint: &ModelEndpoint, bundle: &PromptBundle) -> Result<ModelResponse, GatewayError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(GatewayError::RetriesExhausted {
                endpoint: endpoint.id.clone(),
                attempts: 6,
                last: "HTTP 503".into(),
            });
        }
        self.inner.complete(endpoint, bundle)
    }
}

#[test]
fn interrupted_run_is_saved_and_resumed() {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(dir.path(), &small_spec()).unwrap();
    let c = load(dir.path(), "3");
    let runs_dir = dir.path().join("runs");
    let e = c.project.config.endpoint("gamma").unwrap().clone();
    let opts = RunOptions {
        jobs: 1,
        config_hash: "h".into(),
        runs_dir: Some(runs_dir.clone()),
    };
    let test = &c.prepared.split.test;
    let flaky = Flaky {
        inner: &c.client,
        budget: 5,
        calls: AtomicUsize::new(0),
    };
    let err = run_grading_eval(
        &flaky,
        &e,
        &c.ctx,
        PromptCase::FULL,
        Placement::Corresponding,
        test,
        &opts,
    )
    .unwrap_err();
    match err {
        PipelineError::Interrupted { done, total, .. } => {
            assert_eq!(done, 5);
            assert_eq!(total, 12);
        }
        other => panic!("unexpected {other}"),
    }
    let path = run_path(&runs_dir, "3", "gamma", PromptCase::FULL, Placement::Corresponding);
    let partial: dgrade_core::pipeline::EvalRun = read_json(&path).unwrap();
    assert!(!partial.complete);
    assert_eq!(partial.records.len(), 5);

    let counting = Flaky {
        inner: &c.client,
        budget: usize::MAX,
        calls: AtomicUsize::new(0),
    };
    let resumed = run_grading_eval(
        &counting,
        &e,
        &c.ctx,
        PromptCase::FULL,
        Placement::Corresponding,
        test,
        &opts,
    )
    .unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 7);
    let fresh = run_grading_eval(
        &c.client,
        &e,
        &c.ctx,
        PromptCase::FULL,
        Placement::Corresponding,
        test,
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(resumed.records, fresh.records);
    assert!(resumed.complete);
}

#[test]
fn empty_test_set_persists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = TaskContext::new(builtin::task1(), PromptTemplates::builtin("1"), vec![]);
    let opts = RunOptions {
        jobs: 1,
        config_hash: String::new(),
        runs_dir: Some(dir.path().to_path_buf()),
    };
    let sim = SimulatedModel::new();
    let err = run_grading_eval(
        &sim,
        &ModelEndpoint::new("m"),
        &ctx,
        PromptCase::FULL,
        Placement::Front,
        &[],
        &opts,
    )
    .unwrap_err();
    assert!(matches!(err, PipelineError::EmptyTestSet(_)));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

/// Task 3 context with one reference per grade, annotated with the
/// grade's first tree path.
fn task3_ctx() -> TaskContext {
    let tree = builtin::task3();
    let paths = tree.enumerate_paths();
    let refs = tree
        .grades()
        .iter()
        .map(|g| ReferenceExample {
            record: record("3", &format!("ref-{g}"), g.as_str()),
            cot: paths.iter().find(|p| &p.grade == g).map(CoTResult::from_path),
        })
        .collect();
    TaskContext::new(tree, PromptTemplates::builtin("3"), refs)
}

fn record(task: &str, id: &str, grade: &str) -> ImageRecord {
    ImageRecord {
        id: id.into(),
        task_id: task.into(),
        path: format!("img/{id}.png"),
        dims: ImageDims::new(64, 48),
        grade: Grade::new(grade),
        boxes: vec![],
        reference: false,
    }
}

#[test]
fn count_oracle_nineteen_of_twenty_one() {
    let tree = builtin::task3();
    let grades = ["Else", "Kind", "Major", "Urgent"];
    let records: Vec<ImageRecord> = (0..21)
        .map(|i| record("3", &format!("r{i:02}"), grades[i % 4]))
        .collect();
    let sim = SimulatedModel::new()
        .with_tree(tree.clone())
        .with_records(&records)
        .with_cohort("3", records.iter().map(|r| r.id.clone()))
        .with_endpoint("m", SimBehaviour::new().with_accuracy("3", 4, 19.0 / 21.0));
    let ctx = task3_ctx();
    let run = run_grading_eval(
        &sim,
        &ModelEndpoint::new("m"),
        &ctx,
        PromptCase::FULL,
        Placement::End,
        &records,
        &RunOptions::default(),
    )
    .unwrap();
    let s = run.summary.unwrap();
    assert_eq!((s.correct, s.n), (19, 21));
    assert!((100.0 * s.acc - 90.48).abs() < 0.005);
}

#[test]
fn strict_replay_reports_missing_fixture() {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(dir.path(), &small_spec()).unwrap();
    let c = load(dir.path(), "1");
    let e = c.project.config.endpoint("alpha").unwrap();
    let err = run_grading_eval(
        &c.client,
        e,
        &c.ctx,
        PromptCase::new(2).unwrap(),
        Placement::Corresponding,
        &c.prepared.split.test,
        &RunOptions::default(),
    )
    .unwrap_err();
    assert!(
        matches!(
            err,
            PipelineError::Interrupted {
                done: 0,
                source: GatewayError::MissingFixture { .. },
                ..
            }
        ),
        "{err}"
    );
}

fn qa_setup(
    noise: f64,
) -> (
    tempfile::TempDir,
    QaStore,
    TaskContext,
    Vec<ImageRecord>,
    dgrade_core::pipeline::GenerateReport,
) {
    let tree = builtin::task3();
    let grades = ["Else", "Kind", "Major", "Urgent"];
    let train: Vec<ImageRecord> = (0..12)
        .map(|i| record("3", &format!("q{i:02}"), grades[i % 4]))
        .collect();
    let sim = SimulatedModel::new()
        .with_tree(tree.clone())
        .with_records(&train)
        .with_endpoint("m", SimBehaviour::new().with_qa_noise(noise));
    let ctx = task3_ctx();
    let dir = tempfile::tempdir().unwrap();
    let store = QaStore::open(dir.path().join("qa")).unwrap();
    let report = generate_qas(
        &sim,
        &ModelEndpoint::new("m"),
        &ctx,
        &train,
        &store,
        &GenerateOptions {
            jobs: 4,
            ..Default::default()
        },
    )
    .unwrap();
    (dir, store, ctx, train, report)
}

fn truth_map(records: &[ImageRecord]) -> BTreeMap<String, Grade> {
    records.iter().map(|r| (r.id.clone(), r.grade.clone())).collect()
}

#[test]
fn generation_flags_bad_answers_and_keeps_all_pending() {
    let (_dir, store, ctx, train, report) = qa_setup(1.0);
    assert_eq!(report.created, 12);
    let pairs = store.list("3").unwrap();
    assert_eq!(pairs.len(), 12);
    assert!(pairs.iter().all(|p| p.review_state == ReviewState::Pending));
    let flags: Vec<&Vec<String>> = report.flagged.values().collect();
    assert_eq!(flags.len(), 12);
    assert!(flags.iter().any(|f| f.contains(&"parse failure".to_string())));
    assert!(flags.iter().all(|f| f.contains(&"grade mismatch".to_string())));
    assert_eq!(approve_all_verified(&store, &ctx.tree).unwrap(), 0);

    let again = generate_qas(
        &SimulatedModel::new(),
        &ModelEndpoint::new("m"),
        &ctx,
        &train,
        &store,
        &GenerateOptions::default(),
    )
    .unwrap();
    assert_eq!(again.skipped, 12);
}

#[test]
fn regenerate_replaces_with_new_pending_version() {
    let (_dir, store, ctx, train, _) = qa_setup(1.0);
    let sim = SimulatedModel::new()
        .with_tree(ctx.tree.clone())
        .with_records(&train)
        .with_endpoint("m", SimBehaviour::new());
    let opts = GenerateOptions {
        jobs: 2,
        regenerate: true,
        only: Some(vec!["q03".into()]),
    };
    let report = generate_qas(&sim, &ModelEndpoint::new("m"), &ctx, &train, &store, &opts).unwrap();
    assert_eq!(report.regenerated, 1);
    let p = store.get("3", "q03").unwrap().unwrap();
    assert_eq!(p.version, 2);
    assert!(p.machine_verified(&ctx.tree));
    assert_eq!(approve_all_verified(&store, &ctx.tree).unwrap(), 1);
}

#[test]
fn review_approve_edit_reject_and_export() {
    let (dir, store, ctx, train, report) = qa_setup(0.0);
    assert!(report.flagged.is_empty());

    // Break q02 (Major): flip the drooping answer so the trace leaves the tree.
    let mut broken = store.get("3", "q02").unwrap().unwrap();
    let three = broken
        .answer
        .steps
        .iter()
        .position(|s| s.node_id.as_str() == "3")
        .unwrap();
    let original = broken.answer.steps[three].answer;
    broken.answer.steps[three].answer = if original == AnswerLabel::Yes {
        AnswerLabel::No
    } else {
        AnswerLabel::Yes
    };
    store.update(broken.clone(), "test-corrupt").unwrap();
    assert!(!store.get("3", "q02").unwrap().unwrap().machine_verified(&ctx.tree));

    let pending = store.list("3").unwrap();
    let ids: Vec<&str> = pending.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids[..3], ["q00", "q01", "q02"]);
    let mut script = String::from("a looks right\nr blurry\n");
    script += "a\n"; // refused: invalid trace
    script += &format!("e {} {}\n", three + 1, original);
    script += "a fixed\n";
    script += "q\n";
    let mut out = Vec::new();
    let stats = review_session(&store, &ctx.tree, &BTreeMap::new(), &mut Cursor::new(script), &mut out).unwrap();
    let shown = String::from_utf8(out).unwrap();
    assert_eq!(
        (stats.approved, stats.rejected, stats.edited, stats.refused),
        (1, 1, 1, 1)
    );
    assert!(shown.contains("refused:"), "{shown}");
    assert!(shown.contains("check: ok"));
    assert_eq!(
        store.get("3", "q00").unwrap().unwrap().review_state,
        ReviewState::Approved
    );
    assert_eq!(
        store.get("3", "q01").unwrap().unwrap().review_state,
        ReviewState::Rejected
    );
    let edited = store.get("3", "q02").unwrap().unwrap();
    assert_eq!(edited.review_state, ReviewState::Edited);
    assert_eq!(edited.answer.grade, Grade::new("Major"));
    assert_eq!(edited.reviewer_note.as_deref(), Some("fixed"));

    let log = store.audit_log().unwrap();
    let actions: Vec<&str> = log.iter().map(|a| a.action.as_str()).collect();
    assert_eq!(actions.iter().filter(|a| **a == "generate").count(), 12);
    assert_eq!(actions[12..], ["test-corrupt", "approve", "reject", "edit"]);
    assert!(log.windows(2).all(|w| w[1].seq == w[0].seq + 1));

    assert_eq!(approve_all_verified(&store, &ctx.tree).unwrap(), 9);
    let out = dir.path().join("exports/task3.jsonl");
    let opts = ExportOptions {
        tasks: vec![(&ctx.tree, truth_map(&train))],
        seed: 5,
    };
    let exported = export_sft(&store, &opts, &out).unwrap();
    assert_eq!(exported.records, 11);
    assert_eq!(exported.tasks["3"].not_approved["rejected"], 1);
    assert!(exported.refused.is_empty());
    let lines: Vec<String> = fs::read_to_string(&out).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 11);
    assert!(!lines.iter().any(|l| l.contains("\"3/q01\"")));
    let first: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(first["id"], "3/q00");
    assert_eq!(first["messages"][0]["role"], "system");
    assert_eq!(first["messages"][1]["role"], "user");
    assert_eq!(first["messages"][2]["role"], "assistant");
    let answer: CoTResult =
        dgrade_core::gateway::parse_cot(first["messages"][2]["content"].as_str().unwrap(), &ctx.tree);
    assert_eq!(answer.parse_status, ParseStatus::Ok);
    assert_eq!(answer.grade, Grade::new("Else"));
    assert!(dir.path().join("exports/task3.manifest.json").exists());
}

#[test]
fn export_requires_an_approved_pair() {
    let (dir, store, ctx, train, _) = qa_setup(0.0);
    let opts = ExportOptions {
        tasks: vec![(&ctx.tree, truth_map(&train))],
        seed: 0,
    };
    let err = export_sft(&store, &opts, &dir.path().join("x.jsonl")).unwrap_err();
    assert!(matches!(err, PipelineError::NoApprovedPairs(t) if t == "3"));
}

#[test]
fn concurrent_writers_conflict() {
    let (_dir, store, _ctx, _train, _) = qa_setup(0.0);
    let p = store.get("3", "q05").unwrap().unwrap();
    let a = dgrade_core::pipeline::QAPair {
        review_state: ReviewState::Approved,
        ..p.clone()
    };
    let b = dgrade_core::pipeline::QAPair {
        review_state: ReviewState::Rejected,
        ..p
    };
    store.update(a, "approve").unwrap();
    let err = store.update(b, "reject").unwrap_err();
    assert!(matches!(err, PipelineError::VersionConflict { version: 2, .. }));
    assert_eq!(
        store.get("3", "q05").unwrap().unwrap().review_state,
        ReviewState::Approved
    );
}
