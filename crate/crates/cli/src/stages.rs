//! Pipeline stages: synth, prep, eval, select, genqa, review, export and
//! report.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use dgrade_core::evalharness::{self, Layout, ReportRow};
use dgrade_core::gateway::{AssetStore, ChatClient, FixtureStore, HttpClient, ReplayClient, ReqwestTransport};
use dgrade_core::pipeline::{
    approve_all_verified, export_sft, generate_qas, prepare_task, read_json, review_session, run_grading_eval,
    run_path, select_sota, write_json, EvalRun, ExportOptions, GenerateOptions, PipelineError, PrepInput, QaStore,
    RunOptions, SotaSelection, TaskContext,
};
use dgrade_core::promptkit::{Placement, PromptCase};
use dgrade_core::synth::{self, SynthSpec};
use dgrade_core::Grade;
use serde_json::json;

use crate::args::{
    Cli, EvalArgs, ExportArgs, GenqaArgs, ReportArgs, ReviewArgs, SelectArgs, SourceArgs, SynthArgs, TaskFilter,
};
use crate::failure::{Context, Failure, Result};
use crate::session::Session;
use crate::Output;

fn case_arg(case: Option<u8>, default: PromptCase) -> Result<PromptCase> {
    match case {
        Some(c) => PromptCase::new(c).map_err(Failure::config),
        None => Ok(default),
    }
}

fn client(s: &Session, source: SourceArgs) -> Result<Box<dyn ChatClient>> {
    let store = FixtureStore::new(s.path(&s.cfg().paths.fixtures));
    let assets = AssetStore::new(&s.project.root);
    if source.record {
        let transport = ReqwestTransport::new(Duration::from_secs(120)).map_err(Failure::runtime)?;
        let live = HttpClient::new(Box::new(transport), AssetStore::new(&s.project.root));
        return Ok(Box::new(ReplayClient::recording(store, assets, Arc::new(live))));
    }
    Ok(Box::new(ReplayClient::strict(store, assets)))
}

fn source_name(source: SourceArgs) -> &'static str {
    if source.record {
        "live endpoints, recording fixtures"
    } else {
        "replay fixtures"
    }
}

pub fn synth(cli: &Cli, a: &SynthArgs) -> Result<Output> {
    let mut spec = SynthSpec::default();
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        spec.jobs = jobs.max(1);
    }
    if let Some(n) = a.per_grade {
        spec.per_grade = n;
    }
    if let Some(n) = a.test_size {
        spec.test_size = n;
    }
    if let Some(q) = a.qa_noise {
        if !(0.0..=1.0).contains(&q) {
            return Err(Failure::config("--qa-noise must lie in [0, 1]"));
        }
        spec.qa_noise = q;
    }
    if a.all_cases {
        spec.cases = PromptCase::ALL.to_vec();
    }
    if cli.dry_run {
        return Ok(Output::plan(vec![
            format!(
                "write trees, templates and {} configuration under {}",
                synth::CONFIG_FILE,
                a.out.display()
            ),
            format!(
                "render {} training images per grade and {} test images per task",
                spec.per_grade, spec.test_size
            ),
            "prepare every task".into(),
            format!(
                "record grading fixtures for {} models over cases {:?}",
                spec.models.len(),
                spec.cases.iter().map(|c| c.id()).collect::<Vec<_>>()
            ),
            "record Q&A generation fixtures for each task's most accurate model".into(),
        ]));
    }
    fs::create_dir_all(&a.out).context(format!("creating {}", a.out.display()))?;
    let report = synth::generate(&a.out, &spec)?;
    let mut text = format!("wrote {}\n", report.config.display());
    for (task, n) in &report.records {
        text.push_str(&format!(
            "task {task}: {n} images, tournament winner {}\n",
            report.sota.get(task).map(String::as_str).unwrap_or("-")
        ));
    }
    text.push_str(&format!("{} fixtures recorded", report.fixtures));
    Ok(Output::new(text, serde_json::to_value(&report)?))
}

pub fn prep(s: &Session, filter: &TaskFilter) -> Result<Output> {
    let tasks = s.tasks(filter)?;
    let out = s.path(&s.cfg().paths.prepared);
    if s.dry_run {
        return Ok(Output::plan(
            tasks
                .iter()
                .map(|t| {
                    format!(
                        "prepare task {} from {} into {}",
                        t.id,
                        t.manifest.display(),
                        s.prepared_file(&t.id).display()
                    )
                })
                .collect(),
        ));
    }
    let mut rows = Vec::new();
    let mut text = String::new();
    for t in tasks {
        let tree = s.project.tree(&t.id)?;
        let p = prepare_task(&PrepInput {
            root: &s.project.root,
            manifest: &s.path(&t.manifest),
            tree: &tree,
            out: &out,
            params: s.cfg().split_params(),
            jobs: s.jobs,
        })?;
        write_json(&s.prepared_file(&t.id), &p)?;
        text.push_str(&format!(
            "task {}: {} train ({} references), {} test, {} boxes dropped\n",
            t.id,
            p.split.train.len(),
            p.split.references.len(),
            p.split.test.len(),
            p.dropped_boxes.len()
        ));
        for w in &p.split.warnings {
            text.push_str(&format!("  warning: {w}\n"));
        }
        rows.push(json!({
            "task": t.id,
            "train": p.split.train.len(),
            "references": p.split.references.len(),
            "test": p.split.test.len(),
            "dropped_boxes": p.dropped_boxes.len(),
            "shortfalls": p.split.shortfalls,
            "warnings": p.split.warnings,
        }));
    }
    Ok(Output::new(text.trim_end(), json!({ "tasks": rows })))
}

fn context(s: &Session, task: &str) -> Result<(TaskContext, dgrade_core::pipeline::PreparedTask)> {
    let prepared = s.prepared(task)?;
    let tree = s.project.tree(task)?;
    let templates = s.project.templates(task)?;
    Ok((TaskContext::from_prepared(tree, templates, &prepared), prepared))
}

pub fn eval(s: &Session, a: &EvalArgs) -> Result<Output> {
    let tasks = s.tasks(&a.filter)?;
    let endpoints = s.endpoints(&a.models)?;
    let case = case_arg(a.case, s.cfg().pipeline.case)?;
    let placement = match &a.placement {
        Some(p) => p.parse::<Placement>().map_err(Failure::config)?,
        None => s.cfg().pipeline.placement,
    };
    if s.dry_run {
        let mut plan = Vec::new();
        for t in &tasks {
            for e in &endpoints {
                plan.push(format!(
                    "grade the task {} test set with {} (case {case}, {placement}) from {} into {}",
                    t.id,
                    e.id,
                    source_name(a.source),
                    run_path(&s.runs_dir(), &t.id, &e.id, case, placement).display()
                ));
            }
        }
        return Ok(Output::plan(plan));
    }
    let client = client(s, a.source)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    for t in tasks {
        let (ctx, prepared) = context(s, &t.id)?;
        for e in &endpoints {
            let opts = RunOptions {
                jobs: s.jobs,
                config_hash: s.cfg().run_hash(&t.id, &e.id),
                runs_dir: Some(s.runs_dir()),
            };
            let run = run_grading_eval(client.as_ref(), e, &ctx, case, placement, &prepared.split.test, &opts)
                .context(format!("task {} with {}", t.id, e.id))?;
            let sm = run.summary.expect("a complete run has a summary");
            text.push_str(&format!(
                "task {} {:<20} case {case} {placement}: acc {:.4} mf1 {:.4} ({}/{})\n",
                t.id, e.id, sm.acc, sm.mf1, sm.correct, sm.n
            ));
            rows.push(json!({
                "task": t.id,
                "model": e.id,
                "case": case.id(),
                "placement": placement,
                "acc": sm.acc,
                "mf1": sm.mf1,
                "correct": sm.correct,
                "n": sm.n,
                "unparsed": sm.unparsed,
                "run": run_path(&s.runs_dir(), &t.id, &e.id, case, placement),
            }));
        }
    }
    Ok(Output::new(text.trim_end(), json!({ "runs": rows })))
}

pub fn select(s: &Session, a: &SelectArgs) -> Result<Output> {
    let tasks = s.tasks(&a.filter)?;
    let case = case_arg(a.case, s.cfg().pipeline.sota_case)?;
    let placement = s.cfg().pipeline.placement;
    if s.dry_run {
        return Ok(Output::plan(
            tasks
                .iter()
                .map(|t| {
                    format!(
                        "rank the case {case} runs of {} models on task {} and write {}",
                        s.cfg().endpoints.len(),
                        t.id,
                        s.sota_file(&t.id).display()
                    )
                })
                .collect(),
        ));
    }
    let mut rows = Vec::new();
    let mut text = String::new();
    for t in tasks {
        let mut runs = Vec::new();
        for e in &s.cfg().endpoints {
            let path = run_path(&s.runs_dir(), &t.id, &e.id, case, placement);
            if !path.exists() {
                return Err(Failure::prerequisite(format!(
                    "no case {case} run of {} on task {}; run `dgrade eval --task {} --case {case}` first",
                    e.id, t.id, t.id
                )));
            }
            let run: EvalRun = read_json(&path)?;
            if !run.complete {
                return Err(Failure::prerequisite(format!(
                    "the run of {} on task {} is incomplete; rerun `dgrade eval --task {}`",
                    e.id, t.id, t.id
                )));
            }
            runs.push(run);
        }
        let sel = select_sota(&runs)?;
        write_json(&s.sota_file(&t.id), &sel)?;
        let best = &sel.ranking[0];
        text.push_str(&format!(
            "task {}: {} (acc {:.4}, {}/{})\n",
            t.id,
            sel.model,
            best.acc(),
            best.correct,
            best.n
        ));
        rows.push(serde_json::to_value(&sel)?);
    }
    Ok(Output::new(text.trim_end(), json!({ "selections": rows })))
}

fn selection(s: &Session, task: &str) -> Result<SotaSelection> {
    let path = s.sota_file(task);
    if !path.exists() {
        return Err(Failure::prerequisite(format!(
            "task {task} has no selected model; run `dgrade select --task {task}` first"
        )));
    }
    Ok(read_json(&path)?)
}

fn qa_store(s: &Session) -> Result<QaStore> {
    Ok(QaStore::open(s.path(&s.cfg().paths.qa))?)
}

pub fn genqa(s: &Session, a: &GenqaArgs) -> Result<Output> {
    let tasks = s.tasks(&a.filter)?;
    let mut selections = Vec::new();
    for t in &tasks {
        selections.push(selection(s, &t.id)?);
    }
    if s.dry_run {
        return Ok(Output::plan(
            tasks
                .iter()
                .zip(&selections)
                .map(|(t, sel)| {
                    format!(
                        "generate Q&A pairs for the task {} training set with {} from {}{}",
                        t.id,
                        sel.model,
                        source_name(a.source),
                        if a.regenerate { ", replacing existing pairs" } else { "" }
                    )
                })
                .collect(),
        ));
    }
    let client = client(s, a.source)?;
    let store = qa_store(s)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    let mut failed = 0;
    for (t, sel) in tasks.iter().zip(&selections) {
        let endpoint = s
            .cfg()
            .endpoint(&sel.model)
            .ok_or_else(|| Failure::config(format!("selected model {} is no longer configured", sel.model)))?;
        let (ctx, prepared) = context(s, &t.id)?;
        let opts = GenerateOptions {
            jobs: s.jobs,
            regenerate: a.regenerate,
            only: None,
        };
        let report = generate_qas(client.as_ref(), endpoint, &ctx, &prepared.split.train, &store, &opts)?;
        text.push_str(&format!(
            "task {} with {}: {} created, {} regenerated, {} kept, {} flagged, {} failed\n",
            t.id,
            sel.model,
            report.created,
            report.regenerated,
            report.skipped,
            report.flagged.len(),
            report.failures.len()
        ));
        for (id, why) in &report.failures {
            text.push_str(&format!("  {id}: {why}\n"));
        }
        failed += report.failures.len();
        rows.push(json!({"task": t.id, "model": sel.model, "report": report}));
    }
    if failed > 0 {
        eprint!("{text}");
        return Err(Failure::runtime(format!("{failed} Q&A requests failed")));
    }
    Ok(Output::new(text.trim_end(), json!({ "tasks": rows })))
}

pub fn review(s: &Session, a: &ReviewArgs) -> Result<Output> {
    let tasks = s.tasks(&a.filter)?;
    if s.dry_run {
        let how = if a.approve_verified {
            "approve every pending pair that passes the machine check"
        } else {
            "review pending pairs interactively"
        };
        return Ok(Output::plan(
            tasks.iter().map(|t| format!("task {}: {how}", t.id)).collect(),
        ));
    }
    let store = qa_store(s)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    for t in tasks {
        let pairs = store.list(&t.id)?;
        if pairs.is_empty() {
            return Err(Failure::prerequisite(format!(
                "task {} has no Q&A pairs; run `dgrade genqa --task {}` first",
                t.id, t.id
            )));
        }
        let tree = s.project.tree(&t.id)?;
        if a.approve_verified {
            let n = approve_all_verified(&store, &tree)?;
            text.push_str(&format!("task {}: {n} pairs approved\n", t.id));
            rows.push(json!({"task": t.id, "approved": n}));
        } else {
            let prepared = s.prepared(&t.id)?;
            let stdin = io::stdin();
            let mut input = stdin.lock();
            // Keep stdout clean for the JSON summary.
            let stats = if s.json {
                review_session(&store, &tree, &prepared.images, &mut input, &mut io::stderr())?
            } else {
                review_session(&store, &tree, &prepared.images, &mut input, &mut io::stdout())?
            };
            io::stdout().flush()?;
            text.push_str(&format!(
                "task {}: {} approved, {} edited, {} rejected, {} skipped, {} refused\n",
                t.id, stats.approved, stats.edited, stats.rejected, stats.skipped, stats.refused
            ));
            rows.push(json!({"task": t.id, "stats": stats}));
        }
    }
    Ok(Output::new(text.trim_end(), json!({ "tasks": rows })))
}

pub fn export(s: &Session, a: &ExportArgs) -> Result<Output> {
    let tasks = s.tasks(&a.filter)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| s.path(&s.cfg().paths.exports).join("sft.jsonl"));
    if s.dry_run {
        return Ok(Output::plan(vec![format!(
            "write approved pairs of tasks {} to {} (shuffled with seed {})",
            tasks.iter().map(|t| t.id.as_str()).collect::<Vec<_>>().join(", "),
            out.display(),
            s.cfg().seed
        )]));
    }
    let mut trees = Vec::new();
    for t in &tasks {
        let prepared = s.prepared(&t.id)?;
        let truth: BTreeMap<String, Grade> = prepared
            .split
            .train
            .iter()
            .map(|r| (r.id.clone(), r.grade.clone()))
            .collect();
        trees.push((s.project.tree(&t.id)?, truth));
    }
    let opts = ExportOptions {
        tasks: trees.iter().map(|(tree, truth)| (tree, truth.clone())).collect(),
        seed: s.cfg().seed,
    };
    let store = qa_store(s)?;
    let report = match export_sft(&store, &opts, &out) {
        Err(PipelineError::NoApprovedPairs(task)) => {
            return Err(Failure::prerequisite(format!(
                "task {task} has no approved pairs; run `dgrade review --task {task}` first"
            )))
        }
        other => other?,
    };
    let mut text = format!(
        "{} records -> {}\nsha256 {}\n",
        report.records, report.dataset, report.sha256
    );
    for (task, c) in &report.tasks {
        text.push_str(&format!("task {task}: {} records\n", c.records));
    }
    for r in &report.refused {
        text.push_str(&format!("refused {}/{}: {}\n", r.task, r.pair, r.reason));
    }
    Ok(Output::new(text.trim_end(), serde_json::to_value(&report)?))
}

fn saved_runs(runs_dir: &Path) -> Result<Vec<EvalRun>> {
    let mut runs = Vec::new();
    if !runs_dir.exists() {
        return Ok(runs);
    }
    let mut task_dirs: Vec<_> = fs::read_dir(runs_dir)?.collect::<io::Result<_>>()?;
    task_dirs.sort_by_key(|e| e.path());
    for dir in task_dirs.into_iter().filter(|e| e.path().is_dir()) {
        let mut files: Vec<_> = fs::read_dir(dir.path())?.collect::<io::Result<_>>()?;
        files.sort_by_key(|e| e.path());
        for f in files {
            let path = f.path();
            if path.extension().is_some_and(|x| x == "json") && path.file_name().is_some_and(|n| n != "sota.json") {
                runs.push(read_json(&path)?);
            }
        }
    }
    Ok(runs)
}

pub fn report(s: &Session, a: &ReportArgs) -> Result<Output> {
    let layout: Layout = a.layout.parse().map_err(Failure::config)?;
    let tasks: Vec<String> = s.tasks(&a.filter)?.iter().map(|t| t.id.clone()).collect();
    let dir = s.path(&s.cfg().paths.reports);
    let stem = a.layout.replace('_', "-");
    if s.dry_run {
        return Ok(Output::plan(vec![format!(
            "tabulate completed runs under {} as {} into {}",
            s.runs_dir().display(),
            a.layout,
            dir.join(format!("{stem}.md")).display()
        )]));
    }
    let rows: Vec<ReportRow> = saved_runs(&s.runs_dir())?
        .iter()
        .filter(|r| tasks.contains(&r.task))
        .filter_map(EvalRun::report_row)
        .collect();
    if rows.is_empty() {
        return Err(Failure::prerequisite(
            "no completed runs to report; run `dgrade eval` first",
        ));
    }
    let rep = evalharness::report(&rows, layout)?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(format!("{stem}.csv")), &rep.csv)?;
    fs::write(dir.join(format!("{stem}.md")), &rep.markdown)?;
    Ok(Output::new(
        rep.markdown.trim_end(),
        json!({"rows": rows, "markdown": rep.markdown, "csv": rep.csv}),
    ))
}
