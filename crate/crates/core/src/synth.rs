//! Deterministic synthetic project.
//!
//! [`generate`] writes a complete project for the three reference tasks:
//! procedurally drawn images with detector boxes, manifests with reference
//! traces, trees, templates and a configuration file. It then prepares the
//! tasks and records replay fixtures from a [`SimulatedModel`] whose
//! per-model grading accuracies are given by [`SynthModel`]s, so the whole
//! pipeline can run offline. Output bytes depend only on the spec.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Project, ProjectConfig, TaskConfig};
use crate::dataprep::{BoundingBox, Manifest, ManifestRecord};
use crate::dtree::{builtin, DecisionTree, Grade};
use crate::fsutil::atomic_write;
use crate::gateway::{AssetStore, ChatClient, FixtureStore, ModelEndpoint, ReplayClient, SimBehaviour, SimulatedModel};
use crate::pipeline::{
    prepare_task, prepared_path, run_grading_eval, select_sota, write_json, PipelineError, PrepInput, RunOptions,
    TaskContext,
};
use crate::promptkit::{Placement, PromptCase, PromptTemplates};

/// A simulated endpoint and its grading accuracy per (task, case).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthModel {
    pub id: String,
    pub accuracy: BTreeMap<String, [f64; 4]>,
}

/// Ten commercial models with their published accuracies, cases 1 to 4,
/// for tasks 1, 2 and 3.
pub fn commercial_models() -> Vec<SynthModel> {
    /// Model id, then cases 1 to 4 for each task.
    type Row = (&'static str, [f64; 4], [f64; 4], [f64; 4]);
    const TABLE: [Row; 10] = [
        (
            "GPT-4.1-2025-04-14",
            [53.24, 54.64, 74.85, 89.82],
            [43.49, 44.80, 46.25, 50.66],
            [43.86, 48.26, 50.50, 52.61],
        ),
        (
            "GPT-4o-2024-11-20",
            [54.37, 55.61, 74.47, 88.64],
            [30.18, 41.20, 46.98, 48.03],
            [42.50, 39.50, 48.95, 51.60],
        ),
        (
            "GPT-5-chat",
            [51.84, 51.24, 80.68, 90.26],
            [30.18, 45.72, 52.64, 56.58],
            [42.12, 39.50, 46.50, 45.00],
        ),
        (
            "Qwen-VL-plus",
            [53.99, 55.81, 73.53, 84.92],
            [48.64, 46.90, 50.08, 54.56],
            [40.23, 42.54, 32.86, 33.45],
        ),
        (
            "Qwen3-VL-235B-a22b",
            [61.18, 69.38, 81.53, 88.22],
            [38.55, 52.64, 48.64, 52.64],
            [43.50, 42.65, 45.79, 48.26],
        ),
        (
            "Qwen3-VL-plus",
            [61.80, 69.46, 75.11, 86.05],
            [28.29, 34.21, 36.78, 34.21],
            [45.50, 42.74, 49.28, 53.80],
        ),
        (
            "Gemini-2.5-pro",
            [53.28, 56.37, 69.41, 82.50],
            [43.49, 41.20, 46.98, 48.93],
            [41.52, 43.00, 49.86, 45.22],
        ),
        (
            "Hunyuan-t1-vision",
            [52.96, 53.98, 78.66, 89.03],
            [26.88, 28.29, 32.92, 30.18],
            [39.64, 42.66, 45.85, 47.70],
        ),
        (
            "Claude-opus-4.5-thinking",
            [51.44, 54.88, 71.08, 87.59],
            [29.65, 30.18, 32.92, 28.29],
            [44.21, 43.68, 44.72, 45.20],
        ),
        (
            "Qwen3-VL-8B",
            [51.68, 51.94, 56.77, 63.06],
            [33.96, 27.50, 29.88, 34.79],
            [22.63, 26.16, 29.39, 30.61],
        ),
    ];
    TABLE
        .iter()
        .map(|(id, t1, t2, t3)| SynthModel {
            id: id.to_string(),
            accuracy: [("1", t1), ("2", t2), ("3", t3)]
                .into_iter()
                .map(|(t, a)| (t.to_string(), a.map(|p| p / 100.0)))
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Training images per grade.
    pub per_grade: usize,
    /// Test images per task, spread evenly over its grades.
    pub test_size: usize,
    /// Every n-th image is larger than the resize limit.
    pub large_every: usize,
    /// Cases for which grading fixtures are recorded.
    pub cases: Vec<PromptCase>,
    pub models: Vec<SynthModel>,
    /// Share of wrong Q&A-generation answers.
    pub qa_noise: f64,
    pub jobs: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 2024,
            per_grade: 30,
            test_size: 250,
            large_every: 40,
            cases: vec![PromptCase::FULL],
            models: commercial_models(),
            qa_noise: 0.0,
            jobs: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthReport {
    pub config: PathBuf,
    /// Records per task.
    pub records: BTreeMap<String, usize>,
    pub fixtures: usize,
    /// Tournament winner per task, whose Q&A answers were recorded.
    pub sota: BTreeMap<String, String>,
}

pub const CONFIG_FILE: &str = "dgrade.toml";

const SMALL_DIMS: [(u32, u32); 4] = [(320, 240), (240, 320), (400, 300), (300, 300)];
const LARGE_DIMS: (u32, u32) = (1600, 1200);

fn trees() -> [(DecisionTree, &'static str); 3] {
    [
        (builtin::task1(), builtin::TASK1_SOURCE),
        (builtin::task2(), builtin::TASK2_SOURCE),
        (builtin::task3(), builtin::TASK3_SOURCE),
    ]
}

/// A smooth background with the defect region filled in a colour that
/// moves from green to red with the grade's severity.
fn render(w: u32, h: u32, b: BoundingBox, severity: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let base: [f64; 3] = [
        rng.random_range(70.0..170.0),
        rng.random_range(90.0..190.0),
        rng.random_range(110.0..210.0),
    ];
    let fill = [40.0 + 200.0 * severity, 200.0 - 150.0 * severity, 40.0];
    let stripe = rng.random_range(6..14u32);
    RgbImage::from_fn(w, h, |x, y| {
        let inside = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
        let shade = 0.75 + 0.25 * f64::from(y) / f64::from(h);
        let px = if inside {
            let s = if (x + y) / stripe % 2 == 0 { 1.0 } else { 0.85 };
            fill.map(|c| c * s)
        } else {
            base.map(|c| c * shade)
        };
        Rgb(px.map(|c| c.clamp(0.0, 255.0) as u8))
    })
}

fn grade_counts(grades: &[Grade], per_grade: usize, test_size: usize) -> Vec<usize> {
    let k = grades.len();
    (0..k)
        .map(|i| per_grade + test_size / k + usize::from(i < test_size % k))
        .collect()
}

fn write_task_data(root: &Path, tree: &DecisionTree, spec: &SynthSpec) -> Result<PathBuf, PipelineError> {
    let task = tree.task_id();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (u64::from(task.as_bytes()[0]) << 32));
    let paths = tree.enumerate_paths();
    let counts = grade_counts(tree.grades(), spec.per_grade, spec.test_size);
    let k = tree.grades().len();
    let mut records = Vec::new();
    let mut n = 0usize;
    for (gi, (grade, count)) in tree.grades().iter().zip(counts).enumerate() {
        let severity = if k > 1 { gi as f64 / (k - 1) as f64 } else { 0.0 };
        let grade_paths: Vec<_> = paths.iter().filter(|p| &p.grade == grade).collect();
        for i in 0..count {
            n += 1;
            let id = format!("t{task}-{}-{i:03}", grade.as_str().to_ascii_lowercase());
            let (w, h) = if spec.large_every > 0 && n.is_multiple_of(spec.large_every) {
                LARGE_DIMS
            } else {
                SMALL_DIMS[rng.random_range(0..SMALL_DIMS.len())]
            };
            let bw = rng.random_range(w / 6..w / 3);
            let bh = rng.random_range(h / 6..h / 3);
            let b = BoundingBox::new(rng.random_range(0..w - bw), rng.random_range(0..h - bh), bw, bh);
            let img = render(w, h, b, severity, &mut rng);
            let rel = format!("data/task{task}/images/{id}.png");
            let dest = root.join(&rel);
            let mut bytes = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
                .map_err(|e| PipelineError::Io {
                    path: dest.clone(),
                    source: std::io::Error::other(e),
                })?;
            atomic_write(&dest, &bytes).map_err(crate::pipeline::io_err(&dest))?;
            let reference = i == 0;
            records.push(ManifestRecord {
                id,
                path: rel,
                grade: grade.clone(),
                boxes: vec![b],
                reference,
                width: Some(w),
                height: Some(h),
                trace: reference.then(|| grade_paths[rng.random_range(0..grade_paths.len())].answers.clone()),
            });
        }
    }
    let manifest = Manifest {
        task: task.to_string(),
        records,
    };
    let path = PathBuf::from(format!("data/task{task}/manifest.toml"));
    let dest = root.join(&path);
    atomic_write(&dest, manifest.to_toml().as_bytes()).map_err(crate::pipeline::io_err(&dest))?;
    Ok(path)
}

fn write_text(root: &Path, rel: &str, text: &str) -> Result<PathBuf, PipelineError> {
    let dest = root.join(rel);
    atomic_write(&dest, text.as_bytes()).map_err(crate::pipeline::io_err(&dest))?;
    Ok(PathBuf::from(rel))
}

/// Writes the synthetic project under `root` and records its fixtures.
pub fn generate(root: &Path, spec: &SynthSpec) -> Result<SynthReport, PipelineError> {
    let mut tasks = Vec::new();
    for (tree, source) in trees() {
        let task = tree.task_id().to_string();
        let manifest = write_task_data(root, &tree, spec)?;
        let tree_path = write_text(root, &format!("trees/task{task}.dt"), source)?;
        let templates = PathBuf::from(format!("templates/task{task}"));
        PromptTemplates::builtin(&task)
            .save(&root.join(&templates))
            .map_err(|e| PipelineError::Io {
                path: e.path,
                source: e.source,
            })?;
        tasks.push(TaskConfig {
            id: task,
            manifest,
            tree: tree_path,
            grades: tree.grades().to_vec(),
            templates: Some(templates),
        });
    }
    let mut config = ProjectConfig {
        seed: spec.seed,
        paths: Default::default(),
        pipeline: Default::default(),
        lora: Default::default(),
        tasks,
        endpoints: spec.models.iter().map(|m| ModelEndpoint::new(&m.id)).collect(),
    };
    config.pipeline.per_grade = spec.per_grade;
    config.pipeline.jobs = spec.jobs;
    let project = Project {
        root: root.to_path_buf(),
        config,
    };
    let config_path = root.join(CONFIG_FILE);
    project.save(&config_path)?;
    let cfg = &project.config;

    let mut sim = SimulatedModel::new().with_assets(AssetStore::new(root));
    for m in &spec.models {
        let mut b = SimBehaviour::new().with_qa_noise(spec.qa_noise);
        for (task, accs) in &m.accuracy {
            for (case, acc) in PromptCase::ALL.iter().zip(accs) {
                b = b.with_accuracy(task, case.id(), *acc);
            }
        }
        sim = sim.with_endpoint(&m.id, b);
    }
    let mut prepared = Vec::new();
    for t in &cfg.tasks {
        let tree = project.tree(&t.id)?;
        let out = project.path(&cfg.paths.prepared);
        let p = prepare_task(&PrepInput {
            root,
            manifest: &project.path(&t.manifest),
            tree: &tree,
            out: &out,
            params: cfg.split_params(),
            jobs: spec.jobs,
        })?;
        write_json(&prepared_path(&out, &t.id), &p)?;
        sim = sim
            .with_tree(tree.clone())
            .with_records(p.split.train.iter().chain(&p.split.test))
            .with_cohort(&t.id, p.split.test.iter().map(|r| r.id.clone()));
        prepared.push((tree, p));
    }

    let fixtures = FixtureStore::new(project.path(&cfg.paths.fixtures));
    let client = ReplayClient::recording(fixtures, AssetStore::new(root), Arc::new(sim) as Arc<dyn ChatClient>);
    let opts = RunOptions {
        jobs: spec.jobs,
        ..Default::default()
    };
    let mut records = BTreeMap::new();
    let mut sota = BTreeMap::new();
    for (tree, p) in prepared {
        let task = tree.task_id().to_string();
        records.insert(task.clone(), p.images.len());
        let templates = project.templates(&task)?;
        let ctx = TaskContext::from_prepared(tree, templates, &p);
        let mut sota_runs = Vec::new();
        for &case in &spec.cases {
            for e in &cfg.endpoints {
                let run = run_grading_eval(&client, e, &ctx, case, Placement::Corresponding, &p.split.test, &opts)?;
                if case == cfg.pipeline.sota_case {
                    sota_runs.push(run);
                }
            }
        }
        if sota_runs.is_empty() {
            continue;
        }
        let winner = select_sota(&sota_runs)?.model;
        let endpoint = cfg.endpoint(&winner).expect("winner is configured");
        let qa_client = &client;
        crate::pipeline::pool(spec.jobs).install(|| {
            use rayon::prelude::*;
            p.split.train.par_iter().try_for_each(|r| {
                let bundle = ctx.qa_prompt(r, PromptCase::FULL, Placement::Corresponding)?;
                qa_client.complete(endpoint, &bundle)?;
                Ok::<_, PipelineError>(())
            })
        })?;
        sota.insert(task, winner);
    }
    Ok(SynthReport {
        config: config_path,
        records,
        fixtures: client.store().fingerprints()?.len(),
        sota,
    })
}
