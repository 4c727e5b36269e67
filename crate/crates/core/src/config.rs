//! Project configuration: one TOML file naming the tasks, endpoints,
//! pipeline parameters, toy-kernel parameters and output directories.
//!
//! Paths in the file are relative to the directory holding it.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataprep::{load_manifest, SplitParams};
use crate::dtree::{parse_tree, DecisionTree, Grade};
use crate::fsutil::{atomic_write, sha256_hex};
use crate::gateway::ModelEndpoint;
use crate::promptkit::{Placement, PromptCase, PromptTemplates};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{what} {path} does not exist")]
    MissingFile { what: String, path: PathBuf },
    #[error("task {task}: {message}")]
    Task { task: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub id: String,
    pub manifest: PathBuf,
    pub tree: PathBuf,
    /// Must equal the tree's grade set, in order.
    pub grades: Vec<Grade>,
    /// Template directory; built-in text is used for absent files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub prepared: PathBuf,
    pub fixtures: PathBuf,
    pub runs: PathBuf,
    pub qa: PathBuf,
    pub exports: PathBuf,
    pub reports: PathBuf,
    pub toy: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            prepared: "prepared".into(),
            fixtures: "fixtures".into(),
            runs: "runs".into(),
            qa: "qa".into(),
            exports: "exports".into(),
            reports: "reports".into(),
            toy: "toy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Training images per grade.
    pub per_grade: usize,
    pub refs_per_grade: usize,
    /// Prompt case for evaluation runs.
    pub case: PromptCase,
    pub placement: Placement,
    /// Case whose accuracies decide the tournament.
    pub sota_case: PromptCase,
    /// Concurrent requests per stage.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            per_grade: 30,
            refs_per_grade: 1,
            case: PromptCase::FULL,
            placement: Placement::Corresponding,
            sota_case: PromptCase::FULL,
            jobs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub rank: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fine-tuned stages, any of `VE`, `MMA`, `LLM`.
    pub modules: Vec<String>,
    /// Samples in the synthetic training corpus.
    pub samples: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            d_llm: 16,
            layers: 1,
            heads: 2,
            vocab: 24,
            rank: 4,
            alpha: 16.0,
            learning_rate: 0.003,
            epochs: 500,
            batch_size: 2,
            modules: vec!["LLM".into()],
            samples: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    /// Every seeded step derives from this value.
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    pub tasks: Vec<TaskConfig>,
    pub endpoints: Vec<ModelEndpoint>,
}

/// A configuration together with the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Project {
    pub root: PathBuf,
    pub config: ProjectConfig,
}

impl ProjectConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: ProjectConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.check_shape()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that do not touch the filesystem.
    fn check_shape(&self) -> Result<(), ConfigError> {
        if self.tasks.is_empty() {
            return Err(ConfigError::Invalid("no tasks configured".into()));
        }
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.id.as_str()) {
                return Err(ConfigError::Invalid(format!("task {} configured twice", t.id)));
            }
        }
        let mut ids = BTreeSet::new();
        for e in &self.endpoints {
            if !ids.insert(e.id.as_str()) {
                return Err(ConfigError::Invalid(format!("endpoint {} configured twice", e.id)));
            }
        }
        if self.pipeline.per_grade == 0 {
            return Err(ConfigError::Invalid("pipeline.per_grade must be positive".into()));
        }
        if self.lora.modules.is_empty() {
            return Err(ConfigError::Invalid("lora.modules must name at least one stage".into()));
        }
        Ok(())
    }

    pub fn task(&self, id: &str) -> Option<&TaskConfig> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn endpoint(&self, id: &str) -> Option<&ModelEndpoint> {
        self.endpoints.iter().find(|e| e.id == id)
    }

    pub fn split_params(&self) -> SplitParams {
        SplitParams {
            per_grade: self.pipeline.per_grade,
            refs_per_grade: self.pipeline.refs_per_grade,
            seed: self.seed,
        }
    }

    /// Hash of everything that determines a grading run's prompts and
    /// answers; runs made under another hash are not resumed.
    pub fn run_hash(&self, task: &str, endpoint: &str) -> String {
        let doc = serde_json::json!({
            "seed": self.seed,
            "per_grade": self.pipeline.per_grade,
            "refs_per_grade": self.pipeline.refs_per_grade,
            "task": self.task(task),
            "endpoint": self.endpoint(endpoint),
        });
        sha256_hex(doc.to_string().as_bytes())
    }
}

impl Project {
    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config = ProjectConfig::from_toml(&text, path)?;
        let root = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let project = Project { root, config };
        project.validate()?;
        Ok(project)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        atomic_write(path, self.config.to_toml().as_bytes()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    fn existing(&self, what: &str, rel: &Path) -> Result<PathBuf, ConfigError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(ConfigError::MissingFile {
                what: what.into(),
                path: p,
            })
        }
    }

    /// Referenced files exist, each tree parses and belongs to its task,
    /// and the manifest, tree and configured grade sets agree.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for t in &self.config.tasks {
            let task_err = |message: String| ConfigError::Task {
                task: t.id.clone(),
                message,
            };
            let tree = self.tree(&t.id)?;
            if tree.grades() != t.grades.as_slice() {
                return Err(task_err(format!(
                    "configured grades [{}] differ from the tree's [{}]",
                    join(&t.grades),
                    join(tree.grades())
                )));
            }
            let manifest = self.existing("manifest", &t.manifest)?;
            let (m, records) =
                load_manifest(&manifest, &self.root, tree.grades()).map_err(|e| task_err(e.to_string()))?;
            if m.task != t.id {
                return Err(task_err(format!("manifest belongs to task {}", m.task)));
            }
            let seen: BTreeSet<&Grade> = records.iter().map(|r| &r.grade).collect();
            let missing: Vec<Grade> = t.grades.iter().filter(|g| !seen.contains(g)).cloned().collect();
            if !missing.is_empty() {
                return Err(task_err(format!(
                    "manifest has no records of grade(s) {}",
                    join(&missing)
                )));
            }
            if let Some(dir) = &t.templates {
                self.existing("template directory", dir)?;
            }
        }
        Ok(())
    }

    pub fn task(&self, id: &str) -> Result<&TaskConfig, ConfigError> {
        self.config
            .task(id)
            .ok_or_else(|| ConfigError::Invalid(format!("task {id} is not configured")))
    }

    pub fn tree(&self, task: &str) -> Result<DecisionTree, ConfigError> {
        let t = self.task(task)?;
        let path = self.existing("tree", &t.tree)?;
        let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        let tree = parse_tree(&text).map_err(|e| ConfigError::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if tree.task_id() != t.id {
            return Err(ConfigError::Task {
                task: t.id.clone(),
                message: format!("tree {} is for task {}", path.display(), tree.task_id()),
            });
        }
        Ok(tree)
    }

    pub fn templates(&self, task: &str) -> Result<PromptTemplates, ConfigError> {
        let t = self.task(task)?;
        match &t.templates {
            Some(dir) => PromptTemplates::load(&self.path(dir), task).map_err(|e| ConfigError::Io {
                path: e.path,
                source: e.source,
            }),
            None => Ok(PromptTemplates::builtin(task)),
        }
    }
}

fn join(grades: &[Grade]) -> String {
    grades.iter().map(Grade::as_str).collect::<Vec<_>>().join(", ")
}
