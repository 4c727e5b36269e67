use std::path::{Path, PathBuf};

use dgrade_core::config::{Project, ProjectConfig, TaskConfig};
use dgrade_core::gateway::ModelEndpoint;
use dgrade_core::pipeline::{prepared_path, read_json, PreparedTask};

use crate::args::{Cli, TaskFilter};
use crate::failure::{Failure, Result};

const DEFAULT_CONFIG: &str = "dgrade.toml";

/// A loaded project with command-line overrides applied.
pub struct Session {
    pub project: Project,
    pub jobs: usize,
    pub dry_run: bool,
    pub json: bool,
}

impl Session {
    fn config_path(cli: &Cli) -> PathBuf {
        cli.config.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG))
    }

    fn finish(cli: &Cli, mut project: Project) -> Result<Self> {
        if let Some(seed) = cli.seed {
            project.config.seed = seed;
        }
        if let Some(jobs) = cli.jobs {
            if jobs == 0 {
                return Err(Failure::config("--jobs must be at least 1"));
            }
            project.config.pipeline.jobs = jobs;
        }
        let jobs = project.config.pipeline.jobs.max(1);
        Ok(Session {
            project,
            jobs,
            dry_run: cli.dry_run,
            json: cli.json,
        })
    }

    pub fn load(cli: &Cli) -> Result<Self> {
        let path = Self::config_path(cli);
        if !path.exists() {
            return Err(Failure::config(format!(
                "configuration file {} does not exist (pass --config or run `dgrade synth`)",
                path.display()
            )));
        }
        Self::finish(cli, Project::load(&path)?)
    }

    /// Like [`Session::load`], but an absent default configuration yields
    /// built-in parameters rooted at the working directory.
    pub fn load_or_default(cli: &Cli) -> Result<Self> {
        let path = Self::config_path(cli);
        if cli.config.is_none() && !path.exists() {
            let project = Project {
                root: PathBuf::from("."),
                config: ProjectConfig {
                    seed: 2024,
                    paths: Default::default(),
                    pipeline: Default::default(),
                    lora: Default::default(),
                    tasks: Vec::new(),
                    endpoints: Vec::new(),
                },
            };
            return Self::finish(cli, project);
        }
        Self::load(cli)
    }

    pub fn cfg(&self) -> &ProjectConfig {
        &self.project.config
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.project.path(rel)
    }

    /// Configured tasks, restricted by `--task`.
    pub fn tasks(&self, filter: &TaskFilter) -> Result<Vec<&TaskConfig>> {
        for t in &filter.tasks {
            if self.cfg().task(t).is_none() {
                return Err(Failure::config(format!("task {t} is not configured")));
            }
        }
        Ok(self
            .cfg()
            .tasks
            .iter()
            .filter(|t| filter.tasks.is_empty() || filter.tasks.contains(&t.id))
            .collect())
    }

    /// Configured endpoints, restricted to `ids` when non-empty.
    pub fn endpoints(&self, ids: &[String]) -> Result<Vec<&ModelEndpoint>> {
        for id in ids {
            if self.cfg().endpoint(id).is_none() {
                return Err(Failure::config(format!("model {id} is not configured")));
            }
        }
        Ok(self
            .cfg()
            .endpoints
            .iter()
            .filter(|e| ids.is_empty() || ids.contains(&e.id))
            .collect())
    }

    pub fn prepared_file(&self, task: &str) -> PathBuf {
        prepared_path(&self.path(&self.cfg().paths.prepared), task)
    }

    pub fn prepared(&self, task: &str) -> Result<PreparedTask> {
        let path = self.prepared_file(task);
        if !path.exists() {
            return Err(Failure::prerequisite(format!(
                "task {task} is not prepared; run `dgrade prep --task {task}` first"
            )));
        }
        Ok(read_json(&path)?)
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.path(&self.cfg().paths.runs)
    }

    /// `<runs>/<task>/sota.json`
    pub fn sota_file(&self, task: &str) -> PathBuf {
        self.runs_dir().join(task).join("sota.json")
    }
}
