use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pool, PipelineError};
use crate::cot::CoTResult;
use crate::dataprep::{
    load_manifest, overlay_boxes, resize_image, stratified_split, BoundingBox, DatasetSplit, OverlayStyle, SplitParams,
};
use crate::dtree::DecisionTree;
use crate::fsutil::relative_slash;

pub struct PrepInput<'a> {
    /// Project root; manifest image paths are relative to it.
    pub root: &'a Path,
    pub manifest: &'a Path,
    pub tree: &'a DecisionTree,
    /// Output directory for resized images and overlays.
    pub out: &'a Path,
    pub params: SplitParams,
    pub jobs: usize,
}

/// Where one record's images live after preparation (root-relative).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedImage {
    pub original: String,
    pub resized: String,
    pub overlay: String,
}

/// A prepared task. Records in the split point at their overlay images,
/// which are what prompts show.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedTask {
    pub task: String,
    pub split: DatasetSplit,
    pub images: BTreeMap<String, PreparedImage>,
    pub reference_cots: BTreeMap<String, CoTResult>,
    pub dropped_boxes: Vec<(String, BoundingBox)>,
}

/// Resizes every manifest image, draws detector boxes, splits the records
/// and derives the references' CoTs from their manifest traces.
pub fn prepare_task(input: &PrepInput<'_>) -> Result<PreparedTask, PipelineError> {
    let tree = input.tree;
    let (manifest, records) = load_manifest(input.manifest, input.root, tree.grades())?;
    let style = OverlayStyle::for_task(tree.task_id());

    let processed = pool(input.jobs).install(|| {
        records
            .par_iter()
            .map(|r| {
                let resized = resize_image(r, input.root, input.out)?;
                let overlay: PathBuf = overlay_boxes(&resized.record, input.root, input.out, style)?;
                Ok::<_, PipelineError>((r.path.clone(), resized, relative_slash(input.root, &overlay)))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut images = BTreeMap::new();
    let mut dropped_boxes = Vec::new();
    let mut prepared = Vec::with_capacity(processed.len());
    for (original, outcome, overlay) in processed {
        let mut rec = outcome.record;
        images.insert(
            rec.id.clone(),
            PreparedImage {
                original,
                resized: rec.path.clone(),
                overlay: overlay.clone(),
            },
        );
        dropped_boxes.extend(outcome.dropped.into_iter().map(|b| (rec.id.clone(), b)));
        rec.path = overlay;
        prepared.push(rec);
    }

    let split = stratified_split(tree.task_id(), tree.grades(), &prepared, input.params)?;
    for w in &split.warnings {
        log::warn!("task {}: {w}", tree.task_id());
    }

    let paths = tree.enumerate_paths();
    let mut reference_cots = BTreeMap::new();
    for r in &split.references {
        let Some(trace) = manifest
            .records
            .iter()
            .find(|m| m.id == r.id)
            .and_then(|m| m.trace.as_ref())
        else {
            continue;
        };
        let path = paths
            .iter()
            .find(|p| &p.answers == trace)
            .ok_or_else(|| PipelineError::ReferenceTrace {
                record: r.id.clone(),
                message: "trace is not a root-to-leaf path of the tree".into(),
            })?;
        if path.grade != r.grade {
            return Err(PipelineError::ReferenceTrace {
                record: r.id.clone(),
                message: format!("trace leads to {} but the record is graded {}", path.grade, r.grade),
            });
        }
        reference_cots.insert(r.id.clone(), CoTResult::from_path(path));
    }

    Ok(PreparedTask {
        task: manifest.task,
        split,
        images,
        reference_cots,
        dropped_boxes,
    })
}

/// `<prepared>/<task>/prepared.json`
pub fn prepared_path(prepared_dir: &Path, task: &str) -> PathBuf {
    prepared_dir.join(task).join("prepared.json")
}
