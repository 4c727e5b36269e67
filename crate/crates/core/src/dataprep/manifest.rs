use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, DataprepError, ImageDims, ImageRecord};
use crate::dtree::{AnswerLabel, Grade};

/// One entry of a task's dataset manifest (TOML, `[[records]]` tables).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the project root.
    pub path: String,
    pub grade: Grade,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reference: bool,
    /// Read from the image header when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    /// Expert answers along the decision tree; gives reference images
    /// their CoT annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<AnswerLabel>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task: String,
    #[serde(default)]
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Resolves dimensions and checks every record against `grades`.
    pub fn resolve(&self, root: &Path, grades: &[Grade]) -> Result<Vec<ImageRecord>, DataprepError> {
        let mut ids = HashSet::new();
        let mut out = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(DataprepError::DuplicateRecord(r.id.clone()));
            }
            if !grades.contains(&r.grade) {
                return Err(DataprepError::UnknownGrade {
                    record: r.id.clone(),
                    grade: r.grade.clone(),
                });
            }
            let dims = match (r.width, r.height) {
                (Some(w), Some(h)) if w > 0 && h > 0 => ImageDims::new(w, h),
                _ => {
                    let path = root.join(&r.path);
                    let (w, h) =
                        image::image_dimensions(&path).map_err(|source| DataprepError::Image { path, source })?;
                    ImageDims::new(w, h)
                }
            };
            for b in &r.boxes {
                if !b.fits(dims) || b.area() == 0 {
                    return Err(DataprepError::BoxOutOfBounds {
                        record: r.id.clone(),
                        bbox: *b,
                        dims,
                    });
                }
            }
            out.push(ImageRecord {
                id: r.id.clone(),
                task_id: self.task.clone(),
                path: r.path.clone(),
                dims,
                grade: r.grade.clone(),
                boxes: r.boxes.clone(),
                reference: r.reference,
            });
        }
        Ok(out)
    }
}

/// Reads a manifest and resolves its records. Relative image paths are
/// taken from `root`.
pub fn load_manifest(
    path: &Path,
    root: &Path,
    grades: &[Grade],
) -> Result<(Manifest, Vec<ImageRecord>), DataprepError> {
    let text = fs::read_to_string(path).map_err(|source| DataprepError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| DataprepError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let records = manifest.resolve(root, grades)?;
    Ok((manifest, records))
}
