//! Image preprocessing and few-shot dataset preparation.
//!
//! Images whose longer side reaches 1280 px are scaled down so that the
//! longer side is exactly 1280 px; detector boxes follow the same scaling.
//! Records are then split per grade into a small training budget (30 per
//! grade by default), one reference image per grade and a test remainder.

mod image_ops;
mod manifest;
mod split;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dtree::Grade;

pub use image_ops::{overlay_boxes, resize_image, OverlayStyle, ResizeOutcome};
pub use manifest::{load_manifest, Manifest, ManifestRecord};
pub use split::{stratified_split, DatasetSplit, Shortfall, SplitParams};

/// Longer-side limit in pixels.
pub const MAX_SIDE: u32 = 1280;

#[derive(Debug, thiserror::Error)]
pub enum DataprepError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("record {record}: box {bbox} does not fit in {dims}")]
    BoxOutOfBounds {
        record: String,
        bbox: BoundingBox,
        dims: ImageDims,
    },
    #[error("record {record}: grade {grade} is not in the task's grade set")]
    UnknownGrade { record: String, grade: Grade },
    #[error("record {record}: file is {actual} but the manifest says {declared}")]
    DimsMismatch {
        record: String,
        declared: ImageDims,
        actual: ImageDims,
    },
    #[error("grade {0} has no records; cannot build a stratified split")]
    EmptyGrade(Grade),
    #[error("duplicate record id {0}")]
    DuplicateRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width >= 1 && height >= 1, "image dims must be positive");
        ImageDims { width, height }
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// `round(num / den)` with halves rounded up, in exact integer arithmetic.
fn div_round_half_up(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// Scales the longer side to [`MAX_SIDE`] when it reaches the limit; smaller
/// images are returned unchanged. The shorter side is rounded half-up and
/// never drops below 1. Square images take the width branch.
pub fn resize_dims(dims: ImageDims) -> ImageDims {
    let ImageDims { width, height } = dims;
    if width.max(height) < MAX_SIDE {
        return dims;
    }
    let side = u64::from(MAX_SIDE);
    if width >= height {
        let h = div_round_half_up(u64::from(height) * side, u64::from(width)).max(1);
        ImageDims::new(MAX_SIDE, h as u32)
    } else {
        let w = div_round_half_up(u64::from(width) * side, u64::from(height)).max(1);
        ImageDims::new(w as u32, MAX_SIDE)
    }
}

/// Axis-aligned box in integer pixels, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BoundingBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        BoundingBox { x, y, w, h }
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn fits(&self, dims: ImageDims) -> bool {
        u64::from(self.x) + u64::from(self.w) <= u64::from(dims.width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(dims.height)
    }

    /// Maps the box from `from` to `to` by scaling corners (rounded half-up)
    /// and clamping to the target. Returns `None` when nothing of positive
    /// area is left.
    pub fn rescale(&self, from: ImageDims, to: ImageDims) -> Option<BoundingBox> {
        let sx = |v: u64| div_round_half_up(v * u64::from(to.width), u64::from(from.width)).min(u64::from(to.width));
        let sy = |v: u64| div_round_half_up(v * u64::from(to.height), u64::from(from.height)).min(u64::from(to.height));
        let x0 = sx(u64::from(self.x));
        let y0 = sy(u64::from(self.y));
        let x1 = sx(u64::from(self.x) + u64::from(self.w));
        let y1 = sy(u64::from(self.y) + u64::from(self.h));
        (x1 > x0 && y1 > y0).then(|| BoundingBox {
            x: x0 as u32,
            y: y0 as u32,
            w: (x1 - x0) as u32,
            h: (y1 - y0) as u32,
        })
    }
}

/// An annotated image belonging to one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub task_id: String,
    /// Relative to the project root, `/`-separated.
    pub path: String,
    pub dims: ImageDims,
    /// Expert-annotated ground truth.
    pub grade: Grade,
    /// Externally produced detector output.
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reference: bool,
}
