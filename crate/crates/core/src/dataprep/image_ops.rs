use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, ImageReader, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{resize_dims, BoundingBox, DataprepError, ImageDims, ImageRecord};
use crate::fsutil::{atomic_write, relative_slash};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataprepError + '_ {
    move |source| DataprepError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage, DataprepError> {
    let img_err = |source| DataprepError::Image {
        path: path.to_path_buf(),
        source,
    };
    ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(img_err)
}

fn encode_png(img: &RgbImage, path: &Path) -> Result<(), DataprepError> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| DataprepError::Image {
            path: path.to_path_buf(),
            source,
        })?;
    atomic_write(path, &bytes).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResizeOutcome {
    /// Points at the resized copy; dims and boxes are rescaled.
    pub record: ImageRecord,
    /// Boxes that collapsed to zero area after rescaling and clamping.
    pub dropped: Vec<BoundingBox>,
}

/// Writes a resized copy of the record's image to `<out>/<task>/resized/`.
///
/// Images already within the size limit are copied byte for byte. Larger
/// ones are resampled bilinearly and stored as PNG. `root` anchors the
/// record's relative path; the returned record's path is relative to it.
pub fn resize_image(record: &ImageRecord, root: &Path, out: &Path) -> Result<ResizeOutcome, DataprepError> {
    let src = root.join(&record.path);
    let img = decode(&src)?;
    let actual = ImageDims::new(img.width(), img.height());
    if actual != record.dims {
        return Err(DataprepError::DimsMismatch {
            record: record.id.clone(),
            declared: record.dims,
            actual,
        });
    }
    let target = resize_dims(actual);
    let dir = out.join(&record.task_id).join("resized");

    let dest: PathBuf;
    if target == actual {
        let ext = src
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_else(|| "png".into());
        dest = dir.join(format!("{}.{ext}", record.id));
        let bytes = fs::read(&src).map_err(io_err(&src))?;
        atomic_write(&dest, &bytes).map_err(io_err(&dest))?;
    } else {
        dest = dir.join(format!("{}.png", record.id));
        let resized = img
            .resize_exact(target.width, target.height, FilterType::Triangle)
            .to_rgb8();
        encode_png(&resized, &dest)?;
    }

    let mut boxes = Vec::with_capacity(record.boxes.len());
    let mut dropped = Vec::new();
    for b in &record.boxes {
        match b.rescale(actual, target) {
            Some(r) => boxes.push(r),
            None => {
                log::warn!(
                    "record {}: box {b} has zero area after resizing to {target}; dropped",
                    record.id
                );
                dropped.push(*b);
            }
        }
    }
    Ok(ResizeOutcome {
        record: ImageRecord {
            path: relative_slash(root, &dest),
            dims: target,
            boxes,
            ..record.clone()
        },
        dropped,
    })
}

/// Rectangle drawing parameters for detector overlays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayStyle {
    pub stroke: u32,
    pub color: [u8; 3],
}

impl OverlayStyle {
    const PALETTE: [[u8; 3]; 6] = [
        [255, 0, 0],
        [0, 200, 0],
        [0, 90, 255],
        [255, 160, 0],
        [200, 0, 200],
        [0, 200, 200],
    ];

    /// Default style: 3 px stroke, colour picked from a fixed palette by task.
    pub fn for_task(task_id: &str) -> Self {
        let idx = task_id
            .bytes()
            .fold(0usize, |acc, b| acc.wrapping_mul(31).wrapping_add(usize::from(b)));
        OverlayStyle {
            stroke: 3,
            color: Self::PALETTE[idx % Self::PALETTE.len()],
        }
    }
}

/// Draws each box's outline, `stroke` pixels wide and inset from the box
/// edge, clipped to the image.
pub fn draw_boxes(img: &mut RgbImage, boxes: &[BoundingBox], style: OverlayStyle) {
    let (iw, ih) = img.dimensions();
    let color = Rgb(style.color);
    for b in boxes {
        let x0 = b.x.min(iw);
        let y0 = b.y.min(ih);
        let x1 = b.x.saturating_add(b.w).min(iw);
        let y1 = b.y.saturating_add(b.h).min(ih);
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let sw = style.stroke.max(1);
        for y in y0..y1 {
            for x in x0..x1 {
                let on_edge = x - x0 < sw || x1 - 1 - x < sw || y - y0 < sw || y1 - 1 - y < sw;
                if on_edge {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
}

/// Writes `<out>/<task>/overlays/<id>.png` with the record's boxes drawn.
/// Returns the written path.
pub fn overlay_boxes(
    record: &ImageRecord,
    root: &Path,
    out: &Path,
    style: OverlayStyle,
) -> Result<PathBuf, DataprepError> {
    let src = root.join(&record.path);
    let mut img = decode(&src)?.to_rgb8();
    draw_boxes(&mut img, &record.boxes, style);
    let dest = out
        .join(&record.task_id)
        .join("overlays")
        .join(format!("{}.png", record.id));
    encode_png(&img, &dest)?;
    Ok(dest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtree::Grade;

    fn write_png(path: &Path, w: u32, h: u32) {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 251) as u8, (y % 241) as u8, 7]));
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        img.save(path).unwrap();
    }

    fn record(path: &str, w: u32, h: u32, boxes: Vec<BoundingBox>) -> ImageRecord {
        ImageRecord {
            id: "r1".into(),
            task_id: "1".into(),
            path: path.into(),
            dims: ImageDims::new(w, h),
            grade: Grade::new("Else"),
            boxes,
            reference: false,
        }
    }

    #[test]
    fn resize_large_image() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("img/a.png"), 1920, 1080);
        let rec = record("img/a.png", 1920, 1080, vec![BoundingBox::new(0, 0, 1920, 1080)]);
        let out = resize_image(&rec, dir.path(), &dir.path().join("work")).unwrap();
        assert_eq!(out.record.dims, ImageDims::new(1280, 720));
        assert_eq!(out.record.boxes, vec![BoundingBox::new(0, 0, 1280, 720)]);
        assert_eq!(out.record.path, "work/1/resized/r1.png");
        let (w, h) = image::image_dimensions(dir.path().join(&out.record.path)).unwrap();
        assert_eq!((w, h), (1280, 720));
        // Original untouched.
        assert_eq!(
            image::image_dimensions(dir.path().join("img/a.png")).unwrap(),
            (1920, 1080)
        );
    }

    #[test]
    fn small_image_is_copied() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("img/b.png"), 640, 480);
        let rec = record("img/b.png", 640, 480, vec![BoundingBox::new(5, 5, 10, 10)]);
        let out = resize_image(&rec, dir.path(), &dir.path().join("work")).unwrap();
        assert_eq!(out.record.dims, rec.dims);
        assert_eq!(out.record.boxes, rec.boxes);
        assert_eq!(
            fs::read(dir.path().join("img/b.png")).unwrap(),
            fs::read(dir.path().join(&out.record.path)).unwrap()
        );
    }

    #[test]
    fn degenerate_box_dropped() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("img/c.png"), 4000, 100);
        let rec = record(
            "img/c.png",
            4000,
            100,
            vec![BoundingBox::new(0, 10, 1, 50), BoundingBox::new(0, 0, 400, 100)],
        );
        let out = resize_image(&rec, dir.path(), &dir.path().join("work")).unwrap();
        assert_eq!(out.dropped, vec![BoundingBox::new(0, 10, 1, 50)]);
        assert_eq!(out.record.boxes, vec![BoundingBox::new(0, 0, 128, 32)]);
    }

    #[test]
    fn corrupt_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.png"), b"not an image").unwrap();
        let rec = record("bad.png", 10, 10, vec![]);
        assert!(matches!(
            resize_image(&rec, dir.path(), dir.path()),
            Err(DataprepError::Image { .. })
        ));
        let missing = record("missing.png", 10, 10, vec![]);
        assert!(matches!(
            resize_image(&missing, dir.path(), dir.path()),
            Err(DataprepError::Io { .. })
        ));
    }

    #[test]
    fn overlay_changes_only_box_perimeters() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("img/d.png"), 64, 48);
        let boxes = vec![BoundingBox::new(4, 4, 20, 10), BoundingBox::new(30, 20, 15, 15)];
        let rec = record("img/d.png", 64, 48, boxes.clone());
        let style = OverlayStyle {
            stroke: 2,
            color: [255, 0, 255],
        };
        let path = overlay_boxes(&rec, dir.path(), &dir.path().join("work"), style).unwrap();
        let before = image::open(dir.path().join("img/d.png")).unwrap().to_rgb8();
        let after = image::open(&path).unwrap().to_rgb8();
        let on_perimeter = |x: u32, y: u32| {
            boxes.iter().any(|b| {
                let inside = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
                let interior = x >= b.x + 2 && x < b.x + b.w - 2 && y >= b.y + 2 && y < b.y + b.h - 2;
                inside && !interior
            })
        };
        let mut changed = 0;
        for (x, y, p) in after.enumerate_pixels() {
            if p != before.get_pixel(x, y) {
                assert!(on_perimeter(x, y), "pixel ({x},{y}) changed off-perimeter");
                changed += 1;
            } else if on_perimeter(x, y) {
                assert_eq!(p.0, [255, 0, 255]);
            }
        }
        // Perimeter pixels of both rectangles: 2px rings.
        let ring = |w: u32, h: u32| w * h - (w - 4) * (h - 4);
        assert_eq!(changed, ring(20, 10) + ring(15, 15));

        // Deterministic bytes.
        let again = overlay_boxes(&rec, dir.path(), &dir.path().join("work2"), style).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(again).unwrap());
    }

    #[test]
    fn overlay_without_boxes_is_pixel_identical() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("img/e.png"), 32, 32);
        let rec = record("img/e.png", 32, 32, vec![]);
        let path = overlay_boxes(&rec, dir.path(), dir.path(), OverlayStyle::for_task("1")).unwrap();
        let before = image::open(dir.path().join("img/e.png")).unwrap().to_rgb8();
        let after = image::open(path).unwrap().to_rgb8();
        assert_eq!(before, after);
    }

    #[test]
    fn edge_boxes_are_clipped() {
        let mut img = RgbImage::new(10, 10);
        let style = OverlayStyle {
            stroke: 3,
            color: [9, 9, 9],
        };
        draw_boxes(
            &mut img,
            &[BoundingBox::new(8, 8, 50, 50), BoundingBox::new(0, 0, 10, 10)],
            style,
        );
        assert_eq!(img.get_pixel(9, 9).0, [9, 9, 9]);
        assert_eq!(img.get_pixel(0, 0).0, [9, 9, 9]);
        assert_eq!(img.get_pixel(5, 5).0, [0, 0, 0]);
    }
}
