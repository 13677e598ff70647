//! COCO-detection annotation files.
//!
//! Only the fields detection needs are read: `images[].{id, file_name,
//! width, height}`, `annotations[].{image_id, category_id, bbox}` and
//! `categories[].{id, name}`. Unknown fields are ignored. Boxes are stored
//! as `[x, y, w, h]` and converted to corner form on load. Category ids are
//! mapped to dense class indices in ascending id order.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use pbcat_core::{BBox, ImageSample};
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest};
use crate::error::{read_json, write_json, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default)]
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub info: serde_json::Value,
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoFile {
    pub fn from_manifest(m: &DatasetManifest) -> Self {
        let images = m
            .images
            .iter()
            .map(|e| CocoImage {
                id: e.id,
                file_name: e.file.clone(),
                width: e.width,
                height: e.height,
            })
            .collect();
        let categories = m
            .categories
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64,
                name: n.clone(),
            })
            .collect();
        let info = serde_json::to_value(&m.generator).unwrap_or_default();
        Self::assemble(
            info,
            images,
            m.images.iter().map(|e| (e.id, e.boxes.as_slice())),
            categories,
        )
    }

    /// Builds a file from per-image boxes whose class ids index `categories`.
    pub fn assemble<'a>(
        info: serde_json::Value,
        images: Vec<CocoImage>,
        boxes: impl IntoIterator<Item = (u64, &'a [BBox])>,
        categories: Vec<CocoCategory>,
    ) -> Self {
        let mut annotations = Vec::new();
        for (image_id, bs) in boxes {
            for b in bs {
                let (w, h) = (f64::from(b.width()), f64::from(b.height()));
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id,
                    category_id: categories[b.class_id].id,
                    bbox: [f64::from(b.x1), f64::from(b.y1), w, h],
                    area: w * h,
                    iscrowd: 0,
                });
            }
        }
        Self {
            info,
            images,
            annotations,
            categories,
        }
    }
}

pub fn write_coco(path: &Path, file: &CocoFile) -> Result<()> {
    write_json(path, file)
}

/// One image of a COCO file. Pixels are decoded only by [`Self::load`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDescriptor {
    pub image_id: u64,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    /// Corner-form boxes with dense class ids, in the declared image size.
    pub boxes: Vec<BBox>,
}

impl SampleDescriptor {
    /// Sample id used throughout logs and reports: the file stem.
    pub fn name(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_id.to_string())
    }

    /// Decodes the image. When `canvas = Some((h, w))` differs from the
    /// stored size, the image is resized bilinearly and boxes are scaled.
    pub fn load(&self, canvas: Option<(usize, usize)>) -> Result<ImageSample> {
        let dynimg = image::open(&self.path).map_err(|source| Error::Image {
            path: self.path.clone(),
            source,
        })?;
        let mut rgb = dynimg.to_rgb8();
        let (ih, iw) = (rgb.height() as usize, rgb.width() as usize);
        let mut boxes = self.boxes.clone();
        if (ih, iw) != (self.height, self.width) {
            // Trust the pixels over the declared size.
            let (sx, sy) = (iw as f32 / self.width as f32, ih as f32 / self.height as f32);
            boxes = scale_boxes(&boxes, sx, sy, ih, iw);
        }
        if let Some((h, w)) = canvas {
            if (h, w) != (ih, iw) {
                rgb = image::imageops::resize(
                    &rgb,
                    w as u32,
                    h as u32,
                    image::imageops::FilterType::Triangle,
                );
                boxes = scale_boxes(&boxes, w as f32 / iw as f32, h as f32 / ih as f32, h, w);
            }
        }
        let img = data::from_rgb(&rgb);
        Ok(ImageSample::new(self.name(), img, boxes)?)
    }
}

fn scale_boxes(boxes: &[BBox], sx: f32, sy: f32, h: usize, w: usize) -> Vec<BBox> {
    boxes
        .iter()
        .filter_map(|b| {
            let s = BBox {
                x1: (b.x1 * sx).clamp(0.0, w as f32),
                y1: (b.y1 * sy).clamp(0.0, h as f32),
                x2: (b.x2 * sx).clamp(0.0, w as f32),
                y2: (b.y2 * sy).clamp(0.0, h as f32),
                class_id: b.class_id,
            };
            s.validate().ok().map(|_| s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub samples: Vec<SampleDescriptor>,
    /// Names in dense class order.
    pub categories: Vec<String>,
    /// Original category id of each dense class.
    pub category_ids: Vec<u64>,
    pub info: serde_json::Value,
    /// Non-fatal problems, e.g. boxes clamped into their image.
    pub warnings: Vec<String>,
}

impl CocoDataset {
    /// Decodes every sample.
    pub fn load_all(&self, canvas: Option<(usize, usize)>) -> Result<Vec<ImageSample>> {
        self.samples.iter().map(|d| d.load(canvas)).collect()
    }
}

/// Reads a COCO-detection annotation file. Image paths resolve relative to
/// the file's directory.
pub fn load_coco_annotations(path: &Path) -> Result<CocoDataset> {
    let file: CocoFile = read_json(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_coco(file, base, true)
}

/// Resolves a parsed COCO file against `base`. With `check_files`, every
/// image file must exist.
pub fn parse_coco(file: CocoFile, base: &Path, check_files: bool) -> Result<CocoDataset> {
    let mut ids: Vec<&CocoCategory> = file.categories.iter().collect();
    ids.sort_by_key(|c| c.id);
    let dense: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    if dense.len() != ids.len() {
        return Err(Error::Format("duplicate category id".into()));
    }

    let mut order: Vec<u64> = Vec::with_capacity(file.images.len());
    let mut by_id: BTreeMap<u64, SampleDescriptor> = BTreeMap::new();
    for im in &file.images {
        if im.width == 0 || im.height == 0 {
            return Err(Error::Format(format!("image {} has zero size", im.id)));
        }
        let p = base.join(&im.file_name);
        if check_files && !p.is_file() {
            return Err(Error::Format(format!(
                "image {} file not found: {}",
                im.id,
                p.display()
            )));
        }
        let d = SampleDescriptor {
            image_id: im.id,
            path: p,
            width: im.width,
            height: im.height,
            boxes: Vec::new(),
        };
        if by_id.insert(im.id, d).is_some() {
            return Err(Error::Format(format!("duplicate image id {}", im.id)));
        }
        order.push(im.id);
    }

    let mut warnings = Vec::new();
    for a in &file.annotations {
        let d = by_id
            .get_mut(&a.image_id)
            .ok_or(Error::MissingImage(a.image_id))?;
        let class_id = *dense.get(&a.category_id).ok_or_else(|| {
            Error::Format(format!(
                "annotation {} references unknown category {}",
                a.id, a.category_id
            ))
        })?;
        let [x, y, w, h] = a.bbox;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!("annotation {} has a non-finite box", a.id)));
        }
        let (iw, ih) = (d.width as f64, d.height as f64);
        let raw = [x, y, x + w, y + h];
        let c = [
            raw[0].clamp(0.0, iw),
            raw[1].clamp(0.0, ih),
            raw[2].clamp(0.0, iw),
            raw[3].clamp(0.0, ih),
        ];
        if c != raw {
            warnings.push(format!(
                "annotation {} on image {}: box {:?} clamped to {:?}",
                a.id, a.image_id, raw, c
            ));
        }
        if c[2] <= c[0] || c[3] <= c[1] {
            warnings.push(format!(
                "annotation {} on image {}: empty box dropped",
                a.id, a.image_id
            ));
            continue;
        }
        d.boxes.push(BBox::new(
            c[0] as f32,
            c[1] as f32,
            c[2] as f32,
            c[3] as f32,
            class_id,
        )?);
    }

    let samples = order
        .iter()
        .map(|id| by_id.remove(id).expect("ids inserted above"))
        .collect();
    Ok(CocoDataset {
        samples,
        categories: ids.iter().map(|c| c.name.clone()).collect(),
        category_ids: ids.iter().map(|c| c.id).collect(),
        info: file.info,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> CocoFile {
        serde_json::from_str(
            r#"{"images":[{"id":3,"file_name":"a.png","width":64,"height":80}],
                "annotations":[{"id":1,"image_id":3,"category_id":7,"bbox":[10,20,30,40]}],
                "categories":[{"id":7,"name":"thing"},{"id":2,"name":"other"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn converts_xywh_to_corners() {
        let ds = parse_coco(minimal(), Path::new("."), false).unwrap();
        assert_eq!(ds.samples.len(), 1);
        let b = ds.samples[0].boxes[0];
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (10.0, 20.0, 40.0, 60.0));
        // Ids 2 and 7 become 0 and 1.
        assert_eq!(b.class_id, 1);
        assert_eq!(ds.categories, vec!["other", "thing"]);
        assert!(ds.warnings.is_empty());
    }

    #[test]
    fn missing_image_id_is_named() {
        let mut f = minimal();
        f.annotations[0].image_id = 99;
        let err = parse_coco(f, Path::new("."), false).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
    }

    #[test]
    fn out_of_bounds_boxes_are_clamped_with_warning() {
        let mut f = minimal();
        f.annotations[0].bbox = [-5.0, 70.0, 30.0, 40.0];
        let ds = parse_coco(f, Path::new("."), false).unwrap();
        let b = ds.samples[0].boxes[0];
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 70.0, 25.0, 80.0));
        assert_eq!(ds.warnings.len(), 1);
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(parse_coco(minimal(), Path::new("/nonexistent"), true).is_err());
    }
}
