//! Synthetic shapes detection data.
//!
//! Each image holds 1–4 non-overlapping filled shapes over a textured
//! background. The class is the shape type:
//!
//! | id | name      |
//! |----|-----------|
//! | 0  | rectangle |
//! | 1  | ellipse   |
//! | 2  | triangle  |
//! | 3  | diamond   |
//!
//! Boxes are the tight half-open pixel bounds of the painted pixels, so they
//! are exact. Pixel values are quantized to `k / 255` before use, which makes
//! an 8-bit PNG round trip lossless.
//!
//! Image `i` of a split draws from its own ChaCha stream, derived from the
//! seed, the split and `i`. The two splits therefore never share a stream,
//! and any subset of images can be rendered independently.

use std::path::{Path, PathBuf};

use pbcat_core::{BBox, Image, ImageSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{self, CocoFile};
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 4] = ["rectangle", "ellipse", "triangle", "diamond"];
pub const MAX_CLASSES: usize = CLASS_NAMES.len();
pub const MIN_CLASSES: usize = 2;
/// Shape sides are drawn from this range at 96 px and scaled with the
/// smaller canvas side elsewhere; they never go below [`MIN_SHAPE_SIDE`].
pub const SIDE_RANGE_AT_96: (usize, usize) = (20, 40);
pub const MIN_SHAPE_SIDE: usize = 12;
/// Bumped whenever rendering changes in a way that alters pixels.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }

    /// Image ids are disjoint between splits.
    pub fn image_id(&self, index: usize) -> u64 {
        (self.tag() << 32) | index as u64
    }
}

/// Parameters that fully determine a generated split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapesSpec {
    pub seed: u64,
    pub split: Split,
    pub num_images: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub num_classes: usize,
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_CLASSES..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Format(format!(
                "num_classes must be in {MIN_CLASSES}..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        let [h, w] = self.resolution;
        let (_, hi) = side_range(h, w);
        if h.min(w) < 2 * hi || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Format(format!(
                "resolution {h}x{w} must be a multiple of 8 with room for two shapes per side"
            )));
        }
        Ok(())
    }
}

/// Generator parameters recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub generator: String,
    pub version: u32,
    #[serde(flatten)]
    pub spec: ShapesSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    /// Relative to the split directory.
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Split directory holding `annotations.json` and `images/`.
    pub root: PathBuf,
    pub split: Split,
    pub images: Vec<ManifestEntry>,
    pub categories: Vec<String>,
    pub generator: GeneratorInfo,
}

impl DatasetManifest {
    pub fn annotations_path(&self) -> PathBuf {
        self.root.join(ANNOTATIONS_FILE)
    }
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

fn side_range(height: usize, width: usize) -> (usize, usize) {
    let m = height.min(width);
    let scale = |v: usize| ((v * m + 48) / 96).max(MIN_SHAPE_SIDE);
    (scale(SIDE_RANGE_AT_96.0), scale(SIDE_RANGE_AT_96.1))
}

fn image_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // High bits keep generator streams away from the training streams.
    rng.set_stream((0xDA7A << 48) | split.image_id(index));
    rng
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Low-frequency colour noise (bilinear upsampling of a coarse random grid)
/// plus a random linear ramp.
fn background<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<[f32; 3]> {
    let cells = rng.random_range(3..=6usize);
    let base: [f32; 3] = [
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
    ];
    let grid: Vec<[f32; 3]> = (0..(cells + 1) * (cells + 1))
        .map(|_| {
            let mut c = [0.0; 3];
            for (ch, v) in c.iter_mut().enumerate() {
                *v = base[ch] + rng.random_range(-0.18..0.18);
            }
            c
        })
        .collect();
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let ramp = rng.random_range(0.0..0.25f32);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = vec![[0.0; 3]; h * w];
    for y in 0..h {
        let gy = y as f32 / h as f32 * cells as f32;
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        for x in 0..w {
            let gx = x as f32 / w as f32 * cells as f32;
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
            let (a, b, c, d) = (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
            let t = (x as f32 / w as f32 - 0.5) * ca + (y as f32 / h as f32 - 0.5) * sa;
            for ch in 0..3 {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
                out[y * w + x][ch] = top * (1.0 - fy) + bot * fy + ramp * t;
            }
        }
    }
    out
}

/// Whether the pixel centre `(px, py)` lies inside a shape of class `class`
/// occupying `[x0, x0+sw) × [y0, y0+sh)`.
fn inside(class: usize, px: f32, py: f32, x0: f32, y0: f32, sw: f32, sh: f32) -> bool {
    let (u, v) = ((px - x0) / sw, (py - y0) / sh);
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    let (du, dv) = (u - 0.5, v - 0.5);
    match class {
        0 => true,
        1 => du * du + dv * dv <= 0.25,
        // Apex at the top centre, base along the bottom edge.
        2 => du.abs() <= 0.5 * v,
        _ => du.abs() + dv.abs() <= 0.5,
    }
}

fn pick_color<R: Rng>(rng: &mut R, local: [f32; 3]) -> [f32; 3] {
    let mut best = [0.0; 3];
    let mut best_d = -1.0;
    for _ in 0..16 {
        let c = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let d: f32 = (0..3).map(|i| (c[i] - local[i]).abs()).sum();
        if d >= 0.75 {
            return c;
        }
        if d > best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Renders image `index` of the split described by `spec`.
pub fn render_sample(spec: &ShapesSpec, index: usize) -> Result<ImageSample> {
    spec.validate()?;
    let [h, w] = spec.resolution;
    let mut rng = image_rng(spec.seed, spec.split, index);
    let mut pixels = background(h, w, &mut rng);
    let (lo, hi) = side_range(h, w);
    let count = rng.random_range(1..=4usize);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);

    for _ in 0..count {
        // Rejection-sample a footprint that keeps a 2 px gap to earlier ones.
        let mut placed = None;
        for _ in 0..64 {
            let sw = rng.random_range(lo..=hi);
            let sh = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=w - sw);
            let y0 = rng.random_range(0..=h - sh);
            let clear = boxes.iter().all(|b| {
                x0 as f32 >= b.x2 + 2.0
                    || (x0 + sw) as f32 + 2.0 <= b.x1
                    || y0 as f32 >= b.y2 + 2.0
                    || (y0 + sh) as f32 + 2.0 <= b.y1
            });
            if clear {
                placed = Some((x0, y0, sw, sh));
                break;
            }
        }
        let Some((x0, y0, sw, sh)) = placed else {
            continue;
        };
        let class = rng.random_range(0..spec.num_classes);
        let centre = pixels[(y0 + sh / 2) * w + x0 + sw / 2];
        let color = pick_color(&mut rng, centre);

        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in y0..y0 + sh {
            for x in x0..x0 + sw {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                if inside(class, px, py, x0 as f32, y0 as f32, sw as f32, sh as f32) {
                    pixels[y * w + x] = color;
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        boxes.push(BBox::new(bx0 as f32, by0 as f32, bx1 as f32, by1 as f32, class)?);
    }

    let mut img = Image::zeros(h, w);
    let plane = h * w;
    let data = img.as_mut_slice();
    for (i, px) in pixels.iter().enumerate() {
        for ch in 0..3 {
            let noise = rng.random_range(-0.03..0.03f32);
            data[ch * plane + i] = quantize(px[ch] + noise);
        }
    }
    Ok(ImageSample::new(sample_name(spec.split, index), img, boxes)?)
}

pub fn sample_name(split: Split, index: usize) -> String {
    format!("{}_{index:06}", split.as_str())
}

/// Renders a whole split in memory.
pub fn render_split(spec: &ShapesSpec) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    (0..spec.num_images).map(|i| render_sample(spec, i)).collect()
}

/// Writes `out_dir/images/*.png` and `out_dir/annotations.json`.
pub fn generate_shapes_dataset(out_dir: &Path, spec: &ShapesSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let images_dir = out_dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let [h, w] = spec.resolution;
    let mut entries = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let sample = render_sample(spec, i)?;
        let file = format!("{IMAGES_DIR}/{}.png", sample.id);
        save_png(&out_dir.join(&file), &sample.image)?;
        entries.push(ManifestEntry {
            id: spec.split.image_id(i),
            file,
            width: w,
            height: h,
            boxes: sample.boxes,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        split: spec.split,
        images: entries,
        categories: CLASS_NAMES[..spec.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        generator: GeneratorInfo {
            generator: "pbcat-shapes".into(),
            version: GENERATOR_VERSION,
            spec: *spec,
        },
    };
    let coco = CocoFile::from_manifest(&manifest);
    coco::write_coco(&manifest.annotations_path(), &coco)?;
    Ok(manifest)
}

/// Writes an 8-bit RGB PNG. Values are rounded to the nearest `k / 255`.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let src = img.as_slice();
    let mut buf = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for ch in 0..3 {
            buf.push((src[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Format("image buffer size mismatch".into()))?;
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Decodes any supported image into `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(from_rgb(&dynimg.to_rgb8()))
}

pub(crate) fn from_rgb(rgb: &image::RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut img = Image::zeros(h, w);
    let dst = img.as_mut_slice();
    for (i, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            dst[ch * plane + i] = f32::from(px.0[ch]) / 255.0;
        }
    }
    img
}

/// 16-bit PNG of a signed perturbation field: `0` maps to mid-grey and
/// `±scale` to the extremes.
pub fn save_field_png(path: &Path, field: &Image, scale: f32) -> Result<()> {
    let (h, w) = (field.height(), field.width());
    let plane = h * w;
    let src = field.as_slice();
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut buf: Vec<u16> = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for ch in 0..3 {
            let v = (src[ch * plane + i] / scale).clamp(-1.0, 1.0) * 0.5 + 0.5;
            buf.push((v * 65535.0).round() as u16);
        }
    }
    let img: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| Error::Format("field buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> ShapesSpec {
        ShapesSpec {
            seed: 7,
            split: Split::Train,
            num_images: n,
            resolution: [96, 96],
            num_classes: 4,
        }
    }

    #[test]
    fn shapes_are_in_bounds_and_disjoint() {
        for s in render_split(&spec(60)).unwrap() {
            assert!((1..=4).contains(&s.boxes.len()));
            for (i, a) in s.boxes.iter().enumerate() {
                assert!(a.within(96, 96));
                assert!(a.width() >= MIN_SHAPE_SIDE as f32 - 2.0, "{a:?}");
                for b in &s.boxes[i + 1..] {
                    assert!(a.x2 <= b.x1 || b.x2 <= a.x1 || a.y2 <= b.y1 || b.y2 <= a.y1);
                }
            }
        }
    }

    #[test]
    fn pixels_are_quantized() {
        let s = render_sample(&spec(1), 0).unwrap();
        for &v in s.image.as_slice() {
            let k = v * 255.0;
            assert!((k - k.round()).abs() < 1e-3);
        }
    }

    #[test]
    fn rendering_is_order_independent() {
        let all = render_split(&spec(5)).unwrap();
        assert_eq!(render_sample(&spec(5), 3).unwrap(), all[3]);
    }

    #[test]
    fn splits_differ() {
        let mut v = spec(1);
        let a = render_sample(&v, 0).unwrap();
        v.split = Split::Val;
        let b = render_sample(&v, 0).unwrap();
        assert_ne!(a.image, b.image);
        assert_ne!(Split::Train.image_id(0), Split::Val.image_id(0));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut v = spec(1);
        v.num_classes = 1;
        assert!(v.validate().is_err());
        v.num_classes = 5;
        assert!(v.validate().is_err());
        v.num_classes = 2;
        v.resolution = [50, 96];
        assert!(v.validate().is_err());
    }

    #[test]
    fn class_silhouettes() {
        // Triangle apex row is narrow, ellipse corners are empty.
        assert!(!inside(1, 0.5, 0.5, 0.0, 0.0, 20.0, 20.0));
        assert!(inside(0, 0.5, 0.5, 0.0, 0.0, 20.0, 20.0));
        assert!(!inside(2, 1.5, 1.5, 0.0, 0.0, 20.0, 20.0));
        assert!(inside(2, 10.0, 19.5, 0.0, 0.0, 20.0, 20.0));
        assert!(inside(3, 10.0, 10.0, 0.0, 0.0, 20.0, 20.0));
        assert!(!inside(3, 2.0, 2.0, 0.0, 0.0, 20.0, 20.0));
    }
}
