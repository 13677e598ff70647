use std::path::Path;

use pbcat::coco::load_coco_annotations;
use pbcat::data::{generate_shapes_dataset, render_split, ShapesSpec, Split, ANNOTATIONS_FILE};

fn spec(split: Split, n: usize, classes: usize) -> ShapesSpec {
    ShapesSpec {
        seed: 11,
        split,
        num_images: n,
        resolution: [96, 96],
        num_classes: classes,
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir.join("images"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out.push(("ann".into(), std::fs::read(dir.join(ANNOTATIONS_FILE)).unwrap()));
    out
}

#[test]
fn generate_then_load_reproduces_ground_truth_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(Split::Train, 200, 4);
    let m = generate_shapes_dataset(dir.path(), &s).unwrap();
    assert_eq!(m.images.len(), 200);
    for e in &m.images {
        assert!(dir.path().join(&e.file).is_file());
        assert!(e.boxes.iter().all(|b| b.within(96, 96)));
    }

    let ds = load_coco_annotations(&m.annotations_path()).unwrap();
    assert!(ds.warnings.is_empty());
    assert_eq!(ds.categories, vec!["rectangle", "ellipse", "triangle", "diamond"]);
    let loaded = ds.load_all(None).unwrap();
    let rendered = render_split(&s).unwrap();
    assert_eq!(loaded.len(), rendered.len());
    for (a, b) in loaded.iter().zip(&rendered) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.boxes, b.boxes);
        // Quantized rendering survives the 8-bit PNG round trip bit-exactly.
        assert_eq!(a.image, b.image);
    }
}

#[test]
fn fixed_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = spec(Split::Val, 12, 3);
    generate_shapes_dataset(a.path(), &s).unwrap();
    generate_shapes_dataset(b.path(), &s).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn two_classes_give_two_categories() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_shapes_dataset(dir.path(), &spec(Split::Train, 20, 2)).unwrap();
    assert_eq!(m.categories.len(), 2);
    let ds = load_coco_annotations(&m.annotations_path()).unwrap();
    assert_eq!(ds.categories.len(), 2);
    assert!(ds.samples.iter().flat_map(|s| &s.boxes).all(|b| b.class_id < 2));
}

#[test]
fn splits_are_disjoint() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let tr = generate_shapes_dataset(a.path(), &spec(Split::Train, 50, 4)).unwrap();
    let va = generate_shapes_dataset(b.path(), &spec(Split::Val, 50, 4)).unwrap();
    let ids: std::collections::HashSet<u64> = tr.images.iter().map(|e| e.id).collect();
    assert!(va.images.iter().all(|e| !ids.contains(&e.id)));
    let tr_px = render_split(&spec(Split::Train, 50, 4)).unwrap();
    let va_px = render_split(&spec(Split::Val, 50, 4)).unwrap();
    for v in &va_px {
        assert!(tr_px.iter().all(|t| t.image != v.image));
    }
}

#[test]
fn unwritable_out_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(generate_shapes_dataset(&blocker.join("sub"), &spec(Split::Train, 1, 2)).is_err());
}

#[test]
fn resize_on_load_scales_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_shapes_dataset(dir.path(), &spec(Split::Train, 3, 2)).unwrap();
    let ds = load_coco_annotations(&m.annotations_path()).unwrap();
    let s = ds.samples[0].load(Some((48, 48))).unwrap();
    assert_eq!((s.image.height(), s.image.width()), (48, 48));
    for (a, b) in s.boxes.iter().zip(&m.images[0].boxes) {
        assert_eq!(a.x1, b.x1 / 2.0);
        assert_eq!(a.y2, b.y2 / 2.0);
    }
}
