use pbcat::coco::load_coco_annotations;
use pbcat::data::save_png;
use pbcat_core::Image;

fn write(dir: &std::path::Path, json: &str) -> std::path::PathBuf {
    save_png(&dir.join("a.png"), &Image::filled(80, 64, 0.5)).unwrap();
    let p = dir.join("ann.json");
    std::fs::write(&p, json).unwrap();
    p
}

#[test]
fn minimal_file_gives_one_descriptor_with_one_box() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        r#"{"images":[{"id":1,"file_name":"a.png","width":64,"height":80}],
            "annotations":[{"id":1,"image_id":1,"category_id":1,"bbox":[10,20,30,40]}],
            "categories":[{"id":1,"name":"person"}]}"#,
    );
    let ds = load_coco_annotations(&p).unwrap();
    assert_eq!(ds.samples.len(), 1);
    let s = ds.samples[0].load(None).unwrap();
    assert_eq!(s.boxes.len(), 1);
    let b = s.boxes[0];
    assert_eq!((b.x1, b.y1, b.x2, b.y2, b.class_id), (10.0, 20.0, 40.0, 60.0, 0));
    assert_eq!((s.image.height(), s.image.width()), (80, 64));
}

#[test]
fn malformed_json_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "{\"images\": [");
    let e = load_coco_annotations(&p).unwrap_err();
    assert!(e.to_string().contains("invalid JSON"), "{e}");
}

#[test]
fn annotation_with_missing_image_names_the_id() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        r#"{"images":[{"id":1,"file_name":"a.png","width":64,"height":80}],
            "annotations":[{"id":1,"image_id":424242,"category_id":1,"bbox":[1,1,2,2]}],
            "categories":[{"id":1,"name":"person"}]}"#,
    );
    let e = load_coco_annotations(&p).unwrap_err();
    assert!(e.to_string().contains("424242"), "{e}");
}

#[test]
fn missing_image_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        r#"{"images":[{"id":1,"file_name":"gone.png","width":64,"height":80}],
            "annotations":[], "categories":[{"id":1,"name":"person"}]}"#,
    );
    let e = load_coco_annotations(&p).unwrap_err();
    assert!(e.to_string().contains("gone.png"), "{e}");
}
