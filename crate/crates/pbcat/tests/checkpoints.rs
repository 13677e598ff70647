use pbcat::checkpoint::{config_hash, load_checkpoint, save_checkpoint, Sidecar};
use pbcat_core::trainer::EpochSnapshot;
use pbcat_core::{rng, Detector, ToyArch, ToyDetector, TrainConfig};

#[test]
fn sidecar_schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let det: ToyDetector<f32> =
        ToyDetector::new(ToyArch::new(2, 32, 32), &mut rng::stream(0, rng::STREAM_INIT)).unwrap();
    let snap = EpochSnapshot { epoch: 8, pass: 1, mean_loss: 0.5, steps: 40 };
    let p = save_checkpoint(dir.path(), "epoch_008", &det, &config_hash(&TrainConfig::default()), "linf_free", Some(&snap)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        ["arch", "config_hash", "epoch", "format_version", "metrics", "mode", "weights_file", "weights_sha256"]
    );
    assert_eq!(v["arch"]["detector"], "toy");
    assert_eq!(v["epoch"], 8);
    let sc: Sidecar = serde_json::from_value(v).unwrap();
    assert_eq!(sc.metrics, Some(snap));

    let loaded = load_checkpoint(&p).unwrap();
    let x = pbcat_core::Image::filled(32, 32, 0.3);
    assert_eq!(
        loaded.detector.predict(&x, 0.0, 0.5).unwrap(),
        det.predict(&x, 0.0, 0.5).unwrap()
    );
}
