//! Detector checkpoints: a binary weights file plus a JSON sidecar.
//!
//! Weights file (`<name>.bin`), little-endian throughout:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `PBCATW01`                          |
//! | 4×8   | num_classes, height, width, widths[0..5]  |
//! | 8     | parameter count `n` (u64)                 |
//! | 4×n   | parameters (f32)                          |
//!
//! Sidecar (`<name>.json`), the stable interface:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "weights_file": "final.bin",
//!   "weights_sha256": "…",
//!   "arch": {"detector": "toy", "num_classes": 4, "height": 96, "width": 96, "widths": [16,32,32,32,32]},
//!   "config_hash": "…",
//!   "mode": "pbcat",
//!   "epoch": 32,
//!   "metrics": {"epoch": 32, "pass": 3, "mean_loss": 0.41, "steps": 4000}
//! }
//! ```
//!
//! `config_hash` is the SHA-256 of the compact JSON of the effective
//! training config.

use std::path::{Path, PathBuf};

use pbcat_core::trainer::EpochSnapshot;
use pbcat_core::{Detector, ToyArch, ToyDetector, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_json, write_json, Error, Result};

pub const MAGIC: &[u8; 8] = b"PBCATW01";
pub const SIDECAR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchInfo {
    pub detector: DetectorKind,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub widths: [usize; 5],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Toy,
}

impl From<ToyArch> for ArchInfo {
    fn from(a: ToyArch) -> Self {
        Self {
            detector: DetectorKind::Toy,
            num_classes: a.num_classes,
            height: a.height,
            width: a.width,
            widths: a.widths,
        }
    }
}

impl From<ArchInfo> for ToyArch {
    fn from(a: ArchInfo) -> Self {
        ToyArch {
            num_classes: a.num_classes,
            height: a.height,
            width: a.width,
            widths: a.widths,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub weights_file: String,
    pub weights_sha256: String,
    pub arch: ArchInfo,
    pub config_hash: String,
    pub mode: String,
    pub epoch: usize,
    pub metrics: Option<EpochSnapshot>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

pub fn encode_weights(det: &ToyDetector<f32>) -> Vec<u8> {
    let a = det.arch();
    let params = det.params();
    let mut out = Vec::with_capacity(8 + 64 + 8 + 4 * params.len());
    out.extend_from_slice(MAGIC);
    let dims = [a.num_classes, a.height, a.width]
        .into_iter()
        .chain(a.widths);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<ToyDetector<f32>> {
    let bad = |m: &str| Error::Format(format!("weights file: {m}"));
    if bytes.len() < 8 + 32 + 8 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let word = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let arch = ToyArch {
        num_classes: word(0),
        height: word(1),
        width: word(2),
        widths: [word(3), word(4), word(5), word(6), word(7)],
    };
    let n = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
    let body = &bytes[48..];
    if body.len() != n * 4 {
        return Err(bad("parameter count does not match file size"));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(ToyDetector::from_params(arch, params)?)
}

/// Writes `<dir>/<name>.bin` and `<dir>/<name>.json`; returns the sidecar path.
pub fn save_checkpoint(
    dir: &Path,
    name: &str,
    det: &ToyDetector<f32>,
    config_hash: &str,
    mode: &str,
    snapshot: Option<&EpochSnapshot>,
) -> Result<PathBuf> {
    let bytes = encode_weights(det);
    let weights_file = format!("{name}.bin");
    let wpath = dir.join(&weights_file);
    std::fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let sidecar = Sidecar {
        format_version: SIDECAR_FORMAT_VERSION,
        weights_file,
        weights_sha256: sha256_hex(&bytes),
        arch: det.arch().into(),
        config_hash: config_hash.into(),
        mode: mode.into(),
        epoch: snapshot.map_or(0, |s| s.epoch),
        metrics: snapshot.copied(),
    };
    let spath = dir.join(format!("{name}.json"));
    write_json(&spath, &sidecar)?;
    Ok(spath)
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub detector: ToyDetector<f32>,
    pub sidecar: Sidecar,
    pub sidecar_path: PathBuf,
}

/// Resolves a directory (`final.json` inside it), a `.bin` file (its sibling
/// sidecar) or a sidecar path.
pub fn resolve_sidecar(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("final.json")
    } else if path.extension().is_some_and(|e| e == "bin") {
        path.with_extension("json")
    } else {
        path.to_path_buf()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let sidecar_path = resolve_sidecar(path);
    let sidecar: Sidecar = read_json(&sidecar_path)?;
    if sidecar.format_version != SIDECAR_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported sidecar format_version {}",
            sidecar_path.display(),
            sidecar.format_version
        )));
    }
    let base = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
    let wpath = base.join(&sidecar.weights_file);
    let bytes = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let digest = sha256_hex(&bytes);
    if digest != sidecar.weights_sha256 {
        return Err(Error::Format(format!(
            "{}: sha256 {digest} does not match sidecar",
            wpath.display()
        )));
    }
    let detector = decode_weights(&bytes)?;
    if ArchInfo::from(detector.arch()) != sidecar.arch {
        return Err(Error::Format(format!(
            "{}: architecture differs from sidecar",
            wpath.display()
        )));
    }
    Ok(LoadedCheckpoint {
        detector,
        sidecar,
        sidecar_path,
    })
}

/// A warning when a checkpoint was trained under a different config.
pub fn config_mismatch(sidecar: &Sidecar, cfg: &TrainConfig) -> Option<String> {
    let h = config_hash(cfg);
    (h != sidecar.config_hash).then(|| {
        format!(
            "checkpoint config hash {} differs from current config {h}",
            sidecar.config_hash
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pbcat_core::rng;

    fn det() -> ToyDetector<f32> {
        ToyDetector::new(ToyArch::new(3, 32, 40), &mut rng::stream(5, rng::STREAM_INIT)).unwrap()
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let d = det();
        let back = decode_weights(&encode_weights(&d)).unwrap();
        assert_eq!(back.arch(), d.arch());
        let (a, b) = (d.params(), back.params());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode_weights(&det());
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_weights(&bytes).is_err());
    }

    #[test]
    fn sidecar_round_trip_and_tamper_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::default();
        let p = save_checkpoint(dir.path(), "final", &det(), &config_hash(&cfg), "pbcat", None).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.sidecar_path, p);
        assert_eq!(loaded.sidecar.mode, "pbcat");
        assert!(config_mismatch(&loaded.sidecar, &cfg).is_none());
        let mut other = cfg.clone();
        other.seed = 9;
        assert!(config_mismatch(&loaded.sidecar, &other).is_some());

        let w = dir.path().join("final.bin");
        let mut bytes = std::fs::read(&w).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&w, bytes).unwrap();
        assert!(load_checkpoint(&w).is_err());
    }
}
