//! Evaluation report files and the run comparison table.
//!
//! A report file (`report.json`) holds the clean evaluation of one
//! checkpoint and, when an attack was requested, the attacked evaluation and
//! the attack settings:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "checkpoint": "<sha256 of the weights file>",
//!   "checkpoint_path": "runs/p1/final.json",
//!   "mode": "pbcat",
//!   "data": "shapes/val/annotations.json",
//!   "clean": { "mean_ap50": 0.91, "per_class": [...], ... },
//!   "attack": { "steps": 50, "step_size": 0.00784, "lambda_eval": 0.1414, "seed": 0 },
//!   "attacked": { "mean_ap50": 0.62, ... }
//! }
//! ```
//!
//! AP values are fractions in `[0, 1]`; the comparison table prints them as
//! points (×100).

use std::fmt::Write as _;
use std::path::Path;

use pbcat_core::attacks::AttackConfig;
use pbcat_core::eval::EvalReport;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format_version: u32,
    pub checkpoint: String,
    pub checkpoint_path: String,
    /// Training mode recorded in the checkpoint sidecar.
    pub mode: String,
    pub data: String,
    pub clean: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacked: Option<EvalReport>,
}

impl ReportFile {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Name shown for a report: its parent directory for `…/report.json`,
/// otherwise the file stem.
pub fn run_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "report" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn points(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Aligned text table with one row per report, in input order. Depends only
/// on its arguments.
pub fn compare(reports: &[(String, ReportFile)]) -> String {
    let header = ["run", "mode", "clean AP50", "attacked AP50", "drop", "attack"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|(label, r)| {
            let clean = r.clean.mean_ap50;
            let (adv, drop) = match &r.attacked {
                Some(a) => (points(a.mean_ap50), points(clean - a.mean_ap50)),
                None => ("-".into(), "-".into()),
            };
            let attack = r.attacked.as_ref().map_or_else(
                || "clean".to_string(),
                |a| a.provenance.attack.clone(),
            );
            [label.clone(), r.mode.clone(), points(clean), adv, drop, attack]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            // Text columns align left, numbers right.
            if matches!(i, 2..=4) {
                let _ = write!(s, "{cell:>w$}  ");
            } else {
                let _ = write!(s, "{cell:<w$}  ");
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &rows {
        line(&row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use pbcat_core::eval::{report_from_predictions, EvalSettings, Provenance};

    fn eval(ap_hit: bool, attack: &str) -> EvalReport {
        let g = pbcat_core::BBox::new(0.0, 0.0, 10.0, 10.0, 0).unwrap();
        let preds = if ap_hit {
            vec![vec![pbcat_core::Detection { bbox: g, score: 0.9 }]]
        } else {
            vec![vec![]]
        };
        report_from_predictions(
            &preds,
            &[vec![g]],
            1,
            EvalSettings::default(),
            Provenance {
                checkpoint: "abc".into(),
                attack: attack.into(),
            },
        )
    }

    fn file(attacked: bool) -> ReportFile {
        ReportFile {
            format_version: REPORT_FORMAT_VERSION,
            checkpoint: "abc".into(),
            checkpoint_path: "runs/p1/final.json".into(),
            mode: "pbcat".into(),
            data: "val".into(),
            clean: eval(true, "clean"),
            attack: attacked.then(AttackConfig::default),
            attacked: attacked.then(|| eval(false, "pgdpatch(steps=50)")),
        }
    }

    #[test]
    fn table_rows_follow_input_order() {
        let t = compare(&[("b".into(), file(true)), ("a".into(), file(false))]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("run"));
        assert!(lines[2].starts_with("b "));
        assert!(lines[2].contains("100.0") && lines[2].contains("0.0"));
        assert!(lines[3].starts_with("a ") && lines[3].ends_with("clean"));
        // Pure: same input, same bytes.
        assert_eq!(t, compare(&[("b".into(), file(true)), ("a".into(), file(false))]));
    }

    #[test]
    fn labels() {
        assert_eq!(run_label(Path::new("runs/p1/report.json")), "p1");
        assert_eq!(run_label(Path::new("x/clean.json")), "clean");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.json");
        let f = file(true);
        f.write(&p).unwrap();
        assert_eq!(ReportFile::read(&p).unwrap(), f);
    }
}
