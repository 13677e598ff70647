//! Files, datasets and the command line around `pbcat-core`.
//!
//! * [`data`]: synthetic shapes generator and image IO.
//! * [`coco`]: COCO-detection annotation reading and writing.
//! * [`checkpoint`]: detector weights plus a JSON sidecar.
//! * [`report`]: evaluation summaries and the run comparison table.
//! * [`metrics`]: the per-step JSON-lines stream written during training.
//! * [`cli`]: the `pbcat` command.

pub mod checkpoint;
pub mod cli;
pub mod coco;
pub mod data;
pub mod error;
pub mod metrics;
pub mod report;

pub use error::{Error, Result};
