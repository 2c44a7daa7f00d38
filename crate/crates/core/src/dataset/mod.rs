//! Tub datasets: an on-disk catalog of drive records with their camera frames,
//! plus resizing, train/validation splitting and summary statistics.

mod image_ops;
mod split;
mod stats;
mod tub;

pub use image_ops::{flip_record, resize_image};
pub use split::{split, Split};
pub use stats::{summarize, DatasetStats, Histogram};
pub use tub::{DriveRecord, LapRecord, Manifest, PoseRecord, RecordMode, Tub, SCHEMA_VERSION};
