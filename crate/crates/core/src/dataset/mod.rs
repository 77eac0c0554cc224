//! Dataset tooling: URL manifests, downloading, face alignment, filter lists
//! and directory statistics.

pub mod align;
pub mod fetch;
pub mod manifest;
pub mod stats;

pub use align::{
    align_crop, align_files, align_manifest, AlignConfig, FaceLandmarks, LandmarkDetector, SidecarLandmarks,
};
pub use fetch::{fetch, FetchSummary, RetryPolicy};
pub use manifest::{apply_filterlist, read_filterlist, replay, AuditLog, Manifest, ManifestRecord, Split, Status};
pub use stats::{dataset_stats, DatasetStats};
