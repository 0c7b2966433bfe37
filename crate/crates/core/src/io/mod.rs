//! On-disk formats: tensor files, manifests, checkpoints and metric streams.

pub mod checkpoint;
pub mod manifest;
pub mod metrics;
pub mod tensor_file;

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, CheckpointMeta, Progress};
pub use manifest::{Dataset, Instance, Manifest, Record, MANIFEST_FILE};
pub use metrics::{read_records, MetricsWriter};
pub use tensor_file::{load_tensor, save_tensor, ElemType};
