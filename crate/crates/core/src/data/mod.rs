//! Image ingestion, dataset layout, splits, batching and synthetic domains.
//!
//! Datasets live on disk as `<root>/<source|target>/<diseased|healthy>/<name>.<png|jpg|jpeg>`.

mod batch;
mod image;
mod manifest;
pub mod synthetic;

pub use self::image::{load_image, resize_bilinear, IMAGE_SIDE};
pub use batch::{batch_order, batches, one_hot, Batch, LoadedDataset};
pub use manifest::{scan_dataset, scan_domain, split, split_indices, DatasetManifest, Domain, Entry, Label};
pub use synthetic::{generate_synthetic, DomainShift, SyntheticSpec};
