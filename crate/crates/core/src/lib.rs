//! Local prototype class activation maps.
//!
//! The pipeline splits each class's local features into foreground and
//! context by thresholding the CAM, clusters both bags, keeps the clusters
//! the classifier confidently assigns to the class (or confidently does not),
//! and slides the kept prototypes over every feature block to get a heatmap
//! that covers whole objects instead of their most discriminative part.
//! Heatmaps are thresholded into seed masks and scored against ground truth.

pub mod cam;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod lpcam;
pub mod npy;
pub mod pipeline;
pub mod prototypes;
pub mod seedmask;
pub mod sweep;
pub mod synth;
pub mod types;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cam::{compute_cam, normalize_map, raw_cam, split_by_cam};
pub use clustering::{kmeans, ClusterResult, ClusteringConfig, Metric};
pub use config::{resolve, ConfigOverrides, PipelineConfig, Preset};
pub use dataset::{validate_dataset, Dataset, Manifest};
pub use error::{Error, Result};
pub use evaluation::{accumulate, finalize, ConfusionAccumulator, MetricsReport};
pub use lpcam::{compute_lpcam, generate_maps, worker_pool, ImageMaps, LpcamMode, MapKind, MapRequest};
pub use prototypes::{select_prototypes, ClassPrototypes, PrototypeBank};
pub use types::{ActivationMap, ClassifierWeights, FeatureBlock, LabelRaster, LocalFeatures, RawMap, SeedMask};

/// Independent random stream `stream` derived from the one user-facing seed.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
