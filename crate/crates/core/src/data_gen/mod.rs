//! Synthetic paired uplink/downlink CSI: a clustered multipath model with
//! shared geometry across the two FDD carriers, normalization, and the
//! on-disk dataset format.

mod channel;
mod dataset;

pub use channel::{sample_paths, synthesize_csi, ChannelScenario, PathSet};
pub use dataset::{
    denormalize, generate_dataset, link_magnitude_correlation, load_dataset, normalize,
    normalize_clamped, save_dataset, CsiDataset, CsiSamplePair, DatasetManifest, NormStats,
    RealTensor, Split, SplitSizes, DATASET_VERSION, MANIFEST_FILE,
};
