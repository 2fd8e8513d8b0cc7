//! End-to-end commands: convert raw EEG to flow containers, train the
//! joint extractor and classifier, run the shrinking-training-set
//! experiment, and render visualisations.

mod config;
mod convert;
mod train;
mod visualize;

pub use config::{parse_event_map, BandLayout, PipelineConfig};
pub use convert::{
    cmd_convert, container_name, load_manifest, manifest_to_csv, parse_manifest, prepare, ConvertSummary, ManifestRow,
    Prepared, MANIFEST_HEADER,
};
pub use train::{
    cmd_reduce_experiment, cmd_train, fit_classifier, fit_extractor, load_images, reduce_to_csv, split_sources,
    train_subset, Classified, Extracted, FlowBank, FramePool, ReduceRow, Split, TrainSummary, REDUCE_HEADER,
};
pub use visualize::{cmd_visualize, confusion_heatmap, frames_to_gray, VisualizeSummary, HEATMAP_CELL};

/// Independent seed for one named consumer of the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finaliser
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
