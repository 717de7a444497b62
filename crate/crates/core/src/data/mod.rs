//! Feature/label ingestion, window sampling and the synthetic grammar.

pub mod files;
pub mod samples;
pub mod synthetic;

use std::path::Path;

pub use files::{load_feature_file, read_manifest, FeatureFile, LabelTrack, ManifestEntry, Split};
pub use samples::{make_samples, short_labels_at, window_at, Sample, Video};
pub use synthetic::{
    generate_synthetic, synthesize, OracleReport, SyntheticGrammar, SyntheticVideo,
};

use crate::error::Result;

/// Loads every video of a manifest, numbered in manifest order.
pub fn load_manifest(path: &Path) -> Result<Vec<(Video, Split)>> {
    read_manifest(path)?
        .into_iter()
        .enumerate()
        .map(|(id, e)| {
            let (features, labels) = load_feature_file(&e.feature_path, &e.label_path)?;
            Ok((Video::new(id, features, labels)?, e.split))
        })
        .collect()
}

/// In-memory videos of a synthetic dataset, numbered in order.
pub fn dataset_videos(ds: &synthetic::SyntheticDataset) -> Vec<(Video, Split)> {
    ds.videos
        .iter()
        .zip(&ds.splits)
        .enumerate()
        .map(|(id, (v, &s))| {
            let video =
                Video::new(id, v.features.clone(), v.labels.clone()).expect("consistent video");
            (video, s)
        })
        .collect()
}
