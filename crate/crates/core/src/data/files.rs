//! Binary feature/label containers and the dataset manifest.
//!
//! Feature file: `"MATF"`, u32 version, u32 T, u32 D, u32 fps, then `T·D`
//! little-endian f32 in row-major order. Label file: `"MATL"`, u32 version,
//! u32 T, u32 C, then `T` little-endian u16. All integers little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MatError, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MATF";
pub const LABEL_MAGIC: &[u8; 4] = b"MATL";
pub const FORMAT_VERSION: u32 = 1;

/// Pre-extracted per-frame features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub fps: u32,
    /// `T × D`.
    pub features: Tensor<f32>,
}

impl FeatureFile {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Per-frame class in `[0, C]`, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTrack {
    pub num_classes: usize,
    pub labels: Vec<usize>,
}

fn header(bytes: &[u8], magic: &[u8; 4], words: usize) -> Result<Vec<u32>> {
    let need = 4 + 4 * words;
    if bytes.len() < need {
        return Err(MatError::Length {
            expected: need,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != magic {
        return Err(MatError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let fields: Vec<u32> = bytes[4..need]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if fields[0] != FORMAT_VERSION {
        return Err(MatError::Format(format!(
            "unsupported version {}",
            fields[0]
        )));
    }
    Ok(fields)
}

pub fn encode_features(file: &FeatureFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * file.features.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FORMAT_VERSION,
        file.frames() as u32,
        file.dim() as u32,
        file.fps,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in file.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureFile> {
    let h = header(bytes, FEATURE_MAGIC, 4)?;
    let (t, d, fps) = (h[1] as usize, h[2] as usize, h[3]);
    let expected = 20 + 4 * t * d;
    if bytes.len() != expected {
        return Err(MatError::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(FeatureFile {
        fps,
        features: Tensor::new(vec![t, d], data)?,
    })
}

pub fn encode_labels(track: &LabelTrack) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 2 * track.labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    for v in [
        FORMAT_VERSION,
        track.labels.len() as u32,
        track.num_classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &track.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelTrack> {
    let h = header(bytes, LABEL_MAGIC, 3)?;
    let (t, c) = (h[1] as usize, h[2] as usize);
    let expected = 16 + 2 * t;
    if bytes.len() != expected {
        return Err(MatError::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let labels: Vec<usize> = bytes[16..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > c) {
        return Err(MatError::Label {
            index,
            label,
            max: c,
        });
    }
    Ok(LabelTrack {
        num_classes: c,
        labels,
    })
}

pub fn write_feature_file(path: &Path, file: &FeatureFile) -> Result<()> {
    fs::write(path, encode_features(file))?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    decode_features(&fs::read(path)?)
}

pub fn write_label_file(path: &Path, track: &LabelTrack) -> Result<()> {
    fs::write(path, encode_labels(track))?;
    Ok(())
}

pub fn read_label_file(path: &Path) -> Result<LabelTrack> {
    decode_labels(&fs::read(path)?)
}

/// Reads a feature file and its label track, checking that they agree.
pub fn load_feature_file(
    feature_path: &Path,
    label_path: &Path,
) -> Result<(FeatureFile, LabelTrack)> {
    let features = read_feature_file(feature_path)?;
    let labels = read_label_file(label_path)?;
    if labels.labels.len() != features.frames() {
        return Err(MatError::Format(format!(
            "{} has {} frames but {} has {} labels",
            feature_path.display(),
            features.frames(),
            label_path.display(),
            labels.labels.len()
        )));
    }
    Ok((features, labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest row. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub feature_path: PathBuf,
    pub label_path: PathBuf,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(entries)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            feature_path: base.join(e.feature_path),
            label_path: base.join(e.label_path),
            split: e.split,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_file(t: usize, d: usize) -> FeatureFile {
        let data = (0..t * d).map(|i| (i as f32 * 0.731).sin()).collect();
        FeatureFile {
            fps: 4,
            features: Tensor::new(vec![t, d], data).unwrap(),
        }
    }

    #[test]
    fn feature_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.matf");
        let file = sample_file(100, 64);
        write_feature_file(&path, &file).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back.features.shape(), &[100, 64]);
        assert_eq!(back, file);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encode_features(&sample_file(3, 2));
        bytes[..4].copy_from_slice(b"XATF");
        assert!(matches!(decode_features(&bytes), Err(MatError::Format(_))));
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let bytes = encode_features(&sample_file(3, 2));
        let err = decode_features(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(
            err,
            MatError::Length {
                expected: 44,
                actual: 41
            }
        ));
    }

    #[test]
    fn labels_round_trip_and_range_check() {
        let track = LabelTrack {
            num_classes: 3,
            labels: vec![0, 1, 3, 2, 2],
        };
        assert_eq!(decode_labels(&encode_labels(&track)).unwrap(), track);
        let bad = LabelTrack {
            num_classes: 2,
            labels: vec![0, 3],
        };
        assert!(matches!(
            decode_labels(&encode_labels(&bad)),
            Err(MatError::Label { index: 1, .. })
        ));
    }
}
