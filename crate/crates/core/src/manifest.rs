//! Training manifest assembly: hash-based train/validation split,
//! pipe-separated metadata files and corpus statistics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("audio for clip '{0}' is missing")]
    MissingAudio(String),
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// One step of the SplitMix64 generator, used here as a 64-bit mixer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Validation iff `splitmix64(seed ^ fnv1a64(clip_id)) mod 1000 < val_permille`.
pub fn assign_split(clip_id: &str, seed: u64, val_permille: u32) -> Split {
    assert!(val_permille <= 1000, "val_permille must be within 0..=1000");
    let h = splitmix64(seed ^ fnv1a64(clip_id.as_bytes()));
    if h % 1000 < val_permille as u64 {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub speaker_id: String,
    pub normalized_text: String,
    pub duration_s: f64,
    pub split: Split,
    /// Source of the clip's audio; exported as `wavs/<clip_id>.wav`.
    pub audio: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub sample_rate: u32,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !(e.duration_s > 0.0) {
                return Err(ManifestError::Invalid(format!("clip '{}' has non-positive duration", e.clip_id)));
            }
            if !seen.insert(e.clip_id.as_str()) {
                return Err(ManifestError::Invalid(format!("duplicate clip '{}'", e.clip_id)));
            }
            if e.normalized_text.contains(['|', '\n', '\r']) {
                return Err(ManifestError::Invalid(format!("text of clip '{}' contains a separator", e.clip_id)));
            }
        }
        Ok(())
    }
}

pub const TRAIN_METADATA: &str = "metadata_train.csv";
pub const VAL_METADATA: &str = "metadata_val.csv";
pub const WAVS_DIR: &str = "wavs";

/// `clip_id|normalized_text` lines for one split, sorted by clip id.
pub fn metadata_lines(manifest: &DatasetManifest, split: Split) -> String {
    let mut entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.split == split).collect();
    entries.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    entries.iter().map(|e| format!("{}|{}\n", e.clip_id, e.normalized_text)).collect()
}

/// Writes both metadata files and copies every clip to `out_dir/wavs/`.
/// Stale `.wav` files from earlier exports are removed first.
pub fn write_metadata(manifest: &DatasetManifest, out_dir: &Path) -> Result<(), ManifestError> {
    manifest.validate()?;
    if let Some(missing) = manifest.entries.iter().find(|e| !e.audio.is_file()) {
        return Err(ManifestError::MissingAudio(missing.clip_id.clone()));
    }
    let wavs = out_dir.join(WAVS_DIR);
    fs::create_dir_all(&wavs)?;
    for entry in fs::read_dir(&wavs)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "wav") {
            fs::remove_file(path)?;
        }
    }
    manifest
        .entries
        .par_iter()
        .try_for_each(|e| fs::copy(&e.audio, wavs.join(format!("{}.wav", e.clip_id))).map(|_| ()))?;
    for (split, name) in [(Split::Train, TRAIN_METADATA), (Split::Val, VAL_METADATA)] {
        let mut f = fs::File::create(out_dir.join(name))?;
        f.write_all(metadata_lines(manifest, split).as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_clips: usize,
    pub n_speakers: usize,
    pub max_len_s: f64,
    pub min_len_s: f64,
    pub total_hours: f64,
}

impl DatasetStats {
    /// Placeholder written for an empty corpus.
    pub fn empty() -> Self {
        Self { n_clips: 0, n_speakers: 0, max_len_s: 0.0, min_len_s: 0.0, total_hours: 0.0 }
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Clip count, speaker count, longest/shortest clip in seconds and total
/// hours, each rounded to two decimals.
pub fn compute_stats(manifest: &DatasetManifest) -> Result<DatasetStats, ManifestError> {
    if manifest.entries.is_empty() {
        return Err(ManifestError::EmptyManifest);
    }
    let speakers: std::collections::BTreeSet<&str> = manifest.entries.iter().map(|e| e.speaker_id.as_str()).collect();
    let durations = manifest.entries.iter().map(|e| e.duration_s);
    let max = durations.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = durations.clone().fold(f64::INFINITY, f64::min);
    let total: f64 = durations.sum();
    Ok(DatasetStats {
        n_clips: manifest.entries.len(),
        n_speakers: speakers.len(),
        max_len_s: round2(max),
        min_len_s: round2(min),
        total_hours: round2(total / 3600.0),
    })
}
