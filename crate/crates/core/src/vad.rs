//! Energy-based voice activity detection and silence trimming.
//!
//! Frames are classified against an adaptive threshold derived from the
//! clip's own noise floor (10th percentile of frame levels):
//!
//! ```text
//! threshold = max(abs_floor_dbfs, min(noise_floor + margin_db, peak - peak_headroom_db))
//! ```
//!
//! The peak cap only engages on low-contrast clips (no frame rises more than
//! `margin_db + peak_headroom_db` above the floor), where every frame within
//! `peak_headroom_db` of the loudest one counts as speech. The raw decision is
//! then dilated by `hangover_frames` on both sides.
//!
//! Trimming takes speech runs from the dilated decision, so pauses inside the
//! utterance keep their hangover padding, but the outer edges of the result
//! are the first and last raw speech frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{frame_rms_dbfs, AudioBuffer, FrameGrid};
use crate::stats::percentile;

#[derive(Debug, Error, PartialEq)]
pub enum VadError {
    #[error("audio buffer is empty")]
    EmptyAudio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrimMode {
    /// Keep everything between the first and last speech frame.
    #[default]
    Endpoints,
    /// Keep speech runs, bridging gaps up to `max_gap_ms`, and splice them together.
    Concatenate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub margin_db: f64,
    pub abs_floor_dbfs: f64,
    pub peak_headroom_db: f64,
    pub hangover_frames: usize,
    pub mode: TrimMode,
    pub max_gap_ms: f64,
    pub min_result_s: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 30.0,
            margin_db: 6.0,
            abs_floor_dbfs: -60.0,
            peak_headroom_db: 3.0,
            hangover_frames: 5,
            mode: TrimMode::Endpoints,
            max_gap_ms: 300.0,
            min_result_s: 1.0,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.frame_ms > 0.0 && self.frame_ms.is_finite()) {
            return Err("vad.frame_ms must be positive".into());
        }
        if !(self.min_result_s > 0.0 && self.min_result_s.is_finite()) {
            return Err("vad.min_result_s must be positive".into());
        }
        if !(self.max_gap_ms >= 0.0 && self.max_gap_ms.is_finite()) {
            return Err("vad.max_gap_ms must be non-negative".into());
        }
        if !(self.peak_headroom_db >= 0.0) || !self.margin_db.is_finite() || !self.abs_floor_dbfs.is_finite() {
            return Err("vad thresholds must be finite and peak_headroom_db non-negative".into());
        }
        Ok(())
    }

    pub fn grid_for(&self, buf: &AudioBuffer) -> FrameGrid {
        let frame = buf.samples_for_ms(self.frame_ms);
        FrameGrid::new(frame, frame, buf.len())
    }
}

/// Half-open sample range `[start_sample, end_sample)` holding speech.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechSegment {
    pub start_sample: usize,
    pub end_sample: usize,
}

impl SpeechSegment {
    pub fn len(&self) -> usize {
        self.end_sample - self.start_sample
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct VadResult {
    pub segments: Vec<SpeechSegment>,
    pub trimmed: AudioBuffer,
    pub flagged_short: bool,
}

/// Per-frame analysis behind a detection decision.
#[derive(Debug, Clone)]
pub struct VadAnalysis {
    pub grid: FrameGrid,
    pub levels_dbfs: Vec<f64>,
    pub threshold_dbfs: f64,
    /// Threshold decision before hangover dilation.
    pub raw: Vec<bool>,
    pub smoothed: Vec<bool>,
}

pub fn analyze(buf: &AudioBuffer, cfg: &VadConfig) -> Result<VadAnalysis, VadError> {
    if buf.is_empty() {
        return Err(VadError::EmptyAudio);
    }
    let grid = cfg.grid_for(buf);
    let levels = frame_rms_dbfs(buf, grid);
    if levels.is_empty() {
        return Ok(VadAnalysis { grid, levels_dbfs: levels, threshold_dbfs: cfg.abs_floor_dbfs, raw: vec![], smoothed: vec![] });
    }
    let mut sorted = levels.clone();
    sorted.sort_by(f64::total_cmp);
    let noise_floor = percentile(&sorted, 10.0);
    let peak = sorted[sorted.len() - 1];
    let threshold = cfg.abs_floor_dbfs.max((noise_floor + cfg.margin_db).min(peak - cfg.peak_headroom_db));
    let raw: Vec<bool> = levels.iter().map(|&l| l > threshold).collect();
    let smoothed = dilate(&raw, cfg.hangover_frames);
    Ok(VadAnalysis { grid, levels_dbfs: levels, threshold_dbfs: threshold, raw, smoothed })
}

/// Speech decision per frame, after hangover dilation.
pub fn detect_speech_frames(buf: &AudioBuffer, cfg: &VadConfig) -> Result<Vec<bool>, VadError> {
    Ok(analyze(buf, cfg)?.smoothed)
}

fn dilate(flags: &[bool], radius: usize) -> Vec<bool> {
    let n = flags.len();
    let mut out = vec![false; n];
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(n - 1);
        out[lo..=hi].iter_mut().for_each(|o| *o = true);
    }
    out
}

/// Maximal runs of `true` frames, as sample ranges.
fn speech_runs(flags: &[bool], grid: FrameGrid) -> Vec<SpeechSegment> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(SpeechSegment { start_sample: grid.start(s), end_sample: grid.start(i - 1) + grid.frame_len });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        let last = flags.len() - 1;
        runs.push(SpeechSegment { start_sample: grid.start(s), end_sample: grid.start(last) + grid.frame_len });
    }
    runs
}

pub fn segments_from_flags(flags: &[bool], grid: FrameGrid, cfg: &VadConfig, sample_rate: u32) -> Vec<SpeechSegment> {
    let runs = speech_runs(flags, grid);
    match cfg.mode {
        TrimMode::Endpoints => match (runs.first(), runs.last()) {
            (Some(first), Some(last)) => {
                vec![SpeechSegment { start_sample: first.start_sample, end_sample: last.end_sample }]
            }
            _ => vec![],
        },
        TrimMode::Concatenate => {
            let max_gap = (sample_rate as f64 * cfg.max_gap_ms / 1000.0).round() as usize;
            let mut merged: Vec<SpeechSegment> = Vec::with_capacity(runs.len());
            for run in runs {
                match merged.last_mut() {
                    Some(prev) if run.start_sample - prev.end_sample <= max_gap => prev.end_sample = run.end_sample,
                    _ => merged.push(run),
                }
            }
            merged
        }
    }
}

/// Splices the given segments of `buf` together in order.
pub fn extract_segments(buf: &AudioBuffer, segments: &[SpeechSegment]) -> AudioBuffer {
    let samples = segments
        .iter()
        .flat_map(|s| buf.samples[s.start_sample..s.end_sample].iter().copied())
        .collect();
    AudioBuffer { samples, sample_rate: buf.sample_rate }
}

/// Pulls the outermost segment edges in to the raw speech extent.
fn clip_outer_edges(segments: &mut Vec<SpeechSegment>, raw: &[bool], grid: FrameGrid) {
    let (Some(first), Some(last)) = (raw.iter().position(|&f| f), raw.iter().rposition(|&f| f)) else {
        segments.clear();
        return;
    };
    if let Some(s) = segments.first_mut() {
        s.start_sample = s.start_sample.max(grid.start(first));
    }
    if let Some(s) = segments.last_mut() {
        s.end_sample = s.end_sample.min(grid.start(last) + grid.frame_len);
    }
}

pub fn trim(buf: &AudioBuffer, cfg: &VadConfig) -> Result<VadResult, VadError> {
    let analysis = analyze(buf, cfg)?;
    let mut segments = segments_from_flags(&analysis.smoothed, analysis.grid, cfg, buf.sample_rate);
    clip_outer_edges(&mut segments, &analysis.raw, analysis.grid);
    let trimmed = extract_segments(buf, &segments);
    let flagged_short = trimmed.duration_s() < cfg.min_result_s;
    Ok(VadResult { segments, trimmed, flagged_short })
}
