//! Objective clip quality: SNR, clipping and speech ratio folded into a
//! pseudo-MOS on the 1–5 scale, plus threshold filtering and an optional
//! external scorer.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{frame_power, AudioBuffer, FrameGrid};
use crate::external::{run_batch, ExternalCommand, ExternalError};
use crate::stats::{percentile, sorted_copy};
use crate::vad::{analyze, VadConfig};

pub const SNR_MIN_DB: f64 = -20.0;
pub const SNR_MAX_DB: f64 = 60.0;
pub const CLIP_LEVEL: f64 = 0.999;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("no frame is flagged as speech")]
    NoSpeech,
    #[error("scorer crashed: {0}")]
    ScorerCrashed(String),
    #[error("scorer protocol error: {0}")]
    ScorerProtocol(String),
    #[error("scorer timed out after {0:?}")]
    ScorerTimeout(std::time::Duration),
    #[error("scorer failed: {0}")]
    Scorer(ExternalError),
}

impl From<ExternalError> for QualityError {
    fn from(e: ExternalError) -> Self {
        match e {
            ExternalError::Crashed { status, stderr } => QualityError::ScorerCrashed(format!("{status}: {stderr}")),
            ExternalError::Protocol(m) => QualityError::ScorerProtocol(m),
            ExternalError::Timeout(t) => QualityError::ScorerTimeout(t),
            other => QualityError::Scorer(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Native,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub snr_db: f64,
    pub clip_ratio: f64,
    pub speech_ratio: f64,
    pub pseudo_mos: f64,
    pub source: ScoreSource,
}

/// Weights and anchor points of the native pseudo-MOS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MosWeights {
    pub snr: f64,
    pub clipping: f64,
    pub speech_ratio: f64,
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    pub clip_penalty: f64,
    pub speech_ratio_low: f64,
    pub speech_ratio_high: f64,
}

impl Default for MosWeights {
    fn default() -> Self {
        Self {
            snr: 0.6,
            clipping: 0.25,
            speech_ratio: 0.15,
            snr_low_db: 5.0,
            snr_high_db: 35.0,
            clip_penalty: 50.0,
            speech_ratio_low: 0.4,
            speech_ratio_high: 0.95,
        }
    }
}

impl MosWeights {
    pub fn validate(&self) -> Result<(), String> {
        let w = [self.snr, self.clipping, self.speech_ratio];
        if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err("quality weights must be non-negative and sum to 1".into());
        }
        if !(self.snr_high_db > self.snr_low_db) {
            return Err("quality.snr_high_db must exceed snr_low_db".into());
        }
        if !(self.clip_penalty >= 0.0) {
            return Err("quality.clip_penalty must be non-negative".into());
        }
        if !(0.0 < self.speech_ratio_low && self.speech_ratio_low <= self.speech_ratio_high && self.speech_ratio_high < 1.0) {
            return Err("quality speech ratio band must satisfy 0 < low <= high < 1".into());
        }
        Ok(())
    }
}

/// `10 log10(speech power / noise power)` over frames, clamped to [-20, 60] dB.
/// Without non-speech frames the noise power is the 5th percentile of all
/// frame powers.
pub fn estimate_snr(buf: &AudioBuffer, grid: FrameGrid, speech_flags: &[bool]) -> Result<f64, QualityError> {
    let powers = frame_power(buf, grid);
    snr_from_powers(&powers, speech_flags)
}

pub fn snr_from_powers(powers: &[f64], speech_flags: &[bool]) -> Result<f64, QualityError> {
    assert_eq!(powers.len(), speech_flags.len(), "one flag per frame");
    let (mut speech, mut n_speech, mut noise, mut n_noise) = (0.0, 0usize, 0.0, 0usize);
    for (&p, &s) in powers.iter().zip(speech_flags) {
        if s {
            speech += p;
            n_speech += 1;
        } else {
            noise += p;
            n_noise += 1;
        }
    }
    if n_speech == 0 {
        return Err(QualityError::NoSpeech);
    }
    let speech = speech / n_speech as f64;
    let noise = if n_noise > 0 { noise / n_noise as f64 } else { percentile(&sorted_copy(powers), 5.0) };
    let snr = if noise <= 0.0 {
        if speech > 0.0 { SNR_MAX_DB } else { SNR_MIN_DB }
    } else if speech <= 0.0 {
        SNR_MIN_DB
    } else {
        10.0 * (speech / noise).log10()
    };
    Ok(snr.clamp(SNR_MIN_DB, SNR_MAX_DB))
}

pub fn clip_ratio(buf: &AudioBuffer) -> f64 {
    if buf.is_empty() {
        return 0.0;
    }
    buf.samples.iter().filter(|s| s.abs() >= CLIP_LEVEL).count() as f64 / buf.len() as f64
}

fn speech_ratio_score(r: f64, w: &MosWeights) -> f64 {
    if r < w.speech_ratio_low {
        (r / w.speech_ratio_low).max(0.0)
    } else if r > w.speech_ratio_high {
        ((1.0 - r) / (1.0 - w.speech_ratio_high)).max(0.0)
    } else {
        1.0
    }
}

pub fn pseudo_mos(snr_db: f64, clip_ratio: f64, speech_ratio: f64, w: &MosWeights) -> f64 {
    let snr_score = ((snr_db - w.snr_low_db) / (w.snr_high_db - w.snr_low_db)).clamp(0.0, 1.0);
    let clip_score = (1.0 - w.clip_penalty * clip_ratio).clamp(0.0, 1.0);
    let sr_score = speech_ratio_score(speech_ratio, w);
    let mos = 1.0 + 4.0 * (w.snr * snr_score + w.clipping * clip_score + w.speech_ratio * sr_score);
    mos.clamp(1.0, 5.0)
}

/// Measures a clip natively. Speech frames come from the undilated VAD
/// decision; a clip with no speech frame gets the SNR floor.
pub fn assess(buf: &AudioBuffer, vad: &VadConfig, weights: &MosWeights) -> QualityReport {
    let (snr_db, speech_ratio) = match analyze(buf, vad) {
        Ok(a) if !a.raw.is_empty() => {
            let ratio = a.raw.iter().filter(|&&f| f).count() as f64 / a.raw.len() as f64;
            let snr = estimate_snr(buf, a.grid, &a.raw).unwrap_or(SNR_MIN_DB);
            (snr, ratio)
        }
        _ => (SNR_MIN_DB, 0.0),
    };
    let clip = clip_ratio(buf);
    QualityReport {
        snr_db,
        clip_ratio: clip,
        speech_ratio,
        pseudo_mos: pseudo_mos(snr_db, clip, speech_ratio, weights),
        source: ScoreSource::Native,
    }
}

/// Scores files through an external estimator. Every score must be a
/// decimal in [1, 5].
pub fn external_score(paths: &[PathBuf], cmd: &ExternalCommand) -> Result<BTreeMap<PathBuf, f64>, QualityError> {
    let raw = run_batch(cmd, paths)?;
    raw.into_iter()
        .map(|(path, value)| {
            let score: f64 = value
                .parse()
                .map_err(|_| QualityError::ScorerProtocol(format!("unparsable score '{value}' for {}", path.display())))?;
            if !(1.0..=5.0).contains(&score) {
                return Err(QualityError::ScorerProtocol(format!("score {score} for {} outside [1, 5]", path.display())));
            }
            Ok((path, score))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosThreshold {
    pub value: f64,
    /// Accept scores equal to the threshold.
    pub inclusive: bool,
}

impl Default for MosThreshold {
    fn default() -> Self {
        Self { value: 3.5, inclusive: false }
    }
}

impl MosThreshold {
    pub fn accepts(&self, score: f64) -> bool {
        if self.inclusive {
            score >= self.value
        } else {
            score > self.value
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition<T> {
    pub accepted: Vec<T>,
    pub rejected: Vec<T>,
}

/// Splits scored items at the threshold, preserving order.
pub fn filter_by_mos<T>(items: Vec<(T, f64)>, threshold: MosThreshold) -> Partition<(T, f64)> {
    let (accepted, rejected) = items.into_iter().partition(|(_, s)| threshold.accepts(*s));
    Partition { accepted, rejected }
}
