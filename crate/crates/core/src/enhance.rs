//! STFT spectral gating for stationary background noise.
//!
//! Each bin is scaled by `max(beta, (|X| - alpha * N) / |X|)` where `N` is the
//! per-bin noise magnitude estimate, then the signal is rebuilt by weighted
//! overlap-add.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, FrameGrid};
use crate::stats::{percentile, sorted_copy};

#[derive(Debug, Error, PartialEq)]
pub enum EnhanceError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid enhancement parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { fft_len: 1024, hop: 256 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), EnhanceError> {
        if !self.fft_len.is_power_of_two() || self.fft_len < 2 {
            return Err(EnhanceError::InvalidParams(format!("fft_len {} is not a power of two", self.fft_len)));
        }
        if self.hop == 0 || !self.fft_len.is_multiple_of(self.hop) {
            return Err(EnhanceError::InvalidParams(format!("hop {} does not divide fft_len {}", self.hop, self.fft_len)));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.fft_len as f64;
        (0..self.fft_len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// Over-subtraction factor.
    pub alpha: f64,
    /// Gain floor.
    pub beta: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self { alpha: 1.5, beta: 0.1 }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<(), EnhanceError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(EnhanceError::InvalidParams("alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(EnhanceError::InvalidParams("beta must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One-sided STFT: `frames[t][k]` for bins `0..=fft_len/2`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: Vec<Vec<Complex64>>,
    pub cfg: StftConfig,
    pub sample_rate: u32,
}

struct Transforms {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Transforms {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }
}

pub fn stft(buf: &AudioBuffer, cfg: StftConfig) -> Result<Spectrogram, EnhanceError> {
    cfg.validate()?;
    if buf.len() < cfg.fft_len {
        return Err(EnhanceError::ShapeMismatch(format!(
            "signal of {} samples is shorter than fft_len {}",
            buf.len(),
            cfg.fft_len
        )));
    }
    let fft = Transforms::new(cfg.fft_len).forward;
    let window = cfg.window();
    let grid = FrameGrid::new(cfg.fft_len, cfg.hop, buf.len());
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let frames = (0..grid.count)
        .map(|t| {
            let mut frame: Vec<Complex64> = buf.samples[grid.range(t)]
                .iter()
                .zip(&window)
                .map(|(s, w)| Complex64::new(s * w, 0.0))
                .collect();
            fft.process_with_scratch(&mut frame, &mut scratch);
            frame.truncate(cfg.bins());
            frame
        })
        .collect();
    Ok(Spectrogram { frames, cfg, sample_rate: buf.sample_rate })
}

/// Weighted overlap-add inverse. Output length is `(frames - 1) * hop + fft_len`.
pub fn istft(spec: &Spectrogram) -> Result<AudioBuffer, EnhanceError> {
    let cfg = spec.cfg;
    cfg.validate()?;
    let n = cfg.fft_len;
    if let Some((t, f)) = spec.frames.iter().enumerate().find(|(_, f)| f.len() != cfg.bins()) {
        return Err(EnhanceError::ShapeMismatch(format!("frame {t} has {} bins, expected {}", f.len(), cfg.bins())));
    }
    if spec.frames.is_empty() {
        return Ok(AudioBuffer { samples: vec![], sample_rate: spec.sample_rate });
    }
    let ifft = Transforms::new(n).inverse;
    let window = cfg.window();
    let out_len = (spec.frames.len() - 1) * cfg.hop + n;
    let mut acc = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut scratch = vec![Complex64::default(); ifft.get_inplace_scratch_len()];
    let mut full = vec![Complex64::default(); n];
    for (t, frame) in spec.frames.iter().enumerate() {
        full[..frame.len()].copy_from_slice(frame);
        for k in frame.len()..n {
            full[k] = frame[n - k].conj();
        }
        ifft.process_with_scratch(&mut full, &mut scratch);
        let start = t * cfg.hop;
        for i in 0..n {
            acc[start + i] += full[i].re / n as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let samples = acc
        .iter()
        .zip(&norm)
        .map(|(a, w)| if *w > 1e-10 { a / w } else { 0.0 })
        .collect();
    Ok(AudioBuffer { samples, sample_rate: spec.sample_rate })
}

/// Per-bin noise magnitude estimate, `fft_len / 2 + 1` non-negative entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile(pub Vec<f64>);

impl NoiseProfile {
    pub fn zeros(cfg: StftConfig) -> Self {
        Self(vec![0.0; cfg.bins()])
    }
}

/// With speech flags: mean magnitude over non-speech frames (all frames if
/// none are non-speech). Without: per-bin 20th-percentile magnitude.
pub fn estimate_noise_profile(spec: &Spectrogram, speech_flags: Option<&[bool]>) -> Result<NoiseProfile, EnhanceError> {
    let bins = spec.cfg.bins();
    if spec.frames.is_empty() {
        return Ok(NoiseProfile(vec![0.0; bins]));
    }
    match speech_flags {
        Some(flags) => {
            if flags.len() != spec.frames.len() {
                return Err(EnhanceError::ShapeMismatch(format!(
                    "{} speech flags for {} frames",
                    flags.len(),
                    spec.frames.len()
                )));
            }
            let mut chosen: Vec<&Vec<Complex64>> =
                spec.frames.iter().zip(flags).filter(|(_, &s)| !s).map(|(f, _)| f).collect();
            if chosen.is_empty() {
                chosen = spec.frames.iter().collect();
            }
            let mut profile = vec![0.0; bins];
            for frame in &chosen {
                for (p, x) in profile.iter_mut().zip(frame.iter()) {
                    *p += x.norm();
                }
            }
            profile.iter_mut().for_each(|p| *p /= chosen.len() as f64);
            Ok(NoiseProfile(profile))
        }
        None => {
            let profile = (0..bins)
                .map(|k| {
                    let mags: Vec<f64> = spec.frames.iter().map(|f| f[k].norm()).collect();
                    percentile(&sorted_copy(&mags), 20.0)
                })
                .collect();
            Ok(NoiseProfile(profile))
        }
    }
}

pub fn gain(magnitude: f64, noise: f64, params: GateParams) -> f64 {
    if magnitude <= 0.0 {
        params.beta
    } else {
        params.beta.max((magnitude - params.alpha * noise) / magnitude)
    }
}

/// Zero-pads so every original sample sits under a full set of overlapping
/// frames. Returns the padded buffer and the left offset.
fn pad_for_gating(buf: &AudioBuffer, cfg: StftConfig) -> (AudioBuffer, usize) {
    let left = cfg.fft_len - cfg.hop;
    let mut len = left + buf.len() + cfg.fft_len;
    let rem = (len - cfg.fft_len) % cfg.hop;
    if rem != 0 {
        len += cfg.hop - rem;
    }
    let mut samples = vec![0.0; len];
    samples[left..left + buf.len()].copy_from_slice(&buf.samples);
    (AudioBuffer { samples, sample_rate: buf.sample_rate }, left)
}

/// Applies the spectral gate. Output has the input's length and is clamped
/// to `[-1, 1]`.
pub fn spectral_gate(
    buf: &AudioBuffer,
    profile: &NoiseProfile,
    params: GateParams,
    cfg: StftConfig,
) -> Result<AudioBuffer, EnhanceError> {
    params.validate()?;
    cfg.validate()?;
    if profile.0.len() != cfg.bins() {
        return Err(EnhanceError::ShapeMismatch(format!(
            "noise profile has {} bins, expected {}",
            profile.0.len(),
            cfg.bins()
        )));
    }
    if buf.is_empty() {
        return Ok(buf.clone());
    }
    let (padded, offset) = pad_for_gating(buf, cfg);
    let mut spec = stft(&padded, cfg)?;
    for frame in spec.frames.iter_mut() {
        for (x, &noise) in frame.iter_mut().zip(&profile.0) {
            *x *= gain(x.norm(), noise, params);
        }
    }
    let rebuilt = istft(&spec)?;
    Ok(AudioBuffer::clamped(rebuilt.samples[offset..offset + buf.len()].to_vec(), buf.sample_rate))
}

/// Maps per-frame VAD decisions onto STFT frames: an STFT frame counts as
/// non-speech only when every VAD frame it overlaps is non-speech.
pub fn stft_speech_flags(vad_flags: &[bool], vad_grid: FrameGrid, stft_grid: FrameGrid) -> Vec<bool> {
    (0..stft_grid.count)
        .map(|t| {
            let r = stft_grid.range(t);
            let first = r.start / vad_grid.hop;
            let last = (r.end - 1) / vad_grid.hop;
            (first..=last).any(|f| vad_flags.get(f).copied().unwrap_or(true))
        })
        .collect()
}

/// Gates `buf` using a noise profile learned from its own non-speech frames.
/// Falls back to the percentile estimate on the padded signal when the clip
/// is shorter than one FFT frame.
pub fn denoise_with_vad(
    buf: &AudioBuffer,
    vad_flags: &[bool],
    vad_grid: FrameGrid,
    params: GateParams,
    cfg: StftConfig,
) -> Result<AudioBuffer, EnhanceError> {
    cfg.validate()?;
    if buf.is_empty() {
        return Ok(buf.clone());
    }
    let profile = if buf.len() >= cfg.fft_len {
        let spec = stft(buf, cfg)?;
        let grid = FrameGrid::new(cfg.fft_len, cfg.hop, buf.len());
        let flags = stft_speech_flags(vad_flags, vad_grid, grid);
        estimate_noise_profile(&spec, Some(&flags))?
    } else {
        let (padded, _) = pad_for_gating(buf, cfg);
        estimate_noise_profile(&stft(&padded, cfg)?, None)?
    };
    spectral_gate(buf, &profile, params, cfg)
}
