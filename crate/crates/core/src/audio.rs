//! Mono audio buffers, 16-bit PCM WAV I/O, band-limited resampling and
//! frame-level energy measurements shared by every DSP stage.

use std::fs;
use std::path::Path;

use thiserror::Error;

/// Default training sample rate of the exported corpus.
pub const TARGET_SAMPLE_RATE: u32 = 22_050;

/// Floor applied to frame levels so silent frames stay finite.
pub const DBFS_FLOOR: f64 = -180.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated WAV file: {0}")]
    TruncatedFile(String),
    #[error("invalid audio buffer: {0}")]
    InvalidBuffer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono samples in `[-1, 1]` at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidBuffer("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidBuffer(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Builds a buffer, clamping every sample into `[-1, 1]`.
    pub fn clamped(samples: Vec<f64>, sample_rate: u32) -> Self {
        let samples = samples.into_iter().map(clamp_unit).collect();
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Number of samples spanning `ms` milliseconds, at least one.
    pub fn samples_for_ms(&self, ms: f64) -> usize {
        samples_for_ms(self.sample_rate, ms)
    }
}

pub fn samples_for_ms(sample_rate: u32, ms: f64) -> usize {
    ((sample_rate as f64 * ms / 1000.0).round() as usize).max(1)
}

fn clamp_unit(s: f64) -> f64 {
    if s.is_nan() {
        0.0
    } else {
        s.clamp(-1.0, 1.0)
    }
}

/// Regular framing of a signal: frames of `frame_len` samples every `hop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    pub frame_len: usize,
    pub hop: usize,
    pub count: usize,
}

impl FrameGrid {
    pub fn new(frame_len: usize, hop: usize, signal_len: usize) -> Self {
        assert!(hop >= 1 && frame_len >= hop, "frame grid requires frame_len >= hop >= 1");
        let count = if signal_len >= frame_len {
            (signal_len - frame_len) / hop + 1
        } else {
            0
        };
        Self { frame_len, hop, count }
    }

    pub fn start(&self, frame: usize) -> usize {
        frame * self.hop
    }

    pub fn range(&self, frame: usize) -> std::ops::Range<usize> {
        let start = self.start(frame);
        start..start + self.frame_len
    }
}

/// Mean square of each frame.
pub fn frame_power(buf: &AudioBuffer, grid: FrameGrid) -> Vec<f64> {
    (0..grid.count)
        .map(|f| {
            let frame = &buf.samples[grid.range(f)];
            frame.iter().map(|s| s * s).sum::<f64>() / frame.len() as f64
        })
        .collect()
}

pub fn power_to_dbfs(power: f64) -> f64 {
    20.0 * power.sqrt().max(1e-9).log10()
}

/// Per-frame RMS level in dBFS, floored at [`DBFS_FLOOR`].
pub fn frame_rms_dbfs(buf: &AudioBuffer, grid: FrameGrid) -> Vec<f64> {
    frame_power(buf, grid).into_iter().map(power_to_dbfs).collect()
}

// ---------------------------------------------------------------------------
// WAV

struct FmtChunk {
    format_tag: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
    sub_format_pcm: bool,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a 16-bit PCM RIFF/WAVE file, averaging channels to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && &bytes[..4] != b"RIFF" {
            return Err(AudioError::UnsupportedFormat("missing RIFF header".into()));
        }
        return Err(AudioError::TruncatedFile("shorter than RIFF header".into()));
    }
    if &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::UnsupportedFormat("not a RIFF/WAVE container".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                AudioError::TruncatedFile(format!(
                    "chunk '{}' declares {size} bytes beyond end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(AudioError::UnsupportedFormat("fmt chunk too small".into()));
                }
                let format_tag = read_u16(body, 0);
                // WAVE_FORMAT_EXTENSIBLE carries the real format in a sub-format GUID.
                let sub_format_pcm = format_tag == 0xFFFE && body.len() >= 26 && read_u16(body, 24) == 1;
                fmt = Some(FmtChunk {
                    format_tag,
                    channels: read_u16(body, 2),
                    sample_rate: read_u32(body, 4),
                    bits_per_sample: read_u16(body, 14),
                    sub_format_pcm,
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| AudioError::UnsupportedFormat("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::UnsupportedFormat("missing data chunk".into()))?;
    if !(fmt.format_tag == 1 || fmt.sub_format_pcm) {
        return Err(AudioError::UnsupportedFormat(format!(
            "format tag {:#06x} is not integer PCM",
            fmt.format_tag
        )));
    }
    if fmt.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{}-bit samples, only 16-bit PCM is supported",
            fmt.bits_per_sample
        )));
    }
    if fmt.channels == 0 || fmt.sample_rate == 0 {
        return Err(AudioError::UnsupportedFormat("zero channels or sample rate".into()));
    }

    let channels = fmt.channels as usize;
    let frame_bytes = 2 * channels;
    let n_frames = data.len() / frame_bytes;
    let samples = data[..n_frames * frame_bytes]
        .chunks_exact(frame_bytes)
        .map(|frame| {
            let sum: f64 = frame
                .chunks_exact(2)
                .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                .sum();
            sum / channels as f64
        })
        .collect();
    Ok(AudioBuffer { samples, sample_rate: fmt.sample_rate })
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    decode_wav(&fs::read(path)?)
}

fn to_pcm16(s: f64) -> i16 {
    (clamp_unit(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a buffer as a mono 16-bit PCM WAV file image.
pub fn encode_wav(buf: &AudioBuffer) -> Vec<u8> {
    let data_len = (buf.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &buf.samples {
        out.extend_from_slice(&to_pcm16(s).to_le_bytes());
    }
    out
}

pub fn write_wav(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), AudioError> {
    fs::write(path, encode_wav(buf))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Resampling

const TAPS: usize = 64;
const HALF_TAPS: usize = TAPS / 2;
const KAISER_BETA: f64 = 8.6;
const CUTOFF_FRACTION: f64 = 0.45;
const MAX_PHASE_TABLE: u64 = 4096;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct SincKernel {
    /// Normalized cutoff: twice the cutoff frequency over the input rate.
    cutoff: f64,
    i0_beta: f64,
}

impl SincKernel {
    fn new(in_rate: u32, out_rate: u32) -> Self {
        let cutoff = 2.0 * CUTOFF_FRACTION * in_rate.min(out_rate) as f64 / in_rate as f64;
        Self { cutoff, i0_beta: bessel_i0(KAISER_BETA) }
    }

    fn eval(&self, offset: f64) -> f64 {
        let r = offset / HALF_TAPS as f64;
        if r.abs() > 1.0 {
            return 0.0;
        }
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
        let x = self.cutoff * offset;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        };
        self.cutoff * sinc * window
    }

    /// Taps for input samples `i - 31 ..= i + 32` around fractional position `i + frac`,
    /// normalized to unit DC gain.
    fn phase(&self, frac: f64) -> [f64; TAPS] {
        let mut taps = [0.0; TAPS];
        for (j, tap) in taps.iter_mut().enumerate() {
            let offset = frac + (HALF_TAPS as f64 - 1.0) - j as f64;
            *tap = self.eval(offset);
        }
        let sum: f64 = taps.iter().sum();
        if sum.abs() > 1e-12 {
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        taps
    }
}

/// Windowed-sinc sample-rate conversion (Kaiser window, 64 taps per phase,
/// cutoff at 0.45 of the lower of the two rates).
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> AudioBuffer {
    assert!(target_rate > 0, "target rate must be positive");
    if buf.sample_rate == target_rate {
        return buf.clone();
    }
    let in_rate = buf.sample_rate as u64;
    let out_rate = target_rate as u64;
    let g = gcd(in_rate, out_rate);
    let (up, down) = (out_rate / g, in_rate / g);
    let n_in = buf.samples.len() as u128;
    let n_out = ((n_in * up as u128 + down as u128 / 2) / down as u128) as usize;

    let kernel = SincKernel::new(buf.sample_rate, target_rate);
    let table: Option<Vec<[f64; TAPS]>> = (up <= MAX_PHASE_TABLE)
        .then(|| (0..up).map(|p| kernel.phase(p as f64 / up as f64)).collect());

    let x = &buf.samples;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n as u128 * down as u128;
        let base = (pos / up as u128) as i64;
        let phase = (pos % up as u128) as u64;
        let taps_owned;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                taps_owned = kernel.phase(phase as f64 / up as f64);
                &taps_owned
            }
        };
        let first = base - (HALF_TAPS as i64 - 1);
        let mut acc = 0.0;
        for (j, &tap) in taps.iter().enumerate() {
            let k = first + j as i64;
            if k >= 0 && (k as usize) < x.len() {
                acc += tap * x[k as usize];
            }
        }
        out.push(clamp_unit(acc));
    }
    AudioBuffer { samples: out, sample_rate: target_rate }
}
