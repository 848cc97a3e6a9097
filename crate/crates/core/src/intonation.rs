//! Intonation analysis: frame-wise F0 tracking, semitone-domain prosody
//! statistics per utterance and per speaker, and selection of the speaker
//! cohort whose intonation profiles lie closest together.
//!
//! The F0 tracker uses the cumulative-mean-normalized difference function:
//!
//! ```text
//! d(τ)  = Σ_j (x[j] - x[j + τ])²
//! d'(τ) = d(τ) · τ / Σ_{i=1..τ} d(i)
//! ```
//!
//! taking the first lag whose `d'` drops under the absolute threshold (then
//! descending to the local minimum), or the global minimum if it is below
//! the fallback threshold, refined by parabolic interpolation.
//!
//! Speaker similarity is judged on four features: median pitch, pitch spread,
//! P10–P90 range and mean absolute pitch movement per second. Features are
//! z-scored across candidates and the cohort minimizing the largest pairwise
//! Euclidean distance is chosen.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::stats::{mean, percentile, sorted_copy, std_dev};

/// Semitone reference frequency.
pub const SEMITONE_REF_HZ: f64 = 55.0;
pub const MIN_VOICED_FRAMES: usize = 10;
/// Largest number of subsets searched exhaustively.
pub const EXHAUSTIVE_LIMIT: u128 = 200_000;

#[derive(Debug, Error, PartialEq)]
pub enum IntonationError {
    #[error("buffer of {len} samples is shorter than the {window}-sample analysis window")]
    TooShort { len: usize, window: usize },
    #[error("sample rate {rate} Hz is too low for f_max {f_max} Hz")]
    RateTooLow { rate: u32, f_max: f64 },
    #[error("invalid pitch range [{f_min}, {f_max}] Hz")]
    InvalidRange { f_min: f64, f_max: f64 },
    #[error("only {voiced} voiced frames, at least {MIN_VOICED_FRAMES} required")]
    InsufficientVoicing { voiced: usize },
    #[error("need at least {k} speaker profiles (and k >= 2), got {available}")]
    NotEnoughSpeakers { k: usize, available: usize },
}

pub fn hz_to_semitones(f: f64) -> f64 {
    12.0 * (f / SEMITONE_REF_HZ).log2()
}

pub fn semitones_to_hz(st: f64) -> f64 {
    SEMITONE_REF_HZ * 2f64.powf(st / 12.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PitchConfig {
    pub f_min: f64,
    pub f_max: f64,
    pub threshold: f64,
    pub fallback_threshold: f64,
    pub hop_ms: f64,
    /// Analysis window length in samples at 22050 Hz; scaled with the rate.
    pub window_at_22050: usize,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self { f_min: 65.0, f_max: 500.0, threshold: 0.15, fallback_threshold: 0.3, hop_ms: 10.0, window_at_22050: 1024 }
    }
}

impl PitchConfig {
    pub fn window_len(&self, rate: u32) -> usize {
        (self.window_at_22050 as f64 * rate as f64 / 22_050.0).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Track {
    /// Per-frame F0, 0 where unvoiced.
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
    pub hop_s: f64,
}

impl F0Track {
    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            0.0
        } else {
            self.voiced_count() as f64 / self.voiced.len() as f64
        }
    }
}

pub fn extract_f0(buf: &AudioBuffer, cfg: &PitchConfig) -> Result<F0Track, IntonationError> {
    if !(cfg.f_min > 0.0 && cfg.f_max > cfg.f_min) {
        return Err(IntonationError::InvalidRange { f_min: cfg.f_min, f_max: cfg.f_max });
    }
    let rate = buf.sample_rate;
    if (rate as f64) < 4.0 * cfg.f_max {
        return Err(IntonationError::RateTooLow { rate, f_max: cfg.f_max });
    }
    let window = cfg.window_len(rate);
    let tau_min = ((rate as f64 / cfg.f_max).floor() as usize).max(2);
    let tau_max = (rate as f64 / cfg.f_min).ceil() as usize;
    if window < tau_max + 3 || buf.len() < window {
        return Err(IntonationError::TooShort { len: buf.len(), window: window.max(tau_max + 3) });
    }
    let integration = window - tau_max - 1;
    let hop = buf.samples_for_ms(cfg.hop_ms);
    let n_frames = (buf.len() - window) / hop + 1;

    let mut diff = vec![0.0; tau_max + 2];
    let mut cmnd = vec![1.0; tau_max + 2];
    let mut f0_hz = Vec::with_capacity(n_frames);
    let mut voiced = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let frame = &buf.samples[t * hop..t * hop + window];
        difference_function(frame, integration, &mut diff);
        cumulative_mean_normalize(&diff, &mut cmnd);
        let f0 = pick_lag(&cmnd, tau_min, tau_max, cfg)
            .map(|lag| rate as f64 / lag)
            .filter(|f| (cfg.f_min..=cfg.f_max).contains(f));
        f0_hz.push(f0.unwrap_or(0.0));
        voiced.push(f0.is_some());
    }
    Ok(F0Track { f0_hz, voiced, hop_s: hop as f64 / rate as f64 })
}

fn difference_function(frame: &[f64], integration: usize, out: &mut [f64]) {
    out[0] = 0.0;
    let head = &frame[..integration];
    for (tau, d) in out.iter_mut().enumerate().skip(1) {
        let shifted = &frame[tau..tau + integration];
        *d = head.iter().zip(shifted).map(|(a, b)| (a - b) * (a - b)).sum();
    }
}

fn cumulative_mean_normalize(diff: &[f64], out: &mut [f64]) {
    out[0] = 1.0;
    let mut running = 0.0;
    for tau in 1..diff.len() {
        running += diff[tau];
        out[tau] = if running > 0.0 { diff[tau] * tau as f64 / running } else { 1.0 };
    }
}

/// Fractional lag of the chosen dip, if any.
fn pick_lag(cmnd: &[f64], tau_min: usize, tau_max: usize, cfg: &PitchConfig) -> Option<f64> {
    let range = tau_min..=tau_max;
    let tau = match range.clone().find(|&t| cmnd[t] < cfg.threshold) {
        Some(mut t) => {
            while t < tau_max && cmnd[t + 1] < cmnd[t] {
                t += 1;
            }
            t
        }
        None => {
            let t = range.min_by(|&a, &b| cmnd[a].total_cmp(&cmnd[b]))?;
            if cmnd[t] >= cfg.fallback_threshold {
                return None;
            }
            t
        }
    };
    let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-1.0, 1.0) } else { 0.0 };
    Some(tau as f64 + shift)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtteranceProsody {
    pub median_st: f64,
    pub std_st: f64,
    pub range_st: f64,
    pub slope_st_s: f64,
    pub voiced_fraction: f64,
}

impl UtteranceProsody {
    pub fn features(&self) -> [f64; 4] {
        [self.median_st, self.std_st, self.range_st, self.slope_st_s]
    }
}

pub fn utterance_prosody(track: &F0Track) -> Result<UtteranceProsody, IntonationError> {
    let voiced = track.voiced_count();
    if voiced < MIN_VOICED_FRAMES {
        return Err(IntonationError::InsufficientVoicing { voiced });
    }
    let st: Vec<f64> = track
        .f0_hz
        .iter()
        .zip(&track.voiced)
        .filter(|(_, &v)| v)
        .map(|(&f, _)| hz_to_semitones(f))
        .collect();
    let sorted = sorted_copy(&st);
    let moves: Vec<f64> = track
        .f0_hz
        .windows(2)
        .zip(track.voiced.windows(2))
        .filter(|(_, v)| v[0] && v[1])
        .map(|(f, _)| (hz_to_semitones(f[1]) - hz_to_semitones(f[0])).abs() / track.hop_s)
        .collect();
    Ok(UtteranceProsody {
        median_st: percentile(&sorted, 50.0),
        std_st: std_dev(&st),
        range_st: percentile(&sorted, 90.0) - percentile(&sorted, 10.0),
        slope_st_s: if moves.is_empty() { 0.0 } else { mean(&moves) },
        voiced_fraction: track.voiced_fraction(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Mean of (median_st, std_st, range_st, slope_st_s) over the speaker's clips.
    pub features: [f64; 4],
    pub clip_count: usize,
}

/// Averages utterance features per speaker, keeping speakers with at least
/// `min_clips` analysed clips. Output is sorted by speaker id.
pub fn build_profiles<'a, I>(utterances: I, min_clips: usize) -> Vec<SpeakerProfile>
where
    I: IntoIterator<Item = (&'a str, &'a UtteranceProsody)>,
{
    let mut acc: std::collections::BTreeMap<&str, ([f64; 4], usize)> = Default::default();
    for (speaker, p) in utterances {
        let entry = acc.entry(speaker).or_insert(([0.0; 4], 0));
        for (sum, f) in entry.0.iter_mut().zip(p.features()) {
            *sum += f;
        }
        entry.1 += 1;
    }
    acc.into_iter()
        .filter(|(_, (_, n))| *n >= min_clips.max(1))
        .map(|(speaker, (sums, n))| SpeakerProfile {
            speaker_id: speaker.to_string(),
            features: sums.map(|s| s / n as f64),
            clip_count: n,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSelection {
    /// Sorted ascending.
    pub speaker_ids: Vec<String>,
    pub diameter: f64,
    pub method: SelectionMethod,
}

/// Features z-scored per dimension; constant dimensions become zero.
pub fn standardize(profiles: &[SpeakerProfile]) -> Vec<[f64; 4]> {
    let mut out = vec![[0.0; 4]; profiles.len()];
    for d in 0..4 {
        let col: Vec<f64> = profiles.iter().map(|p| p.features[d]).collect();
        let m = mean(&col);
        let s = std_dev(&col);
        if s > 1e-12 * m.abs().max(1.0) {
            for (row, v) in out.iter_mut().zip(&col) {
                row[d] = (v - m) / s;
            }
        }
    }
    out
}

pub fn distance_matrix(points: &[[f64; 4]]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| {
            points
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    c
}

fn subset_diameter(dist: &[Vec<f64>], members: &[usize]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, &a) in members.iter().enumerate() {
        for &b in &members[i + 1..] {
            d = d.max(dist[a][b]);
        }
    }
    d
}

/// Depth-first search over index combinations in lexicographic order with
/// pruning on the partial diameter; the first optimum found wins ties.
fn exhaustive(dist: &[Vec<f64>], k: usize) -> (Vec<usize>, f64) {
    struct Search<'a> {
        dist: &'a [Vec<f64>],
        k: usize,
        best: Option<(Vec<usize>, f64)>,
        current: Vec<usize>,
    }
    impl Search<'_> {
        fn go(&mut self, next: usize, partial: f64) {
            if let Some((_, best)) = &self.best {
                if partial >= *best {
                    return;
                }
            }
            if self.current.len() == self.k {
                self.best = Some((self.current.clone(), partial));
                return;
            }
            let n = self.dist.len();
            let remaining = self.k - self.current.len();
            for i in next..=n - remaining {
                let grown = self.current.iter().fold(partial, |d, &c| d.max(self.dist[c][i]));
                self.current.push(i);
                self.go(i + 1, grown);
                self.current.pop();
            }
        }
    }
    let mut s = Search { dist, k, best: None, current: Vec::with_capacity(k) };
    s.go(0, 0.0);
    s.best.expect("k <= n guarantees a subset")
}

fn greedy(dist: &[Vec<f64>], k: usize) -> (Vec<usize>, f64) {
    let n = dist.len();
    let mut seed = (0, 1);
    for i in 0..n {
        for j in i + 1..n {
            if dist[i][j] < dist[seed.0][seed.1] {
                seed = (i, j);
            }
        }
    }
    let mut members = vec![seed.0, seed.1];
    let mut diameter = dist[seed.0][seed.1];
    while members.len() < k {
        let (pick, d) = (0..n)
            .filter(|c| !members.contains(c))
            .map(|c| (c, members.iter().fold(diameter, |d, &m| d.max(dist[c][m]))))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("k <= n leaves a candidate");
        members.push(pick);
        diameter = d;
    }
    members.sort_unstable();
    (members, diameter)
}

/// Picks the `k` speakers whose standardized intonation features have the
/// smallest diameter. Exhaustive when `C(n, k) <= 200_000`, greedy otherwise.
pub fn select_cohort(profiles: &[SpeakerProfile], k: usize) -> Result<CohortSelection, IntonationError> {
    let method = if binomial(profiles.len(), k) <= EXHAUSTIVE_LIMIT {
        SelectionMethod::Exhaustive
    } else {
        SelectionMethod::Greedy
    };
    select_cohort_with(profiles, k, method)
}

pub fn select_cohort_with(
    profiles: &[SpeakerProfile],
    k: usize,
    method: SelectionMethod,
) -> Result<CohortSelection, IntonationError> {
    if k < 2 || profiles.len() < k {
        return Err(IntonationError::NotEnoughSpeakers { k, available: profiles.len() });
    }
    let mut sorted: Vec<&SpeakerProfile> = profiles.iter().collect();
    sorted.sort_by(|a, b| a.speaker_id.cmp(&b.speaker_id));
    let owned: Vec<SpeakerProfile> = sorted.into_iter().cloned().collect();
    let dist = distance_matrix(&standardize(&owned));
    let (members, diameter) = match method {
        SelectionMethod::Exhaustive => exhaustive(&dist, k),
        SelectionMethod::Greedy => greedy(&dist, k),
    };
    debug_assert!((subset_diameter(&dist, &members) - diameter).abs() < 1e-12);
    Ok(CohortSelection {
        speaker_ids: members.iter().map(|&i| owned[i].speaker_id.clone()).collect(),
        diameter,
        method,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerFeatures {
    pub speaker_id: String,
    pub clip_count: usize,
    pub median_st: f64,
    pub std_st: f64,
    pub range_st: f64,
    pub slope_st_s: f64,
}

/// Auditable record of a cohort decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub k: usize,
    pub speakers: Vec<SpeakerFeatures>,
    /// Standardized-feature distances, rows and columns in `speakers` order.
    pub distance_matrix: Vec<Vec<f64>>,
    pub cohort: Vec<String>,
    pub diameter: f64,
    pub method: Option<SelectionMethod>,
    pub note: Option<String>,
}

impl CohortReport {
    pub fn new(profiles: &[SpeakerProfile], k: usize, selection: Option<&CohortSelection>, note: Option<String>) -> Self {
        let mut sorted = profiles.to_vec();
        sorted.sort_by(|a, b| a.speaker_id.cmp(&b.speaker_id));
        let distance_matrix = if sorted.is_empty() { vec![] } else { distance_matrix(&standardize(&sorted)) };
        let speakers = sorted
            .iter()
            .map(|p| SpeakerFeatures {
                speaker_id: p.speaker_id.clone(),
                clip_count: p.clip_count,
                median_st: p.features[0],
                std_st: p.features[1],
                range_st: p.features[2],
                slope_st_s: p.features[3],
            })
            .collect();
        Self {
            k,
            speakers,
            distance_matrix,
            cohort: selection.map(|s| s.speaker_ids.clone()).unwrap_or_else(|| sorted.iter().map(|p| p.speaker_id.clone()).collect()),
            diameter: selection.map(|s| s.diameter).unwrap_or(0.0),
            method: selection.map(|s| s.method),
            note,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const RATE: u32 = 22_050;

    fn tone(freq: f64, secs: f64) -> AudioBuffer {
        let n = (RATE as f64 * secs) as usize;
        AudioBuffer {
            samples: (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / RATE as f64).sin()).collect(),
            sample_rate: RATE,
        }
    }

    fn track(f0: Vec<f64>) -> F0Track {
        let voiced = f0.iter().map(|&f| f > 0.0).collect();
        F0Track { f0_hz: f0, voiced, hop_s: 0.01 }
    }

    #[test]
    fn tracks_pure_tones() {
        for f in [110.0, 220.0, 330.0, 440.0] {
            let t = extract_f0(&tone(f, 1.0), &PitchConfig::default()).unwrap();
            assert!(t.voiced_fraction() >= 0.9, "{f} Hz voiced {}", t.voiced_fraction());
            let med = crate::stats::median(&t.f0_hz.iter().copied().filter(|&x| x > 0.0).collect::<Vec<_>>());
            assert!((med - f).abs() / f < 0.01, "{f} Hz -> {med}");
        }
    }

    #[test]
    fn noise_and_silence_unvoiced() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = AudioBuffer { samples: (0..RATE as usize).map(|_| rng.gen_range(-0.3..0.3)).collect(), sample_rate: RATE };
        assert!(extract_f0(&noise, &PitchConfig::default()).unwrap().voiced_fraction() < 0.2);
        let silence = AudioBuffer { samples: vec![0.0; RATE as usize], sample_rate: RATE };
        assert_eq!(extract_f0(&silence, &PitchConfig::default()).unwrap().voiced_count(), 0);
    }

    #[test]
    fn f0_errors() {
        let short = AudioBuffer { samples: vec![0.0; 500], sample_rate: RATE };
        assert!(matches!(extract_f0(&short, &PitchConfig::default()), Err(IntonationError::TooShort { .. })));
        let low = AudioBuffer { samples: vec![0.0; 5000], sample_rate: 1000 };
        assert!(matches!(extract_f0(&low, &PitchConfig::default()), Err(IntonationError::RateTooLow { .. })));
    }

    #[test]
    fn prosody_of_constant_pitch() {
        let p = utterance_prosody(&track(vec![220.0; 50])).unwrap();
        assert!((p.median_st - 24.0).abs() < 1e-9);
        assert_eq!((p.std_st, p.range_st, p.slope_st_s), (0.0, 0.0, 0.0));
        assert_eq!(p.voiced_fraction, 1.0);
    }

    #[test]
    fn prosody_of_octave_glide() {
        // 101 frames spanning one second, linear glide 220 -> 440 Hz. For a
        // monotone path the mean movement is the total 12 st over 1 s.
        let f0 = (0..=100).map(|i| 220.0 + 220.0 * i as f64 / 100.0).collect();
        let p = utterance_prosody(&track(f0)).unwrap();
        assert!((p.slope_st_s - 12.0).abs() < 1e-6);
    }

    #[test]
    fn prosody_of_alternation() {
        let f0 = (0..40).map(|i| if i % 2 == 0 { 220.0 } else { 233.08 }).collect();
        let p = utterance_prosody(&track(f0)).unwrap();
        assert!((p.std_st - 0.5).abs() < 1e-3);
        assert!((p.range_st - 1.0).abs() < 2e-3);
    }

    #[test]
    fn prosody_needs_voicing() {
        let mut f0 = vec![0.0; 30];
        f0[..9].iter_mut().for_each(|f| *f = 200.0);
        assert_eq!(utterance_prosody(&track(f0)), Err(IntonationError::InsufficientVoicing { voiced: 9 }));
    }

    #[test]
    fn semitone_roundtrip() {
        for f in [30.0, 55.0, 110.0, 220.0, 317.3, 1000.0] {
            assert!((semitones_to_hz(hz_to_semitones(f)) - f).abs() / f < 1e-9);
        }
        assert!((hz_to_semitones(220.0) - 24.0).abs() < 1e-12);
    }

    fn profile(id: &str, f: [f64; 4]) -> SpeakerProfile {
        SpeakerProfile { speaker_id: id.into(), features: f, clip_count: 50 }
    }

    fn random_profiles(rng: &mut ChaCha8Rng, n: usize) -> Vec<SpeakerProfile> {
        (0..n)
            .map(|i| profile(&format!("spk{i:02}"), [rng.gen_range(18.0..30.0), rng.gen_range(0.5..3.0), rng.gen_range(1.0..8.0), rng.gen_range(5.0..40.0)]))
            .collect()
    }

    #[test]
    fn profiles_average_and_filter() {
        let a = UtteranceProsody { median_st: 24.0, std_st: 1.0, range_st: 2.0, slope_st_s: 10.0, voiced_fraction: 0.8 };
        let b = UtteranceProsody { median_st: 26.0, std_st: 3.0, range_st: 4.0, slope_st_s: 20.0, voiced_fraction: 0.8 };
        let utts = [("s2", &a), ("s1", &a), ("s1", &b)];
        let profiles = build_profiles(utts.iter().map(|(s, p)| (*s, *p)), 2);
        assert_eq!(profiles.len(), 1);
        assert_eq!(profiles[0].speaker_id, "s1");
        assert_eq!(profiles[0].features, [25.0, 2.0, 3.0, 15.0]);
        assert_eq!(build_profiles(utts.iter().map(|(s, p)| (*s, *p)), 1).len(), 2);
    }

    #[test]
    fn whole_set_when_k_equals_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = random_profiles(&mut rng, 7);
        let sel = select_cohort(&ps, 7).unwrap();
        assert_eq!(sel.speaker_ids.len(), 7);
        let dist = distance_matrix(&standardize(&ps));
        let full = dist.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        assert!((sel.diameter - full).abs() < 1e-12);
    }

    #[test]
    fn not_enough_speakers() {
        let ps = vec![profile("a", [0.0; 4])];
        assert!(matches!(select_cohort(&ps, 2), Err(IntonationError::NotEnoughSpeakers { .. })));
        assert!(matches!(select_cohort(&ps, 1), Err(IntonationError::NotEnoughSpeakers { .. })));
    }

    #[test]
    fn constant_dimension_standardizes_to_zero() {
        let ps = vec![profile("a", [1.0, 5.0, 0.0, 0.0]), profile("b", [3.0, 5.0, 0.0, 0.0])];
        assert_eq!(standardize(&ps), vec![[-1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]);
    }

    #[test]
    fn large_instances_fall_back_to_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = random_profiles(&mut rng, 40);
        assert!(binomial(40, 6) > EXHAUSTIVE_LIMIT);
        let sel = select_cohort(&ps, 6).unwrap();
        assert_eq!(sel.method, SelectionMethod::Greedy);
        assert_eq!(sel.speaker_ids.len(), 6);
        assert_eq!(binomial(12, 6), 924);
    }

    #[test]
    fn report_lists_every_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = random_profiles(&mut rng, 5);
        let sel = select_cohort(&ps, 3).unwrap();
        let r = CohortReport::new(&ps, 3, Some(&sel), None);
        assert_eq!(r.speakers.len(), 5);
        assert_eq!(r.distance_matrix.len(), 5);
        assert_eq!(r.cohort, sel.speaker_ids);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<CohortReport>(&json).unwrap(), r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariant_under_affine_feature_maps(seed in any::<u64>(), scale in prop::array::uniform4(0.1f64..10.0), shift in prop::array::uniform4(-50.0f64..50.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ps = random_profiles(&mut rng, 9);
            let moved: Vec<SpeakerProfile> = ps
                .iter()
                .map(|p| SpeakerProfile { features: std::array::from_fn(|d| p.features[d] * scale[d] + shift[d]), ..p.clone() })
                .collect();
            let a = select_cohort(&ps, 4).unwrap();
            let b = select_cohort(&moved, 4).unwrap();
            prop_assert_eq!(a.speaker_ids, b.speaker_ids);
            prop_assert!((a.diameter - b.diameter).abs() < 1e-9);
        }

        #[test]
        fn greedy_never_beats_exhaustive(seed in any::<u64>(), n in 4usize..=12, k in 2usize..=4) {
            prop_assume!(k <= n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ps = random_profiles(&mut rng, n);
            let e = select_cohort_with(&ps, k, SelectionMethod::Exhaustive).unwrap();
            let g = select_cohort_with(&ps, k, SelectionMethod::Greedy).unwrap();
            prop_assert!(g.diameter >= e.diameter);
        }
    }
}
