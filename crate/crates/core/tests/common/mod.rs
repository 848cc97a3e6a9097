//! Synthetic corpus with a known curation outcome.
//!
//! Twelve speakers record five clips each. Six of them share almost the same
//! intonation (base pitch near 220 Hz, 2 st contour at 1.5 Hz); the other six
//! differ in base pitch, contour depth and contour speed. Ten clips (at most
//! one per speaker) are buried in white noise at 0 dB SNR and five carry
//! transcripts with fewer than three words. The expected decision for every
//! clip follows from that construction alone.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use curate_core::audio::{write_wav, AudioBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SOURCE_RATE: u32 = 16_000;
pub const SPEAKERS: usize = 12;
pub const CLIPS_PER_SPEAKER: usize = 5;
/// Indices of the planted tight-intonation speakers.
pub const PLANTED: [usize; 6] = [1, 3, 4, 7, 9, 10];
/// (speaker, clip) pairs recorded in heavy noise.
pub const NOISY: [(usize, usize); 10] =
    [(0, 2), (1, 0), (2, 4), (3, 3), (4, 1), (5, 2), (6, 0), (7, 4), (8, 1), (10, 2)];
/// (speaker, clip) pairs with transcripts shorter than three words.
pub const SHORT_TEXT: [(usize, usize); 5] = [(1, 3), (4, 4), (9, 0), (0, 1), (11, 3)];

/// (base Hz, contour depth in semitones, contour rate in Hz) for non-planted speakers.
const OUTLIER_VOICES: [(f64, f64, f64); 6] =
    [(125.0, 0.7, 0.6), (165.0, 4.5, 3.0), (300.0, 1.2, 4.0), (340.0, 4.0, 1.0), (262.0, 3.5, 2.5), (185.0, 0.4, 0.9)];

const SENTENCES: [&str; 12] = [
    "yantuma ŋende ndeete ekidomola ky'amazzi.",
    "abaana bazannya mu luggya lw'essomero",
    "omukazi agenze mu katale okugula emmere",
    "enkuba etonnya nnyingi nnyo leero",
    "tujja kusoma ebitabo bino enkya",
    "omusawo akebera abalwadde mu ddwaliro",
    "ŋŋaanga yange eri mu kibuga",
    "taata alima kasooli mu nnimiro ye",
    "emmotoka eno ey'omuyimbi ddene nnyo",
    "bwe njuba nnyimba ennyimba z'edda",
    "ensi yaffe nnungi nnyo era ya bugagga",
    "tugende tulabe omupiira ku kisaawe",
];
const SHORT_SENTENCES: [&str; 5] = ["webale..", "oli otya", "kale", "weeraba!!", "nsanyuse nnyo"];

#[derive(Debug, Clone, Copy)]
pub struct Voice {
    pub base_hz: f64,
    pub depth_st: f64,
    pub rate_hz: f64,
}

pub fn voice_for(speaker: usize, rng: &mut ChaCha8Rng) -> Voice {
    if PLANTED.contains(&speaker) {
        Voice {
            base_hz: 220.0 * (1.0 + rng.gen_range(-0.01..0.01)),
            depth_st: 2.0 + rng.gen_range(-0.05..0.05),
            rate_hz: 1.5 + rng.gen_range(-0.03..0.03),
        }
    } else {
        let idx = (0..SPEAKERS).filter(|s| !PLANTED.contains(s)).position(|s| s == speaker).unwrap();
        let (base_hz, depth_st, rate_hz) = OUTLIER_VOICES[idx];
        Voice { base_hz, depth_st, rate_hz }
    }
}

/// Harmonic tone with a sinusoidal pitch contour, 1/h harmonic amplitudes
/// below 3.5 kHz, 20 ms fades, scaled to `rms`.
pub fn synth_voice(v: Voice, seconds: f64, rate: u32, rms: f64, phase: f64) -> Vec<f64> {
    let n = (seconds * rate as f64).round() as usize;
    let mut out = Vec::with_capacity(n);
    let mut theta = 0.0f64;
    for i in 0..n {
        let t = i as f64 / rate as f64;
        let st = v.depth_st * (2.0 * PI * v.rate_hz * t + phase).sin();
        let f0 = v.base_hz * 2f64.powf(st / 12.0);
        theta += 2.0 * PI * f0 / rate as f64;
        let harmonics = (3_500.0 / f0).floor().max(1.0) as usize;
        let s: f64 = (1..=harmonics).map(|h| (h as f64 * theta).sin() / h as f64).sum();
        out.push(s);
    }
    let fade = (0.02 * rate as f64) as usize;
    for i in 0..fade.min(n / 2) {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        out[i] *= g;
        out[n - 1 - i] *= g;
    }
    let cur = (out.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    out.iter_mut().for_each(|x| *x *= rms / cur);
    out
}

/// Uniform white noise with the given RMS.
pub fn white(n: usize, rms: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = rms * 3f64.sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Clean,
    Noisy,
}

pub struct ClipSpec {
    pub clip_id: String,
    pub speaker: usize,
    pub kind: Kind,
    pub transcript: String,
    /// `None` when the clip should be accepted.
    pub expected_reason: Option<&'static str>,
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub speaker_ids: Vec<String>,
    pub clips: Vec<ClipSpec>,
}

pub fn speaker_id(i: usize) -> String {
    // Common Voice client ids are 128-hex-digit hashes; the exact shape is irrelevant here.
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
    (0..4).map(|_| format!("{:016x}", rng.gen::<u64>())).collect()
}

impl Fixture {
    pub fn build() -> Self {
        Self::build_with_extras(false)
    }

    /// With `extras`, the catalog also lists two male clips and two clips
    /// with only two up-votes.
    pub fn build_with_extras(extras: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clip_dir = dir.path().join("clips");
        std::fs::create_dir_all(&clip_dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
        let speaker_ids: Vec<String> = (0..SPEAKERS).map(speaker_id).collect();
        let voices: Vec<Voice> = (0..SPEAKERS).map(|s| voice_for(s, &mut rng)).collect();

        let mut rows = Vec::new();
        let mut clips = Vec::new();
        let mut serial = 0usize;
        let mut short_iter = SHORT_SENTENCES.iter();
        for s in 0..SPEAKERS {
            for c in 0..CLIPS_PER_SPEAKER {
                serial += 1;
                let clip_id = format!("common_voice_lg_{:08}", 37_000_000 + serial * 7919 % 1_000_003);
                let kind = if NOISY.contains(&(s, c)) { Kind::Noisy } else { Kind::Clean };
                let transcript = if SHORT_TEXT.contains(&(s, c)) {
                    short_iter.next().unwrap().to_string()
                } else {
                    SENTENCES[(s * 5 + c) % SENTENCES.len()].to_string()
                };
                let expected_reason = if kind == Kind::Noisy {
                    Some("low-quality")
                } else if !PLANTED.contains(&s) {
                    Some("speaker-not-in-cohort")
                } else if SHORT_TEXT.contains(&(s, c)) {
                    Some("transcript-too-short")
                } else {
                    None
                };
                let v = Voice { base_hz: voices[s].base_hz * (1.0 + rng.gen_range(-0.003..0.003)), ..voices[s] };
                let phase = rng.gen_range(0.0..2.0 * PI);
                let samples = match kind {
                    Kind::Clean => {
                        let lead = rng.gen_range(0.3..0.5);
                        let speech = rng.gen_range(1.5..2.2);
                        let tail = rng.gen_range(0.3..0.5);
                        let n_lead = (lead * SOURCE_RATE as f64) as usize;
                        let voice = synth_voice(v, speech, SOURCE_RATE, 0.1, phase);
                        let n = n_lead + voice.len() + (tail * SOURCE_RATE as f64) as usize;
                        let mut x = white(n, 3e-4, &mut rng);
                        for (o, s) in x[n_lead..].iter_mut().zip(&voice) {
                            *o += s;
                        }
                        x
                    }
                    Kind::Noisy => {
                        let voice = synth_voice(v, 2.4, SOURCE_RATE, 0.1, phase);
                        let noise = white(voice.len(), 0.1, &mut rng);
                        voice.iter().zip(&noise).map(|(a, b)| a + b).collect()
                    }
                };
                write_wav(&AudioBuffer::new(samples, SOURCE_RATE).unwrap(), clip_dir.join(format!("{clip_id}.wav"))).unwrap();
                rows.push(format!("{}\t{clip_id}.mp3\t{transcript}\t{}\t0\ttwenties\tfemale\t\tlg\t", speaker_ids[s], 3 + (serial % 4)));
                clips.push(ClipSpec { clip_id, speaker: s, kind, transcript, expected_reason });
            }
        }
        if extras {
            let template = clip_dir.join(format!("{}.wav", clips[5].clip_id));
            for (i, (up, gender, reason)) in
                [(5, "male", "demographic-mismatch"), (4, "male", "demographic-mismatch"), (2, "female", "not-validated"), (0, "female", "not-validated")]
                    .into_iter()
                    .enumerate()
            {
                let clip_id = format!("common_voice_lg_extra_{i}");
                std::fs::copy(&template, clip_dir.join(format!("{clip_id}.wav"))).unwrap();
                let s = PLANTED[i];
                rows.push(format!("{}\t{clip_id}.mp3\tomusajja ayimba oluyimba\t{up}\t1\tthirties\t{gender}\t\tlg\t", speaker_ids[s]));
                clips.push(ClipSpec {
                    clip_id,
                    speaker: s,
                    kind: Kind::Clean,
                    transcript: "omusajja ayimba oluyimba".into(),
                    expected_reason: Some(reason),
                });
            }
        }
        // Catalog order is shuffled relative to speaker order.
        let mut order: Vec<usize> = (0..rows.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut tsv = String::from("client_id\tpath\tsentence\tup_votes\tdown_votes\tage\tgender\taccents\tlocale\tsegment\n");
        for i in order {
            tsv.push_str(&rows[i]);
            tsv.push('\n');
        }
        std::fs::write(dir.path().join("validated.tsv"), tsv).unwrap();
        Fixture { dir, speaker_ids, clips }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    /// Writes a config for this corpus and returns its path.
    pub fn config(&self, name: &str, workers: usize, extra: &str) -> PathBuf {
        let path = self.root().join(format!("{name}.toml"));
        let text = format!(
            "[paths]\ninput_catalog = \"validated.tsv\"\naudio_root = \"clips\"\noutput_dir = \"{name}\"\n\n\
             [intonation]\nmin_clips = 2\n\n[run]\nworkers = {workers}\n{extra}"
        );
        std::fs::write(&path, text).unwrap();
        path
    }

    pub fn planted_ids(&self) -> BTreeSet<String> {
        PLANTED.iter().map(|&s| self.speaker_ids[s].clone()).collect()
    }

    pub fn expected_accepted(&self) -> BTreeSet<String> {
        self.clips.iter().filter(|c| c.expected_reason.is_none()).map(|c| c.clip_id.clone()).collect()
    }

    pub fn expected_reasons(&self) -> BTreeMap<String, Option<&'static str>> {
        self.clips.iter().map(|c| (c.clip_id.clone(), c.expected_reason)).collect()
    }
}
