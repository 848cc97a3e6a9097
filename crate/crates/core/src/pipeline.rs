//! Stage orchestration with persisted intermediate state and a per-clip
//! content-addressed cache.
//!
//! Every stage reads `work/<upstream>/state.json` and writes
//! `work/<stage>/state.json`. Per-clip artifacts live in
//! `work/<stage>/artifacts/<key>.{wav,json}` where the key hashes the input
//! audio (or the upstream key) together with the stage's configuration, so
//! reruns reuse earlier work. Clip-level failures mark the clip rejected;
//! only configuration, ordering and output I/O problems abort a run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{decode_wav, encode_wav, read_wav, resample, AudioBuffer};
use crate::catalog::{self, CatalogError, ClipRecord, CorpusCatalog, RowError};
use crate::config::{ConfigError, PipelineConfig};
use crate::enhance::denoise_with_vad;
use crate::external::run_batch;
use crate::intonation::{self, build_profiles, select_cohort, CohortReport, UtteranceProsody};
use crate::manifest::{self, assign_split, DatasetManifest, DatasetStats, ManifestEntry, Split};
use crate::quality::{self, assess, QualityError, QualityReport, ScoreSource};
use crate::textnorm::TextNormalizer;
use crate::vad::{self, SpeechSegment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Trim,
    Denoise,
    Score,
    SelectSpeakers,
    NormalizeText,
    Export,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Trim,
        Stage::Denoise,
        Stage::Score,
        Stage::SelectSpeakers,
        Stage::NormalizeText,
        Stage::Export,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Trim => "trim",
            Stage::Denoise => "denoise",
            Stage::Score => "score",
            Stage::SelectSpeakers => "select-speakers",
            Stage::NormalizeText => "normalize-text",
            Stage::Export => "export",
            Stage::Stats => "stats",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|&s| s == self).expect("listed");
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("cannot run '{stage}': {reason}")]
    StageOrder { stage: Stage, reason: String },
    #[error("I/O failure on {path}: {source}")]
    FatalIo { path: PathBuf, source: std::io::Error },
    #[error("stage '{stage}' failed: {message}")]
    StageFailed { stage: Stage, message: String },
}

fn fatal(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::FatalIo { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    NotValidated,
    DemographicMismatch,
    SpeakerNotInCohort,
    AudioUnreadable,
    TooShort,
    EnhanceFailed,
    LowQuality,
    TranscriptTooShort,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::NotValidated => "not-validated",
            RejectReason::DemographicMismatch => "demographic-mismatch",
            RejectReason::SpeakerNotInCohort => "speaker-not-in-cohort",
            RejectReason::AudioUnreadable => "audio-unreadable",
            RejectReason::TooShort => "too-short",
            RejectReason::EnhanceFailed => "enhance-failed",
            RejectReason::LowQuality => "low-quality",
            RejectReason::TranscriptTooShort => "transcript-too-short",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipStatus {
    Pending,
    Accepted,
    Rejected,
}

/// Everything the pipeline learned about one catalog row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipOutcome {
    pub clip_id: String,
    pub speaker_id: String,
    pub audio_path: String,
    pub transcript: String,
    pub status: ClipStatus,
    pub reason: Option<RejectReason>,
    pub detail: Option<String>,
    pub source_duration_s: Option<f64>,
    pub trimmed_duration_s: Option<f64>,
    pub flagged_short: Option<bool>,
    pub final_duration_s: Option<f64>,
    pub quality: Option<QualityReport>,
    pub prosody: Option<UtteranceProsody>,
    pub normalized_text: Option<String>,
    pub text_rules: Vec<String>,
    pub split: Option<Split>,
    pub trim_key: Option<String>,
    pub denoise_key: Option<String>,
}

impl ClipOutcome {
    fn from_record(r: &ClipRecord) -> Self {
        Self {
            clip_id: r.clip_id.clone(),
            speaker_id: r.speaker_id.clone(),
            audio_path: r.audio_path.clone(),
            transcript: r.transcript.clone(),
            status: ClipStatus::Pending,
            reason: None,
            detail: None,
            source_duration_s: None,
            trimmed_duration_s: None,
            flagged_short: None,
            final_duration_s: None,
            quality: None,
            prosody: None,
            normalized_text: None,
            text_rules: vec![],
            split: None,
            trim_key: None,
            denoise_key: None,
        }
    }

    pub fn is_pending(&self) -> bool {
        self.status == ClipStatus::Pending
    }

    fn reject(&mut self, reason: RejectReason, detail: impl Into<String>) {
        self.status = ClipStatus::Rejected;
        self.reason = Some(reason);
        self.detail = Some(detail.into());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub elapsed_s: f64,
    pub processed: usize,
    pub cache_hits: usize,
}

/// Snapshot persisted after each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub stage: Stage,
    pub config_digest: String,
    pub upstream_digest: Option<String>,
    pub row_errors: Vec<RowError>,
    pub top_contributors: Vec<(String, usize)>,
    pub clips: Vec<ClipOutcome>,
    pub cohort: Option<CohortReport>,
    pub stats: Option<DatasetStats>,
    pub stages: Vec<StageTiming>,
}

impl PipelineState {
    fn pending(&self) -> Vec<usize> {
        (0..self.clips.len()).filter(|&i| self.clips[i].is_pending()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub input_clips: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub rejections: BTreeMap<RejectReason, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub summary: RunSummary,
    pub clips: Vec<ClipOutcome>,
    pub row_errors: Vec<RowError>,
    pub top_contributors: Vec<(String, usize)>,
    pub cohort: Option<CohortReport>,
    pub stats: DatasetStats,
    pub stages: Vec<StageTiming>,
    pub config: PipelineConfig,
}

pub const STATE_FILE: &str = "state.json";
pub const COHORT_FILE: &str = "cohort.json";
pub const STATS_FILE: &str = "stats.json";
pub const REPORT_FILE: &str = "report.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex(&h.finalize())
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("serializable")
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Writes via a uniquely named temporary file and a rename, so concurrent
/// writers of the same artifact never expose a partial file.
fn write_atomic(path: &Path, bytes: &[u8], tag: &str) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.{tag}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

type ClipResult<T> = Result<T, (RejectReason, String)>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrimArtifact {
    segments: Vec<SpeechSegment>,
    source_duration_s: f64,
    trimmed_duration_s: f64,
    flagged_short: bool,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    normalizer: TextNormalizer,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// Validates the configuration and checks that the inputs exist. Nothing
    /// is written until a stage runs.
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if !cfg.paths.input_catalog.is_file() {
            return Err(ConfigError::Invalid(format!("input catalog {} does not exist", cfg.paths.input_catalog.display())).into());
        }
        if !cfg.paths.audio_root.is_dir() {
            return Err(ConfigError::Invalid(format!("audio root {} is not a directory", cfg.paths.audio_root.display())).into());
        }
        let normalizer = cfg.textnorm.normalizer()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.workers)
            .build()
            .map_err(|e| ConfigError::Invalid(format!("cannot start {} workers: {e}", cfg.run.workers)))?;
        Ok(Self { cfg, normalizer, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn work_dir(&self) -> PathBuf {
        self.cfg.work_dir()
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.work_dir().join(stage.name())
    }

    fn artifacts(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("artifacts")
    }

    /// Runs every stage in order and returns the final report.
    pub fn run(&self) -> Result<RunReport, PipelineError> {
        let mut last = None;
        for stage in Stage::ALL {
            last = Some(self.run_stage(stage)?);
        }
        Ok(self.report(&last.expect("at least one stage")))
    }

    pub fn run_stage(&self, stage: Stage) -> Result<PipelineState, PipelineError> {
        let started = Instant::now();
        let (mut state, upstream_digest) = match stage {
            Stage::Ingest => (self.fresh_state()?, None),
            _ => {
                let (s, d) = self.load_upstream(stage)?;
                (s, Some(d))
            }
        };
        let dir = self.stage_dir(stage);
        fs::create_dir_all(self.artifacts(stage)).map_err(fatal(&dir))?;

        let (processed, cache_hits) = match stage {
            Stage::Ingest => self.ingest(&mut state)?,
            Stage::Trim => self.trim(&mut state)?,
            Stage::Denoise => self.denoise(&mut state)?,
            Stage::Score => self.score(&mut state)?,
            Stage::SelectSpeakers => self.select_speakers(&mut state)?,
            Stage::NormalizeText => self.normalize_text(&mut state),
            Stage::Export => self.export(&mut state)?,
            Stage::Stats => (0, 0),
        };

        state.stage = stage;
        state.upstream_digest = upstream_digest;
        state.config_digest = self.config_digest(stage);
        state.stages.retain(|t| t.stage < stage);
        state.stages.push(StageTiming { stage, elapsed_s: started.elapsed().as_secs_f64(), processed, cache_hits });

        if stage == Stage::Stats {
            self.write_stats_and_report(&mut state)?;
        }
        let path = dir.join(STATE_FILE);
        write_atomic(&path, &pretty(&state), "state").map_err(fatal(&path))?;
        log::info!("{stage}: {processed} clips processed, {cache_hits} cached");
        Ok(state)
    }

    pub fn report(&self, state: &PipelineState) -> RunReport {
        let mut rejections = BTreeMap::new();
        for c in &state.clips {
            if let Some(r) = c.reason {
                *rejections.entry(r).or_insert(0) += 1;
            }
        }
        let accepted = state.clips.iter().filter(|c| c.status == ClipStatus::Accepted).count();
        RunReport {
            summary: RunSummary {
                input_clips: state.clips.len(),
                accepted,
                rejected: state.clips.iter().filter(|c| c.status == ClipStatus::Rejected).count(),
                rejections,
            },
            clips: state.clips.clone(),
            row_errors: state.row_errors.clone(),
            top_contributors: state.top_contributors.clone(),
            cohort: state.cohort.clone(),
            stats: state.stats.clone().unwrap_or_else(DatasetStats::empty),
            stages: state.stages.clone(),
            config: self.cfg.clone(),
        }
    }

    /// Digest of the configuration every stage up to `stage` depends on.
    pub fn config_digest(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let own = match stage {
            Stage::Ingest => json(&(&c.paths.input_catalog, &c.paths.audio_root, &c.filter, c.intonation.top_contributors)),
            Stage::Trim => json(&(&c.audio, &c.vad)),
            Stage::Denoise => json(&c.enhance),
            Stage::Score => json(&c.quality),
            Stage::SelectSpeakers => json(&c.intonation),
            Stage::NormalizeText => json(&c.textnorm),
            Stage::Export => json(&(&c.split, &c.paths.output_dir)),
            Stage::Stats => vec![],
        };
        let up = stage.upstream().map(|u| self.config_digest(u)).unwrap_or_default();
        sha256_hex(&[stage.name().as_bytes(), up.as_bytes(), &own])
    }

    fn fresh_state(&self) -> Result<PipelineState, PipelineError> {
        let out = &self.cfg.paths.output_dir;
        fs::create_dir_all(out).map_err(fatal(out))?;
        let work = self.work_dir();
        fs::create_dir_all(&work).map_err(fatal(&work))?;
        Ok(PipelineState {
            stage: Stage::Ingest,
            config_digest: String::new(),
            upstream_digest: None,
            row_errors: vec![],
            top_contributors: vec![],
            clips: vec![],
            cohort: None,
            stats: None,
            stages: vec![],
        })
    }

    fn read_state(&self, stage: Stage, needed_by: Stage) -> Result<(PipelineState, String), PipelineError> {
        let path = self.stage_dir(stage).join(STATE_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(PipelineError::StageOrder { stage: needed_by, reason: format!("'{stage}' has not been run") })
            }
            Err(e) => return Err(fatal(&path)(e)),
        };
        let state: PipelineState = serde_json::from_slice(&bytes).map_err(|e| PipelineError::StageOrder {
            stage: needed_by,
            reason: format!("outputs of '{stage}' are unreadable ({e}); rerun it"),
        })?;
        Ok((state, sha256_hex(&[&bytes])))
    }

    /// Loads the upstream snapshot, refusing outputs that were produced with
    /// a different configuration or from an older run of their own upstream.
    fn load_upstream(&self, stage: Stage) -> Result<(PipelineState, String), PipelineError> {
        let up = stage.upstream().expect("ingest has no upstream");
        let (state, digest) = self.read_state(up, stage)?;
        if state.config_digest != self.config_digest(up) {
            return Err(PipelineError::StageOrder {
                stage,
                reason: format!("outputs of '{up}' were produced with a different configuration; rerun '{up}'"),
            });
        }
        // Every earlier snapshot must still be the one its successor was built from.
        let mut link = (up, state.upstream_digest.clone());
        while let (Some(prev), Some(recorded)) = (link.0.upstream(), link.1) {
            let path = self.stage_dir(prev).join(STATE_FILE);
            let bytes = fs::read(&path).map_err(|_| PipelineError::StageOrder {
                stage,
                reason: format!("outputs of '{prev}' are missing; rerun '{prev}'"),
            })?;
            if sha256_hex(&[&bytes]) != recorded {
                return Err(PipelineError::StageOrder {
                    stage,
                    reason: format!("outputs of '{}' are older than '{prev}'; rerun '{}'", link.0, link.0),
                });
            }
            #[derive(Deserialize)]
            struct Link {
                upstream_digest: Option<String>,
            }
            let parsed: Link = serde_json::from_slice(&bytes).map_err(|e| PipelineError::StageOrder {
                stage,
                reason: format!("outputs of '{prev}' are unreadable ({e}); rerun it"),
            })?;
            link = (prev, parsed.upstream_digest);
        }
        Ok((state, digest))
    }

    fn par_map<R: Send>(&self, items: &[usize], f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(|&i| f(i)).collect())
    }

    fn source_path(&self, clip: &ClipOutcome) -> PathBuf {
        let p = self.cfg.paths.audio_root.join(&clip.audio_path);
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            p
        } else {
            p.with_extension("wav")
        }
    }

    /// Reads and resamples a source file, returning its bytes too.
    fn load_source(&self, clip: &ClipOutcome) -> ClipResult<(Vec<u8>, AudioBuffer)> {
        let path = self.source_path(clip);
        let bytes = fs::read(&path).map_err(|e| (RejectReason::AudioUnreadable, format!("{}: {e}", path.display())))?;
        let buf = decode_wav(&bytes).map_err(|e| (RejectReason::AudioUnreadable, format!("{}: {e}", path.display())))?;
        let target = self.cfg.audio.target_sample_rate;
        let buf = if buf.sample_rate == target { buf } else { resample(&buf, target) };
        Ok((bytes, buf))
    }

    fn ingest(&self, state: &mut PipelineState) -> Result<(usize, usize), PipelineError> {
        let f = &self.cfg.filter;
        let parsed = catalog::read_catalog(&self.cfg.paths.input_catalog, f.delimiter)?;
        state.row_errors = parsed.row_errors;
        let mut clips: Vec<ClipOutcome> = parsed.catalog.records.iter().map(ClipOutcome::from_record).collect();
        for (clip, rec) in clips.iter_mut().zip(&parsed.catalog.records) {
            if rec.up_votes < f.min_up_votes {
                clip.reject(RejectReason::NotValidated, format!("{} up-votes, need {}", rec.up_votes, f.min_up_votes));
            } else if !catalog::matches_demographic(rec, &f.gender, f.ages.as_ref()) {
                clip.reject(RejectReason::DemographicMismatch, format!("does not match gender '{}'", f.gender));
            }
        }
        let eligible = CorpusCatalog {
            records: parsed.catalog.records.iter().zip(&clips).filter(|(_, c)| c.is_pending()).map(|(r, _)| r.clone()).collect(),
            source_path: parsed.catalog.source_path.clone(),
        };
        let n = self.cfg.intonation.top_contributors;
        state.top_contributors = catalog::top_contributors(&eligible, n);
        let top: BTreeSet<&str> = state.top_contributors.iter().map(|(s, _)| s.as_str()).collect();
        for clip in clips.iter_mut().filter(|c| c.is_pending()) {
            if !top.contains(clip.speaker_id.as_str()) {
                clip.reject(RejectReason::SpeakerNotInCohort, format!("speaker is not among the top {n} contributors"));
            }
        }
        clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        let processed = clips.len();
        state.clips = clips;
        Ok((processed, 0))
    }

    fn trim(&self, state: &mut PipelineState) -> Result<(usize, usize), PipelineError> {
        let dir = self.artifacts(Stage::Trim);
        let stage_cfg = json(&(&self.cfg.audio, &self.cfg.vad));
        let pending = state.pending();
        let clips = &state.clips;
        let results = self.par_map(&pending, |i| -> Result<ClipResult<(String, TrimArtifact, bool)>, PipelineError> {
            let clip = &clips[i];
            let path = self.source_path(clip);
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) => return Ok(Err((RejectReason::AudioUnreadable, format!("{}: {e}", path.display())))),
            };
            let key = sha256_hex(&[b"trim", &bytes, &stage_cfg]);
            let meta_path = dir.join(format!("{key}.json"));
            let wav_path = dir.join(format!("{key}.wav"));
            if wav_path.is_file() {
                if let Some(meta) = fs::read(&meta_path).ok().and_then(|b| serde_json::from_slice(&b).ok()) {
                    return Ok(Ok((key, meta, true)));
                }
            }
            let (_, buf) = match self.load_source(clip) {
                Ok(v) => v,
                Err(e) => return Ok(Err(e)),
            };
            let result = match vad::trim(&buf, &self.cfg.vad) {
                Ok(r) => r,
                Err(e) => return Ok(Err((RejectReason::AudioUnreadable, e.to_string()))),
            };
            let meta = TrimArtifact {
                segments: result.segments,
                source_duration_s: buf.duration_s(),
                trimmed_duration_s: result.trimmed.duration_s(),
                flagged_short: result.flagged_short,
            };
            write_atomic(&wav_path, &encode_wav(&result.trimmed), &clip.clip_id).map_err(fatal(&wav_path))?;
            write_atomic(&meta_path, &json(&meta), &clip.clip_id).map_err(fatal(&meta_path))?;
            Ok(Ok((key, meta, false)))
        });
        let mut hits = 0;
        for (i, r) in pending.iter().zip(results) {
            let clip = &mut state.clips[*i];
            match r? {
                Ok((key, meta, hit)) => {
                    hits += hit as usize;
                    clip.trim_key = Some(key);
                    clip.source_duration_s = Some(meta.source_duration_s);
                    clip.trimmed_duration_s = Some(meta.trimmed_duration_s);
                    clip.flagged_short = Some(meta.flagged_short);
                    if meta.flagged_short {
                        clip.reject(
                            RejectReason::TooShort,
                            format!("{:.2} s of speech after trimming, need {} s", meta.trimmed_duration_s, self.cfg.vad.min_result_s),
                        );
                    }
                }
                Err((reason, detail)) => clip.reject(reason, detail),
            }
        }
        Ok((pending.len(), hits))
    }

    /// Enhances the full resampled recording, then applies the trim segments.
    /// Both versions are kept: the full one is scored, the trimmed one exported.
    fn denoise(&self, state: &mut PipelineState) -> Result<(usize, usize), PipelineError> {
        let dir = self.artifacts(Stage::Denoise);
        let trim_dir = self.artifacts(Stage::Trim);
        let stage_cfg = json(&self.cfg.enhance);
        let pending = state.pending();
        let clips = &state.clips;
        let keys: Vec<String> = pending
            .iter()
            .map(|&i| sha256_hex(&[b"denoise", clips[i].trim_key.as_deref().unwrap_or_default().as_bytes(), &stage_cfg]))
            .collect();
        let cached: Vec<Option<f64>> = keys
            .iter()
            .map(|k| {
                dir.join(format!("{k}.full.wav"))
                    .is_file()
                    .then(|| read_wav(dir.join(format!("{k}.wav"))).ok().map(|b| b.duration_s()))
                    .flatten()
            })
            .collect();
        let misses: Vec<usize> = (0..pending.len()).filter(|&j| cached[j].is_none()).collect();

        // Stores both versions and returns the trimmed duration.
        let finish = |j: usize, full: &AudioBuffer, segments: &[SpeechSegment], tag: &str| -> Result<f64, PipelineError> {
            let trimmed = vad::extract_segments(full, segments);
            let full_path = dir.join(format!("{}.full.wav", keys[j]));
            let path = dir.join(format!("{}.wav", keys[j]));
            write_atomic(&full_path, &encode_wav(full), tag).map_err(fatal(&full_path))?;
            write_atomic(&path, &encode_wav(&trimmed), tag).map_err(fatal(&path))?;
            Ok(trimmed.duration_s())
        };
        let prepare = |j: usize| -> Result<ClipResult<(TrimArtifact, AudioBuffer)>, PipelineError> {
            let clip = &clips[pending[j]];
            let meta_path = trim_dir.join(format!("{}.json", clip.trim_key.as_deref().unwrap_or_default()));
            let Some(meta) = fs::read(&meta_path).ok().and_then(|b| serde_json::from_slice::<TrimArtifact>(&b).ok()) else {
                return Err(PipelineError::StageOrder {
                    stage: Stage::Denoise,
                    reason: format!("trim artifact for '{}' is missing; rerun 'trim'", clip.clip_id),
                });
            };
            Ok(self.load_source(clip).map(|(_, buf)| (meta, buf)))
        };

        let mut computed: BTreeMap<usize, ClipResult<f64>> = BTreeMap::new();
        if let Some(cmd) = self.cfg.enhance.external() {
            let prepared = self.par_map(&misses, |j| -> Result<ClipResult<(TrimArtifact, usize, PathBuf)>, PipelineError> {
                Ok(match prepare(j)? {
                    Ok((meta, buf)) => {
                        let input = dir.join(format!("{}.input.wav", keys[j]));
                        write_atomic(&input, &encode_wav(&buf), &clips[pending[j]].clip_id).map_err(fatal(&input))?;
                        Ok((meta, buf.len(), input))
                    }
                    Err(e) => Err(e),
                })
            });
            let mut ready = Vec::new();
            for (&j, p) in misses.iter().zip(prepared) {
                match p? {
                    Ok(v) => ready.push((j, v)),
                    Err(e) => {
                        computed.insert(j, Err(e));
                    }
                }
            }
            let requests: Vec<PathBuf> = ready.iter().map(|(_, (_, _, input))| input.clone()).collect();
            let replies = run_batch(&cmd, &requests)
                .map_err(|e| PipelineError::StageFailed { stage: Stage::Denoise, message: e.to_string() })?;
            for (j, (meta, len, input)) in ready {
                let abs = std::path::absolute(&input).map_err(fatal(&input))?;
                let produced = PathBuf::from(&replies[&abs]);
                let target = self.cfg.audio.target_sample_rate;
                let outcome = match read_wav(&produced) {
                    Ok(buf) => {
                        let buf = if buf.sample_rate == target { buf } else { resample(&buf, target) };
                        if buf.len() == len {
                            Ok(finish(j, &buf, &meta.segments, "ext")?)
                        } else {
                            Err((RejectReason::EnhanceFailed, format!("enhancer changed length from {len} to {} samples", buf.len())))
                        }
                    }
                    Err(e) => Err((RejectReason::EnhanceFailed, format!("{}: {e}", produced.display()))),
                };
                computed.insert(j, outcome);
            }
        } else {
            let e = &self.cfg.enhance;
            let results = self.par_map(&misses, |j| -> Result<ClipResult<f64>, PipelineError> {
                let (meta, buf) = match prepare(j)? {
                    Ok(v) => v,
                    Err(e) => return Ok(Err(e)),
                };
                let gated = vad::analyze(&buf, &self.cfg.vad)
                    .map_err(|e| e.to_string())
                    .and_then(|a| denoise_with_vad(&buf, &a.smoothed, a.grid, e.gate(), e.stft()).map_err(|e| e.to_string()));
                match gated {
                    Ok(full) => Ok(Ok(finish(j, &full, &meta.segments, &clips[pending[j]].clip_id)?)),
                    Err(msg) => Ok(Err((RejectReason::EnhanceFailed, msg))),
                }
            });
            for (&j, r) in misses.iter().zip(results) {
                computed.insert(j, r?);
            }
        }

        let mut hits = 0;
        for (j, &i) in pending.iter().enumerate() {
            let outcome = match cached[j] {
                Some(d) => {
                    hits += 1;
                    Ok(d)
                }
                None => computed.remove(&j).expect("every miss computed"),
            };
            let clip = &mut state.clips[i];
            match outcome {
                Ok(d) => {
                    clip.final_duration_s = Some(d);
                    clip.denoise_key = Some(keys[j].clone());
                }
                Err((reason, detail)) => clip.reject(reason, detail),
            }
        }
        Ok((pending.len(), hits))
    }

    /// Trimmed, enhanced audio: what gets exported and analysed for intonation.
    fn denoised_path(&self, clip: &ClipOutcome) -> PathBuf {
        self.artifacts(Stage::Denoise).join(format!("{}.wav", clip.denoise_key.as_deref().unwrap_or_default()))
    }

    /// Enhanced recording before trimming: what gets scored, since SNR and
    /// speech ratio need the surrounding non-speech frames.
    fn denoised_full_path(&self, clip: &ClipOutcome) -> PathBuf {
        self.artifacts(Stage::Denoise).join(format!("{}.full.wav", clip.denoise_key.as_deref().unwrap_or_default()))
    }

    fn score(&self, state: &mut PipelineState) -> Result<(usize, usize), PipelineError> {
        let dir = self.artifacts(Stage::Score);
        let q = &self.cfg.quality;
        let stage_cfg = json(&(&q.weights, &q.external_command, &self.cfg.vad));
        let pending = state.pending();
        let clips = &state.clips;
        let keys: Vec<String> = pending
            .iter()
            .map(|&i| sha256_hex(&[b"score", clips[i].denoise_key.as_deref().unwrap_or_default().as_bytes(), &stage_cfg]))
            .collect();
        let cached: Vec<Option<QualityReport>> = keys
            .iter()
            .map(|k| fs::read(dir.join(format!("{k}.json"))).ok().and_then(|b| serde_json::from_slice(&b).ok()))
            .collect();
        let misses: Vec<usize> = (0..pending.len()).filter(|&j| cached[j].is_none()).collect();

        let native = self.par_map(&misses, |j| -> ClipResult<QualityReport> {
            let clip = &clips[pending[j]];
            let path = self.denoised_full_path(clip);
            let buf = read_wav(&path).map_err(|e| (RejectReason::AudioUnreadable, format!("{}: {e}", path.display())))?;
            Ok(assess(&buf, &self.cfg.vad, &q.weights))
        });
        let mut computed: BTreeMap<usize, ClipResult<QualityReport>> = misses.iter().copied().zip(native).collect();

        if let Some(cmd) = q.external() {
            let ok: Vec<usize> = misses.iter().copied().filter(|j| computed[j].is_ok()).collect();
            let paths: Vec<PathBuf> = ok.iter().map(|&j| self.denoised_full_path(&clips[pending[j]])).collect();
            let scores = quality::external_score(&paths, &cmd).map_err(|e: QualityError| PipelineError::StageFailed {
                stage: Stage::Score,
                message: e.to_string(),
            })?;
            for (&j, p) in ok.iter().zip(&paths) {
                let abs = std::path::absolute(p).map_err(fatal(p))?;
                if let Some(Ok(report)) = computed.get_mut(&j) {
                    report.pseudo_mos = scores[&abs];
                    report.source = ScoreSource::External;
                }
            }
        }
        for (&j, r) in &computed {
            if let Ok(report) = r {
                let path = dir.join(format!("{}.json", keys[j]));
                write_atomic(&path, &json(report), &clips[pending[j]].clip_id).map_err(fatal(&path))?;
            }
        }

        let threshold = q.threshold();
        let mut hits = 0;
        for (j, &i) in pending.iter().enumerate() {
            let outcome = match &cached[j] {
                Some(r) => {
                    hits += 1;
                    Ok(r.clone())
                }
                None => computed.remove(&j).expect("every miss computed"),
            };
            let clip = &mut state.clips[i];
            match outcome {
                Ok(report) => {
                    let mos = report.pseudo_mos;
                    clip.quality = Some(report);
                    if !threshold.accepts(mos) {
                        let op = if threshold.inclusive { "at least" } else { "above" };
                        clip.reject(RejectReason::LowQuality, format!("pseudo-MOS {mos:.3} not {op} {}", threshold.value));
                    }
                }
                Err((reason, detail)) => clip.reject(reason, detail),
            }
        }
        Ok((pending.len(), hits))
    }

    fn select_speakers(&self, state: &mut PipelineState) -> Result<(usize, usize), PipelineError> {
        let dir = self.artifacts(Stage::SelectSpeakers);
        let it = &self.cfg.intonation;
        let pitch = it.pitch();
        let stage_cfg = json(&pitch);
        let pending = state.pending();
        let clips = &state.clips;
        let results = self.par_map(&pending, |i| -> Result<(Option<UtteranceProsody>, bool), PipelineError> {
            let clip = &clips[i];
            let key = sha256_hex(&[b"prosody", clip.denoise_key.as_deref().unwrap_or_default().as_bytes(), &stage_cfg]);
            let path = dir.join(format!("{key}.json"));
            if let Some(p) = fs::read(&path).ok().and_then(|b| serde_json::from_slice(&b).ok()) {
                return Ok((p, true));
            }
            let prosody = read_wav(self.denoised_path(clip))
                .ok()
                .and_then(|buf| intonation::extract_f0(&buf, &pitch).ok())
                .and_then(|track| intonation::utterance_prosody(&track).ok());
            write_atomic(&path, &json(&prosody), &clip.clip_id).map_err(fatal(&path))?;
            Ok((prosody, false))
        });
        let mut hits = 0;
        for (&i, r) in pending.iter().zip(results) {
            let (p, hit) = r?;
            hits += hit as usize;
            state.clips[i].prosody = p;
        }

        let analysed: Vec<(&str, &UtteranceProsody)> = state
            .clips
            .iter()
            .filter(|c| c.is_pending())
            .filter_map(|c| c.prosody.as_ref().map(|p| (c.speaker_id.as_str(), p)))
            .collect();
        let profiles = build_profiles(analysed, it.min_clips);
        let report = if profiles.len() >= it.k {
            let sel = select_cohort(&profiles, it.k)
                .map_err(|e| PipelineError::StageFailed { stage: Stage::SelectSpeakers, message: e.to_string() })?;
            CohortReport::new(&profiles, it.k, Some(&sel), None)
        } else {
            let note = format!(
                "only {} speakers have at least {} analysable clips; all of them form the cohort",
                profiles.len(),
                it.min_clips
            );
            CohortReport::new(&profiles, it.k, None, Some(note))
        };
        let cohort: BTreeSet<String> = report.cohort.iter().cloned().collect();
        for clip in state.clips.iter_mut().filter(|c| c.is_pending()) {
            if !cohort.contains(&clip.speaker_id) {
                clip.reject(RejectReason::SpeakerNotInCohort, "speaker intonation outside the selected cohort");
            }
        }
        let path = self.stage_dir(Stage::SelectSpeakers).join(COHORT_FILE);
        write_atomic(&path, &pretty(&report), "cohort").map_err(fatal(&path))?;
        state.cohort = Some(report);
        Ok((pending.len(), hits))
    }

    fn normalize_text(&self, state: &mut PipelineState) -> (usize, usize) {
        let pending = state.pending();
        for &i in &pending {
            let clip = &mut state.clips[i];
            let out = self.normalizer.normalize(&clip.transcript);
            clip.text_rules = out.applied_rules;
            clip.normalized_text = Some(out.normalized);
            if !out.accepted {
                clip.reject(
                    RejectReason::TranscriptTooShort,
                    format!("fewer than {} words after normalization", self.normalizer.min_words),
                );
            }
        }
        (pending.len(), 0)
    }

    fn export(&self, state: &mut PipelineState) -> Result<(usize, usize), PipelineError> {
        let s = &self.cfg.split;
        let mut entries = Vec::new();
        for i in state.pending() {
            let split = assign_split(&state.clips[i].clip_id, s.seed, s.val_permille);
            let audio = self.denoised_path(&state.clips[i]);
            let clip = &mut state.clips[i];
            clip.status = ClipStatus::Accepted;
            clip.split = Some(split);
            entries.push(ManifestEntry {
                clip_id: clip.clip_id.clone(),
                speaker_id: clip.speaker_id.clone(),
                normalized_text: clip.normalized_text.clone().unwrap_or_default(),
                duration_s: clip.final_duration_s.unwrap_or_default(),
                split,
                audio,
            });
        }
        let manifest = DatasetManifest { entries, sample_rate: self.cfg.audio.target_sample_rate };
        let out = &self.cfg.paths.output_dir;
        manifest::write_metadata(&manifest, out).map_err(|e| match e {
            manifest::ManifestError::Io(source) => PipelineError::FatalIo { path: out.clone(), source },
            other => PipelineError::StageFailed { stage: Stage::Export, message: other.to_string() },
        })?;
        Ok((manifest.entries.len(), 0))
    }

    fn write_stats_and_report(&self, state: &mut PipelineState) -> Result<(), PipelineError> {
        let entries: Vec<ManifestEntry> = state
            .clips
            .iter()
            .filter(|c| c.status == ClipStatus::Accepted)
            .map(|c| ManifestEntry {
                clip_id: c.clip_id.clone(),
                speaker_id: c.speaker_id.clone(),
                normalized_text: c.normalized_text.clone().unwrap_or_default(),
                duration_s: c.final_duration_s.unwrap_or_default(),
                split: c.split.unwrap_or(Split::Train),
                audio: PathBuf::new(),
            })
            .collect();
        let manifest = DatasetManifest { entries, sample_rate: self.cfg.audio.target_sample_rate };
        let stats = manifest::compute_stats(&manifest).unwrap_or_else(|_| DatasetStats::empty());
        let out = &self.cfg.paths.output_dir;
        let stats_path = out.join(STATS_FILE);
        write_atomic(&stats_path, &pretty(&stats), "stats").map_err(fatal(&stats_path))?;
        state.stats = Some(stats);
        let report_path = out.join(REPORT_FILE);
        write_atomic(&report_path, &pretty(&self.report(state)), "report").map_err(fatal(&report_path))?;
        Ok(())
    }
}

/// Reads the cohort report written by the `select-speakers` stage.
pub fn read_cohort_report(work_dir: &Path) -> std::io::Result<String> {
    fs::read_to_string(work_dir.join(Stage::SelectSpeakers.name()).join(COHORT_FILE))
}
