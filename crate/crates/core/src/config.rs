//! Pipeline configuration file (TOML).
//!
//! Every section and key is optional and falls back to its default; unknown
//! keys are rejected. Relative paths resolve against the config file's
//! directory.
//!
//! ```toml
//! [paths]
//! input_catalog = "validated.tsv"
//! audio_root = "clips"
//! output_dir = "out"
//! # work_dir = "out/work"
//!
//! [audio]
//! target_sample_rate = 22050
//!
//! [filter]
//! gender = "female"
//! # ages = ["twenties", "thirties"]
//! min_up_votes = 3
//! delimiter = "tab"
//!
//! [vad]
//! frame_ms = 30.0
//! margin_db = 6.0
//! abs_floor_dbfs = -60.0
//! peak_headroom_db = 3.0
//! hangover_frames = 5
//! mode = "endpoints"
//! max_gap_ms = 300.0
//! min_result_s = 1.0
//!
//! [enhance]
//! alpha = 1.5
//! beta = 0.1
//! fft_len = 1024
//! hop = 256
//! # external_command = "denoiser --batch"
//! timeout_s = 300
//!
//! [quality]
//! threshold = 3.5
//! inclusive = false
//! # external_command = "mos-estimator"
//! timeout_s = 300
//! [quality.weights]
//! snr = 0.6
//! clipping = 0.25
//! speech_ratio = 0.15
//!
//! [intonation]
//! k = 6
//! f_min = 65.0
//! f_max = 500.0
//! min_clips = 50
//! top_contributors = 20
//!
//! [textnorm]
//! min_words = 3
//! [textnorm.char_map]
//! "ŋ" = "ng"
//!
//! [split]
//! seed = 0
//! val_permille = 100
//!
//! [run]
//! workers = 4
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Delimiter;
use crate::enhance::{GateParams, StftConfig};
use crate::external::ExternalCommand;
use crate::intonation::PitchConfig;
use crate::quality::{MosThreshold, MosWeights};
use crate::textnorm::{default_char_map, TextNormalizer};
use crate::vad::VadConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub input_catalog: PathBuf,
    pub audio_root: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/work`.
    pub work_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            input_catalog: PathBuf::from("validated.tsv"),
            audio_root: PathBuf::from("clips"),
            output_dir: PathBuf::from("out"),
            work_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    pub target_sample_rate: u32,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self { target_sample_rate: crate::audio::TARGET_SAMPLE_RATE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub gender: String,
    pub ages: Option<BTreeSet<String>>,
    pub min_up_votes: u32,
    pub delimiter: Delimiter,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { gender: "female".into(), ages: None, min_up_votes: 3, delimiter: Delimiter::Tab }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub alpha: f64,
    pub beta: f64,
    pub fft_len: usize,
    pub hop: usize,
    pub external_command: Option<String>,
    pub timeout_s: u64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        let g = GateParams::default();
        let s = StftConfig::default();
        Self { alpha: g.alpha, beta: g.beta, fft_len: s.fft_len, hop: s.hop, external_command: None, timeout_s: 300 }
    }
}

impl EnhanceConfig {
    pub fn gate(&self) -> GateParams {
        GateParams { alpha: self.alpha, beta: self.beta }
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig { fft_len: self.fft_len, hop: self.hop }
    }

    pub fn external(&self) -> Option<ExternalCommand> {
        external(&self.external_command, self.timeout_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    pub threshold: f64,
    pub inclusive: bool,
    pub weights: MosWeights,
    pub external_command: Option<String>,
    pub timeout_s: u64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        let t = MosThreshold::default();
        Self { threshold: t.value, inclusive: t.inclusive, weights: MosWeights::default(), external_command: None, timeout_s: 300 }
    }
}

impl QualityConfig {
    pub fn threshold(&self) -> MosThreshold {
        MosThreshold { value: self.threshold, inclusive: self.inclusive }
    }

    pub fn external(&self) -> Option<ExternalCommand> {
        external(&self.external_command, self.timeout_s)
    }
}

fn external(cmd: &Option<String>, timeout_s: u64) -> Option<ExternalCommand> {
    cmd.as_deref().and_then(|c| ExternalCommand::parse(c, Duration::from_secs(timeout_s)).ok())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntonationConfig {
    pub k: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub min_clips: usize,
    pub top_contributors: usize,
}

impl Default for IntonationConfig {
    fn default() -> Self {
        let p = PitchConfig::default();
        Self { k: 6, f_min: p.f_min, f_max: p.f_max, min_clips: 50, top_contributors: 20 }
    }
}

impl IntonationConfig {
    pub fn pitch(&self) -> PitchConfig {
        PitchConfig { f_min: self.f_min, f_max: self.f_max, ..PitchConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextNormConfig {
    pub min_words: usize,
    /// Replaces the built-in map when given. Keys must be single characters.
    pub char_map: BTreeMap<String, String>,
}

impl Default for TextNormConfig {
    fn default() -> Self {
        Self { min_words: 3, char_map: default_char_map().into_iter().map(|(c, s)| (c.to_string(), s)).collect() }
    }
}

impl TextNormConfig {
    pub fn normalizer(&self) -> Result<TextNormalizer, ConfigError> {
        let mut map = BTreeMap::new();
        for (k, v) in &self.char_map {
            let mut chars = k.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => {
                    map.insert(c, v.clone());
                }
                _ => return Err(ConfigError::Invalid(format!("textnorm.char_map key '{k}' must be one character"))),
            }
        }
        TextNormalizer::new(self.min_words, map).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub val_permille: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, val_permille: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub audio: AudioConfig,
    pub filter: FilterConfig,
    pub vad: VadConfig,
    pub enhance: EnhanceConfig,
    pub quality: QualityConfig,
    pub intonation: IntonationConfig,
    pub textnorm: TextNormConfig,
    pub split: SplitConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    /// Parses TOML text; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: base_dir.to_path_buf(), message: e.to_string() })?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_path_buf(), message },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.input_catalog);
        fix(&mut self.paths.audio_root);
        fix(&mut self.paths.output_dir);
        if let Some(w) = self.paths.work_dir.as_mut() {
            fix(w);
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.paths.work_dir.clone().unwrap_or_else(|| self.paths.output_dir.join("work"))
    }

    /// Checks every numeric field against its module's domain.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(8_000..=192_000).contains(&self.audio.target_sample_rate) {
            return bad(format!("audio.target_sample_rate {} outside 8000..=192000", self.audio.target_sample_rate));
        }
        if self.filter.gender.trim().is_empty() {
            return bad("filter.gender must be non-empty".into());
        }
        self.vad.validate().map_err(ConfigError::Invalid)?;
        self.enhance.gate().validate().map_err(|e| ConfigError::Invalid(format!("enhance: {e}")))?;
        self.enhance.stft().validate().map_err(|e| ConfigError::Invalid(format!("enhance: {e}")))?;
        check_command("enhance", &self.enhance.external_command, self.enhance.timeout_s)?;
        if !(self.quality.threshold >= 1.0 && self.quality.threshold <= 5.0) {
            return bad(format!("quality.threshold {} outside [1, 5]", self.quality.threshold));
        }
        self.quality.weights.validate().map_err(ConfigError::Invalid)?;
        check_command("quality", &self.quality.external_command, self.quality.timeout_s)?;
        let i = &self.intonation;
        if i.k < 2 {
            return bad("intonation.k must be at least 2".into());
        }
        if !(i.f_min > 0.0 && i.f_min < i.f_max && i.f_max.is_finite()) {
            return bad("intonation requires 0 < f_min < f_max".into());
        }
        if i.f_max * 2.0 >= self.audio.target_sample_rate as f64 {
            return bad("intonation.f_max must be below half the target sample rate".into());
        }
        if i.min_clips < 1 || i.top_contributors < 1 {
            return bad("intonation.min_clips and top_contributors must be positive".into());
        }
        self.textnorm.normalizer()?;
        if self.split.val_permille > 1000 {
            return bad(format!("split.val_permille {} above 1000", self.split.val_permille));
        }
        if self.run.workers < 1 {
            return bad("run.workers must be at least 1".into());
        }
        Ok(())
    }
}

fn check_command(section: &str, cmd: &Option<String>, timeout_s: u64) -> Result<(), ConfigError> {
    if timeout_s == 0 {
        return Err(ConfigError::Invalid(format!("{section}.timeout_s must be positive")));
    }
    match cmd {
        Some(c) if c.trim().is_empty() => Err(ConfigError::Invalid(format!("{section}.external_command is empty"))),
        _ => Ok(()),
    }
}
