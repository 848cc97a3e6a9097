//! Curation of crowdsourced speech recordings into a single-language TTS
//! training corpus.
//!
//! The stages are usable on their own: catalog parsing and filtering
//! ([`catalog`]), WAV I/O and resampling ([`audio`]), silence trimming
//! ([`vad`]), spectral-gate denoising ([`enhance`]), objective quality
//! scoring ([`quality`]), intonation-based speaker cohort selection
//! ([`intonation`]), transcript normalization ([`textnorm`]), manifest export
//! ([`manifest`]) and listening-test aggregation ([`mos`]). [`pipeline`] chains
//! them with caching and a run report.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod catalog;
pub mod config;
pub mod enhance;
pub mod external;
pub mod intonation;
pub mod manifest;
pub mod mos;
pub mod pipeline;
pub mod quality;
pub mod stats;
pub mod textnorm;
pub mod vad;

pub use audio::{AudioBuffer, AudioError, FrameGrid, TARGET_SAMPLE_RATE};
pub use catalog::{ClipRecord, CorpusCatalog};
pub use config::{ConfigError, PipelineConfig};
pub use intonation::{CohortReport, CohortSelection, SpeakerProfile};
pub use manifest::{DatasetManifest, DatasetStats, Split};
pub use mos::{MosSummary, RaterScore};
pub use pipeline::{Pipeline, PipelineError, RejectReason, RunReport, Stage};
pub use quality::{MosThreshold, MosWeights, QualityReport};
pub use vad::{VadConfig, VadResult};
