use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use curate_core::mos::{compute_mos, parse_scores};
use curate_core::pipeline::{read_cohort_report, PipelineState};
use curate_core::{Pipeline, PipelineConfig, PipelineError, Stage};

/// Curate a TTS training corpus from a Common Voice release.
#[derive(Parser, Debug)]
#[command(name = "curate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct StageArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override `run.workers`.
    #[arg(long)]
    workers: Option<usize>,
    /// Override `split.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read the catalog and apply the vote, demographic and contributor filters.
    Ingest(StageArgs),
    /// Trim leading, trailing and long internal silence.
    Trim(StageArgs),
    /// Remove background noise.
    Denoise(StageArgs),
    /// Score quality and drop clips at or below the threshold.
    Score(StageArgs),
    /// Pick the speaker cohort with the most similar intonation; prints the cohort report.
    SelectSpeakers(StageArgs),
    /// Normalize transcripts and drop short ones.
    NormalizeText(StageArgs),
    /// Write the wavs/ tree and train/val metadata.
    Export(StageArgs),
    /// Write stats.json and report.json; prints the dataset statistics.
    Stats(StageArgs),
    /// Run every stage in order; prints the run summary.
    Run(StageArgs),
    /// Aggregate listening-test scores (rater_id, sample_id, score) into a MOS.
    Mos {
        scores: PathBuf,
        /// Print the full summary as JSON instead of the overall MOS.
        #[arg(long)]
        json: bool,
    },
}

fn stage_of(cmd: &Command) -> Option<(Stage, &StageArgs)> {
    Some(match cmd {
        Command::Ingest(a) => (Stage::Ingest, a),
        Command::Trim(a) => (Stage::Trim, a),
        Command::Denoise(a) => (Stage::Denoise, a),
        Command::Score(a) => (Stage::Score, a),
        Command::SelectSpeakers(a) => (Stage::SelectSpeakers, a),
        Command::NormalizeText(a) => (Stage::NormalizeText, a),
        Command::Export(a) => (Stage::Export, a),
        Command::Stats(a) => (Stage::Stats, a),
        Command::Run(_) | Command::Mos { .. } => return None,
    })
}

fn pipeline(args: &StageArgs) -> Result<Pipeline, PipelineError> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(w) = args.workers {
        cfg.run.workers = w;
    }
    if let Some(s) = args.seed {
        cfg.split.seed = s;
    }
    Pipeline::new(cfg)
}

fn summarize(stage: Stage, state: &PipelineState) {
    let pending = state.clips.iter().filter(|c| c.is_pending()).count();
    let timing = state.stages.last().filter(|t| t.stage == stage);
    match timing {
        Some(t) => log::info!(
            "{stage}: {pending} of {} clips still in play ({} processed, {} from cache, {:.2} s)",
            state.clips.len(),
            t.processed,
            t.cache_hits,
            t.elapsed_s
        ),
        None => log::info!("{stage}: {pending} of {} clips still in play", state.clips.len()),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Mos { scores, json } => {
            let file = std::fs::File::open(scores).with_context(|| format!("cannot open {}", scores.display()))?;
            let summary = compute_mos(&parse_scores(file).with_context(|| format!("cannot parse {}", scores.display()))?)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                println!("{}", summary.overall_mos);
            }
        }
        Command::Run(args) => {
            let report = pipeline(args)?.run()?;
            for t in &report.stages {
                log::info!("{}: {} processed, {} from cache, {:.2} s", t.stage, t.processed, t.cache_hits, t.elapsed_s);
            }
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
        }
        cmd => {
            let (stage, args) = stage_of(cmd).expect("stage subcommand");
            let p = pipeline(args)?;
            let state = p.run_stage(stage)?;
            summarize(stage, &state);
            match stage {
                Stage::SelectSpeakers => {
                    let report = read_cohort_report(&p.work_dir())
                        .map_err(|source| PipelineError::FatalIo { path: p.stage_dir(stage), source })?;
                    print!("{report}");
                }
                Stage::Stats => println!("{}", serde_json::to_string_pretty(&p.report(&state).stats)?),
                _ => {}
            }
        }
    }
    Ok(())
}

/// 1 for configuration and catalog problems, 2 for everything that goes
/// wrong once the run has started.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PipelineError>() {
        Some(PipelineError::Config(_) | PipelineError::Catalog(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
