use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use curate_core::audio::{read_wav, write_wav};
use curate_core::intonation::{build_profiles, extract_f0, select_cohort, utterance_prosody, CohortReport};
use curate_core::pipeline::PipelineState;
use curate_core::{AudioBuffer, PipelineConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RATE: u32 = 16_000;

fn curate(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curate")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Four speakers, three clean clips each, at distinct base pitches.
fn corpus() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let clips = dir.path().join("clips");
    std::fs::create_dir_all(&clips).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tsv = String::from("client_id\tpath\tsentence\tup_votes\tdown_votes\tage\tgender\n");
    for (s, base) in [180.0, 200.0, 240.0, 320.0].into_iter().enumerate() {
        for c in 0..3 {
            let id = format!("clip_{s}_{c}");
            let lead = (0.4 * RATE as f64) as usize;
            let voiced = (1.6 * RATE as f64) as usize;
            let mut x: Vec<f64> = (0..2 * lead + voiced).map(|_| rng.gen_range(-5e-4..5e-4)).collect();
            let mut theta = 0.0f64;
            for i in 0..voiced {
                let t = i as f64 / RATE as f64;
                let f0 = base * 2f64.powf((1.0 + s as f64) * (2.0 * PI * 1.2 * t).sin() / 12.0);
                theta += 2.0 * PI * f0 / RATE as f64;
                x[lead + i] += 0.1 * (theta.sin() + 0.5 * (2.0 * theta).sin());
            }
            write_wav(&AudioBuffer::new(x, RATE).unwrap(), clips.join(format!("{id}.wav"))).unwrap();
            tsv.push_str(&format!("spk{s}\t{id}.mp3\tomwana azannya mu luggya\t3\t0\ttwenties\tfemale\n"));
        }
    }
    std::fs::write(dir.path().join("validated.tsv"), tsv).unwrap();
    let cfg = dir.path().join("curate.toml");
    std::fs::write(
        &cfg,
        "[paths]\ninput_catalog = \"validated.tsv\"\naudio_root = \"clips\"\noutput_dir = \"out\"\n\n\
         [intonation]\nk = 2\nmin_clips = 1\n\n[run]\nworkers = 2\n",
    )
    .unwrap();
    (dir, cfg)
}

#[test]
fn stage_order_is_enforced() {
    let (dir, cfg) = corpus();
    let cfg = cfg.to_str().unwrap();
    let early = curate(&["denoise", "--config", cfg], dir.path());
    assert_eq!(early.status.code(), Some(2), "{}", String::from_utf8_lossy(&early.stderr));
    assert!(String::from_utf8_lossy(&early.stderr).contains("cannot run 'denoise'"));
    assert!(curate(&["ingest", "--config", cfg], dir.path()).status.success());
    assert!(curate(&["trim", "--config", cfg], dir.path()).status.success());
    assert!(curate(&["denoise", "--config", cfg], dir.path()).status.success());
}

#[test]
fn bad_config_exits_with_one() {
    let (dir, cfg) = corpus();
    let text = std::fs::read_to_string(&cfg).unwrap() + "\n[split]\nval_permile = 50\n";
    std::fs::write(&cfg, text).unwrap();
    let out = curate(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("out").exists(), "a rejected config must not produce outputs");
    let missing = curate(&["run", "--config", "nowhere.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn select_speakers_prints_the_cohort_report() {
    let (dir, cfg) = corpus();
    let cfg_s = cfg.to_str().unwrap();
    for stage in ["ingest", "trim", "denoise", "score"] {
        let o = curate(&[stage, "--config", cfg_s], dir.path());
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let out = curate(&["select-speakers", "--config", cfg_s], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Recompute the cohort straight from the denoised audio with the intonation module.
    let config = PipelineConfig::load(&cfg).unwrap();
    let work = config.work_dir();
    let state: PipelineState =
        serde_json::from_slice(&std::fs::read(work.join("score").join("state.json")).unwrap()).unwrap();
    let mut analysed = Vec::new();
    for clip in state.clips.iter().filter(|c| c.is_pending()) {
        let key = clip.denoise_key.as_ref().unwrap();
        let buf = read_wav(work.join("denoise").join("artifacts").join(format!("{key}.wav"))).unwrap();
        let track = extract_f0(&buf, &config.intonation.pitch()).unwrap();
        analysed.push((clip.speaker_id.clone(), utterance_prosody(&track).unwrap()));
    }
    assert_eq!(analysed.len(), 12);
    let profiles = build_profiles(analysed.iter().map(|(s, p)| (s.as_str(), p)), 1);
    let sel = select_cohort(&profiles, 2).unwrap();
    let direct = CohortReport::new(&profiles, 2, Some(&sel), None);

    let printed: CohortReport = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(printed, direct);
    assert_eq!(printed.cohort, vec!["spk0".to_string(), "spk1".to_string()]);
}

#[test]
fn run_then_stats_and_mos() {
    let (dir, cfg) = corpus();
    let cfg_s = cfg.to_str().unwrap();
    let run = curate(&["run", "--config", cfg_s, "--workers", "3", "--seed", "11"], dir.path());
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&run)).unwrap();
    assert_eq!(summary["input_clips"], 12);
    assert_eq!(summary["accepted"], 6);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out").join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["quality"]["threshold"], 3.5);
    assert_eq!(report["config"]["split"]["seed"], 11);
    assert_eq!(report["config"]["run"]["workers"], 3);

    let stats = curate(&["stats", "--config", cfg_s, "--seed", "11"], dir.path());
    assert!(stats.status.success(), "{}", String::from_utf8_lossy(&stats.stderr));
    let stats: serde_json::Value = serde_json::from_str(&stdout(&stats)).unwrap();
    assert_eq!(stats["n_clips"], 6);
    assert_eq!(stats["n_speakers"], 2);

    let scores = dir.path().join("scores.tsv");
    std::fs::write(&scores, "rater_id\tsample_id\tscore\nr1\ta\t4\nr2\ta\t3\nr1\tb\t4\nr2\tb\t4\n").unwrap();
    let mos = curate(&["mos", scores.to_str().unwrap()], dir.path());
    assert!(mos.status.success());
    assert_eq!(stdout(&mos).trim(), "3.75");
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "rater_id\tsample_id\tscore\nr1\ta\t7\n").unwrap();
    assert_eq!(curate(&["mos", bad.to_str().unwrap()], dir.path()).status.code(), Some(1));
}
