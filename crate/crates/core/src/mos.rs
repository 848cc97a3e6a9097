//! Mean opinion score aggregation over individual rater scores.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MosError {
    #[error("no scores to aggregate")]
    EmptyScores,
    #[error("score {value} from rater '{rater}' for sample '{sample}' is outside 1..=5")]
    OutOfRange { rater: String, sample: String, value: i64 },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterScore {
    pub rater_id: String,
    pub sample_id: String,
    pub score: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMos {
    pub mos: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosSummary {
    pub overall_mos: f64,
    pub n_scores: usize,
    pub per_sample: BTreeMap<String, SampleMos>,
    pub ci95_halfwidth: f64,
}

/// `MOS = sum / N` over every individual score, with a normal-approximation
/// 95% half-width from the sample standard deviation.
pub fn compute_mos(scores: &[RaterScore]) -> Result<MosSummary, MosError> {
    if scores.is_empty() {
        return Err(MosError::EmptyScores);
    }
    if let Some(bad) = scores.iter().find(|s| !(1..=5).contains(&s.score)) {
        return Err(MosError::OutOfRange { rater: bad.rater_id.clone(), sample: bad.sample_id.clone(), value: bad.score });
    }
    let n = scores.len();
    // Integer sums keep the mean exact and independent of input order.
    let total: i64 = scores.iter().map(|s| s.score).sum();
    let mean = total as f64 / n as f64;

    let mut sums: BTreeMap<&str, (i64, usize)> = BTreeMap::new();
    for s in scores {
        let e = sums.entry(&s.sample_id).or_default();
        e.0 += s.score;
        e.1 += 1;
    }
    let per_sample = sums
        .into_iter()
        .map(|(id, (sum, cnt))| (id.to_string(), SampleMos { mos: sum as f64 / cnt as f64, n: cnt }))
        .collect();

    let ci95_halfwidth = if n < 2 {
        0.0
    } else {
        let sq: i64 = scores.iter().map(|s| s.score * s.score).sum();
        // n*sum(x^2) - (sum x)^2 is exact in integers.
        let num = (n as i64 * sq - total * total) as f64;
        let var = num / (n as f64 * (n as f64 - 1.0));
        1.96 * var.sqrt() / (n as f64).sqrt()
    };
    Ok(MosSummary { overall_mos: mean, n_scores: n, per_sample, ci95_halfwidth })
}

/// Parses `rater_id<TAB>sample_id<TAB>score` rows after a header line.
/// Repeated (rater, sample) pairs are rejected.
pub fn parse_scores<R: Read>(mut reader: R) -> Result<Vec<RaterScore>, MosError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim_start_matches('\u{feff}').trim_end_matches('\r'));
    let cols: Vec<&str> = header.unwrap_or_default().split('\t').map(str::trim).collect();
    if cols != ["rater_id", "sample_id", "score"] {
        return Err(MosError::Parse { line: 1, reason: "expected header 'rater_id<TAB>sample_id<TAB>score'".into() });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [rater, sample, score] = fields[..] else {
            return Err(MosError::Parse { line: line_no, reason: format!("expected 3 fields, found {}", fields.len()) });
        };
        let score: i64 = score
            .trim()
            .parse()
            .map_err(|_| MosError::Parse { line: line_no, reason: format!("score '{score}' is not an integer") })?;
        if !seen.insert((rater.to_string(), sample.to_string())) {
            return Err(MosError::Parse { line: line_no, reason: format!("duplicate score from '{rater}' for '{sample}'") });
        }
        out.push(RaterScore { rater_id: rater.into(), sample_id: sample.into(), score });
    }
    Ok(out)
}
