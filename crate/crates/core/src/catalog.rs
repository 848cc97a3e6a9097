//! Crowdsourced clip catalogs: parsing, vote and demographic filters, and
//! speaker contribution ranking.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REQUIRED_COLUMNS: [&str; 7] =
    ["client_id", "path", "sentence", "up_votes", "down_votes", "age", "gender"];

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog header lacks required column '{0}'")]
    MissingColumn(String),
    #[error("catalog is empty or has no header row")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A non-fatal problem with one data row; the row is skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub speaker_id: String,
    pub audio_path: String,
    pub transcript: String,
    pub up_votes: u32,
    pub down_votes: u32,
    pub age: Option<String>,
    pub gender: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusCatalog {
    pub records: Vec<ClipRecord>,
    pub source_path: String,
}

impl CorpusCatalog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Result of parsing: the catalog plus rows that were skipped.
#[derive(Debug, Clone, Default)]
pub struct ParsedCatalog {
    pub catalog: CorpusCatalog,
    pub row_errors: Vec<RowError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    #[default]
    Tab,
    Comma,
}

impl Delimiter {
    fn byte(self) -> u8 {
        match self {
            Delimiter::Tab => b'\t',
            Delimiter::Comma => b',',
        }
    }
}

/// `a/b/x1.mp3` → `x1`
pub fn clip_id_from_path(path: &str) -> &str {
    let name = path.rsplit(['/', '\\']).next().unwrap_or(path);
    match name.rfind('.') {
        Some(dot) if dot > 0 => &name[..dot],
        _ => name,
    }
}

fn optional_token(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

fn parse_votes(field: &str, name: &str) -> Result<u32, String> {
    field.trim().parse::<u32>().map_err(|_| format!("non-numeric {name}"))
}

/// Parses a delimited catalog with a header row. Extra columns are ignored;
/// rows with bad vote counts, missing fields, invalid UTF-8 or a repeated
/// clip id are reported and skipped.
pub fn parse_catalog<R: Read>(
    reader: R,
    delimiter: Delimiter,
    source_path: &str,
) -> Result<ParsedCatalog, CatalogError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter.byte())
        // Transcripts routinely contain unbalanced quotes.
        .quoting(delimiter == Delimiter::Comma)
        .flexible(true)
        .from_reader(reader);

    let mut rows = rdr.byte_records();
    let header = match rows.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(csv_to_io(e).into()),
        None => return Err(CatalogError::MissingHeader),
    };
    let header: Vec<String> = header
        .iter()
        .map(|f| String::from_utf8_lossy(f).trim().trim_start_matches('\u{feff}').to_string())
        .collect();
    let mut index = HashMap::new();
    for name in REQUIRED_COLUMNS {
        let pos = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CatalogError::MissingColumn(name.to_string()))?;
        index.insert(name, pos);
    }
    let col = |name: &str| index[name];

    let mut parsed = ParsedCatalog {
        catalog: CorpusCatalog { records: Vec::new(), source_path: source_path.to_string() },
        row_errors: Vec::new(),
    };
    let mut seen = HashSet::new();
    for row in rows {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line_no = e.position().map(|p| p.line() as usize).unwrap_or(0);
                parsed.row_errors.push(RowError { line_no, reason: e.to_string() });
                continue;
            }
        };
        let line_no = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() == 1 && row[0].iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match build_record(&row, &col) {
            Ok(rec) if !seen.insert(rec.clip_id.clone()) => parsed.row_errors.push(RowError {
                line_no,
                reason: format!("duplicate clip_id '{}'", rec.clip_id),
            }),
            Ok(rec) => parsed.catalog.records.push(rec),
            Err(reason) => parsed.row_errors.push(RowError { line_no, reason }),
        }
    }
    Ok(parsed)
}

fn build_record(row: &csv::ByteRecord, col: &dyn Fn(&str) -> usize) -> Result<ClipRecord, String> {
    let field = |name: &str| -> Result<&str, String> {
        let raw = row.get(col(name)).ok_or_else(|| format!("missing field {name}"))?;
        std::str::from_utf8(raw).map_err(|_| format!("invalid UTF-8 in {name}"))
    };
    let audio_path = field("path")?.trim().to_string();
    let clip_id = clip_id_from_path(&audio_path).to_string();
    if clip_id.is_empty() {
        return Err("empty path".into());
    }
    Ok(ClipRecord {
        clip_id,
        speaker_id: field("client_id")?.trim().to_string(),
        audio_path,
        transcript: field("sentence")?.to_string(),
        up_votes: parse_votes(field("up_votes")?, "up_votes")?,
        down_votes: parse_votes(field("down_votes")?, "down_votes")?,
        age: optional_token(field("age")?),
        gender: optional_token(field("gender")?),
    })
}

fn csv_to_io(e: csv::Error) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
}

pub fn read_catalog(path: impl AsRef<Path>, delimiter: Delimiter) -> Result<ParsedCatalog, CatalogError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    parse_catalog(std::io::BufReader::new(file), delimiter, &path.display().to_string())
}

/// Keeps clips with at least `min_up_votes` up-votes. The validation rule
/// "more than two up-votes" corresponds to `min_up_votes = 3`.
pub fn filter_min_up_votes(catalog: &CorpusCatalog, min_up_votes: u32) -> CorpusCatalog {
    CorpusCatalog {
        records: catalog.records.iter().filter(|r| r.up_votes >= min_up_votes).cloned().collect(),
        source_path: catalog.source_path.clone(),
    }
}

/// Keeps validated clips: more than two up-votes. Down-votes are not consulted.
pub fn filter_validated(catalog: &CorpusCatalog) -> CorpusCatalog {
    filter_min_up_votes(catalog, 3)
}

pub fn matches_demographic(record: &ClipRecord, gender: &str, ages: Option<&BTreeSet<String>>) -> bool {
    let gender_ok = record.gender.as_deref().is_some_and(|g| g.eq_ignore_ascii_case(gender));
    let age_ok = match ages {
        None => true,
        Some(ages) => record
            .age
            .as_deref()
            .is_some_and(|a| ages.iter().any(|want| want.eq_ignore_ascii_case(a))),
    };
    gender_ok && age_ok
}

pub fn filter_demographic(
    catalog: &CorpusCatalog,
    gender: &str,
    ages: Option<&BTreeSet<String>>,
) -> CorpusCatalog {
    assert!(!gender.trim().is_empty(), "gender token must be non-empty");
    CorpusCatalog {
        records: catalog
            .records
            .iter()
            .filter(|r| matches_demographic(r, gender, ages))
            .cloned()
            .collect(),
        source_path: catalog.source_path.clone(),
    }
}

/// Speakers ranked by clip count (descending), ties by speaker id.
pub fn top_contributors(catalog: &CorpusCatalog, n: usize) -> Vec<(String, usize)> {
    assert!(n >= 1, "n must be positive");
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &catalog.records {
        *counts.entry(r.speaker_id.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().map(|(s, c)| (s.to_string(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(n);
    ranked
}
