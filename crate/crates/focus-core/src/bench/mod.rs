//! Dataset ingestion, metrics, benchmark execution, and analysis reports.
//!
//! Datasets arrive as JSONL manifests with an explicit question type per
//! record; converters from the public dataset formats live in `scripts/`
//! and are deliberately outside the tested surface.

pub mod metrics;
pub mod proportions;
pub mod run;
pub mod strategies;

use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gate::GateError;
use crate::router::{CompareError, PipelineError};

pub use metrics::{
    normalize_answer, score_binary, score_mcq, score_mme, score_vqa_soft, MmeReport,
    MmeSubtaskScore, NORMALIZATION_VERSION,
};
pub use proportions::{report_proportions, ProportionTable, RunTag};
pub use run::{run_benchmark, BenchmarkReport, RunOutput};
pub use strategies::{compare_strategies, CorrectPath, StrategyRow, StrategyTable};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("manifest line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("record {id}: image not found at {path}")]
    MissingImage { id: String, path: PathBuf },
    #[error("pair {pair_id} has {count} member(s), expected exactly 2")]
    Pairing { pair_id: String, count: usize },
    #[error("strategy labels do not match the manifest: {0}")]
    LabelMismatch(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Compare(#[from] CompareError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Mcq,
    Open,
    Binary,
}

/// One benchmark item.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QARecord {
    pub id: String,
    /// Relative paths resolve against the manifest file's directory.
    pub image_path: PathBuf,
    pub question: String,
    pub qtype: QuestionType,
    /// Multiple-choice options (mcq only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub choices: Option<Vec<String>>,
    /// mcq: the single gold letter; open: 1-10 annotator answers;
    /// binary: "yes" or "no".
    pub gold: Vec<String>,
    /// Perception/cognition subtask name (paired binary records only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subtask: Option<String>,
    /// Groups the two questions asked of one image (paired binary records
    /// only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pair_id: Option<String>,
}

impl QARecord {
    /// Is this record part of a paired perception/cognition benchmark?
    pub fn is_paired(&self) -> bool {
        self.pair_id.is_some()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id is empty".into());
        }
        if self.question.is_empty() {
            return Err("question is empty".into());
        }
        match self.qtype {
            QuestionType::Mcq => {
                let choices = self
                    .choices
                    .as_ref()
                    .filter(|c| !c.is_empty())
                    .ok_or("mcq record needs non-empty choices")?;
                if self.gold.len() != 1 {
                    return Err(format!("mcq record needs exactly 1 gold, got {}", self.gold.len()));
                }
                let gold = self.gold[0].trim().to_uppercase();
                let mut letters = String::new();
                let valid = gold.len() == 1
                    && gold.as_bytes()[0].is_ascii_uppercase()
                    && usize::from(gold.as_bytes()[0] - b'A') < choices.len();
                if !valid {
                    for i in 0..choices.len() {
                        letters.push((b'A' + i as u8) as char);
                    }
                    return Err(format!("gold {:?} is not one of the choice letters {letters:?}", self.gold[0]));
                }
            }
            QuestionType::Open => {
                if self.gold.is_empty() || self.gold.len() > 10 {
                    return Err(format!(
                        "open record needs 1..=10 gold answers, got {}",
                        self.gold.len()
                    ));
                }
            }
            QuestionType::Binary => {
                let ok = self
                    .gold
                    .first()
                    .map(|g| {
                        let g = g.trim().to_lowercase();
                        g == "yes" || g == "no"
                    })
                    .unwrap_or(false);
                if !ok {
                    return Err(format!("binary gold must be yes/no, got {:?}", self.gold));
                }
            }
        }
        if self.pair_id.is_some() != self.subtask.is_some() {
            return Err("subtask and pair_id must be present together".into());
        }
        if self.pair_id.is_some() && self.qtype != QuestionType::Binary {
            return Err("paired records must be binary".into());
        }
        Ok(())
    }
}

/// Load and validate a JSONL manifest. Image paths are resolved against the
/// manifest's directory and must exist; duplicate ids are rejected.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<QARecord>, BenchError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: QARecord =
            serde_json::from_str(&line).map_err(|e| BenchError::Schema {
                line: line_no,
                reason: e.to_string(),
            })?;
        record.validate().map_err(|reason| BenchError::Schema {
            line: line_no,
            reason,
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(BenchError::Schema {
                line: line_no,
                reason: format!("duplicate id {:?}", record.id),
            });
        }
        if record.image_path.is_relative() {
            record.image_path = base.join(&record.image_path);
        }
        if !record.image_path.is_file() {
            return Err(BenchError::MissingImage {
                id: record.id,
                path: record.image_path,
            });
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
pub(crate) mod test_fixtures {
    use super::*;
    use crate::image_ref::ImageRef;

    /// Write a white PNG and return its path.
    pub fn white_png(dir: &Path, name: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, ImageRef::solid(32, 32, [255, 255, 255, 255]).bytes()).unwrap();
        path
    }

    pub fn open_record(id: &str, question: &str, image: &Path, gold: Vec<&str>) -> QARecord {
        QARecord {
            id: id.into(),
            image_path: image.into(),
            question: question.into(),
            qtype: QuestionType::Open,
            choices: None,
            gold: gold.into_iter().map(String::from).collect(),
            subtask: None,
            pair_id: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use test_fixtures::white_png;

    fn manifest_line(id: &str, image: &str) -> String {
        format!(
            r#"{{"id":"{id}","image_path":"{image}","question":"what?","qtype":"open","gold":["x"]}}"#
        )
    }

    #[test]
    fn loads_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        white_png(dir.path(), "a.png");
        let manifest = dir.path().join("m.jsonl");
        let lines: Vec<String> = (0..3).map(|i| manifest_line(&format!("r{i}"), "a.png")).collect();
        std::fs::write(&manifest, lines.join("\n")).unwrap();
        let records = load_manifest(&manifest).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records[0].image_path.is_absolute() || records[0].image_path.starts_with(dir.path()));
    }

    #[test]
    fn rejects_bad_mcq_gold_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        white_png(dir.path(), "a.png");
        let manifest = dir.path().join("m.jsonl");
        let bad = r#"{"id":"r1","image_path":"a.png","question":"?","qtype":"mcq","choices":["w","x","y","z"],"gold":["E"]}"#;
        std::fs::write(&manifest, format!("{}\n{bad}", manifest_line("r0", "a.png"))).unwrap();
        match load_manifest(&manifest) {
            Err(BenchError::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        white_png(dir.path(), "a.png");
        let manifest = dir.path().join("m.jsonl");
        std::fs::write(
            &manifest,
            format!("{}\n{}", manifest_line("dup", "a.png"), manifest_line("dup", "a.png")),
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&manifest),
            Err(BenchError::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn rejects_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.jsonl");
        std::fs::write(&manifest, manifest_line("r0", "ghost.png")).unwrap();
        assert!(matches!(
            load_manifest(&manifest),
            Err(BenchError::MissingImage { .. })
        ));
    }

    #[test]
    fn rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        white_png(dir.path(), "a.png");
        let manifest = dir.path().join("m.jsonl");
        std::fs::write(
            &manifest,
            r#"{"id":"r0","image_path":"a.png","question":"?","qtype":"open","gold":["x"],"bogus":1}"#,
        )
        .unwrap();
        assert!(matches!(load_manifest(&manifest), Err(BenchError::Schema { .. })));
    }

    #[test]
    fn record_validation_cases() {
        let mut r = QARecord {
            id: "x".into(),
            image_path: "i.png".into(),
            question: "?".into(),
            qtype: QuestionType::Binary,
            choices: None,
            gold: vec!["yes".into()],
            subtask: Some("existence".into()),
            pair_id: Some("p1".into()),
        };
        assert!(r.validate().is_ok());
        r.subtask = None;
        assert!(r.validate().is_err()); // pair without subtask
        r.subtask = Some("existence".into());
        r.gold = vec!["maybe".into()];
        assert!(r.validate().is_err());
    }
}
