//! JSONL benchmark datasets: one `{id, problem, answer, subject?}` object per
//! line.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: String,
    #[serde(rename = "problem")]
    pub statement: String,
    #[serde(rename = "answer")]
    pub ground_truth: String,
    #[serde(default)]
    pub subject: Option<String>,
    #[serde(default)]
    pub source_dataset: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset contains no problems")]
    Empty,
}

/// Problems plus the malformed lines skipped in permissive mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub problems: Vec<ProblemInstance>,
    pub skipped: Vec<(usize, String)>,
}

#[derive(Deserialize)]
struct RawLine {
    id: serde_json::Value,
    problem: String,
    answer: serde_json::Value,
    #[serde(default)]
    subject: Option<String>,
}

fn id_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_line(line: &str, source: &str) -> Result<ProblemInstance, String> {
    let raw: RawLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let id = id_text(&raw.id).ok_or("`id` must be a string or number")?;
    let answer = id_text(&raw.answer).ok_or("`answer` must be a string or number")?;
    if id.trim().is_empty() {
        return Err("empty `id`".into());
    }
    if raw.problem.trim().is_empty() {
        return Err("empty `problem`".into());
    }
    if answer.trim().is_empty() {
        return Err("empty `answer`".into());
    }
    Ok(ProblemInstance {
        id,
        statement: raw.problem,
        ground_truth: answer,
        subject: raw.subject,
        source_dataset: source.to_string(),
    })
}

pub fn parse_dataset(text: &str, source: &str, permissive: bool) -> Result<Dataset, DatasetError> {
    let mut problems = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(line, source).and_then(|p| {
            if seen.contains(&p.id) {
                Err(format!("duplicate id `{}`", p.id))
            } else {
                Ok(p)
            }
        });
        match parsed {
            Ok(p) => {
                seen.insert(p.id.clone());
                problems.push(p);
            }
            Err(message) if permissive => skipped.push((line_no, message)),
            Err(message) => return Err(DatasetError::Parse { line: line_no, message }),
        }
    }
    if problems.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(Dataset { problems, skipped })
}

pub fn load_dataset(path: &Path, permissive: bool) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_dataset(&text, &source, permissive)
}
