//! Multiple-choice examples stored one JSON object per line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer: usize,
    /// Entity surfaces to use instead of grounding the question text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_entities: Option<Vec<String>>,
    /// Per-choice entity surfaces; one list per choice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_entities: Option<Vec<Vec<String>>>,
}

impl Example {
    pub fn validate(&self) -> Result<(), String> {
        if self.choices.len() < 2 {
            return Err(format!("example {:?} has {} choices; at least 2 required", self.id, self.choices.len()));
        }
        if self.answer >= self.choices.len() {
            return Err(format!(
                "example {:?}: answer {} out of range for {} choices",
                self.id,
                self.answer,
                self.choices.len()
            ));
        }
        if let Some(ce) = &self.choice_entities {
            if ce.len() != self.choices.len() {
                return Err(format!("example {:?}: choice_entities must have one list per choice", self.id));
            }
        }
        Ok(())
    }
}

/// Named dataset partitions; `<dir>/<name>.jsonl` on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    IhDev,
    IhTest,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IhDev => "ihdev",
            Split::IhTest => "ihtest",
        }
    }

    pub fn path_in(self, dir: impl AsRef<Path>) -> PathBuf {
        dir.as_ref().join(format!("{}.jsonl", self.name()))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "ihdev" => Ok(Split::IhDev),
            "ihtest" => Ok(Split::IhTest),
            _ => Err(format!("unknown split {s:?} (expected train, ihdev or ihtest)")),
        }
    }
}

/// Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<Example>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(line).map_err(|e| DatasetError::Invalid { line: i + 1, msg: e.to_string() })?;
        ex.validate().map_err(|msg| DatasetError::Invalid { line: i + 1, msg })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })?;
    parse_dataset(&text)
}

pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<Example>, DatasetError> {
    load_dataset(split.path_in(dir))
}

pub fn to_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[Example]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(examples)).map_err(|source| DatasetError::Io { path: path.to_owned(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{"id":"a","question":"q one","choices":["x","y"],"answer":1}

{"id":"b","question":"q two","choices":["x","y","z"],"answer":0,"question_entities":["x"]}
"#;

    #[test]
    fn parses_valid_lines_in_order() {
        let ex = parse_dataset(TWO).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!((ex[0].id.as_str(), ex[1].answer), ("a", 0));
        assert_eq!(ex[1].question_entities.as_deref(), Some(&["x".to_string()][..]));
        assert_eq!(parse_dataset(&to_jsonl(&ex)).unwrap(), ex);
    }

    #[test]
    fn answer_equal_to_choice_count_is_rejected() {
        let bad = r#"{"id":"c","question":"q","choices":["a","b","c","d","e"],"answer":5}"#;
        let err = parse_dataset(&format!("{}\n{bad}\n", TWO.lines().next().unwrap())).unwrap_err();
        assert!(matches!(err, DatasetError::Invalid { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = parse_dataset("\n\n{\"id\": 1}\n").unwrap_err();
        assert!(err.to_string().starts_with("line 3:"), "{err}");
        assert!(parse_dataset(r#"{"id":"a","question":"q","choices":["x"],"answer":0}"#).is_err());
        assert!(parse_dataset(r#"{"id":"a","question":"q","choices":["x","y"],"answer":0,"extra":1}"#).is_err());
    }

    #[test]
    fn split_names() {
        assert_eq!("ihdev".parse::<Split>(), Ok(Split::IhDev));
        assert!(Split::IhTest.path_in("/d").ends_with("ihtest.jsonl"));
        assert!("dev".parse::<Split>().is_err());
    }
}
