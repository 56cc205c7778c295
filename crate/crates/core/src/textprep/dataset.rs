//! Dataset and label-vocabulary file IO.
//!
//! Datasets are JSON-lines: one `{"id": ..., "text": ..., "labels": [...]}`
//! object per line. Label vocabularies are plain text, one label code per
//! line; the line number is the label index.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::Deserialize;

use super::{PrepError, Result};

#[derive(Debug, Clone)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    text: String,
    labels: Vec<String>,
}

/// Ordered label codes; position in the file is the label index.
#[derive(Debug, Clone)]
pub struct LabelVocab {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn from_codes(codes: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(PrepError::Parse { line: i + 1, msg: format!("duplicate label {c:?}") });
            }
        }
        Ok(LabelVocab { codes, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let codes = text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().to_string()).collect();
        Self::from_codes(codes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| PrepError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, idx: usize) -> &str {
        &self.codes[idx]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    /// Binary indicator vector over the vocabulary for a label set.
    pub fn binarize<S: AsRef<str>>(&self, labels: &[S]) -> Vec<bool> {
        let mut out = vec![false; self.codes.len()];
        for l in labels {
            if let Some(i) = self.index_of(l.as_ref()) {
                out[i] = true;
            }
        }
        out
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.codes.join("\n");
        s.push('\n');
        s
    }
}

/// Parse a JSON-lines dataset, validating label codes against `labels` and
/// id uniqueness. Errors carry the 1-based line number.
pub fn parse_dataset(text: &str, labels: &LabelVocab) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(line).map_err(|e| PrepError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        for l in &rec.labels {
            if labels.index_of(l).is_none() {
                return Err(PrepError::UnknownLabel { line: i + 1, label: l.clone() });
            }
        }
        if !seen_ids.insert(rec.id.clone()) {
            return Err(PrepError::DuplicateId(rec.id));
        }
        docs.push(Document { id: rec.id, text: rec.text, labels: rec.labels });
    }
    Ok(docs)
}

pub fn load_dataset(path: &Path, labels: &LabelVocab) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path).map_err(|source| PrepError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, labels)
}

pub fn load_label_vocab(path: &Path) -> Result<LabelVocab> {
    LabelVocab::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelVocab {
        LabelVocab::from_codes(vec!["A1".into(), "B2".into()]).unwrap()
    }

    #[test]
    fn well_formed_line_parses() {
        let docs = parse_dataset(r#"{"id": "d1", "text": "hello", "labels": ["A1"]}"#, &labels()).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].id, "d1");
        assert_eq!(labels().binarize(&docs[0].labels), vec![true, false]);
    }

    #[test]
    fn missing_field_names_line() {
        let text = "{\"id\": \"d1\", \"text\": \"x\", \"labels\": []}\n{\"id\": \"d2\", \"text\": \"y\"}";
        let err = parse_dataset(text, &labels()).unwrap_err();
        assert!(matches!(err, PrepError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_label_rejected() {
        let err = parse_dataset(r#"{"id": "d1", "text": "x", "labels": ["Z9"]}"#, &labels()).unwrap_err();
        assert!(matches!(err, PrepError::UnknownLabel { line: 1, .. }));
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = "{\"id\": \"d1\", \"text\": \"x\", \"labels\": []}\n{\"id\": \"d1\", \"text\": \"y\", \"labels\": []}";
        assert!(matches!(parse_dataset(text, &labels()), Err(PrepError::DuplicateId(_))));
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_dataset("", &labels()).unwrap().is_empty());
    }

    #[test]
    fn label_vocab_round_trip() {
        let lv = labels();
        let again = LabelVocab::parse(&lv.to_file_string()).unwrap();
        assert_eq!(again.codes(), lv.codes());
        assert_eq!(again.index_of("B2"), Some(1));
    }
}
