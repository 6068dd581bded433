use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label reserved for the catch-all class when present in a vocabulary file.
pub const OTHER_LABEL: &str = "other";

/// Ordered class labels with one designated catch-all class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary")]
pub struct TechniqueVocabulary {
    labels: Vec<String>,
    other_index: usize,
}

#[derive(Deserialize)]
struct RawVocabulary {
    labels: Vec<String>,
    other_index: usize,
}

impl TryFrom<RawVocabulary> for TechniqueVocabulary {
    type Error = Error;

    fn try_from(raw: RawVocabulary) -> Result<Self> {
        Self::new(raw.labels, raw.other_index)
    }
}

impl TechniqueVocabulary {
    pub fn new(labels: Vec<String>, other_index: usize) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "need at least 2 classes, got {}",
                labels.len()
            )));
        }
        if let Some(empty) = labels.iter().position(|l| l.trim().is_empty()) {
            return Err(Error::InvalidVocabulary(format!("label {empty} is empty")));
        }
        for (i, label) in labels.iter().enumerate() {
            if labels[..i].contains(label) {
                return Err(Error::InvalidVocabulary(format!("duplicate label {label:?}")));
            }
        }
        if other_index >= labels.len() {
            return Err(Error::InvalidVocabulary(format!(
                "other index {other_index} out of range for {} classes",
                labels.len()
            )));
        }
        Ok(Self {
            labels,
            other_index,
        })
    }

    /// The catch-all class is the label named `other` if present, else the last label.
    pub fn from_labels<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let other = labels
            .iter()
            .position(|l| l == OTHER_LABEL)
            .unwrap_or(labels.len().saturating_sub(1));
        Self::new(labels, other)
    }

    /// Parses a vocabulary file: one label per line, blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_labels(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Class count `k`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn other_index(&self) -> usize {
        self.other_index
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_owned(),
                known: self.labels.join(", "),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_file_format() {
        let v = TechniqueVocabulary::parse("# 4-class\nslide\nstaccato\n\ntrill\nother\n").unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.other_index(), 3);
        assert_eq!(v.index_of("trill").unwrap(), 2);
        assert!(matches!(v.index_of("glissando"), Err(Error::UnknownLabel { .. })));
    }

    #[test]
    fn other_defaults_to_last() {
        let v = TechniqueVocabulary::from_labels(["a", "b", "c"]).unwrap();
        assert_eq!(v.other_index(), 2);
        let v = TechniqueVocabulary::from_labels(["other", "b"]).unwrap();
        assert_eq!(v.other_index(), 0);
    }

    #[test]
    fn rejects_invalid() {
        assert!(TechniqueVocabulary::from_labels(["solo"]).is_err());
        assert!(TechniqueVocabulary::from_labels(["a", "a"]).is_err());
        assert!(TechniqueVocabulary::new(vec!["a".into(), "b".into()], 2).is_err());
        assert!(serde_json::from_str::<TechniqueVocabulary>(
            r#"{"labels":["a","a"],"other_index":0}"#
        )
        .is_err());
    }
}
