use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::packet::split_assignments;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    /// Program structure (`ft1`, `ft2`, ...), extracted after a compiler pass.
    Static,
    /// Run-time behaviour, e.g. hardware counter readings.
    Dynamic,
}

impl FeatureKind {
    pub fn packet_key(self) -> &'static str {
        match self {
            FeatureKind::Static => "STATIC_FEATURE_VECTOR",
            FeatureKind::Dynamic => "DYNAMIC_FEATURE_VECTOR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureError {
    #[error("feature vector is empty")]
    Empty,
    #[error("duplicate feature index {0}")]
    DuplicateIndex(String),
    #[error("bad feature entry: {0}")]
    BadEntry(String),
}

/// Sparse, dimension-agnostic numeric vector keyed by index name.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    kind: FeatureKind,
    entries: BTreeMap<String, f64>,
    anchor_pass: String,
}

impl FeatureVector {
    pub fn new(
        kind: FeatureKind,
        entries: impl IntoIterator<Item = (String, f64)>,
    ) -> Result<Self, FeatureError> {
        let mut map = BTreeMap::new();
        for (name, value) in entries {
            if name.is_empty() || name.contains([',', '=']) || name.chars().any(char::is_whitespace)
            {
                return Err(FeatureError::BadEntry(name));
            }
            if !value.is_finite() {
                return Err(FeatureError::BadEntry(format!("{name}={value}")));
            }
            if map.insert(name.clone(), value).is_some() {
                return Err(FeatureError::DuplicateIndex(name));
            }
        }
        if map.is_empty() {
            return Err(FeatureError::Empty);
        }
        Ok(Self {
            kind,
            entries: map,
            anchor_pass: String::new(),
        })
    }

    pub fn with_anchor_pass(mut self, pass: impl Into<String>) -> Self {
        self.anchor_pass = pass.into();
        self
    }

    /// Parses the `ft1=9, ft2=4, ...` list form. A trailing `...` is ignored.
    pub fn parse(kind: FeatureKind, raw: &str) -> Result<Self, FeatureError> {
        let mut entries = Vec::new();
        for item in split_assignments(raw.trim().trim_end_matches("...")) {
            let (name, value) = item.map_err(FeatureError::BadEntry)?;
            let value: f64 = value
                .parse()
                .map_err(|_| FeatureError::BadEntry(format!("{name}={value}")))?;
            entries.push((name.to_string(), value));
        }
        Self::new(kind, entries)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn anchor_pass(&self) -> &str {
        &self.anchor_pass
    }

    pub fn entries(&self) -> &BTreeMap<String, f64> {
        &self.entries
    }

    pub fn get(&self, index: &str) -> Option<f64> {
        self.entries.get(index).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// List form as it appears after `STATIC_FEATURE_VECTOR=`.
    pub fn to_list(&self) -> String {
        let body = self
            .entries
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        format!(" {body}")
    }
}

impl fmt::Display for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_list().trim_start())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tool_output() {
        let v = FeatureVector::parse(
            FeatureKind::Static,
            " ft1=9, ft2=4, ft3=2, ft4=0, ft5=5, ft6=2, ft7=0, ft8=3, ft9=1, ft10=1, ft11=1, ft12=0, ft13=5, ft14=2, ...",
        )
        .unwrap();
        assert_eq!(v.len(), 14);
        assert_eq!(v.get("ft13"), Some(5.0));
    }

    #[test]
    fn round_trips_list_form() {
        let v = FeatureVector::parse(FeatureKind::Dynamic, "PAPI_TOT_INS=12.5, ft2=4").unwrap();
        let back = FeatureVector::parse(FeatureKind::Dynamic, &v.to_list()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn rejects_empty_and_duplicates() {
        assert_eq!(
            FeatureVector::parse(FeatureKind::Static, " "),
            Err(FeatureError::Empty)
        );
        assert_eq!(
            FeatureVector::parse(FeatureKind::Static, "ft1=1, ft1=2"),
            Err(FeatureError::DuplicateIndex("ft1".into()))
        );
        assert!(FeatureVector::parse(FeatureKind::Static, "ft1").is_err());
    }
}
