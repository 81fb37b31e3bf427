//! Quality-annotated MT records and slang-bearing subset selection.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::homogen::SlangEntry;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line}, field `{field}`: {reason}")]
    Validation { line: usize, field: String, reason: String },
    #[error("unknown emotion label {0:?}")]
    InvalidLabel(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    fn at(line: usize, field: &str, reason: impl Into<String>) -> Self {
        DatasetError::Validation { line, field: field.to_string(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Anger,
    Joy,
    Sadness,
    Surprise,
    Fear,
    Neutral,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 6] = [
        EmotionLabel::Anger,
        EmotionLabel::Joy,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
        EmotionLabel::Fear,
        EmotionLabel::Neutral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "anger",
            EmotionLabel::Joy => "joy",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Neutral => "neutral",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionLabel {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EmotionLabel::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| DatasetError::InvalidLabel(s.to_string()))
    }
}

/// Half-open `[start, end)` range of character (code point) offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// The spanned text, or `None` when the span is empty, reversed or out
    /// of bounds for `text`.
    pub fn slice<'a>(&self, text: &'a str) -> Option<&'a str> {
        if self.start >= self.end {
            return None;
        }
        let mut idx = text.char_indices().map(|(i, _)| i).chain([text.len()]);
        let begin = idx.nth(self.start)?;
        let end = idx.nth(self.end - self.start - 1)?;
        Some(&text[begin..end])
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub source: String,
    pub mt: String,
    pub qe_score: f64,
    pub src_error_spans: Vec<Span>,
    pub tgt_error_spans: Vec<Span>,
    pub reference: Option<String>,
    pub emotion_label: EmotionLabel,
}

impl Instance {
    fn check_spans(&self, line: usize) -> Result<(), DatasetError> {
        for (field, text, spans) in [
            ("src_error_spans", &self.source, &self.src_error_spans),
            ("tgt_error_spans", &self.mt, &self.tgt_error_spans),
        ] {
            let len = text.chars().count();
            for s in spans {
                if s.start >= s.end {
                    return Err(DatasetError::at(
                        line,
                        field,
                        format!("span [{}, {}] has start >= end", s.start, s.end),
                    ));
                }
                if s.end > len {
                    return Err(DatasetError::at(
                        line,
                        field,
                        format!("span [{}, {}] exceeds text length {len}", s.start, s.end),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Parses JSON lines and validates every record. Blank lines are skipped.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, DatasetError> {
        let mut instances = Vec::new();
        let mut ids = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let inst: Instance = serde_json::from_str(raw).map_err(|e| {
                let reason = e.to_string();
                let field = reason.split('`').nth(1).filter(|_| reason.contains("field")).unwrap_or("").to_string();
                DatasetError::Validation { line, field, reason }
            })?;
            if inst.id.is_empty() {
                return Err(DatasetError::at(line, "id", "empty id"));
            }
            if !inst.qe_score.is_finite() {
                return Err(DatasetError::at(line, "qe_score", "not a finite number"));
            }
            inst.check_spans(line)?;
            if !ids.insert(inst.id.clone()) {
                return Err(DatasetError::at(line, "id", format!("duplicate id {:?}", inst.id)));
            }
            instances.push(inst);
        }
        if instances.is_empty() {
            return Err(DatasetError::at(0, "", "empty dataset"));
        }
        Ok(Dataset { name: name.into(), instances })
    }

    pub fn to_jsonl(&self) -> String {
        instances_to_jsonl(&self.instances)
    }
}

pub(crate) fn instances_to_jsonl(instances: &[Instance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        out.push('\n');
    }
    out
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::parse(name, &text)
}

/// Instances whose source contains at least one slang word as a substring,
/// in their original order.
pub fn select_containing(ds: &Dataset, slang: &[SlangEntry]) -> Dataset {
    let instances = ds
        .instances
        .iter()
        .filter(|inst| slang.iter().any(|s| inst.source.contains(s.word.as_str())))
        .cloned()
        .collect();
    Dataset { name: format!("{}-selected", ds.name), instances }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, source: &str) -> Instance {
        Instance {
            id: id.into(),
            source: source.into(),
            mt: "mt".into(),
            qe_score: 0.5,
            src_error_spans: vec![],
            tgt_error_spans: vec![],
            reference: None,
            emotion_label: EmotionLabel::Anger,
        }
    }

    fn line(id: &str, spans: &str) -> String {
        format!(
            r#"{{"id":"{id}","source":"卧槽好热","mt":"lying trough so hot","qe_score":0.4,"src_error_spans":{spans},"tgt_error_spans":[[0,12]],"reference":null,"emotion_label":"anger"}}"#
        )
    }

    #[test]
    fn span_slicing_uses_code_points() {
        assert_eq!(Span::new(2, 4).slice("真是卧槽了"), Some("卧槽"));
        assert_eq!(Span::new(0, 5).slice("真是卧槽了"), Some("真是卧槽了"));
        assert_eq!(Span::new(4, 6).slice("真是卧槽了"), None);
        assert_eq!(Span::new(3, 3).slice("真是卧槽了"), None);
    }

    #[test]
    fn empty_file_is_rejected() {
        match Dataset::parse("x", "\n") {
            Err(DatasetError::Validation { reason, .. }) => assert_eq!(reason, "empty dataset"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reversed_span_is_named() {
        let text = format!("{}\n{}\n", line("a", "[[0,2]]"), line("b", "[[3,1]]"));
        match Dataset::parse("x", &text) {
            Err(DatasetError::Validation { line, field, reason }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "src_error_spans");
                assert!(reason.contains("[3, 1]"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_span_and_duplicate_ids() {
        assert!(Dataset::parse("x", &line("a", "[[0,9]]")).is_err());
        let text = format!("{}\n{}\n", line("a", "[]"), line("a", "[]"));
        match Dataset::parse("x", &text) {
            Err(DatasetError::Validation { line: 2, field, .. }) => assert_eq!(field, "id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_label_is_a_validation_error() {
        let text = line("a", "[]").replace("anger", "disgust");
        assert!(matches!(Dataset::parse("x", &text), Err(DatasetError::Validation { line: 1, .. })));
        assert!(matches!("disgust".parse::<EmotionLabel>(), Err(DatasetError::InvalidLabel(_))));
        assert_eq!("fear".parse::<EmotionLabel>().unwrap(), EmotionLabel::Fear);
    }

    #[test]
    fn select_keeps_order() {
        let ds = Dataset {
            name: "t".into(),
            instances: vec![inst("1", "卧槽好热"), inst("2", "今天下雨"), inst("3", "真的卧槽")],
        };
        let slang = [SlangEntry::new("卧槽", 2)];
        let sel = select_containing(&ds, &slang);
        assert_eq!(sel.instances.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["1", "3"]);
        assert_eq!(select_containing(&sel, &slang).instances, sel.instances);

        let none = select_containing(&ds, &[SlangEntry::new("劳资", 1)]);
        assert!(none.is_empty());
    }

    #[test]
    fn round_trip_is_identity() {
        let text = format!("{}\n{}\n", line("a", "[[0,2]]"), line("b", "[]"));
        let ds = Dataset::parse("x", &text).unwrap();
        assert_eq!(ds.to_jsonl(), text);
        assert_eq!(Dataset::parse("x", &ds.to_jsonl()).unwrap(), ds);
    }
}
