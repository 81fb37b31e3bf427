//! Human-rating tasks: seeded export of candidates to rate, import and
//! validation of the resulting ratings, and a latest-wins rating store used
//! by the annotation server.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::homogen::CandidateSet;
use crate::metrics::RatingRecord;

pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("no source sentence contains {original:?} (needed as context for {candidate:?})")]
    MissingContext { candidate: String, original: String },
    #[error("line {line}: {reason}")]
    Validation { line: usize, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    WithContext,
    WithoutContext,
}

impl Mode {
    pub fn context_shown(self) -> bool {
        self == Mode::WithContext
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "with_context" => Some(Mode::WithContext),
            "without_context" => Some(Mode::WithoutContext),
            _ => None,
        }
    }
}

/// One candidate to rate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub candidate_text: String,
    pub original_text: String,
    pub context_shown: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_context: Option<String>,
}

/// Builds task items for every candidate in `sets`, shuffled by `seed`.
///
/// With context, each item carries one source sentence containing the
/// original slang, drawn with the same seeded generator.
pub fn annotate_export(
    sets: &[CandidateSet],
    dataset: &Dataset,
    with_context: bool,
    seed: u64,
) -> Result<Vec<TaskItem>, AnnotateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for set in sets {
        let original = &set.original.word;
        let contexts: Vec<&str> = if with_context {
            dataset.instances.iter().map(|i| i.source.as_str()).filter(|s| s.contains(original.as_str())).collect()
        } else {
            Vec::new()
        };
        for cand in &set.candidates {
            let source_context = if with_context {
                let ctx = contexts.choose(&mut rng).ok_or_else(|| AnnotateError::MissingContext {
                    candidate: cand.text.clone(),
                    original: original.clone(),
                })?;
                Some(ctx.to_string())
            } else {
                None
            };
            items.push(TaskItem {
                candidate_text: cand.text.clone(),
                original_text: original.clone(),
                context_shown: with_context,
                source_context,
            });
        }
    }
    items.shuffle(&mut rng);
    Ok(items)
}

pub fn tasks_to_jsonl(items: &[TaskItem]) -> String {
    to_jsonl(items)
}

pub fn parse_tasks(text: &str) -> Result<Vec<TaskItem>, AnnotateError> {
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(raw).map_err(|e| AnnotateError::Validation { line: i + 1, reason: e.to_string() })?,
        );
    }
    Ok(items)
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskItem>, AnnotateError> {
    parse_tasks(&read(path.as_ref())?)
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}

fn read(path: &Path) -> Result<String, AnnotateError> {
    fs::read_to_string(path).map_err(|source| AnnotateError::Io { path: path.display().to_string(), source })
}

/// Ratings in file order, plus an index by annotator.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatingSet {
    pub records: Vec<RatingRecord>,
}

impl RatingSet {
    pub fn by_annotator(&self) -> BTreeMap<&str, Vec<&RatingRecord>> {
        let mut groups: BTreeMap<&str, Vec<&RatingRecord>> = BTreeMap::new();
        for r in &self.records {
            groups.entry(r.annotator_id.as_str()).or_default().push(r);
        }
        groups
    }

    pub fn in_mode(&self, mode: Mode) -> Vec<RatingRecord> {
        self.records.iter().filter(|r| r.context_shown == mode.context_shown()).cloned().collect()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }
}

/// Parses and validates rating lines. An annotator may rate a candidate
/// once per mode.
pub fn parse_ratings(text: &str) -> Result<RatingSet, AnnotateError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: RatingRecord =
            serde_json::from_str(raw).map_err(|e| AnnotateError::Validation { line, reason: e.to_string() })?;
        rec.validate().map_err(|e| AnnotateError::Validation { line, reason: e.to_string() })?;
        let key = (rec.annotator_id.clone(), rec.original_text.clone(), rec.candidate_text.clone(), rec.context_shown);
        if !seen.insert(key) {
            return Err(AnnotateError::Validation {
                line,
                reason: format!("annotator {:?} already rated {:?} in this mode", rec.annotator_id, rec.candidate_text),
            });
        }
        records.push(rec);
    }
    Ok(RatingSet { records })
}

pub fn annotate_import(path: impl AsRef<Path>) -> Result<RatingSet, AnnotateError> {
    parse_ratings(&read(path.as_ref())?)
}

/// Ratings collected live; re-rating the same (annotator, original,
/// candidate, mode) replaces the earlier record.
#[derive(Debug, Clone, Default)]
pub struct RatingStore {
    records: BTreeMap<(String, bool, String, String), RatingRecord>,
}

impl RatingStore {
    pub fn from_set(set: RatingSet) -> Self {
        let mut store = Self::default();
        for r in set.records {
            store.records.insert(Self::key(&r), r);
        }
        store
    }

    fn key(r: &RatingRecord) -> (String, bool, String, String) {
        (r.annotator_id.clone(), r.context_shown, r.original_text.clone(), r.candidate_text.clone())
    }

    /// Validates and stores `r`. Returns true when it replaced an earlier
    /// rating.
    pub fn upsert(&mut self, r: RatingRecord) -> Result<bool, AnnotateError> {
        r.validate().map_err(|e| AnnotateError::Validation { line: 0, reason: e.to_string() })?;
        Ok(self.records.insert(Self::key(&r), r).is_some())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_set(&self) -> RatingSet {
        RatingSet { records: self.records.values().cloned().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EmotionLabel, Instance};
    use crate::homogen::{Candidate, SlangEntry};

    fn sets() -> Vec<CandidateSet> {
        let cand = |t: &str| Candidate {
            text: t.into(),
            root: vec![],
            aggregate_frequency: 0,
            combo_frequency: 0,
            percentile: None,
            self_information: None,
        };
        vec![
            CandidateSet {
                original: SlangEntry::new("尼玛", 60),
                candidates: vec![cand("你妈"), cand("泥马"), cand("尼马")],
            },
            CandidateSet { original: SlangEntry::new("卧槽", 22), candidates: vec![cand("我操"), cand("卧草")] },
        ]
    }

    fn dataset(sources: &[&str]) -> Dataset {
        let instances = sources
            .iter()
            .enumerate()
            .map(|(i, s)| Instance {
                id: i.to_string(),
                source: s.to_string(),
                mt: "x".into(),
                qe_score: 0.1,
                src_error_spans: vec![],
                tgt_error_spans: vec![],
                reference: None,
                emotion_label: EmotionLabel::Anger,
            })
            .collect();
        Dataset { name: "d".into(), instances }
    }

    #[test]
    fn export_is_seeded() {
        let ds = dataset(&["尼玛好热", "卧槽了", "真尼玛"]);
        let a = annotate_export(&sets(), &ds, true, 0).unwrap();
        let b = annotate_export(&sets(), &ds, true, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for item in &a {
            assert!(item.source_context.as_ref().unwrap().contains(&item.original_text));
        }
        let plain = annotate_export(&sets(), &ds, false, 0).unwrap();
        assert!(plain.iter().all(|i| i.source_context.is_none() && !i.context_shown));
        assert!(!tasks_to_jsonl(&plain).contains("source_context"));
        assert_eq!(parse_tasks(&tasks_to_jsonl(&a)).unwrap(), a);
    }

    #[test]
    fn export_needs_context() {
        let ds = dataset(&["尼玛好热"]);
        assert!(matches!(
            annotate_export(&sets(), &ds, true, 0),
            Err(AnnotateError::MissingContext { original, .. }) if original == "卧槽"
        ));
    }

    const R: &str = r#"{"candidate_text":"你妈","original_text":"尼玛","annotator_id":"a1","score":5,"context_shown":false,"source_context":null}"#;

    #[test]
    fn import_validates() {
        let set = parse_ratings(&format!("{R}\n{}\n", R.replace("a1", "a2"))).unwrap();
        assert_eq!(set.by_annotator().len(), 2);
        assert_eq!(set.to_jsonl(), format!("{R}\n{}\n", R.replace("a1", "a2")));

        let dup = parse_ratings(&format!("{R}\n{R}\n"));
        assert!(matches!(dup, Err(AnnotateError::Validation { line: 2, .. })));
        let bad = parse_ratings(&R.replace("\"score\":5", "\"score\":7"));
        assert!(matches!(bad, Err(AnnotateError::Validation { line: 1, .. })));
    }

    #[test]
    fn store_is_latest_wins() {
        let mut store = RatingStore::default();
        let mut r: RatingRecord = serde_json::from_str(R).unwrap();
        assert!(!store.upsert(r.clone()).unwrap());
        r.score = 2;
        assert!(store.upsert(r.clone()).unwrap());
        assert_eq!(store.len(), 1);
        assert_eq!(store.to_set().records[0].score, 2);
        r.score = 0;
        assert!(store.upsert(r).is_err());
    }
}
