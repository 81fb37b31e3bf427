//! Error-word extraction and homophone candidate generation.
//!
//! Candidates for a slang word are every character combination that shares a
//! toneless reading with the original at each position, minus the original
//! itself, kept only when the combination occurs more than `combo_min` times
//! in the corpus.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Instance;
use crate::lexicon::{FrequencyDict, LexiconError, PinyinTable, Segmenter};

pub const DEFAULT_MIN_FREQ: u64 = 10;
pub const DEFAULT_COMBO_MIN: u64 = 100;

#[derive(Debug, thiserror::Error)]
pub enum HomogenError {
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error("no candidate characters for {word:?}: position {position} has no homophones")]
    EmptyCandidateSet { word: String, position: usize },
    #[error("instance {id}: error span out of range")]
    SpanOutOfRange { id: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlangEntry {
    pub word: String,
    pub frequency: u64,
    #[serde(default)]
    pub gloss: Option<String>,
}

impl SlangEntry {
    pub fn new(word: impl Into<String>, frequency: u64) -> Self {
        Self { word: word.into(), frequency, gloss: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    /// Syllable shared with the original at each position. Empty when the
    /// candidate was read back from a candidates file.
    pub root: Vec<String>,
    /// Sum of per-character corpus counts (F_h).
    pub aggregate_frequency: u64,
    pub combo_frequency: u64,
    pub percentile: Option<f64>,
    /// Bits.
    pub self_information: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub original: SlangEntry,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }
}

/// One line of a candidates file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub original: String,
    pub text: String,
    #[serde(rename = "F_h")]
    pub aggregate_frequency: u64,
    #[serde(rename = "combo_freq")]
    pub combo_frequency: u64,
    pub percentile: Option<f64>,
    pub self_info: Option<f64>,
}

impl CandidateRecord {
    pub fn from_candidate(original: &str, c: &Candidate) -> Self {
        Self {
            original: original.to_string(),
            text: c.text.clone(),
            aggregate_frequency: c.aggregate_frequency,
            combo_frequency: c.combo_frequency,
            percentile: c.percentile,
            self_info: c.self_information,
        }
    }
}

pub fn candidate_sets_to_jsonl(sets: &[CandidateSet]) -> String {
    let mut out = String::new();
    for set in sets {
        for c in &set.candidates {
            let rec = CandidateRecord::from_candidate(&set.original.word, c);
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}

/// Groups candidate records by original word, in first-appearance order.
/// `slang` supplies frequencies and glosses where known.
pub fn candidate_sets_from_jsonl(text: &str, slang: &[SlangEntry]) -> Result<Vec<CandidateSet>, HomogenError> {
    let mut sets: Vec<CandidateSet> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: CandidateRecord =
            serde_json::from_str(raw).map_err(|e| HomogenError::Parse { line: i + 1, reason: e.to_string() })?;
        let slot = *index.entry(rec.original.clone()).or_insert_with(|| {
            let original = slang
                .iter()
                .find(|s| s.word == rec.original)
                .cloned()
                .unwrap_or_else(|| SlangEntry::new(rec.original.clone(), 1));
            sets.push(CandidateSet { original, candidates: Vec::new() });
            sets.len() - 1
        });
        sets[slot].candidates.push(Candidate {
            text: rec.text,
            root: Vec::new(),
            aggregate_frequency: rec.aggregate_frequency,
            combo_frequency: rec.combo_frequency,
            percentile: rec.percentile,
            self_information: rec.self_info,
        });
    }
    Ok(sets)
}

pub fn slang_to_jsonl(entries: &[SlangEntry]) -> String {
    entries.iter().map(|e| serde_json::to_string(e).expect("entry serializes") + "\n").collect()
}

pub fn parse_slang(text: &str) -> Result<Vec<SlangEntry>, HomogenError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |reason: String| HomogenError::Parse { line: i + 1, reason };
        let entry: SlangEntry = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        if entry.word.is_empty() {
            return Err(err("empty word".into()));
        }
        if entry.frequency == 0 {
            return Err(err("frequency must be at least 1".into()));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn load_slang(path: impl AsRef<Path>) -> Result<Vec<SlangEntry>, HomogenError> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|source| HomogenError::Io { path: path.display().to_string(), source })?;
    parse_slang(&text)
}

/// Segments each source error span and returns the tokens seen at least
/// `min_freq` times, most frequent first, ties in code-point order.
pub fn extract_error_words(
    instances: &[Instance],
    seg: &Segmenter,
    min_freq: u64,
) -> Result<Vec<SlangEntry>, HomogenError> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for inst in instances {
        for span in &inst.src_error_spans {
            let text = span.slice(&inst.source).ok_or_else(|| HomogenError::SpanOutOfRange { id: inst.id.clone() })?;
            for token in seg.segment(text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
    }
    let mut out: Vec<SlangEntry> =
        counts.into_iter().filter(|(_, n)| *n >= min_freq.max(1)).map(|(w, n)| SlangEntry::new(w, n)).collect();
    out.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.word.cmp(&b.word)));
    Ok(out)
}

/// Characters sharing at least one reading with each position of `word`.
pub(crate) fn homophone_positions(word: &str, table: &PinyinTable) -> Result<Vec<Vec<char>>, HomogenError> {
    let readings = table.latinize(word)?;
    readings
        .iter()
        .enumerate()
        .map(|(position, syllables)| {
            let chars: BTreeSet<char> =
                syllables.iter().filter_map(|s| table.chars_for(s)).flat_map(|set| set.iter().copied()).collect();
            if chars.is_empty() {
                Err(HomogenError::EmptyCandidateSet { word: word.to_string(), position })
            } else {
                Ok(chars.into_iter().collect())
            }
        })
        .collect()
}

pub fn generate_candidates(
    entry: &SlangEntry,
    table: &PinyinTable,
    dict: &FrequencyDict,
    combo_min: u64,
) -> Result<CandidateSet, HomogenError> {
    let positions = homophone_positions(&entry.word, table)?;
    let original_readings = table.latinize(&entry.word)?;

    let mut candidates = Vec::new();
    let mut odometer = vec![0usize; positions.len()];
    let mut text = String::new();
    'outer: loop {
        text.clear();
        text.extend(odometer.iter().zip(&positions).map(|(&i, chars)| chars[i]));
        if text != entry.word {
            let combo_frequency = dict.get(&text);
            if combo_frequency > combo_min {
                candidates.push(Candidate {
                    aggregate_frequency: text.chars().map(|c| dict.char_count(c)).sum(),
                    root: shared_root(&text, &original_readings, table),
                    text: text.clone(),
                    combo_frequency,
                    percentile: None,
                    self_information: None,
                });
            }
        }
        for pos in (0..odometer.len()).rev() {
            odometer[pos] += 1;
            if odometer[pos] < positions[pos].len() {
                continue 'outer;
            }
            odometer[pos] = 0;
        }
        break;
    }
    candidates
        .sort_by(|a, b| Reverse(a.combo_frequency).cmp(&Reverse(b.combo_frequency)).then_with(|| a.text.cmp(&b.text)));
    Ok(CandidateSet { original: entry.clone(), candidates })
}

fn shared_root(text: &str, original: &[BTreeSet<String>], table: &PinyinTable) -> Vec<String> {
    text.chars()
        .zip(original)
        .map(|(c, orig)| table.syllables(c).and_then(|s| s.intersection(orig).next().cloned()).unwrap_or_default())
        .collect()
}
