//! Corpus frequency counts, the toneless pinyin table and dictionary
//! segmentation.
//!
//! All three structures are immutable once built and can be shared freely
//! between threads.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("read failed at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: u64 },
    #[error("unknown character {ch:?} at position {position}")]
    UnknownCharacter { ch: char, position: usize },
    #[error("pinyin table line {line}: {reason}")]
    Table { line: usize, reason: String },
    #[error("invalid frequency dictionary: {0}")]
    Dict(String),
    #[error("frequency dictionary JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Counts of single characters and (optionally) character n-grams.
///
/// Multi-character keys hold overlapping substring counts, which is what the
/// candidate filter compares against its threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyDict {
    pub source_id: String,
    pub total_chars: u64,
    pub counts: BTreeMap<String, u64>,
}

impl FrequencyDict {
    pub fn builder() -> FrequencyDictBuilder {
        FrequencyDictBuilder::default()
    }

    /// Count of `key`; absent keys count as zero.
    pub fn get(&self, key: &str) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn char_count(&self, c: char) -> u64 {
        let mut buf = [0u8; 4];
        self.get(c.encode_utf8(&mut buf))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dict serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LexiconError> {
        let dict: FrequencyDict = serde_json::from_str(text)?;
        if let Some((k, _)) = dict.counts.iter().find(|(_, v)| **v == 0) {
            return Err(LexiconError::Dict(format!("zero count for key {k:?}")));
        }
        if let Some(k) = dict.counts.keys().find(|k| k.is_empty()) {
            return Err(LexiconError::Dict(format!("empty key {k:?}")));
        }
        Ok(dict)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let text = fs::read_to_string(path).map_err(|source| LexiconError::Io { offset: 0, source })?;
        Self::from_json(&text)
    }
}

/// Accumulates corpus lines into a [`FrequencyDict`].
#[derive(Debug, Clone)]
pub struct FrequencyDictBuilder {
    min_count: u64,
    max_ngram: usize,
    source_id: String,
    raw: HashMap<String, u64>,
    total_chars: u64,
}

impl Default for FrequencyDictBuilder {
    fn default() -> Self {
        Self { min_count: 1, max_ngram: 1, source_id: "corpus".to_string(), raw: HashMap::new(), total_chars: 0 }
    }
}

impl FrequencyDictBuilder {
    /// Keys seen fewer than `max(min_count, 1)` times are dropped at build.
    pub fn min_count(mut self, min_count: u64) -> Self {
        self.min_count = min_count;
        self
    }

    /// Also count every substring of 2..=`n` characters (overlapping).
    pub fn max_ngram(mut self, n: usize) -> Self {
        self.max_ngram = n.max(1);
        self
    }

    pub fn source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn add_line(&mut self, line: &str) {
        let chars: Vec<char> = line.chars().filter(|c| *c != '\n' && *c != '\r').collect();
        self.total_chars += chars.len() as u64;
        let mut key = String::new();
        for start in 0..chars.len() {
            key.clear();
            for c in chars[start..].iter().take(self.max_ngram) {
                key.push(*c);
                *self.raw.entry(key.clone()).or_insert(0) += 1;
            }
        }
    }

    /// Reads newline-separated documents, reporting the byte offset of any
    /// read or decoding failure.
    pub fn read_from<R: Read>(&mut self, reader: R) -> Result<(), LexiconError> {
        let mut reader = BufReader::new(reader);
        let mut offset = 0u64;
        let mut buf = Vec::new();
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf).map_err(|source| LexiconError::Io { offset, source })?;
            if n == 0 {
                return Ok(());
            }
            let line = std::str::from_utf8(&buf)
                .map_err(|e| LexiconError::InvalidUtf8 { offset: offset + e.valid_up_to() as u64 })?;
            self.add_line(line);
            offset += n as u64;
        }
    }

    pub fn build(self) -> FrequencyDict {
        let floor = self.min_count.max(1);
        FrequencyDict {
            source_id: self.source_id,
            total_chars: self.total_chars,
            counts: self.raw.into_iter().filter(|(_, v)| *v >= floor).collect(),
        }
    }
}

/// Character counts over `corpus`; `total_chars` includes pruned characters.
pub fn build_frequency_dict<I, S>(corpus: I, min_count: u64) -> FrequencyDict
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut builder = FrequencyDict::builder().min_count(min_count);
    for line in corpus {
        builder.add_line(line.as_ref());
    }
    builder.build()
}

/// Lowercases a pinyin syllable and strips tone marks and tone digits.
/// `ü` (and `u:`) become `v`. Returns `None` if anything but `a-z` remains.
pub fn normalize_syllable(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    let lowered = raw.trim().to_lowercase().replace("u:", "v");
    for c in lowered.chars() {
        let base = match c {
            'ā' | 'á' | 'ǎ' | 'à' => 'a',
            'ē' | 'é' | 'ě' | 'è' | 'ê' => 'e',
            'ī' | 'í' | 'ǐ' | 'ì' => 'i',
            'ō' | 'ó' | 'ǒ' | 'ò' => 'o',
            'ū' | 'ú' | 'ǔ' | 'ù' => 'u',
            'ü' | 'ǖ' | 'ǘ' | 'ǚ' | 'ǜ' => 'v',
            'ń' | 'ň' | 'ǹ' => 'n',
            'ḿ' => 'm',
            '1'..='5' => continue,
            c if c.is_ascii_lowercase() => c,
            _ => return None,
        };
        out.push(base);
    }
    (!out.is_empty()).then_some(out)
}

/// Two-way map between characters and their toneless syllables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PinyinTable {
    char_to_syllables: BTreeMap<char, BTreeSet<String>>,
    syllable_to_chars: BTreeMap<String, BTreeSet<char>>,
}

impl PinyinTable {
    /// Parses `字<TAB>zi` lines. Blank lines and `#` comments are skipped.
    /// A repeated (character, syllable) line is an error; tone variants of
    /// the same syllable collapse into one reading.
    pub fn from_tsv(text: &str) -> Result<Self, LexiconError> {
        let mut table = PinyinTable::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| LexiconError::Table { line: line_no, reason };
            let mut fields = line.split('\t');
            let (Some(ch), Some(syl), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(err("expected exactly two tab-separated fields".into()));
            };
            let mut chars = ch.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(err(format!("{ch:?} is not a single character")));
            };
            if !seen.insert((c, syl.to_string())) {
                return Err(err(format!("duplicate pair {c}\t{syl}")));
            }
            let norm = normalize_syllable(syl).ok_or_else(|| err(format!("invalid syllable {syl:?}")))?;
            table.insert(c, norm);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let text = fs::read_to_string(path).map_err(|source| LexiconError::Io { offset: 0, source })?;
        Self::from_tsv(&text)
    }

    /// Builds a table from (character, syllable) pairs, normalizing syllables.
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, LexiconError>
    where
        I: IntoIterator<Item = (char, S)>,
        S: AsRef<str>,
    {
        let mut table = PinyinTable::default();
        for (i, (c, s)) in pairs.into_iter().enumerate() {
            let norm = normalize_syllable(s.as_ref()).ok_or_else(|| LexiconError::Table {
                line: i + 1,
                reason: format!("invalid syllable {:?}", s.as_ref()),
            })?;
            table.insert(c, norm);
        }
        Ok(table)
    }

    fn insert(&mut self, c: char, syllable: String) {
        self.syllable_to_chars.entry(syllable.clone()).or_default().insert(c);
        self.char_to_syllables.entry(c).or_default().insert(syllable);
    }

    pub fn syllables(&self, c: char) -> Option<&BTreeSet<String>> {
        self.char_to_syllables.get(&c)
    }

    pub fn chars_for(&self, syllable: &str) -> Option<&BTreeSet<char>> {
        self.syllable_to_chars.get(syllable)
    }

    pub fn char_to_syllables(&self) -> &BTreeMap<char, BTreeSet<String>> {
        &self.char_to_syllables
    }

    pub fn syllable_to_chars(&self) -> &BTreeMap<String, BTreeSet<char>> {
        &self.syllable_to_chars
    }

    pub fn len(&self) -> usize {
        self.char_to_syllables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_to_syllables.is_empty()
    }

    /// Per-position toneless readings of `word`.
    pub fn latinize(&self, word: &str) -> Result<Vec<BTreeSet<String>>, LexiconError> {
        word.chars()
            .enumerate()
            .map(|(position, ch)| self.syllables(ch).cloned().ok_or(LexiconError::UnknownCharacter { ch, position }))
            .collect()
    }
}

pub fn latinize(word: &str, table: &PinyinTable) -> Result<Vec<BTreeSet<String>>, LexiconError> {
    table.latinize(word)
}

/// Greedy left-to-right longest-match segmenter over a fixed word list.
#[derive(Debug, Clone, Default)]
pub struct Segmenter {
    words: HashSet<String>,
    max_word_len: usize,
}

impl Segmenter {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: HashSet<String> = words.into_iter().map(Into::into).filter(|w| !w.is_empty()).collect();
        let max_word_len = words.iter().map(|w| w.chars().count()).max().unwrap_or(1);
        Self { words, max_word_len }
    }

    /// One word per line; extra whitespace-separated columns (frequency,
    /// part of speech) are ignored.
    pub fn from_word_list(text: &str) -> Self {
        Self::new(
            text.lines()
                .filter(|l| !l.starts_with('#'))
                .filter_map(|l| l.split_whitespace().next())
                .map(str::to_string),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let text = fs::read_to_string(path).map_err(|source| LexiconError::Io { offset: 0, source })?;
        Ok(Self::from_word_list(&text))
    }

    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn segment<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
        let n_chars = bounds.len() - 1;
        let mut tokens = Vec::new();
        let mut i = 0;
        while i < n_chars {
            let longest = self.max_word_len.min(n_chars - i);
            let len =
                (2..=longest).rev().find(|len| self.words.contains(&text[bounds[i]..bounds[i + len]])).unwrap_or(1);
            tokens.push(&text[bounds[i]..bounds[i + len]]);
            i += len;
        }
        tokens
    }
}

pub fn segment<'a>(text: &'a str, seg: &Segmenter) -> Vec<&'a str> {
    seg.segment(text)
}
