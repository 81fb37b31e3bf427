//! Candidate ranking: the percentile baseline over summed character counts,
//! and self-information `I(x) = -log2 P(x)` under a log-probability provider.

use std::cmp::Ordering;
use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::homogen::{Candidate, CandidateSet};
use crate::lexicon::FrequencyDict;
use crate::parallel::ordered_map;
use crate::wire::{Transport, TransportError};

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("provider {provider}: {cause}")]
    Failed { provider: String, cause: String },
    #[error("provider {provider} violated its contract: {reason}")]
    ContractViolation { provider: String, reason: String },
    #[error("provider {provider}: text at batch index {index} is empty")]
    InvalidText { provider: String, index: usize },
}

impl ProviderError {
    pub(crate) fn from_transport(provider: &str, err: TransportError) -> Self {
        match err {
            TransportError::Decode { .. } => {
                ProviderError::ContractViolation { provider: provider.to_string(), reason: err.to_string() }
            }
            other => ProviderError::Failed { provider: provider.to_string(), cause: other.to_string() },
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("candidate set for {word:?} is empty")]
    EmptyCandidateSet { word: String },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("cannot score empty text")]
    EmptyText,
}

/// Natural-log sequence probabilities for a batch of texts.
pub trait LogProbProvider: Send + Sync {
    fn name(&self) -> &str;

    /// One finite value `<= 0` per input text, in input order.
    fn log_probs(&self, texts: &[String]) -> Result<Vec<f64>, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Percentile,
    SelfInformation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Asc,
    Desc,
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "asc" => Ok(Direction::Asc),
            "desc" => Ok(Direction::Desc),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Asc => "asc",
            Direction::Desc => "desc",
        })
    }
}

impl Method {
    /// Order used when no direction is requested: percentile keeps the
    /// ascending F_h order, self-information puts the most informative first.
    pub fn natural_direction(self) -> Direction {
        match self {
            Method::Percentile => Direction::Asc,
            Method::SelfInformation => Direction::Desc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub candidate: Candidate,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidates {
    pub original: String,
    pub method: Method,
    pub provider_name: String,
    pub direction: Direction,
    pub items: Vec<RankedItem>,
    pub k: usize,
}

impl RankedCandidates {
    /// The first `min(k, len)` items.
    pub fn top_k(&self) -> &[RankedItem] {
        &self.items[..self.k.min(self.items.len())]
    }

    pub fn with_k(mut self, k: usize) -> Result<Self, ScoringError> {
        if k == 0 {
            return Err(ScoringError::InvalidK);
        }
        self.k = k;
        Ok(self)
    }

    /// Re-sorts by score in `direction`; equal scores stay in code-point order.
    pub fn oriented(mut self, direction: Direction) -> Self {
        sort_by_score(&mut self.items, direction);
        self.direction = direction;
        self
    }
}

fn sort_by_score(items: &mut [RankedItem], direction: Direction) {
    items.sort_by(|a, b| {
        let by_score = a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal);
        let by_score = match direction {
            Direction::Asc => by_score,
            Direction::Desc => by_score.reverse(),
        };
        by_score.then_with(|| a.candidate.text.cmp(&b.candidate.text))
    });
}

/// Percentile baseline: sort ascending by summed character frequency (ties by
/// code point) and score the 1-based position as `index / n * 100`.
pub fn percentile_scores(cands: &CandidateSet, dict: &FrequencyDict) -> Result<RankedCandidates, ScoringError> {
    if cands.is_empty() {
        return Err(ScoringError::EmptyCandidateSet { word: cands.original.word.clone() });
    }
    let mut sorted: Vec<Candidate> = cands
        .candidates
        .iter()
        .cloned()
        .map(|mut c| {
            c.aggregate_frequency = c.text.chars().map(|ch| dict.char_count(ch)).sum();
            c
        })
        .collect();
    sorted.sort_by(|a, b| a.aggregate_frequency.cmp(&b.aggregate_frequency).then_with(|| a.text.cmp(&b.text)));
    let n = sorted.len() as f64;
    let items = sorted
        .into_iter()
        .enumerate()
        .map(|(i, mut c)| {
            let p = (i + 1) as f64 / n * 100.0;
            c.percentile = Some(p);
            RankedItem { candidate: c, score: p }
        })
        .collect::<Vec<_>>();
    Ok(RankedCandidates {
        original: cands.original.word.clone(),
        method: Method::Percentile,
        provider_name: "corpus".to_string(),
        direction: Direction::Asc,
        k: items.len(),
        items,
    })
}

/// Bits of surprise for a natural-log probability.
pub fn information_bits(provider: &str, log_prob: f64) -> Result<f64, ProviderError> {
    if !log_prob.is_finite() || log_prob > 0.0 {
        return Err(ProviderError::ContractViolation {
            provider: provider.to_string(),
            reason: format!("log-probability {log_prob} is not a finite value <= 0"),
        });
    }
    // + 0.0 turns -0.0 into 0.0
    Ok(-log_prob / LN_2 + 0.0)
}

pub fn self_information(text: &str, provider: &dyn LogProbProvider) -> Result<f64, ScoringError> {
    if text.is_empty() {
        return Err(ScoringError::EmptyText);
    }
    let lps = provider.log_probs(&[text.to_string()])?;
    let [lp] = lps[..] else {
        return Err(ProviderError::ContractViolation {
            provider: provider.name().to_string(),
            reason: format!("expected 1 log-probability, got {}", lps.len()),
        }
        .into());
    };
    Ok(information_bits(provider.name(), lp)?)
}

/// Scores the whole set with one provider call and sorts by descending
/// self-information, ties in code-point order.
pub fn rank_by_self_information(
    cands: &CandidateSet,
    provider: &dyn LogProbProvider,
    k: usize,
) -> Result<RankedCandidates, ScoringError> {
    if k == 0 {
        return Err(ScoringError::InvalidK);
    }
    let texts: Vec<String> = cands.candidates.iter().map(|c| c.text.clone()).collect();
    let lps = if texts.is_empty() { Vec::new() } else { provider.log_probs(&texts)? };
    if lps.len() != texts.len() {
        return Err(ProviderError::ContractViolation {
            provider: provider.name().to_string(),
            reason: format!("expected {} log-probabilities, got {}", texts.len(), lps.len()),
        }
        .into());
    }
    let mut items = cands
        .candidates
        .iter()
        .zip(lps)
        .map(|(c, lp)| {
            let bits = information_bits(provider.name(), lp)?;
            let mut c = c.clone();
            c.self_information = Some(bits);
            Ok(RankedItem { candidate: c, score: bits })
        })
        .collect::<Result<Vec<_>, ProviderError>>()?;
    sort_by_score(&mut items, Direction::Desc);
    Ok(RankedCandidates {
        original: cands.original.word.clone(),
        method: Method::SelfInformation,
        provider_name: provider.name().to_string(),
        direction: Direction::Desc,
        items,
        k,
    })
}

/// Character unigram model over a frequency dictionary. Unseen characters
/// count as 0.5 occurrences.
#[derive(Debug, Clone)]
pub struct CorpusUnigramProvider {
    dict: Arc<FrequencyDict>,
}

pub const UNSEEN_CHAR_COUNT: f64 = 0.5;

impl CorpusUnigramProvider {
    pub fn new(dict: Arc<FrequencyDict>) -> Result<Self, ProviderError> {
        if dict.total_chars == 0 {
            return Err(ProviderError::Failed {
                provider: "corpus".to_string(),
                cause: "frequency dictionary has no characters".to_string(),
            });
        }
        Ok(Self { dict })
    }

    fn log_prob(&self, text: &str) -> f64 {
        let total = self.dict.total_chars as f64;
        text.chars()
            .map(|c| match self.dict.char_count(c) {
                0 => (UNSEEN_CHAR_COUNT / total).ln(),
                n => (n as f64 / total).ln(),
            })
            .sum()
    }
}

pub fn corpus_unigram_provider(dict: Arc<FrequencyDict>) -> Result<CorpusUnigramProvider, ProviderError> {
    CorpusUnigramProvider::new(dict)
}

impl LogProbProvider for CorpusUnigramProvider {
    fn name(&self) -> &str {
        "corpus"
    }

    fn log_probs(&self, texts: &[String]) -> Result<Vec<f64>, ProviderError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                if t.is_empty() {
                    Err(ProviderError::InvalidText { provider: self.name().to_string(), index })
                } else {
                    Ok(self.log_prob(t))
                }
            })
            .collect()
    }
}

pub const LOGPROB_PATH: &str = "/v1/logprob";

/// Remote sequence scorer speaking `POST /v1/logprob`.
///
/// By default a batch goes out as a single request. With `max_batch` set,
/// larger batches are split into chunks sent concurrently (up to
/// `parallelism`) and reassembled in input order.
pub struct RemoteLmProvider {
    transport: Arc<dyn Transport>,
    model: String,
    max_batch: Option<usize>,
    parallelism: usize,
}

impl RemoteLmProvider {
    pub fn new(transport: Arc<dyn Transport>, model: impl Into<String>) -> Self {
        Self { transport, model: model.into(), max_batch: None, parallelism: 4 }
    }

    pub fn max_batch(mut self, n: usize) -> Self {
        self.max_batch = Some(n.max(1));
        self
    }

    pub fn parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    fn request(&self, texts: &[String]) -> Result<Vec<f64>, ProviderError> {
        let body = json!({"model": self.model, "texts": texts});
        let resp =
            self.transport.post_json(LOGPROB_PATH, &body).map_err(|e| ProviderError::from_transport(&self.model, e))?;
        let violation = |reason: String| ProviderError::ContractViolation { provider: self.model.clone(), reason };
        let values = resp
            .get("logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| violation("response has no `logprobs` array".into()))?;
        if values.len() != texts.len() {
            return Err(violation(format!("expected {} log-probabilities, got {}", texts.len(), values.len())));
        }
        values
            .iter()
            .map(|v| {
                v.as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| violation(format!("non-numeric log-probability {v}")))
            })
            .collect()
    }
}

pub fn remote_lm_provider(transport: Arc<dyn Transport>, model_name: &str) -> RemoteLmProvider {
    RemoteLmProvider::new(transport, model_name)
}

impl LogProbProvider for RemoteLmProvider {
    fn name(&self) -> &str {
        &self.model
    }

    fn log_probs(&self, texts: &[String]) -> Result<Vec<f64>, ProviderError> {
        let chunk = self.max_batch.unwrap_or(texts.len()).max(1);
        let chunks: Vec<&[String]> = texts.chunks(chunk).collect();
        let results = ordered_map(&chunks, self.parallelism, |c| self.request(c));
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homogen::SlangEntry;
    use crate::lexicon::build_frequency_dict;
    use std::collections::HashMap;

    fn cand(text: &str) -> Candidate {
        Candidate {
            text: text.into(),
            root: vec![],
            aggregate_frequency: 0,
            combo_frequency: 0,
            percentile: None,
            self_information: None,
        }
    }

    fn set(texts: &[&str]) -> CandidateSet {
        CandidateSet { original: SlangEntry::new("原词", 1), candidates: texts.iter().map(|t| cand(t)).collect() }
    }

    struct Fixed(HashMap<String, f64>);
    impl LogProbProvider for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn log_probs(&self, texts: &[String]) -> Result<Vec<f64>, ProviderError> {
            Ok(texts.iter().map(|t| self.0[t]).collect())
        }
    }

    #[test]
    fn single_candidate_is_100() {
        let dict = build_frequency_dict(["甲"], 1);
        let r = percentile_scores(&set(&["甲"]), &dict).unwrap();
        assert_eq!(r.items[0].score, 100.0);
    }

    #[test]
    fn percentile_ties_broken_by_code_point() {
        // 一=3, 丁=9 (one char), 七=9, 万=20 by construction
        let mut lines = vec!["一一一".to_string()];
        lines.push("丁".repeat(9));
        lines.push("七".repeat(9));
        lines.push("万".repeat(20));
        let dict = build_frequency_dict(&lines, 1);
        let r = percentile_scores(&set(&["万", "七", "丁", "一"]), &dict).unwrap();
        let got: Vec<(&str, u64, f64)> =
            r.items.iter().map(|i| (i.candidate.text.as_str(), i.candidate.aggregate_frequency, i.score)).collect();
        // 丁 U+4E01 < 七 U+4E03
        assert_eq!(got, vec![("一", 3, 25.0), ("丁", 9, 50.0), ("七", 9, 75.0), ("万", 20, 100.0)]);
    }

    #[test]
    fn empty_set_errors() {
        let dict = build_frequency_dict(["甲"], 1);
        assert!(matches!(percentile_scores(&set(&[]), &dict), Err(ScoringError::EmptyCandidateSet { .. })));
    }

    #[test]
    fn bits_of_certainty_and_coin() {
        let p = Fixed(HashMap::from([("a".to_string(), 0.0), ("b".to_string(), 0.5f64.ln())]));
        assert_eq!(self_information("a", &p).unwrap(), 0.0);
        assert!(self_information("a", &p).unwrap().is_sign_positive());
        assert_eq!(self_information("b", &p).unwrap(), 1.0);
        assert!(matches!(self_information("", &p), Err(ScoringError::EmptyText)));
    }

    #[test]
    fn positive_log_prob_is_a_violation() {
        let p = Fixed(HashMap::from([("a".to_string(), 0.1)]));
        assert!(matches!(
            self_information("a", &p),
            Err(ScoringError::Provider(ProviderError::ContractViolation { .. }))
        ));
    }

    #[test]
    fn unigram_on_32_char_fixture() {
        let text =
            std::fs::read_to_string(format!("{}/../../fixtures/corpus_32.txt", env!("CARGO_MANIFEST_DIR"))).unwrap();
        let dict = Arc::new(build_frequency_dict(text.lines(), 1));
        assert_eq!(dict.total_chars, 32);
        assert_eq!(dict.char_count('你'), 7);
        let p = corpus_unigram_provider(dict).unwrap();
        let bits = self_information("你", &p).unwrap();
        assert!((bits - 2.192_645_077_942_396).abs() < 1e-12, "{bits}");
    }

    #[test]
    fn unigram_is_additive_and_smooths() {
        let dict = Arc::new(build_frequency_dict(["你好你好你"], 1));
        let p = CorpusUnigramProvider::new(dict).unwrap();
        let v = p.log_probs(&["你".into(), "好".into(), "你好".into(), "猫".into()]).unwrap();
        assert!((v[2] - (v[0] + v[1])).abs() < 1e-15);
        assert!((v[3] - (0.5f64 / 5.0).ln()).abs() < 1e-15);
        assert!(matches!(p.log_probs(&["".into()]), Err(ProviderError::InvalidText { index: 0, .. })));
        let empty = Arc::new(build_frequency_dict(Vec::<String>::new(), 1));
        assert!(CorpusUnigramProvider::new(empty).is_err());
    }

    #[test]
    fn full_tie_is_code_point_order() {
        let texts = ["丙", "甲", "乙", "丁"];
        let p = Fixed(texts.iter().map(|t| (t.to_string(), -2.0)).collect());
        let r = rank_by_self_information(&set(&texts), &p, 4).unwrap();
        let mut sorted = texts.to_vec();
        sorted.sort();
        assert_eq!(r.items.iter().map(|i| i.candidate.text.as_str()).collect::<Vec<_>>(), sorted);
    }

    #[test]
    fn picks_least_probable() {
        let p = Fixed(HashMap::from([
            ("甲".to_string(), 0.5f64.ln()),
            ("乙".to_string(), 0.25f64.ln()),
            ("丙".to_string(), 0.125f64.ln()),
        ]));
        let r = rank_by_self_information(&set(&["甲", "乙", "丙"]), &p, 2).unwrap();
        let top: Vec<(&str, f64)> = r.top_k().iter().map(|i| (i.candidate.text.as_str(), i.score)).collect();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].0, "丙");
        assert!((top[0].1 - 3.0).abs() < 1e-12);
        assert_eq!(top[1].0, "乙");
        assert!((top[1].1 - 2.0).abs() < 1e-12);
        assert!(matches!(rank_by_self_information(&set(&["甲"]), &p, 0), Err(ScoringError::InvalidK)));
    }

    #[test]
    fn orientation_flips_order() {
        let p = Fixed(HashMap::from([("甲".to_string(), -1.0), ("乙".to_string(), -3.0)]));
        let r = rank_by_self_information(&set(&["甲", "乙"]), &p, 1).unwrap().oriented(Direction::Asc);
        assert_eq!(r.top_k()[0].candidate.text, "甲");
    }
}
