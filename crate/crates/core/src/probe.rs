//! Sending perturbation groups to external QE scorers and emotion
//! classifiers, one request per instance, with order-preserving assembly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataset::EmotionLabel;
use crate::parallel::ordered_map;
use crate::perturb::PerturbationGroup;
use crate::scoring::ProviderError;
use crate::wire::Transport;

pub const QE_PATH: &str = "/v1/qe";
pub const EMOTION_PATH: &str = "/v1/emotion";
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("every instance of group {group} failed for {model}: {first_error}")]
    ProbeFailed { group: String, model: String, first_error: String },
    #[error("group {0} has no instances")]
    EmptyGroup(String),
}

pub trait QeProvider: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, source: &str, mt: &str) -> Result<f64, ProviderError>;
}

pub trait EmotionPredictor: Send + Sync {
    fn name(&self) -> &str;
    fn predict(&self, text: &str) -> Result<EmotionLabel, ProviderError>;
}

/// A QE model behind `POST /v1/qe`.
pub struct HttpQeProvider {
    transport: Arc<dyn Transport>,
    model: String,
}

impl HttpQeProvider {
    pub fn new(transport: Arc<dyn Transport>, model: impl Into<String>) -> Self {
        Self { transport, model: model.into() }
    }
}

impl QeProvider for HttpQeProvider {
    fn name(&self) -> &str {
        &self.model
    }

    fn score(&self, source: &str, mt: &str) -> Result<f64, ProviderError> {
        let body = json!({"model": self.model, "source": source, "mt": mt});
        let resp =
            self.transport.post_json(QE_PATH, &body).map_err(|e| ProviderError::from_transport(&self.model, e))?;
        resp.get("score").and_then(Value::as_f64).filter(|s| s.is_finite()).ok_or_else(|| {
            ProviderError::ContractViolation {
                provider: self.model.clone(),
                reason: format!("expected a finite `score`, got {resp}"),
            }
        })
    }
}

/// An emotion classifier behind `POST /v1/emotion`.
pub struct HttpEmotionPredictor {
    transport: Arc<dyn Transport>,
    name: String,
}

impl HttpEmotionPredictor {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport, name: "emotion".to_string() }
    }
}

impl EmotionPredictor for HttpEmotionPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, text: &str) -> Result<EmotionLabel, ProviderError> {
        let resp = self
            .transport
            .post_json(EMOTION_PATH, &json!({"text": text}))
            .map_err(|e| ProviderError::from_transport(&self.name, e))?;
        let violation = |reason: String| ProviderError::ContractViolation { provider: self.name.clone(), reason };
        let label = resp
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| violation(format!("expected a `label` string, got {resp}")))?;
        label.parse().map_err(|_| violation(format!("unknown label {label:?}")))
    }
}

/// Returns the same score for every pair.
pub struct ConstantQe {
    pub name: String,
    pub value: f64,
}

impl QeProvider for ConstantQe {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, _source: &str, _mt: &str) -> Result<f64, ProviderError> {
        Ok(self.value)
    }
}

/// Deterministic pseudo-scores in `[0, 1)` derived from a hash of the pair.
pub struct HashQe {
    pub name: String,
}

impl QeProvider for HashQe {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, source: &str, mt: &str) -> Result<f64, ProviderError> {
        let digest = Sha256::new().chain_update(source).chain_update([0u8]).chain_update(mt).finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        Ok((u64::from_be_bytes(head) >> 11) as f64 / (1u64 << 53) as f64)
    }
}

pub struct ConstantEmotion(pub EmotionLabel);

impl EmotionPredictor for ConstantEmotion {
    fn name(&self) -> &str {
        "constant"
    }

    fn predict(&self, _text: &str) -> Result<EmotionLabel, ProviderError> {
        Ok(self.0)
    }
}

/// One instance's prediction. Exactly one of `score` and `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub id: String,
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub group_name: String,
    pub model_name: String,
    /// False when at least one instance has no score.
    pub complete: bool,
    pub scores: Vec<ProbeScore>,
}

impl ProbeResult {
    /// `(id, score)` for every instance that has a score.
    pub fn scored(&self) -> Vec<(String, f64)> {
        self.scores.iter().filter_map(|s| s.score.map(|v| (s.id.clone(), v))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPrediction {
    pub id: String,
    pub label: Option<EmotionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub group_name: String,
    pub predictor_name: String,
    pub complete: bool,
    pub labels: Vec<LabelPrediction>,
}

impl LabelResult {
    pub fn labelled(&self) -> Vec<(String, EmotionLabel)> {
        self.labels.iter().filter_map(|l| l.label.map(|v| (l.id.clone(), v))).collect()
    }
}

/// Scores every instance of `group`, at most `parallelism` requests at a
/// time. Failed instances are kept with their error; only a group where
/// every instance fails is an error.
pub fn run_probe(
    group: &PerturbationGroup,
    provider: &dyn QeProvider,
    parallelism: usize,
) -> Result<ProbeResult, ProbeError> {
    if group.instances.is_empty() {
        return Err(ProbeError::EmptyGroup(group.name.clone()));
    }
    let scores = ordered_map(&group.instances, parallelism, |inst| match provider.score(&inst.source, &inst.mt) {
        Ok(s) => ProbeScore { id: inst.id.clone(), score: Some(s), error: None },
        Err(e) => ProbeScore { id: inst.id.clone(), score: None, error: Some(e.to_string()) },
    });
    if let Some(first) = scores.iter().map(|s| s.error.as_ref()).collect::<Option<Vec<_>>>() {
        return Err(ProbeError::ProbeFailed {
            group: group.name.clone(),
            model: provider.name().to_string(),
            first_error: first[0].clone(),
        });
    }
    Ok(ProbeResult {
        group_name: group.name.clone(),
        model_name: provider.name().to_string(),
        complete: scores.iter().all(|s| s.score.is_some()),
        scores,
    })
}

/// Classifies the source side of every instance of `group`.
pub fn predict_labels(
    group: &PerturbationGroup,
    predictor: &dyn EmotionPredictor,
    parallelism: usize,
) -> Result<LabelResult, ProbeError> {
    if group.instances.is_empty() {
        return Err(ProbeError::EmptyGroup(group.name.clone()));
    }
    let labels = ordered_map(&group.instances, parallelism, |inst| match predictor.predict(&inst.source) {
        Ok(l) => LabelPrediction { id: inst.id.clone(), label: Some(l), error: None },
        Err(e) => LabelPrediction { id: inst.id.clone(), label: None, error: Some(e.to_string()) },
    });
    if let Some(first) = labels.iter().map(|l| l.error.as_ref()).collect::<Option<Vec<_>>>() {
        return Err(ProbeError::ProbeFailed {
            group: group.name.clone(),
            model: predictor.name().to_string(),
            first_error: first[0].clone(),
        });
    }
    Ok(LabelResult {
        group_name: group.name.clone(),
        predictor_name: predictor.name().to_string(),
        complete: labels.iter().all(|l| l.label.is_some()),
        labels,
    })
}
