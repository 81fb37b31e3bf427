//! Correlations, percentage changes, increase rates, label consistency and
//! human-rating agreement.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::EmotionLabel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("paired lists differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 3 paired observations, got {0}")]
    TooFewObservations(usize),
    #[error("percentage change against a zero baseline")]
    ZeroBase,
    #[error("id sets differ: {0}")]
    IdMismatch(String),
    #[error("no method score for candidate {0:?}")]
    MissingScore(String),
    #[error("{0}")]
    Validation(String),
}

/// A correlation-like value, or the reason it cannot be computed.
///
/// Serializes as a bare number, or as the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficient {
    Value(f64),
    Undefined,
}

impl Coefficient {
    pub fn value(self) -> Option<f64> {
        match self {
            Coefficient::Value(v) => Some(v),
            Coefficient::Undefined => None,
        }
    }

    pub fn is_undefined(self) -> bool {
        matches!(self, Coefficient::Undefined)
    }
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Value(v) => match f.precision() {
                Some(p) => write!(f, "{v:.p$}"),
                None => write!(f, "{v}"),
            },
            Coefficient::Undefined => f.pad("undefined"),
        }
    }
}

impl Serialize for Coefficient {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Coefficient::Value(v) => s.serialize_f64(*v),
            Coefficient::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Coefficient {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Coefficient::Value(v)),
            Raw::Str(s) if s == "undefined" => Ok(Coefficient::Undefined),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"undefined\", got {s:?}"))),
        }
    }
}

fn check_pairs(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 3 {
        return Err(MetricsError::TooFewObservations(x.len()));
    }
    Ok(())
}

/// Product-moment correlation; `Undefined` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Coefficient, MetricsError> {
    check_pairs(x, y)?;
    // the rounded mean of a constant vector can differ from its elements
    let constant = |v: &[f64]| v.iter().all(|e| *e == v[0]);
    if constant(x) || constant(y) {
        return Ok(Coefficient::Undefined);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Coefficient::Undefined);
    }
    Ok(Coefficient::Value((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// 1-based ranks where tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Coefficient, MetricsError> {
    check_pairs(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `(new - base) / base * 100`.
pub fn pct_change(base: f64, new: f64) -> Result<f64, MetricsError> {
    if base == 0.0 {
        return Err(MetricsError::ZeroBase);
    }
    Ok((new - base) / base * 100.0)
}

fn by_id<'a, T: Copy>(pairs: &'a [(String, T)], side: &str) -> Result<HashMap<&'a str, T>, MetricsError> {
    let mut map = HashMap::with_capacity(pairs.len());
    for (id, v) in pairs {
        if map.insert(id.as_str(), *v).is_some() {
            return Err(MetricsError::IdMismatch(format!("duplicate id {id:?} in {side}")));
        }
    }
    Ok(map)
}

fn same_ids<A, B>(left: &HashMap<&str, A>, right: &HashMap<&str, B>) -> Result<(), MetricsError> {
    let missing: BTreeSet<&str> = left.keys().filter(|k| !right.contains_key(*k)).copied().collect();
    let extra: BTreeSet<&str> = right.keys().filter(|k| !left.contains_key(*k)).copied().collect();
    if missing.is_empty() && extra.is_empty() {
        return Ok(());
    }
    Err(MetricsError::IdMismatch(format!("missing {missing:?}, unexpected {extra:?}")))
}

/// Percentage of ids whose new score is strictly greater than the base.
pub fn increase_rate(base: &[(String, f64)], new: &[(String, f64)]) -> Result<f64, MetricsError> {
    let b = by_id(base, "base")?;
    let n = by_id(new, "new")?;
    same_ids(&b, &n)?;
    if b.is_empty() {
        return Err(MetricsError::TooFewObservations(0));
    }
    let up = b.iter().filter(|(id, base)| n[*id] > **base).count();
    Ok(100.0 * up as f64 / b.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConsistency {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub same_label_rate: f64,
    pub n: usize,
    /// Averaging used for precision, recall and `f1`.
    pub averaging: String,
}

/// Treats `original` as gold. Precision, recall and `f1` are averaged over
/// labels weighted by gold support; `macro_f1` is the unweighted mean over
/// every label seen on either side.
pub fn label_consistency(
    original: &[(String, EmotionLabel)],
    predicted: &[(String, EmotionLabel)],
) -> Result<LabelConsistency, MetricsError> {
    let gold = by_id(original, "original")?;
    let pred = by_id(predicted, "predicted")?;
    same_ids(&gold, &pred)?;
    if gold.is_empty() {
        return Err(MetricsError::TooFewObservations(0));
    }
    let mut tp: BTreeMap<EmotionLabel, usize> = BTreeMap::new();
    let mut gold_count: BTreeMap<EmotionLabel, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<EmotionLabel, usize> = BTreeMap::new();
    for (id, g) in &gold {
        let p = pred[id];
        *gold_count.entry(*g).or_default() += 1;
        *pred_count.entry(p).or_default() += 1;
        if p == *g {
            *tp.entry(p).or_default() += 1;
        }
    }
    let n = gold.len() as f64;
    let labels: BTreeSet<EmotionLabel> = gold_count.keys().chain(pred_count.keys()).copied().collect();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut precision, mut recall, mut f1, mut macro_f1) = (0.0, 0.0, 0.0, 0.0);
    for l in &labels {
        let t = tp.get(l).copied().unwrap_or(0);
        let support = gold_count.get(l).copied().unwrap_or(0);
        let p = ratio(t, pred_count.get(l).copied().unwrap_or(0));
        let r = ratio(t, support);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support as f64 / n;
        precision += w * p;
        recall += w * r;
        f1 += w * f;
        macro_f1 += f / labels.len() as f64;
    }
    let same = tp.values().sum::<usize>() as f64 / n;
    Ok(LabelConsistency {
        precision,
        recall,
        f1,
        macro_f1,
        same_label_rate: same,
        n: gold.len(),
        averaging: "weighted".to_string(),
    })
}

/// One human rating of a generated homophone. Shared with the annotation UI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub candidate_text: String,
    pub original_text: String,
    pub annotator_id: String,
    pub score: u8,
    pub context_shown: bool,
    pub source_context: Option<String>,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let fail = |m: String| Err(MetricsError::Validation(m));
        if !(1..=5).contains(&self.score) {
            return fail(format!("score {} is outside 1-5", self.score));
        }
        if self.candidate_text.is_empty() || self.original_text.is_empty() {
            return fail("candidate_text and original_text must be non-empty".into());
        }
        if self.annotator_id.is_empty() {
            return fail("annotator_id must be non-empty".into());
        }
        if self.context_shown != self.source_context.is_some() {
            return fail("source_context must be present exactly when context_shown is true".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorCorrelation {
    pub annotator_id: String,
    pub spearman: Coefficient,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterAnnotator {
    pub first: String,
    pub second: String,
    pub spearman: Coefficient,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanCorrelation {
    pub per_annotator: Vec<AnnotatorCorrelation>,
    /// Method scores against the per-candidate mean rating.
    pub mean_rating: Coefficient,
    pub n: usize,
    pub inter_annotator: Vec<InterAnnotator>,
}

fn spearman_or_undefined(x: &[f64], y: &[f64]) -> Result<Coefficient, MetricsError> {
    match spearman(x, y) {
        Err(MetricsError::TooFewObservations(_)) => Ok(Coefficient::Undefined),
        other => other,
    }
}

/// Agreement between human ratings and a method's candidate scores.
///
/// Pass ratings from one session mode at a time: each annotator may rate a
/// candidate at most once.
pub fn human_method_correlation(
    ratings: &[RatingRecord],
    method_scores: &[(String, f64)],
) -> Result<HumanCorrelation, MetricsError> {
    let scores: HashMap<&str, f64> = method_scores.iter().map(|(c, s)| (c.as_str(), *s)).collect();
    let mut by_annotator: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in ratings {
        r.validate()?;
        if !scores.contains_key(r.candidate_text.as_str()) {
            return Err(MetricsError::MissingScore(r.candidate_text.clone()));
        }
        let slot = by_annotator.entry(r.annotator_id.as_str()).or_default();
        if slot.insert(r.candidate_text.as_str(), f64::from(r.score)).is_some() {
            return Err(MetricsError::Validation(format!(
                "annotator {:?} rated {:?} more than once",
                r.annotator_id, r.candidate_text
            )));
        }
    }

    let mut per_annotator = Vec::new();
    for (ann, rated) in &by_annotator {
        let (h, m): (Vec<f64>, Vec<f64>) = rated.iter().map(|(c, s)| (*s, scores[c])).unzip();
        per_annotator.push(AnnotatorCorrelation {
            annotator_id: ann.to_string(),
            spearman: spearman_or_undefined(&h, &m)?,
            n: h.len(),
        });
    }

    let mut pooled: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for rated in by_annotator.values() {
        for (c, s) in rated {
            let e = pooled.entry(c).or_default();
            e.0 += s;
            e.1 += 1;
        }
    }
    let (mean, m): (Vec<f64>, Vec<f64>) = pooled.iter().map(|(c, (sum, k))| (sum / *k as f64, scores[c])).unzip();
    let mean_rating = spearman_or_undefined(&mean, &m)?;

    let annotators: Vec<&str> = by_annotator.keys().copied().collect();
    let mut inter_annotator = Vec::new();
    for (i, a) in annotators.iter().enumerate() {
        for b in &annotators[i + 1..] {
            let (ra, rb) = (&by_annotator[a], &by_annotator[b]);
            let (x, y): (Vec<f64>, Vec<f64>) = ra.iter().filter_map(|(c, s)| rb.get(c).map(|t| (*s, *t))).unzip();
            inter_annotator.push(InterAnnotator {
                first: a.to_string(),
                second: b.to_string(),
                spearman: spearman_or_undefined(&x, &y)?,
                n: x.len(),
            });
        }
    }
    Ok(HumanCorrelation { per_annotator, mean_rating, n: mean.len(), inter_annotator })
}

/// Correlation of one model's predictions with gold scores on one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub group_name: String,
    pub model_name: String,
    pub spearman: Coefficient,
    pub pearson: Coefficient,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pct_change_spearman: Option<Coefficient>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pct_change_pearson: Option<Coefficient>,
    pub n: usize,
}

fn change(base: Coefficient, new: Coefficient) -> Coefficient {
    match (base, new) {
        (Coefficient::Value(b), Coefficient::Value(v)) => {
            pct_change(b, v).map(Coefficient::Value).unwrap_or(Coefficient::Undefined)
        }
        _ => Coefficient::Undefined,
    }
}

impl CorrelationReport {
    /// Correlates `predicted` with `gold`. Percentage changes are filled in
    /// when a baseline report is given.
    pub fn compute(
        group_name: &str,
        model_name: &str,
        gold: &[f64],
        predicted: &[f64],
        baseline: Option<&CorrelationReport>,
    ) -> Result<Self, MetricsError> {
        let spearman = spearman(gold, predicted)?;
        let pearson = pearson(gold, predicted)?;
        Ok(Self {
            group_name: group_name.to_string(),
            model_name: model_name.to_string(),
            spearman,
            pearson,
            pct_change_spearman: baseline.map(|b| change(b.spearman, spearman)),
            pct_change_pearson: baseline.map(|b| change(b.pearson, pearson)),
            n: gold.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(c: Coefficient) -> f64 {
        c.value().expect("defined")
    }

    #[test]
    fn spearman_examples() {
        assert!((v(spearman(&[1., 2., 3.], &[10., 20., 30.]).unwrap()) - 1.0).abs() < 1e-12);
        assert!((v(spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap()) + 1.0).abs() < 1e-12);
        assert!((v(spearman(&[1., 2., 3.], &[1., 3., 2.]).unwrap()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ties_share_mean_rank() {
        assert_eq!(average_ranks(&[10., 20., 10., 30.]), vec![1.5, 3.0, 1.5, 4.0]);
        assert_eq!(average_ranks(&[5., 5., 5.]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_is_undefined_not_nan() {
        assert_eq!(pearson(&[1., 1., 1.], &[1., 2., 3.]).unwrap(), Coefficient::Undefined);
        assert_eq!(spearman(&[1., 2., 3.], &[4., 4., 4.]).unwrap(), Coefficient::Undefined);
        assert_eq!(serde_json::to_string(&Coefficient::Undefined).unwrap(), "\"undefined\"");
        assert_eq!(serde_json::from_str::<Coefficient>("0.25").unwrap(), Coefficient::Value(0.25));
    }

    #[test]
    fn preconditions() {
        assert!(matches!(pearson(&[1., 2.], &[1., 2.]), Err(MetricsError::TooFewObservations(2))));
        assert!(matches!(spearman(&[1., 2., 3.], &[1., 2.]), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn pearson_examples() {
        let x = [1., 2., 3., 4.];
        let y: Vec<f64> = x.iter().map(|a| 2.0 * a + 1.0).collect();
        assert!((v(pearson(&x, &y).unwrap()) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|a| -a).collect();
        assert!((v(pearson(&x, &neg).unwrap()) + 1.0).abs() < 1e-12);
        // means 7/3, 7/3; sxy = 8/3, sxx = 14/3, syy = 8/3
        let expect = (8.0f64 / 3.0) / ((14.0f64 / 3.0) * (8.0f64 / 3.0)).sqrt();
        assert!((v(pearson(&[1., 2., 4.], &[1., 3., 3.]).unwrap()) - expect).abs() < 1e-12);
    }

    #[test]
    fn pct_change_examples() {
        assert_eq!(format!("{:.2}", pct_change(0.2617, 0.2523).unwrap()), "-3.59");
        assert_eq!(format!("{:.2}", pct_change(0.1841, 0.0076).unwrap()), "-95.87");
        assert_eq!(pct_change(0.3, 0.3).unwrap(), 0.0);
        assert!(matches!(pct_change(0.0, 1.0), Err(MetricsError::ZeroBase)));
    }

    fn ids(vals: &[f64]) -> Vec<(String, f64)> {
        vals.iter().enumerate().map(|(i, v)| (format!("i{i}"), *v)).collect()
    }

    #[test]
    fn increase_is_strict() {
        let base = ids(&[0.1, 0.2, 0.3]);
        assert_eq!(increase_rate(&base, &ids(&[1.1, 1.2, 1.3])).unwrap(), 100.0);
        assert_eq!(increase_rate(&base, &base).unwrap(), 0.0);
        let mixed = ids(&[0.2, 0.2, 0.1]);
        assert!((increase_rate(&base, &mixed).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        let mut shuffled = mixed.clone();
        shuffled.reverse();
        assert_eq!(increase_rate(&base, &shuffled).unwrap(), increase_rate(&base, &mixed).unwrap());
        assert!(matches!(increase_rate(&base, &ids(&[1.0, 2.0])), Err(MetricsError::IdMismatch(_))));
    }

    #[test]
    fn identical_labels_are_perfect() {
        use EmotionLabel::*;
        let gold: Vec<(String, EmotionLabel)> =
            [Anger, Joy, Anger, Fear].iter().enumerate().map(|(i, l)| (i.to_string(), *l)).collect();
        let c = label_consistency(&gold, &gold).unwrap();
        assert_eq!((c.precision, c.recall, c.f1, c.macro_f1, c.same_label_rate), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(c.averaging, "weighted");
    }

    #[test]
    fn single_label_predictor() {
        use EmotionLabel::*;
        // gold: 3 anger, 1 joy; predicted: all anger
        let gold: Vec<(String, EmotionLabel)> =
            [Anger, Anger, Anger, Joy].iter().enumerate().map(|(i, l)| (i.to_string(), *l)).collect();
        let pred: Vec<(String, EmotionLabel)> = (0..4).map(|i| (i.to_string(), Anger)).collect();
        let c = label_consistency(&gold, &pred).unwrap();
        // anger: p=3/4 r=1 f=6/7; joy: p=0 r=0 f=0
        assert!((c.precision - 0.75 * 0.75).abs() < 1e-12);
        assert!((c.recall - 0.75).abs() < 1e-12);
        assert!((c.f1 - 0.75 * 6.0 / 7.0).abs() < 1e-12);
        assert!((c.macro_f1 - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(c.same_label_rate, 0.75);
    }

    fn rating(ann: &str, cand: &str, score: u8) -> RatingRecord {
        RatingRecord {
            candidate_text: cand.into(),
            original_text: "尼玛".into(),
            annotator_id: ann.into(),
            score,
            context_shown: false,
            source_context: None,
        }
    }

    #[test]
    fn rating_validation() {
        assert!(rating("a", "你妈", 0).validate().is_err());
        assert!(rating("a", "你妈", 6).validate().is_err());
        let mut r = rating("a", "你妈", 3);
        r.context_shown = true;
        assert!(r.validate().is_err());
        r.source_context = Some("尼玛".into());
        assert!(r.validate().is_ok());
    }

    #[test]
    fn human_agreement() {
        let cands = ["你妈", "泥马", "尼马", "泥玛", "尼妈"];
        let method: Vec<(String, f64)> = cands.iter().enumerate().map(|(i, c)| (c.to_string(), i as f64)).collect();
        let mut ratings = Vec::new();
        for (i, c) in cands.iter().enumerate() {
            ratings.push(rating("a1", c, i as u8 + 1));
            ratings.push(rating("a2", c, i as u8 + 1));
        }
        let h = human_method_correlation(&ratings, &method).unwrap();
        assert_eq!(h.per_annotator.len(), 2);
        assert!((v(h.per_annotator[0].spearman) - 1.0).abs() < 1e-12);
        assert!((v(h.mean_rating) - 1.0).abs() < 1e-12);
        assert!((v(h.inter_annotator[0].spearman) - 1.0).abs() < 1e-12);

        let missing = [rating("a1", "他妈", 3)];
        assert!(matches!(human_method_correlation(&missing, &method), Err(MetricsError::MissingScore(_))));
    }

    #[test]
    fn report_pct_fields_follow_baseline() {
        let gold = [0.1, 0.5, 0.3, 0.9];
        let g0 = CorrelationReport::compute("G0", "m", &gold, &[0.2, 0.4, 0.3, 0.8], None).unwrap();
        assert!(g0.pct_change_spearman.is_none());
        let m1 = CorrelationReport::compute("M1G1", "m", &gold, &[0.2, 0.3, 0.4, 0.8], Some(&g0)).unwrap();
        let expect = pct_change(v(g0.spearman), v(m1.spearman)).unwrap();
        assert_eq!(m1.pct_change_spearman, Some(Coefficient::Value(expect)));
    }
}
