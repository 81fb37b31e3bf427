//! Robustness report: per-model correlations for each group with percentage
//! change against the baseline, score-increase rates and label consistency.
//! Rendered as JSON, an aligned text table or CSV.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::{
    increase_rate, label_consistency, Coefficient, CorrelationReport, HumanCorrelation, LabelConsistency, MetricsError,
};
use crate::perturb::PerturbationGroup;
use crate::probe::{LabelResult, ProbeResult};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no {baseline} result for model {model}")]
    MissingBaseline { baseline: String, model: String },
    #[error("result refers to unknown group {0}")]
    UnknownGroup(String),
    #[error("{context}: {source}")]
    Metrics {
        context: String,
        #[source]
        source: MetricsError,
    },
    #[error("unknown report format {0:?}")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Table,
    Csv,
}

impl FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub baseline: String,
    pub groups: Vec<String>,
    pub models: Vec<String>,
    /// Averaging scheme for label-consistency precision, recall and F1.
    pub label_averaging: String,
    pub spearman_ties: String,
    pub increase_comparison: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncreaseRow {
    pub model_name: String,
    pub group_name: String,
    pub increase_rate: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub group_name: String,
    pub predictor_name: String,
    #[serde(flatten)]
    pub consistency: LabelConsistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanRow {
    pub method: String,
    pub mode: String,
    #[serde(flatten)]
    pub correlation: HumanCorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: ReportMetadata,
    pub correlations: Vec<CorrelationReport>,
    pub increase: Vec<IncreaseRow>,
    pub label_consistency: Vec<LabelRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub human: Vec<HumanRow>,
}

/// Builds the report. Groups appear in the order of `groups`; models in the
/// order they first appear in `probes`. Correlations are computed against
/// each instance's gold `qe_score` over the instances that have a
/// prediction.
pub fn build_report(
    groups: &[PerturbationGroup],
    probes: &[ProbeResult],
    labels: &[LabelResult],
    baseline: &str,
) -> Result<Report, ReportError> {
    let by_name: HashMap<&str, &PerturbationGroup> = groups.iter().map(|g| (g.name.as_str(), g)).collect();
    let mut models: Vec<String> = Vec::new();
    for p in probes {
        if !by_name.contains_key(p.group_name.as_str()) {
            return Err(ReportError::UnknownGroup(p.group_name.clone()));
        }
        if !models.contains(&p.model_name) {
            models.push(p.model_name.clone());
        }
    }
    let probe_for = |model: &str, group: &str| probes.iter().find(|p| p.model_name == model && p.group_name == group);

    let mut correlations = Vec::new();
    let mut increase = Vec::new();
    for model in &models {
        let base_probe = probe_for(model, baseline)
            .ok_or_else(|| ReportError::MissingBaseline { baseline: baseline.to_string(), model: model.clone() })?;
        let base_report = correlate(by_name[baseline], base_probe, None)?;
        let base_scores = base_probe.scored();
        for g in groups {
            let Some(p) = probe_for(model, &g.name) else { continue };
            if g.name == baseline {
                correlations.push(base_report.clone());
                continue;
            }
            correlations.push(correlate(g, p, Some(&base_report))?);

            let new_scores = p.scored();
            let new_ids: std::collections::HashSet<&str> = new_scores.iter().map(|(id, _)| id.as_str()).collect();
            let base_ids: std::collections::HashSet<&str> = base_scores.iter().map(|(id, _)| id.as_str()).collect();
            let both = |s: &[(String, f64)]| -> Vec<(String, f64)> {
                s.iter()
                    .filter(|(id, _)| new_ids.contains(id.as_str()) && base_ids.contains(id.as_str()))
                    .cloned()
                    .collect()
            };
            let (b, n) = (both(&base_scores), both(&new_scores));
            let rate = increase_rate(&b, &n).map_err(|source| ReportError::Metrics {
                context: format!("increase rate for {model} on {}", g.name),
                source,
            })?;
            increase.push(IncreaseRow {
                model_name: model.clone(),
                group_name: g.name.clone(),
                increase_rate: rate,
                n: b.len(),
            });
        }
    }

    let mut label_rows = Vec::new();
    for l in labels {
        let g = by_name.get(l.group_name.as_str()).ok_or_else(|| ReportError::UnknownGroup(l.group_name.clone()))?;
        let predicted = l.labelled();
        let gold_by_id: HashMap<&str, _> = g.instances.iter().map(|i| (i.id.as_str(), i.emotion_label)).collect();
        let gold: Vec<_> =
            predicted.iter().filter_map(|(id, _)| gold_by_id.get(id.as_str()).map(|lab| (id.clone(), *lab))).collect();
        let consistency = label_consistency(&gold, &predicted).map_err(|source| ReportError::Metrics {
            context: format!("label consistency on {}", l.group_name),
            source,
        })?;
        label_rows.push(LabelRow {
            group_name: l.group_name.clone(),
            predictor_name: l.predictor_name.clone(),
            consistency,
        });
    }

    Ok(Report {
        metadata: ReportMetadata {
            baseline: baseline.to_string(),
            groups: groups.iter().map(|g| g.name.clone()).collect(),
            models,
            label_averaging: "weighted".to_string(),
            spearman_ties: "average".to_string(),
            increase_comparison: "strict".to_string(),
        },
        correlations,
        increase,
        label_consistency: label_rows,
        human: Vec::new(),
    })
}

fn correlate(
    group: &PerturbationGroup,
    probe: &ProbeResult,
    baseline: Option<&CorrelationReport>,
) -> Result<CorrelationReport, ReportError> {
    let gold: HashMap<&str, f64> = group.instances.iter().map(|i| (i.id.as_str(), i.qe_score)).collect();
    let (g, p): (Vec<f64>, Vec<f64>) =
        probe.scored().iter().filter_map(|(id, s)| gold.get(id.as_str()).map(|q| (*q, *s))).unzip();
    CorrelationReport::compute(&group.name, &probe.model_name, &g, &p, baseline).map_err(|source| {
        ReportError::Metrics { context: format!("correlation for {} on {}", probe.model_name, group.name), source }
    })
}

impl Report {
    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => self.to_json(),
            Format::Table => self.to_table(),
            Format::Csv => self.to_csv(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    fn cell(&self, model: &str, group: &str) -> Option<&CorrelationReport> {
        self.correlations.iter().find(|c| c.model_name == model && c.group_name == group)
    }

    /// Correlation tables (models down, groups across, percentage change in
    /// brackets), then increase rates and label consistency.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (title, pick) in [
            ("Spearman", (|c: &CorrelationReport| (c.spearman, c.pct_change_spearman)) as fn(&CorrelationReport) -> _),
            ("Pearson", |c: &CorrelationReport| (c.pearson, c.pct_change_pearson)),
        ] {
            let mut rows =
                vec![std::iter::once("Model".to_string()).chain(self.metadata.groups.iter().cloned()).collect()];
            for m in &self.metadata.models {
                let mut row = vec![m.clone()];
                for g in &self.metadata.groups {
                    row.push(match self.cell(m, g).map(pick) {
                        None => "-".to_string(),
                        Some((v, None)) => format!("{v:.4}"),
                        Some((v, Some(Coefficient::Value(p)))) => format!("{v:.4} ({p:+.2}%)"),
                        Some((v, Some(Coefficient::Undefined))) => format!("{v:.4} (undefined)"),
                    });
                }
                rows.push(row);
            }
            let _ = writeln!(out, "{title} correlation (change vs {})", self.metadata.baseline);
            out.push_str(&align(&rows));
            out.push('\n');
        }

        if !self.increase.is_empty() {
            let mut groups: Vec<&str> = Vec::new();
            for r in &self.increase {
                if !groups.contains(&r.group_name.as_str()) {
                    groups.push(&r.group_name);
                }
            }
            let mut rows = vec![std::iter::once("Model").chain(groups.iter().copied()).map(String::from).collect()];
            for m in &self.metadata.models {
                let mut row = vec![m.clone()];
                for g in &groups {
                    let r = self.increase.iter().find(|r| &r.model_name == m && r.group_name == *g);
                    row.push(r.map_or("-".to_string(), |r| format!("{:.2}%", r.increase_rate)));
                }
                rows.push(row);
            }
            let _ = writeln!(out, "Instances with increased QE score vs {}", self.metadata.baseline);
            out.push_str(&align(&rows));
            out.push('\n');
        }

        if !self.label_consistency.is_empty() {
            let mut rows: Vec<Vec<String>> = vec![["Group", "Precision", "Recall", "F1", "Macro F1", "Same label"]
                .into_iter()
                .map(String::from)
                .collect()];
            for r in &self.label_consistency {
                let c = &r.consistency;
                rows.push(vec![
                    r.group_name.clone(),
                    format!("{:.4}", c.precision),
                    format!("{:.4}", c.recall),
                    format!("{:.4}", c.f1),
                    format!("{:.4}", c.macro_f1),
                    format!("{:.4}", c.same_label_rate),
                ]);
            }
            let _ = writeln!(out, "Emotion label consistency ({} averaging)", self.metadata.label_averaging);
            out.push_str(&align(&rows));
            out.push('\n');
        }

        if !self.human.is_empty() {
            let mut rows: Vec<Vec<String>> =
                vec![["Method", "Mode", "Mean rating"].into_iter().map(String::from).collect()];
            for h in &self.human {
                rows.push(vec![h.method.clone(), h.mode.clone(), format!("{:.4}", h.correlation.mean_rating)]);
            }
            out.push_str("Spearman correlation with human ratings\n");
            out.push_str(&align(&rows));
            out.push('\n');
        }
        out
    }

    /// One row per (model, group).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("model,group,n,spearman,pearson,pct_change_spearman,pct_change_pearson,increase_rate\n");
        let opt = |c: Option<Coefficient>| c.map(|c| c.to_string()).unwrap_or_default();
        for c in &self.correlations {
            let inc = self
                .increase
                .iter()
                .find(|r| r.model_name == c.model_name && r.group_name == c.group_name)
                .map(|r| r.increase_rate.to_string())
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                csv_field(&c.model_name),
                csv_field(&c.group_name),
                c.n,
                c.spearman,
                c.pearson,
                opt(c.pct_change_spearman),
                opt(c.pct_change_pearson),
                inc
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Left-aligns the first column and right-aligns the rest, padding by
/// character count.
fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|i| rows.iter().filter_map(|r| r.get(i)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 { format!("{s:<w$}", w = widths[i]) } else { format!("{s:>w$}", w = widths[i]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if ri == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}
