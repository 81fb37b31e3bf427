//! Perturbation groups over a base dataset.
//!
//! Method 1 swaps slang in the source for a generated homophone of the same
//! length. Method 2 improves the target, either with a hand-corrected slang
//! translation (M2G1) or by substituting the reference (M2G2).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{instances_to_jsonl, Dataset, Instance};

#[derive(Debug, thiserror::Error)]
pub enum PerturbError {
    #[error("rule {original:?} -> {replacement:?} changes length ({from} -> {to} characters)")]
    RuleLengthMismatch { original: String, replacement: String, from: usize, to: usize },
    #[error("rule originals {first:?} and {second:?} overlap")]
    AmbiguousRules { first: String, second: String },
    #[error("invalid rule {original:?} -> {replacement:?}: {reason}")]
    InvalidRule { original: String, replacement: String, reason: String },
    #[error("fix refers to unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("instance {0:?} has no reference translation")]
    MissingReference(String),
    #[error("fix for instance {0:?} is empty")]
    EmptyFix(String),
    #[error("no rule of rank {rank} for {original:?}")]
    MissingRank { original: String, rank: usize },
    #[error("unknown group spec {0:?}")]
    UnknownGroup(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionRule {
    pub original: String,
    pub replacement: String,
    pub side: Side,
}

impl SubstitutionRule {
    pub fn source(original: impl Into<String>, replacement: impl Into<String>) -> Self {
        Self { original: original.into(), replacement: replacement.into(), side: Side::Source }
    }

    fn validate(&self) -> Result<(), PerturbError> {
        let invalid = |reason: &str| PerturbError::InvalidRule {
            original: self.original.clone(),
            replacement: self.replacement.clone(),
            reason: reason.to_string(),
        };
        if self.original.is_empty() || self.replacement.is_empty() {
            return Err(invalid("empty side"));
        }
        if self.original == self.replacement {
            return Err(invalid("replacement equals original"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationGroup {
    pub name: String,
    pub instances: Vec<Instance>,
    pub provenance: String,
}

impl PerturbationGroup {
    pub fn to_jsonl(&self) -> String {
        instances_to_jsonl(&self.instances)
    }

    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, crate::dataset::DatasetError> {
        let name = name.into();
        let ds = Dataset::parse(name.clone(), text)?;
        Ok(Self { name, instances: ds.instances, provenance: String::new() })
    }
}

pub fn make_g0(ds: &Dataset) -> PerturbationGroup {
    PerturbationGroup { name: "G0".to_string(), instances: ds.instances.clone(), provenance: "identity".to_string() }
}

/// Replaces every rule original in `text` in a single left-to-right pass.
/// At each position the first rule whose original starts there wins; rules
/// are assumed non-overlapping so at most one can match.
fn replace_all(text: &str, rules: &[SubstitutionRule]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    'outer: while !rest.is_empty() {
        for r in rules {
            if let Some(tail) = rest.strip_prefix(r.original.as_str()) {
                out.push_str(&r.replacement);
                rest = tail;
                continue 'outer;
            }
        }
        let ch = rest.chars().next().expect("non-empty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

fn check_method1_rules(rules: &[SubstitutionRule]) -> Result<(), PerturbError> {
    for r in rules {
        r.validate()?;
        if r.side != Side::Source {
            return Err(PerturbError::InvalidRule {
                original: r.original.clone(),
                replacement: r.replacement.clone(),
                reason: "method 1 rules must target the source".to_string(),
            });
        }
        let (from, to) = (r.original.chars().count(), r.replacement.chars().count());
        if from != to {
            return Err(PerturbError::RuleLengthMismatch {
                original: r.original.clone(),
                replacement: r.replacement.clone(),
                from,
                to,
            });
        }
    }
    for (i, a) in rules.iter().enumerate() {
        for b in &rules[i + 1..] {
            if a.original == b.original {
                if a.replacement != b.replacement {
                    return Err(PerturbError::AmbiguousRules { first: a.original.clone(), second: b.original.clone() });
                }
            } else if originals_overlap(&a.original, &b.original) {
                return Err(PerturbError::AmbiguousRules { first: a.original.clone(), second: b.original.clone() });
            }
        }
    }
    Ok(())
}

/// True when one string contains the other, or a suffix of one is a prefix
/// of the other, so matches could collide in some text.
fn originals_overlap(a: &str, b: &str) -> bool {
    if a.contains(b) || b.contains(a) {
        return true;
    }
    let suffix_prefix = |x: &str, y: &str| x.char_indices().skip(1).any(|(i, _)| y.starts_with(&x[i..]));
    suffix_prefix(a, b) || suffix_prefix(b, a)
}

pub fn apply_method1(
    g0: &PerturbationGroup,
    rules: &[SubstitutionRule],
    name: impl Into<String>,
) -> Result<PerturbationGroup, PerturbError> {
    check_method1_rules(rules)?;
    let instances =
        g0.instances.iter().map(|inst| Instance { source: replace_all(&inst.source, rules), ..inst.clone() }).collect();
    let provenance = if rules.is_empty() {
        "identity".to_string()
    } else {
        let parts: Vec<String> = rules.iter().map(|r| format!("{}->{}", r.original, r.replacement)).collect();
        format!("source: {}", parts.join(", "))
    };
    Ok(PerturbationGroup { name: name.into(), instances, provenance })
}

pub fn apply_method2_fix_slang(
    g0: &PerturbationGroup,
    fixes: &BTreeMap<String, String>,
) -> Result<PerturbationGroup, PerturbError> {
    let known: HashSet<&str> = g0.instances.iter().map(|i| i.id.as_str()).collect();
    for (id, mt) in fixes {
        if !known.contains(id.as_str()) {
            return Err(PerturbError::UnknownInstance(id.clone()));
        }
        if mt.is_empty() {
            return Err(PerturbError::EmptyFix(id.clone()));
        }
    }
    let instances = g0
        .instances
        .iter()
        .map(|inst| match fixes.get(&inst.id) {
            Some(mt) => Instance { mt: mt.clone(), ..inst.clone() },
            None => inst.clone(),
        })
        .collect();
    Ok(PerturbationGroup {
        name: "M2G1".to_string(),
        instances,
        provenance: format!("target: {} slang translation fixes", fixes.len()),
    })
}

pub fn apply_method2_use_reference(g0: &PerturbationGroup) -> Result<PerturbationGroup, PerturbError> {
    let instances = g0
        .instances
        .iter()
        .map(|inst| match &inst.reference {
            Some(r) => Ok(Instance { mt: r.clone(), ..inst.clone() }),
            None => Err(PerturbError::MissingReference(inst.id.clone())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PerturbationGroup { name: "M2G2".to_string(), instances, provenance: "target: reference".to_string() })
}

/// The rank-`rank` rule (1-based) for each original, where an original's
/// rules are ranked by their order of appearance in the rules file.
pub fn rules_for_rank(rules: &[SubstitutionRule], rank: usize) -> Result<Vec<SubstitutionRule>, PerturbError> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_original: HashMap<&str, Vec<&SubstitutionRule>> = HashMap::new();
    for r in rules {
        let entry = by_original.entry(r.original.as_str()).or_default();
        if entry.is_empty() {
            order.push(r.original.as_str());
        }
        entry.push(r);
    }
    order
        .into_iter()
        .map(|orig| {
            by_original[orig]
                .get(rank.wrapping_sub(1))
                .map(|r| (*r).clone())
                .ok_or_else(|| PerturbError::MissingRank { original: orig.to_string(), rank })
        })
        .collect()
}

fn read(path: &Path) -> Result<String, PerturbError> {
    fs::read_to_string(path).map_err(|source| PerturbError::Io { path: path.display().to_string(), source })
}

pub fn parse_rules(text: &str) -> Result<Vec<SubstitutionRule>, PerturbError> {
    let mut rules = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rule: SubstitutionRule =
            serde_json::from_str(raw).map_err(|e| PerturbError::Parse { line: i + 1, reason: e.to_string() })?;
        rule.validate()?;
        rules.push(rule);
    }
    Ok(rules)
}

pub fn load_rules(path: impl AsRef<Path>) -> Result<Vec<SubstitutionRule>, PerturbError> {
    parse_rules(&read(path.as_ref())?)
}

#[derive(Debug, Deserialize)]
struct FixLine {
    id: String,
    mt: String,
}

pub fn parse_fixes(text: &str) -> Result<BTreeMap<String, String>, PerturbError> {
    let mut fixes = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let fix: FixLine =
            serde_json::from_str(raw).map_err(|e| PerturbError::Parse { line: i + 1, reason: e.to_string() })?;
        if fixes.insert(fix.id.clone(), fix.mt).is_some() {
            return Err(PerturbError::Parse { line: i + 1, reason: format!("duplicate fix for {:?}", fix.id) });
        }
    }
    Ok(fixes)
}

pub fn load_fixes(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>, PerturbError> {
    parse_fixes(&read(path.as_ref())?)
}

/// Which group to build, as written on the command line
/// (`g0`, `m1:RANK`, `m2g1`, `m2g2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSpec {
    G0,
    Method1(usize),
    FixSlang,
    UseReference,
}

impl GroupSpec {
    pub fn group_name(self) -> String {
        match self {
            GroupSpec::G0 => "G0".into(),
            GroupSpec::Method1(rank) => format!("M1G{rank}"),
            GroupSpec::FixSlang => "M2G1".into(),
            GroupSpec::UseReference => "M2G2".into(),
        }
    }
}

impl FromStr for GroupSpec {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "g0" => return Ok(GroupSpec::G0),
            "m2g1" => return Ok(GroupSpec::FixSlang),
            "m2g2" => return Ok(GroupSpec::UseReference),
            _ => {}
        }
        let rank = lower.strip_prefix("m1:").or_else(|| lower.strip_prefix("m1g"));
        match rank.and_then(|r| r.parse::<usize>().ok()) {
            Some(r) if r >= 1 => Ok(GroupSpec::Method1(r)),
            _ => Err(PerturbError::UnknownGroup(s.to_string())),
        }
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupSpec::G0 => f.write_str("g0"),
            GroupSpec::Method1(r) => write!(f, "m1:{r}"),
            GroupSpec::FixSlang => f.write_str("m2g1"),
            GroupSpec::UseReference => f.write_str("m2g2"),
        }
    }
}

/// Builds one group from G0. Method 1 needs `rules`, M2G1 needs `fixes`.
pub fn build_group(
    g0: &PerturbationGroup,
    spec: GroupSpec,
    rules: &[SubstitutionRule],
    fixes: &BTreeMap<String, String>,
) -> Result<PerturbationGroup, PerturbError> {
    match spec {
        GroupSpec::G0 => Ok(g0.clone()),
        GroupSpec::Method1(rank) => apply_method1(g0, &rules_for_rank(rules, rank)?, spec.group_name()),
        GroupSpec::FixSlang => apply_method2_fix_slang(g0, fixes),
        GroupSpec::UseReference => apply_method2_use_reference(g0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EmotionLabel;

    fn inst(id: &str, source: &str, reference: Option<&str>) -> Instance {
        Instance {
            id: id.into(),
            source: source.into(),
            mt: format!("mt of {id}"),
            qe_score: 0.3,
            src_error_spans: vec![],
            tgt_error_spans: vec![],
            reference: reference.map(String::from),
            emotion_label: EmotionLabel::Anger,
        }
    }

    fn g0(instances: Vec<Instance>) -> PerturbationGroup {
        make_g0(&Dataset { name: "t".into(), instances })
    }

    #[test]
    fn g0_is_identity() {
        let ds = Dataset { name: "t".into(), instances: vec![inst("1", "卧槽了", None)] };
        let g = make_g0(&ds);
        assert_eq!(g.name, "G0");
        assert_eq!(g.provenance, "identity");
        assert_eq!(g.instances, ds.instances);
    }

    #[test]
    fn method1_replaces_every_occurrence() {
        let base = g0(vec![inst("1", "卧槽了", None), inst("2", "卧槽卧槽，真卧槽", None), inst("3", "没有", None)]);
        let g = apply_method1(&base, &[SubstitutionRule::source("卧槽", "我操")], "M1G1").unwrap();
        let sources: Vec<&str> = g.instances.iter().map(|i| i.source.as_str()).collect();
        assert_eq!(sources, ["我操了", "我操我操，真我操", "没有"]);
        assert_eq!(g.instances[0].mt, base.instances[0].mt);
    }

    #[test]
    fn empty_rules_are_identity() {
        let base = g0(vec![inst("1", "卧槽了", None)]);
        let g = apply_method1(&base, &[], "M1G1").unwrap();
        assert_eq!(g.instances, base.instances);
        assert_eq!(g.provenance, "identity");
    }

    #[test]
    fn rule_errors() {
        let base = g0(vec![inst("1", "卧槽了", None)]);
        assert!(matches!(
            apply_method1(&base, &[SubstitutionRule::source("卧槽", "我")], "x"),
            Err(PerturbError::RuleLengthMismatch { from: 2, to: 1, .. })
        ));
        let overlap = [SubstitutionRule::source("卧槽", "我操"), SubstitutionRule::source("槽了", "草了")];
        assert!(matches!(apply_method1(&base, &overlap, "x"), Err(PerturbError::AmbiguousRules { .. })));
        let nested = [SubstitutionRule::source("卧槽", "我操"), SubstitutionRule::source("槽", "草")];
        assert!(matches!(apply_method1(&base, &nested, "x"), Err(PerturbError::AmbiguousRules { .. })));
        let same = [SubstitutionRule::source("卧槽", "卧槽")];
        assert!(matches!(apply_method1(&base, &same, "x"), Err(PerturbError::InvalidRule { .. })));
    }

    #[test]
    fn overlap_detection() {
        assert!(originals_overlap("ab", "bc"));
        assert!(originals_overlap("abc", "b"));
        assert!(!originals_overlap("ab", "cd"));
        assert!(!originals_overlap("尼玛", "劳资"));
    }

    #[test]
    fn fixes_and_references() {
        let base = g0(vec![inst("1", "尼玛", Some("I am furious")), inst("2", "好", Some("good"))]);
        let g = apply_method2_fix_slang(&base, &BTreeMap::new()).unwrap();
        assert_eq!(g.name, "M2G1");
        assert_eq!(g.instances, base.instances);

        let one = BTreeMap::from([("1".to_string(), "fixed".to_string())]);
        let g = apply_method2_fix_slang(&base, &one).unwrap();
        assert_eq!(g.instances[0].mt, "fixed");
        assert_eq!(g.instances[1], base.instances[1]);

        let bad = BTreeMap::from([("9".to_string(), "x".to_string())]);
        assert!(matches!(apply_method2_fix_slang(&base, &bad), Err(PerturbError::UnknownInstance(id)) if id == "9"));

        let g = apply_method2_use_reference(&base).unwrap();
        assert_eq!(g.instances[0].mt, "I am furious");

        let missing = g0(vec![inst("1", "尼玛", None)]);
        assert!(matches!(apply_method2_use_reference(&missing), Err(PerturbError::MissingReference(id)) if id == "1"));
    }

    #[test]
    fn rank_selection_and_specs() {
        let rules = parse_rules(
            "{\"original\":\"尼玛\",\"replacement\":\"你妈\",\"side\":\"source\"}\n\
             {\"original\":\"卧槽\",\"replacement\":\"我操\",\"side\":\"source\"}\n\
             {\"original\":\"尼玛\",\"replacement\":\"泥马\",\"side\":\"source\"}\n",
        )
        .unwrap();
        let r2 = rules_for_rank(&rules, 2);
        assert!(matches!(r2, Err(PerturbError::MissingRank { rank: 2, .. })));
        let r1 = rules_for_rank(&rules, 1).unwrap();
        assert_eq!(r1.iter().map(|r| r.replacement.as_str()).collect::<Vec<_>>(), ["你妈", "我操"]);
        assert!(rules_for_rank(&rules, 0).is_err());

        assert_eq!("m1:3".parse::<GroupSpec>().unwrap(), GroupSpec::Method1(3));
        assert_eq!("M2G2".parse::<GroupSpec>().unwrap(), GroupSpec::UseReference);
        assert!("m1:0".parse::<GroupSpec>().is_err());
        assert!("m3".parse::<GroupSpec>().is_err());
        assert_eq!(GroupSpec::Method1(4).group_name(), "M1G4");
    }
}
