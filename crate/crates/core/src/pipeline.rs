//! Stage runner. Each stage reads files, writes deterministic artifacts under
//! the output directory and records a hash of its inputs so an unchanged
//! stage is skipped on the next run. Wall-clock data goes to `run_meta.json`
//! only.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{annotate_import, Mode};
use crate::dataset::{instances_to_jsonl, load_dataset, select_containing, Dataset};
use crate::homogen::{
    candidate_sets_from_jsonl, candidate_sets_to_jsonl, extract_error_words, generate_candidates, load_slang,
    slang_to_jsonl, CandidateSet, DEFAULT_COMBO_MIN, DEFAULT_MIN_FREQ,
};
use crate::lexicon::{FrequencyDict, PinyinTable, Segmenter};
use crate::metrics::human_method_correlation;
use crate::perturb::{build_group, load_fixes, load_rules, make_g0, GroupSpec, PerturbationGroup};
use crate::probe::{predict_labels, run_probe, HttpEmotionPredictor, HttpQeProvider, LabelResult, ProbeResult};
use crate::report::{build_report, HumanRow, Report};
use crate::scoring::{
    percentile_scores, rank_by_self_information, CorpusUnigramProvider, LogProbProvider, RemoteLmProvider,
};
use crate::wire::{HttpTransport, RecordingTransport, ReplayTransport, RetryPolicy, Transport};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("input file {0} does not exist")]
    MissingInput(PathBuf),
    #[error("stage {stage} needs {missing}, which has not been produced; run the upstream stage first")]
    StageDependency { stage: Stage, missing: PathBuf },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: BoxError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingInput(_) => "missing_input",
            PipelineError::StageDependency { .. } => "stage_dependency",
            PipelineError::Stage { .. } => "stage",
            PipelineError::Io { .. } => "io",
        }
    }
}

fn in_stage<E: Into<BoxError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: e.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dict,
    Extract,
    Generate,
    Score,
    Perturb,
    Probe,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Dict, Stage::Extract, Stage::Generate, Stage::Score, Stage::Perturb, Stage::Probe, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Dict => "dict",
            Stage::Extract => "extract",
            Stage::Generate => "generate",
            Stage::Score => "score",
            Stage::Perturb => "perturb",
            Stage::Probe => "probe",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub corpus: PathBuf,
    pub pinyin: PathBuf,
    /// Segmentation word list.
    pub words: PathBuf,
    pub dataset: PathBuf,
    pub rules: PathBuf,
    pub fixes: PathBuf,
    #[serde(default)]
    pub ratings: Option<PathBuf>,
    /// A fixed slang table to use instead of the extracted one.
    #[serde(default)]
    pub slang: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub min_freq: u64,
    pub combo_min: u64,
    pub k: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { min_freq: DEFAULT_MIN_FREQ, combo_min: DEFAULT_COMBO_MIN, k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    #[default]
    Replay,
    Record,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Providers {
    pub mode: TransportMode,
    /// Base URL for live and record modes, e.g. `http://127.0.0.1:8080`.
    pub endpoint: Option<String>,
    /// Holds `qe.jsonl`, `emotion.jsonl` and `logprob.jsonl`.
    pub cassette_dir: Option<PathBuf>,
    pub qe_models: Vec<String>,
    pub emotion: bool,
    /// Remote language model for self-information. Without one, the corpus
    /// unigram model is used.
    pub lm_model: Option<String>,
    pub parallelism: usize,
}

impl Default for Providers {
    fn default() -> Self {
        Self {
            mode: TransportMode::Replay,
            endpoint: None,
            cassette_dir: None,
            qe_models: Vec::new(),
            emotion: true,
            lm_model: None,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictOptions {
    pub max_ngram: usize,
    pub min_count: u64,
}

impl Default for DictOptions {
    fn default() -> Self {
        Self { max_ngram: 4, min_count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub providers: Providers,
    #[serde(default)]
    pub dict: DictOptions,
}

impl PipelineConfig {
    /// Parses TOML. Relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        fix(&mut cfg.out_dir);
        let i = &mut cfg.inputs;
        for p in [&mut i.corpus, &mut i.pinyin, &mut i.words, &mut i.dataset, &mut i.rules, &mut i.fixes] {
            fix(p);
        }
        for p in [i.ratings.as_mut(), i.slang.as_mut(), cfg.providers.cassette_dir.as_mut()].into_iter().flatten() {
            fix(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.thresholds.min_freq == 0 || self.thresholds.combo_min == 0 {
            return bad("thresholds must be positive");
        }
        if self.thresholds.k == 0 {
            return bad("k must be at least 1");
        }
        if self.providers.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if self.dict.max_ngram == 0 {
            return bad("max_ngram must be at least 1");
        }
        match self.providers.mode {
            TransportMode::Replay if self.providers.cassette_dir.is_none() => {
                bad("replay mode needs providers.cassette_dir")
            }
            TransportMode::Record if self.providers.cassette_dir.is_none() || self.providers.endpoint.is_none() => {
                bad("record mode needs providers.endpoint and providers.cassette_dir")
            }
            TransportMode::Live if self.providers.endpoint.is_none() => bad("live mode needs providers.endpoint"),
            _ => Ok(()),
        }
    }

    /// Group names in report order: G0, M1G1..M1Gk, M2G1, M2G2.
    pub fn group_specs(&self) -> Vec<GroupSpec> {
        let mut specs = vec![GroupSpec::G0];
        specs.extend((1..=self.thresholds.k).map(GroupSpec::Method1));
        specs.push(GroupSpec::FixSlang);
        specs.push(GroupSpec::UseReference);
        specs
    }
}

pub mod artifacts {
    pub const DICT: &str = "dict.json";
    pub const SLANG: &str = "slang.jsonl";
    pub const SELECTED: &str = "selected.jsonl";
    pub const CANDIDATES: &str = "candidates.jsonl";
    pub const SCORED: &str = "scored.jsonl";
    pub const RANKED: &str = "ranked.jsonl";
    pub const GROUPS_DIR: &str = "groups";
    pub const PROBE_QE: &str = "probe/qe.jsonl";
    pub const PROBE_EMOTION: &str = "probe/emotion.jsonl";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TABLE: &str = "report.txt";
    pub const REPORT_CSV: &str = "report.csv";
    pub const RUN_META: &str = "run_meta.json";
    pub const STAMPS_DIR: &str = ".stamps";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRun {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub started_at_unix: f64,
    pub finished_at_unix: f64,
    pub stages: Vec<StageRun>,
}

/// Runs the requested stages in pipeline order.
pub fn run_pipeline(config: &PipelineConfig, stages: &[Stage]) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let mut wanted: Vec<Stage> = stages.to_vec();
    wanted.sort();
    wanted.dedup();
    let runner = Runner { cfg: config, out: &config.out_dir };
    mkdir(runner.out)?;
    let started_at_unix = unix_now();
    let mut runs = Vec::new();
    for stage in wanted {
        let t = Instant::now();
        let status = runner.run(stage)?;
        runs.push(StageRun { stage, status, seconds: t.elapsed().as_secs_f64() });
    }
    let summary = RunSummary { started_at_unix, finished_at_unix: unix_now(), stages: runs };
    let meta = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write(&runner.out.join(artifacts::RUN_META), meta.as_bytes())?;
    Ok(summary)
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn mkdir(p: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(p).map_err(|source| PipelineError::Io { path: p.to_path_buf(), source })
}

fn write(p: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = p.parent() {
        mkdir(parent)?;
    }
    fs::write(p, bytes).map_err(|source| PipelineError::Io { path: p.to_path_buf(), source })
}

fn read(p: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(p).map_err(|source| PipelineError::Io { path: p.to_path_buf(), source })
}

/// The files a stage reads. Internal ones are produced by upstream stages;
/// external ones come from the config.
struct StageInputs {
    internal: Vec<PathBuf>,
    external: Vec<PathBuf>,
    params: String,
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
}

impl Runner<'_> {
    fn artifact(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn group_path(&self, name: &str) -> PathBuf {
        self.out.join(artifacts::GROUPS_DIR).join(format!("{name}.jsonl"))
    }

    fn cassette(&self, name: &str) -> Option<PathBuf> {
        self.cfg.providers.cassette_dir.as_ref().map(|d| d.join(name))
    }

    fn group_names(&self) -> Vec<String> {
        self.cfg.group_specs().into_iter().map(GroupSpec::group_name).collect()
    }

    fn emotion_groups(&self) -> Vec<String> {
        self.cfg
            .group_specs()
            .into_iter()
            .filter(|s| matches!(s, GroupSpec::G0 | GroupSpec::Method1(_)))
            .map(GroupSpec::group_name)
            .collect()
    }

    fn replay_cassettes(&self, names: &[&str]) -> Vec<PathBuf> {
        if self.cfg.providers.mode == TransportMode::Replay {
            names.iter().filter_map(|n| self.cassette(n)).collect()
        } else {
            Vec::new()
        }
    }

    fn inputs(&self, stage: Stage) -> StageInputs {
        use artifacts::*;
        let c = self.cfg;
        let t = c.thresholds;
        let p = &c.providers;
        let providers = format!("mode={:?} endpoint={:?}", p.mode, p.endpoint);
        match stage {
            Stage::Dict => StageInputs {
                internal: vec![],
                external: vec![c.inputs.corpus.clone()],
                params: format!("max_ngram={} min_count={}", c.dict.max_ngram, c.dict.min_count),
            },
            Stage::Extract => StageInputs {
                internal: vec![],
                external: [Some(c.inputs.dataset.clone()), Some(c.inputs.words.clone()), c.inputs.slang.clone()]
                    .into_iter()
                    .flatten()
                    .collect(),
                params: format!("min_freq={}", t.min_freq),
            },
            Stage::Generate => StageInputs {
                internal: vec![self.artifact(DICT), self.artifact(SLANG)],
                external: vec![c.inputs.pinyin.clone()],
                params: format!("combo_min={}", t.combo_min),
            },
            Stage::Score => StageInputs {
                internal: vec![self.artifact(DICT), self.artifact(SLANG), self.artifact(CANDIDATES)],
                external: if p.lm_model.is_some() { self.replay_cassettes(&["logprob.jsonl"]) } else { vec![] },
                params: format!("k={} lm={:?} {providers}", t.k, p.lm_model),
            },
            Stage::Perturb => StageInputs {
                internal: vec![self.artifact(SELECTED)],
                external: vec![c.inputs.rules.clone(), c.inputs.fixes.clone()],
                params: format!("k={}", t.k),
            },
            Stage::Probe => StageInputs {
                internal: self.group_names().iter().map(|g| self.group_path(g)).collect(),
                external: self.replay_cassettes(&["qe.jsonl", "emotion.jsonl"]),
                params: format!(
                    "models={:?} emotion={} parallelism={} {providers}",
                    p.qe_models, p.emotion, p.parallelism
                ),
            },
            Stage::Report => {
                let mut internal: Vec<PathBuf> = self.group_names().iter().map(|g| self.group_path(g)).collect();
                internal.push(self.artifact(PROBE_QE));
                internal.push(self.artifact(PROBE_EMOTION));
                let mut external = vec![];
                if let Some(r) = &c.inputs.ratings {
                    internal.push(self.artifact(SCORED));
                    external.push(r.clone());
                }
                StageInputs { internal, external, params: String::new() }
            }
        }
    }

    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        use artifacts::*;
        match stage {
            Stage::Dict => vec![self.artifact(DICT)],
            Stage::Extract => vec![self.artifact(SLANG), self.artifact(SELECTED)],
            Stage::Generate => vec![self.artifact(CANDIDATES)],
            Stage::Score => vec![self.artifact(SCORED), self.artifact(RANKED)],
            Stage::Perturb => self.group_names().iter().map(|g| self.group_path(g)).collect(),
            Stage::Probe => vec![self.artifact(PROBE_QE), self.artifact(PROBE_EMOTION)],
            Stage::Report => vec![self.artifact(REPORT_JSON), self.artifact(REPORT_TABLE), self.artifact(REPORT_CSV)],
        }
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.out.join(artifacts::STAMPS_DIR).join(stage.as_str())
    }

    fn input_hash(&self, stage: Stage, inputs: &StageInputs) -> Result<String, PipelineError> {
        let mut h = Sha256::new();
        h.update(stage.as_str());
        h.update([0]);
        h.update(&inputs.params);
        for p in inputs.internal.iter().chain(&inputs.external) {
            h.update([0]);
            let bytes = fs::read(p).map_err(|source| PipelineError::Io { path: p.clone(), source })?;
            h.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(h.finalize()))
    }

    fn run(&self, stage: Stage) -> Result<StageStatus, PipelineError> {
        let inputs = self.inputs(stage);
        for p in &inputs.internal {
            if !p.exists() {
                return Err(PipelineError::StageDependency { stage, missing: p.clone() });
            }
        }
        for p in &inputs.external {
            if !p.exists() {
                return Err(PipelineError::MissingInput(p.clone()));
            }
        }
        let hash = self.input_hash(stage, &inputs)?;
        let stamp = self.stamp_path(stage);
        let up_to_date = fs::read_to_string(&stamp).map(|s| s.trim() == hash).unwrap_or(false)
            && self.outputs(stage).iter().all(|p| p.exists());
        if up_to_date {
            return Ok(StageStatus::Skipped);
        }
        match stage {
            Stage::Dict => self.dict()?,
            Stage::Extract => self.extract()?,
            Stage::Generate => self.generate()?,
            Stage::Score => self.score()?,
            Stage::Perturb => self.perturb()?,
            Stage::Probe => self.probe()?,
            Stage::Report => self.report()?,
        }
        write(&stamp, format!("{hash}\n").as_bytes())?;
        Ok(StageStatus::Ran)
    }

    fn dict(&self) -> Result<(), PipelineError> {
        let corpus = &self.cfg.inputs.corpus;
        let file = fs::File::open(corpus).map_err(|source| PipelineError::Io { path: corpus.clone(), source })?;
        let source_id = corpus.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut builder = FrequencyDict::builder()
            .max_ngram(self.cfg.dict.max_ngram)
            .min_count(self.cfg.dict.min_count)
            .source_id(source_id);
        builder.read_from(file).map_err(in_stage(Stage::Dict))?;
        write(&self.artifact(artifacts::DICT), builder.build().to_json().as_bytes())
    }

    fn extract(&self) -> Result<(), PipelineError> {
        let st = Stage::Extract;
        let ds = load_dataset(&self.cfg.inputs.dataset).map_err(in_stage(st))?;
        let slang = match &self.cfg.inputs.slang {
            Some(p) => load_slang(p).map_err(in_stage(st))?,
            None => {
                let seg = Segmenter::load(&self.cfg.inputs.words).map_err(in_stage(st))?;
                extract_error_words(&ds.instances, &seg, self.cfg.thresholds.min_freq).map_err(in_stage(st))?
            }
        };
        let selected = select_containing(&ds, &slang);
        if selected.is_empty() {
            return Err(in_stage(st)("no instance contains any extracted slang word"));
        }
        write(&self.artifact(artifacts::SLANG), slang_to_jsonl(&slang).as_bytes())?;
        write(&self.artifact(artifacts::SELECTED), selected.to_jsonl().as_bytes())
    }

    fn load_dict(&self, stage: Stage) -> Result<FrequencyDict, PipelineError> {
        FrequencyDict::load(self.artifact(artifacts::DICT)).map_err(in_stage(stage))
    }

    fn generate(&self) -> Result<(), PipelineError> {
        let st = Stage::Generate;
        let dict = self.load_dict(st)?;
        let slang = load_slang(self.artifact(artifacts::SLANG)).map_err(in_stage(st))?;
        let table = PinyinTable::load(&self.cfg.inputs.pinyin).map_err(in_stage(st))?;
        let sets = slang
            .iter()
            .map(|e| generate_candidates(e, &table, &dict, self.cfg.thresholds.combo_min))
            .collect::<Result<Vec<_>, _>>()
            .map_err(in_stage(st))?;
        write(&self.artifact(artifacts::CANDIDATES), candidate_sets_to_jsonl(&sets).as_bytes())
    }

    fn score(&self) -> Result<(), PipelineError> {
        let st = Stage::Score;
        let dict = Arc::new(self.load_dict(st)?);
        let slang = load_slang(self.artifact(artifacts::SLANG)).map_err(in_stage(st))?;
        let sets =
            candidate_sets_from_jsonl(&read(&self.artifact(artifacts::CANDIDATES))?, &slang).map_err(in_stage(st))?;
        let wire = match &self.cfg.providers.lm_model {
            Some(_) => Some(self.wire("logprob.jsonl")?),
            None => None,
        };
        let provider: Box<dyn LogProbProvider> = match (&self.cfg.providers.lm_model, &wire) {
            (Some(model), Some(w)) => Box::new(
                RemoteLmProvider::new(w.transport(), model.clone()).parallelism(self.cfg.providers.parallelism),
            ),
            _ => Box::new(CorpusUnigramProvider::new(dict.clone()).map_err(in_stage(st))?),
        };
        let k = self.cfg.thresholds.k;
        let mut scored: Vec<CandidateSet> = Vec::new();
        let mut ranked_lines = String::new();
        for set in sets.iter().filter(|s| !s.is_empty()) {
            let pct = percentile_scores(set, &dict).map_err(in_stage(st))?;
            let si = rank_by_self_information(set, provider.as_ref(), k).map_err(in_stage(st))?;
            let pct_of: BTreeMap<&str, f64> = pct.items.iter().map(|i| (i.candidate.text.as_str(), i.score)).collect();
            let si_of: BTreeMap<&str, f64> = si.items.iter().map(|i| (i.candidate.text.as_str(), i.score)).collect();
            let mut out = set.clone();
            for c in &mut out.candidates {
                c.aggregate_frequency = c.text.chars().map(|ch| dict.char_count(ch)).sum();
                c.percentile = pct_of.get(c.text.as_str()).copied();
                c.self_information = si_of.get(c.text.as_str()).copied();
            }
            scored.push(out);
            for r in [&si, &pct.with_k(k).map_err(in_stage(st))?] {
                let line = serde_json::json!({
                    "original": r.original,
                    "method": r.method,
                    "provider": r.provider_name,
                    "direction": r.direction,
                    "top": r.top_k().iter().map(|i| serde_json::json!({"text": i.candidate.text, "score": i.score})).collect::<Vec<_>>(),
                });
                ranked_lines.push_str(&line.to_string());
                ranked_lines.push('\n');
            }
        }
        if let Some(w) = wire {
            w.finish()?;
        }
        write(&self.artifact(artifacts::SCORED), candidate_sets_to_jsonl(&scored).as_bytes())?;
        write(&self.artifact(artifacts::RANKED), ranked_lines.as_bytes())
    }

    fn perturb(&self) -> Result<(), PipelineError> {
        let st = Stage::Perturb;
        let ds = load_dataset(self.artifact(artifacts::SELECTED)).map_err(in_stage(st))?;
        let rules = load_rules(&self.cfg.inputs.rules).map_err(in_stage(st))?;
        let fixes = load_fixes(&self.cfg.inputs.fixes).map_err(in_stage(st))?;
        let g0 = make_g0(&ds);
        for spec in self.cfg.group_specs() {
            let g = build_group(&g0, spec, &rules, &fixes).map_err(in_stage(st))?;
            write(&self.group_path(&g.name), g.to_jsonl().as_bytes())?;
        }
        Ok(())
    }

    fn load_group(&self, stage: Stage, name: &str) -> Result<PerturbationGroup, PipelineError> {
        let text = read(&self.group_path(name))?;
        PerturbationGroup::parse(name, &text).map_err(in_stage(stage))
    }

    fn probe(&self) -> Result<(), PipelineError> {
        let st = Stage::Probe;
        let par = self.cfg.providers.parallelism;
        let groups: Vec<PerturbationGroup> =
            self.group_names().iter().map(|n| self.load_group(st, n)).collect::<Result<_, _>>()?;

        let mut qe_lines = String::new();
        if !self.cfg.providers.qe_models.is_empty() {
            let wire = self.wire("qe.jsonl")?;
            for model in &self.cfg.providers.qe_models {
                let provider = HttpQeProvider::new(wire.transport(), model.clone());
                for g in &groups {
                    let r = run_probe(g, &provider, par).map_err(in_stage(st))?;
                    qe_lines.push_str(&serde_json::to_string(&r).expect("probe result serializes"));
                    qe_lines.push('\n');
                }
            }
            wire.finish()?;
        }

        let mut emotion_lines = String::new();
        if self.cfg.providers.emotion {
            let wire = self.wire("emotion.jsonl")?;
            let predictor = HttpEmotionPredictor::new(wire.transport());
            for name in self.emotion_groups() {
                let g = groups.iter().find(|g| g.name == name).expect("group loaded");
                let r = predict_labels(g, &predictor, par).map_err(in_stage(st))?;
                emotion_lines.push_str(&serde_json::to_string(&r).expect("label result serializes"));
                emotion_lines.push('\n');
            }
            wire.finish()?;
        }
        write(&self.artifact(artifacts::PROBE_QE), qe_lines.as_bytes())?;
        write(&self.artifact(artifacts::PROBE_EMOTION), emotion_lines.as_bytes())
    }

    fn report(&self) -> Result<(), PipelineError> {
        let st = Stage::Report;
        let groups: Vec<PerturbationGroup> =
            self.group_names().iter().map(|n| self.load_group(st, n)).collect::<Result<_, _>>()?;
        let probes: Vec<ProbeResult> =
            parse_lines(&read(&self.artifact(artifacts::PROBE_QE))?).map_err(in_stage(st))?;
        let labels: Vec<LabelResult> =
            parse_lines(&read(&self.artifact(artifacts::PROBE_EMOTION))?).map_err(in_stage(st))?;
        let mut report = build_report(&groups, &probes, &labels, "G0").map_err(in_stage(st))?;
        if let Some(path) = &self.cfg.inputs.ratings {
            report.human = self.human_rows(path)?;
        }
        write(&self.artifact(artifacts::REPORT_JSON), report.to_json().as_bytes())?;
        write(&self.artifact(artifacts::REPORT_TABLE), report.to_table().as_bytes())?;
        write(&self.artifact(artifacts::REPORT_CSV), report.to_csv().as_bytes())
    }

    fn human_rows(&self, ratings: &Path) -> Result<Vec<HumanRow>, PipelineError> {
        let st = Stage::Report;
        let ratings = annotate_import(ratings).map_err(in_stage(st))?;
        let sets = candidate_sets_from_jsonl(&read(&self.artifact(artifacts::SCORED))?, &[]).map_err(in_stage(st))?;
        let mut rows = Vec::new();
        for (method, pick) in [
            (
                "percentile",
                (|c: &crate::homogen::Candidate| c.percentile) as fn(&crate::homogen::Candidate) -> Option<f64>,
            ),
            ("self_information", |c| c.self_information),
        ] {
            let scores: Vec<(String, f64)> = sets
                .iter()
                .flat_map(|s| s.candidates.iter())
                .filter_map(|c| pick(c).map(|v| (c.text.clone(), v)))
                .collect();
            for (mode, label) in [(Mode::WithContext, "with_context"), (Mode::WithoutContext, "without_context")] {
                let in_mode = ratings.in_mode(mode);
                if in_mode.is_empty() {
                    continue;
                }
                let correlation = human_method_correlation(&in_mode, &scores).map_err(in_stage(st))?;
                rows.push(HumanRow { method: method.to_string(), mode: label.to_string(), correlation });
            }
        }
        Ok(rows)
    }

    fn wire(&self, cassette: &str) -> Result<Wire, PipelineError> {
        let p = &self.cfg.providers;
        let retry = RetryPolicy::default();
        let to_cfg = |e: crate::wire::TransportError| PipelineError::Config(e.to_string());
        Ok(match p.mode {
            TransportMode::Replay => {
                let path = self.cassette(cassette).expect("validated: replay has a cassette dir");
                Wire::Replay(Arc::new(ReplayTransport::load(&path).map_err(to_cfg)?))
            }
            TransportMode::Live => {
                let endpoint = p.endpoint.clone().expect("validated: live has an endpoint");
                Wire::Live(Arc::new(HttpTransport::new(endpoint, retry).map_err(to_cfg)?))
            }
            TransportMode::Record => {
                let endpoint = p.endpoint.clone().expect("validated: record has an endpoint");
                let inner = HttpTransport::new(endpoint, retry).map_err(to_cfg)?;
                let path = self.cassette(cassette).expect("validated: record has a cassette dir");
                Wire::Record(Arc::new(RecordingTransport::new(inner)), path)
            }
        })
    }
}

enum Wire {
    Replay(Arc<ReplayTransport>),
    Live(Arc<HttpTransport>),
    Record(Arc<RecordingTransport<HttpTransport>>, PathBuf),
}

impl Wire {
    fn transport(&self) -> Arc<dyn Transport> {
        match self {
            Wire::Replay(t) => t.clone(),
            Wire::Live(t) => t.clone(),
            Wire::Record(t, _) => t.clone(),
        }
    }

    fn finish(self) -> Result<(), PipelineError> {
        if let Wire::Record(t, path) = self {
            if let Some(dir) = path.parent() {
                mkdir(dir)?;
            }
            t.save(&path).map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

fn parse_lines<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, BoxError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1).into()))
        .collect()
}

/// Loads report output written by the report stage.
pub fn load_report(path: impl AsRef<Path>) -> Result<Report, PipelineError> {
    let path = path.as_ref();
    serde_json::from_str(&read(path)?).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// Writes a dataset subset (used by the CLI's extract command).
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), PipelineError> {
    write(path, instances_to_jsonl(&ds.instances).as_bytes())
}
