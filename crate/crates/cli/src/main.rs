mod serve;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use homoprobe::annotate::{self, annotate_export, annotate_import, tasks_to_jsonl, AnnotateError};
use homoprobe::dataset::{load_dataset, select_containing, DatasetError};
use homoprobe::homogen::{
    candidate_sets_from_jsonl, candidate_sets_to_jsonl, extract_error_words, generate_candidates, load_slang,
    slang_to_jsonl, CandidateRecord, HomogenError,
};
use homoprobe::lexicon::{FrequencyDict, LexiconError, PinyinTable, Segmenter};
use homoprobe::metrics::MetricsError;
use homoprobe::perturb::{build_group, load_fixes, load_rules, make_g0, GroupSpec, PerturbError, PerturbationGroup};
use homoprobe::pipeline::{artifacts, run_pipeline, PipelineConfig, PipelineError, Stage};
use homoprobe::probe::{
    predict_labels, run_probe, HttpEmotionPredictor, HttpQeProvider, LabelResult, ProbeError, ProbeResult,
};
use homoprobe::report::{build_report, Format, ReportError};
use homoprobe::scoring::{
    percentile_scores, rank_by_self_information, CorpusUnigramProvider, Direction, LogProbProvider, Method,
    ProviderError, RemoteLmProvider, ScoringError,
};
use homoprobe::wire::{HttpTransport, RecordingTransport, ReplayTransport, RetryPolicy, Transport, TransportError};

#[derive(Parser)]
#[command(name = "homoprobe", version, about = "Homophone slang generation and QE robustness probing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count characters and character n-grams in a corpus.
    BuildDict {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        #[arg(long, default_value_t = 4)]
        max_ngram: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract frequent error words from annotated source spans.
    ExtractSlang {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        words: PathBuf,
        #[arg(long, default_value_t = 10)]
        min_freq: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the instances containing any extracted word.
        #[arg(long)]
        selected_out: Option<PathBuf>,
    },
    /// Enumerate homophone candidates for each slang word.
    Generate {
        #[arg(long)]
        slang: PathBuf,
        #[arg(long)]
        pinyin: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 100)]
        combo_min: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank candidates by percentile or self-information.
    Score {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::SelfInformation)]
        method: MethodArg,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Defaults to ascending for percentile, descending for self-information.
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
        /// Remote language model name; without it the corpus unigram model is used.
        #[arg(long)]
        lm_model: Option<String>,
        #[command(flatten)]
        wire: WireArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one perturbation group from a dataset.
    Perturb {
        #[arg(long)]
        dataset: PathBuf,
        /// g0, m1:RANK, m2g1 or m2g2.
        #[arg(long)]
        group: String,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        fixes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Send a group to QE models or the emotion classifier.
    Probe {
        /// Group file written by `perturb`.
        #[arg(long)]
        group_file: PathBuf,
        /// Group name; defaults to the file stem.
        #[arg(long)]
        name: Option<String>,
        /// QE model names (repeat or comma-separate).
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        /// Predict emotion labels instead of QE scores.
        #[arg(long)]
        emotion: bool,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[command(flatten)]
        wire: WireArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the robustness report from a pipeline output directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "g0")]
        baseline: String,
        #[arg(long, value_enum, default_value_t = FormatArg::Table)]
        format: FormatArg,
        /// Group names to include; defaults to every file in `groups/`.
        #[arg(long, value_delimiter = ',')]
        groups: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export rating tasks or import ratings.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// Serve the annotation UI bundle and its task/rating endpoints.
    ServeAnnotation(serve::ServeArgs),
    /// Run pipeline stages from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated stages; defaults to all.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        /// Override the configured output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AnnotateCommand {
    Export {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        with_context: bool,
        #[arg(long, default_value_t = annotate::DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Import {
        #[arg(long)]
        ratings: PathBuf,
        /// Write the validated ratings back out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct WireArgs {
    /// Base URL of the inference server.
    #[arg(long)]
    endpoint: Option<String>,
    /// Replay responses from this cassette instead of calling the server.
    #[arg(long, conflicts_with = "endpoint")]
    cassette: Option<PathBuf>,
    /// Record responses from `--endpoint` into this cassette.
    #[arg(long, requires = "endpoint")]
    record: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Percentile,
    SelfInformation,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Asc,
    Desc,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Table,
    Csv,
}

enum Wire {
    Plain(Arc<dyn Transport>),
    Recording(Arc<RecordingTransport<HttpTransport>>, PathBuf),
}

impl Wire {
    fn open(args: &WireArgs) -> Result<Self> {
        if let Some(path) = &args.cassette {
            return Ok(Wire::Plain(Arc::new(ReplayTransport::load(path)?)));
        }
        let Some(endpoint) = &args.endpoint else {
            bail!("either --endpoint or --cassette is required");
        };
        let http = HttpTransport::new(endpoint.clone(), RetryPolicy::default())?;
        Ok(match &args.record {
            Some(path) => Wire::Recording(Arc::new(RecordingTransport::new(http)), path.clone()),
            None => Wire::Plain(Arc::new(http)),
        })
    }

    fn transport(&self) -> Arc<dyn Transport> {
        match self {
            Wire::Plain(t) => t.clone(),
            Wire::Recording(t, _) => t.clone(),
        }
    }

    fn finish(self) -> Result<()> {
        if let Wire::Recording(t, path) = self {
            t.save(path)?;
        }
        Ok(())
    }
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_in(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildDict { corpus, min_count, max_ngram, out } => {
            let file = fs::File::open(&corpus).with_context(|| format!("opening {}", corpus.display()))?;
            let source_id = corpus.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let mut builder = FrequencyDict::builder().min_count(min_count).max_ngram(max_ngram).source_id(source_id);
            builder.read_from(file)?;
            let dict = builder.build();
            write_out(&out, &dict.to_json())?;
            println!("{}", json!({"total_chars": dict.total_chars, "keys": dict.counts.len()}));
        }
        Command::ExtractSlang { dataset, words, min_freq, out, selected_out } => {
            if min_freq == 0 {
                bail!("--min-freq must be positive");
            }
            let ds = load_dataset(&dataset)?;
            let seg = Segmenter::load(&words)?;
            let slang = extract_error_words(&ds.instances, &seg, min_freq)?;
            write_out(&out, &slang_to_jsonl(&slang))?;
            let selected = select_containing(&ds, &slang);
            if let Some(path) = selected_out {
                write_out(&path, &selected.to_jsonl())?;
            }
            println!("{}", json!({"words": slang.len(), "selected": selected.len()}));
        }
        Command::Generate { slang, pinyin, dict, combo_min, out } => {
            let slang = load_slang(&slang)?;
            let table = PinyinTable::load(&pinyin)?;
            let dict = FrequencyDict::load(&dict)?;
            let sets = slang
                .iter()
                .map(|e| generate_candidates(e, &table, &dict, combo_min))
                .collect::<Result<Vec<_>, _>>()?;
            write_out(&out, &candidate_sets_to_jsonl(&sets))?;
            let counts: BTreeMap<&str, usize> = sets.iter().map(|s| (s.original.word.as_str(), s.len())).collect();
            println!("{}", json!({"candidates": sets.iter().map(|s| s.len()).sum::<usize>(), "per_word": counts}));
        }
        Command::Score { candidates, dict, method, k, direction, lm_model, wire, out } => {
            if k == 0 {
                bail!("--k must be at least 1");
            }
            let dict = Arc::new(FrequencyDict::load(&dict)?);
            let sets = candidate_sets_from_jsonl(&read_in(&candidates)?, &[])?;
            let mut lines = String::new();
            let mut opened = None;
            let provider: Box<dyn LogProbProvider> = match (&method, &lm_model) {
                (MethodArg::SelfInformation, Some(model)) => {
                    let w = Wire::open(&wire)?;
                    let p = RemoteLmProvider::new(w.transport(), model.clone());
                    opened = Some(w);
                    Box::new(p)
                }
                _ => Box::new(CorpusUnigramProvider::new(dict.clone())?),
            };
            for set in sets.iter().filter(|s| !s.is_empty()) {
                let ranked = match method {
                    MethodArg::Percentile => percentile_scores(set, &dict)?.with_k(k)?,
                    MethodArg::SelfInformation => rank_by_self_information(set, provider.as_ref(), k)?,
                };
                let ranked = match direction {
                    Some(DirectionArg::Asc) => ranked.oriented(Direction::Asc),
                    Some(DirectionArg::Desc) => ranked.oriented(Direction::Desc),
                    None => ranked,
                };
                for item in ranked.top_k() {
                    let rec = CandidateRecord::from_candidate(&ranked.original, &item.candidate);
                    lines.push_str(&serde_json::to_string(&rec)?);
                    lines.push('\n');
                }
            }
            if let Some(w) = opened {
                w.finish()?;
            }
            write_out(&out, &lines)?;
            let method = match method {
                MethodArg::Percentile => Method::Percentile,
                MethodArg::SelfInformation => Method::SelfInformation,
            };
            println!("{}", json!({"method": method, "sets": sets.len(), "k": k}));
        }
        Command::Perturb { dataset, group, rules, fixes, out } => {
            let spec: GroupSpec = group.parse()?;
            let ds = load_dataset(&dataset)?;
            let rules = match (&spec, rules) {
                (_, Some(p)) => load_rules(p)?,
                (GroupSpec::Method1(_), None) => bail!("--rules is required for method 1 groups"),
                _ => Vec::new(),
            };
            let fixes = match (&spec, fixes) {
                (_, Some(p)) => load_fixes(p)?,
                (GroupSpec::FixSlang, None) => bail!("--fixes is required for m2g1"),
                _ => BTreeMap::new(),
            };
            let g = build_group(&make_g0(&ds), spec, &rules, &fixes)?;
            write_out(&out, &g.to_jsonl())?;
            println!("{}", json!({"group": g.name, "instances": g.instances.len(), "provenance": g.provenance}));
        }
        Command::Probe { group_file, name, models, emotion, parallelism, wire, out } => {
            let name = name.unwrap_or_else(|| {
                group_file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            let group = PerturbationGroup::parse(name, &read_in(&group_file)?)?;
            if !emotion && models.is_empty() {
                bail!("pass --models for QE scoring or --emotion for labels");
            }
            let w = Wire::open(&wire)?;
            let mut lines = String::new();
            let mut incomplete = 0;
            if emotion {
                let r = predict_labels(&group, &HttpEmotionPredictor::new(w.transport()), parallelism.max(1))?;
                incomplete += usize::from(!r.complete);
                lines.push_str(&serde_json::to_string(&r)?);
                lines.push('\n');
            } else {
                for m in &models {
                    let r = run_probe(&group, &HttpQeProvider::new(w.transport(), m.clone()), parallelism.max(1))?;
                    incomplete += usize::from(!r.complete);
                    lines.push_str(&serde_json::to_string(&r)?);
                    lines.push('\n');
                }
            }
            w.finish()?;
            write_out(&out, &lines)?;
            println!("{}", json!({"group": group.name, "results": lines.lines().count(), "incomplete": incomplete}));
        }
        Command::Report { run_dir, baseline, format, groups, out } => {
            let text = render_report(&run_dir, &baseline, format, &groups)?;
            match out {
                Some(p) => write_out(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Annotate(AnnotateCommand::Export { candidates, dataset, with_context, seed, out }) => {
            let sets = candidate_sets_from_jsonl(&read_in(&candidates)?, &[])?;
            let ds = load_dataset(&dataset)?;
            let items = annotate_export(&sets, &ds, with_context, seed)?;
            write_out(&out, &tasks_to_jsonl(&items))?;
            println!("{}", json!({"items": items.len(), "with_context": with_context, "seed": seed}));
        }
        Command::Annotate(AnnotateCommand::Import { ratings, out }) => {
            let set = annotate_import(&ratings)?;
            if let Some(p) = out {
                write_out(&p, &set.to_jsonl())?;
            }
            let groups: BTreeMap<&str, usize> = set.by_annotator().into_iter().map(|(a, r)| (a, r.len())).collect();
            println!("{}", json!({"records": set.records.len(), "annotators": groups}));
        }
        Command::ServeAnnotation(args) => serve::serve(args)?,
        Command::Run { config, stages, out_dir } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            let stages = if stages.is_empty() {
                Stage::ALL.to_vec()
            } else {
                stages.iter().map(|s| s.parse()).collect::<Result<Vec<Stage>, _>>()?
            };
            let summary = run_pipeline(&cfg, &stages)?;
            let stages: Vec<_> = summary.stages.iter().map(|s| json!({"stage": s.stage, "status": s.status})).collect();
            println!("{}", json!({"out_dir": cfg.out_dir, "stages": stages}));
        }
    }
    Ok(())
}

fn render_report(run_dir: &Path, baseline: &str, format: FormatArg, only: &[String]) -> Result<String> {
    let groups_dir = run_dir.join(artifacts::GROUPS_DIR);
    let probe_qe = run_dir.join(artifacts::PROBE_QE);
    if !probe_qe.exists() {
        return Err(PipelineError::StageDependency { stage: Stage::Report, missing: probe_qe }.into());
    }
    let probes: Vec<ProbeResult> = parse_lines(&read_in(&probe_qe)?)?;
    let labels_path = run_dir.join(artifacts::PROBE_EMOTION);
    let labels: Vec<LabelResult> =
        if labels_path.exists() { parse_lines(&read_in(&labels_path)?)? } else { Vec::new() };

    // Group order follows first appearance in the probe file, which is the
    // pipeline's canonical order.
    let mut names: Vec<String> = Vec::new();
    for p in &probes {
        if !names.contains(&p.group_name) && (only.is_empty() || only.contains(&p.group_name)) {
            names.push(p.group_name.clone());
        }
    }
    let mut groups = Vec::new();
    for n in &names {
        let path = groups_dir.join(format!("{n}.jsonl"));
        if !path.exists() {
            return Err(PipelineError::StageDependency { stage: Stage::Report, missing: path }.into());
        }
        groups.push(PerturbationGroup::parse(n.clone(), &read_in(&path)?)?);
    }
    let probes: Vec<ProbeResult> = probes.into_iter().filter(|p| names.contains(&p.group_name)).collect();
    let labels: Vec<LabelResult> = labels.into_iter().filter(|l| names.contains(&l.group_name)).collect();
    let report = build_report(&groups, &probes, &labels, &baseline.to_ascii_uppercase())?;
    let format = match format {
        FormatArg::Json => Format::Json,
        FormatArg::Table => Format::Table,
        FormatArg::Csv => Format::Csv,
    };
    Ok(report.render(format))
}

fn parse_lines<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("line {}", i + 1)))
        .collect()
}

/// Stable machine-readable name for the error category.
fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<PipelineError>() {
        return e.kind();
    }
    match err.downcast_ref::<DatasetError>() {
        Some(DatasetError::Io { .. }) => return "io",
        Some(_) => return "validation",
        None => {}
    }
    match err.downcast_ref::<AnnotateError>() {
        Some(AnnotateError::Validation { .. }) => return "validation",
        Some(AnnotateError::Io { .. }) => return "io",
        _ => {}
    }
    if let Some(MetricsError::Validation(_)) = err.downcast_ref::<MetricsError>() {
        return "validation";
    }
    macro_rules! kinds {
        ($($ty:ty => $name:literal),* $(,)?) => {
            $(if err.downcast_ref::<$ty>().is_some() { return $name; })*
        };
    }
    kinds! {
        LexiconError => "lexicon",
        HomogenError => "generation",
        ScoringError => "scoring",
        ProviderError => "provider",
        PerturbError => "perturb",
        ProbeError => "probe",
        MetricsError => "metrics",
        ReportError => "report",
        AnnotateError => "annotate",
        TransportError => "transport",
        serde_json::Error => "json",
        std::io::Error => "io",
    }
    "error"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.kind().to_string(), "detail": e.to_string()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let chain: Vec<String> = err.chain().map(ToString::to_string).collect();
            eprintln!("{}", json!({"error": error_kind(&err), "message": err.to_string(), "causes": chain}));
            ExitCode::FAILURE
        }
    }
}
