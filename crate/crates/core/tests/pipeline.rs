mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use homoprobe::pipeline::{load_report, run_pipeline, PipelineConfig, PipelineError, Stage, StageStatus};

use common::{fixture, start_mock};

fn config(out_dir: &Path, providers: &str, ratings: Option<&Path>) -> PipelineConfig {
    let f = |name: &str| fixture(name).display().to_string();
    let ratings = ratings.map(|p| format!("ratings = {:?}\n", p.display().to_string())).unwrap_or_default();
    let text = format!(
        r#"out_dir = {out:?}

[inputs]
corpus = {corpus:?}
pinyin = {pinyin:?}
words = {words:?}
dataset = {dataset:?}
rules = {rules:?}
fixes = {fixes:?}
{ratings}
[providers]
{providers}
"#,
        out = out_dir.display().to_string(),
        corpus = f("weibo_toy.txt"),
        pinyin = f("pinyin_mini.tsv"),
        words = f("words.txt"),
        dataset = f("hadqaet_pool.jsonl"),
        rules = f("rules_top5.jsonl"),
        fixes = f("fixes_m2g1.jsonl"),
    );
    PipelineConfig::from_toml(&text, Path::new("/")).unwrap()
}

fn replay_providers() -> String {
    format!(
        "mode = \"replay\"\ncassette_dir = {:?}\nlm_model = \"qwen1.5-7b-sim\"\nqe_models = [\"FT-COMETKIWI\", \"Deepseek-67B\"]",
        fixture("cassettes").display().to_string()
    )
}

fn statuses(summary: &homoprobe::pipeline::RunSummary) -> Vec<(Stage, StageStatus)> {
    summary.stages.iter().map(|s| (s.stage, s.status)).collect()
}

fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            if rel.starts_with(".stamps") || rel == Path::new("run_meta.json") {
                continue;
            }
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn second_run_skips_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("run"), &replay_providers(), None);
    let first = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert!(first.stages.iter().all(|s| s.status == StageStatus::Ran));
    assert_eq!(first.stages.len(), 7);
    let report = fs::read(cfg.out_dir.join("report.json")).unwrap();

    let second = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert!(second.stages.iter().all(|s| s.status == StageStatus::Skipped), "{:?}", statuses(&second));
    assert_eq!(fs::read(cfg.out_dir.join("report.json")).unwrap(), report);
    assert!(cfg.out_dir.join("run_meta.json").exists());
}

#[test]
fn changed_ratings_only_rerun_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("ratings.jsonl");
    fs::copy(fixture("ratings.jsonl"), &ratings).unwrap();
    let cfg = config(&dir.path().join("run"), &replay_providers(), Some(&ratings));
    run_pipeline(&cfg, &Stage::ALL).unwrap();
    let before = load_report(cfg.out_dir.join("report.json")).unwrap();
    assert!(!before.human.is_empty());

    let text = fs::read_to_string(&ratings).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("\"annotator_id\":\"a2\"")).collect();
    fs::write(&ratings, kept.join("\n") + "\n").unwrap();

    let rerun = run_pipeline(&cfg, &Stage::ALL).unwrap();
    let ran: Vec<Stage> = rerun.stages.iter().filter(|s| s.status == StageStatus::Ran).map(|s| s.stage).collect();
    assert_eq!(ran, [Stage::Report]);
    let after = load_report(cfg.out_dir.join("report.json")).unwrap();
    assert_ne!(after.human, before.human);
    assert_eq!(after.correlations, before.correlations);
}

#[test]
fn deleted_artifact_forces_a_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("run"), &replay_providers(), None);
    run_pipeline(&cfg, &Stage::ALL).unwrap();
    let candidates = fs::read(cfg.out_dir.join("candidates.jsonl")).unwrap();
    fs::remove_file(cfg.out_dir.join("candidates.jsonl")).unwrap();
    let rerun = run_pipeline(&cfg, &[Stage::Generate]).unwrap();
    assert_eq!(statuses(&rerun), [(Stage::Generate, StageStatus::Ran)]);
    assert_eq!(fs::read(cfg.out_dir.join("candidates.jsonl")).unwrap(), candidates);
}

#[test]
fn report_without_upstream_artifacts_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("run"), &replay_providers(), None);
    let err = run_pipeline(&cfg, &[Stage::Report]).unwrap_err();
    assert_eq!(err.kind(), "stage_dependency");
    assert!(matches!(err, PipelineError::StageDependency { stage: Stage::Report, .. }), "{err}");
}

#[test]
fn stage_order_follows_the_pipeline_not_the_request() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("run"), &replay_providers(), None);
    let summary = run_pipeline(&cfg, &[Stage::Extract, Stage::Dict, Stage::Extract]).unwrap();
    let order: Vec<Stage> = summary.stages.iter().map(|s| s.stage).collect();
    assert_eq!(order, [Stage::Dict, Stage::Extract]);
}

#[test]
fn config_rejects_unknown_keys_and_missing_cassettes() {
    let base = "out_dir = \"o\"\n[inputs]\ncorpus = \"c\"\npinyin = \"p\"\nwords = \"w\"\ndataset = \"d\"\nrules = \"r\"\nfixes = \"f\"\n";
    let err =
        PipelineConfig::from_toml(&format!("{base}[thresholds]\nmin_frequency = 3\n"), Path::new("/tmp")).unwrap_err();
    assert_eq!(err.kind(), "config");
    let err =
        PipelineConfig::from_toml(&format!("{base}[providers]\nmode = \"replay\"\n"), Path::new("/tmp")).unwrap_err();
    assert!(err.to_string().contains("cassette_dir"), "{err}");
    let ok =
        PipelineConfig::from_toml(&format!("{base}[providers]\ncassette_dir = \"k\"\n"), Path::new("/tmp")).unwrap();
    assert_eq!(ok.inputs.corpus, Path::new("/tmp/c"));
    assert_eq!(ok.providers.cassette_dir.as_deref(), Some(Path::new("/tmp/k")));
}

#[test]
fn recorded_run_replays_to_the_same_artifacts() {
    let mock = start_mock();
    let dir = tempfile::tempdir().unwrap();
    let cassettes = dir.path().join("cassettes");
    let models = "qe_models = [\"mock-a\", \"mock-b\"]\nlm_model = \"mock-lm\"";
    let record = format!(
        "mode = \"record\"\nendpoint = {:?}\ncassette_dir = {:?}\n{models}",
        mock.base_url,
        cassettes.display().to_string()
    );
    let recorded = config(&dir.path().join("recorded"), &record, None);
    run_pipeline(&recorded, &Stage::ALL).unwrap();
    for name in ["qe.jsonl", "emotion.jsonl", "logprob.jsonl"] {
        assert!(cassettes.join(name).exists(), "{name} was not recorded");
    }
    let calls = mock.seen.hits("mock-a");
    assert_eq!(calls, 167 * 8);

    let replay = format!("mode = \"replay\"\ncassette_dir = {:?}\n{models}", cassettes.display().to_string());
    let replayed = config(&dir.path().join("replayed"), &replay, None);
    run_pipeline(&replayed, &Stage::ALL).unwrap();
    assert_eq!(mock.seen.hits("mock-a"), calls);
    assert_eq!(artifacts(&recorded.out_dir), artifacts(&replayed.out_dir));

    let report = load_report(replayed.out_dir.join("report.json")).unwrap();
    assert_eq!(report.metadata.models, ["mock-a", "mock-b"]);
    assert_eq!(report.correlations.len(), 2 * 8);
}
