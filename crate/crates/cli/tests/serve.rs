use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run_ok(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_homoprobe")).args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Candidates and selected instances built with the CLI, plus a small
    /// static bundle.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = |n: &str| dir.path().join(n).display().to_string();
        run_ok(&["build-dict", "--corpus", fixture("weibo_toy.txt").to_str().unwrap(), "--out", &path("dict.json")]);
        run_ok(&[
            "extract-slang",
            "--dataset",
            fixture("hadqaet_pool.jsonl").to_str().unwrap(),
            "--words",
            fixture("words.txt").to_str().unwrap(),
            "--out",
            &path("slang.jsonl"),
            "--selected-out",
            &path("selected.jsonl"),
        ]);
        run_ok(&[
            "generate",
            "--slang",
            &path("slang.jsonl"),
            "--pinyin",
            fixture("pinyin_mini.tsv").to_str().unwrap(),
            "--dict",
            &path("dict.json"),
            "--out",
            &path("candidates.jsonl"),
        ]);
        fs::create_dir(dir.path().join("dist")).unwrap();
        fs::write(dir.path().join("dist/index.html"), "<!doctype html><title>rate</title>").unwrap();
        fs::write(dir.path().join("dist/app.js"), "console.log('ok');").unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn serve(&self) -> Server {
        let s = |p: PathBuf| p.display().to_string();
        let mut child = Command::new(env!("CARGO_BIN_EXE_homoprobe"))
            .args([
                "serve-annotation",
                "--candidates",
                &s(self.path("candidates.jsonl")),
                "--dataset",
                &s(self.path("selected.jsonl")),
                "--ratings",
                &s(self.path("ratings.jsonl")),
                "--static-dir",
                &s(self.path("dist")),
                "--addr",
                "127.0.0.1:0",
            ])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let banner: Value = serde_json::from_str(&line).unwrap_or_else(|e| panic!("{e}: {line:?}"));
        let base = format!("http://{}", banner["listening"].as_str().unwrap());
        Server { child, base, client: Client::new() }
    }
}

struct Server {
    child: Child,
    base: String,
    client: Client,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Server {
    fn tasks(&self, query: &str) -> (StatusCode, Value) {
        let resp = self.client.get(format!("{}/api/tasks?{query}", self.base)).send().unwrap();
        (resp.status(), resp.json().unwrap())
    }

    fn rate(&self, body: &Value) -> (StatusCode, Value) {
        let resp = self.client.post(format!("{}/api/ratings", self.base)).json(body).send().unwrap();
        (resp.status(), resp.json().unwrap())
    }
}

fn rating(item: &Value, annotator: &str, score: u8) -> Value {
    json!({
        "candidate_text": item["candidate_text"],
        "original_text": item["original_text"],
        "annotator_id": annotator,
        "score": score,
        "context_shown": item["context_shown"],
        "source_context": item.get("source_context").cloned().unwrap_or(Value::Null),
    })
}

fn read_ratings(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn task_lists_cover_both_modes() {
    let ws = Workspace::new();
    let server = ws.serve();

    let (status, with) = server.tasks("mode=with_context&annotator=a1");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(with["mode"], "with_context");
    let items = with["items"].as_array().unwrap();
    assert_eq!(items.len(), 172);
    assert!(items.iter().all(|i| i["context_shown"] == true && i["source_context"].is_string()));
    assert_eq!(with["responses"], json!([]));

    let (_, without) = server.tasks("mode=without_context");
    let items = without["items"].as_array().unwrap();
    assert_eq!(items.len(), 172);
    assert!(items.iter().all(|i| i["context_shown"] == false && i.get("source_context").is_none()));

    let (status, err) = server.tasks("mode=sideways");
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "validation");
    let (status, _) = server.tasks("");
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn ratings_are_stored_replaced_and_persisted() {
    let ws = Workspace::new();
    let server = ws.serve();
    let (_, tasks) = server.tasks("mode=with_context&annotator=a1");
    let items = tasks["items"].as_array().unwrap();

    let (status, body) = server.rate(&rating(&items[0], "a1", 4));
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body, json!({"stored": true, "replaced": false, "total": 1}));
    let (_, body) = server.rate(&rating(&items[1], "a1", 2));
    assert_eq!(body["total"], 2);

    // re-rating the same item replaces the earlier score
    let (_, body) = server.rate(&rating(&items[0], "a1", 5));
    assert_eq!(body, json!({"stored": true, "replaced": true, "total": 2}));

    let (_, resumed) = server.tasks("mode=with_context&annotator=a1");
    let responses = resumed["responses"].as_array().unwrap();
    assert_eq!(responses.len(), 2);
    let first = responses.iter().find(|r| r["candidate_text"] == items[0]["candidate_text"]).unwrap();
    assert_eq!(first["score"], 5);
    let (_, other) = server.tasks("mode=without_context&annotator=a1");
    assert_eq!(other["responses"], json!([]));

    let saved = read_ratings(&ws.path("ratings.jsonl"));
    assert_eq!(saved.len(), 2);
    assert!(saved.contains(&rating(&items[0], "a1", 5)));

    // a restarted server resumes from the persisted file
    drop(server);
    let server = ws.serve();
    let (_, resumed) = server.tasks("mode=with_context&annotator=a1");
    assert_eq!(resumed["responses"].as_array().unwrap().len(), 2);
}

#[test]
fn invalid_ratings_are_rejected() {
    let ws = Workspace::new();
    let server = ws.serve();
    let (_, tasks) = server.tasks("mode=without_context");
    let item = &tasks["items"][0];

    for score in [0, 6] {
        let (status, body) = server.rate(&rating(item, "a1", score));
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "score {score}");
        assert_eq!(body["error"], "validation");
    }
    let mut unknown = rating(item, "a1", 3);
    unknown["candidate_text"] = json!("不存在");
    assert_eq!(server.rate(&unknown).0, StatusCode::UNPROCESSABLE_ENTITY);

    // context flag must match an item of that mode
    let mut wrong_mode = rating(item, "a1", 3);
    wrong_mode["context_shown"] = json!(true);
    assert_eq!(server.rate(&wrong_mode).0, StatusCode::UNPROCESSABLE_ENTITY);

    let resp = server
        .client
        .post(format!("{}/api/ratings", server.base))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!ws.path("ratings.jsonl").exists());
}

#[test]
fn static_bundle_is_served() {
    let ws = Workspace::new();
    let server = ws.serve();
    let index = server.client.get(format!("{}/", server.base)).send().unwrap();
    assert_eq!(index.status(), StatusCode::OK);
    assert!(index.text().unwrap().contains("<title>rate</title>"));
    let js = server.client.get(format!("{}/app.js", server.base)).send().unwrap();
    assert_eq!(js.text().unwrap(), "console.log('ok');");
    let missing = server.client.get(format!("{}/nope.css", server.base)).send().unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
}
