use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gqa_core::response::{ReplyRecord, ReplyState};
use gqa_core::service::{FileSink, STATE_FILE};
use gqa_core::testing::fixtures;
use serde_json::Value;

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

const CONFIG: &str = r#"
data_dir = "data"

[store_paths]
rejection = "stores/rejection"
response = "stores/response"

[[backends]]
name = "local"
endpoint = "scripted:demo"
max_tokens = 16000
capabilities = ["scoring", "generation"]
cost_rank = 1
"#;

impl Env {
    fn new() -> Self {
        Self::with_config(CONFIG)
    }

    fn with_config(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let docs = dir.path().join("docs");
        for d in fixtures::knowledge() {
            let path = docs.join(&d.source_path);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(path, &d.full_text).unwrap();
        }
        let path = dir.path().join("gqa.toml");
        std::fs::write(&path, config).unwrap();
        Env { dir, config: path }
    }

    fn docs(&self) -> PathBuf {
        self.dir.path().join("docs")
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn run(&self, args: &[&str]) -> Output {
        gqa().arg("--config").arg(&self.config).args(args).output().unwrap()
    }

    fn ok_json(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn ingest_both(&self) {
        let docs = self.docs();
        let docs = docs.to_str().unwrap();
        self.ok_json(&["ingest", "--store", "rejection", docs]);
        self.ok_json(&["ingest", "--store", "response", docs]);
    }
}

fn gqa() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gqa"));
    c.env_remove("HXD_CONFIG").env("RUST_LOG", "error");
    c
}

#[test]
fn missing_config_exits_2() {
    let out = gqa().args(["query", "hello there", "--group", "g"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("HXD_CONFIG"));
    let out = gqa().args(["--config", "/no/such/file.toml", "serve"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn colliding_store_paths_exit_2() {
    let env = Env::with_config(&CONFIG.replace("stores/response", "stores/rejection"));
    let out = env.run(&["serve"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("share the path"));
}

#[test]
fn env_var_overrides_flag() {
    let env = Env::new();
    let out = gqa()
        .env("HXD_CONFIG", &env.config)
        .args(["--config", "/no/such/file.toml", "ingest", "--store", "response"])
        .arg(env.docs())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ingest_is_idempotent() {
    let env = Env::new();
    let docs = env.docs();
    let first = env.ok_json(&["ingest", "--store", "response", docs.to_str().unwrap()]);
    assert_eq!(first["documents_added"], 2);
    assert!(first["chunks_added"].as_u64().unwrap() > 0);
    let second = env.ok_json(&["ingest", "--store", "response", docs.to_str().unwrap()]);
    assert_eq!(second["chunks_added"], 0);
    assert_eq!(second["documents_added"], 0);
}

#[test]
fn query_outcomes() {
    let env = Env::new();
    env.ingest_both();
    let chat = env.ok_json(&["query", fixtures::CHITCHAT, "--group", fixtures::GROUP]);
    assert_eq!(chat["state"], "withheld");
    assert_eq!(chat["reason"], "rejected");
    let q = env.ok_json(&["query", fixtures::QUESTION, "--group", fixtures::GROUP, "--user", "u2"]);
    assert_eq!(q["state"], "sent");
    assert_eq!(q["answer"], fixtures::ANSWER);
    assert!(q["citations"].as_array().unwrap().iter().any(|c| c == "docs/install.md"));
}

fn log_is_complete(data: &Path) {
    let sink = FileSink::open(data).unwrap();
    let log = sink.read_log().unwrap();
    assert!(log.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    let mut last: BTreeMap<String, ReplyRecord> = BTreeMap::new();
    for line in log {
        assert_eq!(line.reply_id, line.record.reply_id);
        last.insert(line.reply_id, line.record);
    }
    let snapshot: BTreeMap<String, ReplyRecord> =
        serde_json::from_slice(&std::fs::read(data.join(STATE_FILE)).unwrap()).unwrap();
    assert_eq!(snapshot, last);
}

#[test]
fn withdraw_persists_across_invocations() {
    let env = Env::new();
    env.ingest_both();
    let q = env.ok_json(&["query", fixtures::QUESTION, "--group", fixtures::GROUP]);
    let id = q["reply_id"].as_str().unwrap();
    let w = env.ok_json(&["withdraw", id]);
    assert_eq!(w["state"], "withdrawn");
    assert_eq!(w["trace"].as_array().unwrap().last().unwrap()["gate"], "withdraw");
    let again = env.ok_json(&["withdraw", id]);
    assert_eq!(again["state"], "withdrawn");

    let out = env.run(&["withdraw", "0000000000000000"]);
    assert_eq!(out.status.code(), Some(1));

    let chat = env.ok_json(&["query", fixtures::CHITCHAT, "--group", fixtures::GROUP]);
    let out = env.run(&["withdraw", chat["reply_id"].as_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("withheld"));

    log_is_complete(&env.data());
    let sink = FileSink::open(&env.data()).unwrap();
    let states: Vec<ReplyState> =
        sink.read_log().unwrap().into_iter().filter(|l| l.reply_id == id).map(|l| l.record.state).collect();
    assert_eq!(states, vec![ReplyState::Pending, ReplyState::Sent, ReplyState::Withdrawn]);
}

#[test]
fn eval_reject_sweep_and_malformed_corpus() {
    let env = Env::new();
    env.ingest_both();
    let corpus = env.dir.path().join("corpus.jsonl");
    let lines = [
        serde_json::json!({"text": fixtures::QUESTION, "label": true}),
        serde_json::json!({"text": "How do I export a model to ONNX with mmdeploy?", "label": true}),
        serde_json::json!({"text": fixtures::CHITCHAT, "label": false}),
        serde_json::json!({"text": "see you all at the weekend barbecue", "label": false}),
    ];
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(&corpus, &text).unwrap();
    let out = env.run(&["eval-reject", corpus.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = tsv.lines().collect();
    assert_eq!(rows[0], "threshold\tprecision\trecall\tf1\ttp\tfp\tfn\ttn");
    assert_eq!(rows.len(), 1 + 101 + 1);
    assert!(rows[102].starts_with("# best\t"));

    std::fs::write(&corpus, format!("{text}{{\"text\": 5}}\n")).unwrap();
    let out = env.run(&["eval-reject", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 5"));
}

#[test]
fn serve_answers_over_http() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let env = Env::with_config(&format!(
        "listen = \"127.0.0.1:{port}\"\n{CONFIG}\n[preprocess]\naggregation_window_seconds = 0\n"
    ));
    env.ingest_both();
    let mut child = gqa().arg("--config").arg(&env.config).arg("serve").spawn().unwrap();
    let base = format!("http://127.0.0.1:{port}");
    let up = (0..100).any(|_| {
        std::thread::sleep(std::time::Duration::from_millis(50));
        ureq::get(&format!("{base}/v1/config")).call().is_ok()
    });
    let result = std::panic::catch_unwind(|| {
        assert!(up, "service did not start");
        let now = chrono::Utc::now().to_rfc3339();
        let resp = ureq::post(&format!("{base}/v1/messages"))
            .send_json(serde_json::json!({
                "group_id": fixtures::GROUP, "user_id": "u1", "timestamp": now,
                "kind": "text", "content": fixtures::QUESTION, "message_id": "m1",
            }))
            .unwrap();
        assert_eq!(resp.status(), 202);
        let mut state = String::new();
        for _ in 0..100 {
            let list: Value = ureq::get(&format!("{base}/v1/replies")).call().unwrap().into_json().unwrap();
            if let Some(s) = list[0]["state"].as_str() {
                state = s.to_owned();
                if state != "pending" {
                    break;
                }
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
        assert_eq!(state, "sent");
        match ureq::post(&format!("{base}/v1/withdraw/unknown")).call() {
            Err(ureq::Error::Status(code, _)) => assert_eq!(code, 404),
            other => panic!("unexpected {other:?}"),
        }
    });
    child.kill().unwrap();
    child.wait().unwrap();
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
    log_is_complete(&env.data());
}
