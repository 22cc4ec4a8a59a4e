//! Helpers for exercising the HTTP-facing backends without real services.

pub mod http {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::{Arc, Mutex};
    use std::thread;

    #[derive(Debug, Clone)]
    pub struct StubRequest {
        /// Request line, e.g. `POST /v1/chat HTTP/1.1`.
        pub line: String,
        pub body: Vec<u8>,
    }

    impl StubRequest {
        pub fn body_json(&self) -> serde_json::Value {
            serde_json::from_slice(&self.body).unwrap_or(serde_json::Value::Null)
        }

        pub fn path(&self) -> &str {
            self.line.split_whitespace().nth(1).unwrap_or("")
        }
    }

    pub struct StubResponse {
        pub status: u16,
        pub body: String,
    }

    type Handler = dyn Fn(&StubRequest) -> StubResponse + Send + Sync;

    /// A tiny HTTP/1.1 server on a loopback port. Each connection carries one
    /// request; the handler decides the response.
    pub struct StubServer {
        addr: String,
        requests: Arc<Mutex<Vec<StubRequest>>>,
    }

    impl StubServer {
        pub fn new(handler: impl Fn(&StubRequest) -> StubResponse + Send + Sync + 'static) -> Self {
            let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
            let addr = listener.local_addr().unwrap().to_string();
            let requests = Arc::new(Mutex::new(Vec::new()));
            let log = Arc::clone(&requests);
            let handler: Arc<Handler> = Arc::new(handler);
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let log = Arc::clone(&log);
                    let handler = Arc::clone(&handler);
                    thread::spawn(move || serve_one(stream, &*handler, &log));
                }
            });
            StubServer { addr, requests }
        }

        /// Always answers with `status` and a JSON body.
        pub fn json(status: u16, body: &str) -> Self {
            let body = body.to_owned();
            Self::new(move |_| StubResponse {
                status,
                body: body.clone(),
            })
        }

        pub fn url(&self, path: &str) -> String {
            format!("http://{}{}", self.addr, path)
        }

        pub fn requests(&self) -> Vec<StubRequest> {
            self.requests.lock().unwrap().clone()
        }
    }

    fn serve_one(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<StubRequest>>) {
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut line = String::new();
        if reader.read_line(&mut line).is_err() {
            return;
        }
        let mut content_length = 0usize;
        loop {
            let mut header = String::new();
            if reader.read_line(&mut header).is_err() || header == "\r\n" || header.is_empty() {
                break;
            }
            if let Some((name, value)) = header.split_once(':') {
                if name.eq_ignore_ascii_case("content-length") {
                    content_length = value.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0; content_length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let request = StubRequest {
            line: line.trim_end().to_owned(),
            body,
        };
        let response = handler(&request);
        log.lock().unwrap().push(request);
        let mut stream = stream;
        let _ = write!(
            stream,
            "HTTP/1.1 {} Stub\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
            response.status,
            response.body.len(),
            response.body
        );
        let _ = stream.flush();
    }

    /// Accepts connections and never answers; returns its URL.
    pub fn silent_server() -> String {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let mut held = Vec::new();
            for stream in listener.incoming().flatten() {
                held.push(stream);
            }
        });
        format!("http://{addr}/")
    }

    /// A URL nothing listens on.
    pub fn dead_url() -> String {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().unwrap();
        drop(listener);
        format!("http://{addr}/")
    }
}

/// Scripted scenarios: a small mmdeploy knowledge base, a backend that
/// answers every template deterministically, and a pipeline wired to both.
pub mod fixtures {
    use std::sync::{Arc, RwLock};

    use chrono::{TimeZone, Utc};

    use crate::llm::{BackendProfile, Capability, Gateway, ScriptedBackend};
    use crate::preprocess::{make_user_key, QueryBundle};
    use crate::response::{FixedClock, Pipeline, RecordingAdapter};
    use crate::store::{DocumentRecord, FeatureStore, MockEmbedder, SplitMethod};

    pub const GROUP: &str = "openmmlab-dev";
    pub const QUESTION: &str = "How do I install mmdeploy with pip?";
    pub const CHITCHAT: &str = "what's for lunch today everyone";
    pub const STATEMENT: &str = "I install mmdeploy with pip every day";
    pub const BANNED: &str = "How do I install mmdeploy with pip for my casino?";
    pub const ANSWER: &str = "Run `pip install mmdeploy`, then build the custom ops with cmake [1].";

    pub fn knowledge() -> Vec<DocumentRecord> {
        vec![
            DocumentRecord::new(
                "docs/install.md",
                "# Installing mmdeploy\nInstall mmdeploy with pip: `pip install mmdeploy`. Then build the custom ops with cmake.\n",
                "text/markdown",
            ),
            DocumentRecord::new(
                "docs/export.md",
                "# Exporting models\nUse tools/deploy.py to convert an mmdet checkpoint to onnx or tensorrt.\n",
                "text/markdown",
            ),
        ]
    }

    pub fn store(docs: &[DocumentRecord]) -> FeatureStore {
        let mut s = FeatureStore::new(Arc::new(MockEmbedder::default()), SplitMethod::default());
        for d in docs {
            s.add_document(d.clone()).expect("fixture document");
        }
        s
    }

    fn quoted(s: &str) -> String {
        format!("\"{s}\"")
    }

    /// Replies to every built-in template for the four scenarios.
    pub fn backend() -> ScriptedBackend {
        ScriptedBackend::new()
            // question scoring
            .with_rule(&["topical interrogative", &quoted(QUESTION)], "9")
            .with_rule(&["topical interrogative", &quoted(BANNED)], "8")
            .with_rule(&["topical interrogative"], "0")
            // keywords
            .with_rule(&["Extract the keywords", &quoted(QUESTION)], "install mmdeploy\npip")
            .with_rule(&["Extract the keywords", &quoted(BANNED)], "install mmdeploy\ncasino")
            .with_rule(&["Extract the keywords"], "")
            // rerank and web filtering
            .with_rule(&["Rate how relevant the document", "pip install mmdeploy"], "9")
            .with_rule(&["Rate how relevant the document"], "1")
            // generation
            .with_rule(&["Answer the question using only", &format!("Question: {BANNED}\n")], "Bet it all at the casino.")
            .with_rule(&["Answer the question using only", &format!("Question: {QUESTION}\n")], ANSWER)
            .with_rule(&["Answer the question using only"], "I do not know.")
            // answer relevance
            .with_rule(&["Rate how well the reply", "I do not know."], "2")
            .with_rule(&["Rate how well the reply"], "8")
            // security topics
            .with_rule(&["prohibited topics", "casino"], "9")
            .with_rule(&["prohibited topics"], "0")
    }

    pub fn gateway() -> Gateway {
        let mut g = Gateway::default();
        g.register(
            BackendProfile::new("local", 16_000, &[Capability::Scoring, Capability::Generation], 1),
            Arc::new(backend()),
        )
        .expect("fixture backend");
        g
    }

    pub const NOW: i64 = 1_709_287_200; // 2024-03-01T10:00:00Z

    pub fn clock() -> Arc<FixedClock> {
        Arc::new(FixedClock::new(Utc.timestamp_opt(NOW, 0).unwrap()))
    }

    /// Pipeline over the fixture stores with a fixed clock and in-memory IM.
    pub fn pipeline() -> (Pipeline, Arc<RecordingAdapter>, Arc<FixedClock>) {
        let docs = knowledge();
        let im = Arc::new(RecordingAdapter::default());
        let clock = clock();
        let p = Pipeline::new(
            Arc::new(gateway()),
            Arc::new(RwLock::new(store(&docs))),
            Arc::new(RwLock::new(store(&docs))),
        )
        .with_clock(clock.clone())
        .with_im(im.clone());
        (p, im, clock)
    }

    pub fn bundle(text: &str, user: &str, ts: i64) -> QueryBundle {
        QueryBundle::single(make_user_key(GROUP, user).unwrap(), text, ts, &format!("m-{user}-{ts}"))
    }
}
