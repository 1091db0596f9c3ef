//! Wire-level checks of every sidecar endpoint against an in-process mock server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use meaeq_core::backend::{read_embedding_cache, read_score_cache, write_embedding_cache, write_score_cache};
use meaeq_core::filter::{QueryPool, Stage};
use meaeq_core::student::{ExternalTrainer, LabeledPair, TrainHyper};
use meaeq_core::victim::{query_victim, QueryLedger, RemoteVictim};
use meaeq_core::{
    Embedding, EntailmentScores, Error, HttpBackend, HttpConfig, InferenceBackend, PromptTemplate, Sentence,
    SentenceSet,
};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Request {
    method: String,
    path: String,
    body: Value,
}

type Handler = dyn Fn(&Request, usize) -> (u16, String) + Send + Sync;

/// One request per connection; `Connection: close` keeps the client from pooling.
struct MockServer {
    url: String,
    log: Arc<Mutex<Vec<Request>>>,
}

impl MockServer {
    fn start(handler: impl Fn(&Request, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let shared = Arc::clone(&log);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let log = Arc::clone(&shared);
                let handler = Arc::clone(&handler);
                thread::spawn(move || serve(stream, &log, &*handler));
            }
        });
        MockServer { url, log }
    }

    fn config(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.url.clone(),
            timeout_ms: 5_000,
            retries: 3,
            backoff_ms: 1,
            max_in_flight: 4,
            max_batch: 4,
        }
    }

    fn requests(&self) -> Vec<Request> {
        self.log.lock().unwrap().clone()
    }

    fn count(&self, path: &str) -> usize {
        self.requests().iter().filter(|r| r.path == path).count()
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<Request>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut length = 0;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        let header = header.trim();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let body = if body.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&body).unwrap()
    };
    let req = Request { method, path, body };
    let nth = {
        let mut log = log.lock().unwrap();
        let nth = log.iter().filter(|r| r.path == req.path).count();
        log.push(req.clone());
        nth
    };
    let (status, text) = handler(&req, nth);
    let reason = if status < 400 { "OK" } else { "Error" };
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

/// Text-keyed scores on the simplex, so single and batched calls can be compared.
fn fake_scores(premise: &str) -> Value {
    let e = (premise.len() % 10) as f64 / 10.0;
    json!({"neutral": (1.0 - e) / 2.0, "entailment": e, "contradiction": (1.0 - e) / 2.0})
}

fn fake_vector(text: &str) -> Vec<f32> {
    vec![
        text.len() as f32,
        text.bytes().map(f32::from).sum::<f32>() / 100.0,
        1.0,
    ]
}

fn sidecar(req: &Request, _nth: usize) -> (u16, String) {
    let body = &req.body;
    match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/healthz") => (200, "\"ok\"".into()),
        ("POST", "/nli") => {
            let premise = body["premise"].as_str().unwrap();
            if premise.is_empty() {
                return (400, json!({"error": "empty premise"}).to_string());
            }
            (200, fake_scores(premise).to_string())
        }
        ("POST", "/nli_batch") => {
            let results: Vec<Value> = body["pairs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|p| fake_scores(p["premise"].as_str().unwrap()))
                .collect();
            (200, json!({ "results": results }).to_string())
        }
        ("POST", "/embed") => {
            let texts = body["texts"].as_array().unwrap();
            if texts.len() > 4 {
                return (413, json!({"error": "batch too large"}).to_string());
            }
            let vectors: Vec<Vec<f32>> = texts.iter().map(|t| fake_vector(t.as_str().unwrap())).collect();
            (200, json!({"dim": 3, "vectors": vectors}).to_string())
        }
        ("POST", "/classify") => {
            let model = body.get("model_id").and_then(Value::as_str);
            if model.is_some_and(|m| m != "student-1") {
                return (404, json!({"error": "unknown model_id"}).to_string());
            }
            let labels: Vec<usize> = body["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| usize::from(t.as_str().unwrap().contains("bad")))
                .collect();
            (200, json!({ "labels": labels }).to_string())
        }
        ("POST", "/train") => (200, json!({"model_id": "student-1"}).to_string()),
        _ => (404, "{}".into()),
    }
}

fn sentences(texts: &[&str]) -> Vec<Sentence> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Sentence::new(i as u64, *t))
        .collect()
}

#[test]
fn healthz_reports_ok_and_failure() {
    let up = MockServer::start(sidecar);
    HttpBackend::new(up.config()).health_check().unwrap();
    assert_eq!(up.requests()[0].method, "GET");

    let down = MockServer::start(|_, _| (503, "\"loading\"".into()));
    let err = HttpBackend::new(down.config()).health_check().unwrap_err();
    assert!(err.to_string().contains("503"), "{err}");
}

#[test]
fn nli_request_shape_and_simplex_check() {
    let server = MockServer::start(sidecar);
    let backend = HttpBackend::new(server.config());
    let s = Sentence::new(7, "you people are awful");
    let got = backend.score(&s, &PromptTemplate::hate_speech()).unwrap();
    assert_eq!(got.entailment, (s.text.len() % 10) as f64 / 10.0);
    let req = &server.requests()[0];
    assert_eq!(req.path, "/nli");
    assert_eq!(
        req.body,
        json!({"premise": "you people are awful", "hypothesis": "This is a hate speech"})
    );

    let off = MockServer::start(|_, _| {
        (
            200,
            json!({"neutral": 0.5, "entailment": 0.5, "contradiction": 0.5}).to_string(),
        )
    });
    let err = HttpBackend::new(off.config())
        .score(&s, &PromptTemplate::hate_speech())
        .unwrap_err();
    assert!(matches!(err, Error::Backend { .. }), "{err}");
}

#[test]
fn empty_premise_is_a_client_error_without_retries() {
    let server = MockServer::start(sidecar);
    let err = HttpBackend::new(server.config())
        .score(&Sentence::new(0, ""), &PromptTemplate::news())
        .unwrap_err();
    match err {
        Error::Backend { retries, message } => {
            assert_eq!(retries, 0);
            assert!(message.contains("400"), "{message}");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(server.count("/nli"), 1);
}

#[test]
fn nli_batch_equals_single_calls() {
    let server = MockServer::start(sidecar);
    let backend = HttpBackend::new(server.config());
    let items = sentences(&[
        "a",
        "bb",
        "ccc",
        "a movie",
        "great acting",
        "dull plot",
        "the end",
        "x",
        "yy",
        "zzz",
    ]);
    let refs: Vec<&Sentence> = items.iter().collect();
    let prompt = PromptTemplate::movie_review();
    let batched = backend.score_batch(&refs, &prompt).unwrap();
    let single: Vec<EntailmentScores> = refs.iter().map(|s| backend.score(s, &prompt).unwrap()).collect();
    assert_eq!(batched, single);
    assert_eq!(server.count("/nli_batch"), 3);
    let first = server
        .requests()
        .into_iter()
        .find(|r| r.path == "/nli_batch")
        .unwrap();
    let pairs = first.body["pairs"].as_array().unwrap();
    assert!(pairs.len() <= 4);
    assert_eq!(pairs[0]["hypothesis"], "This is a movie review.");
}

#[test]
fn embed_batches_match_sequential_and_report_dim() {
    let server = MockServer::start(sidecar);
    let backend = HttpBackend::new(server.config());
    assert_eq!(backend.dim(), None);
    let items = sentences(&[
        "a good movie",
        "a great film",
        "stock prices fell",
        "a good movie",
        "rain",
        "sun",
    ]);
    let refs: Vec<&Sentence> = items.iter().collect();
    let batch = backend.embed_batch(&refs).unwrap();
    let seq: Vec<Embedding> = refs.iter().map(|s| backend.embed(s).unwrap()).collect();
    assert_eq!(batch, seq);
    assert_eq!(batch[0], batch[3]);
    assert_eq!(backend.dim(), Some(3));
    // The client never sends more than max_batch texts, so the 413 branch is unreachable.
    assert!(server
        .requests()
        .iter()
        .filter(|r| r.path == "/embed")
        .all(|r| r.body["texts"].as_array().unwrap().len() <= 4));
}

#[test]
fn embed_rejects_row_count_mismatch() {
    let server = MockServer::start(|_, _| (200, json!({"dim": 2, "vectors": [[1.0, 0.0]]}).to_string()));
    let items = sentences(&["one", "two"]);
    let refs: Vec<&Sentence> = items.iter().collect();
    let err = HttpBackend::new(server.config()).embed_batch(&refs).unwrap_err();
    assert!(err.to_string().contains("1 vectors for 2 texts"), "{err}");
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let server = MockServer::start(|req, nth| {
        if nth < 2 {
            (503, "{}".into())
        } else {
            sidecar(req, nth)
        }
    });
    let got = HttpBackend::new(server.config())
        .score(&Sentence::new(1, "abc"), &PromptTemplate::news())
        .unwrap();
    assert_eq!(got.entailment, 0.3);
    assert_eq!(server.count("/nli"), 3);
}

#[test]
fn retries_are_bounded() {
    let server = MockServer::start(|_, _| (500, "{}".into()));
    let config = HttpConfig {
        retries: 1,
        ..server.config()
    };
    match HttpBackend::new(config)
        .embed(&Sentence::new(0, "t"))
        .unwrap_err()
    {
        Error::Backend { retries, .. } => assert_eq!(retries, 1),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(server.count("/embed"), 2);
}

#[test]
fn classify_wire_shape_with_and_without_model_id() {
    let server = MockServer::start(sidecar);
    let store: SentenceSet = sentences(&["fine words", "bad words", "more bad", "calm"])
        .into_iter()
        .collect();
    let pool = QueryPool::new(vec![0, 1, 2, 3], Stage::Reduced).unwrap();

    let victim = RemoteVictim::new(server.config(), 2);
    let mut ledger = QueryLedger::new(4);
    let out = query_victim(&victim, &pool, &store, &mut ledger).unwrap();
    assert_eq!(out.iter().map(|r| r.label).collect::<Vec<_>>(), [0, 1, 1, 0]);
    assert_eq!(ledger.spent(), 4);
    let first = &server.requests()[0];
    assert_eq!(
        first.body,
        json!({"texts": ["fine words", "bad words", "more bad", "calm"]})
    );

    let named = RemoteVictim::new(server.config(), 2).with_model_id("student-1");
    let mut ledger = QueryLedger::new(4);
    query_victim(&named, &pool, &store, &mut ledger).unwrap();
    assert_eq!(server.requests().last().unwrap().body["model_id"], "student-1");

    let unknown = RemoteVictim::new(server.config(), 2).with_model_id("nope");
    let mut ledger = QueryLedger::new(4);
    let err = query_victim(&unknown, &pool, &store, &mut ledger).unwrap_err();
    assert!(err.to_string().contains("404"), "{err}");
    assert_eq!(ledger.spent(), 0);
}

#[test]
fn classify_out_of_range_label_is_rejected() {
    let server = MockServer::start(|_, _| (200, json!({"labels": [0, 5]}).to_string()));
    let store: SentenceSet = sentences(&["a", "b"]).into_iter().collect();
    let pool = QueryPool::new(vec![0, 1], Stage::Reduced).unwrap();
    let mut ledger = QueryLedger::new(2);
    assert!(query_victim(&RemoteVictim::new(server.config(), 2), &pool, &store, &mut ledger).is_err());
}

#[test]
fn train_sends_texts_and_hyperparameters() {
    let server = MockServer::start(sidecar);
    let store: SentenceSet = sentences(&["fine words", "bad words"]).into_iter().collect();
    let pairs = [
        LabeledPair {
            query_id: 0,
            label: 0,
        },
        LabeledPair {
            query_id: 1,
            label: 1,
        },
    ];
    let hyper = TrainHyper::default().with_seed(9);
    let id = ExternalTrainer::new(server.config())
        .train(&pairs, &store, &hyper)
        .unwrap();
    assert_eq!(id, "student-1");
    let req = &server.requests()[0];
    assert_eq!(req.path, "/train");
    assert_eq!(
        req.body["pairs"],
        json!([{"text": "fine words", "label": 0}, {"text": "bad words", "label": 1}])
    );
    assert_eq!(req.body["hyper"]["seed"], 9);
    assert_eq!(req.body["hyper"]["epochs"], hyper.epochs);
}

#[test]
fn sidecar_written_caches_load_exactly() {
    let dir = tempfile::tempdir().unwrap();
    // Score cache as a sidecar would emit it: one JSON object per line.
    let scores_path = dir.path().join("scores.jsonl");
    std::fs::write(
        &scores_path,
        "{\"id\":3,\"p_neutral\":0.1,\"p_entailment\":0.7,\"p_contradiction\":0.2}\n\
         {\"id\":1,\"p_neutral\":0.25,\"p_entailment\":0.5,\"p_contradiction\":0.25}\n",
    )
    .unwrap();
    let scores = read_score_cache(&scores_path).unwrap();
    assert_eq!(scores[&3].entailment, 0.7);
    assert_eq!(scores[&1].neutral, 0.25);
    let again = dir.path().join("again.jsonl");
    write_score_cache(&again, &scores).unwrap();
    assert_eq!(read_score_cache(&again).unwrap(), scores);

    // Embedding cache: magic, u32 dim, u64 count, then (u64 id, f32 * dim) records, little-endian.
    let mut bytes = b"MQEMB1\0\0".to_vec();
    bytes.extend(2u32.to_le_bytes());
    bytes.extend(2u64.to_le_bytes());
    for (id, v) in [(10u64, [0.5f32, -1.25]), (4, [3.0, 0.0])] {
        bytes.extend(id.to_le_bytes());
        for x in v {
            bytes.extend(x.to_le_bytes());
        }
    }
    let emb_path = dir.path().join("emb.bin");
    std::fs::write(&emb_path, &bytes).unwrap();
    let (dim, records) = read_embedding_cache(&emb_path).unwrap();
    assert_eq!(dim, 2);
    assert_eq!(records[0], (10, Embedding::new(vec![0.5, -1.25]).unwrap()));
    let rewritten = dir.path().join("emb2.bin");
    write_embedding_cache(&rewritten, dim, records.iter().map(|(id, e)| (*id, e))).unwrap();
    assert_eq!(std::fs::read(&rewritten).unwrap(), bytes);
}
