#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use failforge_core::episode::load_corpus;
use failforge_core::eval::Detector;
use failforge_core::gateway::{ChatBackend, ChatRequest, ChatResponse};
use failforge_core::protocol::DetectionQuery;
use failforge_core::{Episode, Result, Sample, Verdict};

pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn corpus_root() -> PathBuf {
    fixture_root().join("corpus")
}

pub fn corpus() -> Vec<Episode> {
    load_corpus(&corpus_root()).expect("fixture corpus loads")
}

/// Detector that answers with each sample's gold label.
pub fn gold_echo(samples: &[Sample]) -> impl Detector {
    let gold: BTreeMap<String, String> = samples
        .iter()
        .map(|s| {
            let l = s.label();
            (
                s.sample_id().to_string(),
                Verdict::answer_line(l.success(), l.category()),
            )
        })
        .collect();
    move |q: &DetectionQuery| -> Result<String> {
        Ok(gold[q.sample_id.as_deref().expect("harness sets sample_id")].clone())
    }
}

/// In-process backend with a fixed reply.
pub struct FixedBackend {
    pub reply: String,
    pub reachable: bool,
    pub calls: AtomicUsize,
}

impl FixedBackend {
    pub fn new(reply: &str) -> Self {
        FixedBackend {
            reply: reply.to_string(),
            reachable: true,
            calls: AtomicUsize::new(0),
        }
    }
}

impl ChatBackend for FixedBackend {
    fn complete(&self, _req: &ChatRequest) -> Result<ChatResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(ChatResponse::from_text(self.reply.clone()))
    }

    fn probe(&self) -> bool {
        self.reachable
    }
}

pub struct Reply {
    pub status: u16,
    pub body: String,
}

type Responder = dyn Fn(usize, &str) -> Reply + Send + Sync;

/// Minimal HTTP/1.1 upstream speaking the chat-completion wire format.
pub struct StubUpstream {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
    pub max_concurrent: Arc<AtomicUsize>,
    pub bodies: Arc<Mutex<Vec<String>>>,
    stop: Arc<AtomicBool>,
}

pub fn completion_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 3, "total_tokens": 13}
    })
    .to_string()
}

impl StubUpstream {
    /// `respond(hit_index, request_body)` decides each reply; `latency` is
    /// added before replying.
    pub fn start(latency: Duration, respond: impl Fn(usize, &str) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        let max_concurrent = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let respond: Arc<Responder> = Arc::new(respond);
        {
            let (hits, current, max_concurrent, bodies, stop) = (
                hits.clone(),
                current.clone(),
                max_concurrent.clone(),
                bodies.clone(),
                stop.clone(),
            );
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let (hits, current, max_concurrent, bodies, respond) = (
                        hits.clone(),
                        current.clone(),
                        max_concurrent.clone(),
                        bodies.clone(),
                        respond.clone(),
                    );
                    thread::spawn(move || {
                        let _ = serve_one(stream, latency, &hits, &current, &max_concurrent, &bodies, &*respond);
                    });
                }
            });
        }
        StubUpstream {
            url,
            hits,
            max_concurrent,
            bodies,
            stop,
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubUpstream {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let addr = self
            .url
            .trim_start_matches("http://")
            .trim_end_matches("/v1")
            .to_string();
        let _ = TcpStream::connect(addr);
    }
}

fn serve_one(
    stream: TcpStream,
    latency: Duration,
    hits: &AtomicUsize,
    current: &AtomicUsize,
    max_concurrent: &AtomicUsize,
    bodies: &Mutex<Vec<String>>,
    respond: &Responder,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let body = String::from_utf8_lossy(&body).to_string();

    let reply = if request_line.starts_with("GET") {
        Reply {
            status: 200,
            body: r#"{"data":[]}"#.into(),
        }
    } else {
        let n = current.fetch_add(1, Ordering::SeqCst) + 1;
        max_concurrent.fetch_max(n, Ordering::SeqCst);
        let index = hits.fetch_add(1, Ordering::SeqCst);
        bodies.lock().unwrap().push(body.clone());
        thread::sleep(latency);
        let reply = respond(index, &body);
        current.fetch_sub(1, Ordering::SeqCst);
        reply
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    )?;
    stream.flush()
}

/// Stand-in for the simulator adapter: one directive per (sim episode, seed)
/// and a rollout manifest echoing its id, ingested as a failure sample.
pub fn sim_rollouts(corpus: &[Episode], seeds: std::ops::Range<u64>) -> Vec<failforge_core::ExecutionSample> {
    use failforge_core::exec_perturb::{emit_sim_directive, sample_from_rollout, DirectiveConfig};
    use failforge_core::Source;
    let cfg = DirectiveConfig::default();
    let mut out = Vec::new();
    for ep in corpus.iter().filter(|e| e.source == Source::Sim) {
        for seed in seeds.clone() {
            let d = emit_sim_directive(ep, seed, &cfg).expect("sim directive");
            let mut rollout = ep.clone();
            rollout
                .extensions
                .insert("directive_id".into(), serde_json::json!(d.directive_id()));
            rollout
                .extensions
                .insert("subtask_index".into(), serde_json::json!(d.subtask_index));
            out.push(sample_from_rollout(&d, &rollout).expect("rollout ingests"));
        }
    }
    out
}

/// Generated planning and execution samples over the fixture corpus.
pub fn balanced_split(seed: u64, n_plan: usize, n_exec: usize) -> Vec<Sample> {
    use failforge_core::exec_perturb::generate_execution_samples;
    use failforge_core::plan_perturb::generate_planning_samples;
    use failforge_core::{GenConfig, Lexicon};
    let corpus = corpus();
    let lex = Lexicon::seed();
    let rollouts = sim_rollouts(&corpus, 0..40);
    let mut out: Vec<Sample> = generate_planning_samples(&corpus, &GenConfig::new(seed, n_plan), &lex, None)
        .expect("planning samples")
        .into_iter()
        .map(Sample::from)
        .collect();
    out.extend(
        generate_execution_samples(&corpus, &GenConfig::new(seed, n_exec), &lex, None, &rollouts)
            .expect("execution samples")
            .into_iter()
            .map(Sample::from),
    );
    out
}

/// Attaches a label-consistent trace to every sample.
pub fn with_gold_cot(mut samples: Vec<Sample>) -> Vec<Sample> {
    for s in &mut samples {
        let l = s.label();
        let cot = format!(
            "The images show the scene before and after.\nThe outcome matches the label.\n{}",
            Verdict::answer_line(l.success(), l.category())
        );
        s.set_cot(Some(cot));
    }
    samples
}
