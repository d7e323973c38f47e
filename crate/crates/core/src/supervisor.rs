//! Weak-supervisor access: a chat-completion HTTP client with bounded
//! parallelism and retries, a seeded simulator for hermetic runs, and a
//! scripted in-process mock server for tests.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::variation::{question_rng, Gold, Paraphraser, PromptVariant, Question, QuestionKind, VariationError};

pub const DEFAULT_API_KEY_ENV: &str = "W2S_API_KEY";
const BACKOFF_BASE: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("question {0} has no gold answer")]
    MissingGold(String),
    #[error("simulator supports multiple-choice questions only, got {0}")]
    UnsupportedKind(String),
    #[error("question {0} referenced by variants but not provided")]
    UnknownQuestion(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("could not bind mock server port: {0}")]
    PortUnavailable(String),
    #[error("http client error: {0}")]
    Client(String),
}

impl SupervisorError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::MissingGold(_) => "MissingGold",
            Self::UnsupportedKind(_) => "UnsupportedKind",
            Self::UnknownQuestion(_) => "UnknownQuestion",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::PortUnavailable(_) => "PortUnavailable",
            Self::Client(_) => "Client",
        }
    }
}

/// Connection settings for an OpenAI-compatible chat-completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. An absent or
    /// empty variable sends no Authorization header (local servers).
    pub api_key_source: String,
    pub max_parallel_requests: usize,
    pub timeout_secs: f64,
    pub retries: u32,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_source: DEFAULT_API_KEY_ENV.to_string(),
            max_parallel_requests: 8,
            timeout_secs: 60.0,
            retries: 3,
        }
    }

    fn validate(&self) -> Result<(), SupervisorError> {
        if self.max_parallel_requests < 1 {
            return Err(SupervisorError::InvalidConfig(
                "max_parallel_requests must be at least 1".into(),
            ));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(SupervisorError::InvalidConfig("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Simulator settings: each question draws a latent competence from
/// `Beta(alpha, beta)`; each variant answers correctly with probability
/// `competence * (1 - variant_sensitivity)`, otherwise uniformly wrong.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatedSupervisorConfig {
    pub seed: u64,
    pub competence_alpha: f64,
    pub competence_beta: f64,
    pub variant_sensitivity: f64,
    /// When set, every question uses this competence instead of a Beta draw.
    pub fixed_competence: Option<f64>,
}

impl Default for SimulatedSupervisorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            competence_alpha: 4.0,
            competence_beta: 2.0,
            variant_sensitivity: 0.1,
            fixed_competence: None,
        }
    }
}

/// One verbatim supervisor reply for one prompt variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnswer {
    pub question_id: String,
    pub variant_index: usize,
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    HttpError,
    Timeout,
    MalformedResponse,
}

/// Explicit record for a variant whose request failed after all retries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryFailure {
    pub question_id: String,
    pub variant_index: usize,
    pub kind: FailureKind,
    pub message: String,
    pub attempt_count: u32,
}

#[derive(Debug, Default)]
pub struct QueryOutput {
    pub answers: Vec<RawAnswer>,
    pub failures: Vec<QueryFailure>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

enum AttemptError {
    Http(String),
    Timeout(String),
    Malformed(String),
}

impl AttemptError {
    fn kind(&self) -> FailureKind {
        match self {
            Self::Http(_) => FailureKind::HttpError,
            Self::Timeout(_) => FailureKind::Timeout,
            Self::Malformed(_) => FailureKind::MalformedResponse,
        }
    }
    fn message(&self) -> &str {
        match self {
            Self::Http(m) | Self::Timeout(m) | Self::Malformed(m) => m,
        }
    }
}

fn attempt_chat(
    client: &reqwest::blocking::Client,
    cfg: &EndpointConfig,
    api_key: &str,
    prompt: &str,
) -> Result<String, AttemptError> {
    let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
    let body = ChatRequest {
        model: &cfg.model_name,
        messages: [ChatMessage { role: "user", content: prompt }],
        // Answer diversity comes from prompt variation, not sampling.
        temperature: 0.0,
    };
    let mut req = client.post(url).json(&body);
    if !api_key.is_empty() {
        req = req.bearer_auth(api_key);
    }
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            AttemptError::Timeout(e.to_string())
        } else {
            AttemptError::Http(e.to_string())
        }
    })?;
    let status = resp.status();
    if !status.is_success() {
        return Err(AttemptError::Http(format!("status {}", status.as_u16())));
    }
    let parsed: ChatResponse = resp
        .json()
        .map_err(|e| AttemptError::Malformed(e.to_string()))?;
    parsed
        .choices
        .first()
        .and_then(|c| c.message.content.clone())
        .filter(|c| !c.is_empty())
        .ok_or_else(|| AttemptError::Malformed("no extractable text in response".into()))
}

fn attempt_with_retries(
    client: &reqwest::blocking::Client,
    cfg: &EndpointConfig,
    api_key: &str,
    prompt: &str,
) -> (Result<String, AttemptError>, u32) {
    let max_attempts = cfg.retries + 1;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match attempt_chat(client, cfg, api_key, prompt) {
            Ok(text) => return (Ok(text), attempt),
            Err(e) if attempt < max_attempts => {
                tracing::debug!(attempt, error = e.message(), "request failed, retrying");
                std::thread::sleep(BACKOFF_BASE * 2u32.pow(attempt - 1));
            }
            Err(e) => return (Err(e), attempt),
        }
    }
}

/// Sends one prompt variant per request, at most `max_parallel_requests` in
/// flight, retrying with exponential backoff. The output is sorted by
/// (question_id, variant_index); a variant that still fails after all retries
/// becomes an explicit failure record, never a silently missing answer.
pub fn query_supervisor(
    variants: &[PromptVariant],
    cfg: &EndpointConfig,
) -> Result<QueryOutput, SupervisorError> {
    cfg.validate()?;
    if variants.is_empty() {
        return Ok(QueryOutput::default());
    }
    let api_key = std::env::var(&cfg.api_key_source).unwrap_or_default();
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(cfg.timeout_secs))
        .build()
        .map_err(|e| SupervisorError::Client(e.to_string()))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<RawAnswer, QueryFailure>>> =
        Mutex::new(Vec::with_capacity(variants.len()));
    let workers = cfg.max_parallel_requests.min(variants.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(variant) = variants.get(i) else { break };
                let started = Instant::now();
                let (outcome, attempts) =
                    attempt_with_retries(&client, cfg, &api_key, &variant.rendered_prompt);
                let latency_ms = started.elapsed().as_millis() as u64;
                let record = match outcome {
                    Ok(text) => Ok(RawAnswer {
                        question_id: variant.question_id.clone(),
                        variant_index: variant.variant_index,
                        text,
                        latency_ms,
                        attempt_count: attempts,
                    }),
                    Err(e) => Err(QueryFailure {
                        question_id: variant.question_id.clone(),
                        variant_index: variant.variant_index,
                        kind: e.kind(),
                        message: e.message().to_string(),
                        attempt_count: attempts,
                    }),
                };
                results.lock().unwrap().push(record);
            });
        }
    });

    let mut output = QueryOutput::default();
    for record in results.into_inner().unwrap() {
        match record {
            Ok(a) => output.answers.push(a),
            Err(f) => output.failures.push(f),
        }
    }
    output
        .answers
        .sort_by(|a, b| (&a.question_id, a.variant_index).cmp(&(&b.question_id, b.variant_index)));
    output
        .failures
        .sort_by(|a, b| (&a.question_id, a.variant_index).cmp(&(&b.question_id, b.variant_index)));
    Ok(output)
}

/// One-shot text completion with the same retry policy as `query_supervisor`.
pub fn chat_completion_text(cfg: &EndpointConfig, prompt: &str) -> Result<String, SupervisorError> {
    cfg.validate()?;
    let api_key = std::env::var(&cfg.api_key_source).unwrap_or_default();
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(cfg.timeout_secs))
        .build()
        .map_err(|e| SupervisorError::Client(e.to_string()))?;
    let (outcome, _) = attempt_with_retries(&client, cfg, &api_key, prompt);
    outcome.map_err(|e| SupervisorError::Client(e.message().to_string()))
}

/// Paraphrase provider backed by the chat-completion endpoint: one rewrite
/// request per variant.
#[derive(Debug, Clone)]
pub struct HttpParaphraser {
    pub cfg: EndpointConfig,
}

impl Paraphraser for HttpParaphraser {
    fn paraphrase(
        &self,
        stem: &str,
        n: usize,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<String>, VariationError> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let prompt = format!(
                "Rewrite the question below so the wording differs but the meaning stays exactly the same. \
                 Produce rewrite number {} and reply with only the rewritten question.\n\n{stem}",
                i + 1
            );
            let text = chat_completion_text(&self.cfg, &prompt)
                .map_err(|e| VariationError::ProviderUnavailable(e.to_string()))?;
            out.push(text.trim().to_string());
        }
        Ok(out)
    }
}

/// Deterministic stand-in for a weak supervisor over multiple-choice
/// questions with gold answers. Each question draws its competence once; each
/// variant then answers with the gold answer's displayed letter or a
/// uniformly random wrong displayed letter.
pub fn simulate_supervisor(
    variants: &[PromptVariant],
    questions: &[Question],
    cfg: &SimulatedSupervisorConfig,
) -> Result<Vec<RawAnswer>, SupervisorError> {
    let question_index: BTreeMap<&str, &Question> =
        questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut by_question: BTreeMap<&str, Vec<&PromptVariant>> = BTreeMap::new();
    for v in variants {
        by_question.entry(v.question_id.as_str()).or_default().push(v);
    }

    let beta = rand_distr::Beta::new(cfg.competence_alpha, cfg.competence_beta)
        .map_err(|e| SupervisorError::InvalidConfig(format!("bad Beta parameters: {e}")))?;

    let mut answers = Vec::with_capacity(variants.len());
    for (qid, mut q_variants) in by_question {
        let question = question_index
            .get(qid)
            .ok_or_else(|| SupervisorError::UnknownQuestion(qid.to_string()))?;
        if question.kind != QuestionKind::MultipleChoice {
            return Err(SupervisorError::UnsupportedKind(qid.to_string()));
        }
        let gold_index = match &question.gold {
            Some(Gold::Index(i)) => *i,
            _ => return Err(SupervisorError::MissingGold(qid.to_string())),
        };
        q_variants.sort_by_key(|v| v.variant_index);

        let mut rng = question_rng(cfg.seed, qid, "sim");
        let competence = cfg
            .fixed_competence
            .unwrap_or_else(|| beta.sample(&mut rng))
            .clamp(0.0, 1.0);
        let p_correct = competence * (1.0 - cfg.variant_sensitivity);

        for variant in q_variants {
            let letters: Vec<&String> = variant.decode_map.keys().collect();
            let gold_letter = variant
                .decode_map
                .iter()
                .find(|(_, &idx)| idx == gold_index)
                .map(|(l, _)| l.clone())
                .ok_or_else(|| SupervisorError::MissingGold(qid.to_string()))?;
            let text = if rng.random::<f64>() < p_correct {
                gold_letter
            } else {
                let wrong: Vec<&&String> = letters.iter().filter(|l| ***l != gold_letter).collect();
                wrong[rng.random_range(0..wrong.len())].to_string()
            };
            answers.push(RawAnswer {
                question_id: qid.to_string(),
                variant_index: variant.variant_index,
                text,
                latency_ms: 0,
                attempt_count: 1,
            });
        }
    }
    Ok(answers)
}

/// Scripted behavior of the mock server, replayed per request in arrival
/// order; after the script is exhausted the last behavior repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockBehavior {
    Reply { text: String },
    Fail { status: u16 },
    DelayReply { delay_ms: u64, text: String },
}

#[derive(Debug, Default)]
pub struct MockStats {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    requests: AtomicUsize,
}

impl MockStats {
    fn enter(&self) -> usize {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        now
    }
    fn exit(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct MockServerHandle {
    addr: std::net::SocketAddr,
    stats: Arc<MockStats>,
    shutdown: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl MockServerHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    /// Highest number of requests that were in flight simultaneously.
    pub fn max_in_flight(&self) -> usize {
        self.stats.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn request_count(&self) -> usize {
        self.stats.requests.load(Ordering::SeqCst)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = std::net::TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }

    /// Blocks until the server is stopped externally (foreground serving).
    pub fn join(mut self) {
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for MockServerHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.shutdown_now();
        }
    }
}

/// Starts the scripted chat-completion mock on an OS-assigned local port.
pub fn run_mock_server(script: Vec<MockBehavior>) -> Result<MockServerHandle, SupervisorError> {
    run_mock_server_on(0, script)
}

/// Starts the mock on an explicit port (0 = OS-assigned).
pub fn run_mock_server_on(
    port: u16,
    script: Vec<MockBehavior>,
) -> Result<MockServerHandle, SupervisorError> {
    if script.is_empty() {
        return Err(SupervisorError::InvalidConfig("mock script must not be empty".into()));
    }
    let listener = std::net::TcpListener::bind(("127.0.0.1", port))
        .map_err(|e| SupervisorError::PortUnavailable(e.to_string()))?;
    let addr = listener
        .local_addr()
        .map_err(|e| SupervisorError::PortUnavailable(e.to_string()))?;
    let stats = Arc::new(MockStats::default());
    let shutdown = Arc::new(AtomicBool::new(false));
    let script = Arc::new(script);
    let cursor = Arc::new(AtomicUsize::new(0));

    let thread_stats = Arc::clone(&stats);
    let thread_shutdown = Arc::clone(&shutdown);
    let join = std::thread::spawn(move || {
        let mut handlers = Vec::new();
        for stream in listener.incoming() {
            if thread_shutdown.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let stats = Arc::clone(&thread_stats);
            let script = Arc::clone(&script);
            let cursor = Arc::clone(&cursor);
            handlers.push(std::thread::spawn(move || {
                handle_connection(stream, &stats, &script, &cursor);
            }));
        }
        for h in handlers {
            let _ = h.join();
        }
    });

    Ok(MockServerHandle {
        addr,
        stats,
        shutdown,
        join: Some(join),
    })
}

fn handle_connection(
    mut stream: std::net::TcpStream,
    stats: &MockStats,
    script: &[MockBehavior],
    cursor: &AtomicUsize,
) {
    use std::io::{BufRead, BufReader, Read, Write};

    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() || request_line.trim().is_empty() {
        return;
    }
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        match reader.read_line(&mut line) {
            Ok(0) => break,
            Ok(_) => {
                let line = line.trim();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
            Err(_) => return,
        }
    }
    let mut body = vec![0u8; content_length];
    if content_length > 0 && reader.read_exact(&mut body).is_err() {
        return;
    }

    stats.enter();
    let step = cursor.fetch_add(1, Ordering::SeqCst).min(script.len() - 1);
    let (status, reason, payload) = match &script[step] {
        MockBehavior::Reply { text } => (200, "OK", chat_completion_body(text)),
        MockBehavior::Fail { status } => (
            *status,
            "Error",
            r#"{"error":{"message":"scripted failure"}}"#.to_string(),
        ),
        MockBehavior::DelayReply { delay_ms, text } => {
            std::thread::sleep(Duration::from_millis(*delay_ms));
            (200, "OK", chat_completion_body(text))
        }
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.flush();
    stats.exit();
}

fn chat_completion_body(text: &str) -> String {
    serde_json::json!({
        "id": "mock-chat-completion",
        "object": "chat.completion",
        "model": "mock",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": "stop"
        }]
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{canonicalize, CanonicalValue};
    use crate::variation::{generate_choice_permutations, VariationPlan};

    fn mc_question(id: &str, gold: usize) -> Question {
        Question {
            id: id.into(),
            kind: QuestionKind::MultipleChoice,
            stem: format!("stem {id}"),
            choices: (0..4).map(|i| format!("choice-{i}")).collect(),
            gold: Some(Gold::Index(gold)),
            subject: None,
        }
    }

    fn variants_for(questions: &[Question], n: usize, seed: u64) -> Vec<PromptVariant> {
        let plan = VariationPlan { n_variants: n, seed, ..Default::default() };
        questions
            .iter()
            .flat_map(|q| generate_choice_permutations(q, &plan).unwrap())
            .collect()
    }

    fn endpoint(url: &str) -> EndpointConfig {
        EndpointConfig {
            timeout_secs: 10.0,
            retries: 0,
            api_key_source: "W2S_TEST_NO_SUCH_KEY".into(),
            ..EndpointConfig::new(url, "mock-model")
        }
    }

    #[test]
    fn empty_variant_list_yields_empty_output() {
        let cfg = endpoint("http://127.0.0.1:1");
        let out = query_supervisor(&[], &cfg).unwrap();
        assert!(out.answers.is_empty() && out.failures.is_empty());
    }

    #[test]
    fn mock_echo_answers_every_variant() {
        let server = run_mock_server(vec![MockBehavior::Reply { text: "B".into() }]).unwrap();
        let questions = vec![mc_question("q1", 0)];
        let variants = variants_for(&questions, 5, 3);
        let out = query_supervisor(&variants, &endpoint(&server.base_url())).unwrap();
        assert_eq!(out.answers.len(), 5);
        assert!(out.failures.is_empty());
        for a in &out.answers {
            assert_eq!(a.text, "B");
            assert_eq!(a.attempt_count, 1);
        }
        // Sorted by (question_id, variant_index).
        let idx: Vec<usize> = out.answers.iter().map(|a| a.variant_index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        server.stop();
    }

    #[test]
    fn mock_scripted_failure_sequence_then_success() {
        let server = run_mock_server(vec![
            MockBehavior::Fail { status: 500 },
            MockBehavior::Fail { status: 500 },
            MockBehavior::Reply { text: "B".into() },
        ])
        .unwrap();
        let questions = vec![mc_question("q1", 0)];
        let variants = variants_for(&questions, 1, 0);
        let mut cfg = endpoint(&server.base_url());
        cfg.retries = 3;
        let out = query_supervisor(&variants, &cfg).unwrap();
        assert_eq!(out.answers.len(), 1);
        assert_eq!(out.answers[0].attempt_count, 3);
        server.stop();
    }

    #[test]
    fn scripted_failure_becomes_explicit_record() {
        let server = run_mock_server(vec![MockBehavior::Fail { status: 503 }]).unwrap();
        let questions = vec![mc_question("q1", 0)];
        let variants = variants_for(&questions, 2, 0);
        let out = query_supervisor(&variants, &endpoint(&server.base_url())).unwrap();
        assert!(out.answers.is_empty());
        assert_eq!(out.failures.len(), 2);
        for f in &out.failures {
            assert_eq!(f.kind, FailureKind::HttpError);
            assert_eq!(f.attempt_count, 1);
        }
        server.stop();
    }

    #[test]
    fn delayed_reply_past_timeout_reports_timeout() {
        let server = run_mock_server(vec![MockBehavior::DelayReply {
            delay_ms: 2000,
            text: "A".into(),
        }])
        .unwrap();
        let questions = vec![mc_question("q1", 0)];
        let variants = variants_for(&questions, 1, 0);
        let mut cfg = endpoint(&server.base_url());
        cfg.timeout_secs = 1.0;
        let out = query_supervisor(&variants, &cfg).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].kind, FailureKind::Timeout);
        server.stop();
    }

    #[test]
    fn simulator_with_full_competence_always_answers_gold() {
        let questions: Vec<Question> = (0..20).map(|i| mc_question(&format!("q{i:02}"), i % 4)).collect();
        let variants = variants_for(&questions, 5, 1);
        let cfg = SimulatedSupervisorConfig {
            fixed_competence: Some(1.0),
            variant_sensitivity: 0.0,
            ..Default::default()
        };
        let answers = simulate_supervisor(&variants, &questions, &cfg).unwrap();
        assert_eq!(answers.len(), variants.len());
        let by_key: BTreeMap<(String, usize), &PromptVariant> = variants
            .iter()
            .map(|v| ((v.question_id.clone(), v.variant_index), v))
            .collect();
        let qmap: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
        for a in &answers {
            let v = by_key[&(a.question_id.clone(), a.variant_index)];
            let q = qmap[a.question_id.as_str()];
            let gold = match q.gold { Some(Gold::Index(i)) => i, _ => unreachable!() };
            assert_eq!(canonicalize(a, q, v).value, CanonicalValue::Choice(gold));
        }
    }

    #[test]
    fn simulator_with_zero_competence_never_answers_gold() {
        let questions: Vec<Question> = (0..20).map(|i| mc_question(&format!("q{i:02}"), i % 4)).collect();
        let variants = variants_for(&questions, 5, 2);
        let cfg = SimulatedSupervisorConfig {
            fixed_competence: Some(0.0),
            ..Default::default()
        };
        let answers = simulate_supervisor(&variants, &questions, &cfg).unwrap();
        let by_key: BTreeMap<(String, usize), &PromptVariant> = variants
            .iter()
            .map(|v| ((v.question_id.clone(), v.variant_index), v))
            .collect();
        let qmap: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
        for a in &answers {
            let v = by_key[&(a.question_id.clone(), a.variant_index)];
            let q = qmap[a.question_id.as_str()];
            let gold = match q.gold { Some(Gold::Index(i)) => i, _ => unreachable!() };
            assert_ne!(canonicalize(a, q, v).value, CanonicalValue::Choice(gold));
        }
    }

    #[test]
    fn simulator_is_deterministic() {
        let questions: Vec<Question> = (0..10).map(|i| mc_question(&format!("q{i:02}"), i % 4)).collect();
        let variants = variants_for(&questions, 5, 7);
        let cfg = SimulatedSupervisorConfig { seed: 99, ..Default::default() };
        let a = simulate_supervisor(&variants, &questions, &cfg).unwrap();
        let b = simulate_supervisor(&variants, &questions, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulator_requires_gold_and_multiple_choice() {
        let mut q = mc_question("q1", 0);
        q.gold = None;
        let variants = variants_for(&[mc_question("q1", 0)], 2, 0);
        let err = simulate_supervisor(&variants, &[q], &Default::default()).unwrap_err();
        assert!(matches!(err, SupervisorError::MissingGold(_)));

        let gen = Question {
            id: "g1".into(),
            kind: QuestionKind::Generation,
            stem: "stem".into(),
            choices: vec![],
            gold: Some(Gold::Text("1".into())),
            subject: None,
        };
        let gv = PromptVariant {
            question_id: "g1".into(),
            variant_index: 0,
            rendered_prompt: "p".into(),
            decode_map: BTreeMap::new(),
        };
        let err = simulate_supervisor(&[gv], &[gen], &Default::default()).unwrap_err();
        assert!(matches!(err, SupervisorError::UnsupportedKind(_)));
    }

    // Marginal accuracy of the simulator approaches E[competence] * (1 - s):
    // Beta(4,2) mean 2/3 and s = 0.1 give 0.6.
    #[test]
    fn simulator_marginal_accuracy_matches_expectation() {
        let questions: Vec<Question> =
            (0..2000).map(|i| mc_question(&format!("q{i:05}"), i % 4)).collect();
        let variants = variants_for(&questions, 5, 0);
        let qmap: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
        let by_key: BTreeMap<(String, usize), &PromptVariant> = variants
            .iter()
            .map(|v| ((v.question_id.clone(), v.variant_index), v))
            .collect();
        for seed in 0..10u64 {
            let cfg = SimulatedSupervisorConfig { seed, ..Default::default() };
            let answers = simulate_supervisor(&variants, &questions, &cfg).unwrap();
            let mut correct = 0usize;
            for a in &answers {
                let v = by_key[&(a.question_id.clone(), a.variant_index)];
                let q = qmap[a.question_id.as_str()];
                let gold = match q.gold { Some(Gold::Index(i)) => i, _ => unreachable!() };
                if canonicalize(a, q, v).value == CanonicalValue::Choice(gold) {
                    correct += 1;
                }
            }
            let acc = correct as f64 / answers.len() as f64;
            assert!((acc - 0.6).abs() <= 0.03, "seed {seed}: accuracy {acc}");
        }
    }

    #[test]
    fn mock_repeats_last_behavior() {
        let server = run_mock_server(vec![
            MockBehavior::Reply { text: "first".into() },
            MockBehavior::Reply { text: "rest".into() },
        ])
        .unwrap();
        let questions = vec![mc_question("q1", 0)];
        let variants = variants_for(&questions, 4, 0);
        let mut cfg = endpoint(&server.base_url());
        cfg.max_parallel_requests = 1; // serial, so script order maps to variant order
        let out = query_supervisor(&variants, &cfg).unwrap();
        assert_eq!(out.answers[0].text, "first");
        for a in &out.answers[1..] {
            assert_eq!(a.text, "rest");
        }
        server.stop();
    }

    #[test]
    fn http_paraphraser_rewrites_through_the_endpoint() {
        use crate::variation::{generate_paraphrases, ParaphraseSource};
        let server = run_mock_server(vec![MockBehavior::Reply {
            text: "How many pens does Anna hold in total?".into(),
        }])
        .unwrap();
        let question = Question {
            id: "g1".into(),
            kind: QuestionKind::Generation,
            stem: "Anna has 3 boxes with 4 pens each. How many pens does she have?".into(),
            choices: vec![],
            gold: Some(Gold::Text("12".into())),
            subject: None,
        };
        let plan = crate::variation::VariationPlan {
            n_variants: 2,
            seed: 0,
            paraphrase_source: ParaphraseSource::ExternalProvider,
        };
        let provider = HttpParaphraser { cfg: endpoint(&server.base_url()) };
        let variants = generate_paraphrases(&question, &plan, &provider).unwrap();
        assert_eq!(variants.len(), 2);
        assert!(variants[0].rendered_prompt.contains(&question.stem));
        assert!(variants[1]
            .rendered_prompt
            .contains("How many pens does Anna hold in total?"));
        server.stop();

        // A dead endpoint surfaces as ProviderUnavailable.
        let provider = HttpParaphraser {
            cfg: endpoint("http://127.0.0.1:9"),
        };
        let err = generate_paraphrases(&question, &plan, &provider).unwrap_err();
        assert!(matches!(err, VariationError::ProviderUnavailable(_)));
    }

    #[test]
    fn explicit_port_conflict_reports_port_unavailable() {
        let server = run_mock_server(vec![MockBehavior::Reply { text: "A".into() }]).unwrap();
        let port = server.addr().port();
        let err = run_mock_server_on(port, vec![MockBehavior::Reply { text: "A".into() }]);
        assert!(matches!(err, Err(SupervisorError::PortUnavailable(_))));
        server.stop();
    }
}
