//! Opinion generation: attach a polarity prompt to a corrupted sentence, fill
//! the masks through an [`InfillBackend`], then strip the prompt again.

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Polarity;
use crate::corruption::CorruptedSample;
use crate::lexicon::Lexicon;
use crate::seeding::derive_seed;

const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.tsv");
pub const PROMPT_SEPARATOR: &str = ", ";
pub const DEFAULT_MAX_WORDS_PER_MASK: usize = 3;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("corrupted sample has no mask spans")]
    NothingToGenerate,
    #[error("text contains no mask sentinel {0:?}")]
    NoSentinel(String),
    #[error("infill transport failure: {0}")]
    Transport(String),
    #[error("backend {backend} returned malformed output: {reason}")]
    MalformedBackend { backend: String, reason: String },
    #[error("template file line {line}: {reason}")]
    TemplateParse { line: usize, reason: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GenerationError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GenerationError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub polarity: Polarity,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn bundled() -> Self {
        Self::parse(DEFAULT_TEMPLATES, "<mask>").expect("bundled templates are valid")
    }

    pub fn load(path: &Path, mask_token: &str) -> Result<Self, GenerationError> {
        let text = std::fs::read_to_string(path).map_err(|source| GenerationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, mask_token)
    }

    /// One `polarity<TAB>pattern` per line. Ids are `<polarity>-<n>` with `n`
    /// counting from 1 within each polarity.
    pub fn parse(text: &str, mask_token: &str) -> Result<Self, GenerationError> {
        let mut templates = Vec::new();
        let mut counters = [0usize; 3];
        for (idx, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let err = |reason: String| GenerationError::TemplateParse { line: idx + 1, reason };
            let (pol, pattern) = raw
                .split_once('\t')
                .ok_or_else(|| err("expected `polarity<TAB>pattern`".into()))?;
            let polarity: Polarity = pol.trim().parse().map_err(|e| err(format!("{e}")))?;
            let pattern = pattern.trim().to_string();
            if pattern.is_empty() {
                return Err(err("empty pattern".into()));
            }
            if pattern.contains(mask_token) {
                return Err(err("pattern contains the mask sentinel".into()));
            }
            counters[polarity.index()] += 1;
            templates.push(PromptTemplate {
                id: format!("{}-{}", polarity, counters[polarity.index()]),
                polarity,
                pattern,
            });
        }
        Ok(Self { templates })
    }

    pub fn all(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn for_polarity(&self, polarity: Polarity) -> Vec<&PromptTemplate> {
        self.templates.iter().filter(|t| t.polarity == polarity).collect()
    }
}

/// `rendered corrupted sentence + ", " + pattern`.
pub fn attach_prompt(
    corrupted: &CorruptedSample,
    template: &PromptTemplate,
    mask_token: &str,
) -> Result<String, GenerationError> {
    if corrupted.mask_spans.is_empty() {
        return Err(GenerationError::NothingToGenerate);
    }
    Ok(format!(
        "{}{PROMPT_SEPARATOR}{}",
        corrupted.render(mask_token),
        template.pattern
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillRequest {
    pub text: String,
    pub mask_token: String,
    pub max_words_per_mask: usize,
    pub hint_polarity: Polarity,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillResponse {
    pub text: String,
}

/// Replaces every mask sentinel in a text with 1 to `max_words_per_mask`
/// words, leaving all other characters untouched.
pub trait InfillBackend: Send + Sync {
    fn name(&self) -> &str;

    fn is_deterministic(&self) -> bool;

    fn fill(&self, request: &InfillRequest) -> Result<String, GenerationError>;
}

/// Calls `backend` and checks the pre- and postconditions of the infill
/// contract.
pub fn infill(backend: &dyn InfillBackend, request: &InfillRequest) -> Result<String, GenerationError> {
    if request.mask_token.is_empty() || !request.text.contains(&request.mask_token) {
        return Err(GenerationError::NoSentinel(request.mask_token.clone()));
    }
    let out = backend.fill(request)?;
    if out.contains(&request.mask_token) {
        return Err(GenerationError::MalformedBackend {
            backend: backend.name().to_string(),
            reason: "mask sentinels remain in the output".into(),
        });
    }
    Ok(out)
}

/// Fills each sentinel with words drawn from the lexicon of the hinted
/// polarity. Pure function of the request.
#[derive(Debug, Clone)]
pub struct LexiconBackend {
    lexicon: Lexicon,
}

impl LexiconBackend {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }
}

impl InfillBackend for LexiconBackend {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn fill(&self, request: &InfillRequest) -> Result<String, GenerationError> {
        let words = self.lexicon.words(request.hint_polarity);
        let max = request.max_words_per_mask.clamp(1, DEFAULT_MAX_WORDS_PER_MASK);
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let pieces: Vec<&str> = request.text.split(request.mask_token.as_str()).collect();
        let mut out = String::with_capacity(request.text.len());
        for (i, piece) in pieces.iter().enumerate() {
            out.push_str(piece);
            if i + 1 < pieces.len() {
                let n = rng.gen_range(1..=max);
                let fill: Vec<&str> = words.choose_multiple(&mut rng, n).map(String::as_str).collect();
                out.push_str(&fill.join(" "));
            }
        }
        Ok(out)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    released: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("semaphore lock");
        while *active >= self.limit {
            active = self.released.wait(active).expect("semaphore lock");
        }
        *active += 1;
        InFlightGuard { sem: self }
    }
}

struct InFlightGuard<'a> {
    sem: &'a InFlight,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.sem.active.lock().expect("semaphore lock");
        *active -= 1;
        self.sem.released.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(30),
            max_in_flight: 4,
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

/// HTTP client for `POST {base_url}/infill`.
#[derive(Debug)]
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let in_flight = InFlight::new(config.max_in_flight);
        Self {
            config,
            agent,
            in_flight,
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/infill", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, request: &InfillRequest) -> Result<String, GenerationError> {
        let _slot = self.in_flight.acquire();
        let resp = self
            .agent
            .post(&self.endpoint())
            .send_json(request)
            .map_err(|e| match e {
                ureq::Error::Status(code, _) if code >= 500 => GenerationError::Transport(format!("HTTP {code}")),
                ureq::Error::Status(code, _) => GenerationError::MalformedBackend {
                    backend: "remote".to_string(),
                    reason: format!("request rejected with HTTP {code}"),
                },
                ureq::Error::Transport(t) => GenerationError::Transport(t.to_string()),
            })?;
        if resp.status() != 200 {
            return Err(GenerationError::Transport(format!("HTTP {}", resp.status())));
        }
        let body: InfillResponse = resp.into_json().map_err(|e| GenerationError::MalformedBackend {
            backend: self.name().to_string(),
            reason: format!("bad response body: {e}"),
        })?;
        Ok(body.text)
    }
}

impl InfillBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn fill(&self, request: &InfillRequest) -> Result<String, GenerationError> {
        let attempts = self.config.attempts.max(1);
        let mut delay = self.config.backoff;
        let mut last = None;
        for n in 0..attempts {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() => {
                    log::warn!("infill attempt {} of {attempts} failed: {e}", n + 1);
                    last = Some(e);
                    if n + 1 < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    PromptNotFound,
    EmptyCandidate,
    PromptInCandidate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stripped {
    Candidate(String),
    Discard(DiscardReason),
}

fn trim_terminal(s: &str) -> &str {
    s.trim_end().trim_end_matches(['.', '!', '?']).trim_end()
}

/// Removes `", " + pattern` from the end of `filled`. Trailing whitespace and
/// terminal `.`/`!`/`?` are ignored on both sides when matching.
pub fn strip_prompt(filled: &str, template: &PromptTemplate) -> Stripped {
    let body = trim_terminal(filled);
    let pattern = trim_terminal(&template.pattern);
    let suffix = format!("{PROMPT_SEPARATOR}{pattern}");
    let Some(prefix) = body.strip_suffix(&suffix) else {
        return Stripped::Discard(DiscardReason::PromptNotFound);
    };
    let candidate = prefix.trim_end();
    if candidate.is_empty() {
        return Stripped::Discard(DiscardReason::EmptyCandidate);
    }
    if candidate.contains(pattern) {
        return Stripped::Discard(DiscardReason::PromptInCandidate);
    }
    Stripped::Candidate(candidate.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationCandidate {
    pub source_id: String,
    pub text: String,
    pub target_polarity: Polarity,
    pub prompt_id: String,
    pub backend_name: String,
    pub seed: u64,
    pub stripped_ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationOutput {
    pub candidates: Vec<GenerationCandidate>,
    pub discards: Vec<(String, DiscardReason)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationParams<'a> {
    pub mask_token: &'a str,
    pub max_words_per_mask: usize,
    pub n_per_template: usize,
    pub seed: u64,
}

/// Runs every template `n_per_template` times with seeds derived from
/// `(seed, sample id, template id, repeat)`. Discarded strips are reported
/// separately; transport errors propagate.
pub fn generate_candidates(
    corrupted: &CorruptedSample,
    target: Polarity,
    templates: &[&PromptTemplate],
    backend: &dyn InfillBackend,
    params: &GenerationParams<'_>,
) -> Result<GenerationOutput, GenerationError> {
    let mut out = GenerationOutput::default();
    for template in templates {
        let prompted = attach_prompt(corrupted, template, params.mask_token)?;
        for repeat in 0..params.n_per_template.max(1) {
            let seed = derive_seed(params.seed, &[&corrupted.sample_id, &template.id, &repeat.to_string()]);
            let request = InfillRequest {
                text: prompted.clone(),
                mask_token: params.mask_token.to_string(),
                max_words_per_mask: params.max_words_per_mask,
                hint_polarity: target,
                seed,
            };
            let filled = infill(backend, &request)?;
            match strip_prompt(&filled, template) {
                Stripped::Candidate(text) => out.candidates.push(GenerationCandidate {
                    source_id: corrupted.sample_id.clone(),
                    text,
                    target_polarity: target,
                    prompt_id: template.id.clone(),
                    backend_name: backend.name().to_string(),
                    seed,
                    stripped_ok: true,
                }),
                Stripped::Discard(reason) => out.discards.push((template.id.clone(), reason)),
            }
        }
    }
    Ok(out)
}

pub mod stub {
    //! Minimal HTTP server speaking the `/infill` protocol, for tests and
    //! local runs without a real infill model.

    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::thread::JoinHandle;
    use std::time::Duration;

    use super::{InfillRequest, InfillResponse};

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum StubMode {
        /// Replace each sentinel with the word `stub`.
        Fill,
        /// Return the request text unchanged (sentinels remain).
        Echo,
    }

    #[derive(Debug, Clone)]
    pub struct StubBehavior {
        pub mode: StubMode,
        /// The first `fail_first` requests get HTTP 500.
        pub fail_first: usize,
        pub delay: Duration,
    }

    impl Default for StubBehavior {
        fn default() -> Self {
            Self {
                mode: StubMode::Fill,
                fail_first: 0,
                delay: Duration::ZERO,
            }
        }
    }

    #[derive(Debug, Default)]
    pub struct StubStats {
        pub requests: AtomicUsize,
        pub active: AtomicUsize,
        pub max_active: AtomicUsize,
    }

    pub struct StubServer {
        server: Arc<tiny_http::Server>,
        stats: Arc<StubStats>,
        stopping: Arc<AtomicBool>,
        accept: Option<JoinHandle<()>>,
        port: u16,
    }

    impl StubServer {
        pub fn start(behavior: StubBehavior) -> std::io::Result<Self> {
            let server = tiny_http::Server::http("127.0.0.1:0").map_err(|e| std::io::Error::other(e.to_string()))?;
            let port = server
                .server_addr()
                .to_ip()
                .map(|a| a.port())
                .ok_or_else(|| std::io::Error::other("stub bound to a non-IP address"))?;
            let server = Arc::new(server);
            let stats = Arc::new(StubStats::default());
            let stopping = Arc::new(AtomicBool::new(false));
            let accept = {
                let server = Arc::clone(&server);
                let stats = Arc::clone(&stats);
                let stopping = Arc::clone(&stopping);
                std::thread::spawn(move || {
                    for request in server.incoming_requests() {
                        if stopping.load(Ordering::SeqCst) {
                            break;
                        }
                        let stats = Arc::clone(&stats);
                        let behavior = behavior.clone();
                        std::thread::spawn(move || handle(request, &behavior, &stats));
                    }
                })
            };
            Ok(Self {
                server,
                stats,
                stopping,
                accept: Some(accept),
                port,
            })
        }

        pub fn base_url(&self) -> String {
            format!("http://127.0.0.1:{}", self.port)
        }

        pub fn stats(&self) -> &StubStats {
            &self.stats
        }

        pub fn requests(&self) -> usize {
            self.stats.requests.load(Ordering::SeqCst)
        }

        pub fn max_concurrent(&self) -> usize {
            self.stats.max_active.load(Ordering::SeqCst)
        }
    }

    impl Drop for StubServer {
        fn drop(&mut self) {
            self.stopping.store(true, Ordering::SeqCst);
            self.server.unblock();
            if let Some(h) = self.accept.take() {
                let _ = h.join();
            }
        }
    }

    fn handle(mut request: tiny_http::Request, behavior: &StubBehavior, stats: &StubStats) {
        let n = stats.requests.fetch_add(1, Ordering::SeqCst);
        let active = stats.active.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_active.fetch_max(active, Ordering::SeqCst);
        std::thread::sleep(behavior.delay);

        let respond = |code: u16, body: String| tiny_http::Response::from_string(body).with_status_code(code);
        let response = if request.url() != "/infill" || *request.method() != tiny_http::Method::Post {
            respond(404, "not found".into())
        } else if n < behavior.fail_first {
            respond(500, "injected failure".into())
        } else {
            let mut body = String::new();
            let parsed = request
                .as_reader()
                .read_to_string(&mut body)
                .ok()
                .and_then(|_| serde_json::from_str::<InfillRequest>(&body).ok());
            match parsed {
                None => respond(400, "bad request".into()),
                Some(req) => {
                    let text = match behavior.mode {
                        StubMode::Fill => req.text.replace(&req.mask_token, "stub"),
                        StubMode::Echo => req.text,
                    };
                    respond(
                        200,
                        serde_json::to_string(&InfillResponse { text }).expect("serializes"),
                    )
                }
            }
        };
        stats.active.fetch_sub(1, Ordering::SeqCst);
        let _ = request.respond(response);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::corruption::MaskStrategy;

    fn worked_example() -> CorruptedSample {
        let tokens = tokenize("Maximum sound isn't nearly as loud as it should be");
        CorruptedSample::from_selection("ex", &tokens, &[2, 4, 5, 6, 10], 3, MaskStrategy::IntegratedGradients)
    }

    fn template(p: Polarity, pattern: &str) -> PromptTemplate {
        PromptTemplate {
            id: "t".into(),
            polarity: p,
            pattern: pattern.into(),
        }
    }

    #[test]
    fn bundled_templates_two_per_polarity() {
        let set = TemplateSet::bundled();
        for p in Polarity::ALL {
            assert_eq!(set.for_polarity(p).len(), 2);
        }
        assert_eq!(set.for_polarity(Polarity::Positive)[0].pattern, "which is great!");
        assert_eq!(set.for_polarity(Polarity::Positive)[0].id, "positive-1");
    }

    #[test]
    fn template_with_sentinel_rejected() {
        assert!(TemplateSet::parse("positive\tso <mask>!\n", "<mask>").is_err());
        assert!(TemplateSet::parse("upbeat\tnice\n", "<mask>").is_err());
    }

    #[test]
    fn attach_swaps_suffix() {
        let c = worked_example();
        let awful = attach_prompt(&c, &template(Polarity::Negative, "which is awful!"), "<mask>").unwrap();
        assert_eq!(
            awful,
            "maximum sound <mask> 't <mask> as it should <mask>, which is awful!"
        );
        let empty = CorruptedSample::from_selection("e", &tokenize("a b"), &[], 1, MaskStrategy::Random);
        assert!(matches!(
            attach_prompt(&empty, &template(Polarity::Negative, "x"), "<mask>"),
            Err(GenerationError::NothingToGenerate)
        ));
    }

    #[test]
    fn strip_rules() {
        let t = template(Polarity::Positive, "which is great!");
        assert_eq!(
            strip_prompt("maximum sound quality 'thumping' as it should be, which is great!", &t),
            Stripped::Candidate("maximum sound quality 'thumping' as it should be".into())
        );
        assert_eq!(
            strip_prompt("the food was good, which is grand!", &t),
            Stripped::Discard(DiscardReason::PromptNotFound)
        );
        assert_eq!(
            strip_prompt("which is great! the food was good, and more", &t),
            Stripped::Discard(DiscardReason::PromptNotFound)
        );
        assert_eq!(
            strip_prompt("the food was good, which is great  \n", &t),
            Stripped::Candidate("the food was good".into())
        );
    }

    #[test]
    fn lexicon_backend_fills_from_hint_lexicon() {
        let lex = Lexicon::bundled();
        let backend = LexiconBackend::new(lex.clone());
        let req = InfillRequest {
            text: "a <mask> b <mask>, which is great!".into(),
            mask_token: "<mask>".into(),
            max_words_per_mask: 3,
            hint_polarity: Polarity::Positive,
            seed: 11,
        };
        let out = infill(&backend, &req).unwrap();
        assert_eq!(out, infill(&backend, &req).unwrap());
        let body = out.strip_suffix(", which is great!").unwrap();
        let words: Vec<&str> = body.split_whitespace().collect();
        assert_eq!(words.first(), Some(&"a"));
        for w in words.iter().filter(|w| **w != "a" && **w != "b") {
            assert_eq!(lex.polarity_of(w), Some(Polarity::Positive), "{w}");
        }
    }

    #[test]
    fn infill_requires_sentinel() {
        let backend = LexiconBackend::new(Lexicon::bundled());
        let req = InfillRequest {
            text: "no masks here".into(),
            mask_token: "<mask>".into(),
            max_words_per_mask: 3,
            hint_polarity: Polarity::Positive,
            seed: 0,
        };
        assert!(matches!(infill(&backend, &req), Err(GenerationError::NoSentinel(_))));
    }

    struct RewritingBackend;

    impl InfillBackend for RewritingBackend {
        fn name(&self) -> &str {
            "rewrite"
        }
        fn is_deterministic(&self) -> bool {
            true
        }
        fn fill(&self, _: &InfillRequest) -> Result<String, GenerationError> {
            Ok("something else entirely".into())
        }
    }

    #[test]
    fn generate_counts_and_discards() {
        let c = worked_example();
        let set = TemplateSet::bundled();
        let templates = set.for_polarity(Polarity::Positive);
        let params = GenerationParams {
            mask_token: "<mask>",
            max_words_per_mask: 3,
            n_per_template: 2,
            seed: 5,
        };
        let backend = LexiconBackend::new(Lexicon::bundled());
        let out = generate_candidates(&c, Polarity::Positive, &templates, &backend, &params).unwrap();
        assert_eq!(out.candidates.len(), 4);
        assert_eq!(
            out,
            generate_candidates(&c, Polarity::Positive, &templates, &backend, &params).unwrap()
        );
        let seeds: std::collections::HashSet<u64> = out.candidates.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 4);

        let out = generate_candidates(&c, Polarity::Positive, &templates, &RewritingBackend, &params).unwrap();
        assert!(out.candidates.is_empty());
        assert_eq!(out.discards.len(), 4);
    }
}
