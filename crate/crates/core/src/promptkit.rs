//! Prompt templates, the captioning and fill-in-the-masks LLM steps, and the
//! completion validator.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, HttpClient, RetryPolicy};
use crate::corpus::{ImageRecord, StyleLabel};
use crate::lingua::{tokenize, MaskedCaption, MASK_TOKEN};
use crate::mock;
use crate::rng::hash64;

/// Sentence opening shared by every generation prompt.
pub const PHOTO_PREFIX: &str = "A photo of a woman wearing";

/// Captioning instruction, verbatim.
pub const CAPTIONING_PROMPT: &str = include_str!("../prompts/captioning.txt");
/// Fill-in-the-masks instruction, verbatim. The masked caption is sent as the query.
pub const FILL_MASKS_PROMPT: &str = include_str!("../prompts/fill_masks.txt");

/// Maximum caption length in words once the prefix is stripped.
pub const MAX_CAPTION_WORDS: usize = 30;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{0} strategy requires {1}")]
    MissingArgument(PromptStrategy, &'static str),
    #[error("caption must be an article-led noun phrase (\"a ...\"), got {0:?}")]
    NotArticleLed(String),
    #[error("masked caption contains no {MASK_TOKEN}")]
    NoMask,
    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStrategy {
    Class,
    Caption,
    Mlp,
}

impl PromptStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptStrategy::Class => "class",
            PromptStrategy::Caption => "caption",
            PromptStrategy::Mlp => "mlp",
        }
    }

    pub fn needs_reference(self) -> bool {
        !matches!(self, PromptStrategy::Class)
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "class" => Ok(PromptStrategy::Class),
            "caption" => Ok(PromptStrategy::Caption),
            "mlp" => Ok(PromptStrategy::Mlp),
            other => Err(format!("unknown strategy {other:?} (expected class, caption or mlp)")),
        }
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_article_led(s: &str) -> bool {
    let first = s.split_whitespace().next().unwrap_or("").to_ascii_lowercase();
    first == "a" || first == "an"
}

/// Renders the generation prompt for a strategy.
///
/// * Class: `A photo of a woman wearing a {CLASS} style outfit.`
/// * Caption / MLP: `A photo of a woman wearing {CAPTION}.`
///
/// The inserted text is whitespace-collapsed and any trailing periods are
/// dropped so the sentence ends with exactly one.
pub fn render_prompt(
    strategy: PromptStrategy,
    class_name: Option<&str>,
    caption: Option<&str>,
) -> Result<String, PromptError> {
    match strategy {
        PromptStrategy::Class => {
            let class = class_name
                .map(collapse_ws)
                .filter(|c| !c.is_empty())
                .ok_or(PromptError::MissingArgument(strategy, "a class name"))?;
            Ok(format!("{PHOTO_PREFIX} a {class} style outfit."))
        }
        PromptStrategy::Caption | PromptStrategy::Mlp => {
            let caption = caption
                .map(|c| collapse_ws(c.trim().trim_end_matches('.')))
                .filter(|c| !c.is_empty())
                .ok_or(PromptError::MissingArgument(strategy, "a caption"))?;
            if !is_article_led(&caption) {
                return Err(PromptError::NotArticleLed(caption));
            }
            Ok(format!("{PHOTO_PREFIX} {caption}."))
        }
    }
}

// ---------------------------------------------------------------------------
// Chat wire format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: MessageContent,
}

impl ChatMessage {
    pub fn system(text: &str) -> Self {
        Self {
            role: "system".into(),
            content: MessageContent::Text(text.to_string()),
        }
    }

    pub fn user(text: &str) -> Self {
        Self {
            role: "user".into(),
            content: MessageContent::Text(text.to_string()),
        }
    }
}

/// Backend-independent part of a chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// SHA-256 (hex) of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serialises");
        hex::encode(Sha256::digest(bytes))
    }

    /// Copy with inline image data replaced by its digest, for logging.
    pub fn redacted(&self) -> ChatRequest {
        let mut out = self.clone();
        for m in &mut out.messages {
            if let MessageContent::Parts(parts) = &mut m.content {
                for p in parts {
                    if let ContentPart::ImageUrl { image_url } = p {
                        if image_url.url.starts_with("data:") {
                            image_url.url = format!("sha256:{}", hex::encode(Sha256::digest(image_url.url.as_bytes())));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn user_text(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == "user").and_then(|m| match &m.content {
            MessageContent::Text(t) => Some(t.as_str()),
            MessageContent::Parts(parts) => parts.iter().find_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                _ => None,
            }),
        })
    }

    pub fn image_bytes(&self) -> Option<Vec<u8>> {
        for m in &self.messages {
            if let MessageContent::Parts(parts) = &m.content {
                for p in parts {
                    if let ContentPart::ImageUrl { image_url } = p {
                        let b64 = image_url.url.split_once(";base64,")?.1;
                        return base64::engine::general_purpose::STANDARD.decode(b64).ok();
                    }
                }
            }
        }
        None
    }
}

/// A chat-completion capable model.
pub trait LlmBackend: Send + Sync {
    /// Returns the assistant message text.
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmBackendConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            api_key_env: "LLM_API_KEY".into(),
            timeout_secs: 120,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: &'a [ChatMessage],
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

/// OpenAI-style chat-completions client.
pub struct HttpLlm {
    cfg: LlmBackendConfig,
    http: HttpClient,
}

impl HttpLlm {
    pub fn new(cfg: LlmBackendConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let http = HttpClient::new(cfg.retry, key, Duration::from_secs(cfg.timeout_secs))?;
        Ok(Self { cfg, http })
    }
}

impl LlmBackend for HttpLlm {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let wire = WireRequest {
            model: &self.cfg.model,
            temperature: self.cfg.temperature,
            messages: &req.messages,
            seed: req.seed,
        };
        let body = self.http.post_json(&self.cfg.endpoint, &wire)?;
        let parsed: WireResponse = serde_json::from_slice(&body).map_err(|e| BackendError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Decode("response has no message content".into()))
    }
}

/// Offline stand-in: captions images from their mock style chunk and fills
/// masks from the style vocabulary inferred from the unmasked words.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockLlm;

impl LlmBackend for MockLlm {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        if let Some(bytes) = req.image_bytes() {
            let style = mock::read_style(&bytes);
            return Ok(mock::caption_for(style, hash64(&bytes)));
        }
        let query = req
            .user_text()
            .ok_or_else(|| BackendError::Decode("mock LLM: request has no user text".into()))?;
        let style = mock::detect_style(&query.replace(MASK_TOKEN, " "));
        let seed = req.seed.unwrap_or(0);
        let mut out = String::with_capacity(query.len() + 32);
        let mut rest = query;
        let mut ordinal = 0;
        while let Some(i) = rest.find(MASK_TOKEN) {
            out.push_str(&rest[..i]);
            out.push_str(mock::fill_word(style, seed, ordinal));
            ordinal += 1;
            rest = &rest[i + MASK_TOKEN.len()..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Returns canned responses in order; errors once exhausted.
#[derive(Debug, Default)]
pub struct ScriptedLlm {
    responses: Mutex<VecDeque<Result<String, u16>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedLlm {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            responses: Mutex::new(responses.into_iter().map(|s| Ok(s.into())).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Queues an HTTP error status instead of a response.
    pub fn push_status(&self, code: u16) {
        self.responses.lock().unwrap().push_back(Err(code));
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl LlmBackend for ScriptedLlm {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.seen.lock().unwrap().push(req.clone());
        match self.responses.lock().unwrap().pop_front() {
            Some(Ok(s)) => Ok(s),
            Some(Err(code)) => Err(BackendError::Status {
                code,
                body: "scripted".into(),
            }),
            None => Err(BackendError::Transport("script exhausted".into())),
        }
    }
}

/// One logged request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    /// Caller-chosen stable key, e.g. `caption:<image id>`.
    pub request_id: String,
    pub attempt: u32,
    pub request_digest: String,
    pub request: ChatRequest,
    pub response: String,
    pub verdict: String,
}

/// Thread-safe collector of [`LlmExchange`]s.
#[derive(Debug, Default)]
pub struct LlmLog {
    entries: Mutex<Vec<LlmExchange>>,
}

impl LlmLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, e: LlmExchange) {
        self.entries.lock().unwrap().push(e);
    }

    /// Entries sorted by (request id, attempt), independent of call order.
    pub fn entries(&self) -> Vec<LlmExchange> {
        let mut v = self.entries.lock().unwrap().clone();
        v.sort_by(|a, b| (&a.request_id, a.attempt).cmp(&(&b.request_id, b.attempt)));
        v
    }

    pub fn to_jsonl(&self) -> String {
        self.entries()
            .iter()
            .map(|e| serde_json::to_string(e).expect("exchange serialises") + "\n")
            .collect()
    }
}

/// Serves responses recorded in an [`LlmLog`], matching on request digest.
#[derive(Debug, Default)]
pub struct ReplayLlm {
    by_digest: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayLlm {
    pub fn from_exchanges(exchanges: &[LlmExchange]) -> Self {
        let mut sorted = exchanges.to_vec();
        sorted.sort_by(|a, b| (&a.request_id, a.attempt).cmp(&(&b.request_id, b.attempt)));
        let mut map: HashMap<String, VecDeque<String>> = HashMap::new();
        for e in sorted {
            map.entry(e.request_digest).or_default().push_back(e.response);
        }
        Self {
            by_digest: Mutex::new(map),
        }
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let exchanges: Vec<LlmExchange> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self::from_exchanges(&exchanges))
    }
}

impl LlmBackend for ReplayLlm {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let digest = req.digest();
        self.by_digest
            .lock()
            .unwrap()
            .get_mut(&digest)
            .and_then(|q| q.pop_front())
            .ok_or(BackendError::NotRecorded(digest))
    }
}

// ---------------------------------------------------------------------------
// Captioning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CaptionOutcome {
    /// Payload after the prefix, e.g. `a red dress with ...`.
    Accepted { caption: String },
    Rejected { reason: String, raw_responses: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub label: StyleLabel,
    pub attempts: u32,
    #[serde(flatten)]
    pub outcome: CaptionOutcome,
}

impl CaptionRecord {
    pub fn caption(&self) -> Option<&str> {
        match &self.outcome {
            CaptionOutcome::Accepted { caption } => Some(caption),
            CaptionOutcome::Rejected { .. } => None,
        }
    }
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    let quotes = ['"', '\'', '\u{201c}', '\u{201d}'];
    let s = s.strip_prefix(|c| quotes.contains(&c)).unwrap_or(s);
    s.strip_suffix(|c| quotes.contains(&c)).unwrap_or(s).trim()
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    if s.len() >= prefix.len() && s.is_char_boundary(prefix.len()) && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
        Some(&s[prefix.len()..])
    } else {
        None
    }
}

/// Checks a captioning response against the contract and returns the payload.
pub fn check_caption(raw: &str) -> Result<String, String> {
    let text = strip_quotes(raw);
    let rest = strip_prefix_ci(text, PHOTO_PREFIX).ok_or_else(|| "missing prefix".to_string())?;
    let payload = collapse_ws(rest.trim().trim_end_matches('.').trim());
    let words = payload.split_whitespace().count();
    if words == 0 {
        return Err("empty caption".into());
    }
    if words > MAX_CAPTION_WORDS {
        return Err(format!("length>{MAX_CAPTION_WORDS}"));
    }
    if !is_article_led(&payload) {
        return Err("not article-led".into());
    }
    Ok(payload)
}

fn mime_for(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        _ => "image/png",
    }
}

pub fn caption_request(image_bytes: &[u8], mime: &str) -> ChatRequest {
    let url = format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(image_bytes)
    );
    ChatRequest {
        messages: vec![
            ChatMessage::system(CAPTIONING_PROMPT),
            ChatMessage {
                role: "user".into(),
                content: MessageContent::Parts(vec![ContentPart::ImageUrl {
                    image_url: ImageUrl { url },
                }]),
            },
        ],
        seed: None,
    }
}

/// Captions a real image. A non-conforming response is retried once with the
/// same instruction; a second violation yields a `Rejected` record holding
/// both raw responses. Transport failures are errors.
pub fn caption_image(backend: &dyn LlmBackend, image: &ImageRecord, log: &LlmLog) -> Result<CaptionRecord, PromptError> {
    let bytes = fs::read(&image.path).map_err(|source| PromptError::Image {
        path: image.path.clone(),
        source,
    })?;
    let req = caption_request(&bytes, mime_for(&image.path));
    let digest = req.digest();
    let request_id = format!("caption:{}", image.id);
    let mut raws = Vec::new();
    let mut reason = String::new();
    for attempt in 1..=2u32 {
        let raw = backend.chat(&req)?;
        let verdict = check_caption(&raw);
        log.push(LlmExchange {
            request_id: request_id.clone(),
            attempt,
            request_digest: digest.clone(),
            request: req.redacted(),
            response: raw.clone(),
            verdict: match &verdict {
                Ok(_) => "accepted".into(),
                Err(r) => format!("rejected: {r}"),
            },
        });
        match verdict {
            Ok(caption) => {
                return Ok(CaptionRecord {
                    image_id: image.id.clone(),
                    label: image.label,
                    attempts: attempt,
                    outcome: CaptionOutcome::Accepted { caption },
                })
            }
            Err(r) => {
                reason = r;
                raws.push(raw);
            }
        }
    }
    Ok(CaptionRecord {
        image_id: image.id.clone(),
        label: image.label,
        attempts: 2,
        outcome: CaptionOutcome::Rejected {
            reason,
            raw_responses: raws,
        },
    })
}

// ---------------------------------------------------------------------------
// Fill-in-the-masks and validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Validation {
    Accepted,
    Rejected { reason: String },
}

impl Validation {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Validation::Accepted)
    }

    fn reject(reason: &str) -> Self {
        Validation::Rejected {
            reason: reason.to_string(),
        }
    }
}

/// Which completion checks run, and how many words may fill one mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationPolicy {
    /// (a) no literal `[MASK]` left.
    pub check_unfilled: bool,
    /// (b) non-masked words survive, in order, with masks filled in between.
    pub check_order: bool,
    /// (c) completion at most `max_length_factor` times the source word count.
    pub check_length: bool,
    pub min_words_per_mask: usize,
    pub max_words_per_mask: usize,
    pub max_length_factor: f64,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        Self {
            check_unfilled: true,
            check_order: true,
            check_length: true,
            min_words_per_mask: 1,
            max_words_per_mask: 3,
            max_length_factor: 2.0,
        }
    }
}

impl ValidationPolicy {
    /// Exactly one word per mask, as the fill-in instruction demands.
    pub fn one_word_per_mask() -> Self {
        Self {
            max_words_per_mask: 1,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilledSpan {
    /// Token index of the (first) mask in the source caption.
    pub mask_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedCaption {
    pub masked: MaskedCaption,
    pub raw_response: String,
    pub completed_text: String,
    pub filled_spans: Vec<FilledSpan>,
    pub validation: Validation,
}

#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Word(String),
    /// Consecutive masks (punctuation between them ignored), by token index.
    Masks(Vec<usize>),
}

fn norm_word(s: &str) -> String {
    s.to_lowercase()
}

/// Non-punctuation words of `text`, original surface.
fn words_of(text: &str) -> Vec<String> {
    match tokenize(text) {
        Ok(toks) => toks.into_iter().filter(|t| !t.is_punct()).map(|t| t.surface).collect(),
        Err(_) => Vec::new(),
    }
}

fn template(mc: &MaskedCaption) -> Vec<Slot> {
    let mut slots: Vec<Slot> = Vec::new();
    for (i, tok) in mc.source.tokens.iter().enumerate() {
        if mc.is_masked(i) {
            if let Some(Slot::Masks(run)) = slots.last_mut() {
                run.push(i);
            } else {
                slots.push(Slot::Masks(vec![i]));
            }
        } else if tok.surface.chars().any(|c| c.is_alphanumeric()) {
            slots.push(Slot::Word(norm_word(&tok.surface)));
        }
    }
    slots
}

/// Aligns completion words to the template: words must match exactly and
/// each run of `r` masks absorbs between `r*min` and `r*max` words.
/// Returns the word range assigned to each mask run.
fn align(slots: &[Slot], words: &[String], min: usize, max: usize) -> Option<Vec<(Vec<usize>, usize, usize)>> {
    let lowered: Vec<String> = words.iter().map(|w| norm_word(w)).collect();
    let (t_len, w_len) = (slots.len(), words.len());
    // reach[t][j]: slots[t..] can consume words[j..] exactly
    let mut reach = vec![vec![false; w_len + 1]; t_len + 1];
    reach[t_len][w_len] = true;
    for t in (0..t_len).rev() {
        for j in (0..=w_len).rev() {
            reach[t][j] = match &slots[t] {
                Slot::Word(w) => j < w_len && lowered[j] == *w && reach[t + 1][j + 1],
                Slot::Masks(run) => {
                    let lo = run.len() * min;
                    let hi = run.len() * max;
                    (lo..=hi).any(|g| j + g <= w_len && reach[t + 1][j + g])
                }
            };
        }
    }
    if !reach[0][0] {
        return None;
    }
    let mut out = Vec::new();
    let mut j = 0;
    for (t, slot) in slots.iter().enumerate() {
        match slot {
            Slot::Word(_) => j += 1,
            Slot::Masks(run) => {
                let lo = run.len() * min;
                let g = (lo..=run.len() * max)
                    .find(|g| j + g <= w_len && reach[t + 1][j + g])
                    .expect("reachable");
                out.push((run.clone(), j, j + g));
                j += g;
            }
        }
    }
    Some(out)
}

fn spans_from(alignment: &[(Vec<usize>, usize, usize)], words: &[String]) -> Vec<FilledSpan> {
    let mut spans = Vec::new();
    for (run, a, b) in alignment {
        let fill = &words[*a..*b];
        if fill.len() == run.len() {
            for (idx, w) in run.iter().zip(fill) {
                spans.push(FilledSpan {
                    mask_index: *idx,
                    text: w.clone(),
                });
            }
        } else {
            spans.push(FilledSpan {
                mask_index: run[0],
                text: fill.join(" "),
            });
        }
    }
    spans
}

fn evaluate(mc: &MaskedCaption, text: &str, policy: &ValidationPolicy) -> (Validation, Vec<FilledSpan>) {
    if policy.check_unfilled && text.contains(MASK_TOKEN) {
        return (Validation::reject("unfilled mask"), Vec::new());
    }
    let words = words_of(text);
    let slots = template(mc);
    let alignment = align(&slots, &words, policy.min_words_per_mask, policy.max_words_per_mask.max(policy.min_words_per_mask));
    if policy.check_order && alignment.is_none() {
        return (Validation::reject("non-masked token altered"), Vec::new());
    }
    if policy.check_length {
        let source_words = words_of(&mc.source.text).len();
        if words.len() as f64 > policy.max_length_factor * source_words as f64 {
            return (Validation::reject("completion too long"), Vec::new());
        }
    }
    let spans = alignment.map(|a| spans_from(&a, &words)).unwrap_or_default();
    (Validation::Accepted, spans)
}

/// Checks a completion of `mc`. Comparison is case-insensitive and ignores
/// punctuation tokens.
pub fn validate_completion(mc: &MaskedCaption, text: &str, policy: &ValidationPolicy) -> Validation {
    evaluate(mc, text, policy).0
}

/// Strips quoting and an echoed sentence prefix from a fill-in response.
pub fn clean_completion(raw: &str) -> String {
    let text = strip_quotes(raw);
    let text = strip_prefix_ci(text, PHOTO_PREFIX).map(str::trim).unwrap_or(text);
    collapse_ws(text)
}

pub fn fill_request(mc: &MaskedCaption) -> ChatRequest {
    ChatRequest {
        messages: vec![ChatMessage::system(FILL_MASKS_PROMPT), ChatMessage::user(&mc.masked_text)],
        seed: Some(mc.seed),
    }
}

/// Runs the fill-in-the-masks step. Semantic failures come back as a
/// `Rejected` validation, never as an error.
pub fn fill_masks(
    backend: &dyn LlmBackend,
    mc: &MaskedCaption,
    policy: &ValidationPolicy,
    request_id: &str,
    log: &LlmLog,
) -> Result<CompletedCaption, PromptError> {
    if !mc.masked_text.contains(MASK_TOKEN) {
        return Err(PromptError::NoMask);
    }
    let req = fill_request(mc);
    let raw = backend.chat(&req)?;
    let completed_text = clean_completion(&raw);
    let (validation, filled_spans) = evaluate(mc, &completed_text, policy);
    log.push(LlmExchange {
        request_id: format!("fill:{request_id}"),
        attempt: 1,
        request_digest: req.digest(),
        request: req,
        response: raw.clone(),
        verdict: match &validation {
            Validation::Accepted => "accepted".into(),
            Validation::Rejected { reason } => format!("rejected: {reason}"),
        },
    });
    Ok(CompletedCaption {
        masked: mc.clone(),
        raw_response: raw,
        completed_text,
        filled_spans,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lingua::{analyze, LexiconTagger};
    use std::collections::BTreeSet;

    const FIG3: &str = "a pastel-themed outfit with a white graphic top, lavender tutu skirt, patterned knee-high socks, and platform shoes, embodying a kawaii Harajuku fashion style.";

    fn masked_at(text: &str, words: &[&str]) -> MaskedCaption {
        let tc = analyze(text, &LexiconTagger::builtin()).unwrap();
        let positions: BTreeSet<usize> = tc
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| words.contains(&t.surface.as_str()))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(positions.len(), words.len(), "all words present once");
        MaskedCaption::with_positions(tc, positions, 0.5, 0).expect("maskable")
    }

    #[test]
    fn templates() {
        assert_eq!(
            render_prompt(PromptStrategy::Class, Some("lolita"), None).unwrap(),
            "A photo of a woman wearing a lolita style outfit."
        );
        assert_eq!(
            render_prompt(PromptStrategy::Caption, None, Some("a red dress")).unwrap(),
            "A photo of a woman wearing a red dress."
        );
        assert_eq!(
            render_prompt(PromptStrategy::Caption, None, Some("a  red dress.")).unwrap(),
            "A photo of a woman wearing a red dress."
        );
        assert!(matches!(
            render_prompt(PromptStrategy::Class, None, Some("a x")),
            Err(PromptError::MissingArgument(..))
        ));
        assert!(matches!(
            render_prompt(PromptStrategy::Mlp, Some("fairy"), None),
            Err(PromptError::MissingArgument(..))
        ));
        assert!(matches!(
            render_prompt(PromptStrategy::Caption, None, Some("red dress")),
            Err(PromptError::NotArticleLed(_))
        ));
    }

    #[test]
    fn mlp_prompt_embeds_completion_verbatim() {
        let completion = "a pastel-themed oversized sweater with a cute graphic print, lavender tutu skirt, patterned knee-high socks, and platform shoes, embodying a kawaii street fashion style";
        let p = render_prompt(PromptStrategy::Mlp, None, Some(completion)).unwrap();
        assert_eq!(p, format!("A photo of a woman wearing {completion}."));
    }

    #[test]
    fn caption_contract() {
        assert_eq!(
            check_caption("A photo of a woman wearing a red dress.").unwrap(),
            "a red dress"
        );
        assert_eq!(check_caption("\"A photo of a woman wearing a red dress\"").unwrap(), "a red dress");
        assert_eq!(check_caption("a red dress").unwrap_err(), "missing prefix");
        let long = format!("A photo of a woman wearing a {}", vec!["red"; 34].join(" "));
        assert_eq!(check_caption(&long).unwrap_err(), "length>30");
    }

    #[test]
    fn one_for_one_fill_accepted() {
        let mc = masked_at("a red dress", &["red"]);
        assert_eq!(mc.masked_text, "a [MASK] dress");
        let llm = ScriptedLlm::new(["a blue dress"]);
        let log = LlmLog::new();
        let cc = fill_masks(&llm, &mc, &ValidationPolicy::default(), "x", &log).unwrap();
        assert_eq!(cc.validation, Validation::Accepted);
        assert_eq!(cc.filled_spans, vec![FilledSpan { mask_index: 1, text: "blue".into() }]);
        assert_eq!(log.entries().len(), 1);
        assert_eq!(llm.requests()[0].user_text(), Some("a [MASK] dress"));
    }

    #[test]
    fn leftover_mask_rejected() {
        let mc = masked_at("a red dress", &["red"]);
        let llm = ScriptedLlm::new(["a [MASK] dress"]);
        let cc = fill_masks(&llm, &mc, &ValidationPolicy::default(), "x", &LlmLog::new()).unwrap();
        assert_eq!(cc.validation, Validation::reject("unfilled mask"));
    }

    #[test]
    fn unmasked_caption_is_an_error() {
        let tc = analyze("a red dress", &LexiconTagger::builtin()).unwrap();
        let mc = MaskedCaption::with_positions(tc, BTreeSet::new(), 0.0, 0).unwrap();
        let err = fill_masks(&MockLlm, &mc, &ValidationPolicy::default(), "x", &LlmLog::new()).unwrap_err();
        assert!(matches!(err, PromptError::NoMask));
    }

    #[test]
    fn fig3_success_and_failure_columns() {
        let mc = masked_at(FIG3, &["outfit", "white", "top", "Harajuku"]);
        let ok = "a pastel-themed oversized sweater with a cute graphic print, lavender tutu skirt, patterned knee-high socks, and platform shoes, embodying a kawaii street fashion style.";
        assert_eq!(validate_completion(&mc, ok, &ValidationPolicy::default()), Validation::Accepted);
        // strict one-word mode refuses the two-word fill
        assert!(!validate_completion(&mc, ok, &ValidationPolicy::one_word_per_mask()).is_accepted());

        let mc = masked_at(FIG3, &["pastel-themed", "lavender", "kawaii", "Harajuku", "fashion", "style"]);
        let bad = "a streetwear outfit with a bold graphic tee, layered tutu skirt, patterned knee-high socks, and platform shoes, embodying a playful urban aesthetic.";
        assert_eq!(
            validate_completion(&mc, bad, &ValidationPolicy::default()),
            Validation::reject("non-masked token altered")
        );
    }

    #[test]
    fn fig3_survivors_in_order() {
        let mc = masked_at(FIG3, &["outfit", "white", "top", "Harajuku"]);
        let llm = ScriptedLlm::new([
            "A photo of a woman wearing a pastel-themed oversized sweater with a cute graphic print, lavender tutu skirt, patterned knee-high socks, and platform shoes, embodying a kawaii street fashion style.",
        ]);
        let cc = fill_masks(&llm, &mc, &ValidationPolicy::default(), "fig3", &LlmLog::new()).unwrap();
        assert!(cc.validation.is_accepted());
        let fills: Vec<&str> = cc.filled_spans.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(fills, vec!["oversized sweater", "cute", "print", "street"]);
        let lower = cc.completed_text.to_lowercase();
        let (g, t, p) = (
            lower.find("graphic").unwrap(),
            lower.find("tutu skirt").unwrap(),
            lower.find("platform shoes").unwrap(),
        );
        assert!(g < t && t < p);
    }

    #[test]
    fn length_bound() {
        let mc = masked_at("a red dress", &["red"]);
        let policy = ValidationPolicy {
            max_words_per_mask: 10,
            ..ValidationPolicy::default()
        };
        let long = "a very very bright shiny deep dress";
        assert_eq!(validate_completion(&mc, long, &policy), Validation::reject("completion too long"));
        let relaxed = ValidationPolicy {
            check_length: false,
            ..policy
        };
        assert!(validate_completion(&mc, long, &relaxed).is_accepted());
    }

    #[test]
    fn caption_retry_state_machine() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("img.png");
        fs::write(&path, mock::render_png(8, 8, 1, Some(StyleLabel::Fairy), "")).unwrap();
        let rec = ImageRecord {
            id: "train/fairy/img.png".into(),
            path,
            label: StyleLabel::Fairy,
            split: crate::corpus::Split::Train,
        };

        // violation, then success: accepted on attempt 2
        let llm = ScriptedLlm::new(["a red dress", "A photo of a woman wearing a red dress."]);
        let log = LlmLog::new();
        let r = caption_image(&llm, &rec, &log).unwrap();
        assert_eq!(r.attempts, 2);
        assert_eq!(r.caption(), Some("a red dress"));
        assert_eq!(llm.requests().len(), 2);
        assert_eq!(llm.requests()[0], llm.requests()[1]);

        // two violations: rejected, both raws archived, no third call
        let llm = ScriptedLlm::new(["nope", "still nope", "A photo of a woman wearing a hat."]);
        let r = caption_image(&llm, &rec, &log).unwrap();
        match r.outcome {
            CaptionOutcome::Rejected { reason, raw_responses } => {
                assert_eq!(reason, "missing prefix");
                assert_eq!(raw_responses, vec!["nope", "still nope"]);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(llm.requests().len(), 2);

        // 35 words twice
        let long = format!("A photo of a woman wearing a {}", vec!["red"; 34].join(" "));
        let llm = ScriptedLlm::new([long.clone(), long]);
        let r = caption_image(&llm, &rec, &log).unwrap();
        assert!(matches!(r.outcome, CaptionOutcome::Rejected { ref reason, .. } if reason == "length>30"));

        // transport failure surfaces as error
        let llm = ScriptedLlm::new(Vec::<String>::new());
        assert!(matches!(caption_image(&llm, &rec, &log), Err(PromptError::Backend(_))));
    }

    #[test]
    fn mock_caption_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("img.png");
        fs::write(&path, mock::render_png(8, 8, 4, Some(StyleLabel::Rock), "")).unwrap();
        let rec = ImageRecord {
            id: "train/rock/img.png".into(),
            path,
            label: StyleLabel::Rock,
            split: crate::corpus::Split::Train,
        };
        let log = LlmLog::new();
        let a = caption_image(&MockLlm, &rec, &log).unwrap();
        let b = caption_image(&MockLlm, &rec, &log).unwrap();
        assert_eq!(a, b);
        let c = a.caption().unwrap();
        assert!(c.starts_with("a "));
        assert!(c.split_whitespace().count() <= MAX_CAPTION_WORDS);
    }

    #[test]
    fn replay_reproduces_completions() {
        let tc = analyze(FIG3, &LexiconTagger::builtin()).unwrap();
        let log = LlmLog::new();
        let mut live = Vec::new();
        for seed in 0..5 {
            let mc = crate::lingua::mask_caption(&tc, 0.5, seed).unwrap();
            live.push(fill_masks(&MockLlm, &mc, &ValidationPolicy::default(), &seed.to_string(), &log).unwrap());
        }
        let replay = ReplayLlm::from_jsonl(&log.to_jsonl()).unwrap();
        for (seed, expected) in live.iter().enumerate() {
            let mc = crate::lingua::mask_caption(&tc, 0.5, seed as u64).unwrap();
            let got = fill_masks(&replay, &mc, &ValidationPolicy::default(), "r", &LlmLog::new()).unwrap();
            assert_eq!(&got, expected);
        }
        let mc = crate::lingua::mask_caption(&tc, 0.5, 99).unwrap();
        assert!(fill_masks(&replay, &mc, &ValidationPolicy::default(), "r", &LlmLog::new()).is_err());
    }

    #[test]
    fn redaction_hides_image_data() {
        let req = caption_request(b"pixels", "image/png");
        let red = req.redacted();
        let s = serde_json::to_string(&red).unwrap();
        assert!(!s.contains("base64"));
        assert!(s.contains("sha256:"));
        assert_eq!(req.image_bytes().unwrap(), b"pixels");
    }
}
