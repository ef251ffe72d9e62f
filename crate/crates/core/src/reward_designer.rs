//! Offline reward design: ask a chat model for candidate reward programs,
//! train a fresh policy on each, score by latency, feed the best back and
//! repeat for a fixed number of rounds. Nothing here runs at decision time.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arpo::{solve_scenario, ArpoSolution};
use crate::ppo::{evaluate_policy, mean, train, PpoActor, TrainConfig};
use crate::reward_dsl::{self, DslReward, RewardProgram};
use crate::rewards::RewardFn;
use crate::scenario::Scenario;

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_ROUNDS: usize = 3;
pub const DEFAULT_TOP_M: usize = 3;
/// Upper bound on the assembled prompt; keeps well inside common context limits.
pub const MAX_PROMPT_BYTES: usize = 64 * 1024;
pub const TRANSCRIPT_VERSION: &str = "laenet-design v1";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed reply: {0}")]
    Reply(String),
    #[error("mock client has no responses left")]
    Exhausted,
    #[error("client not configured: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("no valid candidate after {attempts} attempts in round {round}")]
    NoValidCandidates { round: usize, attempts: usize },
    #[error("invalid design config: {0}")]
    Config(String),
    #[error("prompt is {0} bytes, over the limit")]
    PromptTooLarge(usize),
    #[error("transcript: {0}")]
    Transcript(String),
    #[error("allocation failed: {0}")]
    Arpo(String),
}

/// The run stopped early; whatever was recorded up to that point is kept.
#[derive(Debug)]
pub struct DesignFailure {
    pub error: DesignError,
    pub transcript: DesignTranscript,
}

impl std::fmt::Display for DesignFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for DesignFailure {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: String) -> Self {
        ChatMessage {
            role: role.into(),
            content,
        }
    }
}

/// Role, task, requirements and supporting code text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role_text: String,
    pub task_text: String,
    pub requirements_text: String,
    pub code_snippets: String,
    /// Only present when refining.
    pub feedback_text: Option<String>,
}

impl PromptBundle {
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut user = String::new();
        for part in [&self.task_text, &self.requirements_text, &self.code_snippets] {
            user.push_str(part);
            user.push_str("\n\n");
        }
        if let Some(fb) = &self.feedback_text {
            user.push_str(fb);
            user.push_str("\n\n");
        }
        vec![
            ChatMessage::new("system", self.role_text.clone()),
            ChatMessage::new("user", user.trim_end().to_string()),
        ]
    }

    pub fn total_bytes(&self) -> usize {
        self.messages().iter().map(|m| m.content.len()).sum()
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        if self.role_text.trim().is_empty() || self.task_text.trim().is_empty() {
            return Err(DesignError::Config("role and task text must be non-empty".into()));
        }
        let n = self.total_bytes();
        if n > MAX_PROMPT_BYTES {
            return Err(DesignError::PromptTooLarge(n));
        }
        Ok(())
    }
}

/// What a refinement prompt reports about the previous round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundFeedback {
    /// Every candidate of the previous round with its score.
    pub scored: Vec<(Candidate, ScoreRecord)>,
    /// The candidates to refine, best first.
    pub top: Vec<(Candidate, ScoreRecord)>,
    pub insights: Option<String>,
}

const ROLE_TEXT: &str = "You are an expert in reward design for reinforcement learning. \
You write reward functions for a UAV trajectory agent in a small expression language. \
Reply with one JSON document and nothing else, in the format given in the requirements.";

const RESPONSE_SCHEMA: &str = r#"{"candidates": [{"name": "short-id", "rationale": "one or two sentences", "program": "<reward program>", "parent": <id of the refined candidate, refinement only>}]}"#;

const STATE_ACTION_TEXT: &str = "State per slot (per user n): UAV-user offset (x, y, z) in m, \
allocated resolution in pixels, transmit power in W, channel power gain, remaining backlog in bits; \
plus the slot index. Action: UAV displacement (dx, dy, dz) in m for the slot, clipped to the \
horizontal speed limit and to the altitude band. A reward program is evaluated once per slot \
transition and sees only the features listed in the grammar.";

/// Deterministic prompt text for one generation or refinement call.
pub fn build_prompt(scenario: &Scenario, grammar: &str, feedback: Option<&RoundFeedback>) -> PromptBundle {
    let p = &scenario.phys;
    let mut task = String::new();
    task.push_str(
        "Task: design a per-slot reward for a UAV that collects image queries from ground users \
over an air-to-ground uplink and answers them with an onboard vision-language model. Every user's \
image resolution and transmit power are fixed before flight; the agent only controls the UAV \
trajectory. The objective is to minimise the largest completion latency over all users \
(upload time plus inference and downlink), so the reward should favour serving the slowest user \
without starving the others.\n",
    );
    let _ = writeln!(
        task,
        "Slot length {} s, horizon {} slots, altitude band [{}, {}] m, speed limits {} m/s horizontal and {} m/s vertical, service area [-{h}, {h}] m square.",
        p.slot_len_s, p.horizon_slots, p.h_min_m, p.h_max_m, p.v_xy_max_mps, p.v_z_max_mps, h = p.area_half_m
    );
    let s = scenario.uav_start;
    let _ = writeln!(task, "UAV start: ({}, {}, {}) m. Users:", s[0], s[1], s[2]);
    for u in &scenario.users {
        let _ = writeln!(
            task,
            "- user {}: position ({}, {}) m, {} queries, min accuracy {}, bandwidth {} Hz, max power {} W",
            u.id, u.pos_m[0], u.pos_m[1], u.n_queries, u.acc_min, u.bandwidth_hz, u.p_max_w
        );
    }
    task.push_str(STATE_ACTION_TEXT);

    let mut req = String::new();
    req.push_str("Requirements:\n");
    req.push_str("- Write each reward as a program in the expression language below. No other code is executed.\n");
    req.push_str("- Prioritise the most relevant factors; a short program with a few well-scaled terms beats a long one.\n");
    req.push_str("- Use only the listed features and functions. Do not assume any quantity that is not given here.\n");
    req.push_str("- Keep terms roughly O(1) per slot, e.g. by dividing by the initial backlog or the area diagonal.\n");
    let _ = writeln!(req, "- Response format (JSON only):\n{RESPONSE_SCHEMA}");

    let code = format!("Expression language:\n\n{grammar}");

    let feedback_text = feedback.map(|fb| {
        let mut t = String::from("Results of the previous round (score = minus mean max latency in s, higher is better):\n");
        for (c, s) in &fb.scored {
            let score = match s.score {
                Some(v) => format!("{v:.4}"),
                None => format!("invalid ({})", s.diagnostic.as_deref().unwrap_or("rejected")),
            };
            let _ = writeln!(t, "- id {} `{}`: {}", c.id, c.name, score);
        }
        t.push_str("\nRefine the best candidates below. Keep what works, change one thing at a time, and set \"parent\" to the id you refined.\n");
        for (c, s) in &fb.top {
            let _ = writeln!(
                t,
                "\nid {} `{}` score {}:\n{}",
                c.id,
                c.name,
                s.score.map_or("invalid".into(), |v| format!("{v:.4}")),
                c.program_text.trim()
            );
        }
        if let Some(h) = fb.insights.as_deref().filter(|h| !h.trim().is_empty()) {
            let _ = write!(t, "\nInsights from the operator:\n{}\n", h.trim());
        }
        t.trim_end().to_string()
    });

    PromptBundle {
        role_text: ROLE_TEXT.into(),
        task_text: task.trim_end().to_string(),
        requirements_text: req.trim_end().to_string(),
        code_snippets: code.trim_end().to_string(),
        feedback_text,
    }
}

/// A chat-completion backend. Calls are blocking and sequential.
pub trait ChatClient {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, ClientError>;
}

/// Replays canned responses in order.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    responses: VecDeque<String>,
    calls: usize,
}

impl MockClient {
    pub fn new(responses: Vec<String>) -> Self {
        MockClient {
            responses: responses.into(),
            calls: 0,
        }
    }

    /// A JSON array of response strings.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ClientError::Config(format!("{}: {e}", path.as_ref().display())))?;
        let responses: Vec<String> =
            serde_json::from_str(&text).map_err(|e| ClientError::Config(format!("mock file: {e}")))?;
        Ok(MockClient::new(responses))
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn remaining(&self) -> usize {
        self.responses.len()
    }
}

impl ChatClient for MockClient {
    fn complete(&mut self, _messages: &[ChatMessage]) -> Result<String, ClientError> {
        self.calls += 1;
        self.responses.pop_front().ok_or(ClientError::Exhausted)
    }
}

/// OpenAI-compatible chat completions over HTTP.
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub url: String,
    pub key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub temperature: f64,
}

impl HttpClient {
    /// Base URL from `LAENET_LLM_URL`, key from `LAENET_LLM_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, ClientError> {
        let url = std::env::var("LAENET_LLM_URL").map_err(|_| ClientError::Config("LAENET_LLM_URL is not set".into()))?;
        Ok(HttpClient {
            url,
            key: std::env::var("LAENET_LLM_KEY").ok(),
            model: model.into(),
            timeout: Duration::from_secs(120),
            temperature: 0.0,
        })
    }

    fn endpoint(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    fn request(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
        });
        let mut req = agent.post(&self.endpoint()).header("Content-Type", "application/json");
        if let Some(k) = &self.key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| ClientError::Transport(e.to_string()))?;
        let v: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Reply(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| ClientError::Reply("no choices[0].message.content".into()))
    }
}

impl ChatClient for HttpClient {
    /// One retry on transport failure.
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        match self.request(messages) {
            Err(ClientError::Transport(_)) => self.request(messages),
            r => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub name: String,
    pub rationale: String,
    pub program_text: String,
    pub round: usize,
    pub parent: Option<usize>,
    pub valid: bool,
    pub diagnostic: Option<String>,
    /// Byte span of the parse error inside `program_text`.
    pub error_span: Option<(usize, usize)>,
    #[serde(skip)]
    pub program: Option<Arc<RewardProgram>>,
}

impl Candidate {
    fn new(id: usize, round: usize, raw: RawCandidate) -> Self {
        let mut c = Candidate {
            id,
            name: raw.name,
            rationale: raw.rationale,
            program_text: raw.program,
            round,
            parent: raw.parent,
            valid: false,
            diagnostic: None,
            error_span: None,
            program: None,
        };
        c.compile();
        c
    }

    fn compile(&mut self) {
        match reward_dsl::parse(&self.program_text) {
            Ok(p) => {
                self.valid = true;
                self.diagnostic = None;
                self.error_span = None;
                self.program = Some(Arc::new(p));
            }
            Err(e) => {
                self.valid = false;
                self.error_span = e.span().map(|s| (s.start, s.end));
                self.diagnostic = Some(e.to_string());
                self.program = None;
            }
        }
    }

    pub fn reward(&self) -> Option<DslReward> {
        self.program.as_ref().map(|p| DslReward {
            name: self.name.clone(),
            program: p.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub candidate_id: usize,
    /// −mean max latency; `None` means invalid (−∞).
    pub score: Option<f64>,
    /// Mean evaluation max latency per training seed.
    pub per_seed_latency_s: Vec<f64>,
    pub eval_episodes: usize,
    pub train_episodes: usize,
    pub diagnostic: Option<String>,
}

impl ScoreRecord {
    pub fn value(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn is_valid(&self) -> bool {
        self.score.is_some()
    }

    fn invalid(c: &Candidate, why: String) -> Self {
        ScoreRecord {
            candidate_id: c.id,
            score: None,
            per_seed_latency_s: Vec::new(),
            eval_episodes: 0,
            train_episodes: 0,
            diagnostic: Some(why),
        }
    }
}

/// Training and evaluation effort per candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBudget {
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for EvalBudget {
    fn default() -> Self {
        EvalBudget {
            train_episodes: 150,
            eval_episodes: 3,
            seeds: vec![0, 1],
            train: TrainConfig::desk(),
        }
    }
}

/// Train a fresh policy per seed with each valid candidate as the reward and
/// score it on held-out fading draws. Failures only invalidate that candidate.
pub fn evaluate_candidates(
    candidates: &[Candidate],
    scenario: &Scenario,
    solution: &ArpoSolution,
    budget: &EvalBudget,
) -> Vec<ScoreRecord> {
    candidates.iter().map(|c| evaluate_one(c, scenario, solution, budget)).collect()
}

fn evaluate_one(c: &Candidate, scenario: &Scenario, solution: &ArpoSolution, budget: &EvalBudget) -> ScoreRecord {
    let Some(reward) = c.reward() else {
        return ScoreRecord::invalid(c, c.diagnostic.clone().unwrap_or_else(|| "not parsed".into()));
    };
    if budget.seeds.is_empty() || budget.eval_episodes == 0 {
        return ScoreRecord::invalid(c, "empty evaluation budget".into());
    }
    let reward: Arc<dyn RewardFn> = Arc::new(reward);
    let mut per_seed = Vec::with_capacity(budget.seeds.len());
    for &seed in &budget.seeds {
        let cfg = TrainConfig {
            total_episodes: budget.train_episodes,
            seed,
            ..budget.train.clone()
        };
        let out = match train(scenario, solution, reward.clone(), &cfg) {
            Ok(o) => o,
            Err(e) => return ScoreRecord::invalid(c, format!("training failed: {e}")),
        };
        let mut actor = PpoActor::deterministic(out.policy);
        match evaluate_policy(scenario, solution, &mut actor, budget.eval_episodes, seed) {
            Ok(l) => per_seed.push(mean(&l)),
            Err(e) => return ScoreRecord::invalid(c, format!("evaluation failed: {e}")),
        }
    }
    let m = mean(&per_seed);
    if !m.is_finite() {
        return ScoreRecord::invalid(c, "non-finite latency".into());
    }
    ScoreRecord {
        candidate_id: c.id,
        score: Some(-m),
        per_seed_latency_s: per_seed,
        eval_episodes: budget.eval_episodes * budget.seeds.len(),
        train_episodes: budget.train_episodes * budget.seeds.len(),
        diagnostic: None,
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct RawCandidate {
    #[serde(default)]
    name: String,
    #[serde(default)]
    rationale: String,
    program: String,
    #[serde(default)]
    parent: Option<usize>,
}

#[derive(Deserialize)]
struct RawResponse {
    candidates: Vec<RawCandidate>,
}

/// Structured JSON first, then fenced code blocks. `None` when neither yields
/// anything.
fn parse_response(text: &str) -> Option<Vec<RawCandidate>> {
    if let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) {
        if a < b {
            if let Ok(r) = serde_json::from_str::<RawResponse>(&text[a..=b]) {
                if !r.candidates.is_empty() {
                    return Some(r.candidates);
                }
            }
        }
    }
    let blocks = fenced_blocks(text);
    if blocks.is_empty() {
        return None;
    }
    Some(
        blocks
            .into_iter()
            .enumerate()
            .map(|(i, program)| RawCandidate {
                name: format!("fenced-{i}"),
                rationale: String::new(),
                program,
                parent: None,
            })
            .collect(),
    )
}

fn fenced_blocks(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // Skip an info string such as ```text.
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        let Some(close) = body.find("```") else { break };
        let block = body[..close].trim();
        if !block.is_empty() {
            out.push(block.to_string());
        }
        rest = &body[close + 3..];
    }
    out
}

/// One round of the loop as it happened.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub prompts: Vec<Vec<ChatMessage>>,
    pub responses: Vec<String>,
    pub candidates: Vec<Candidate>,
    pub scores: Vec<ScoreRecord>,
    pub human_notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub k: usize,
    pub rounds: usize,
    pub top_m: usize,
    pub budget: EvalBudget,
    /// Free-text operator insights used in refinement prompts.
    pub insights: Option<String>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            k: DEFAULT_K,
            rounds: DEFAULT_ROUNDS,
            top_m: DEFAULT_TOP_M,
            budget: EvalBudget::default(),
            insights: None,
        }
    }
}

impl DesignConfig {
    pub fn validate(&self) -> Result<(), DesignError> {
        if self.k == 0 {
            return Err(DesignError::Config("k must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(DesignError::Config("rounds must be >= 1".into()));
        }
        if self.top_m == 0 {
            return Err(DesignError::Config("top_m must be >= 1".into()));
        }
        Ok(())
    }
}

/// Append-only record of a design run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignTranscript {
    pub version: String,
    pub config: DesignConfig,
    pub rounds: Vec<RoundRecord>,
    /// Id of the selected candidate.
    pub selected: Option<usize>,
    pub aborted: Option<String>,
}

impl DesignTranscript {
    pub fn new(config: DesignConfig) -> Self {
        DesignTranscript {
            version: TRANSCRIPT_VERSION.into(),
            config,
            rounds: Vec::new(),
            selected: None,
            aborted: None,
        }
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.rounds.iter().flat_map(|r| &r.candidates)
    }

    pub fn scores(&self) -> impl Iterator<Item = &ScoreRecord> {
        self.rounds.iter().flat_map(|r| &r.scores)
    }

    pub fn candidate(&self, id: usize) -> Option<&Candidate> {
        self.candidates().find(|c| c.id == id)
    }

    /// Every response in the order it was received.
    pub fn responses(&self) -> Vec<String> {
        self.rounds.iter().flat_map(|r| r.responses.iter().cloned()).collect()
    }

    /// A client that answers exactly as the recorded one did.
    pub fn replay_client(&self) -> MockClient {
        MockClient::new(self.responses())
    }

    /// Re-select from the recorded scores without calling any client.
    pub fn reselect(&self) -> Option<usize> {
        select_best(&self.scores().cloned().collect::<Vec<_>>())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DesignError> {
        let mut t: DesignTranscript =
            serde_json::from_str(text).map_err(|e| DesignError::Transcript(e.to_string()))?;
        if t.version != TRANSCRIPT_VERSION {
            return Err(DesignError::Transcript(format!("unsupported version {:?}", t.version)));
        }
        for r in &mut t.rounds {
            for c in &mut r.candidates {
                c.compile();
            }
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DesignError> {
        std::fs::write(path, self.to_json()).map_err(|e| DesignError::Transcript(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DesignError> {
        let text = std::fs::read_to_string(path).map_err(|e| DesignError::Transcript(e.to_string()))?;
        Self::from_json(&text)
    }
}

/// Highest valid score; ties go to the lowest id. Order of the input does not matter.
pub fn select_best(scores: &[ScoreRecord]) -> Option<usize> {
    scores
        .iter()
        .filter_map(|s| s.score.map(|v| (v, s.candidate_id)))
        .fold(None, |best: Option<(f64, usize)>, (v, id)| match best {
            Some((bv, bid)) if bv > v || (bv == v && bid < id) => Some((bv, bid)),
            _ => Some((v, id)),
        })
        .map(|(_, id)| id)
}

/// Ask for up to `k` candidates. One retry when nothing valid comes back.
pub fn generate_candidates(
    bundle: &PromptBundle,
    client: &mut dyn ChatClient,
    k: usize,
    record: &mut RoundRecord,
    next_id: &mut usize,
) -> Result<Vec<Candidate>, DesignError> {
    if k == 0 {
        return Err(DesignError::Config("k must be >= 1".into()));
    }
    bundle.validate()?;
    let messages = bundle.messages();
    const ATTEMPTS: usize = 2;
    for _ in 0..ATTEMPTS {
        record.prompts.push(messages.clone());
        let text = client.complete(&messages)?;
        record.responses.push(text.clone());
        let Some(raw) = parse_response(&text) else { continue };
        let cands: Vec<Candidate> = raw
            .into_iter()
            .take(k)
            .map(|r| {
                let c = Candidate::new(*next_id, record.round, r);
                *next_id += 1;
                c
            })
            .collect();
        let any_valid = cands.iter().any(|c| c.valid);
        record.candidates.extend(cands.iter().cloned());
        if any_valid {
            return Ok(cands);
        }
    }
    Err(DesignError::NoValidCandidates {
        round: record.round,
        attempts: ATTEMPTS,
    })
}

/// Top `m` valid candidates by score, best first, ties to the lowest id.
pub fn top_candidates(cands: &[Candidate], scores: &[ScoreRecord], m: usize) -> Vec<(Candidate, ScoreRecord)> {
    let mut pairs: Vec<(Candidate, ScoreRecord)> = cands
        .iter()
        .filter_map(|c| {
            scores
                .iter()
                .find(|s| s.candidate_id == c.id && s.is_valid())
                .map(|s| (c.clone(), s.clone()))
        })
        .collect();
    pairs.sort_by(|a, b| b.1.value().total_cmp(&a.1.value()).then(a.0.id.cmp(&b.0.id)));
    pairs.truncate(m);
    pairs
}

/// Build the refinement prompt from the scored round and ask for new
/// candidates. Children keep the id of the candidate they refine.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    scenario: &Scenario,
    cands: &[Candidate],
    scores: &[ScoreRecord],
    human_notes: Option<&str>,
    client: &mut dyn ChatClient,
    k: usize,
    top_m: usize,
    record: &mut RoundRecord,
    next_id: &mut usize,
) -> Result<Vec<Candidate>, DesignError> {
    let scored = cands
        .iter()
        .map(|c| {
            let s = scores
                .iter()
                .find(|s| s.candidate_id == c.id)
                .cloned()
                .unwrap_or_else(|| ScoreRecord::invalid(c, "not evaluated".into()));
            (c.clone(), s)
        })
        .collect();
    let top = top_candidates(cands, scores, top_m);
    let fb = RoundFeedback {
        scored,
        top: top.clone(),
        insights: human_notes.map(str::to_string),
    };
    record.human_notes = fb.insights.clone().filter(|h| !h.trim().is_empty());
    let bundle = build_prompt(scenario, reward_dsl::GRAMMAR, Some(&fb));
    let mut children = generate_candidates(&bundle, client, k, record, next_id)?;
    let top_ids: Vec<usize> = top.iter().map(|(c, _)| c.id).collect();
    for child in &mut children {
        child.parent = infer_parent(child, &top, &top_ids);
    }
    // The record holds copies; keep its lineage in step.
    for rc in record.candidates.iter_mut() {
        if let Some(c) = children.iter().find(|c| c.id == rc.id) {
            rc.parent = c.parent;
        }
    }
    Ok(children)
}

/// A declared parent among the refined set wins; otherwise the refined
/// candidate whose program text appears inside the child's, longest first.
fn infer_parent(child: &Candidate, top: &[(Candidate, ScoreRecord)], top_ids: &[usize]) -> Option<usize> {
    if let Some(p) = child.parent.filter(|p| top_ids.contains(p)) {
        return Some(p);
    }
    let squash = |s: &str| s.split_whitespace().collect::<String>();
    let body = squash(&child.program_text);
    top.iter()
        .map(|(c, _)| (c.id, squash(&c.program_text)))
        .filter(|(_, t)| !t.is_empty() && body.contains(t.as_str()))
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
        .map(|(id, _)| id)
}

/// Generate, evaluate, then refine and evaluate for the remaining rounds.
/// Returns the best candidate across all rounds.
pub fn design(
    scenario: &Scenario,
    client: &mut dyn ChatClient,
    cfg: &DesignConfig,
) -> Result<(Candidate, DesignTranscript), Box<DesignFailure>> {
    let mut transcript = DesignTranscript::new(cfg.clone());
    let fail = |error: DesignError, mut transcript: DesignTranscript| {
        transcript.aborted = Some(error.to_string());
        Box::new(DesignFailure { error, transcript })
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, transcript));
    }
    let solution = match solve_scenario(scenario) {
        Ok(s) => s,
        Err(e) => return Err(fail(DesignError::Arpo(e.to_string()), transcript)),
    };
    let mut next_id = 0;
    for round in 0..cfg.rounds {
        let mut record = RoundRecord {
            round,
            ..RoundRecord::default()
        };
        let made = if round == 0 {
            let bundle = build_prompt(scenario, reward_dsl::GRAMMAR, None);
            generate_candidates(&bundle, client, cfg.k, &mut record, &mut next_id)
        } else {
            let prev = transcript.rounds.last().expect("previous round");
            let (cands, scores) = (prev.candidates.clone(), prev.scores.clone());
            refine(
                scenario,
                &cands,
                &scores,
                cfg.insights.as_deref(),
                client,
                cfg.k,
                cfg.top_m,
                &mut record,
                &mut next_id,
            )
        };
        if let Err(e) = made {
            transcript.rounds.push(record);
            transcript.selected = transcript.reselect();
            return Err(fail(e, transcript));
        }
        record.scores = evaluate_candidates(&record.candidates, scenario, &solution, &cfg.budget);
        transcript.rounds.push(record);
    }
    transcript.selected = transcript.reselect();
    match transcript.selected.and_then(|id| transcript.candidate(id)).cloned() {
        Some(best) => Ok((best, transcript)),
        None => Err(fail(
            DesignError::NoValidCandidates {
                round: cfg.rounds - 1,
                attempts: 0,
            },
            transcript,
        )),
    }
}

/// Format a structured response the way the loop expects it; used for
/// fixtures.
pub fn format_response(entries: &[(&str, &str, &str, Option<usize>)]) -> String {
    let list: Vec<serde_json::Value> = entries
        .iter()
        .map(|(name, rationale, program, parent)| {
            let mut v = serde_json::json!({ "name": name, "rationale": rationale, "program": program });
            if let Some(p) = parent {
                v["parent"] = serde_json::json!(p);
            }
            v
        })
        .collect();
    serde_json::json!({ "candidates": list }).to_string()
}
