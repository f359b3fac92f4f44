//! Delegating the revision patch to a text-generation client, with the
//! preset library as fallback.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planning::{ParameterBound, PolicyParameters, PARAMETER_BOUNDS};
use crate::reflection::PresetKind;
use crate::world::Cell;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const URL_VAR: &str = "HARNESS_LLM_URL";
pub const MAX_PROMPT_BYTES: usize = 8 * 1024;
pub const RECENT_EVENTS: usize = 5;
pub const CONFIDENCE_HISTORY: usize = 5;
pub const TOP_MARGINALS: usize = 10;
/// Longest rendering of a single event kept in a request.
const EVENT_CHARS: usize = 900;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transport error: {0}")]
pub struct TransportError(pub String);

/// Anything that turns a prompt into text. Implementations must be safe to
/// share between games running in parallel.
pub trait GenerationClient: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, TransportError>;
}

/// Client for a local generation server speaking
/// `POST {base}/api/generate {model, prompt, stream: false}`.
#[derive(Debug, Clone)]
pub struct HttpClient {
    base_url: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base_url: &str, model: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .proxy(None)
            .build();
        HttpClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    /// Base URL from `HARNESS_LLM_URL`, if set.
    pub fn from_env(model: &str) -> Option<Self> {
        std::env::var(URL_VAR).ok().filter(|s| !s.is_empty()).map(|url| HttpClient::new(&url, model, DEFAULT_TIMEOUT))
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    stream: bool,
}

#[derive(Deserialize)]
struct GenerateResponse {
    response: String,
}

impl GenerationClient for HttpClient {
    fn generate(&self, prompt: &str) -> Result<String, TransportError> {
        let url = format!("{}/api/generate", self.base_url);
        let body = GenerateRequest { model: &self.model, prompt, stream: false };
        let mut resp = self.agent.post(&url).send_json(&body).map_err(|e| TransportError(e.to_string()))?;
        let reply: GenerateResponse = resp.body_mut().read_json().map_err(|e| TransportError(e.to_string()))?;
        Ok(reply.response)
    }
}

/// Replays canned responses in order; fails once they run out.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    responses: Vec<String>,
    next: AtomicUsize,
}

impl Clone for ScriptedClient {
    /// The clone starts again from the first response.
    fn clone(&self) -> Self {
        ScriptedClient::new(self.responses.clone())
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script: {0}")]
    Io(#[from] std::io::Error),
    #[error("script must be a JSON array of strings: {0}")]
    Format(#[from] serde_json::Error),
}

impl ScriptedClient {
    pub fn new(responses: Vec<String>) -> Self {
        ScriptedClient { responses, next: AtomicUsize::new(0) }
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        Ok(ScriptedClient::new(serde_json::from_str(text)?))
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        ScriptedClient::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn calls(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }
}

impl GenerationClient for ScriptedClient {
    fn generate(&self, _prompt: &str) -> Result<String, TransportError> {
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        self.responses.get(i).cloned().ok_or_else(|| TransportError("script exhausted".to_string()))
    }
}

/// Fails every call.
#[derive(Debug, Clone, Copy, Default)]
pub struct FailingClient;

impl GenerationClient for FailingClient {
    fn generate(&self, _prompt: &str) -> Result<String, TransportError> {
        Err(TransportError("unavailable".to_string()))
    }
}

/// What the client is told about the game when the gate opens.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RevisionRequest {
    pub turn: usize,
    pub confidence_history: Vec<f64>,
    pub top_marginals: Vec<(Cell, f64)>,
    pub entropy: f64,
    pub recent_events: Vec<String>,
    pub parameters: PolicyParameters,
    pub bounds: Vec<ParameterBound>,
}

fn truncate(mut s: String, max: usize) -> String {
    if s.len() > max {
        let mut cut = max;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
        s.push_str("...");
    }
    s
}

impl RevisionRequest {
    /// Keeps the last few confidences and events and the highest marginals
    /// (unfired cells only, lowest index first on ties).
    pub fn new(
        turn: usize,
        confidences: &[f64],
        marginals: &[(Cell, f64)],
        entropy: f64,
        events: &[String],
        parameters: PolicyParameters,
    ) -> Self {
        let tail = |n: usize, len: usize| len.saturating_sub(n);
        let mut top = marginals.to_vec();
        top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        top.truncate(TOP_MARGINALS);
        RevisionRequest {
            turn,
            confidence_history: confidences[tail(CONFIDENCE_HISTORY, confidences.len())..].to_vec(),
            top_marginals: top,
            entropy,
            recent_events: events[tail(RECENT_EVENTS, events.len())..]
                .iter()
                .map(|e| truncate(e.clone(), EVENT_CHARS))
                .collect(),
            parameters,
            bounds: PARAMETER_BOUNDS.to_vec(),
        }
    }
}

/// Deterministic prompt text for a request.
pub fn render_prompt(request: &RevisionRequest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "You tune the shot-selection policy of a Battleship agent playing on a noisy board.");
    let _ = writeln!(out, "Turn: {}", request.turn);
    let conf: Vec<String> = request.confidence_history.iter().map(|c| format!("{c:.3}")).collect();
    let _ = writeln!(out, "Model confidence, oldest first: {}", conf.join(", "));
    let _ = writeln!(out, "Posterior entropy: {:.3} nats", request.entropy);
    let top: Vec<String> =
        request.top_marginals.iter().map(|(c, p)| format!("({},{})={p:.3}", c.row, c.col)).collect();
    let _ = writeln!(out, "Most likely unfired cells: {}", top.join(" "));
    let _ = writeln!(out, "Parameters (current value, inclusive bounds):");
    for b in &request.bounds {
        let value = request.parameters.get(b.name).unwrap_or(f64::NAN);
        let _ = writeln!(out, "  {} = {} in [{}, {}]", b.name, value, b.lo, b.hi);
    }
    let _ = writeln!(out, "Recent events, oldest first:");
    for e in &request.recent_events {
        let _ = writeln!(out, "  {e}");
    }
    let _ = writeln!(
        out,
        "Answer with one JSON object assigning new values to one or more of the parameters above, \
         for example {{\"closeoutBias\": 0.3}}. Stay within the bounds. Output nothing else."
    );
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureReason {
    Transport,
    Parse,
    Schema,
    Bounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolFailure {
    pub reason: FailureReason,
    pub detail: String,
}

impl ProtocolFailure {
    fn new(reason: FailureReason, detail: impl Into<String>) -> Self {
        ProtocolFailure { reason, detail: detail.into() }
    }
}

/// A validated set of parameter assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionPatchProposal {
    pub assignments: BTreeMap<String, f64>,
}

impl RevisionPatchProposal {
    /// Checks names and bounds again and applies the assignments.
    pub fn apply(&self, params: &PolicyParameters) -> Result<PolicyParameters, ProtocolFailure> {
        params.with_map(&self.assignments).map_err(|e| ProtocolFailure::new(FailureReason::Bounds, e.to_string()))
    }
}

/// Drops one surrounding markdown code fence, if there is one.
fn unfence(text: &str) -> &str {
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let body = rest.split_once('\n').map_or("", |(_, b)| b);
        if let Some(inner) = body.trim_end().strip_suffix("```") {
            return inner.trim();
        }
    }
    t
}

/// Parses and validates a client reply.
pub fn parse_proposal(text: &str) -> Result<RevisionPatchProposal, ProtocolFailure> {
    let value: serde_json::Value =
        serde_json::from_str(unfence(text)).map_err(|e| ProtocolFailure::new(FailureReason::Parse, e.to_string()))?;
    let object = value.as_object().ok_or_else(|| ProtocolFailure::new(FailureReason::Schema, "not a JSON object"))?;
    if object.is_empty() {
        return Err(ProtocolFailure::new(FailureReason::Schema, "no assignments"));
    }
    let mut assignments = BTreeMap::new();
    for (name, v) in object {
        let bound = PARAMETER_BOUNDS
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| ProtocolFailure::new(FailureReason::Schema, format!("unknown parameter {name}")))?;
        let x = v
            .as_f64()
            .ok_or_else(|| ProtocolFailure::new(FailureReason::Schema, format!("{name} is not a number")))?;
        if !(x >= bound.lo && x <= bound.hi) {
            return Err(ProtocolFailure::new(
                FailureReason::Bounds,
                format!("{name} = {x} outside [{}, {}]", bound.lo, bound.hi),
            ));
        }
        assignments.insert(name.clone(), x);
    }
    Ok(RevisionPatchProposal { assignments })
}

pub fn propose_patch(
    client: &dyn GenerationClient,
    request: &RevisionRequest,
) -> Result<RevisionPatchProposal, ProtocolFailure> {
    let text = client
        .generate(&render_prompt(request))
        .map_err(|e| ProtocolFailure::new(FailureReason::Transport, e.0))?;
    parse_proposal(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Llm,
    Preset,
}

/// How one client round went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LlmAttempt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<RevisionPatchProposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<ProtocolFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_phi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevisionOutcome {
    /// Parameters after the revision; `None` when nothing was applied.
    pub applied: Option<PolicyParameters>,
    pub provenance: Option<Provenance>,
    pub llm: LlmAttempt,
}

/// Asks the client for a patch and keeps it only when it parses, validates
/// and previews at least `delta_min`; otherwise applies `preset` (if any).
pub fn revise_with_fallback(
    client: &dyn GenerationClient,
    request: &RevisionRequest,
    current: &PolicyParameters,
    preset: Option<PresetKind>,
    delta_min: f64,
    preview: impl Fn(&PolicyParameters) -> f64,
) -> RevisionOutcome {
    let mut llm = LlmAttempt { proposal: None, failure: None, delta_phi: None };
    match propose_patch(client, request).and_then(|p| p.apply(current).map(|next| (p, next))) {
        Ok((proposal, next)) => {
            let dphi = preview(&next);
            llm.proposal = Some(proposal);
            llm.delta_phi = Some(dphi);
            if dphi >= delta_min {
                return RevisionOutcome { applied: Some(next), provenance: Some(Provenance::Llm), llm };
            }
        }
        Err(failure) => llm.failure = Some(failure),
    }
    match preset {
        Some(kind) => RevisionOutcome { applied: Some(kind.apply(current)), provenance: Some(Provenance::Preset), llm },
        None => RevisionOutcome { applied: None, provenance: None, llm },
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    use super::*;

    fn request(events: usize) -> RevisionRequest {
        let marginals: Vec<(Cell, f64)> = (0..64).map(|i| (Cell::from_index(i, 8), (i % 7) as f64 / 7.0)).collect();
        let events: Vec<String> = (0..events).map(|i| format!("{{\"turn\":{i},\"kind\":\"action\"}}")).collect();
        RevisionRequest::new(12, &[0.9, 0.8, 0.75, 0.7, 0.69, 0.6], &marginals, 30.5, &events, PolicyParameters::default())
    }

    #[test]
    fn prompt_is_deterministic_and_lists_every_parameter() {
        let r = request(3);
        assert_eq!(render_prompt(&r), render_prompt(&r));
        let text = render_prompt(&r);
        for b in PARAMETER_BOUNDS {
            assert!(text.contains(&format!("{} = ", b.name)), "{}", b.name);
            assert!(text.contains(&format!("[{}, {}]", b.lo, b.hi)));
        }
        assert_eq!(r.confidence_history.len(), 5);
        assert_eq!(r.top_marginals.len(), 10);
        assert_eq!(r.top_marginals[0].0, Cell::from_index(6, 8));
    }

    #[test]
    fn long_histories_are_cut() {
        let huge = "x".repeat(50_000);
        let r = RevisionRequest::new(1, &[], &[], 0.0, &vec![huge; 40], PolicyParameters::default());
        assert_eq!(r.recent_events.len(), 5);
        assert!(render_prompt(&r).len() < MAX_PROMPT_BYTES);
        let r = request(100);
        assert_eq!(r.recent_events[0], "{\"turn\":95,\"kind\":\"action\"}");
    }

    #[test]
    fn proposal_validation() {
        let ok = parse_proposal("{\"closeoutBias\": 0.25}").unwrap();
        assert_eq!(ok.assignments["closeoutBias"], 0.25);
        assert_eq!(parse_proposal("Sure! I would raise the bias.").unwrap_err().reason, FailureReason::Parse);
        assert_eq!(parse_proposal("{\"closeoutBias\": 9.0}").unwrap_err().reason, FailureReason::Bounds);
        assert_eq!(parse_proposal("{\"temperature\": 0.1}").unwrap_err().reason, FailureReason::Schema);
        assert_eq!(parse_proposal("{}").unwrap_err().reason, FailureReason::Schema);
        assert_eq!(parse_proposal("[0.3]").unwrap_err().reason, FailureReason::Schema);
        assert_eq!(parse_proposal("{\"closeoutBias\": \"high\"}").unwrap_err().reason, FailureReason::Schema);
        let fenced = parse_proposal("```json\n{\"roiFocusFactor\": 2}\n```").unwrap();
        assert_eq!(fenced.assignments["roiFocusFactor"], 2.0);
    }

    #[test]
    fn scripted_client_replays_in_order() {
        let client = ScriptedClient::from_json(r#"["{\"closeoutBias\": 0.25}", "nope"]"#).unwrap();
        let r = request(1);
        assert!(propose_patch(&client, &r).is_ok());
        assert_eq!(propose_patch(&client, &r).unwrap_err().reason, FailureReason::Parse);
        assert_eq!(propose_patch(&client, &r).unwrap_err().reason, FailureReason::Transport);
        assert_eq!(client.calls(), 3);
        assert_eq!(client.clone().calls(), 0);
        assert!(ScriptedClient::from_json("{\"a\": 1}").is_err());
    }

    #[test]
    fn fallback_rules() {
        let r = request(1);
        let current = PolicyParameters::default();
        let good = ScriptedClient::new(vec!["{\"closeoutBias\": 0.25}".into()]);
        let out = revise_with_fallback(&good, &r, &current, Some(PresetKind::CoarseRoiCollapse), 0.01, |_| 0.02);
        assert_eq!(out.provenance, Some(Provenance::Llm));
        assert_eq!(out.applied.unwrap().closeout_bias, 0.25);
        assert_eq!(out.llm.delta_phi, Some(0.02));

        let weak = ScriptedClient::new(vec!["{\"closeoutBias\": 0.25}".into()]);
        let out = revise_with_fallback(&weak, &r, &current, Some(PresetKind::CoarseRoiCollapse), 0.01, |_| 0.003);
        assert_eq!(out.provenance, Some(Provenance::Preset));
        assert_eq!(out.applied, Some(PresetKind::CoarseRoiCollapse.apply(&current)));

        let out = revise_with_fallback(&FailingClient, &r, &current, Some(PresetKind::ClusterCloseoutBias), 0.01, |_| 1.0);
        assert_eq!(out.provenance, Some(Provenance::Preset));
        assert_eq!(out.llm.failure.unwrap().reason, FailureReason::Transport);

        let out = revise_with_fallback(&FailingClient, &r, &current, None, 0.01, |_| 1.0);
        assert_eq!((out.applied, out.provenance), (None, None));
    }

    /// Serves `replies` one connection each and hands back the request bodies.
    fn serve(replies: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, reply) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                assert!(request_line.starts_with("POST /api/generate "), "{request_line}");
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                bodies.push(String::from_utf8(body).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn http_client_wire_format() {
        let reply = serde_json::json!({"model": "m", "response": "{\"closeoutBias\": 0.3}", "done": true}).to_string();
        let (url, server) = serve(vec![(200, reply), (500, "{}".into()), (200, "{\"done\": true}".into())]);
        let client = HttpClient::new(&format!("{url}/"), "tiny-model", Duration::from_secs(5));
        assert_eq!(client.generate("hello").unwrap(), "{\"closeoutBias\": 0.3}");
        assert!(client.generate("again").is_err());
        assert!(client.generate("third").is_err());
        let bodies = server.join().unwrap();
        let first: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(first, serde_json::json!({"model": "tiny-model", "prompt": "hello", "stream": false}));
    }

    #[test]
    fn http_client_reports_unreachable_server() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let client = HttpClient::new(&format!("http://127.0.0.1:{port}"), "m", Duration::from_secs(2));
        let r = request(1);
        assert_eq!(propose_patch(&client, &r).unwrap_err().reason, FailureReason::Transport);
    }
}
