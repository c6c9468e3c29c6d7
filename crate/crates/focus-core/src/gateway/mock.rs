//! Deterministic scripted backends.
//!
//! A chat script maps `(request fingerprint, call index)` to a canned
//! response; the fingerprint covers only the request's text parts and its
//! temperature bucket (see [`ChatRequest::fingerprint`]), so repeated gate
//! samples of one question walk the same response list in order. Latencies
//! are scripted, not slept, which keeps cost tests instant and
//! bit-reproducible. An unscripted request is a test bug and fails loudly
//! with [`GatewayError::ScriptMiss`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::{
    postprocess_detections, validate_threshold, ChatClient, ChatRequest, ChatResponse, Detection,
    GatewayError, SegmentClient, SegmentOutcome, TokenLogprob,
};
use crate::image_ref::ImageRef;

/// How a scripted call fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedFailure {
    /// Network-level failure.
    Transport,
    /// Backend answered with an error payload / non-2xx status.
    Backend,
}

/// One canned chat reply.
#[derive(Debug, Clone)]
pub struct ScriptedResponse {
    pub text: String,
    pub latency_ms: f64,
    /// Candidate set for the first content token; served only when the
    /// request asks for logprobs.
    pub logprobs: Option<Vec<(String, f64)>>,
    pub failure: Option<ScriptedFailure>,
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            latency_ms: 0.0,
            logprobs: None,
            failure: None,
        }
    }

    pub fn with_latency(mut self, ms: f64) -> Self {
        self.latency_ms = ms;
        self
    }

    pub fn with_logprobs(mut self, candidates: Vec<(impl Into<String>, f64)>) -> Self {
        self.logprobs = Some(candidates.into_iter().map(|(t, lp)| (t.into(), lp)).collect());
        self
    }

    pub fn failing(kind: ScriptedFailure) -> Self {
        Self {
            text: String::new(),
            latency_ms: 0.0,
            logprobs: None,
            failure: Some(kind),
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if !self.latency_ms.is_finite() || self.latency_ms < 0.0 {
            return Err(GatewayError::InvalidSpec(format!(
                "scripted latency must be finite and >= 0, got {}",
                self.latency_ms
            )));
        }
        if let Some(cands) = &self.logprobs {
            for (tok, lp) in cands {
                if *lp > 0.0 || lp.is_nan() {
                    return Err(GatewayError::InvalidSpec(format!(
                        "scripted logprob for {tok:?} must be <= 0, got {lp}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Script for a chat backend: exact fingerprint entries, plus an optional
/// substring-rule tier consulted on fingerprint miss (used by operator
/// script files; rules repeat their last response when exhausted).
#[derive(Debug, Default, Clone)]
pub struct ChatScript {
    entries: HashMap<u64, Vec<ScriptedResponse>>,
    rules: Vec<(String, Vec<ScriptedResponse>)>,
}

impl ChatScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_fingerprint(mut self, fingerprint: u64, responses: Vec<ScriptedResponse>) -> Self {
        self.entries.entry(fingerprint).or_default().extend(responses);
        self
    }

    /// Script the request whose text parts are exactly `texts` at the given
    /// temperature bucket (`sampling` = temperature > 0).
    pub fn on_texts(self, texts: &[&str], sampling: bool, responses: Vec<ScriptedResponse>) -> Self {
        let fp = super::text_fingerprint(texts, if sampling { 1.0 } else { 0.0 });
        self.on_fingerprint(fp, responses)
    }

    /// Script a single-text-part request (the common case: one prompt).
    pub fn on_prompt(self, prompt: &str, sampling: bool, responses: Vec<ScriptedResponse>) -> Self {
        self.on_texts(&[prompt], sampling, responses)
    }

    /// Fallback rule: match any request whose text contains `needle`.
    pub fn on_contains(mut self, needle: impl Into<String>, responses: Vec<ScriptedResponse>) -> Self {
        self.rules.push((needle.into(), responses));
        self
    }

    fn validate(&self) -> Result<(), GatewayError> {
        for r in self.entries.values().flatten() {
            r.validate()?;
        }
        for (needle, responses) in &self.rules {
            if responses.is_empty() {
                return Err(GatewayError::InvalidSpec(format!(
                    "rule {needle:?} has no responses"
                )));
            }
            for r in responses {
                r.validate()?;
            }
        }
        Ok(())
    }
}

/// Scripted chat backend. Counts every invocation (including scripted
/// failures) so ledgers can be cross-checked against it.
pub struct MockChatBackend {
    script: ChatScript,
    // fingerprint -> next call index; rule index -> next call index
    cursor: Mutex<(HashMap<u64, usize>, HashMap<usize, usize>)>,
    calls: AtomicU64,
}

impl MockChatBackend {
    pub fn new(script: ChatScript) -> Result<Self, GatewayError> {
        script.validate()?;
        Ok(Self {
            script,
            cursor: Mutex::new((HashMap::new(), HashMap::new())),
            calls: AtomicU64::new(0),
        })
    }

    /// Total chat() invocations so far.
    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn next_response(&self, req: &ChatRequest) -> Result<ScriptedResponse, GatewayError> {
        let fp = req.fingerprint();
        let mut cursor = self.cursor.lock().expect("mock cursor poisoned");
        if let Some(responses) = self.script.entries.get(&fp) {
            let idx = cursor.0.entry(fp).or_insert(0);
            let Some(resp) = responses.get(*idx) else {
                return Err(GatewayError::ScriptMiss(format!(
                    "fingerprint {fp:#018x} exhausted after {} scripted responses",
                    responses.len()
                )));
            };
            *idx += 1;
            return Ok(resp.clone());
        }
        let text: String = req.text_parts().collect::<Vec<_>>().join("\n");
        for (rule_idx, (needle, responses)) in self.script.rules.iter().enumerate() {
            if text.contains(needle.as_str()) {
                let idx = cursor.1.entry(rule_idx).or_insert(0);
                let resp = responses.get(*idx).unwrap_or_else(|| {
                    responses.last().expect("rules are validated non-empty")
                });
                let resp = resp.clone();
                *idx += 1;
                return Ok(resp);
            }
        }
        Err(GatewayError::ScriptMiss(format!(
            "no entry for fingerprint {fp:#018x} (text {:?}, bucket {})",
            truncate(&text, 120),
            if req.temperature > 0.0 { "sampling" } else { "greedy" },
        )))
    }
}

impl ChatClient for MockChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let scripted = self.next_response(req)?;
        if let Some(kind) = scripted.failure {
            return Err(match kind {
                ScriptedFailure::Transport => GatewayError::Transport {
                    endpoint: "mock".into(),
                    reason: "scripted transport failure".into(),
                },
                ScriptedFailure::Backend => GatewayError::Backend {
                    endpoint: "mock".into(),
                    reason: "scripted backend failure".into(),
                },
            });
        }
        let token_logprobs = if req.want_logprobs {
            match &scripted.logprobs {
                Some(cands) => Some(
                    cands
                        .iter()
                        .map(|(token, logprob)| TokenLogprob {
                            token: token.clone(),
                            logprob: *logprob,
                        })
                        .collect(),
                ),
                // Requested but not scripted: this mock "cannot supply".
                None => return Err(GatewayError::Unsupported),
            }
        } else {
            None
        };
        Ok(ChatResponse {
            text: scripted.text,
            token_logprobs,
            latency_ms: scripted.latency_ms,
        })
    }
}

/// One scripted segmentation reply: the raw detections before threshold
/// filtering, plus the call latency.
#[derive(Debug, Clone)]
pub struct SegScriptEntry {
    pub detections: Vec<Detection>,
    pub latency_ms: f64,
    pub failure: Option<ScriptedFailure>,
}

impl SegScriptEntry {
    pub fn detections(detections: Vec<Detection>) -> Self {
        Self {
            detections,
            latency_ms: 0.0,
            failure: None,
        }
    }

    pub fn with_latency(mut self, ms: f64) -> Self {
        self.latency_ms = ms;
        self
    }

    pub fn failing(kind: ScriptedFailure) -> Self {
        Self {
            detections: Vec::new(),
            latency_ms: 0.0,
            failure: Some(kind),
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if !self.latency_ms.is_finite() || self.latency_ms < 0.0 {
            return Err(GatewayError::InvalidSpec("scripted latency must be >= 0".into()));
        }
        for d in &self.detections {
            if !(0.0..=1.0).contains(&d.score) || d.score.is_nan() {
                return Err(GatewayError::InvalidSpec(format!(
                    "scripted score for {:?} must be in [0,1], got {}",
                    d.label, d.score
                )));
            }
        }
        Ok(())
    }
}

/// Script for a segmentation backend, keyed by the exact text prompt.
#[derive(Debug, Default, Clone)]
pub struct SegScript {
    entries: HashMap<String, SegScriptEntry>,
    fallback: Option<SegScriptEntry>,
}

impl SegScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_prompt(mut self, prompt: impl Into<String>, entry: SegScriptEntry) -> Self {
        self.entries.insert(prompt.into(), entry);
        self
    }

    /// Catch-all entry for prompts with no exact match.
    pub fn fallback(mut self, entry: SegScriptEntry) -> Self {
        self.fallback = Some(entry);
        self
    }

    fn validate(&self) -> Result<(), GatewayError> {
        for e in self.entries.values().chain(self.fallback.as_ref()) {
            e.validate()?;
        }
        Ok(())
    }
}

/// Scripted segmentation backend. Stateless per prompt: the same prompt
/// always yields the same scripted reply.
pub struct MockSegmentBackend {
    script: SegScript,
    calls: AtomicU64,
}

impl MockSegmentBackend {
    pub fn new(script: SegScript) -> Result<Self, GatewayError> {
        script.validate()?;
        Ok(Self {
            script,
            calls: AtomicU64::new(0),
        })
    }

    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl SegmentClient for MockSegmentBackend {
    fn segment(
        &self,
        image: &ImageRef,
        text_prompt: &str,
        box_threshold: f64,
    ) -> Result<SegmentOutcome, GatewayError> {
        validate_threshold(box_threshold)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let entry = self
            .script
            .entries
            .get(text_prompt)
            .or(self.script.fallback.as_ref())
            .ok_or_else(|| {
                GatewayError::ScriptMiss(format!("no segmentation entry for prompt {text_prompt:?}"))
            })?;
        if let Some(kind) = entry.failure {
            return Err(match kind {
                ScriptedFailure::Transport => GatewayError::Transport {
                    endpoint: "mock".into(),
                    reason: "scripted transport failure".into(),
                },
                ScriptedFailure::Backend => GatewayError::Backend {
                    endpoint: "mock".into(),
                    reason: "scripted backend failure".into(),
                },
            });
        }
        let dims = image.dimensions()?;
        Ok(SegmentOutcome {
            detections: postprocess_detections(entry.detections.clone(), box_threshold, dims),
            latency_ms: entry.latency_ms,
        })
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}
