//! HTTP transports.
//!
//! Chat speaks an OpenAI-style chat-completions body with image parts as
//! base64 data URLs; segmentation speaks a minimal JSON POST
//! `{image_b64, text_prompt, box_threshold}`. Both retry transient failures
//! (network errors and 5xx) with exponential backoff, up to the spec's
//! retry budget, and measure per-call latency at the client.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{
    postprocess_detections, validate_threshold, BackendSpec, ChatClient, ChatRequest,
    ChatResponse, Detection, GatewayError, MessagePart, Role, SegmentClient, SegmentOutcome,
    TokenLogprob,
};
use crate::image_ref::ImageRef;

const DEFAULT_BACKOFF: Duration = Duration::from_millis(50);

/// Resolve a backend's auth reference to a bearer token. `env:VAR` reads the
/// variable; any other value is the token itself; `None` falls back to
/// `FOCUS_API_KEY`.
pub fn resolve_auth(auth: &Option<String>) -> Option<String> {
    match auth {
        Some(reference) => match reference.strip_prefix("env:") {
            Some(var) => std::env::var(var).ok(),
            None => Some(reference.clone()),
        },
        None => std::env::var("FOCUS_API_KEY").ok(),
    }
}

fn build_client(spec: &BackendSpec) -> Result<reqwest::blocking::Client, GatewayError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(spec.timeout_ms))
        .build()
        .map_err(|e| GatewayError::InvalidSpec(e.to_string()))
}

/// POST `body` to `spec.endpoint`, retrying transient failures. Transient
/// means a transport error or a 5xx status; 4xx fails immediately. Total
/// attempts are bounded by `1 + spec.retries`.
fn post_with_retries(
    client: &reqwest::blocking::Client,
    spec: &BackendSpec,
    token: &Option<String>,
    body: &serde_json::Value,
    backoff: Duration,
) -> Result<(serde_json::Value, f64), GatewayError> {
    let attempts = 1 + spec.retries;
    let mut last_err = None;
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(backoff * 2u32.saturating_pow(attempt - 1));
        }
        let started = Instant::now();
        let mut req = client.post(&spec.endpoint).json(body);
        if let Some(token) = token {
            req = req.bearer_auth(token);
        }
        match req.send() {
            Err(e) => {
                last_err = Some(GatewayError::Transport {
                    endpoint: spec.endpoint.clone(),
                    reason: e.to_string(),
                });
            }
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
                    let value: serde_json::Value =
                        resp.json().map_err(|e| GatewayError::Backend {
                            endpoint: spec.endpoint.clone(),
                            reason: format!("malformed JSON payload: {e}"),
                        })?;
                    return Ok((value, latency_ms));
                }
                let err = GatewayError::Backend {
                    endpoint: spec.endpoint.clone(),
                    reason: format!("HTTP {status}"),
                };
                if status.is_server_error() {
                    last_err = Some(err);
                } else {
                    return Err(err);
                }
            }
        }
    }
    Err(last_err.expect("at least one attempt was made"))
}

/// Chat over an OpenAI-style chat-completions endpoint.
pub struct HttpChatClient {
    spec: BackendSpec,
    client: reqwest::blocking::Client,
    token: Option<String>,
    backoff: Duration,
}

impl HttpChatClient {
    pub fn new(spec: BackendSpec) -> Result<Self, GatewayError> {
        spec.validate()?;
        if !spec.kind.is_chat() {
            return Err(GatewayError::InvalidSpec(format!(
                "{:?} is not a chat backend kind",
                spec.kind
            )));
        }
        let client = build_client(&spec)?;
        let token = resolve_auth(&spec.auth);
        Ok(Self {
            spec,
            client,
            token,
            backoff: DEFAULT_BACKOFF,
        })
    }

    /// Override the base retry backoff (tests use ~1 ms).
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }
}

/// The exact chat-completions request body.
pub fn build_chat_body(model_name: &str, req: &ChatRequest) -> serde_json::Value {
    let messages: Vec<serde_json::Value> = req
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
            };
            let content: Vec<serde_json::Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    MessagePart::Text(t) => json!({"type": "text", "text": t}),
                    MessagePart::Image(img) => {
                        json!({"type": "image_url", "image_url": {"url": img.data_url()}})
                    }
                })
                .collect();
            json!({"role": role, "content": content})
        })
        .collect();
    let mut body = json!({
        "model": model_name,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "logprobs": req.want_logprobs,
    });
    if let Some(seed) = req.seed {
        body["seed"] = json!(seed);
    }
    body
}

/// Pull the reply text and the first content token's candidate set out of a
/// chat-completions response.
fn parse_chat_response(
    value: &serde_json::Value,
    want_logprobs: bool,
    endpoint: &str,
) -> Result<(String, Option<Vec<TokenLogprob>>), GatewayError> {
    let malformed = |reason: String| GatewayError::Backend {
        endpoint: endpoint.to_string(),
        reason,
    };
    let choice = value
        .pointer("/choices/0")
        .ok_or_else(|| malformed("response has no choices[0]".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| malformed("choices[0].message.content is not a string".into()))?
        .to_string();
    if !want_logprobs {
        return Ok((text, None));
    }
    let Some(content) = choice.pointer("/logprobs/content").and_then(|v| v.as_array()) else {
        return Err(GatewayError::Unsupported);
    };
    if content.is_empty() {
        return Err(GatewayError::Unsupported);
    }
    // Prefer the first token's top_logprobs as the candidate set; fall back
    // to the per-token sequence itself.
    let raw: Vec<&serde_json::Value> = match content[0].pointer("/top_logprobs").and_then(|v| v.as_array()) {
        Some(top) if !top.is_empty() => top.iter().collect(),
        _ => content.iter().collect(),
    };
    let mut candidates = Vec::with_capacity(raw.len());
    for item in raw {
        let token = item
            .get("token")
            .and_then(|v| v.as_str())
            .ok_or_else(|| malformed("logprob entry without token".into()))?;
        let logprob = item
            .get("logprob")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| malformed("logprob entry without logprob".into()))?;
        if logprob > 0.0 || logprob.is_nan() {
            return Err(malformed(format!("logprob {logprob} for {token:?} is not <= 0")));
        }
        candidates.push(TokenLogprob {
            token: token.to_string(),
            logprob,
        });
    }
    Ok((text, Some(candidates)))
}

impl ChatClient for HttpChatClient {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let body = build_chat_body(&self.spec.model_name, req);
        let (value, latency_ms) =
            post_with_retries(&self.client, &self.spec, &self.token, &body, self.backoff)?;
        let (text, token_logprobs) =
            parse_chat_response(&value, req.want_logprobs, &self.spec.endpoint)?;
        Ok(ChatResponse {
            text,
            token_logprobs,
            latency_ms,
        })
    }
}

#[derive(Deserialize)]
struct SegResponseBody {
    detections: Vec<Detection>,
}

/// Segmentation over the minimal JSON contract
/// `{image_b64, text_prompt, box_threshold}` → `{detections: [...]}`.
pub struct HttpSegmentClient {
    spec: BackendSpec,
    client: reqwest::blocking::Client,
    token: Option<String>,
    backoff: Duration,
}

impl HttpSegmentClient {
    pub fn new(spec: BackendSpec) -> Result<Self, GatewayError> {
        spec.validate()?;
        if spec.kind != super::BackendKind::Segmentation {
            return Err(GatewayError::InvalidSpec(format!(
                "{:?} is not a segmentation backend kind",
                spec.kind
            )));
        }
        let client = build_client(&spec)?;
        let token = resolve_auth(&spec.auth);
        Ok(Self {
            spec,
            client,
            token,
            backoff: DEFAULT_BACKOFF,
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }
}

impl SegmentClient for HttpSegmentClient {
    fn segment(
        &self,
        image: &ImageRef,
        text_prompt: &str,
        box_threshold: f64,
    ) -> Result<SegmentOutcome, GatewayError> {
        validate_threshold(box_threshold)?;
        let dims = image.dimensions()?;
        use base64::Engine as _;
        let body = json!({
            "image_b64": base64::engine::general_purpose::STANDARD.encode(image.bytes()),
            "text_prompt": text_prompt,
            "box_threshold": box_threshold,
        });
        let (value, latency_ms) =
            post_with_retries(&self.client, &self.spec, &self.token, &body, self.backoff)?;
        let parsed: SegResponseBody =
            serde_json::from_value(value).map_err(|e| GatewayError::Backend {
                endpoint: self.spec.endpoint.clone(),
                reason: format!("malformed detections payload: {e}"),
            })?;
        for d in &parsed.detections {
            if !(0.0..=1.0).contains(&d.score) || d.score.is_nan() {
                return Err(GatewayError::Backend {
                    endpoint: self.spec.endpoint.clone(),
                    reason: format!("detection score {} outside [0,1]", d.score),
                });
            }
        }
        Ok(SegmentOutcome {
            detections: postprocess_detections(parsed.detections, box_threshold, dims),
            latency_ms,
        })
    }
}
