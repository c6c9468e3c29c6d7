//! Uniform client layer over the three remote capabilities the pipeline
//! needs: multimodal chat, text-only chat, and open-set segmentation.
//!
//! Real deployments use the HTTP clients in [`http`]; every test drives the
//! deterministic scripted mocks in [`mock`]. Both sit behind [`ChatClient`]
//! and [`SegmentClient`], so the rest of the pipeline never knows which it
//! is talking to.

pub mod http;
pub mod mock;

use serde::{Deserialize, Serialize};

use crate::image_ref::{ImageError, ImageRef};

pub use http::{HttpChatClient, HttpSegmentClient};
pub use mock::{ChatScript, MockChatBackend, MockSegmentBackend, ScriptedResponse, SegScript};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    /// Network-level failure (connect, timeout, broken stream).
    #[error("transport failure talking to {endpoint}: {reason}")]
    Transport { endpoint: String, reason: String },
    /// The backend answered, but not usefully (non-2xx or malformed payload).
    #[error("backend error from {endpoint}: {reason}")]
    Backend { endpoint: String, reason: String },
    /// Logprobs were requested and this backend cannot supply them.
    #[error("backend cannot supply token logprobs")]
    Unsupported,
    #[error(transparent)]
    ImageDecode(#[from] ImageError),
    /// A mock received a request its script does not cover. Always a test
    /// bug; never swallowed.
    #[error("mock script miss: {0}")]
    ScriptMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    MultimodalChat,
    TextChat,
    Segmentation,
}

impl BackendKind {
    pub fn is_chat(self) -> bool {
        matches!(self, BackendKind::MultimodalChat | BackendKind::TextChat)
    }
}

/// Hard cap on per-call retries, regardless of configuration.
pub const MAX_RETRIES: u32 = 5;

/// Where and how to reach one remote backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub endpoint: String,
    /// Secret reference, not the secret itself: `env:VAR` reads `VAR` at
    /// client construction; any other value is used verbatim as the bearer
    /// token. `None` falls back to the `FOCUS_API_KEY` environment variable.
    pub auth: Option<String>,
    pub model_name: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl BackendSpec {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_ms == 0 {
            return Err(GatewayError::InvalidSpec("timeout_ms must be positive".into()));
        }
        if self.retries > MAX_RETRIES {
            return Err(GatewayError::InvalidSpec(format!(
                "retries {} exceeds the bound of {MAX_RETRIES}",
                self.retries
            )));
        }
        if self.endpoint.is_empty() {
            return Err(GatewayError::InvalidSpec("endpoint is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone)]
pub enum MessagePart {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<MessagePart>,
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Single user message: one text part, optionally one image part.
    pub fn user(text: impl Into<String>, image: Option<&ImageRef>) -> Self {
        let mut parts = vec![MessagePart::Text(text.into())];
        if let Some(img) = image {
            parts.push(MessagePart::Image(img.clone()));
        }
        Self {
            messages: vec![ChatMessage {
                role: Role::User,
                parts,
            }],
            temperature: 0.0,
            max_tokens: 64,
            want_logprobs: false,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn with_logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest(
                "at least one user message is required".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn text_parts(&self) -> impl Iterator<Item = &str> {
        self.messages.iter().flat_map(|m| {
            m.parts.iter().filter_map(|p| match p {
                MessagePart::Text(t) => Some(t.as_str()),
                MessagePart::Image(_) => None,
            })
        })
    }

    /// Stable fingerprint over the text parts and the coarse temperature
    /// bucket (greedy vs sampling). Image bytes are deliberately excluded so
    /// that scripted mocks match repeated gate samples of the same question.
    pub fn fingerprint(&self) -> u64 {
        let parts: Vec<&str> = self.text_parts().collect();
        text_fingerprint(&parts, self.temperature)
    }
}

/// FNV-1a over the text parts plus the temperature bucket.
pub fn text_fingerprint(text_parts: &[&str], temperature: f64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let eat = |h: &mut u64, bytes: &[u8]| {
        for &b in bytes {
            *h ^= u64::from(b);
            *h = h.wrapping_mul(PRIME);
        }
    };
    for part in text_parts {
        eat(&mut h, part.as_bytes());
        eat(&mut h, &[0x1f]);
    }
    let bucket: &[u8] = if temperature > 0.0 { b"sampling" } else { b"greedy" };
    eat(&mut h, bucket);
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone)]
pub struct ChatResponse {
    pub text: String,
    /// Candidate set for the first generated content token, when requested
    /// and supported.
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub latency_ms: f64,
}

/// Axis-aligned box in pixel coordinates, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Clamp to `[0, w] x [0, h]`. Returns `None` when nothing remains.
    pub fn clamped(&self, width: u32, height: u32) -> Option<BoundingBox> {
        let x0 = self.x0.max(0.0).min(f64::from(width));
        let y0 = self.y0.max(0.0).min(f64::from(height));
        let x1 = self.x1.max(0.0).min(f64::from(width));
        let y1 = self.y1.max(0.0).min(f64::from(height));
        (x0 < x1 && y0 < y1).then_some(BoundingBox { x0, y0, x1, y1 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Detections from one segmentation call plus the call's measured (or
/// scripted) latency.
#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub detections: Vec<Detection>,
    pub latency_ms: f64,
}

/// Multimodal or text chat. Implementations are stateless after
/// construction and safe to share across threads.
pub trait ChatClient: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

/// Open-set segmentation: localize a free-text prompt in an image.
///
/// Implementations return only detections with `score >= box_threshold`,
/// sorted by descending score, with boxes clamped to the image bounds. An
/// empty list is a valid success.
pub trait SegmentClient: Send + Sync {
    fn segment(
        &self,
        image: &ImageRef,
        text_prompt: &str,
        box_threshold: f64,
    ) -> Result<SegmentOutcome, GatewayError>;
}

pub(crate) fn validate_threshold(box_threshold: f64) -> Result<(), GatewayError> {
    if !(0.0..=1.0).contains(&box_threshold) || box_threshold.is_nan() {
        return Err(GatewayError::InvalidRequest(format!(
            "box_threshold must be in [0,1], got {box_threshold}"
        )));
    }
    Ok(())
}

/// Shared post-processing applied by every segmentation client: clamp boxes
/// to the image, drop degenerate boxes, filter by threshold, sort by
/// descending score (stable, so equal scores keep backend order).
pub(crate) fn postprocess_detections(
    raw: Vec<Detection>,
    box_threshold: f64,
    (width, height): (u32, u32),
) -> Vec<Detection> {
    let mut kept: Vec<Detection> = raw
        .into_iter()
        .filter_map(|d| {
            let bbox = d.bbox.clamped(width, height)?;
            (d.score >= box_threshold).then_some(Detection { bbox, ..d })
        })
        .collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept
}
