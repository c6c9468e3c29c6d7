//! Run configuration: a versioned TOML file selecting mode, gate,
//! conceptualizer, parallelism, and the three backends, with dotted-key
//! overrides so CI matrices need no file templating.
//!
//! Backends are either `transport = "http"` (endpoints default from the
//! `FOCUS_CHAT_ENDPOINT` / `FOCUS_SEG_ENDPOINT` environment variables, auth
//! from `FOCUS_API_KEY`) or `transport = "mock"` with a JSON script file, so
//! every CLI subcommand can run deterministically without live services.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::QuestionType;
use crate::conceptualize::{extraction_prompt, ConceptualizerConfig};
use crate::gate::{answerability_prompt, GateConfig};
use crate::gateway::mock::{
    ChatScript, MockChatBackend, MockSegmentBackend, ScriptedFailure, ScriptedResponse, SegScript,
    SegScriptEntry,
};
use crate::gateway::{
    BackendKind, BackendSpec, Detection, GatewayError, HttpChatClient, HttpSegmentClient,
};
use crate::router::{answer_prompt, Backends, PipelineConfig, PipelineMode};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid override {key:?}: {reason}")]
    Override { key: String, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Http,
    Mock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub transport: Transport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auth: Option<String>,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Mock transport only: JSON script file, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub script: Option<PathBuf>,
}

fn default_model_name() -> String {
    "default".into()
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub mllm: BackendConfig,
    pub lm: BackendConfig,
    pub seg: BackendConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_mode")]
    pub mode: PipelineMode,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub answer_temperature: f64,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub conceptualizer: ConceptualizerConfig,
    pub backends: BackendsConfig,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_mode() -> PipelineMode {
    PipelineMode::Focus
}

fn default_parallelism() -> usize {
    1
}

impl FileConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            mode: self.mode,
            gate: self.gate.clone(),
            conceptualizer: self.conceptualizer.clone(),
            answer_temperature: self.answer_temperature,
            parallelism: self.parallelism,
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn insert_at(
    node: &mut toml::Value,
    key: &str,
    segments: &[&str],
    value: toml::Value,
) -> Result<(), ConfigError> {
    let toml::Value::Table(table) = node else {
        return Err(ConfigError::Override {
            key: key.to_string(),
            reason: "path traverses a non-table value".into(),
        });
    };
    match segments {
        [] => Err(ConfigError::Override {
            key: key.to_string(),
            reason: "empty key".into(),
        }),
        [last] => {
            table.insert((*last).to_string(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = table
                .entry((*head).to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            insert_at(child, key, rest, value)
        }
    }
}

/// Apply `key.path=value` overrides onto the parsed TOML tree. Unknown keys
/// are rejected later by deserialization (`deny_unknown_fields`).
fn apply_overrides(root: &mut toml::Value, overrides: &[String]) -> Result<(), ConfigError> {
    for item in overrides {
        let (key, raw_value) = item.split_once('=').ok_or_else(|| ConfigError::Override {
            key: item.clone(),
            reason: "expected key.path=value".into(),
        })?;
        let key = key.trim();
        let segments: Vec<&str> = key.split('.').collect();
        if key.is_empty() || segments.iter().any(|s| s.is_empty()) {
            return Err(ConfigError::Override {
                key: item.clone(),
                reason: "empty key".into(),
            });
        }
        insert_at(root, key, &segments, parse_override_value(raw_value.trim()))?;
    }
    Ok(())
}

/// Parse a config document, applying dotted-key overrides first.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<FileConfig, ConfigError> {
    let mut root: toml::Value =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    apply_overrides(&mut root, overrides)?;
    let cfg: FileConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    if cfg.version != CONFIG_VERSION {
        return Err(ConfigError::Invalid(format!(
            "unsupported config version {} (expected {CONFIG_VERSION})",
            cfg.version
        )));
    }
    cfg.gate
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if !(0.0..=1.0).contains(&cfg.conceptualizer.box_threshold) {
        return Err(ConfigError::Invalid(format!(
            "conceptualizer.box_threshold must be in [0,1], got {}",
            cfg.conceptualizer.box_threshold
        )));
    }
    Ok(cfg)
}

/// Load a config file and apply overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, overrides)
}

// ---------------------------------------------------------------------------
// Mock script files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ChatTemplate {
    /// The answerability prompt for `question` (sampling bucket by default).
    Gate,
    /// The keyword-extraction prompt for `question` at `k_max`.
    Extract,
    /// The open-answer prompt for `question`.
    AnswerOpen,
    /// The multiple-choice prompt for `question` over `choices`.
    AnswerMcq,
    /// The yes/no prompt for `question`.
    AnswerBinary,
    /// Exact text part given in `text`.
    Raw,
    /// Substring rule on `text`, consulted when no exact entry matches.
    Contains,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptResponseFile {
    #[serde(default)]
    text: String,
    #[serde(default)]
    latency_ms: f64,
    #[serde(default)]
    logprobs: Option<Vec<(String, f64)>>,
    /// "transport" or "backend"
    #[serde(default)]
    fail: Option<String>,
}

impl ScriptResponseFile {
    fn build(&self) -> Result<ScriptedResponse, ConfigError> {
        if let Some(kind) = &self.fail {
            let failure = match kind.as_str() {
                "transport" => ScriptedFailure::Transport,
                "backend" => ScriptedFailure::Backend,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown failure kind {other:?} (expected transport|backend)"
                    )))
                }
            };
            return Ok(ScriptedResponse::failing(failure));
        }
        let mut resp = ScriptedResponse::text(self.text.clone()).with_latency(self.latency_ms);
        if let Some(lps) = &self.logprobs {
            resp = resp.with_logprobs(lps.clone());
        }
        Ok(resp)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChatScriptEntryFile {
    template: ChatTemplate,
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    choices: Option<Vec<String>>,
    #[serde(default)]
    k_max: Option<usize>,
    /// Temperature bucket; defaults to sampling for `gate`, greedy otherwise.
    #[serde(default)]
    sampling: Option<bool>,
    responses: Vec<ScriptResponseFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegScriptEntryFile {
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    latency_ms: f64,
    #[serde(default)]
    detections: Vec<Detection>,
    #[serde(default)]
    fail: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    chat: Vec<ChatScriptEntryFile>,
    #[serde(default)]
    segment: Vec<SegScriptEntryFile>,
    /// Catch-all for unscripted segmentation prompts.
    #[serde(default)]
    segment_fallback: Option<SegScriptEntryFile>,
}

fn synthetic_record(question: &str, qtype: QuestionType, choices: Option<Vec<String>>) -> crate::bench::QARecord {
    crate::bench::QARecord {
        id: String::new(),
        image_path: PathBuf::new(),
        question: question.to_string(),
        qtype,
        choices,
        gold: Vec::new(),
        subtask: None,
        pair_id: None,
    }
}

fn load_script_file(path: &Path) -> Result<ScriptFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
}

fn build_chat_script(file: &ScriptFile, k_max_default: usize) -> Result<ChatScript, ConfigError> {
    let mut script = ChatScript::new();
    for entry in &file.chat {
        let responses = entry
            .responses
            .iter()
            .map(ScriptResponseFile::build)
            .collect::<Result<Vec<_>, _>>()?;
        let need_question = || {
            entry.question.clone().ok_or_else(|| {
                ConfigError::Invalid("chat script entry needs a question".into())
            })
        };
        match entry.template {
            ChatTemplate::Gate => {
                let prompt = answerability_prompt(&need_question()?);
                script = script.on_prompt(&prompt, entry.sampling.unwrap_or(true), responses);
            }
            ChatTemplate::Extract => {
                let prompt =
                    extraction_prompt(&need_question()?, entry.k_max.unwrap_or(k_max_default));
                script = script.on_prompt(&prompt, entry.sampling.unwrap_or(false), responses);
            }
            ChatTemplate::AnswerOpen => {
                let record = synthetic_record(&need_question()?, QuestionType::Open, None);
                script = script.on_prompt(
                    &answer_prompt(&record),
                    entry.sampling.unwrap_or(false),
                    responses,
                );
            }
            ChatTemplate::AnswerMcq => {
                let choices = entry.choices.clone().ok_or_else(|| {
                    ConfigError::Invalid("answer-mcq script entry needs choices".into())
                })?;
                let record =
                    synthetic_record(&need_question()?, QuestionType::Mcq, Some(choices));
                script = script.on_prompt(
                    &answer_prompt(&record),
                    entry.sampling.unwrap_or(false),
                    responses,
                );
            }
            ChatTemplate::AnswerBinary => {
                let record = synthetic_record(&need_question()?, QuestionType::Binary, None);
                script = script.on_prompt(
                    &answer_prompt(&record),
                    entry.sampling.unwrap_or(false),
                    responses,
                );
            }
            ChatTemplate::Raw => {
                let text = entry.text.clone().ok_or_else(|| {
                    ConfigError::Invalid("raw script entry needs text".into())
                })?;
                script = script.on_prompt(&text, entry.sampling.unwrap_or(false), responses);
            }
            ChatTemplate::Contains => {
                let text = entry.text.clone().ok_or_else(|| {
                    ConfigError::Invalid("contains script entry needs text".into())
                })?;
                script = script.on_contains(text, responses);
            }
        }
    }
    Ok(script)
}

fn build_seg_entry(entry: &SegScriptEntryFile) -> Result<SegScriptEntry, ConfigError> {
    if let Some(kind) = &entry.fail {
        let failure = match kind.as_str() {
            "transport" => ScriptedFailure::Transport,
            "backend" => ScriptedFailure::Backend,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown failure kind {other:?}"
                )))
            }
        };
        return Ok(SegScriptEntry::failing(failure));
    }
    Ok(SegScriptEntry::detections(entry.detections.clone()).with_latency(entry.latency_ms))
}

fn build_seg_script(file: &ScriptFile) -> Result<SegScript, ConfigError> {
    let mut script = SegScript::new();
    for entry in &file.segment {
        let prompt = entry.prompt.clone().ok_or_else(|| {
            ConfigError::Invalid("segment script entry needs a prompt".into())
        })?;
        script = script.on_prompt(prompt, build_seg_entry(entry)?);
    }
    if let Some(fallback) = &file.segment_fallback {
        script = script.fallback(build_seg_entry(fallback)?);
    }
    Ok(script)
}

// ---------------------------------------------------------------------------
// Backend construction
// ---------------------------------------------------------------------------

fn http_spec(
    cfg: &BackendConfig,
    kind: BackendKind,
    slot: &str,
) -> Result<BackendSpec, ConfigError> {
    let env_var = match kind {
        BackendKind::Segmentation => "FOCUS_SEG_ENDPOINT",
        _ => "FOCUS_CHAT_ENDPOINT",
    };
    let endpoint = cfg
        .endpoint
        .clone()
        .or_else(|| std::env::var(env_var).ok())
        .ok_or_else(|| {
            ConfigError::Invalid(format!(
                "backend {slot:?} has no endpoint and {env_var} is unset"
            ))
        })?;
    let spec = BackendSpec {
        kind,
        endpoint,
        auth: cfg.auth.clone(),
        model_name: cfg.model_name.clone(),
        timeout_ms: cfg.timeout_ms,
        retries: cfg.retries,
    };
    spec.validate()?;
    Ok(spec)
}

fn build_chat_backend(
    cfg: &BackendConfig,
    kind: BackendKind,
    slot: &str,
    base_dir: &Path,
    k_max: usize,
) -> Result<Arc<dyn crate::gateway::ChatClient>, ConfigError> {
    match cfg.transport {
        Transport::Http => Ok(Arc::new(HttpChatClient::new(http_spec(cfg, kind, slot)?)?)),
        Transport::Mock => {
            let script_path = cfg.script.as_ref().ok_or_else(|| {
                ConfigError::Invalid(format!("mock backend {slot:?} needs a script file"))
            })?;
            let resolved = if script_path.is_relative() {
                base_dir.join(script_path)
            } else {
                script_path.clone()
            };
            let file = load_script_file(&resolved)?;
            Ok(Arc::new(MockChatBackend::new(build_chat_script(
                &file, k_max,
            )?)?))
        }
    }
}

fn build_seg_backend(
    cfg: &BackendConfig,
    slot: &str,
    base_dir: &Path,
) -> Result<Arc<dyn crate::gateway::SegmentClient>, ConfigError> {
    match cfg.transport {
        Transport::Http => Ok(Arc::new(HttpSegmentClient::new(http_spec(
            cfg,
            BackendKind::Segmentation,
            slot,
        )?)?)),
        Transport::Mock => {
            let script_path = cfg.script.as_ref().ok_or_else(|| {
                ConfigError::Invalid(format!("mock backend {slot:?} needs a script file"))
            })?;
            let resolved = if script_path.is_relative() {
                base_dir.join(script_path)
            } else {
                script_path.clone()
            };
            let file = load_script_file(&resolved)?;
            Ok(Arc::new(MockSegmentBackend::new(build_seg_script(&file)?)?))
        }
    }
}

/// Construct the three clients from the config. `base_dir` resolves
/// relative mock script paths (usually the config file's directory).
pub fn build_backends(cfg: &FileConfig, base_dir: &Path) -> Result<Backends, ConfigError> {
    let k_max = cfg.conceptualizer.k_max;
    Ok(Backends {
        mllm: build_chat_backend(
            &cfg.backends.mllm,
            BackendKind::MultimodalChat,
            "mllm",
            base_dir,
            k_max,
        )?,
        lm: build_chat_backend(&cfg.backends.lm, BackendKind::TextChat, "lm", base_dir, k_max)?,
        seg: build_seg_backend(&cfg.backends.seg, "seg", base_dir)?,
    })
}
