//! The pipeline entry point: gate the question, dispatch to the fast or
//! deliberate path, and account every model call and millisecond.
//!
//! Stage wall times come from per-call latencies reported by the clients
//! (scripted for mocks, measured for HTTP). Calls that are logically
//! concurrent — the N gate samples, the per-keyword segmentation calls —
//! are attributed as the max of their latencies; sequential stages add up.
//! With scripted mocks the ledger is therefore bit-reproducible.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::{QARecord, QuestionType};
use crate::conceptualize::{
    composite, conceptualize, ConceptualizerConfig, Conceptualization, KeywordSet,
};
use crate::gate::{self, GateConfig, GateDecision, GateError, RouteMode};
use crate::gateway::{ChatClient, ChatRequest, Detection, GatewayError, SegmentClient};
use crate::image_ref::{ImageError, ImageRef};

/// Prompt sent to the segmentation backend by the annotate-everything
/// baseline, which marks all objects instead of question keywords.
pub const ANNOTATE_ALL_PROMPT: &str = "all objects";
/// Box threshold for the annotate-everything baseline. Deliberately lower
/// than the keyword path's 0.7 so the baseline marks broadly.
pub const ANNOTATE_ALL_THRESHOLD: f64 = 0.25;

/// Ledger stage names.
pub mod stage {
    pub const GATE: &str = "gate";
    pub const KEYWORDS: &str = "keywords";
    pub const LOCATE: &str = "locate";
    pub const ANSWER: &str = "answer";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    /// Gate each question, then fast or deliberate.
    Focus,
    /// Zero-shot everything (ablation baseline).
    OnlyFi,
    /// Conceptualize everything, no gate (ablation baseline).
    OnlyDt,
    /// Mark all objects with one generic segmentation call, no gate and no
    /// keyword extraction (set-of-mark-style baseline).
    AnnotateAll,
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PipelineMode::Focus => "focus",
            PipelineMode::OnlyFi => "only-fi",
            PipelineMode::OnlyDt => "only-dt",
            PipelineMode::AnnotateAll => "annotate-all",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub gate: GateConfig,
    pub conceptualizer: ConceptualizerConfig,
    /// Temperature of the final answer call; 0 keeps evaluation
    /// deterministic. High temperature applies only to gate sampling.
    pub answer_temperature: f64,
    /// Bound on concurrent records in the benchmark harness.
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Focus,
            gate: GateConfig::default(),
            conceptualizer: ConceptualizerConfig::default(),
            answer_temperature: 0.0,
            parallelism: 1,
        }
    }
}

/// The three clients a run needs. Cheap to clone; safe to share across
/// worker threads.
#[derive(Clone)]
pub struct Backends {
    pub mllm: Arc<dyn ChatClient>,
    pub lm: Arc<dyn ChatClient>,
    pub seg: Arc<dyn SegmentClient>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub gate_chat_calls: u64,
    pub answer_chat_calls: u64,
    pub lm_calls: u64,
    pub seg_calls: u64,
    pub wall_ms_by_stage: BTreeMap<String, f64>,
}

impl CostLedger {
    pub fn add_stage_wall(&mut self, stage: &str, ms: f64) {
        *self.wall_ms_by_stage.entry(stage.to_string()).or_insert(0.0) += ms;
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.wall_ms_by_stage.values().sum()
    }

    pub fn merge(&mut self, other: &CostLedger) {
        self.gate_chat_calls += other.gate_chat_calls;
        self.answer_chat_calls += other.answer_chat_calls;
        self.lm_calls += other.lm_calls;
        self.seg_calls += other.seg_calls;
        for (stage, ms) in &other.wall_ms_by_stage {
            self.add_stage_wall(stage, *ms);
        }
    }
}

/// Which execution path a trace actually took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutePath {
    Fast,
    Deliberate,
    AnnotateAll,
}

/// Full per-question audit record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub record_id: String,
    pub mode: PipelineMode,
    /// Absent only when the record failed before any path could run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path: Option<RoutePath>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decision: Option<GateDecision>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub keywords: Option<KeywordSet>,
    pub detections: Vec<Detection>,
    pub final_answer: String,
    /// Set when the gate failed after retries; the record fell back to the
    /// deliberate path.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gate_error: Option<String>,
    /// Set when the final answer call failed; the harness scores it wrong.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub answer_error: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
    pub ledger: CostLedger,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, thiserror::Error)]
pub enum CompareError {
    #[error("runs are empty or do not cover the same record ids")]
    MismatchedRuns,
}

/// The fixed answer prompt for a record's question type.
pub fn answer_prompt(record: &QARecord) -> String {
    match record.qtype {
        QuestionType::Mcq => {
            let mut options = String::new();
            for (i, choice) in record.choices.as_deref().unwrap_or(&[]).iter().enumerate() {
                let letter = (b'A' + i as u8) as char;
                options.push_str(&format!("{letter}. {choice}\n"));
            }
            format!(
                "Answer the multiple-choice question about the image. Reply with only the \
                 letter of the correct option.\nQuestion: {}\nOptions:\n{options}",
                record.question
            )
        }
        QuestionType::Open => format!(
            "Answer the question about the image. Reply with a single short phrase.\nQuestion: {}",
            record.question
        ),
        QuestionType::Binary => format!(
            "Answer the question about the image. Reply with only 'yes' or 'no'.\nQuestion: {}",
            record.question
        ),
    }
}

/// One zero-shot multimodal call with the (possibly annotated) image.
pub fn answer_with_image(
    record: &QARecord,
    image: &ImageRef,
    answer_temperature: f64,
    mllm: &dyn ChatClient,
) -> Result<(String, f64), GatewayError> {
    let req = ChatRequest::user(answer_prompt(record), Some(image))
        .with_temperature(answer_temperature)
        .with_max_tokens(64);
    let resp = mllm.chat(&req)?;
    Ok((resp.text, resp.latency_ms))
}

/// The fast-intuition path: answer directly from the original image.
pub fn answer_fast(
    record: &QARecord,
    image: &ImageRef,
    cfg: &PipelineConfig,
    mllm: &dyn ChatClient,
) -> Result<(String, f64), GatewayError> {
    answer_with_image(record, image, cfg.answer_temperature, mllm)
}

/// The deliberate path: conceptualize, then answer with the annotated image
/// and the unmodified question. Conceptualizer degradations are silent
/// (the annotated image falls back to the original).
pub struct DeliberateOutcome {
    pub conceptualization: Conceptualization,
    pub answer: Result<(String, f64), GatewayError>,
}

pub fn answer_deliberate(
    record: &QARecord,
    image: &ImageRef,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<DeliberateOutcome, ImageError> {
    let conc = conceptualize(
        image,
        &record.question,
        backends.lm.as_ref(),
        backends.seg.as_ref(),
        &cfg.conceptualizer,
    )?;
    let annotated = conc.image.rendered_ref();
    let answer = answer_with_image(record, &annotated, cfg.answer_temperature, backends.mllm.as_ref());
    Ok(DeliberateOutcome {
        conceptualization: conc,
        answer,
    })
}

fn apply_answer(trace: &mut Trace, outcome: Result<(String, f64), GatewayError>) {
    trace.ledger.answer_chat_calls += 1;
    match outcome {
        Ok((text, latency_ms)) => {
            trace.final_answer = text;
            trace.ledger.add_stage_wall(stage::ANSWER, latency_ms);
        }
        Err(e) => {
            trace.answer_error = Some(e.to_string());
            trace.ledger.add_stage_wall(stage::ANSWER, 0.0);
        }
    }
}

fn run_fast_path(trace: &mut Trace, record: &QARecord, image: &ImageRef, cfg: &PipelineConfig, backends: &Backends) {
    trace.path = Some(RoutePath::Fast);
    apply_answer(trace, answer_fast(record, image, cfg, backends.mllm.as_ref()));
}

fn run_deliberate_path(
    trace: &mut Trace,
    record: &QARecord,
    image: &ImageRef,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<(), PipelineError> {
    trace.path = Some(RoutePath::Deliberate);
    let outcome = answer_deliberate(record, image, cfg, backends)?;
    let conc = outcome.conceptualization;
    trace.ledger.lm_calls += conc.lm_calls as u64;
    trace.ledger.add_stage_wall(stage::KEYWORDS, conc.lm_wall_ms);
    trace.ledger.seg_calls += conc.seg_calls as u64;
    trace.ledger.add_stage_wall(stage::LOCATE, conc.seg_wall_ms);
    trace.keywords = Some(conc.keywords);
    trace.detections = conc.image.overlays.clone();
    trace.warnings.extend(conc.warnings);
    apply_answer(trace, outcome.answer);
    Ok(())
}

fn run_annotate_all_path(
    trace: &mut Trace,
    record: &QARecord,
    image: &ImageRef,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<(), PipelineError> {
    trace.path = Some(RoutePath::AnnotateAll);
    trace.ledger.seg_calls += 1;
    let detections = match backends
        .seg
        .segment(image, ANNOTATE_ALL_PROMPT, ANNOTATE_ALL_THRESHOLD)
    {
        Ok(out) => {
            trace.ledger.add_stage_wall(stage::LOCATE, out.latency_ms);
            out.detections
        }
        Err(e) => {
            trace.warnings.push(format!("annotate-all segmentation failed: {e}"));
            trace.ledger.add_stage_wall(stage::LOCATE, 0.0);
            Vec::new()
        }
    };
    let annotated = composite(image, detections, &cfg.conceptualizer.style)?;
    trace.detections = annotated.overlays.clone();
    let img_ref = annotated.rendered_ref();
    apply_answer(
        trace,
        answer_with_image(record, &img_ref, cfg.answer_temperature, backends.mllm.as_ref()),
    );
    Ok(())
}

/// Answer one record under the configured mode. Returns a fully populated
/// trace; gate and answer failures are recorded in it rather than aborting.
/// Only an unreadable/undecodable image is an error.
pub fn answer(
    record: &QARecord,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<Trace, PipelineError> {
    let image = ImageRef::from_path(&record.image_path)?;
    let mut trace = Trace {
        record_id: record.id.clone(),
        mode: cfg.mode,
        path: None,
        decision: None,
        keywords: None,
        detections: Vec::new(),
        final_answer: String::new(),
        gate_error: None,
        answer_error: None,
        warnings: Vec::new(),
        ledger: CostLedger::default(),
    };
    match cfg.mode {
        PipelineMode::OnlyFi => run_fast_path(&mut trace, record, &image, cfg, backends),
        PipelineMode::OnlyDt => run_deliberate_path(&mut trace, record, &image, cfg, backends)?,
        PipelineMode::AnnotateAll => run_annotate_all_path(&mut trace, record, &image, cfg, backends)?,
        PipelineMode::Focus => {
            match gate::elicit_answerability(&image, &record.question, &cfg.gate, backends.mllm.as_ref())
            {
                Ok(elicitation) => {
                    trace.ledger.gate_chat_calls += elicitation.verdicts.len() as u64;
                    // concurrent samples: the stage costs their max
                    let wall = elicitation
                        .latencies_ms
                        .iter()
                        .copied()
                        .fold(0.0f64, f64::max);
                    trace.ledger.add_stage_wall(stage::GATE, wall);
                    match gate::decide(elicitation.verdicts, &cfg.gate) {
                        Ok(decision) => {
                            let mode = decision.mode;
                            trace.decision = Some(decision);
                            match mode {
                                RouteMode::FastIntuition => {
                                    run_fast_path(&mut trace, record, &image, cfg, backends)
                                }
                                RouteMode::DeliberateThinking => {
                                    run_deliberate_path(&mut trace, record, &image, cfg, backends)?
                                }
                            }
                        }
                        Err(e) => {
                            // fail safe toward the careful path
                            trace.gate_error = Some(e.to_string());
                            run_deliberate_path(&mut trace, record, &image, cfg, backends)?;
                        }
                    }
                }
                Err(e) => {
                    if let GateError::Call { index, .. } = &e {
                        trace.ledger.gate_chat_calls += (*index as u64) + 1;
                    }
                    trace.ledger.add_stage_wall(stage::GATE, 0.0);
                    trace.gate_error = Some(e.to_string());
                    run_deliberate_path(&mut trace, record, &image, cfg, backends)?;
                }
            }
        }
    }
    Ok(trace)
}

/// Total wall time of run `a` relative to run `b` (same record ids).
pub fn relative_cost(traces_a: &[Trace], traces_b: &[Trace]) -> Result<f64, CompareError> {
    if traces_a.is_empty() || traces_b.is_empty() {
        return Err(CompareError::MismatchedRuns);
    }
    let mut ids_a: Vec<&str> = traces_a.iter().map(|t| t.record_id.as_str()).collect();
    let mut ids_b: Vec<&str> = traces_b.iter().map(|t| t.record_id.as_str()).collect();
    ids_a.sort_unstable();
    ids_b.sort_unstable();
    if ids_a != ids_b {
        return Err(CompareError::MismatchedRuns);
    }
    let total_a: f64 = traces_a.iter().map(|t| t.ledger.total_wall_ms()).sum();
    let total_b: f64 = traces_b.iter().map(|t| t.ledger.total_wall_ms()).sum();
    Ok(total_a / total_b)
}
