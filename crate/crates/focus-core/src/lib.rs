//! Cost-adaptive visual question answering.
//!
//! The pipeline answers each visual question in one of two ways. A cheap
//! answerability gate samples the multimodal model a few times and, when every
//! sample is confident, the question is answered zero-shot (fast intuition).
//! Otherwise the question's key elements are extracted with a text model,
//! localized with an open-set segmentation service, drawn onto the image, and
//! the annotated image is re-queried (deliberate thinking). Every model call
//! and millisecond is accounted in a per-question cost ledger, and a benchmark
//! harness computes the standard VQA metrics over manifest files.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`gateway`] — clients for the three remote capabilities (multimodal chat,
//!   text chat, segmentation) plus scripted mock backends for testing.
//! - [`gate`] — the answerability gate and its three confidence strategies.
//! - [`conceptualize`] — keyword extraction, localization, and overlay
//!   rendering (the deliberate front half).
//! - [`router`] — the entry point dispatching between the two paths, with
//!   cost accounting and the ablation baseline modes.
//! - [`bench`] — manifest ingestion, metrics, benchmark execution, and the
//!   analysis reports.
//! - [`config`] — the TOML run configuration and mock script files.

pub mod bench;
pub mod conceptualize;
pub mod config;
pub mod gate;
pub mod gateway;
pub mod image_ref;
pub mod router;

pub use bench::{BenchError, BenchmarkReport, QARecord, QuestionType};
pub use conceptualize::{AnnotatedImage, ConceptualizerConfig, KeywordSet, OverlayStyle};
pub use gate::{AnswerabilityVerdict, GateConfig, GateDecision, RouteMode, Strategy, Verdict};
pub use gateway::{
    BackendKind, BackendSpec, BoundingBox, ChatClient, ChatRequest, ChatResponse, Detection,
    GatewayError, SegmentClient,
};
pub use image_ref::{ImageError, ImageRef};
pub use router::{Backends, CostLedger, PipelineConfig, PipelineMode, RoutePath, Trace};
