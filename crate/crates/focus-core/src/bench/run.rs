//! Benchmark execution: run the router over a manifest with bounded
//! parallelism, aggregate metrics and costs, and write traces + report
//! atomically.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::metrics::{score_binary, score_mcq, score_mme, score_vqa_soft, MmeReport};
use super::{BenchError, QARecord, QuestionType};
use crate::gate::{Strategy, Verdict};
use crate::router::{self, Backends, CostLedger, PipelineConfig, PipelineMode, RoutePath, Trace};

pub const REPORT_VERSION: u32 = 1;
pub const TRACES_FILENAME: &str = "traces.jsonl";
pub const REPORT_FILENAME: &str = "report.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub fast: usize,
    pub deliberate: usize,
    pub annotate_all: usize,
    /// Records that failed before any path could run.
    pub failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mcq_accuracy: Option<f64>,
    pub mcq_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vqa_soft_accuracy: Option<f64>,
    pub vqa_count: usize,
    /// Plain (unpaired) binary records.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub binary_accuracy: Option<f64>,
    pub binary_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mme: Option<MmeReport>,
    pub mme_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub gate_chat_calls: u64,
    pub answer_chat_calls: u64,
    pub lm_calls: u64,
    pub seg_calls: u64,
    pub wall_ms_by_stage: std::collections::BTreeMap<String, f64>,
    pub total_wall_ms: f64,
    /// Our total wall over the baseline run's, when a baseline was supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relative_to_baseline: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub gate: usize,
    pub answer: usize,
    pub record: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub kind: String,
    pub version: u32,
    pub mode: PipelineMode,
    pub strategy: Strategy,
    pub total_records: usize,
    pub metrics: MetricsBlock,
    pub mode_counts: ModeCounts,
    /// Fraction of records whose gate produced at least one non-Answerable
    /// verdict. Present only when the gate ran (focus mode).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unanswerable_proportion: Option<f64>,
    pub cost: CostSummary,
    pub failures: FailureCounts,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub traces: Vec<Trace>,
    pub report: BenchmarkReport,
}

/// A trace for a record that failed before any path could run (for
/// example, an unreadable image). Scored wrong, flagged, never aborts the
/// run.
fn failed_trace(record: &QARecord, mode: PipelineMode, reason: String) -> Trace {
    Trace {
        record_id: record.id.clone(),
        mode,
        path: None,
        decision: None,
        keywords: None,
        detections: Vec::new(),
        final_answer: String::new(),
        gate_error: None,
        answer_error: Some(reason),
        warnings: Vec::new(),
        ledger: CostLedger::default(),
    }
}

/// Execute `records` with at most `cfg.parallelism` concurrent workers.
/// Results keep manifest order regardless of scheduling.
fn execute(records: &[QARecord], cfg: &PipelineConfig, backends: &Backends) -> Vec<Trace> {
    let workers = cfg.parallelism.max(1).min(records.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Trace>>> = Mutex::new(vec![None; records.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= records.len() {
                    break;
                }
                let record = &records[idx];
                let trace = match router::answer(record, cfg, backends) {
                    Ok(trace) => trace,
                    Err(e) => failed_trace(record, cfg.mode, e.to_string()),
                };
                slots.lock().expect("slots poisoned")[idx] = Some(trace);
            });
        }
    });
    slots
        .into_inner()
        .expect("slots poisoned")
        .into_iter()
        .map(|t| t.expect("every slot filled"))
        .collect()
}

fn aggregate(
    records: &[QARecord],
    traces: &[Trace],
    cfg: &PipelineConfig,
    baseline: Option<&[Trace]>,
) -> Result<BenchmarkReport, BenchError> {
    let mut metrics = MetricsBlock::default();
    let mut mcq_sum = 0.0;
    let mut vqa_sum = 0.0;
    let mut binary_sum = 0.0;
    let mut mme_items: Vec<(&QARecord, &str)> = Vec::new();
    let mut mode_counts = ModeCounts::default();
    let mut failures = FailureCounts::default();
    let mut totals = CostLedger::default();
    let mut non_answerable = 0usize;
    let mut gated = 0usize;

    for (record, trace) in records.iter().zip(traces) {
        match trace.path {
            Some(RoutePath::Fast) => mode_counts.fast += 1,
            Some(RoutePath::Deliberate) => mode_counts.deliberate += 1,
            Some(RoutePath::AnnotateAll) => mode_counts.annotate_all += 1,
            None => mode_counts.failed += 1,
        }
        if trace.gate_error.is_some() {
            failures.gate += 1;
        }
        if trace.answer_error.is_some() {
            if trace.path.is_none() {
                failures.record += 1;
            } else {
                failures.answer += 1;
            }
        }
        if let Some(decision) = &trace.decision {
            gated += 1;
            if decision.verdicts.iter().any(|v| v.parsed != Verdict::Answerable) {
                non_answerable += 1;
            }
        }
        totals.merge(&trace.ledger);
        let pred = trace.final_answer.as_str();
        match record.qtype {
            QuestionType::Mcq => {
                metrics.mcq_count += 1;
                mcq_sum += f64::from(score_mcq(pred, record));
            }
            QuestionType::Open => {
                metrics.vqa_count += 1;
                vqa_sum += score_vqa_soft(pred, &record.gold);
            }
            QuestionType::Binary if record.is_paired() => {
                metrics.mme_count += 1;
                mme_items.push((record, pred));
            }
            QuestionType::Binary => {
                metrics.binary_count += 1;
                binary_sum += f64::from(score_binary(pred, &record.gold[0]));
            }
        }
    }

    if metrics.mcq_count > 0 {
        metrics.mcq_accuracy = Some(mcq_sum / metrics.mcq_count as f64);
    }
    if metrics.vqa_count > 0 {
        metrics.vqa_soft_accuracy = Some(vqa_sum / metrics.vqa_count as f64);
    }
    if metrics.binary_count > 0 {
        metrics.binary_accuracy = Some(binary_sum / metrics.binary_count as f64);
    }
    if !mme_items.is_empty() {
        metrics.mme = Some(score_mme(&mme_items)?);
    }

    let unanswerable_proportion = if cfg.mode == PipelineMode::Focus && gated > 0 {
        let p = non_answerable as f64 / records.len() as f64;
        // definitional identity under self-consistency: a non-unanimous
        // gate is exactly a deliberate routing
        if cfg.gate.strategy == Strategy::SelfConsistency && mode_counts.failed == 0 && failures.gate == 0 {
            debug_assert_eq!(non_answerable, mode_counts.deliberate);
        }
        Some(p)
    } else {
        None
    };

    let relative_to_baseline = match baseline {
        Some(base) => Some(router::relative_cost(traces, base)?),
        None => None,
    };

    Ok(BenchmarkReport {
        kind: "run_report".into(),
        version: REPORT_VERSION,
        mode: cfg.mode,
        strategy: cfg.gate.strategy,
        total_records: records.len(),
        metrics,
        mode_counts,
        unanswerable_proportion,
        cost: CostSummary {
            gate_chat_calls: totals.gate_chat_calls,
            answer_chat_calls: totals.answer_chat_calls,
            lm_calls: totals.lm_calls,
            seg_calls: totals.seg_calls,
            total_wall_ms: totals.total_wall_ms(),
            wall_ms_by_stage: totals.wall_ms_by_stage,
            relative_to_baseline,
        },
        failures,
    })
}

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    let io_err = |source: std::io::Error| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

pub fn traces_to_jsonl(traces: &[Trace]) -> Result<Vec<u8>, BenchError> {
    let mut out = Vec::new();
    for trace in traces {
        serde_json::to_writer(&mut out, trace)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_traces_jsonl(path: &Path) -> Result<Vec<Trace>, BenchError> {
    let data = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut traces = Vec::new();
    for line in data.lines() {
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(line)?);
    }
    Ok(traces)
}

pub fn read_report_json(path: &Path) -> Result<BenchmarkReport, BenchError> {
    let data = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&data)?)
}

/// Run every record through the router, compute the manifest's metrics, and
/// (when `out_dir` is given) write `traces.jsonl` and `report.json` there.
pub fn run_benchmark(
    records: &[QARecord],
    cfg: &PipelineConfig,
    backends: &Backends,
    baseline: Option<&[Trace]>,
    out_dir: Option<&Path>,
) -> Result<RunOutput, BenchError> {
    let traces = execute(records, cfg, backends);
    let report = aggregate(records, &traces, cfg, baseline)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| BenchError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_atomic(&dir.join(TRACES_FILENAME), &traces_to_jsonl(&traces)?)?;
        let mut report_bytes = serde_json::to_vec_pretty(&report)?;
        report_bytes.push(b'\n');
        write_atomic(&dir.join(REPORT_FILENAME), &report_bytes)?;
    }
    Ok(RunOutput { traces, report })
}
