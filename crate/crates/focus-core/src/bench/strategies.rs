//! Gate strategy comparison on a labeled challenge set.
//!
//! Each record of the fixture is labeled with the path that answers it
//! correctly. Every candidate strategy gates every record; the first
//! strategy is the reference. A record counts as "corrected" for a strategy
//! when the strategy routes it to its labeled-correct path while the
//! reference routed it to the other one — so the reference row is 0/0 by
//! construction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{BenchError, QARecord};
use crate::gate::{self, GateConfig, RouteMode};
use crate::gateway::ChatClient;
use crate::image_ref::ImageRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectPath {
    Dt,
    Fi,
}

/// JSONL label row: `{"id": ..., "correct_path": "dt"|"fi"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyLabel {
    pub id: String,
    pub correct_path: CorrectPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub dt_count: usize,
    pub fi_count: usize,
    /// Records labeled dt-correct that this strategy routed to DT while the
    /// reference routed them to FI.
    pub corrected_dt: usize,
    /// Records labeled fi-correct that this strategy routed to FI while the
    /// reference routed them to DT.
    pub corrected_fi: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTable {
    pub rows: Vec<StrategyRow>,
}

impl StrategyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,dt_count,fi_count,corrected_dt,corrected_fi\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.strategy, row.dt_count, row.fi_count, row.corrected_dt, row.corrected_fi
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Strategy | DT (Count) | FI (Count) | Corrected (DT/FI) |\n|---|---|---|---|\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {}/{} |\n",
                row.strategy, row.dt_count, row.fi_count, row.corrected_dt, row.corrected_fi
            ));
        }
        out
    }
}

/// Gate every record under every strategy and tabulate routing counts and
/// corrections against the first (reference) strategy.
pub fn compare_strategies(
    records: &[QARecord],
    strategies: &[(String, GateConfig)],
    labels: &HashMap<String, CorrectPath>,
    mllm: &dyn ChatClient,
) -> Result<StrategyTable, BenchError> {
    if strategies.is_empty() {
        return Err(BenchError::LabelMismatch("no strategies supplied".into()));
    }
    for record in records {
        if !labels.contains_key(&record.id) {
            return Err(BenchError::LabelMismatch(format!(
                "record {:?} has no label",
                record.id
            )));
        }
    }
    if labels.len() != records.len() {
        return Err(BenchError::LabelMismatch(format!(
            "{} labels for {} records",
            labels.len(),
            records.len()
        )));
    }

    // routes[s][r] = routing of record r under strategy s
    let mut routes: Vec<Vec<RouteMode>> = Vec::with_capacity(strategies.len());
    for (_, cfg) in strategies {
        let mut per_record = Vec::with_capacity(records.len());
        for record in records {
            let image = ImageRef::from_path(&record.image_path)
                .map_err(crate::router::PipelineError::from)?;
            let elicitation = gate::elicit_answerability(&image, &record.question, cfg, mllm)?;
            let decision = gate::decide(elicitation.verdicts, cfg)?;
            per_record.push(decision.mode);
        }
        routes.push(per_record);
    }

    let reference = &routes[0];
    let rows = strategies
        .iter()
        .zip(&routes)
        .map(|((name, _), route)| {
            let mut row = StrategyRow {
                strategy: name.clone(),
                dt_count: 0,
                fi_count: 0,
                corrected_dt: 0,
                corrected_fi: 0,
            };
            for (idx, record) in records.iter().enumerate() {
                let label = labels[&record.id];
                match route[idx] {
                    RouteMode::DeliberateThinking => {
                        row.dt_count += 1;
                        if label == CorrectPath::Dt && reference[idx] == RouteMode::FastIntuition {
                            row.corrected_dt += 1;
                        }
                    }
                    RouteMode::FastIntuition => {
                        row.fi_count += 1;
                        if label == CorrectPath::Fi
                            && reference[idx] == RouteMode::DeliberateThinking
                        {
                            row.corrected_fi += 1;
                        }
                    }
                }
            }
            row
        })
        .collect();
    Ok(StrategyTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::test_fixtures::white_png;
    use crate::bench::QuestionType;
    use crate::gate::{answerability_prompt, Strategy};
    use crate::gateway::mock::{ChatScript, MockChatBackend, ScriptedResponse};

    fn record(id: &str, question: &str, image: &std::path::Path) -> QARecord {
        QARecord {
            id: id.into(),
            image_path: image.into(),
            question: question.into(),
            qtype: QuestionType::Open,
            choices: None,
            gold: vec!["x".into()],
            subtask: None,
            pair_id: None,
        }
    }

    /// Two strategies; the second routes every record to its labeled-correct
    /// path while the reference does the opposite.
    #[test]
    fn perfect_router_upper_bound() {
        let dir = tempfile::tempdir().unwrap();
        let img = white_png(dir.path(), "i.png");
        let mut records = Vec::new();
        let mut script = ChatScript::new();
        let mut labels = HashMap::new();
        for i in 0..10 {
            let q = format!("challenge {i}");
            let id = format!("c{i}");
            let fi_labeled = i < 5;
            labels.insert(
                id.clone(),
                if fi_labeled { CorrectPath::Fi } else { CorrectPath::Dt },
            );
            // reference (self-consistency, 1 sample): routed to the wrong path
            let ref_reply = if fi_labeled { "Unanswerable" } else { "Answerable" };
            // candidate (semantic entropy, 1 sample): routed to the right path
            let cand = if fi_labeled {
                ScriptedResponse::text("Answerable").with_logprobs(vec![("Answerable", -0.02f64)])
            } else {
                ScriptedResponse::text("Answerable")
                    .with_logprobs(vec![("Answerable", 0.5f64.ln()), ("Unanswerable", 0.5f64.ln())])
            };
            script = script.on_prompt(
                &answerability_prompt(&q),
                true,
                vec![ScriptedResponse::text(ref_reply), cand],
            );
            records.push(record(&id, &q, &img));
        }
        let mllm = MockChatBackend::new(script).unwrap();
        let reference_cfg = GateConfig {
            n_samples: 1,
            ..Default::default()
        };
        let semantic_cfg = GateConfig {
            n_samples: 1,
            strategy: Strategy::SemanticEntropy,
            ..Default::default()
        };
        let table = compare_strategies(
            &records,
            &[
                ("original".into(), reference_cfg),
                ("semantic".into(), semantic_cfg),
            ],
            &labels,
            &mllm,
        )
        .unwrap();
        let reference = &table.rows[0];
        assert_eq!((reference.corrected_dt, reference.corrected_fi), (0, 0));
        let semantic = &table.rows[1];
        assert_eq!(semantic.dt_count, 5);
        assert_eq!(semantic.fi_count, 5);
        assert_eq!((semantic.corrected_dt, semantic.corrected_fi), (5, 5));
    }

    #[test]
    fn label_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = white_png(dir.path(), "i.png");
        let records = vec![record("a", "q", &img)];
        let mllm = MockChatBackend::new(ChatScript::new()).unwrap();
        let err = compare_strategies(
            &records,
            &[("ref".into(), GateConfig::default())],
            &HashMap::new(),
            &mllm,
        )
        .unwrap_err();
        assert!(matches!(err, BenchError::LabelMismatch(_)));
    }

    #[test]
    fn csv_and_markdown_shapes() {
        let table = StrategyTable {
            rows: vec![StrategyRow {
                strategy: "original".into(),
                dt_count: 50,
                fi_count: 50,
                corrected_dt: 0,
                corrected_fi: 0,
            }],
        };
        assert!(table.to_csv().contains("original,50,50,0,0"));
        assert!(table.to_markdown().contains("| original | 50 | 50 | 0/0 |"));
    }
}
