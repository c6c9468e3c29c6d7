//! The answerability gate.
//!
//! Each question is probed with N independent high-temperature samples of a
//! fixed "is this answerable?" prompt. Three strategies turn the sampled
//! verdicts into a routing decision:
//!
//! - self-consistency: fast only when every sample says Answerable;
//! - semantic entropy: binary entropy of the answerable probability derived
//!   from the first sample's token logprobs, compared to a threshold;
//! - consistency entropy: the same entropy averaged over all N samples, plus
//!   a majority vote.
//!
//! Decision functions are pure: the same verdicts and config always produce
//! the same decision.

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatClient, ChatRequest, GatewayError, TokenLogprob};
use crate::image_ref::ImageRef;

/// Version tag for the fixed answerability prompt below.
pub const ANSWERABILITY_PROMPT_VERSION: &str = "v1";

/// The fixed prompt sent for every gate sample.
pub fn answerability_prompt(question: &str) -> String {
    format!(
        "You are given an image and a question about it. Do not answer the question. \
         Reply with exactly one word: 'Answerable' if you are confident you can answer it \
         correctly from the image, or 'Unanswerable' if not. Question: {question}"
    )
}

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("probability {0} outside [0,1]")]
    Domain(f64),
    #[error("verdict carries no answerable probability (logprobs were not supplied)")]
    MissingLogprobs,
    #[error("no verdicts supplied")]
    Empty,
    #[error("invalid gate config: {0}")]
    InvalidConfig(String),
    /// Gate sample `index` (0-based) failed after the backend's retries.
    #[error("gate sample {index} failed: {source}")]
    Call {
        index: usize,
        #[source]
        source: GatewayError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SelfConsistency,
    SemanticEntropy,
    ConsistencyEntropy,
}

impl Strategy {
    pub fn needs_logprobs(self) -> bool {
        !matches!(self, Strategy::SelfConsistency)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub strategy: Strategy,
    /// In nats; valid range is (0, ln 2], the binary-entropy maximum.
    pub entropy_threshold: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            n_samples: 3,
            temperature: 1.0,
            strategy: Strategy::SelfConsistency,
            entropy_threshold: 0.35,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        if self.n_samples == 0 {
            return Err(GateError::InvalidConfig("n_samples must be >= 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GateError::InvalidConfig(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.entropy_threshold > 0.0
            && self.entropy_threshold <= std::f64::consts::LN_2)
        {
            return Err(GateError::InvalidConfig(format!(
                "entropy_threshold must lie in (0, ln 2], got {}",
                self.entropy_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Answerable,
    Unanswerable,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerabilityVerdict {
    pub raw_text: String,
    pub parsed: Verdict,
    /// Present iff the strategy requested logprobs and the backend supplied
    /// them.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_answerable: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    FastIntuition,
    DeliberateThinking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub mode: RouteMode,
    pub verdicts: Vec<AnswerabilityVerdict>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_entropy: Option<f64>,
}

/// Parse one sampled reply. Case-insensitive substring containment, with
/// "unanswerable" checked first since it contains "answerable".
pub fn parse_verdict(text: &str) -> Verdict {
    let lower = text.to_lowercase();
    if lower.contains("unanswerable") {
        Verdict::Unanswerable
    } else if lower.contains("answerable") {
        Verdict::Answerable
    } else {
        Verdict::Unparseable
    }
}

/// Binary Shannon entropy in nats, with 0·ln 0 ≡ 0.
pub fn binary_entropy(p: f64) -> Result<f64, GateError> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(GateError::Domain(p));
    }
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    Ok(-p * p.ln() - (1.0 - p) * (1.0 - p).ln())
}

/// Answerable probability from the first content token's candidate set.
///
/// Candidates classify by [`parse_verdict`]; a candidate that parses
/// Unparseable but is a prefix of the full reply (subword tokenizers)
/// inherits the full reply's class. Probability mass renormalizes over the
/// two classes; when neither class appears, falls back to the indicator of
/// the parsed full-text verdict.
pub fn p_answerable_from_logprobs(candidates: &[TokenLogprob], full_text: &str) -> f64 {
    let full_norm = full_text.trim().to_lowercase();
    let mut answerable_mass = 0.0;
    let mut unanswerable_mass = 0.0;
    for cand in candidates {
        let class = match parse_verdict(&cand.token) {
            Verdict::Unparseable => {
                let tok_norm = cand.token.trim().to_lowercase();
                if !tok_norm.is_empty() && full_norm.starts_with(&tok_norm) {
                    parse_verdict(full_text)
                } else {
                    Verdict::Unparseable
                }
            }
            v => v,
        };
        match class {
            Verdict::Answerable => answerable_mass += cand.logprob.exp(),
            Verdict::Unanswerable => unanswerable_mass += cand.logprob.exp(),
            Verdict::Unparseable => {}
        }
    }
    let total = answerable_mass + unanswerable_mass;
    if total > 0.0 {
        answerable_mass / total
    } else if parse_verdict(full_text) == Verdict::Answerable {
        1.0
    } else {
        0.0
    }
}

/// Verdicts plus the per-call latencies needed for cost attribution. The
/// calls are logically concurrent; the gate stage's wall time is their max.
#[derive(Debug, Clone)]
pub struct Elicitation {
    pub verdicts: Vec<AnswerabilityVerdict>,
    pub latencies_ms: Vec<f64>,
}

/// Sample the answerability prompt `n_samples` times with independent chat
/// calls at the gate temperature, requesting logprobs iff the strategy
/// needs them.
pub fn elicit_answerability(
    image: &ImageRef,
    question: &str,
    cfg: &GateConfig,
    mllm: &dyn ChatClient,
) -> Result<Elicitation, GateError> {
    cfg.validate()?;
    let prompt = answerability_prompt(question);
    let mut verdicts = Vec::with_capacity(cfg.n_samples);
    let mut latencies_ms = Vec::with_capacity(cfg.n_samples);
    for index in 0..cfg.n_samples {
        let req = ChatRequest::user(prompt.clone(), Some(image))
            .with_temperature(cfg.temperature)
            .with_max_tokens(8)
            .with_logprobs(cfg.strategy.needs_logprobs());
        let resp = mllm
            .chat(&req)
            .map_err(|source| GateError::Call { index, source })?;
        let p_answerable = resp
            .token_logprobs
            .as_deref()
            .map(|cands| p_answerable_from_logprobs(cands, &resp.text));
        verdicts.push(AnswerabilityVerdict {
            parsed: parse_verdict(&resp.text),
            raw_text: resp.text,
            p_answerable,
        });
        latencies_ms.push(resp.latency_ms);
    }
    Ok(Elicitation {
        verdicts,
        latencies_ms,
    })
}

/// Fast iff every sampled verdict parsed Answerable. Unanswerable and
/// Unparseable alike route to deliberate thinking.
pub fn decide_self_consistency(
    verdicts: Vec<AnswerabilityVerdict>,
) -> Result<GateDecision, GateError> {
    if verdicts.is_empty() {
        return Err(GateError::Empty);
    }
    let all_answerable = verdicts.iter().all(|v| v.parsed == Verdict::Answerable);
    Ok(GateDecision {
        mode: if all_answerable {
            RouteMode::FastIntuition
        } else {
            RouteMode::DeliberateThinking
        },
        verdicts,
        mean_entropy: None,
    })
}

/// Single-sample entropy gate: fast iff the first verdict parsed Answerable
/// and its entropy is under the threshold. A confidently-Unanswerable
/// verdict (low entropy, parsed Unanswerable) still routes deliberate.
pub fn decide_semantic_entropy(
    verdicts: Vec<AnswerabilityVerdict>,
    cfg: &GateConfig,
) -> Result<GateDecision, GateError> {
    cfg.validate()?;
    let first = verdicts.first().ok_or(GateError::Empty)?;
    let p = first.p_answerable.ok_or(GateError::MissingLogprobs)?;
    let entropy = binary_entropy(p)?;
    let fast = entropy < cfg.entropy_threshold && first.parsed == Verdict::Answerable;
    Ok(GateDecision {
        mode: if fast {
            RouteMode::FastIntuition
        } else {
            RouteMode::DeliberateThinking
        },
        verdicts,
        mean_entropy: Some(entropy),
    })
}

/// N-sample entropy gate: mean entropy under the threshold and a majority
/// of parsed verdicts Answerable. With one verdict this coincides with
/// [`decide_semantic_entropy`].
pub fn decide_consistency_entropy(
    verdicts: Vec<AnswerabilityVerdict>,
    cfg: &GateConfig,
) -> Result<GateDecision, GateError> {
    cfg.validate()?;
    if verdicts.is_empty() {
        return Err(GateError::Empty);
    }
    let mut entropy_sum = 0.0;
    for v in &verdicts {
        let p = v.p_answerable.ok_or(GateError::MissingLogprobs)?;
        entropy_sum += binary_entropy(p)?;
    }
    let mean_entropy = entropy_sum / verdicts.len() as f64;
    let answerable = verdicts
        .iter()
        .filter(|v| v.parsed == Verdict::Answerable)
        .count();
    let majority = answerable * 2 > verdicts.len();
    let fast = mean_entropy < cfg.entropy_threshold && majority;
    Ok(GateDecision {
        mode: if fast {
            RouteMode::FastIntuition
        } else {
            RouteMode::DeliberateThinking
        },
        verdicts,
        mean_entropy: Some(mean_entropy),
    })
}

/// Dispatch on the configured strategy.
pub fn decide(
    verdicts: Vec<AnswerabilityVerdict>,
    cfg: &GateConfig,
) -> Result<GateDecision, GateError> {
    match cfg.strategy {
        Strategy::SelfConsistency => decide_self_consistency(verdicts),
        Strategy::SemanticEntropy => decide_semantic_entropy(verdicts, cfg),
        Strategy::ConsistencyEntropy => decide_consistency_entropy(verdicts, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::gateway::{ChatScript, MockChatBackend, ScriptedResponse};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn verdict(parsed: Verdict) -> AnswerabilityVerdict {
        AnswerabilityVerdict {
            raw_text: format!("{parsed:?}"),
            parsed,
            p_answerable: None,
        }
    }

    fn verdict_p(parsed: Verdict, p: f64) -> AnswerabilityVerdict {
        AnswerabilityVerdict {
            raw_text: format!("{parsed:?}"),
            parsed,
            p_answerable: Some(p),
        }
    }

    fn cfg(strategy: Strategy, threshold: f64) -> GateConfig {
        GateConfig {
            strategy,
            entropy_threshold: threshold,
            ..GateConfig::default()
        }
    }

    #[test]
    fn parse_verdict_cases() {
        assert_eq!(parse_verdict("Unanswerable"), Verdict::Unanswerable);
        assert_eq!(parse_verdict("ANSWERABLE."), Verdict::Answerable);
        // precedence: "unanswerable" contains "answerable"
        assert_eq!(parse_verdict("It is unanswerable"), Verdict::Unanswerable);
        assert_eq!(
            parse_verdict("I think it is answerable, yes"),
            Verdict::Answerable
        );
        assert_eq!(parse_verdict("no idea"), Verdict::Unparseable);
    }

    #[test]
    fn entropy_known_values() {
        assert!((binary_entropy(0.5).unwrap() - LN_2).abs() < 1e-12);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert!((binary_entropy(0.9).unwrap() - 0.325083).abs() < 1e-6);
    }

    #[test]
    fn entropy_domain_error() {
        assert!(matches!(binary_entropy(1.5), Err(GateError::Domain(_))));
        assert!(matches!(binary_entropy(-0.1), Err(GateError::Domain(_))));
        assert!(matches!(binary_entropy(f64::NAN), Err(GateError::Domain(_))));
    }

    #[test]
    fn p_answerable_renormalizes_two_masses() {
        let cands = vec![
            TokenLogprob {
                token: "Answerable".into(),
                logprob: 0.8f64.ln(),
            },
            TokenLogprob {
                token: "Unanswerable".into(),
                logprob: 0.2f64.ln(),
            },
        ];
        let p = p_answerable_from_logprobs(&cands, "Answerable");
        assert!((p - 0.8).abs() < 1e-12);
    }

    #[test]
    fn p_answerable_single_class_saturates() {
        let cands = vec![TokenLogprob {
            token: "Answerable".into(),
            logprob: 0.6f64.ln(),
        }];
        assert_eq!(p_answerable_from_logprobs(&cands, "Answerable"), 1.0);
    }

    #[test]
    fn p_answerable_symmetric_masses() {
        let cands = vec![
            TokenLogprob {
                token: "Answerable".into(),
                logprob: 0.3f64.ln(),
            },
            TokenLogprob {
                token: "Unanswerable".into(),
                logprob: 0.3f64.ln(),
            },
        ];
        assert!((p_answerable_from_logprobs(&cands, "Answerable") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn p_answerable_fallback_indicator_when_no_class_token() {
        let cands = vec![TokenLogprob {
            token: "Yes".into(),
            logprob: -0.1,
        }];
        assert_eq!(p_answerable_from_logprobs(&cands, "Answerable"), 1.0);
        assert_eq!(p_answerable_from_logprobs(&cands, "hmm"), 0.0);
    }

    #[test]
    fn p_answerable_prefix_token_extends_greedily() {
        // "Un" is a prefix of the full reply "Unanswerable".
        let cands = vec![
            TokenLogprob {
                token: "Un".into(),
                logprob: 0.7f64.ln(),
            },
            TokenLogprob {
                token: "Answerable".into(),
                logprob: 0.3f64.ln(),
            },
        ];
        let p = p_answerable_from_logprobs(&cands, "Unanswerable");
        assert!((p - 0.3).abs() < 1e-12);
    }

    #[test]
    fn self_consistency_examples() {
        let all_a = vec![verdict(Verdict::Answerable); 3];
        assert_eq!(
            decide_self_consistency(all_a).unwrap().mode,
            RouteMode::FastIntuition
        );
        let mixed = vec![
            verdict(Verdict::Answerable),
            verdict(Verdict::Unanswerable),
            verdict(Verdict::Answerable),
        ];
        assert_eq!(
            decide_self_consistency(mixed).unwrap().mode,
            RouteMode::DeliberateThinking
        );
        let unparseable = vec![
            verdict(Verdict::Answerable),
            verdict(Verdict::Answerable),
            verdict(Verdict::Unparseable),
        ];
        assert_eq!(
            decide_self_consistency(unparseable).unwrap().mode,
            RouteMode::DeliberateThinking
        );
    }

    #[test]
    fn self_consistency_truth_table_exhaustive() {
        let all = [Verdict::Answerable, Verdict::Unanswerable, Verdict::Unparseable];
        for a in all {
            for b in all {
                for c in all {
                    let decision =
                        decide_self_consistency(vec![verdict(a), verdict(b), verdict(c)]).unwrap();
                    let expect_fast = [a, b, c].iter().all(|v| *v == Verdict::Answerable);
                    assert_eq!(
                        decision.mode == RouteMode::FastIntuition,
                        expect_fast,
                        "triple {a:?},{b:?},{c:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn semantic_entropy_examples() {
        let c = cfg(Strategy::SemanticEntropy, 0.35);
        let d = decide_semantic_entropy(vec![verdict_p(Verdict::Answerable, 0.95)], &c).unwrap();
        assert_eq!(d.mode, RouteMode::FastIntuition);
        assert!((d.mean_entropy.unwrap() - 0.199).abs() < 1e-3);

        let d = decide_semantic_entropy(vec![verdict_p(Verdict::Answerable, 0.5)], &c).unwrap();
        assert_eq!(d.mode, RouteMode::DeliberateThinking);

        // confident-unanswerable is still complex
        let d = decide_semantic_entropy(vec![verdict_p(Verdict::Unanswerable, 0.05)], &c).unwrap();
        assert_eq!(d.mode, RouteMode::DeliberateThinking);
    }

    #[test]
    fn semantic_entropy_missing_logprobs() {
        let c = cfg(Strategy::SemanticEntropy, 0.35);
        assert!(matches!(
            decide_semantic_entropy(vec![verdict(Verdict::Answerable)], &c),
            Err(GateError::MissingLogprobs)
        ));
    }

    #[test]
    fn consistency_entropy_examples() {
        let c = cfg(Strategy::ConsistencyEntropy, 0.35);
        let d = decide_consistency_entropy(
            vec![
                verdict_p(Verdict::Answerable, 0.9),
                verdict_p(Verdict::Answerable, 0.9),
                verdict_p(Verdict::Answerable, 0.9),
            ],
            &c,
        )
        .unwrap();
        assert_eq!(d.mode, RouteMode::FastIntuition);
        assert!((d.mean_entropy.unwrap() - 0.325083).abs() < 1e-6);

        let d = decide_consistency_entropy(
            vec![
                verdict_p(Verdict::Answerable, 0.9),
                verdict_p(Verdict::Answerable, 0.5),
                verdict_p(Verdict::Answerable, 0.9),
            ],
            &c,
        )
        .unwrap();
        assert_eq!(d.mode, RouteMode::DeliberateThinking);
        assert!((d.mean_entropy.unwrap() - 0.448).abs() < 1e-3);

        let d = decide_consistency_entropy(
            vec![
                verdict_p(Verdict::Answerable, 1.0),
                verdict_p(Verdict::Answerable, 1.0),
                verdict_p(Verdict::Answerable, 1.0),
            ],
            &c,
        )
        .unwrap();
        assert_eq!(d.mode, RouteMode::FastIntuition);
        assert_eq!(d.mean_entropy.unwrap(), 0.0);
    }

    #[test]
    fn gate_config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        assert!(GateConfig {
            n_samples: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GateConfig {
            entropy_threshold: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GateConfig {
            entropy_threshold: LN_2 + 0.01,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn elicit_makes_n_independent_calls() {
        let question = "What is on the table?";
        let script = ChatScript::new().on_prompt(
            &answerability_prompt(question),
            true,
            vec![
                ScriptedResponse::text("Answerable").with_latency(10.0),
                ScriptedResponse::text("Answerable").with_latency(20.0),
                ScriptedResponse::text("Answerable").with_latency(30.0),
            ],
        );
        let mock = MockChatBackend::new(script).unwrap();
        let img = ImageRef::solid(4, 4, [255, 255, 255, 255]);
        let out =
            elicit_answerability(&img, question, &GateConfig::default(), &mock).unwrap();
        assert_eq!(out.verdicts.len(), 3);
        assert!(out.verdicts.iter().all(|v| v.parsed == Verdict::Answerable));
        assert_eq!(out.latencies_ms, vec![10.0, 20.0, 30.0]);
        assert_eq!(mock.calls_made(), 3);
        // self-consistency never requests logprobs
        assert!(out.verdicts.iter().all(|v| v.p_answerable.is_none()));
    }

    #[test]
    fn elicit_parses_freeform_reply_by_substring() {
        let question = "q";
        let script = ChatScript::new().on_prompt(
            &answerability_prompt(question),
            true,
            vec![ScriptedResponse::text("I think it is answerable, yes")],
        );
        let mock = MockChatBackend::new(script).unwrap();
        let img = ImageRef::solid(4, 4, [255, 255, 255, 255]);
        let mut gate_cfg = GateConfig::default();
        gate_cfg.n_samples = 1;
        let out = elicit_answerability(&img, question, &gate_cfg, &mock).unwrap();
        assert_eq!(out.verdicts[0].parsed, Verdict::Answerable);
    }

    #[test]
    fn elicit_propagates_call_failures_with_index() {
        let question = "q";
        let script = ChatScript::new().on_prompt(
            &answerability_prompt(question),
            true,
            vec![
                ScriptedResponse::text("Answerable"),
                ScriptedResponse::failing(crate::gateway::mock::ScriptedFailure::Backend),
            ],
        );
        let mock = MockChatBackend::new(script).unwrap();
        let img = ImageRef::solid(4, 4, [255, 255, 255, 255]);
        let err = elicit_answerability(&img, question, &GateConfig::default(), &mock)
            .unwrap_err();
        match err {
            GateError::Call { index, .. } => assert_eq!(index, 1),
            other => panic!("expected Call error, got {other:?}"),
        }
        assert_eq!(mock.calls_made(), 2);
    }

    proptest! {
        #[test]
        fn entropy_symmetric_and_bounded(p in 0.0f64..=1.0) {
            let h = binary_entropy(p).unwrap();
            let h_sym = binary_entropy(1.0 - p).unwrap();
            prop_assert!((h - h_sym).abs() < 1e-12);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= LN_2 + 1e-15);
        }

        #[test]
        fn threshold_monotone_never_flips_fast_to_deliberate(
            p in 0.0f64..=1.0,
            t_low in 0.01f64..0.6931,
            bump in 0.0f64..0.3,
        ) {
            let t_high = (t_low + bump).min(LN_2);
            let verdicts = vec![verdict_p(Verdict::Answerable, p)];
            let low = decide_semantic_entropy(verdicts.clone(), &cfg(Strategy::SemanticEntropy, t_low)).unwrap();
            let high = decide_semantic_entropy(verdicts, &cfg(Strategy::SemanticEntropy, t_high)).unwrap();
            if low.mode == RouteMode::FastIntuition {
                prop_assert_eq!(high.mode, RouteMode::FastIntuition);
            }
        }

        #[test]
        fn decisions_are_pure(
            ps in proptest::collection::vec(0.0f64..=1.0, 1..6),
            threshold in 0.01f64..0.6931,
        ) {
            let verdicts: Vec<_> = ps.iter().map(|&p| verdict_p(Verdict::Answerable, p)).collect();
            let c = cfg(Strategy::ConsistencyEntropy, threshold);
            let a = decide_consistency_entropy(verdicts.clone(), &c).unwrap();
            let b = decide_consistency_entropy(verdicts, &c).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
