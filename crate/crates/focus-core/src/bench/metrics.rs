//! Scoring: exact choice match for multiple choice, the datasets' standard
//! leave-one-out soft accuracy for open answers, and paired
//! perception/cognition scoring for binary subtask benchmarks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BenchError, QARecord, QuestionType};

/// Version tag for [`normalize_answer`]'s rules.
pub const NORMALIZATION_VERSION: &str = "v1";

/// Subtasks scored into the cognition total; every other subtask counts as
/// perception. The headline number is the perception total.
pub const COGNITION_SUBTASKS: [&str; 4] = [
    "commonsense_reasoning",
    "numerical_calculation",
    "text_translation",
    "code_reasoning",
];

/// Lowercase, strip punctuation, collapse whitespace, and drop the articles
/// "a", "an", "the".
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| {
            if matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '\'' | '"' | '(' | ')' | '[' | ']')
            {
                ' '
            } else {
                c
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 iff the prediction names the gold choice: a bare letter ("B", "(b)",
/// "B.") or the verbatim text of exactly one option.
pub fn score_mcq(pred: &str, record: &QARecord) -> u8 {
    debug_assert_eq!(record.qtype, QuestionType::Mcq);
    let Some(choices) = record.choices.as_deref() else {
        return 0;
    };
    let gold_letter = record.gold[0].trim().to_uppercase();

    let mut s = pred.trim().to_uppercase();
    while s.ends_with(['.', '!', '?', ':', ';', ',']) {
        s.pop();
    }
    if s.len() >= 2 && s.starts_with('(') && s.ends_with(')') {
        s = s[1..s.len() - 1].trim().to_string();
    }
    if s.len() == 1 && s.as_bytes()[0].is_ascii_uppercase() {
        let idx = usize::from(s.as_bytes()[0] - b'A');
        if idx < choices.len() {
            return u8::from(s == gold_letter);
        }
    }

    // verbatim choice text, accepted only when it matches a single option
    let pred_norm = normalize_answer(pred);
    if pred_norm.is_empty() {
        return 0;
    }
    let matches: Vec<usize> = choices
        .iter()
        .enumerate()
        .filter(|(_, c)| normalize_answer(c) == pred_norm)
        .map(|(i, _)| i)
        .collect();
    if let [only] = matches[..] {
        let letter = (b'A' + only as u8) as char;
        return u8::from(letter.to_string() == gold_letter);
    }
    0
}

/// Soft accuracy over annotator answers.
///
/// With 10 gold answers this is the standard leave-one-out metric: for each
/// annotator j, s_j = min(#{k != j : gold_k == pred} / 3, 1), averaged over
/// j. With fewer it simplifies to min(matches / 3, 1). Matching uses
/// [`normalize_answer`].
pub fn score_vqa_soft(pred: &str, gold: &[String]) -> f64 {
    let pred_norm = normalize_answer(pred);
    let match_flags: Vec<bool> = gold
        .iter()
        .map(|g| normalize_answer(g) == pred_norm)
        .collect();
    let total_matches = match_flags.iter().filter(|&&m| m).count();
    if gold.len() == 10 {
        let mut sum = 0.0;
        for j in 0..gold.len() {
            let m_j = total_matches - usize::from(match_flags[j]);
            sum += (m_j as f64 / 3.0).min(1.0);
        }
        sum / gold.len() as f64
    } else {
        (total_matches as f64 / 3.0).min(1.0)
    }
}

/// 1 iff the normalized prediction equals the gold "yes"/"no".
pub fn score_binary(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmeSubtaskScore {
    /// Percent of questions answered correctly, in [0, 100].
    pub acc: f64,
    /// Percent of image pairs with both questions correct, in [0, 100].
    pub acc_plus: f64,
    /// acc + acc_plus, in [0, 200].
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmeReport {
    pub subtasks: BTreeMap<String, MmeSubtaskScore>,
    /// The headline number: sum of perception subtask scores.
    pub perception_total: f64,
    pub cognition_total: f64,
}

/// Score paired binary records grouped by subtask. Every `pair_id` must
/// group exactly two records.
pub fn score_mme(items: &[(&QARecord, &str)]) -> Result<MmeReport, BenchError> {
    // subtask -> pair_id -> per-question correctness
    let mut by_subtask: BTreeMap<&str, BTreeMap<&str, Vec<bool>>> = BTreeMap::new();
    for (record, pred) in items {
        let (Some(subtask), Some(pair_id)) = (record.subtask.as_deref(), record.pair_id.as_deref())
        else {
            return Err(BenchError::Pairing {
                pair_id: format!("record {} without subtask/pair_id", record.id),
                count: 0,
            });
        };
        let correct = score_binary(pred, &record.gold[0]) == 1;
        by_subtask
            .entry(subtask)
            .or_default()
            .entry(pair_id)
            .or_default()
            .push(correct);
    }
    let mut subtasks = BTreeMap::new();
    let mut perception_total = 0.0;
    let mut cognition_total = 0.0;
    for (subtask, pairs) in by_subtask {
        let mut questions = 0usize;
        let mut correct = 0usize;
        let mut both_correct = 0usize;
        for (pair_id, outcomes) in &pairs {
            if outcomes.len() != 2 {
                return Err(BenchError::Pairing {
                    pair_id: (*pair_id).to_string(),
                    count: outcomes.len(),
                });
            }
            questions += 2;
            correct += outcomes.iter().filter(|&&c| c).count();
            both_correct += usize::from(outcomes.iter().all(|&c| c));
        }
        let acc = 100.0 * correct as f64 / questions as f64;
        let acc_plus = 100.0 * both_correct as f64 / pairs.len() as f64;
        let score = acc + acc_plus;
        if COGNITION_SUBTASKS.contains(&subtask) {
            cognition_total += score;
        } else {
            perception_total += score;
        }
        subtasks.insert(subtask.to_string(), MmeSubtaskScore { acc, acc_plus, score });
    }
    Ok(MmeReport {
        subtasks,
        perception_total,
        cognition_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn mcq_record(choices: &[&str], gold: &str) -> QARecord {
        QARecord {
            id: "m".into(),
            image_path: PathBuf::from("x.png"),
            question: "?".into(),
            qtype: QuestionType::Mcq,
            choices: Some(choices.iter().map(|s| s.to_string()).collect()),
            gold: vec![gold.into()],
            subtask: None,
            pair_id: None,
        }
    }

    #[test]
    fn mcq_plain_letter() {
        let r = mcq_record(&["one", "two", "three"], "B");
        assert_eq!(score_mcq("B", &r), 1);
        assert_eq!(score_mcq("A", &r), 0);
    }

    #[test]
    fn mcq_decorated_letter() {
        let r = mcq_record(&["one", "two", "three"], "B");
        assert_eq!(score_mcq("(b).", &r), 1);
        assert_eq!(score_mcq(" b.", &r), 1);
        assert_eq!(score_mcq("(B)", &r), 1);
    }

    #[test]
    fn mcq_verbatim_choice_text() {
        let r = mcq_record(&["red fox", "blue bird", "green frog"], "B");
        assert_eq!(score_mcq("blue bird", &r), 1);
        // full text of choice C, gold B
        assert_eq!(score_mcq("green frog", &r), 0);
    }

    #[test]
    fn mcq_ambiguous_choice_text_scores_zero() {
        let r = mcq_record(&["same", "same", "other"], "A");
        assert_eq!(score_mcq("same", &r), 0);
    }

    #[test]
    fn vqa_saturation_and_zero() {
        let gold: Vec<String> = vec!["cat".into(); 10];
        assert_eq!(score_vqa_soft("cat", &gold), 1.0);
        assert_eq!(score_vqa_soft("dog", &gold), 0.0);
    }

    #[test]
    fn vqa_two_of_ten_is_point_six() {
        let mut gold: Vec<String> = vec!["other".into(); 8];
        gold.push("cat".into());
        gold.push("cat".into());
        // oracle: 2 annotators see 1 other match (1/3), 8 see both (2/3)
        assert!((score_vqa_soft("cat", &gold) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn vqa_normalization_applies() {
        let gold: Vec<String> = vec!["the red apple".into(); 10];
        assert_eq!(score_vqa_soft("Red apple.", &gold), 1.0);
    }

    #[test]
    fn vqa_short_gold_uses_simplified_rule() {
        let gold: Vec<String> = vec!["yes".into(), "yes".into(), "no".into()];
        assert!((score_vqa_soft("yes", &gold) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(score_vqa_soft("yes", &vec!["yes".to_string(); 4]), 1.0);
    }

    fn paired(id: &str, pair: &str, subtask: &str, gold: &str) -> QARecord {
        QARecord {
            id: id.into(),
            image_path: PathBuf::from("x.png"),
            question: "?".into(),
            qtype: QuestionType::Binary,
            choices: None,
            gold: vec![gold.into()],
            subtask: Some(subtask.into()),
            pair_id: Some(pair.into()),
        }
    }

    #[test]
    fn mme_all_correct_scores_200() {
        let records: Vec<QARecord> = (0..10)
            .flat_map(|p| {
                vec![
                    paired(&format!("q{p}a"), &format!("p{p}"), "existence", "yes"),
                    paired(&format!("q{p}b"), &format!("p{p}"), "existence", "no"),
                ]
            })
            .collect();
        let items: Vec<(&QARecord, &str)> = records
            .iter()
            .map(|r| (r, r.gold[0].as_str()))
            .collect();
        let report = score_mme(&items).unwrap();
        let s = &report.subtasks["existence"];
        assert_eq!(s.acc, 100.0);
        assert_eq!(s.acc_plus, 100.0);
        assert_eq!(s.score, 200.0);
        assert_eq!(report.perception_total, 200.0);
        assert_eq!(report.cognition_total, 0.0);
    }

    #[test]
    fn mme_one_of_each_pair_scores_50() {
        let records: Vec<QARecord> = (0..10)
            .flat_map(|p| {
                vec![
                    paired(&format!("q{p}a"), &format!("p{p}"), "color", "yes"),
                    paired(&format!("q{p}b"), &format!("p{p}"), "color", "yes"),
                ]
            })
            .collect();
        let items: Vec<(&QARecord, &str)> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r, if i % 2 == 0 { "yes" } else { "no" }))
            .collect();
        let report = score_mme(&items).unwrap();
        let s = &report.subtasks["color"];
        assert_eq!(s.acc, 50.0);
        assert_eq!(s.acc_plus, 0.0);
        assert_eq!(s.score, 50.0);
    }

    #[test]
    fn mme_all_wrong_scores_zero() {
        let records = vec![
            paired("a", "p0", "count", "yes"),
            paired("b", "p0", "count", "yes"),
        ];
        let items: Vec<(&QARecord, &str)> = records.iter().map(|r| (r, "no")).collect();
        let report = score_mme(&items).unwrap();
        assert_eq!(report.subtasks["count"].score, 0.0);
    }

    #[test]
    fn mme_cognition_subtasks_split_out() {
        let records = vec![
            paired("a", "p0", "code_reasoning", "yes"),
            paired("b", "p0", "code_reasoning", "no"),
        ];
        let items: Vec<(&QARecord, &str)> = records.iter().map(|r| (r, r.gold[0].as_str())).collect();
        let report = score_mme(&items).unwrap();
        assert_eq!(report.cognition_total, 200.0);
        assert_eq!(report.perception_total, 0.0);
    }

    #[test]
    fn mme_unpaired_is_error() {
        let records = vec![paired("a", "p0", "count", "yes")];
        let items: Vec<(&QARecord, &str)> = records.iter().map(|r| (r, "yes")).collect();
        assert!(matches!(score_mme(&items), Err(BenchError::Pairing { .. })));
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The  Red Apple."), "red apple");
        assert_eq!(normalize_answer("an apple"), "apple");
        assert_eq!(normalize_answer("\"yes!\""), "yes");
        assert_eq!(normalize_answer("blue-green"), "blue-green");
    }
}
