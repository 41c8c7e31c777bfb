//! Benchmark scoring: exact-match accuracy per modality subset and the
//! QA-count-weighted overall score.

use std::collections::HashMap;

use serde::Serialize;

use crate::datagen::{Modality, QaItem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct SubsetScore {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl SubsetScore {
    fn empty() -> Self {
        SubsetScore {
            count: 0,
            correct: 0,
            accuracy: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BenchReport {
    pub rgb: SubsetScore,
    pub ir: SubsetScore,
    pub rgb_ir: SubsetScore,
    /// Accuracy over all items: each subset weighted by its QA count.
    pub overall: f64,
}

impl BenchReport {
    pub fn subset(&self, m: Modality) -> SubsetScore {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Ir => self.ir,
            Modality::RgbIr => self.rgb_ir,
        }
    }
}

/// First whitespace token, lowercased; anything outside yes/no scores as
/// incorrect against either gold answer.
fn normalize(answer: &str) -> Option<bool> {
    match answer.split_whitespace().next()?.to_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Score predictions (id -> raw answer string) against the gold items.
/// Every gold id must have a prediction; the error lists the missing ids.
pub fn score_benchmark(predictions: &HashMap<String, String>, gold: &[QaItem]) -> Result<BenchReport> {
    let missing: Vec<&str> = gold
        .iter()
        .filter(|g| !predictions.contains_key(&g.id))
        .map(|g| g.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::contract(format!(
            "missing predictions for {} ids: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    if gold.is_empty() {
        return Err(Error::contract("cannot score an empty gold set"));
    }

    let mut scores: HashMap<Modality, SubsetScore> = HashMap::new();
    for item in gold {
        let entry = scores.entry(item.modality).or_insert_with(SubsetScore::empty);
        entry.count += 1;
        if normalize(&predictions[&item.id]) == Some(item.answer_yes) {
            entry.correct += 1;
        }
    }
    for s in scores.values_mut() {
        s.accuracy = s.correct as f64 / s.count as f64;
    }
    let total: usize = scores.values().map(|s| s.count).sum();
    let correct: usize = scores.values().map(|s| s.correct).sum();
    Ok(BenchReport {
        rgb: scores.get(&Modality::Rgb).copied().unwrap_or_else(SubsetScore::empty),
        ir: scores.get(&Modality::Ir).copied().unwrap_or_else(SubsetScore::empty),
        rgb_ir: scores
            .get(&Modality::RgbIr)
            .copied()
            .unwrap_or_else(SubsetScore::empty),
        overall: correct as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocab;

    fn item(id: &str, yes: bool, modality: Modality) -> QaItem {
        let vocab = Vocab::toy();
        let question = "is there a light source ?".to_string();
        QaItem {
            id: id.to_string(),
            pair_id: id.to_string(),
            question_ids: vocab.tokenize(&question),
            question,
            answer_yes: yes,
            modality,
        }
    }

    fn fixture_gold() -> Vec<QaItem> {
        // counts (2, 3, 5) across the three subsets
        let mut gold = Vec::new();
        for i in 0..2 {
            gold.push(item(&format!("rgb{i}"), true, Modality::Rgb));
        }
        for i in 0..3 {
            gold.push(item(&format!("ir{i}"), true, Modality::Ir));
        }
        for i in 0..5 {
            gold.push(item(&format!("both{i}"), i % 2 == 0, Modality::RgbIr));
        }
        gold
    }

    fn predictions_for(gold: &[QaItem], pattern: impl Fn(&QaItem) -> String) -> HashMap<String, String> {
        gold.iter().map(|g| (g.id.clone(), pattern(g))).collect()
    }

    #[test]
    fn weighted_fixture_scores_exactly_half() {
        // accuracies (1.0, 0.0, 0.6) at counts (2, 3, 5): overall 0.5 exactly
        let gold = fixture_gold();
        let preds = predictions_for(&gold, |g| match g.modality {
            Modality::Rgb => "yes".to_string(),
            Modality::Ir => "no".to_string(),
            Modality::RgbIr => {
                // 3 of 5 correct: answer yes everywhere, gold is y,n,y,n,y
                "yes".to_string()
            }
        });
        let report = score_benchmark(&preds, &gold).unwrap();
        assert_eq!(report.rgb.accuracy, 1.0);
        assert_eq!(report.ir.accuracy, 0.0);
        assert!((report.rgb_ir.accuracy - 0.6).abs() < 1e-12);
        assert_eq!(report.overall, 0.5);
    }

    #[test]
    fn all_correct_scores_one_everywhere() {
        let gold = fixture_gold();
        let preds = predictions_for(&gold, |g| if g.answer_yes { "yes" } else { "no" }.into());
        let report = score_benchmark(&preds, &gold).unwrap();
        assert_eq!(report.rgb.accuracy, 1.0);
        assert_eq!(report.ir.accuracy, 1.0);
        assert_eq!(report.rgb_ir.accuracy, 1.0);
        assert_eq!(report.overall, 1.0);
    }

    #[test]
    fn single_subset_overall_equals_that_subset() {
        let gold: Vec<QaItem> = (0..7).map(|i| item(&format!("x{i}"), i % 3 == 0, Modality::Ir)).collect();
        let preds = predictions_for(&gold, |_| "yes".into());
        let report = score_benchmark(&preds, &gold).unwrap();
        assert_eq!(report.overall, report.ir.accuracy);
        assert_eq!(report.rgb.count, 0);
    }

    #[test]
    fn missing_predictions_error_lists_ids() {
        let gold = fixture_gold();
        let mut preds = predictions_for(&gold, |_| "yes".into());
        preds.remove("ir1");
        preds.remove("both3");
        let err = score_benchmark(&preds, &gold).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ir1") && msg.contains("both3"), "{msg}");
    }

    #[test]
    fn scoring_is_permutation_invariant() {
        let mut gold = fixture_gold();
        let preds = predictions_for(&gold, |g| {
            if g.id.ends_with('0') { "yes" } else { "no" }.into()
        });
        let a = score_benchmark(&preds, &gold).unwrap();
        gold.reverse();
        let b = score_benchmark(&preds, &gold).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalization_takes_first_token_lowercased() {
        let gold = vec![item("a", true, Modality::Ir), item("b", false, Modality::Ir)];
        let mut preds = HashMap::new();
        preds.insert("a".to_string(), "  YES definitely".to_string());
        preds.insert("b".to_string(), "maybe no".to_string()); // outside {yes,no}: wrong
        let report = score_benchmark(&preds, &gold).unwrap();
        assert_eq!(report.ir.correct, 1);
    }

    #[test]
    fn overall_lies_between_min_and_max_subset_accuracy() {
        let gold = fixture_gold();
        let preds = predictions_for(&gold, |g| {
            if g.id.contains('1') { "yes" } else { "no" }.into()
        });
        let r = score_benchmark(&preds, &gold).unwrap();
        let accs = [r.rgb.accuracy, r.ir.accuracy, r.rgb_ir.accuracy];
        let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(r.overall >= lo - 1e-12 && r.overall <= hi + 1e-12);
    }
}
