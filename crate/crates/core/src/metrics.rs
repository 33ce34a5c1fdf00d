//! Evaluation metrics: word-level precision/recall/F1 with multiset
//! matching, case-sensitive character error rate, and 36-charset word
//! accuracy.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Word match counts for one sample: (correct, detected, truth).
///
/// Both strings are whitespace-split; `correct` is the multiset
/// intersection size under exact case-sensitive word equality, so a
/// word repeated in the ground truth must be repeated in the
/// prediction to count twice.
pub fn word_prf(pred: &str, gt: &str) -> (usize, usize, usize) {
    let pred_words: Vec<&str> = pred.split_whitespace().collect();
    let gt_words: Vec<&str> = gt.split_whitespace().collect();
    let mut gt_counts: HashMap<&str, usize> = HashMap::new();
    for w in &gt_words {
        *gt_counts.entry(w).or_insert(0) += 1;
    }
    let mut correct = 0;
    for w in &pred_words {
        if let Some(c) = gt_counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                correct += 1;
            }
        }
    }
    (correct, pred_words.len(), gt_words.len())
}

/// Levenshtein distance over Unicode scalar values (unit
/// insert/delete/substitute), case-sensitive, whitespace counted.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance divided by max(1, len(gt)).
/// May exceed 1 when the prediction is much longer than the truth.
pub fn cer(pred: &str, gt: &str) -> f64 {
    let dist = edit_distance(pred, gt);
    let denom = gt.chars().count().max(1);
    dist as f64 / denom as f64
}

/// Exact match after lowercasing and deleting every character outside
/// [a-z0-9] (the scene-text 36-character charset).
pub fn word_accuracy_36(pred: &str, gt: &str) -> bool {
    let filter = |s: &str| -> String {
        s.to_lowercase()
            .chars()
            .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
            .collect()
    };
    filter(pred) == filter(gt)
}

/// Per-sample and aggregate metric values over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleEval>,
    pub aggregate: Aggregate,
    pub counts: MatchCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub cer: f64,
    pub exact_match_36char: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_cer: f64,
    pub word_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub correct: usize,
    pub detected: usize,
    pub truth: usize,
}

/// Micro-averaged corpus evaluation: P/R/F1 from summed counts (not a
/// mean of per-sample F1), mean CER over samples, word accuracy as the
/// fraction of exact 36-char matches. Every ground-truth id must have
/// a prediction.
pub fn evaluate_corpus(
    ground_truth: &[(String, String)],
    predictions: &[(String, String)],
) -> Result<EvalReport> {
    let pred_map: HashMap<&str, &str> = predictions
        .iter()
        .map(|(id, text)| (id.as_str(), text.as_str()))
        .collect();
    let missing: Vec<&str> = ground_truth
        .iter()
        .filter(|(id, _)| !pred_map.contains_key(id.as_str()))
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "missing predictions for ids: {}",
            missing.join(", ")
        )));
    }

    let mut counts = MatchCounts {
        correct: 0,
        detected: 0,
        truth: 0,
    };
    let mut per_sample = Vec::with_capacity(ground_truth.len());
    let mut cer_sum = 0.0;
    let mut exact = 0usize;
    for (id, gt) in ground_truth {
        let pred = pred_map[id.as_str()];
        let (c, d, t) = word_prf(pred, gt);
        counts.correct += c;
        counts.detected += d;
        counts.truth += t;
        let sample_cer = cer(pred, gt);
        cer_sum += sample_cer;
        let em = word_accuracy_36(pred, gt);
        exact += usize::from(em);
        per_sample.push(SampleEval {
            id: id.clone(),
            cer: sample_cer,
            exact_match_36char: em,
        });
    }

    let n = ground_truth.len();
    let precision = if counts.detected == 0 {
        0.0
    } else {
        counts.correct as f64 / counts.detected as f64
    };
    let recall = if counts.truth == 0 {
        0.0
    } else {
        counts.correct as f64 / counts.truth as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalReport {
        per_sample,
        aggregate: Aggregate {
            precision,
            recall,
            f1,
            mean_cer: if n == 0 { 0.0 } else { cer_sum / n as f64 },
            word_accuracy: if n == 0 { 0.0 } else { exact as f64 / n as f64 },
        },
        counts,
    })
}
