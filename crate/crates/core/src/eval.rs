//! Metrics, baselines and the trigger-zone masking ablation.
//!
//! Flip-reasoning scores are computed over every utterance of every entry.
//! Positions outside a model's window count as predicted non-triggers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::ptz::{apply_ptz_mask, compute_ptz};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

impl BinaryConfusion {
    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_of(self.precision(), self.recall())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// `confusion[gold][pred]`.
    pub confusion: Vec<Vec<u64>>,
    pub scored: u64,
    /// Class-1 figures for trigger decisions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive: Option<PositiveClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveClass {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: BinaryConfusion,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Full report over label indices `0..labels.len()`.
pub fn classification_report(gold: &[usize], pred: &[usize], labels: &[String]) -> Result<MetricsReport> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let k = labels.len();
    if let Some(&bad) = gold.iter().chain(pred).find(|&&x| x >= k) {
        return Err(Error::UnknownLabel(format!("label index {bad}")));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g][p] += 1;
    }
    let total = gold.len() as u64;
    let mut classes = Vec::with_capacity(k);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = f1_of(precision, recall);
        let w = ratio(support, total);
        wp += w * precision;
        wr += w * recall;
        wf += w * f1;
        classes.push(ClassMetrics {
            label: labels[c].clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        classes,
        weighted_precision: wp,
        weighted_recall: wr,
        weighted_f1: wf,
        accuracy: ratio(correct, total),
        confusion,
        scored: total,
        positive: None,
    })
}

fn indices_of<S: AsRef<str>>(labels: &[S], label_set: &[String]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            label_set
                .iter()
                .position(|x| x == l.as_ref())
                .ok_or_else(|| Error::UnknownLabel(l.as_ref().to_string()))
        })
        .collect()
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1<S: AsRef<str>>(gold: &[S], pred: &[S], label_set: &[String]) -> Result<f64> {
    Ok(emotion_report(gold, pred, label_set)?.weighted_f1)
}

pub fn emotion_report<S: AsRef<str>>(gold: &[S], pred: &[S], label_set: &[String]) -> Result<MetricsReport> {
    classification_report(&indices_of(gold, label_set)?, &indices_of(pred, label_set)?, label_set)
}

/// Class-1 F1 and confusion counts. Panics on unequal lengths.
pub fn trigger_f1(gold: &[u8], pred: &[u8]) -> (f64, BinaryConfusion) {
    assert_eq!(gold.len(), pred.len(), "gold and predicted decisions must align");
    let mut m = BinaryConfusion::default();
    for (&g, &p) in gold.iter().zip(pred) {
        match (g != 0, p != 0) {
            (false, false) => m.tn += 1,
            (false, true) => m.fp += 1,
            (true, false) => m.fn_ += 1,
            (true, true) => m.tp += 1,
        }
    }
    (m.f1(), m)
}

pub fn trigger_report(gold: &[u8], pred: &[u8]) -> Result<MetricsReport> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "{} gold decisions but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let g: Vec<usize> = gold.iter().map(|&x| usize::from(x != 0)).collect();
    let p: Vec<usize> = pred.iter().map(|&x| usize::from(x != 0)).collect();
    let mut report = classification_report(&g, &p, &["0".to_string(), "1".to_string()])?;
    let (f1, confusion) = trigger_f1(gold, pred);
    report.positive = Some(PositiveClass {
        precision: confusion.precision(),
        recall: confusion.recall(),
        f1,
        confusion,
    });
    Ok(report)
}

/// Per-entry decisions of a flip-reasoning corpus, flattened in entry order.
pub fn gold_triggers(corpus: &Corpus) -> Result<Vec<Vec<u8>>> {
    corpus
        .dialogues
        .iter()
        .map(|d| {
            d.triggers.clone().ok_or_else(|| Error::Validation {
                episode: d.id.clone(),
                message: "no trigger labels".into(),
            })
        })
        .collect()
}

/// Scores per-entry trigger predictions against a corpus.
pub fn score_triggers(corpus: &Corpus, predictions: &[Vec<u8>]) -> Result<MetricsReport> {
    let gold = gold_triggers(corpus)?;
    if gold.len() != predictions.len() {
        return Err(Error::Invalid(format!(
            "{} entries but {} predictions",
            gold.len(),
            predictions.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(predictions).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Invalid(format!(
                "entry {i}: {} utterances but {} predictions",
                g.len(),
                p.len()
            )));
        }
    }
    trigger_report(&gold.concat(), &predictions.concat())
}

/// Applies the zone mask of each entry's final utterance.
pub fn mask_predictions(corpus: &Corpus, predictions: &[Vec<u8>]) -> Vec<Vec<u8>> {
    corpus
        .dialogues
        .iter()
        .zip(predictions)
        .map(|(d, p)| apply_ptz_mask(p, compute_ptz(d, d.len() - 1), 0))
        .collect()
}

/// Scores per-utterance emotion predictions against a corpus.
pub fn score_emotions(corpus: &Corpus, predictions: &[Vec<String>]) -> Result<MetricsReport> {
    if corpus.dialogues.len() != predictions.len() {
        return Err(Error::Invalid(format!(
            "{} episodes but {} predictions",
            corpus.dialogues.len(),
            predictions.len()
        )));
    }
    let mut gold = Vec::new();
    for (i, (d, p)) in corpus.dialogues.iter().zip(predictions).enumerate() {
        if d.len() != p.len() {
            return Err(Error::Invalid(format!(
                "episode {i}: {} utterances but {} predictions",
                d.len(),
                p.len()
            )));
        }
        for u in &d.utterances {
            gold.push(u.emotion.clone().ok_or_else(|| Error::Validation {
                episode: d.id.clone(),
                message: format!("utterance {} has no emotion label", u.index),
            })?);
        }
    }
    emotion_report(&gold, &predictions.concat(), &corpus.label_set)
}

/// Predicts `neutral` for every utterance.
pub fn neutral_baseline(corpus: &Corpus) -> Result<MetricsReport> {
    if corpus.label_index("neutral").is_none() {
        return Err(Error::UnknownLabel("neutral".into()));
    }
    let predictions: Vec<Vec<String>> = corpus
        .dialogues
        .iter()
        .map(|d| vec!["neutral".to_string(); d.len()])
        .collect();
    score_emotions(corpus, &predictions)
}

/// Marks only the utterance right before each target as a trigger.
pub fn rule_based_predictions(corpus: &Corpus) -> Vec<Vec<u8>> {
    corpus
        .dialogues
        .iter()
        .map(|d| {
            let mut p = vec![0u8; d.len()];
            if d.len() >= 2 {
                p[d.len() - 2] = 1;
            }
            p
        })
        .collect()
}

pub fn rule_based_baseline(corpus: &Corpus) -> Result<MetricsReport> {
    score_triggers(corpus, &rule_based_predictions(corpus))
}

/// Paired scores with masking off and on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtzAblation {
    pub f1_off: f64,
    pub f1_on: f64,
    pub change: f64,
    /// Positive decisions zeroed by the mask.
    pub mask_count: u64,
    pub positives_off: u64,
    pub positives_on: u64,
    pub off: MetricsReport,
    pub on: MetricsReport,
}

/// Compares unmasked predictions against the same predictions masked to the
/// zone of each entry's target.
pub fn ablate_ptz(corpus: &Corpus, unmasked: &[Vec<u8>]) -> Result<PtzAblation> {
    let masked = mask_predictions(corpus, unmasked);
    let off = score_triggers(corpus, unmasked)?;
    let on = score_triggers(corpus, &masked)?;
    let count = |p: &[Vec<u8>]| p.iter().flatten().filter(|&&x| x == 1).count() as u64;
    let positives_off = count(unmasked);
    let positives_on = count(&masked);
    let mask_count = unmasked
        .iter()
        .flatten()
        .zip(masked.iter().flatten())
        .filter(|(&a, &b)| a == 1 && b == 0)
        .count() as u64;
    let f1_off = off.positive.as_ref().map_or(0.0, |p| p.f1);
    let f1_on = on.positive.as_ref().map_or(0.0, |p| p.f1);
    Ok(PtzAblation {
        f1_off,
        f1_on,
        change: f1_on - f1_off,
        mask_count,
        positives_off,
        positives_on,
        off,
        on,
    })
}

/// Aligned text rendering of a report, scores in percent.
pub fn format_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
    for c in &report.classes {
        let _ = writeln!(
            out,
            "{:<12} {:>9.2} {:>9.2} {:>9.2} {:>8}",
            c.label,
            100.0 * c.precision,
            100.0 * c.recall,
            100.0 * c.f1,
            c.support
        );
    }
    let _ = writeln!(
        out,
        "{:<12} {:>9.2} {:>9.2} {:>9.2} {:>8}",
        "weighted",
        100.0 * report.weighted_precision,
        100.0 * report.weighted_recall,
        100.0 * report.weighted_f1,
        report.scored
    );
    if let Some(p) = &report.positive {
        let m = p.confusion;
        let _ = writeln!(out, "trigger F1 {:.2}  TN {} FP {} FN {} TP {}", 100.0 * p.f1, m.tn, m.fp, m.fn_, m.tp);
    }
    out
}
