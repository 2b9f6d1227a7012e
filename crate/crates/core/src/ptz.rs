//! Probable trigger zone: the span from the target speaker's previous
//! utterance up to and including the target. Trigger predictions outside the
//! zone are forced to zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue};

/// Inclusive range of episode indices `[start, end]`, `end` being the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtzRange {
    pub start: usize,
    pub end: usize,
}

impl PtzRange {
    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index <= self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Zone for a speaker sequence. With no earlier utterance by the target
/// speaker the zone is the whole prefix `[0, target]`.
pub fn ptz_for_speakers<S: AsRef<str>>(speakers: &[S], target_index: usize) -> PtzRange {
    let who = speakers[target_index].as_ref();
    let start = speakers[..target_index]
        .iter()
        .rposition(|s| s.as_ref() == who)
        .unwrap_or(0);
    PtzRange {
        start,
        end: target_index,
    }
}

pub fn compute_ptz(dialogue: &Dialogue, target_index: usize) -> PtzRange {
    let speakers: Vec<&str> = dialogue.speakers().collect();
    ptz_for_speakers(&speakers, target_index)
}

/// Zeroes predictions outside `ptz`. Position `j` of `predictions` is episode
/// index `window_offset + j`.
pub fn apply_ptz_mask(predictions: &[u8], ptz: PtzRange, window_offset: usize) -> Vec<u8> {
    predictions
        .iter()
        .enumerate()
        .map(|(j, &p)| if ptz.contains(window_offset + j) { p } else { 0 })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SkewRow {
    pub count_0: u64,
    pub count_1: u64,
    /// `count_0 / count_1` rounded to one decimal; `None` without positives.
    pub ratio: Option<f64>,
}

impl SkewRow {
    fn add(&mut self, label: u8) {
        if label == 1 {
            self.count_1 += 1;
        } else {
            self.count_0 += 1;
        }
    }

    fn finish(mut self) -> Self {
        self.ratio = (self.count_1 > 0)
            .then(|| (self.count_0 as f64 / self.count_1 as f64 * 10.0).round() / 10.0);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub window: usize,
    /// How candidates were counted, for reconciling with other tallies.
    pub convention: String,
    pub original: SkewRow,
    pub setting_1: SkewRow,
    pub setting_2: Option<SkewRow>,
}

pub const SKEW_CONVENTION: &str = "one candidate per (entry, utterance); the target counts as a \
candidate; window = last w utterances of each entry; zone intersected with the window in episode indices";

/// Label counts over all candidates (original), the last-`w` window
/// (setting 1), and the window intersected with the zone (setting 2).
pub fn skew_report(corpus: &Corpus, w: usize, use_ptz: bool) -> SkewReport {
    let mut original = SkewRow::default();
    let mut setting_1 = SkewRow::default();
    let mut setting_2 = SkewRow::default();
    for d in &corpus.dialogues {
        let Some(triggers) = &d.triggers else { continue };
        if triggers.is_empty() {
            continue;
        }
        let target = triggers.len() - 1;
        let window_start = triggers.len().saturating_sub(w);
        let zone = compute_ptz(d, target);
        for (i, &label) in triggers.iter().enumerate() {
            original.add(label);
            if i >= window_start {
                setting_1.add(label);
                if zone.contains(i) {
                    setting_2.add(label);
                }
            }
        }
    }
    SkewReport {
        window: w,
        convention: SKEW_CONVENTION.to_string(),
        original: original.finish(),
        setting_1: setting_1.finish(),
        setting_2: use_ptz.then(|| setting_2.finish()),
    }
}

/// Aligned text rendering of a [`SkewReport`].
pub fn format_skew_table(report: &SkewReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>6}", "Dataset", "0", "1", "Ratio");
    let mut row = |name: &str, r: &SkewRow| {
        let ratio = r.ratio.map_or("-".to_string(), |x| format!("{x:.1}"));
        let _ = writeln!(out, "{name:<10} {:>8} {:>8} {ratio:>6}", r.count_0, r.count_1);
    };
    row("Original", &report.original);
    row("Setting 1", &report.setting_1);
    if let Some(s2) = &report.setting_2 {
        row("Setting 2", s2);
    }
    out
}
