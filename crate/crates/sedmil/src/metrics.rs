//! Tagging and event-based evaluation.
//!
//! Clip-level (audio tagging) F1 compares weak label sets. Event-based
//! F1 matches predicted events to references greedily in onset order
//! within each (clip, class): a prediction matches an unmatched
//! reference when its onset lies within the onset collar and its
//! offset within max(absolute collar, relative collar · reference
//! length). Macro averages ignore classes absent from both sides.

use crate::data::{DataError, Event};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("no classes to average")]
    NoClasses,
    #[error("clip universe mismatch: {clip_id} present on one side only")]
    ClipMismatch { clip_id: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Onset/offset tolerances for event matching, seconds (the relative
/// offset collar is a fraction of the reference event length).
#[derive(Clone, Copy, Debug)]
pub struct CollarConfig {
    pub onset_collar: f64,
    pub offset_collar_abs: f64,
    pub offset_collar_rel: f64,
}

impl Default for CollarConfig {
    fn default() -> Self {
        Self {
            onset_collar: 0.2,
            offset_collar_abs: 0.2,
            offset_collar_rel: 0.2,
        }
    }
}

impl CollarConfig {
    /// Collar test for one (reference, prediction) pair.
    pub fn matches(&self, reference: &Event, prediction: &Event) -> bool {
        let offset_collar = self
            .offset_collar_abs
            .max(self.offset_collar_rel * (reference.offset - reference.onset));
        (prediction.onset - reference.onset).abs() <= self.onset_collar
            && (prediction.offset - reference.offset).abs() <= offset_collar
    }
}

/// Per-class true positives, false positives, false negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn is_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }
}

/// Counts per class.
#[derive(Clone, Debug)]
pub struct ClasswiseCounts {
    pub per_class: Vec<Counts>,
}

impl ClasswiseCounts {
    pub fn zeros(num_classes: usize) -> Self {
        Self { per_class: vec![Counts::default(); num_classes] }
    }

    pub fn add(&mut self, other: &ClasswiseCounts) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
    }
}

fn validate_events(events: &[Event]) -> Result<(), MetricsError> {
    for e in events {
        if e.onset >= e.offset {
            return Err(MetricsError::Data(DataError::MalformedEvent {
                clip_id: e.clip_id.clone(),
                class: e.class,
                onset: e.onset,
                offset: e.offset,
            }));
        }
    }
    Ok(())
}

fn group_by_clip_class(events: &[Event]) -> BTreeMap<(String, usize), Vec<Event>> {
    let mut groups: BTreeMap<(String, usize), Vec<Event>> = BTreeMap::new();
    for e in events {
        groups
            .entry((e.clip_id.clone(), e.class))
            .or_default()
            .push(e.clone());
    }
    for list in groups.values_mut() {
        list.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    }
    groups
}

/// Greedy one-to-one event matching within each (clip, class): each
/// prediction, in onset order, takes the earliest unmatched reference
/// it is collar-compatible with.
pub fn match_events(
    refs: &[Event],
    preds: &[Event],
    collars: &CollarConfig,
    num_classes: usize,
) -> Result<ClasswiseCounts, MetricsError> {
    validate_events(refs)?;
    validate_events(preds)?;
    let mut counts = ClasswiseCounts::zeros(num_classes);
    let ref_groups = group_by_clip_class(refs);
    let pred_groups = group_by_clip_class(preds);

    let keys: BTreeSet<(String, usize)> = ref_groups
        .keys()
        .chain(pred_groups.keys())
        .cloned()
        .collect();
    for key in keys {
        let class = key.1;
        let empty = Vec::new();
        let rs = ref_groups.get(&key).unwrap_or(&empty);
        let ps = pred_groups.get(&key).unwrap_or(&empty);
        let mut taken = vec![false; rs.len()];
        let mut tp = 0u64;
        for p in ps {
            if let Some(i) = rs
                .iter()
                .enumerate()
                .position(|(i, r)| !taken[i] && collars.matches(r, p))
            {
                taken[i] = true;
                tp += 1;
            }
        }
        counts.per_class[class].tp += tp;
        counts.per_class[class].fp += ps.len() as u64 - tp;
        counts.per_class[class].fn_ += rs.len() as u64 - tp;
    }
    Ok(counts)
}

/// Precision, recall and F1 from raw counts; each term is 0 when its
/// denominator is 0.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f)
}

/// Unweighted mean of per-class F1, ignoring classes with no events on
/// either side (they contribute neither 0 nor 1).
pub fn macro_f1(counts: &ClasswiseCounts) -> Result<f64, MetricsError> {
    if counts.per_class.is_empty() {
        return Err(MetricsError::NoClasses);
    }
    let active: Vec<f64> = counts
        .per_class
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| f1(c.tp, c.fp, c.fn_).2)
        .collect();
    if active.is_empty() {
        return Ok(0.0);
    }
    Ok(active.iter().sum::<f64>() / active.len() as f64)
}

/// Tagging report: macro and micro F1 plus the underlying counts.
#[derive(Clone, Debug)]
pub struct ClipF1 {
    pub counts: ClasswiseCounts,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

/// Clip-level (audio tagging) F1 over weak label sets. Both sides must
/// cover the same clips.
pub fn clip_f1(
    ref_weak: &[(String, Vec<usize>)],
    pred_weak: &[(String, Vec<usize>)],
    num_classes: usize,
) -> Result<ClipF1, MetricsError> {
    let to_map = |rows: &[(String, Vec<usize>)]| -> BTreeMap<String, BTreeSet<usize>> {
        rows.iter()
            .map(|(clip, classes)| (clip.clone(), classes.iter().cloned().collect()))
            .collect()
    };
    let refs = to_map(ref_weak);
    let preds = to_map(pred_weak);
    for clip_id in refs.keys() {
        if !preds.contains_key(clip_id) {
            return Err(MetricsError::ClipMismatch { clip_id: clip_id.clone() });
        }
    }
    for clip_id in preds.keys() {
        if !refs.contains_key(clip_id) {
            return Err(MetricsError::ClipMismatch { clip_id: clip_id.clone() });
        }
    }

    let mut counts = ClasswiseCounts::zeros(num_classes);
    for (clip_id, ref_set) in &refs {
        let pred_set = &preds[clip_id];
        for c in 0..num_classes {
            match (ref_set.contains(&c), pred_set.contains(&c)) {
                (true, true) => counts.per_class[c].tp += 1,
                (false, true) => counts.per_class[c].fp += 1,
                (true, false) => counts.per_class[c].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let macro_score = macro_f1(&counts)?;
    let (tp, fp, fn_) = counts.per_class.iter().fold((0, 0, 0), |acc, c| {
        (acc.0 + c.tp, acc.1 + c.fp, acc.2 + c.fn_)
    });
    let micro = f1(tp, fp, fn_).2;
    Ok(ClipF1 { counts, macro_f1: macro_score, micro_f1: micro })
}
