//! Shared helpers for the integration and acceptance suites: an
//! exhaustive bipartite matching oracle, synthetic dataset builders
//! and an end-to-end detection scorer.

// Each test binary uses its own subset of these helpers.
#![allow(dead_code)]

use sedmil::data::{ClusterSpec, ComboSpec, Dataset, DurationSpec, Event, SyntheticSpec};
use sedmil::metrics::{match_events, ClasswiseCounts, CollarConfig};
use sedmil::model::Model;
use sedmil::postprocess::{frames_to_events, smooth_pipeline, SmoothingConfig};

/// Maximum bipartite matching size between collar-compatible
/// (reference, prediction) pairs — the optimal-matching oracle the
/// greedy matcher is audited against. Kuhn's augmenting paths; the
/// instances are tiny.
pub fn optimal_matching_tp(refs: &[Event], preds: &[Event], collars: &CollarConfig) -> u64 {
    let compatible: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            refs.iter()
                .enumerate()
                .filter(|(_, r)| {
                    r.clip_id == p.clip_id && r.class == p.class && collars.matches(r, p)
                })
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let mut ref_owner: Vec<Option<usize>> = vec![None; refs.len()];

    fn try_assign(
        pred: usize,
        compatible: &[Vec<usize>],
        visited: &mut [bool],
        ref_owner: &mut [Option<usize>],
    ) -> bool {
        for &r in &compatible[pred] {
            if visited[r] {
                continue;
            }
            visited[r] = true;
            if ref_owner[r].is_none()
                || try_assign(ref_owner[r].unwrap(), compatible, visited, ref_owner)
            {
                ref_owner[r] = Some(pred);
                return true;
            }
        }
        false
    }

    let mut matched = 0u64;
    for pred in 0..preds.len() {
        let mut visited = vec![false; refs.len()];
        if try_assign(pred, &compatible, &mut visited, &mut ref_owner) {
            matched += 1;
        }
    }
    matched
}

/// Scores a trained model on a split end to end: frame probabilities,
/// adaptive median smoothing with clip gating, run extraction and
/// collared event matching.
pub fn score_events(
    model: &Model,
    test: &Dataset,
    durations: &[f64],
    beta: f64,
) -> ClasswiseCounts {
    let hop = test.clips.first().map_or(0.02, |c| c.frame_hop);
    let smoothing = SmoothingConfig::adaptive(durations.to_vec(), beta, hop).unwrap();
    let mut refs: Vec<Event> = Vec::new();
    let mut preds: Vec<Event> = Vec::new();
    for clip in &test.clips {
        if let Some(strong) = &clip.strong {
            refs.extend(strong.iter().cloned());
        }
        let (clip_pred, frame_pred) = model.predict_clip(&clip.features).unwrap();
        let smoothed = smooth_pipeline(
            &frame_pred.probs,
            &clip_pred.labels,
            &smoothing,
            model.config.gamma,
        )
        .unwrap();
        preds.extend(frames_to_events(&smoothed, clip.frame_hop, &clip.clip_id));
    }
    match_events(&refs, &preds, &CollarConfig::default(), test.num_classes()).unwrap()
}

/// Mean event duration per class from a split's strong labels.
pub fn split_durations(split: &Dataset) -> Vec<f64> {
    let events: Vec<Event> = split
        .clips
        .iter()
        .flat_map(|c| c.strong.clone().unwrap_or_default())
        .collect();
    sedmil::data::class_durations(&events, &split.class_names).unwrap()
}

/// Well-separated 4-class geometry for the decision-surface
/// experiment: each class occupies two coordinates of the first eight,
/// the background sits on the negative side of every class direction,
/// the remaining coordinates carry only noise.
pub fn separated_clusters_spec(seed: u64) -> SyntheticSpec {
    let d = 32;
    let class_names: Vec<String> = ["alarm", "dog", "speech", "water"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut clusters = Vec::new();
    for c in 0..4usize {
        let mut mean = vec![0.0; d];
        mean[2 * c] = 2.4;
        mean[2 * c + 1] = 1.2;
        clusters.push(ClusterSpec { mean, spread: 0.45 });
    }
    let mut bg_mean = vec![0.0; d];
    for slot in bg_mean.iter_mut().take(8) {
        *slot = -0.55;
    }
    let combo = |classes: Vec<usize>, train, val, test| ComboSpec { classes, train, val, test };
    SyntheticSpec {
        class_names,
        feature_dim: d,
        frames: 80,
        frame_hop: 0.02,
        combos: vec![
            combo(vec![0], 70, 18, 18),
            combo(vec![1], 70, 18, 18),
            combo(vec![2], 70, 18, 18),
            combo(vec![3], 70, 18, 18),
            combo(vec![0, 1], 30, 8, 8),
            combo(vec![2, 3], 30, 8, 8),
            combo(vec![1, 2], 30, 8, 8),
            combo(vec![], 30, 4, 4),
        ],
        durations: vec![
            DurationSpec { mean_s: 0.44, jitter_s: 0.12 },
            DurationSpec { mean_s: 0.52, jitter_s: 0.12 },
            DurationSpec { mean_s: 0.40, jitter_s: 0.10 },
            DurationSpec { mean_s: 0.60, jitter_s: 0.14 },
        ],
        clusters,
        background: ClusterSpec { mean: bg_mean, spread: 0.55 },
        noise: 0.10,
        seed,
    }
}

/// Unbalanced co-occurrence pathology for the disentangling
/// experiment: one dominant class (index 0) with broad, noisy features
/// in later coordinates; two rare classes living in the first four
/// coordinates that almost always co-occur with the dominant one.
pub fn unbalanced_cooccurrence_spec(seed: u64) -> SyntheticSpec {
    let d = 32;
    let class_names: Vec<String> = ["dominant", "rare_a", "rare_b"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut dominant_mean = vec![0.0; d];
    for slot in dominant_mean.iter_mut().take(24).skip(8) {
        *slot = 1.4;
    }
    let mut rare_a_mean = vec![0.0; d];
    rare_a_mean[0] = 2.6;
    rare_a_mean[1] = 1.4;
    let mut rare_b_mean = vec![0.0; d];
    rare_b_mean[2] = 2.6;
    rare_b_mean[3] = 1.4;
    let mut bg_mean = vec![0.0; d];
    for slot in bg_mean.iter_mut().take(4) {
        *slot = -0.5;
    }
    let combo = |classes: Vec<usize>, train, val, test| ComboSpec { classes, train, val, test };
    SyntheticSpec {
        class_names,
        feature_dim: d,
        frames: 80,
        frame_hop: 0.02,
        combos: vec![
            combo(vec![0], 60, 14, 14),
            combo(vec![0, 1], 25, 8, 8),
            combo(vec![0, 2], 25, 8, 8),
            combo(vec![1], 6, 3, 3),
            combo(vec![2], 6, 3, 3),
        ],
        durations: vec![
            DurationSpec { mean_s: 1.00, jitter_s: 0.20 },
            DurationSpec { mean_s: 0.36, jitter_s: 0.08 },
            DurationSpec { mean_s: 0.36, jitter_s: 0.08 },
        ],
        clusters: vec![
            ClusterSpec { mean: dominant_mean, spread: 0.80 },
            ClusterSpec { mean: rare_a_mean, spread: 0.40 },
            ClusterSpec { mean: rare_b_mean, spread: 0.40 },
        ],
        background: ClusterSpec { mean: bg_mean, spread: 0.50 },
        noise: 0.15,
        seed,
    }
}

/// Median of a small sample.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}
