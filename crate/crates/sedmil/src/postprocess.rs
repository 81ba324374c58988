//! Median-filter smoothing and event extraction.
//!
//! Frame probabilities are smoothed with a class-adaptive median
//! filter whose window is the class's average event duration times a
//! factor β (default 1/3), converted to an odd frame count. The
//! smoothed probabilities are thresholded with clip gating, the binary
//! sequence is smoothed again with the same window, and maximal runs
//! of positives become events.
//!
//! Edges use truncated windows (the median of whatever samples fall
//! inside the clip); even-length truncated windows take the lower
//! median.

use crate::data::{Event, EventList};
use crate::numerics::tensor::Tensor;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum PostError {
    #[error("median window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("median window must be >= 1")]
    ZeroWindow,
    #[error("smoothing config invalid: {0}")]
    BadConfig(String),
}

/// Default window factor β.
pub const DEFAULT_BETA: f64 = 1.0 / 3.0;

/// Class-adaptive smoothing configuration.
#[derive(Clone, Debug)]
pub struct SmoothingConfig {
    pub beta: f64,
    /// Average event duration per class, seconds.
    pub durations: Vec<f64>,
    pub frame_hop: f64,
    /// Overrides adaptivity with one window for every class.
    pub fixed_window: Option<usize>,
}

impl SmoothingConfig {
    pub fn adaptive(durations: Vec<f64>, beta: f64, frame_hop: f64) -> Result<Self, PostError> {
        let config = Self { beta, durations, frame_hop, fixed_window: None };
        config.validate()?;
        Ok(config)
    }

    pub fn fixed(window: usize, num_classes: usize, frame_hop: f64) -> Result<Self, PostError> {
        if window == 0 {
            return Err(PostError::ZeroWindow);
        }
        if window.is_multiple_of(2) {
            return Err(PostError::EvenWindow(window));
        }
        Ok(Self {
            beta: DEFAULT_BETA,
            durations: vec![frame_hop * window as f64; num_classes],
            frame_hop,
            fixed_window: Some(window),
        })
    }

    fn validate(&self) -> Result<(), PostError> {
        if self.beta <= 0.0 {
            return Err(PostError::BadConfig(format!("beta {} must be > 0", self.beta)));
        }
        if self.frame_hop <= 0.0 {
            return Err(PostError::BadConfig("frame_hop must be > 0".into()));
        }
        if let Some(d) = self.durations.iter().find(|&&d| d <= 0.0) {
            return Err(PostError::BadConfig(format!("duration {d} must be > 0")));
        }
        Ok(())
    }

    /// Window in frames for one class.
    pub fn window_for(&self, class: usize) -> usize {
        match self.fixed_window {
            Some(w) => w,
            None => window_size(self.durations[class], self.beta, self.frame_hop),
        }
    }
}

/// Adaptive window: duration·β seconds, divided by the hop and rounded
/// to the nearest odd frame count >= 1 (even results are adjusted down
/// so the median stays centered).
pub fn window_size(duration_s: f64, beta: f64, frame_hop: f64) -> usize {
    let frames = (duration_s * beta / frame_hop).round() as i64;
    let frames = frames.max(1);
    let odd = if frames % 2 == 0 { frames - 1 } else { frames };
    odd.max(1) as usize
}

/// Median filter with truncated windows at the edges; window must be
/// odd. Window 1 is the identity.
pub fn median_filter(series: &[f64], window: usize) -> Result<Vec<f64>, PostError> {
    if window == 0 {
        return Err(PostError::ZeroWindow);
    }
    if window.is_multiple_of(2) {
        return Err(PostError::EvenWindow(window));
    }
    let t = series.len();
    let half = window / 2;
    let mut out = Vec::with_capacity(t);
    let mut buf: Vec<f64> = Vec::with_capacity(window);
    for i in 0..t {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(t.saturating_sub(1));
        buf.clear();
        buf.extend_from_slice(&series[lo..=hi]);
        buf.sort_by(f64::total_cmp);
        // Odd length: middle; even (truncated) length: lower median.
        out.push(buf[(buf.len() - 1) / 2]);
    }
    Ok(out)
}

/// Full smoothing pipeline for one clip: per class, median-filter the
/// probabilities, threshold at gamma with clip gating, then
/// median-filter the binary prediction again with the same window.
pub fn smooth_pipeline(
    frame_probs: &Tensor,
    clip_labels: &[bool],
    config: &SmoothingConfig,
    gamma: f64,
) -> Result<Vec<Vec<bool>>, PostError> {
    config.validate()?;
    let c = frame_probs.rows();
    if clip_labels.len() != c || (config.fixed_window.is_none() && config.durations.len() != c) {
        return Err(PostError::BadConfig(format!(
            "expected {c} classes in labels/durations"
        )));
    }
    let mut out = Vec::with_capacity(c);
    for (ci, &clip_label) in clip_labels.iter().enumerate() {
        let window = config.window_for(ci);
        let smoothed = median_filter(frame_probs.row(ci), window)?;
        let binary: Vec<f64> = smoothed
            .iter()
            .map(|&p| if clip_label && p >= gamma { 1.0 } else { 0.0 })
            .collect();
        let resmoothed = median_filter(&binary, window)?;
        out.push(resmoothed.iter().map(|&v| v > 0.5).collect());
    }
    Ok(out)
}

/// Converts per-class binary frame labels into events: maximal runs of
/// positives, frame t spanning [t·hop, (t+1)·hop).
pub fn frames_to_events(binary: &[Vec<bool>], frame_hop: f64, clip_id: &str) -> EventList {
    let mut events = Vec::new();
    for (class, row) in binary.iter().enumerate() {
        let mut run_start: Option<usize> = None;
        for (t, &on) in row.iter().enumerate() {
            match (on, run_start) {
                (true, None) => run_start = Some(t),
                (false, Some(start)) => {
                    events.push(Event {
                        clip_id: clip_id.to_string(),
                        class,
                        onset: start as f64 * frame_hop,
                        offset: t as f64 * frame_hop,
                    });
                    run_start = None;
                }
                _ => {}
            }
        }
        if let Some(start) = run_start {
            events.push(Event {
                clip_id: clip_id.to_string(),
                class,
                onset: start as f64 * frame_hop,
                offset: row.len() as f64 * frame_hop,
            });
        }
    }
    events
}

/// Inverse of [`frames_to_events`] for one clip: frame t is positive
/// for a class iff its center lies inside one of the class's events.
pub fn events_to_frames(
    events: &[Event],
    num_classes: usize,
    num_frames: usize,
    frame_hop: f64,
) -> Vec<Vec<bool>> {
    let mut out = vec![vec![false; num_frames]; num_classes];
    for e in events {
        for (t, slot) in out[e.class].iter_mut().enumerate() {
            let center = (t as f64 + 0.5) * frame_hop;
            if center >= e.onset && center < e.offset {
                *slot = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force median for the oracle: sort the window, pick the
    /// lower median.
    fn brute_median(series: &[f64], window: usize, i: usize) -> f64 {
        let half = window / 2;
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(series.len() - 1);
        let mut buf: Vec<f64> = series[lo..=hi].to_vec();
        buf.sort_by(f64::total_cmp);
        buf[(buf.len() - 1) / 2]
    }

    #[test]
    fn window_size_hand_values() {
        // 1.02 s at β=1/3 and 20 ms hop: 17 frames, already odd.
        assert_eq!(window_size(1.02, 1.0 / 3.0, 0.02), 17);
        // Tiny duration floors at one frame.
        assert_eq!(window_size(0.02, 1.0, 0.02), 1);
        assert_eq!(window_size(0.02, 1.0 / 3.0, 0.02), 1);
        // β=1 triples the pre-rounding width of β=1/3.
        assert_eq!(window_size(1.02, 1.0, 0.02), 51);
        // Even results round down to odd.
        assert_eq!(window_size(0.36, 1.0, 0.02), 17);
    }

    #[test]
    fn median_filter_hand_examples() {
        assert_eq!(
            median_filter(&[0.0, 0.0, 1.0, 0.0, 0.0], 3).unwrap(),
            vec![0.0; 5]
        );
        assert_eq!(
            median_filter(&[1.0, 1.0, 0.0, 1.0, 1.0], 3).unwrap(),
            vec![1.0; 5]
        );
        let series = [0.3, 0.9, 0.1, 0.5];
        assert_eq!(median_filter(&series, 1).unwrap(), series.to_vec());
    }

    #[test]
    fn median_filter_rejects_even_window() {
        assert!(matches!(
            median_filter(&[1.0, 2.0], 4),
            Err(PostError::EvenWindow(4))
        ));
        assert!(matches!(median_filter(&[1.0], 0), Err(PostError::ZeroWindow)));
    }

    #[test]
    fn median_filter_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let t = rng.random_range(1..=60);
            let binary = rng.random_bool(0.5);
            let series: Vec<f64> = (0..t)
                .map(|_| {
                    if binary {
                        if rng.random_bool(0.5) { 1.0 } else { 0.0 }
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect();
            let window = 2 * rng.random_range(0..8) + 1;
            let got = median_filter(&series, window).unwrap();
            for (i, &g) in got.iter().enumerate() {
                assert_eq!(g, brute_median(&series, window, i), "t={i} w={window}");
            }
        }
    }

    #[test]
    fn median_filter_preserves_value_set_and_is_reversal_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let t = rng.random_range(1..=40);
            let series: Vec<f64> = (0..t).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let window = 2 * rng.random_range(0..6) + 1;
            let out = median_filter(&series, window).unwrap();
            assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));

            let reversed: Vec<f64> = series.iter().rev().cloned().collect();
            let out_rev = median_filter(&reversed, window).unwrap();
            let rev_out: Vec<f64> = out.iter().rev().cloned().collect();
            assert_eq!(out_rev, rev_out);
        }
    }

    fn config1(durations: Vec<f64>) -> SmoothingConfig {
        SmoothingConfig::adaptive(durations, 1.0 / 3.0, 0.02).unwrap()
    }

    #[test]
    fn smooth_pipeline_trivial_cases() {
        let probs = Tensor::from_rows(&[vec![0.0; 10]]).unwrap();
        let out = smooth_pipeline(&probs, &[true], &config1(vec![0.3]), 0.5).unwrap();
        assert!(out[0].iter().all(|&b| !b));

        let probs = Tensor::from_rows(&[vec![0.9; 10]]).unwrap();
        let out = smooth_pipeline(&probs, &[true], &config1(vec![0.3]), 0.5).unwrap();
        assert!(out[0].iter().all(|&b| b));

        // Clip-negative class: gated to zero regardless of probability.
        let out = smooth_pipeline(&probs, &[false], &config1(vec![0.3]), 0.5).unwrap();
        assert!(out[0].iter().all(|&b| !b));
    }

    #[test]
    fn smooth_pipeline_matches_independent_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let t = 40;
            let row: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            let duration = rng.random_range(0.1..1.0);
            let clip_label = rng.random_bool(0.8);
            let probs = Tensor::from_rows(std::slice::from_ref(&row)).unwrap();
            let config = config1(vec![duration]);
            let got = smooth_pipeline(&probs, &[clip_label], &config, 0.5).unwrap();

            // Independent oracle: brute-force medians at each stage.
            let window = window_size(duration, 1.0 / 3.0, 0.02);
            let stage1: Vec<f64> = (0..t).map(|i| brute_median(&row, window, i)).collect();
            let stage2: Vec<f64> = stage1
                .iter()
                .map(|&p| if clip_label && p >= 0.5 { 1.0 } else { 0.0 })
                .collect();
            let stage3: Vec<f64> = (0..t).map(|i| brute_median(&stage2, window, i)).collect();
            let expect: Vec<bool> = stage3.iter().map(|&v| v > 0.5).collect();
            assert_eq!(got[0], expect);
        }
    }

    #[test]
    fn frames_to_events_hand_examples() {
        // Frames 5..=9 positive at hop 0.02: one event (0.10, 0.20).
        let mut row = vec![false; 20];
        for slot in row.iter_mut().take(10).skip(5) {
            *slot = true;
        }
        let events = frames_to_events(&[row], 0.02, "clip");
        assert_eq!(events.len(), 1);
        assert!((events[0].onset - 0.10).abs() < 1e-12);
        assert!((events[0].offset - 0.20).abs() < 1e-12);

        assert!(frames_to_events(&[vec![false; 8]], 0.02, "c").is_empty());

        let all = frames_to_events(&[vec![true; 500]], 0.02, "c");
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].onset, 0.0);
        assert!((all[0].offset - 10.0).abs() < 1e-12);
    }

    #[test]
    fn frames_events_round_trip_on_grid_aligned_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let t = rng.random_range(5..60);
            let mut row = vec![false; t];
            // Random runs with gaps >= 1 frame.
            let mut pos = 0usize;
            while pos + 1 < t {
                let run = rng.random_range(1..=4).min(t - pos);
                if rng.random_bool(0.6) {
                    for slot in row.iter_mut().skip(pos).take(run) {
                        *slot = true;
                    }
                    pos += run + 1;
                } else {
                    pos += run;
                }
            }
            let binary = vec![row.clone()];
            let events = frames_to_events(&binary, 0.02, "c");
            let back = events_to_frames(&events, 1, t, 0.02);
            assert_eq!(back[0], row);
        }
    }
}
