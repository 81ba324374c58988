//! Clip-level classification and frame-level decision surfaces.
//!
//! The clip classifier G_c is a weight vector plus bias behind a
//! sigmoid (a 1x1 convolution applied per position). Frame
//! probabilities come either from the shared decision surface — G_c
//! applied framewise — or, for attention pooling, from the specialized
//! decision surface S_c(x) = σ(w_c·x) built from the detector weights
//! (no bias, no scale division). Thresholded predictions gate frame
//! positives on the clip-level decision.

use crate::numerics::tape::{NumericsError, Tape, VarId};
use crate::numerics::tensor::Tensor;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DecisionError {
    #[error("classifier dimension {expected} does not match input dimension {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("specialized decision surface requires attention pooling (ATP)")]
    SdsRequiresAtp,
    #[error("threshold {name}={value} outside (0,1)")]
    BadThreshold { name: &'static str, value: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-class classifier: weight vector v_c and bias b_c.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Clip-level probabilities and thresholded labels for one clip.
#[derive(Clone, Debug)]
pub struct ClipPrediction {
    pub probs: Vec<f64>,
    pub labels: Vec<bool>,
    pub alpha: f64,
}

impl ClipPrediction {
    /// Applies the inclusive clip threshold: label iff prob >= alpha.
    pub fn from_probs(probs: Vec<f64>, alpha: f64) -> Result<Self, DecisionError> {
        check_threshold("alpha", alpha)?;
        let labels = probs.iter().map(|&p| p >= alpha).collect();
        Ok(Self { probs, labels, alpha })
    }
}

/// Which surface produced the frame probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Shared,
    Sds,
}

/// Frame-level probabilities and clip-gated labels (C×T).
#[derive(Clone, Debug)]
pub struct FramePrediction {
    pub probs: Tensor,
    pub labels: Vec<Vec<bool>>,
    pub gamma: f64,
    pub surface: Surface,
}

fn check_threshold(name: &'static str, value: f64) -> Result<(), DecisionError> {
    if !(value > 0.0 && value < 1.0) {
        return Err(DecisionError::BadThreshold { name, value });
    }
    Ok(())
}

/// Clip probability on the tape: sigmoid(v·h + b).
pub fn clip_prob_graph(
    tape: &mut Tape,
    v: VarId,
    b: VarId,
    h: VarId,
) -> Result<VarId, NumericsError> {
    let z = tape.dot(v, h)?;
    let zb = tape.add(z, b)?;
    tape.sigmoid(zb)
}

/// Framewise probabilities via the shared classifier on the tape:
/// sigmoid(reps·v + b) per row.
pub fn frame_probs_shared_graph(
    tape: &mut Tape,
    v: VarId,
    b: VarId,
    reps: VarId,
) -> Result<VarId, NumericsError> {
    let logits = tape.matvec(reps, v)?;
    let shifted = tape.add_scalar(logits, b)?;
    tape.sigmoid(shifted)
}

/// Framewise probabilities via the specialized surface on the tape:
/// sigmoid(reps·w), no bias and no scale, exactly as defined.
pub fn frame_probs_sds_graph(
    tape: &mut Tape,
    w: VarId,
    reps: VarId,
) -> Result<VarId, NumericsError> {
    let logits = tape.matvec(reps, w)?;
    tape.sigmoid(logits)
}

/// Ablation variant of the specialized surface with the attention
/// logit scaling kept in: sigmoid(reps·w / d). Off by default.
pub fn frame_probs_sds_scaled_graph(
    tape: &mut Tape,
    w: VarId,
    reps: VarId,
    scale: f64,
) -> Result<VarId, NumericsError> {
    let logits = tape.matvec(reps, w)?;
    let scaled = tape.scale(logits, 1.0 / scale)?;
    tape.sigmoid(scaled)
}

/// σ(v_c·h + b_c) for one class.
pub fn clip_probability(head: &ClassifierHead, h: &[f64]) -> Result<f64, DecisionError> {
    if head.weights.len() != h.len() {
        return Err(DecisionError::DimensionMismatch {
            expected: head.weights.len(),
            got: h.len(),
        });
    }
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::vector(head.weights.clone()));
    let b = tape.leaf(Tensor::scalar(head.bias));
    let hv = tape.leaf(Tensor::vector(h.to_vec()));
    let p = clip_prob_graph(&mut tape, v, b, hv)?;
    Ok(tape.value(p).item())
}

/// The shared decision surface: the clip classifier applied framewise.
pub fn frame_probs_shared(head: &ClassifierHead, reps: &Tensor) -> Result<Vec<f64>, DecisionError> {
    if head.weights.len() != reps.cols() {
        return Err(DecisionError::DimensionMismatch {
            expected: head.weights.len(),
            got: reps.cols(),
        });
    }
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::vector(head.weights.clone()));
    let b = tape.leaf(Tensor::scalar(head.bias));
    let r = tape.leaf(reps.clone());
    let p = frame_probs_shared_graph(&mut tape, v, b, r)?;
    Ok(tape.value(p).data().to_vec())
}

/// The specialized decision surface S_c(x_t) = σ(w_c·x_t).
pub fn frame_probs_sds(w: &[f64], reps: &Tensor) -> Result<Vec<f64>, DecisionError> {
    if w.len() != reps.cols() {
        return Err(DecisionError::DimensionMismatch {
            expected: w.len(),
            got: reps.cols(),
        });
    }
    let mut tape = Tape::new();
    let wv = tape.leaf(Tensor::vector(w.to_vec()));
    let r = tape.leaf(reps.clone());
    let p = frame_probs_sds_graph(&mut tape, wv, r)?;
    Ok(tape.value(p).data().to_vec())
}

/// Thresholds frame probabilities and gates them on the clip labels:
/// a frame is positive iff its probability >= gamma AND the clip-level
/// label for that class is positive.
pub fn predict(
    clip: &ClipPrediction,
    frame_probs: &Tensor,
    gamma: f64,
    surface: Surface,
) -> Result<FramePrediction, DecisionError> {
    check_threshold("gamma", gamma)?;
    let c = frame_probs.rows();
    if c != clip.labels.len() {
        return Err(DecisionError::DimensionMismatch {
            expected: clip.labels.len(),
            got: c,
        });
    }
    let t = frame_probs.cols();
    let labels = (0..c)
        .map(|ci| {
            (0..t)
                .map(|ti| clip.labels[ci] && frame_probs.at(ci, ti) >= gamma)
                .collect()
        })
        .collect();
    Ok(FramePrediction {
        probs: frame_probs.clone(),
        labels,
        gamma,
        surface,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_classifier_gives_half() {
        let head = ClassifierHead { weights: vec![0.0, 0.0], bias: 0.0 };
        assert_eq!(clip_probability(&head, &[3.0, -1.0]).unwrap(), 0.5);
    }

    #[test]
    fn logistic_hand_values() {
        let head = ClassifierHead { weights: vec![1.0, 1.0], bias: 0.0 };
        let half_ln3 = 3.0f64.ln() / 2.0;
        let p = clip_probability(&head, &[half_ln3, half_ln3]).unwrap();
        assert!((p - 0.75).abs() < 1e-12);

        let head = ClassifierHead { weights: vec![1.0], bias: -10.0 };
        let p = clip_probability(&head, &[0.0]).unwrap();
        assert!((p - 4.5397868702434395e-5).abs() < 1e-15);
        assert!((p - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let head = ClassifierHead { weights: vec![1.0, 2.0], bias: 0.0 };
        assert!(matches!(
            clip_probability(&head, &[1.0]),
            Err(DecisionError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn shared_surface_reproduces_clip_probability_on_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = rng.random_range(1..6);
            let head = ClassifierHead {
                weights: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bias: rng.random_range(-1.0..1.0),
            };
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let reps = Tensor::from_rows(std::slice::from_ref(&h)).unwrap();
            let framewise = frame_probs_shared(&head, &reps).unwrap();
            let clip = clip_probability(&head, &h).unwrap();
            assert_eq!(framewise[0], clip);
        }
    }

    #[test]
    fn shared_surface_zero_classifier_gives_half_everywhere() {
        let head = ClassifierHead { weights: vec![0.0, 0.0], bias: 0.0 };
        let reps = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let p = frame_probs_shared(&head, &reps).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn shared_surface_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = ClassifierHead {
            weights: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: rng.random_range(-0.5..0.5),
        };
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let reps = Tensor::from_rows(&rows).unwrap();
        let got = frame_probs_shared(&head, &reps).unwrap();
        for (t, row) in rows.iter().enumerate() {
            let z: f64 = row
                .iter()
                .zip(&head.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
                + head.bias;
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((got[t] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_sds_divides_the_logit() {
        use crate::numerics::tape::Tape;
        let reps = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![2.0, 0.0]));
        let r = tape.leaf(reps);
        let p = frame_probs_sds_scaled_graph(&mut tape, w, r, 2.0).unwrap();
        // logit 4 scaled by 1/2 -> sigmoid(2).
        let sig2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((tape.value(p).data()[0] - sig2).abs() < 1e-15);
    }

    #[test]
    fn sds_hand_values() {
        // w·x = 0 -> 0.5.
        let reps = Tensor::from_rows(&[vec![1.0, 7.0]]).unwrap();
        let p = frame_probs_sds(&[0.0, 0.0], &reps).unwrap();
        assert_eq!(p, vec![0.5]);

        // w=[2,0], x=[1,7] -> sigmoid(2); the 7 is ignored and there
        // is no bias and no scale division.
        let p = frame_probs_sds(&[2.0, 0.0], &reps).unwrap();
        let sig2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p[0] - sig2).abs() < 1e-15);
        assert!((p[0] - 0.88080).abs() < 1e-5);
    }

    #[test]
    fn clip_gating_suppresses_frames_of_negative_clips() {
        let clip = ClipPrediction::from_probs(vec![0.4, 0.9], 0.5).unwrap();
        assert_eq!(clip.labels, vec![false, true]);
        let probs = Tensor::from_rows(&[vec![0.99, 0.99], vec![0.6, 0.4]]).unwrap();
        let fp = predict(&clip, &probs, 0.5, Surface::Shared).unwrap();
        assert_eq!(fp.labels[0], vec![false, false]);
        assert_eq!(fp.labels[1], vec![true, false]);
    }

    #[test]
    fn clip_threshold_is_inclusive() {
        let clip = ClipPrediction::from_probs(vec![0.5], 0.5).unwrap();
        assert_eq!(clip.labels, vec![true]);
    }

    #[test]
    fn frame_threshold_is_inclusive_and_monotone_in_gamma() {
        let clip = ClipPrediction::from_probs(vec![1.0], 0.5).unwrap();
        let probs = Tensor::from_rows(&[vec![0.5, 0.49, 0.8]]).unwrap();
        let at_half = predict(&clip, &probs, 0.5, Surface::Shared).unwrap();
        assert_eq!(at_half.labels[0], vec![true, false, true]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t = rng.random_range(1..10);
            let row: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            let probs = Tensor::from_rows(&[row]).unwrap();
            let clip = ClipPrediction::from_probs(vec![1.0], 0.5).unwrap();
            let lo = predict(&clip, &probs, 0.3, Surface::Shared).unwrap();
            let hi = predict(&clip, &probs, 0.7, Surface::Shared).unwrap();
            for (a, b) in lo.labels[0].iter().zip(&hi.labels[0]) {
                // Raising gamma never adds positive frames.
                assert!(*a || !*b);
            }
        }
    }

    #[test]
    fn frame_implies_clip_over_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let c = rng.random_range(1..5);
            let t = rng.random_range(1..8);
            let clip_probs: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let rows: Vec<Vec<f64>> = (0..c)
                .map(|_| (0..t).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let clip = ClipPrediction::from_probs(clip_probs, 0.5).unwrap();
            let fp = predict(&clip, &Tensor::from_rows(&rows).unwrap(), 0.5, Surface::Sds).unwrap();
            for ci in 0..c {
                for ti in 0..t {
                    if fp.labels[ci][ti] {
                        assert!(clip.labels[ci]);
                    }
                }
            }
        }
    }
}
