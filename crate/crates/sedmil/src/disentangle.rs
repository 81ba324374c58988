//! Disentangled-feature subspace allocation.
//!
//! Each class is confined to an axis-aligned subspace of the encoder
//! output: the first k_c coordinates (a nested "ladder" — the subspace
//! of a smaller class sits inside that of a larger one). k_c comes
//! from co-occurrence statistics: clips containing fewer classes carry
//! more identifiable information for each class they contain, so a
//! class with many low-interference clips earns a larger subspace.
//!
//! Weighting schemes for a clip containing i classes:
//! - DFW: weight 1/i
//! - DF1: weight 1 for single-class clips, 0 otherwise
//!
//! With k_c in hand, attention and classification for class c operate
//! on the first k_c coordinates, with the attention scale set to k_c.

use crate::numerics::tape::NumericsError;
use crate::numerics::tensor::Tensor;
use crate::pooling::{attention_weights_graph, PoolError, PoolKind, PoolLevel, PoolingSpec};
use crate::numerics::tape::Tape;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DfError {
    #[error("class index {0} out of range 1..={1}")]
    ClassCountOutOfRange(usize, usize),
    #[error("feature dimension must be >= 1")]
    ZeroDimension,
    #[error("m={0} outside [0,1]")]
    BadM(f64),
    #[error(
        "class {class} has zero weighted clip count and m=0; its subspace would be empty — \
         set m>0 to guarantee a minimum dimension"
    )]
    ZeroWeight { class: usize },
    #[error("clip {clip} has an empty label set")]
    EmptyLabelSet { clip: String },
    #[error("detector length {got} does not match subspace dimension {expected}")]
    WeightLengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// DF weighting scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DfMode {
    #[default]
    None,
    Df1,
    Dfw,
}

impl DfMode {
    pub fn name(&self) -> &'static str {
        match self {
            DfMode::None => "none",
            DfMode::Df1 => "df1",
            DfMode::Dfw => "dfw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(DfMode::None),
            "df1" => Some(DfMode::Df1),
            "dfw" => Some(DfMode::Dfw),
            _ => None,
        }
    }
}

/// N[c][i-1] = number of training clips containing exactly i classes,
/// one of which is class c.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    pub n: Vec<Vec<u64>>,
}

impl CooccurrenceCounts {
    pub fn num_classes(&self) -> usize {
        self.n.len()
    }

    /// Clips where class c appears alone.
    pub fn solo(&self, c: usize) -> u64 {
        self.n[c][0]
    }
}

/// Interference scores f_c (Eqs. 18-19): weighted clip counts
/// normalized by the largest one.
#[derive(Clone, Debug)]
pub struct InterferenceScore {
    pub f: Vec<f64>,
    pub r: f64,
}

/// Per-class subspace dimensions and masks over the d encoder output
/// coordinates (the first k_c are active).
#[derive(Clone, Debug, PartialEq)]
pub struct DfAllocation {
    pub mode: DfMode,
    pub m: f64,
    pub d: usize,
    pub k: Vec<usize>,
}

impl DfAllocation {
    /// The trivial allocation: every class uses the full space.
    pub fn none(d: usize, num_classes: usize) -> Self {
        Self {
            mode: DfMode::None,
            m: 0.0,
            d,
            k: vec![d; num_classes],
        }
    }

    pub fn subspace_dim(&self, class: usize) -> usize {
        self.k[class]
    }

    /// Boolean mask over the d coordinates for one class.
    pub fn mask(&self, class: usize) -> Vec<bool> {
        (0..self.d).map(|j| j < self.k[class]).collect()
    }

    pub fn is_trivial(&self) -> bool {
        self.k.iter().all(|&k| k == self.d)
    }

    /// Text table (class, f_c, k_c) mirroring the per-category
    /// dimension table layout.
    pub fn report(&self, class_names: &[String], scores: Option<&InterferenceScore>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>10} {:>6}", "class", "f_c", "k_c");
        for (c, name) in class_names.iter().enumerate() {
            let f = scores.map_or(ok_f(self, c), |s| s.f[c]);
            let _ = writeln!(out, "{:<28} {:>10.6} {:>6}", name, f, self.k[c]);
        }
        let _ = writeln!(out, "mode={} m={} d={}", self.mode.name(), self.m, self.d);
        out
    }
}

fn ok_f(alloc: &DfAllocation, c: usize) -> f64 {
    if alloc.k[c] == alloc.d {
        1.0
    } else {
        alloc.k[c] as f64 / alloc.d as f64
    }
}

/// The clip-importance coefficient r_i for a clip containing `i`
/// classes: DFW gives 1/i, DF1 counts only single-class clips.
pub fn compute_r(mode: DfMode, i: usize, num_classes: usize) -> Result<f64, DfError> {
    if i < 1 || i > num_classes {
        return Err(DfError::ClassCountOutOfRange(i, num_classes));
    }
    Ok(match mode {
        DfMode::None => 0.0,
        DfMode::Dfw => 1.0 / i as f64,
        DfMode::Df1 => {
            if i == 1 {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Ceiling with a snap to the nearest integer when the float product
/// is within 1e-9 of it, so exact-arithmetic boundaries (f_c·d integer)
/// are honored despite rounding in f_c = weighted/R.
fn ceil_snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Computes the subspace allocation from co-occurrence counts:
/// k_c = ceil(((1-m)·f_c + m)·d) with f_c from the weighted counts.
pub fn allocate(
    counts: &CooccurrenceCounts,
    mode: DfMode,
    m: f64,
    d: usize,
) -> Result<(DfAllocation, InterferenceScore), DfError> {
    if d == 0 {
        return Err(DfError::ZeroDimension);
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(DfError::BadM(m));
    }
    let c_total = counts.num_classes();
    if mode == DfMode::None {
        return Ok((
            DfAllocation::none(d, c_total),
            InterferenceScore { f: vec![1.0; c_total], r: 1.0 },
        ));
    }

    let mut weighted = vec![0.0f64; c_total];
    for (c, row) in counts.n.iter().enumerate() {
        for (idx, &count) in row.iter().enumerate() {
            if count > 0 {
                weighted[c] += compute_r(mode, idx + 1, c_total)? * count as f64;
            }
        }
    }
    let r = weighted.iter().cloned().fold(0.0, f64::max);
    if r == 0.0 {
        // Every class is ill-defined; report the first.
        return Err(DfError::ZeroWeight { class: 0 });
    }
    if m == 0.0 {
        if let Some(class) = weighted.iter().position(|&w| w == 0.0) {
            return Err(DfError::ZeroWeight { class });
        }
    }
    let f: Vec<f64> = weighted.iter().map(|w| w / r).collect();
    let k: Vec<usize> = f
        .iter()
        .map(|fc| {
            let v = ceil_snapped(((1.0 - m) * fc + m) * d as f64) as usize;
            v.clamp(1, d)
        })
        .collect();
    Ok((
        DfAllocation { mode, m, d, k },
        InterferenceScore { f, r },
    ))
}

/// Histogram of class-count membership from per-clip weak label sets.
/// `weak_labels` holds (clip_id, class indices present).
pub fn count_cooccurrence(
    weak_labels: &[(String, Vec<usize>)],
    num_classes: usize,
) -> Result<CooccurrenceCounts, DfError> {
    let mut n = vec![vec![0u64; num_classes]; num_classes];
    for (clip, classes) in weak_labels {
        let mut distinct: Vec<usize> = classes.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.is_empty() {
            return Err(DfError::EmptyLabelSet { clip: clip.clone() });
        }
        let i = distinct.len();
        for &c in &distinct {
            n[c][i - 1] += 1;
        }
    }
    Ok(CooccurrenceCounts { n })
}

/// Attention pooling restricted to class c's subspace: masks the
/// representations to the first k_c coordinates, runs ATP with scale
/// d_c = k_c, and returns (h_c, weights).
pub fn masked_attention(
    alloc: &DfAllocation,
    reps: &Tensor,
    class: usize,
    w_c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), DfError> {
    let k = alloc.subspace_dim(class);
    if w_c.len() != k {
        return Err(DfError::WeightLengthMismatch { expected: k, got: w_c.len() });
    }
    let mut tape = Tape::new();
    let r = tape.leaf(reps.clone());
    let w = tape.leaf(Tensor::vector(w_c.to_vec()));
    let masked = tape.slice_cols(r, k)?;
    let spec = PoolingSpec {
        level: PoolLevel::Embedding,
        kind: PoolKind::Atp,
        psi: Default::default(),
        scale_d: Some(k as f64),
    };
    let a = attention_weights_graph(&mut tape, &spec, masked, w)?;
    let h = tape.vecmat(a, masked)?;
    Ok((
        tape.value(h).data().to_vec(),
        tape.value(a).data().to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::{pool_embedding, PoolingSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn r_coefficients_match_definitions() {
        assert_eq!(compute_r(DfMode::Dfw, 4, 10).unwrap(), 0.25);
        assert_eq!(compute_r(DfMode::Df1, 1, 10).unwrap(), 1.0);
        assert_eq!(compute_r(DfMode::Df1, 3, 10).unwrap(), 0.0);
        assert!(matches!(
            compute_r(DfMode::Dfw, 0, 10),
            Err(DfError::ClassCountOutOfRange(0, 10))
        ));
        assert!(matches!(
            compute_r(DfMode::Dfw, 11, 10),
            Err(DfError::ClassCountOutOfRange(11, 10))
        ));
    }

    #[test]
    fn df1_hand_allocation() {
        // C=2, d=10, m=0, solo counts [4,2]: R=4, f=[1,0.5], k=[10,5].
        let counts = CooccurrenceCounts { n: vec![vec![4, 0], vec![2, 0]] };
        let (alloc, score) = allocate(&counts, DfMode::Df1, 0.0, 10).unwrap();
        assert_eq!(score.r, 4.0);
        assert_eq!(score.f, vec![1.0, 0.5]);
        assert_eq!(alloc.k, vec![10, 5]);
        // Masks select the first k_c coordinates.
        let mask = alloc.mask(1);
        assert_eq!(mask.iter().filter(|&&b| b).count(), 5);
        assert!(mask[..5].iter().all(|&b| b) && mask[5..].iter().all(|&b| !b));
    }

    #[test]
    fn dfw_hand_allocation() {
        // C=2, d=12, m=0: class1 (2 solo, 2 paired) -> 3; class2
        // (0 solo, 2 paired) -> 1; R=3, f=[1, 1/3], k=[12, 4].
        let counts = CooccurrenceCounts { n: vec![vec![2, 2], vec![0, 2]] };
        let (alloc, score) = allocate(&counts, DfMode::Dfw, 0.0, 12).unwrap();
        assert_eq!(score.r, 3.0);
        assert!((score.f[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(alloc.k, vec![12, 4]);
    }

    #[test]
    fn m_one_degenerates_to_full_space() {
        let counts = CooccurrenceCounts { n: vec![vec![4, 0], vec![0, 3]] };
        let (alloc, _) = allocate(&counts, DfMode::Df1, 1.0, 160).unwrap();
        assert_eq!(alloc.k, vec![160, 160]);
        assert!(alloc.is_trivial());
    }

    #[test]
    fn full_score_class_gets_full_dimension() {
        // Any class attaining f_c=1 receives k_c=d at m=0 (the table
        // fixture: d=160 rows showing 160).
        for mode in [DfMode::Df1, DfMode::Dfw] {
            let counts = CooccurrenceCounts {
                n: vec![vec![9, 2, 1], vec![3, 5, 0], vec![1, 1, 1]],
            };
            let (alloc, score) = allocate(&counts, mode, 0.0, 160).unwrap();
            let top = score
                .f
                .iter()
                .position(|&f| f == 1.0)
                .expect("one class must attain f=1");
            assert_eq!(alloc.k[top], 160);
        }
    }

    #[test]
    fn zero_weight_with_zero_m_is_rejected() {
        let counts = CooccurrenceCounts { n: vec![vec![4, 0], vec![0, 3]] };
        let err = allocate(&counts, DfMode::Df1, 0.0, 10).unwrap_err();
        assert!(matches!(err, DfError::ZeroWeight { class: 1 }));
        assert!(err.to_string().contains("m>0"));
        // With m > 0 the same counts allocate fine.
        let (alloc, _) = allocate(&counts, DfMode::Df1, 0.5, 10).unwrap();
        assert_eq!(alloc.k[1], 5);
    }

    #[test]
    fn monotonicity_of_k_in_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let c = rng.random_range(2..6);
            let d = rng.random_range(1..40);
            let m = [0.0, 0.25, 0.5][rng.random_range(0..3)];
            let n: Vec<Vec<u64>> = (0..c)
                .map(|_| (0..c).map(|_| rng.random_range(0..20)).collect())
                .collect();
            let counts = CooccurrenceCounts { n };
            let mode = if rng.random_bool(0.5) { DfMode::Df1 } else { DfMode::Dfw };
            let Ok((alloc, score)) = allocate(&counts, mode, m, d) else {
                continue;
            };
            for i in 0..c {
                for j in 0..c {
                    if score.f[i] > score.f[j] {
                        assert!(alloc.k[i] >= alloc.k[j]);
                    }
                }
                assert!(alloc.k[i] >= 1 && alloc.k[i] <= d);
                assert!(alloc.k[i] as f64 >= m * d as f64 - 1e-9);
            }
        }
    }

    #[test]
    fn cooccurrence_counting_hand_examples() {
        let labels = vec![
            ("c1".to_string(), vec![0]),
            ("c2".to_string(), vec![0, 1]),
        ];
        let counts = count_cooccurrence(&labels, 2).unwrap();
        assert_eq!(counts.n[0], vec![1, 1]);
        assert_eq!(counts.n[1], vec![0, 1]);

        let all_a = vec![
            ("x".to_string(), vec![0]),
            ("y".to_string(), vec![0]),
            ("z".to_string(), vec![0]),
        ];
        let counts = count_cooccurrence(&all_a, 1).unwrap();
        assert_eq!(counts.solo(0), 3);
    }

    #[test]
    fn cooccurrence_rejects_empty_clip() {
        let labels = vec![("bad".to_string(), vec![])];
        let err = count_cooccurrence(&labels, 2).unwrap_err();
        assert!(matches!(err, DfError::EmptyLabelSet { .. }));
    }

    #[test]
    fn cooccurrence_matches_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let c = 4;
        let labels: Vec<(String, Vec<usize>)> = (0..50)
            .map(|i| {
                let count = rng.random_range(1..=c);
                let mut classes: Vec<usize> = (0..c).collect();
                for j in (1..c).rev() {
                    let k = rng.random_range(0..=j);
                    classes.swap(j, k);
                }
                classes.truncate(count);
                (format!("clip{i}"), classes)
            })
            .collect();
        let counts = count_cooccurrence(&labels, c).unwrap();
        for cls in 0..c {
            for i in 1..=c {
                let brute = labels
                    .iter()
                    .filter(|(_, set)| set.len() == i && set.contains(&cls))
                    .count() as u64;
                assert_eq!(counts.n[cls][i - 1], brute);
            }
        }
    }

    #[test]
    fn masked_attention_with_full_k_matches_unmasked_atp() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reps = Tensor::from_rows(
            &(0..5)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alloc = DfAllocation::none(3, 1);
        let (h, a) = masked_attention(&alloc, &reps, 0, &w).unwrap();
        let spec = PoolingSpec::new(PoolLevel::Embedding, PoolKind::Atp);
        let plain = pool_embedding(&spec, &reps, Some(&w), None).unwrap();
        assert_eq!(h, plain.h);
        assert_eq!(a, plain.weights.unwrap());
    }

    #[test]
    fn masked_attention_ignores_masked_coordinates() {
        // reps [[1,0,9],[0,1,9]] with k=2 must equal the 2-dim ATP
        // example; the third coordinate is invisible.
        let reps = Tensor::from_rows(&[vec![1.0, 0.0, 9.0], vec![0.0, 1.0, 9.0]]).unwrap();
        let alloc = DfAllocation { mode: DfMode::Df1, m: 0.0, d: 3, k: vec![2] };
        let (h, a) = masked_attention(&alloc, &reps, 0, &[1.0, 0.0]).unwrap();
        let a0 = 0.5f64.exp() / (0.5f64.exp() + 1.0);
        assert!((a[0] - a0).abs() < 1e-12);
        assert!((h[0] - a0).abs() < 1e-12);
        assert!((h[1] - (1.0 - a0)).abs() < 1e-12);
        assert_eq!(h.len(), 2);
    }

    #[test]
    fn masked_attention_zero_detector_is_uniform_mean() {
        let reps = Tensor::from_rows(&[vec![2.0, 4.0, 9.0], vec![4.0, 8.0, 9.0]]).unwrap();
        let alloc = DfAllocation { mode: DfMode::Df1, m: 0.0, d: 3, k: vec![2] };
        let (h, a) = masked_attention(&alloc, &reps, 0, &[0.0, 0.0]).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
        assert_eq!(h, vec![3.0, 6.0]);
    }

    #[test]
    fn masked_attention_rejects_wrong_weight_length() {
        let reps = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let alloc = DfAllocation { mode: DfMode::Df1, m: 0.0, d: 3, k: vec![2] };
        assert!(matches!(
            masked_attention(&alloc, &reps, 0, &[1.0, 0.0, 0.0]),
            Err(DfError::WeightLengthMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn report_lists_every_class() {
        let alloc = DfAllocation { mode: DfMode::Df1, m: 0.0, d: 10, k: vec![10, 5] };
        let names = vec!["speech".to_string(), "dog".to_string()];
        let report = alloc.report(&names, None);
        assert!(report.contains("speech"));
        assert!(report.contains("dog"));
        assert!(report.lines().count() >= 4);
    }
}
