//! The eight pooling modules.
//!
//! Instance-level pooling aggregates per-frame probabilities into one
//! clip probability; embedding-level pooling aggregates frame
//! representations into a contextual representation h_c that is
//! classified afterwards. Each comes in four kinds:
//!
//! - GMP: global max
//! - GAP: global average
//! - GSP: softmax weighting driven by the frame probabilities
//! - ATP: softmax weighting driven by a learnable detector w_c, with
//!   logits w_c·x_t scaled by the feature dimension
//!
//! Every function exists in two forms: a tape builder used inside the
//! training graph, and a plain wrapper that evaluates on a throwaway
//! tape. Both share the same op sequence, so the numbers agree
//! bit-for-bit.

use crate::numerics::tape::{NumericsError, Tape, VarId};
use crate::numerics::tensor::Tensor;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum PoolError {
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("frame probability {value} at index {index} outside [0,1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("{kind} pooling requires {what}")]
    MissingContext { kind: &'static str, what: &'static str },
    #[error("scale factor must be positive, got {0}")]
    BadScale(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Pooling level: over frame probabilities or frame representations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolLevel {
    Instance,
    Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Gmp,
    Gap,
    Gsp,
    Atp,
}

/// Scaling function ψ applied to frame probabilities inside GSP's
/// softmax. Identity is the default; the enum is the hook for
/// alternatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Psi {
    #[default]
    Identity,
}

/// Which pooling module is active, plus its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolingSpec {
    pub level: PoolLevel,
    pub kind: PoolKind,
    pub psi: Psi,
    /// Denominator of the ATP logits; `None` means the dimensionality
    /// of the (possibly subspace-masked) representations.
    pub scale_d: Option<f64>,
}

impl PoolingSpec {
    pub fn new(level: PoolLevel, kind: PoolKind) -> Self {
        Self {
            level,
            kind,
            psi: Psi::Identity,
            scale_d: None,
        }
    }

    pub fn is_atp(&self) -> bool {
        self.kind == PoolKind::Atp
    }

    /// Short name as used by the CLI: i/e prefix plus kind.
    pub fn short_name(&self) -> &'static str {
        match (self.level, self.kind) {
            (PoolLevel::Instance, PoolKind::Gmp) => "igmp",
            (PoolLevel::Instance, PoolKind::Gap) => "igap",
            (PoolLevel::Instance, PoolKind::Gsp) => "igsp",
            (PoolLevel::Instance, PoolKind::Atp) => "iatp",
            (PoolLevel::Embedding, PoolKind::Gmp) => "egmp",
            (PoolLevel::Embedding, PoolKind::Gap) => "egap",
            (PoolLevel::Embedding, PoolKind::Gsp) => "egsp",
            (PoolLevel::Embedding, PoolKind::Atp) => "eatp",
        }
    }

    pub fn parse_short(name: &str) -> Option<Self> {
        let (level, rest) = match name.split_at_checked(1)? {
            ("i", rest) => (PoolLevel::Instance, rest),
            ("e", rest) => (PoolLevel::Embedding, rest),
            _ => return None,
        };
        let kind = match rest {
            "gmp" => PoolKind::Gmp,
            "gap" => PoolKind::Gap,
            "gsp" => PoolKind::Gsp,
            "atp" => PoolKind::Atp,
            _ => return None,
        };
        Some(Self::new(level, kind))
    }

    fn resolve_scale(&self, dim: usize) -> Result<f64, PoolError> {
        let d = self.scale_d.unwrap_or(dim as f64);
        if d <= 0.0 {
            return Err(PoolError::BadScale(d));
        }
        Ok(d)
    }
}

/// Per-class attention contributions a_ct over the frames of one clip;
/// rows sum to one.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub a: Tensor,
}

impl AttentionWeights {
    /// Assembles per-class weight rows into the C×T matrix, validating
    /// nonnegativity and row sums.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, PoolError> {
        for row in rows {
            if row.is_empty() {
                return Err(PoolError::EmptySequence);
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&w| w < 0.0) {
                return Err(PoolError::ProbabilityOutOfRange {
                    index: 0,
                    value: sum,
                });
            }
        }
        Ok(Self {
            a: Tensor::from_rows(rows).map_err(NumericsError::from)?,
        })
    }
}

/// ψ applied on the tape. Identity records nothing.
fn apply_psi(_tape: &mut Tape, psi: Psi, probs: VarId) -> VarId {
    match psi {
        Psi::Identity => probs,
    }
}

/// GSP/ATP attention logits -> normalized weights.
fn softmax_weights(tape: &mut Tape, logits: VarId) -> Result<VarId, NumericsError> {
    tape.softmax_vec(logits)
}

/// Instance-level pooling on the tape.
///
/// `frame_probs` is a (T) vector of per-frame probabilities for one
/// class. ATP additionally needs the frame representations and the
/// detector weights: its contributions are computed from the
/// representations, not from the probabilities, at both levels.
///
/// Returns the scalar clip probability and, for GSP/ATP, the weights.
pub fn instance_pool_graph(
    tape: &mut Tape,
    spec: &PoolingSpec,
    frame_probs: VarId,
    atp_reps: Option<VarId>,
    atp_w: Option<VarId>,
) -> Result<(VarId, Option<VarId>), PoolError> {
    let t = tape.value(frame_probs).len();
    if t == 0 {
        return Err(PoolError::EmptySequence);
    }
    match spec.kind {
        PoolKind::Gmp => Ok((tape.max_vec(frame_probs)?, None)),
        PoolKind::Gap => Ok((tape.mean_vec(frame_probs)?, None)),
        PoolKind::Gsp => {
            let scaled = apply_psi(tape, spec.psi, frame_probs);
            let a = softmax_weights(tape, scaled)?;
            let pooled = tape.dot(a, frame_probs)?;
            Ok((pooled, Some(a)))
        }
        PoolKind::Atp => {
            let reps = atp_reps.ok_or(PoolError::MissingContext {
                kind: "atp",
                what: "frame representations",
            })?;
            let w = atp_w.ok_or(PoolError::MissingContext {
                kind: "atp",
                what: "detector weights w_c",
            })?;
            let a = attention_weights_graph(tape, spec, reps, w)?;
            let pooled = tape.dot(a, frame_probs)?;
            Ok((pooled, Some(a)))
        }
    }
}

/// ATP contributions: softmax over t of w_c·x_t / d.
pub fn attention_weights_graph(
    tape: &mut Tape,
    spec: &PoolingSpec,
    reps: VarId,
    w: VarId,
) -> Result<VarId, PoolError> {
    let dim = tape.value(reps).cols();
    let d = spec.resolve_scale(dim)?;
    let logits = tape.matvec(reps, w)?;
    let scaled = tape.scale(logits, 1.0 / d)?;
    Ok(softmax_weights(tape, scaled)?)
}

/// Embedding-level pooling on the tape.
///
/// `reps` is the (T,d) representation matrix. GSP needs the shared
/// classifier (weights, bias) to obtain the frame probabilities its
/// softmax runs on; ATP needs the detector weights.
pub fn embedding_pool_graph(
    tape: &mut Tape,
    spec: &PoolingSpec,
    reps: VarId,
    atp_w: Option<VarId>,
    shared_classifier: Option<(VarId, VarId)>,
) -> Result<(VarId, Option<VarId>), PoolError> {
    let t = tape.value(reps).rows();
    if t == 0 {
        return Err(PoolError::EmptySequence);
    }
    match spec.kind {
        PoolKind::Gmp => Ok((tape.max_axis0(reps)?, None)),
        PoolKind::Gap => Ok((tape.mean_axis0(reps)?, None)),
        PoolKind::Gsp => {
            let (v, b) = shared_classifier.ok_or(PoolError::MissingContext {
                kind: "gsp",
                what: "the shared classifier G_c",
            })?;
            let logits = tape.matvec(reps, v)?;
            let shifted = tape.add_scalar(logits, b)?;
            let probs = tape.sigmoid(shifted)?;
            let scaled = apply_psi(tape, spec.psi, probs);
            let a = softmax_weights(tape, scaled)?;
            let h = tape.vecmat(a, reps)?;
            Ok((h, Some(a)))
        }
        PoolKind::Atp => {
            let w = atp_w.ok_or(PoolError::MissingContext {
                kind: "atp",
                what: "detector weights w_c",
            })?;
            let a = attention_weights_graph(tape, spec, reps, w)?;
            let h = tape.vecmat(a, reps)?;
            Ok((h, Some(a)))
        }
    }
}

/// Result of plain (non-graph) instance pooling.
#[derive(Clone, Debug)]
pub struct PooledProb {
    pub value: f64,
    pub weights: Option<Vec<f64>>,
}

/// Result of plain embedding pooling.
#[derive(Clone, Debug)]
pub struct PooledEmbedding {
    pub h: Vec<f64>,
    pub weights: Option<Vec<f64>>,
}

/// Context ATP pooling needs beyond the probabilities.
pub struct AtpContext<'a> {
    pub reps: &'a Tensor,
    pub w: &'a [f64],
}

fn validate_probs(frame_probs: &[f64]) -> Result<(), PoolError> {
    if frame_probs.is_empty() {
        return Err(PoolError::EmptySequence);
    }
    for (index, &value) in frame_probs.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(PoolError::ProbabilityOutOfRange { index, value });
        }
    }
    Ok(())
}

/// Aggregates frame probabilities into a clip probability.
pub fn pool_instance(
    spec: &PoolingSpec,
    frame_probs: &[f64],
    atp: Option<AtpContext>,
) -> Result<PooledProb, PoolError> {
    validate_probs(frame_probs)?;
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::vector(frame_probs.to_vec()));
    let (reps, w) = match &atp {
        Some(ctx) => (
            Some(tape.leaf(ctx.reps.clone())),
            Some(tape.leaf(Tensor::vector(ctx.w.to_vec()))),
        ),
        None => (None, None),
    };
    let (pooled, weights) = instance_pool_graph(&mut tape, spec, p, reps, w)?;
    Ok(PooledProb {
        value: tape.value(pooled).item(),
        weights: weights.map(|a| tape.value(a).data().to_vec()),
    })
}

/// Classifier pair used by embedding GSP's frame probabilities.
pub struct SharedClassifier<'a> {
    pub weights: &'a [f64],
    pub bias: f64,
}

/// Aggregates frame representations into a contextual representation.
pub fn pool_embedding(
    spec: &PoolingSpec,
    reps: &Tensor,
    atp_w: Option<&[f64]>,
    shared: Option<SharedClassifier>,
) -> Result<PooledEmbedding, PoolError> {
    if reps.shape().len() != 2 || reps.rows() == 0 {
        return Err(PoolError::EmptySequence);
    }
    let mut tape = Tape::new();
    let r = tape.leaf(reps.clone());
    let w = atp_w.map(|w| tape.leaf(Tensor::vector(w.to_vec())));
    let sc = shared.map(|s| {
        let v = tape.leaf(Tensor::vector(s.weights.to_vec()));
        let b = tape.leaf(Tensor::scalar(s.bias));
        (v, b)
    });
    let (h, weights) = embedding_pool_graph(&mut tape, spec, r, w, sc)?;
    Ok(PooledEmbedding {
        h: tape.value(h).data().to_vec(),
        weights: weights.map(|a| tape.value(a).data().to_vec()),
    })
}
