//! Assembles encoder, pooling, subspace masks and classifiers into one
//! differentiable model.
//!
//! Parameter layout (registration and initialization order): encoder
//! parameters first, then per class the attention detector `attn.c.w`
//! (ATP only, length k_c), the classifier weights `head.c.v` (length
//! k_c) and bias `head.c.b`. With disentangling active, class c sees
//! only the first k_c coordinates of the encoder output everywhere —
//! attention, classifier and both decision surfaces.
//!
//! The `_with` builders take pre-registered leaf ids so callers (the
//! trainer, the gradient checker) control the tape; the plain methods
//! wrap them with a throwaway tape in inference mode.

use crate::decision::{
    clip_prob_graph, frame_probs_sds_graph, frame_probs_sds_scaled_graph,
    frame_probs_shared_graph, ClipPrediction, DecisionError, FramePrediction, Surface,
};
use crate::disentangle::{DfAllocation, DfError, DfMode};
use crate::encoder::{self, BnMode, EncoderConfig, EncoderError};
use crate::numerics::tape::{NumericsError, Tape, VarId};
use crate::numerics::tensor::Tensor;
use crate::pooling::{
    embedding_pool_graph, instance_pool_graph, AttentionWeights, PoolError, PoolKind, PoolLevel,
    PoolingSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error(transparent)]
    Df(#[from] DfError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Everything needed to rebuild the forward pass.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingSpec,
    pub sds: bool,
    /// Ablation: keep the attention logit scaling inside the
    /// specialized surface, sigmoid(w·x/d_c). Off by default.
    pub sds_scaled: bool,
    pub df_mode: DfMode,
    pub df_m: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if self.sds && !self.pooling.is_atp() {
            return Err(ModelError::Config(
                "SDS requires attention pooling (--pooling iatp or eatp)".into(),
            ));
        }
        if self.sds_scaled && !self.sds {
            return Err(ModelError::Config(
                "--sds-scaled is an SDS ablation and requires --sds".into(),
            ));
        }
        if self.df_mode != DfMode::None
            && (self.pooling.level != PoolLevel::Embedding || !self.pooling.is_atp())
        {
            return Err(ModelError::Config(
                "disentangled features require embedding-level attention pooling (--pooling eatp)"
                    .into(),
            ));
        }
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(ModelError::Config(format!("{name}={v} outside (0,1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.df_m) {
            return Err(ModelError::Config(format!("m={} outside [0,1]", self.df_m)));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered parameter collection; order is the registration order on
/// every tape and the serialization order in checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<Param>,
}

impl ParamSet {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }
}

/// The trained (or trainable) model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub alloc: DfAllocation,
    pub params: ParamSet,
    /// Encoder output dimension d.
    pub dim: usize,
    encoder_param_count: usize,
}

/// Handles into one recorded forward pass built from caller-supplied
/// leaves.
pub struct ForwardCore {
    /// Encoder output (T,d).
    pub reps: VarId,
    /// (C) vector of clip probabilities.
    pub clip_probs: VarId,
    /// Per-class (T) frame probabilities from the configured surface.
    pub frame_prob_rows: Vec<VarId>,
    /// Per-class attention rows, for kinds that have them.
    pub attention: Vec<Option<VarId>>,
    /// Batch-norm statistics harvested in train mode.
    pub batch_stats: Vec<(Tensor, Tensor)>,
}

/// [`ForwardCore`] plus the leaf ids the wrapper registered.
pub struct ClipForward {
    pub param_ids: Vec<VarId>,
    pub core: ForwardCore,
}

impl Model {
    /// Builds a model with freshly initialized parameters. The
    /// allocation must match the encoder output dimension and class
    /// count; use [`DfAllocation::none`] when disentangling is off.
    pub fn new(
        config: ModelConfig,
        class_names: Vec<String>,
        alloc: DfAllocation,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let dim = config.encoder.output_dim()?;
        let c = class_names.len();
        if c == 0 {
            return Err(ModelError::Config("no classes".into()));
        }
        if alloc.d != dim || alloc.k.len() != c {
            return Err(ModelError::Config(format!(
                "allocation (d={}, classes={}) does not match model (d={dim}, classes={c})",
                alloc.d,
                alloc.k.len()
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let enc_defs = encoder::param_defs(&config.encoder)?;
        let encoder_param_count = enc_defs.len();
        for def in &enc_defs {
            params.entries.push(Param {
                name: def.name.clone(),
                value: encoder::init_tensor(def, &mut rng),
                trainable: def.trainable,
            });
        }
        let uniform = |rng: &mut ChaCha8Rng, fan_in: usize, n: usize| -> Tensor {
            let s = (1.0 / fan_in as f64).sqrt();
            Tensor::vector((0..n).map(|_| rng.random_range(-s..s)).collect())
        };
        for class in 0..c {
            let k = alloc.k[class];
            if config.pooling.is_atp() {
                params.entries.push(Param {
                    name: format!("attn.{class}.w"),
                    value: uniform(&mut rng, k, k),
                    trainable: true,
                });
            }
            params.entries.push(Param {
                name: format!("head.{class}.v"),
                value: uniform(&mut rng, k, k),
                trainable: true,
            });
            params.entries.push(Param {
                name: format!("head.{class}.b"),
                value: Tensor::scalar(0.0),
                trainable: true,
            });
        }
        Ok(Self {
            config,
            class_names,
            alloc,
            params,
            dim,
            encoder_param_count,
        })
    }

    /// Rebuilds a model from deserialized parts (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        class_names: Vec<String>,
        alloc: DfAllocation,
        params: ParamSet,
    ) -> Result<Self, ModelError> {
        let template = Model::new(config.clone(), class_names.clone(), alloc.clone(), 0)?;
        if template.params.entries.len() != params.entries.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} parameters, model needs {}",
                params.entries.len(),
                template.params.entries.len()
            )));
        }
        for (have, want) in params.entries.iter().zip(&template.params.entries) {
            if have.name != want.name || have.value.shape() != want.value.shape() {
                return Err(ModelError::Config(format!(
                    "checkpoint parameter {} (shape {:?}) does not match expected {} (shape {:?})",
                    have.name,
                    have.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder_param_count
    }

    fn param_id(&self, ids: &[VarId], name: &str) -> VarId {
        ids[self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} must exist"))]
    }

    /// Per-class representations: the encoder output masked to the
    /// class subspace (no-op when k_c = d).
    fn class_reps(
        &self,
        tape: &mut Tape,
        reps: VarId,
        class: usize,
    ) -> Result<VarId, NumericsError> {
        let k = self.alloc.k[class];
        if k == self.dim {
            Ok(reps)
        } else {
            tape.slice_cols(reps, k)
        }
    }

    /// Records the full forward pass from caller-registered leaves:
    /// `param_ids` aligned with `params.entries`, `input` a (T,F)
    /// feature leaf.
    pub fn clip_forward_with(
        &self,
        tape: &mut Tape,
        param_ids: &[VarId],
        input: VarId,
        mode: BnMode,
    ) -> Result<ForwardCore, ModelError> {
        if param_ids.len() != self.params.entries.len() {
            return Err(ModelError::Config(format!(
                "{} parameter leaves supplied, expected {}",
                param_ids.len(),
                self.params.entries.len()
            )));
        }
        let enc_out = encoder::encode_graph(
            tape,
            &self.config.encoder,
            &param_ids[..self.encoder_param_count],
            input,
            mode,
        )?;
        let reps = enc_out.reps;

        let mut per_class = Vec::with_capacity(self.num_classes());
        let mut frame_prob_rows = Vec::with_capacity(self.num_classes());
        let mut attention = Vec::with_capacity(self.num_classes());
        for class in 0..self.num_classes() {
            let reps_c = self.class_reps(tape, reps, class)?;
            let v = self.param_id(param_ids, &format!("head.{class}.v"));
            let b = self.param_id(param_ids, &format!("head.{class}.b"));
            let w = self
                .config
                .pooling
                .is_atp()
                .then(|| self.param_id(param_ids, &format!("attn.{class}.w")));

            let shared_rows = frame_probs_shared_graph(tape, v, b, reps_c)?;
            let (clip_prob, weights) = match self.config.pooling.level {
                PoolLevel::Instance => {
                    instance_pool_graph(tape, &self.config.pooling, shared_rows, Some(reps_c), w)?
                }
                PoolLevel::Embedding => {
                    let shared = (self.config.pooling.kind == PoolKind::Gsp).then_some((v, b));
                    let (h, weights) =
                        embedding_pool_graph(tape, &self.config.pooling, reps_c, w, shared)?;
                    (clip_prob_graph(tape, v, b, h)?, weights)
                }
            };
            let frame_probs = if self.config.sds {
                let w = w.expect("validated: sds requires atp");
                if self.config.sds_scaled {
                    let k = self.alloc.k[class] as f64;
                    frame_probs_sds_scaled_graph(tape, w, reps_c, k)?
                } else {
                    frame_probs_sds_graph(tape, w, reps_c)?
                }
            } else {
                shared_rows
            };
            per_class.push(clip_prob);
            frame_prob_rows.push(frame_probs);
            attention.push(weights);
        }
        let clip_probs = tape.stack_scalars(&per_class)?;
        Ok(ForwardCore {
            reps,
            clip_probs,
            frame_prob_rows,
            attention,
            batch_stats: enc_out.batch_stats,
        })
    }

    /// Registers the stored parameters and input, then records the
    /// forward pass.
    pub fn clip_forward(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        mode: BnMode,
    ) -> Result<ClipForward, ModelError> {
        let input = tape.leaf(features.clone());
        let param_ids: Vec<VarId> = self
            .params
            .entries
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let core = self.clip_forward_with(tape, &param_ids, input, mode)?;
        Ok(ClipForward { param_ids, core })
    }

    /// Clip probabilities in inference mode.
    pub fn clip_probs(&self, features: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.clip_forward(&mut tape, features, BnMode::Eval)?;
        Ok(tape.value(fwd.core.clip_probs).data().to_vec())
    }

    /// Which decision surface prediction uses.
    pub fn surface(&self) -> Surface {
        if self.config.sds {
            Surface::Sds
        } else {
            Surface::Shared
        }
    }

    /// Frame probabilities (C×T) from the configured decision surface,
    /// inference mode.
    pub fn frame_probs(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.clip_forward(&mut tape, features, BnMode::Eval)?;
        let rows: Vec<Vec<f64>> = fwd
            .core
            .frame_prob_rows
            .iter()
            .map(|&id| tape.value(id).data().to_vec())
            .collect();
        Ok(Tensor::from_rows(&rows).map_err(NumericsError::from)?)
    }

    /// Encoder output (T×d), inference mode; the feature dump behind
    /// external projection/plotting workflows.
    pub fn high_level_features(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.clip_forward(&mut tape, features, BnMode::Eval)?;
        Ok(tape.value(fwd.core.reps).clone())
    }

    /// Attention contributions as a C×T matrix (ATP/GSP only).
    pub fn attention_matrix(
        &self,
        features: &Tensor,
    ) -> Result<Option<AttentionWeights>, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.clip_forward(&mut tape, features, BnMode::Eval)?;
        let rows: Option<Vec<Vec<f64>>> = fwd
            .core
            .attention
            .iter()
            .map(|w| w.map(|id| tape.value(id).data().to_vec()))
            .collect();
        match rows {
            Some(rows) => Ok(Some(AttentionWeights::from_rows(&rows)?)),
            None => Ok(None),
        }
    }

    /// End-to-end prediction for one clip: clip labels, then gated
    /// frame labels from the configured surface.
    pub fn predict_clip(
        &self,
        features: &Tensor,
    ) -> Result<(ClipPrediction, FramePrediction), ModelError> {
        let clip = ClipPrediction::from_probs(self.clip_probs(features)?, self.config.alpha)?;
        let frame_probs = self.frame_probs(features)?;
        let frames =
            crate::decision::predict(&clip, &frame_probs, self.config.gamma, self.surface())?;
        Ok((clip, frames))
    }

    /// Applies batch statistics to the running batch-norm slots.
    pub fn update_running_stats(&mut self, batch_stats: &[(Tensor, Tensor)]) {
        for (i, (mean, var)) in batch_stats.iter().enumerate() {
            for (suffix, fresh) in [("rmean", mean), ("rvar", var)] {
                let name = format!("enc.b{i}.{suffix}");
                if let Some(p) = self.params.entries.iter_mut().find(|p| p.name == name) {
                    for (running, &new) in p.value.data_mut().iter_mut().zip(fresh.data()) {
                        *running = crate::encoder::BN_MOMENTUM * *running
                            + (1.0 - crate::encoder::BN_MOMENTUM) * new;
                    }
                }
            }
        }
    }
}
