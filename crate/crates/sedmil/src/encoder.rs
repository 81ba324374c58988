//! Feature encoders: input T×F log-mel matrix to T×d high-level
//! representations, temporal resolution preserved.
//!
//! Three kinds:
//! - `identity`: passes the features through (d = F); lets desk-scale
//!   experiments isolate pooling and decision-surface behavior
//! - `mlp`: per-frame linear layers with ReLU between them
//! - `cnn`: convolutional blocks of conv 3x3 (same padding) -> batch
//!   norm -> frequency-only max pooling -> ReLU; d = final channels ×
//!   remaining bands. The reference configuration is channels
//!   (64, 128, 160) with pools (4, 4, 4) over 64 bands, giving d = 160.
//!
//! Batch norm normalizes per channel over a clip's (T, F) cells in
//! train mode and uses running statistics at inference; the two agree
//! exactly when the running statistics equal the batch statistics.

use crate::data::FeatureSequence;
use crate::numerics::tape::{NumericsError, Tape, VarId};
use crate::numerics::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Error, Debug)]
pub enum EncoderError {
    #[error(
        "input bands {bands} not divisible by the frequency-pooling factors {factors:?} \
         (their product {product} must divide the band count)"
    )]
    FreqPoolMismatch {
        bands: usize,
        factors: Vec<usize>,
        product: usize,
    },
    #[error("encoder config invalid: {0}")]
    BadConfig(String),
    #[error("expected input with {expected} bands, got {got}")]
    BandMismatch { expected: usize, got: usize },
    #[error("parameter binding has {got} entries, expected {expected}")]
    BindingMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Identity,
    Mlp,
    Cnn,
}

/// Activation between blocks/layers. ReLU is the only member; the enum
/// is the config hook.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_bands: usize,
    /// CNN: channels per block; MLP: layer widths (last = d).
    pub channels: Vec<usize>,
    /// CNN only: frequency pooling factor per block.
    pub freq_pools: Vec<usize>,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn identity(input_bands: usize) -> Self {
        Self {
            kind: EncoderKind::Identity,
            input_bands,
            channels: Vec::new(),
            freq_pools: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_bands: usize, widths: Vec<usize>) -> Self {
        Self {
            kind: EncoderKind::Mlp,
            input_bands,
            channels: widths,
            freq_pools: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn cnn(input_bands: usize, channels: Vec<usize>, freq_pools: Vec<usize>) -> Self {
        Self {
            kind: EncoderKind::Cnn,
            input_bands,
            channels,
            freq_pools,
            activation: Activation::Relu,
        }
    }

    /// The reference 3-block configuration over 64 bands.
    pub fn cnn_default() -> Self {
        Self::cnn(64, vec![64, 128, 160], vec![4, 4, 4])
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.input_bands == 0 {
            return Err(EncoderError::BadConfig("input_bands must be >= 1".into()));
        }
        match self.kind {
            EncoderKind::Identity => Ok(()),
            EncoderKind::Mlp => {
                if self.channels.is_empty() || self.channels.contains(&0) {
                    return Err(EncoderError::BadConfig(
                        "mlp needs at least one positive layer width".into(),
                    ));
                }
                Ok(())
            }
            EncoderKind::Cnn => {
                if self.channels.is_empty()
                    || self.channels.len() != self.freq_pools.len()
                    || self.channels.contains(&0)
                {
                    return Err(EncoderError::BadConfig(
                        "cnn needs matching non-empty channels and freq_pools".into(),
                    ));
                }
                let mut bands = self.input_bands;
                let product: usize = self.freq_pools.iter().product();
                for &k in &self.freq_pools {
                    if k == 0 || !bands.is_multiple_of(k) {
                        return Err(EncoderError::FreqPoolMismatch {
                            bands: self.input_bands,
                            factors: self.freq_pools.clone(),
                            product,
                        });
                    }
                    bands /= k;
                }
                Ok(())
            }
        }
    }

    /// Dimension d of the output representations.
    pub fn output_dim(&self) -> Result<usize, EncoderError> {
        self.validate()?;
        Ok(match self.kind {
            EncoderKind::Identity => self.input_bands,
            EncoderKind::Mlp => *self.channels.last().expect("validated"),
            EncoderKind::Cnn => {
                let product: usize = self.freq_pools.iter().product();
                (self.input_bands / product) * self.channels.last().expect("validated")
            }
        })
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// uniform(-s, s) with s = sqrt(1/fan_in).
    UniformFanIn(usize),
    Zeros,
    Ones,
}

/// Name, shape and initialization of one encoder parameter, in
/// registration order. Running statistics are not trainable.
#[derive(Clone, Debug)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

/// Parameter definitions for a config, in the order `encode_graph`
/// expects its bindings.
pub fn param_defs(config: &EncoderConfig) -> Result<Vec<ParamDef>, EncoderError> {
    config.validate()?;
    let mut defs = Vec::new();
    match config.kind {
        EncoderKind::Identity => {}
        EncoderKind::Mlp => {
            let mut prev = config.input_bands;
            for (i, &width) in config.channels.iter().enumerate() {
                defs.push(ParamDef {
                    name: format!("enc.l{i}.w"),
                    shape: vec![prev, width],
                    init: Init::UniformFanIn(prev),
                    trainable: true,
                });
                defs.push(ParamDef {
                    name: format!("enc.l{i}.b"),
                    shape: vec![width],
                    init: Init::Zeros,
                    trainable: true,
                });
                prev = width;
            }
        }
        EncoderKind::Cnn => {
            let mut in_ch = 1usize;
            for (i, &out_ch) in config.channels.iter().enumerate() {
                let fan_in = in_ch * 9;
                defs.push(ParamDef {
                    name: format!("enc.b{i}.convw"),
                    shape: vec![out_ch, in_ch, 3, 3],
                    init: Init::UniformFanIn(fan_in),
                    trainable: true,
                });
                defs.push(ParamDef {
                    name: format!("enc.b{i}.convb"),
                    shape: vec![out_ch],
                    init: Init::Zeros,
                    trainable: true,
                });
                defs.push(ParamDef {
                    name: format!("enc.b{i}.gamma"),
                    shape: vec![out_ch],
                    init: Init::Ones,
                    trainable: true,
                });
                defs.push(ParamDef {
                    name: format!("enc.b{i}.beta"),
                    shape: vec![out_ch],
                    init: Init::Zeros,
                    trainable: true,
                });
                defs.push(ParamDef {
                    name: format!("enc.b{i}.rmean"),
                    shape: vec![out_ch],
                    init: Init::Zeros,
                    trainable: false,
                });
                defs.push(ParamDef {
                    name: format!("enc.b{i}.rvar"),
                    shape: vec![out_ch],
                    init: Init::Ones,
                    trainable: false,
                });
                in_ch = out_ch;
            }
        }
    }
    Ok(defs)
}

/// Draws one parameter tensor.
pub fn init_tensor(def: &ParamDef, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = def.shape.iter().product();
    let data: Vec<f64> = match def.init {
        Init::UniformFanIn(fan_in) => {
            let s = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-s..s)).collect()
        }
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    };
    Tensor::new(def.shape.clone(), data).expect("init shapes consistent")
}

/// Deterministic parameter initialization for a config.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<Vec<(ParamDef, Tensor)>, EncoderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(param_defs(config)?
        .into_iter()
        .map(|def| {
            let value = init_tensor(&def, &mut rng);
            (def, value)
        })
        .collect())
}

/// Whether batch norm uses the clip's own statistics (train) or the
/// stored running statistics (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Output of the encoder graph: representations plus, in train mode,
/// each block's batch statistics for the running-stat update.
pub struct EncodeOutput {
    pub reps: VarId,
    pub batch_stats: Vec<(Tensor, Tensor)>,
}

/// Builds the encoder forward pass on a tape. `binding` holds the leaf
/// ids of the parameters in `param_defs` order; `input` is the (T,F)
/// feature leaf.
pub fn encode_graph(
    tape: &mut Tape,
    config: &EncoderConfig,
    binding: &[VarId],
    input: VarId,
    mode: BnMode,
) -> Result<EncodeOutput, EncoderError> {
    config.validate()?;
    let expected = param_defs(config)?.len();
    if binding.len() != expected {
        return Err(EncoderError::BindingMismatch { expected, got: binding.len() });
    }
    let bands = tape.value(input).cols();
    if bands != config.input_bands {
        return Err(EncoderError::BandMismatch { expected: config.input_bands, got: bands });
    }
    let t = tape.value(input).rows();
    let mut batch_stats = Vec::new();

    let reps = match config.kind {
        EncoderKind::Identity => input,
        EncoderKind::Mlp => {
            let mut x = input;
            let layers = config.channels.len();
            for i in 0..layers {
                let w = binding[2 * i];
                let b = binding[2 * i + 1];
                let lin = tape.matmul(x, w)?;
                x = tape.add_row(lin, b)?;
                if i + 1 < layers {
                    x = tape.relu(x)?;
                }
            }
            x
        }
        EncoderKind::Cnn => {
            let mut x = tape.reshape(input, vec![1, t, bands])?;
            for (i, (&_out_ch, &pool)) in config
                .channels
                .iter()
                .zip(&config.freq_pools)
                .enumerate()
            {
                let base = 6 * i;
                let convw = binding[base];
                let convb = binding[base + 1];
                let gamma = binding[base + 2];
                let beta = binding[base + 3];
                let rmean = binding[base + 4];
                let rvar = binding[base + 5];

                let conv = tape.conv2d_same(x, convw)?;
                let biased = tape.add_channel(conv, convb)?;

                let normed = match mode {
                    BnMode::Train => {
                        let mu = tape.mean_per_channel(biased)?;
                        let centered = tape.sub_channel(biased, mu)?;
                        let sq = tape.mul(centered, centered)?;
                        let var = tape.mean_per_channel(sq)?;
                        batch_stats
                            .push((tape.value(mu).clone(), tape.value(var).clone()));
                        let var_eps = tape.add_const(var, BN_EPS)?;
                        let std = tape.sqrt(var_eps)?;
                        tape.div_channel(centered, std)?
                    }
                    BnMode::Eval => {
                        let centered = tape.sub_channel(biased, rmean)?;
                        let var_eps = tape.add_const(rvar, BN_EPS)?;
                        let std = tape.sqrt(var_eps)?;
                        tape.div_channel(centered, std)?
                    }
                };
                let scaled = tape.mul_channel(normed, gamma)?;
                let shifted = tape.add_channel(scaled, beta)?;
                let pooled = tape.max_pool_freq(shifted, pool)?;
                x = tape.relu(pooled)?;
            }
            tape.frames_from_channels(x)?
        }
    };
    Ok(EncodeOutput { reps, batch_stats })
}

/// High-level representation sequence.
#[derive(Clone, Debug)]
pub struct HighLevelSequence {
    pub clip_id: String,
    pub reps: Tensor,
    pub dim: usize,
}

/// Plain encode: evaluates the graph in inference mode.
pub fn encode(
    config: &EncoderConfig,
    params: &[(ParamDef, Tensor)],
    input: &FeatureSequence,
) -> Result<HighLevelSequence, EncoderError> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.frames.clone());
    let binding: Vec<VarId> = params.iter().map(|(_, v)| tape.leaf(v.clone())).collect();
    let out = encode_graph(&mut tape, config, &binding, x, BnMode::Eval)?;
    Ok(HighLevelSequence {
        clip_id: input.clip_id.clone(),
        reps: tape.value(out.reps).clone(),
        dim: config.output_dim()?,
    })
}
