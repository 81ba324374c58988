//! Weakly-supervised training: binary cross entropy on clip
//! probabilities, Adam with stepped learning-rate decay, early
//! stopping on validation clip-level macro F1.
//!
//! Reference protocol: learning rate 0.0018, mini-batch 64, the rate
//! multiplied by 0.8 every 10 epochs, training stopped once the
//! validation clip-level macro F1 has not improved for 10 epochs, and
//! the best-validation snapshot retained as the returned model.
//!
//! Checkpoints are a versioned self-describing text container: config
//! echo, class names, subspace allocation and every parameter tensor
//! in the same text format as feature files. Identical config and seed
//! give byte-identical checkpoints.

use crate::data::Dataset;
use crate::disentangle::{
    allocate, count_cooccurrence, DfAllocation, DfError, DfMode, InterferenceScore,
};
use crate::encoder::{Activation, BnMode, EncoderConfig, EncoderKind};
use crate::metrics::{clip_f1, MetricsError};
use crate::model::{Model, ModelConfig, ModelError, Param, ParamSet};
use crate::numerics::tape::{NumericsError, Tape};
use crate::numerics::tensor::Tensor;
use crate::pooling::PoolingSpec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("checkpoint {path}:{line}: {detail}")]
    Checkpoint {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Df(#[from] DfError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Training hyperparameters plus the model configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Reference hyperparameters around a model configuration.
    pub fn defaults(model: ModelConfig) -> Self {
        Self {
            lr: 0.0018,
            batch_size: 64,
            lr_decay: 0.8,
            lr_decay_every: 10,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            model,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::BadConfig(format!("lr {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::BadConfig(
                "batch_size and max_epochs must be >= 1".into(),
            ));
        }
        if self.patience == 0 {
            return Err(TrainError::BadConfig("patience must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return Err(TrainError::BadConfig("invalid lr decay schedule".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Learning rate for a 0-based epoch index: decayed every
    /// `lr_decay_every` epochs.
    pub fn lr_at(&self, epoch_index: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch_index / self.lr_decay_every) as i32)
    }
}

/// Mean binary cross entropy with probability clamping.
pub fn bce_loss(probs: &[f64], targets: &[bool]) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::vector(probs.to_vec()));
    let t: Vec<f64> = targets.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let loss = tape.bce_loss(p, &t).expect("lengths match");
    tape.value(loss).item()
}

/// Adam optimizer state: first/second moments aligned with the
/// parameter set, plus the step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .entries
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all trainable parameters. `grads` is aligned
    /// with `params.entries`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, param) in params.entries.iter_mut().enumerate() {
            if !param.trainable {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = param.value.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub lr: f64,
}

/// Trained model plus its per-epoch history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Validation macro F1 of the retained snapshot.
    pub best_val_f1: f64,
    /// Interference scores behind the subspace allocation, when
    /// disentangling was active.
    pub alloc_score: Option<InterferenceScore>,
}

fn predict_weak(model: &Model, dataset: &Dataset) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
    let mut out = Vec::with_capacity(dataset.clips.len());
    for clip in &dataset.clips {
        let probs = model.clip_probs(&clip.features)?;
        let classes = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= model.config.alpha)
            .map(|(i, _)| i)
            .collect();
        out.push((clip.clip_id.clone(), classes));
    }
    Ok(out)
}

/// Validation clip-level macro F1 of a model.
pub fn validation_macro_f1(model: &Model, val: &Dataset) -> Result<f64, TrainError> {
    let refs = val.weak_label_sets();
    let preds = predict_weak(model, val)?;
    Ok(clip_f1(&refs, &preds, val.num_classes())?.macro_f1)
}

/// Runs the full training loop.
pub fn train(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.clips.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let class_names = train_set.class_names.clone();
    let c = class_names.len();
    let d = config.model.encoder.output_dim().map_err(ModelError::from)?;

    let (alloc, alloc_score) = if config.model.df_mode == DfMode::None {
        (DfAllocation::none(d, c), None)
    } else {
        let counts = count_cooccurrence(&train_set.weak_label_sets(), c)?;
        let (alloc, score) = allocate(&counts, config.model.df_mode, config.model.df_m, d)?;
        (alloc, Some(score))
    };

    let mut model = Model::new(config.model.clone(), class_names, alloc, config.seed)?;
    let mut adam = Adam::new(&model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut history = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    let mut epochs_since_improvement = 0usize;

    for epoch_index in 0..config.max_epochs {
        let lr = config.lr_at(epoch_index);
        let mut order: Vec<usize> = (0..train_set.clips.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Tensor> = model
                .params
                .entries
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for &clip_idx in batch {
                let clip = &train_set.clips[clip_idx];
                let mut tape = Tape::new();
                let fwd = model.clip_forward(&mut tape, &clip.features, BnMode::Train)?;
                let targets: Vec<f64> =
                    clip.weak.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let loss = tape.bce_loss(fwd.core.clip_probs, &targets)?;
                epoch_loss += tape.value(loss).item();
                let back = tape.backward(loss)?;
                for (i, id) in fwd.param_ids.iter().enumerate() {
                    if !model.params.entries[i].trainable {
                        continue;
                    }
                    let g = back.wrt(*id);
                    for (acc, gv) in grads[i].data_mut().iter_mut().zip(g.data()) {
                        *acc += gv * scale;
                    }
                }
                model.update_running_stats(&fwd.core.batch_stats);
            }
            adam.step(&mut model.params, &grads, lr);
        }
        let train_loss = epoch_loss / train_set.clips.len() as f64;
        let val_f1 = validation_macro_f1(&model, val_set)?;
        history.push(EpochRecord {
            epoch: epoch_index + 1,
            train_loss,
            val_macro_f1: val_f1,
            lr,
        });

        let improved = best.as_ref().is_none_or(|(b, _)| val_f1 > *b);
        if improved {
            best = Some((val_f1, model.clone()));
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= config.patience {
                break;
            }
        }
    }

    let (best_val_f1, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model, history, best_val_f1, alloc_score })
}

/// Serializes the history as CSV with a header line.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_macro_f1,lr\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{}",
            r.epoch, r.train_loss, r.val_macro_f1, r.lr
        );
    }
    out
}

const CHECKPOINT_MAGIC: &str = "sedmil-checkpoint v1";

/// Splits `"<head> k1=v1 k2=v2 ..."` into a key/value map.
fn parse_kv_line(
    line: &str,
    head: &str,
) -> Result<std::collections::BTreeMap<String, String>, String> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(head) {
        return Err(format!("expected a {head} line, got {line:?}"));
    }
    let mut map = std::collections::BTreeMap::new();
    for tok in toks {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn encoder_line(config: &EncoderConfig) -> String {
    let kind = match config.kind {
        EncoderKind::Identity => "identity",
        EncoderKind::Mlp => "mlp",
        EncoderKind::Cnn => "cnn",
    };
    let join = |xs: &[usize]| {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "encoder kind={kind} bands={} channels={} pools={} activation=relu",
        config.input_bands,
        join(&config.channels),
        join(&config.freq_pools)
    )
}

/// Renders a checkpoint. Deterministic: identical models give
/// byte-identical strings.
pub fn checkpoint_string(model: &Model) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "classes {}", model.class_names.len());
    for name in &model.class_names {
        let _ = writeln!(out, "{name}");
    }
    let _ = writeln!(out, "{}", encoder_line(&model.config.encoder));
    let scale = match model.config.pooling.scale_d {
        Some(v) => v.to_string(),
        None => "default".into(),
    };
    let _ = writeln!(
        out,
        "pooling {} psi=identity scale_d={scale}",
        model.config.pooling.short_name()
    );
    let _ = writeln!(
        out,
        "sds {} scaled={}",
        model.config.sds, model.config.sds_scaled
    );
    let _ = writeln!(
        out,
        "df mode={} m={}",
        model.config.df_mode.name(),
        model.config.df_m
    );
    let _ = writeln!(
        out,
        "thresholds alpha={} gamma={}",
        model.config.alpha, model.config.gamma
    );
    let _ = writeln!(
        out,
        "alloc {}",
        model
            .alloc
            .k
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    let _ = writeln!(out, "params {}", model.params.entries.len());
    for p in &model.params.entries {
        let shape = p
            .value
            .shape()
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let flag = if p.trainable { "trainable" } else { "frozen" };
        let rank = p.value.shape().len();
        if shape.is_empty() {
            let _ = writeln!(out, "param {} {flag} {rank}", p.name);
        } else {
            let _ = writeln!(out, "param {} {flag} {rank} {shape}", p.name);
        }
        let (rows, cols) = tensor_rows_cols(p.value.shape());
        for r in 0..rows {
            for c in 0..cols {
                if c > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{}", p.value.data()[r * cols + c]);
            }
            out.push('\n');
        }
    }
    out
}

fn tensor_rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        n => (shape[..n - 1].iter().product(), shape[n - 1]),
    }
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<(), TrainError> {
    std::fs::write(path, checkpoint_string(model))
        .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

/// Parses a checkpoint back into a model.
pub fn parse_checkpoint(text: &str, path: &Path) -> Result<Model, TrainError> {
    struct Cursor<'a> {
        lines: Vec<&'a str>,
        pos: usize,
        path: &'a Path,
    }
    impl<'a> Cursor<'a> {
        fn err(&self, detail: String) -> TrainError {
            TrainError::Checkpoint {
                path: self.path.to_path_buf(),
                line: self.pos,
                detail,
            }
        }
        fn next(&mut self, expect: &str) -> Result<&'a str, TrainError> {
            let line = self.lines.get(self.pos).copied().ok_or_else(|| {
                TrainError::Checkpoint {
                    path: self.path.to_path_buf(),
                    line: self.pos + 1,
                    detail: format!("unexpected end of file, wanted {expect}"),
                }
            })?;
            self.pos += 1;
            Ok(line)
        }
    }
    let mut cur = Cursor { lines: text.lines().collect(), pos: 0, path };

    if cur.next("magic")? != CHECKPOINT_MAGIC {
        return Err(cur.err(format!("bad magic, wanted {CHECKPOINT_MAGIC:?}")));
    }
    let class_line = cur.next("classes")?;
    let count: usize = class_line
        .strip_prefix("classes ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| cur.err("bad classes line".into()))?;
    let mut class_names = Vec::with_capacity(count);
    for _ in 0..count {
        class_names.push(cur.next("class name")?.to_string());
    }

    let enc_line = cur.next("encoder")?;
    let enc_fields = parse_kv_line(enc_line, "encoder").map_err(|d| cur.err(d))?;
    let kind = match enc_fields.get("kind").map(String::as_str) {
        Some("identity") => EncoderKind::Identity,
        Some("mlp") => EncoderKind::Mlp,
        Some("cnn") => EncoderKind::Cnn,
        other => return Err(cur.err(format!("bad encoder kind {other:?}"))),
    };
    let bands: usize = enc_fields
        .get("bands")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| cur.err("bad bands".into()))?;
    let parse_list = |key: &str| -> Result<Vec<usize>, String> {
        let raw = enc_fields.get(key).map(String::as_str).unwrap_or("");
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|x| x.parse().map_err(|_| format!("bad {key} list")))
            .collect()
    };
    let encoder = EncoderConfig {
        kind,
        input_bands: bands,
        channels: parse_list("channels").map_err(|d| cur.err(d))?,
        freq_pools: parse_list("pools").map_err(|d| cur.err(d))?,
        activation: Activation::Relu,
    };

    let pool_line = cur.next("pooling")?;
    let mut pool_tokens = pool_line.split_whitespace();
    if pool_tokens.next() != Some("pooling") {
        return Err(cur.err("bad pooling line".into()));
    }
    let short = pool_tokens
        .next()
        .ok_or_else(|| cur.err("missing pooling name".into()))?;
    let mut pooling = PoolingSpec::parse_short(short)
        .ok_or_else(|| cur.err(format!("unknown pooling {short:?}")))?;
    for tok in pool_tokens {
        if let Some(v) = tok.strip_prefix("scale_d=") {
            if v != "default" {
                pooling.scale_d = Some(
                    v.parse()
                        .map_err(|_| cur.err(format!("bad scale_d {v:?}")))?,
                );
            }
        }
    }

    let sds_line = cur.next("sds")?;
    let mut sds_tokens = sds_line.split_whitespace();
    let (sds, mut sds_scaled) = match (sds_tokens.next(), sds_tokens.next()) {
        (Some("sds"), Some("true")) => (true, false),
        (Some("sds"), Some("false")) => (false, false),
        _ => return Err(cur.err(format!("bad sds line {sds_line:?}"))),
    };
    for tok in sds_tokens {
        match tok {
            "scaled=true" => sds_scaled = true,
            "scaled=false" => sds_scaled = false,
            other => return Err(cur.err(format!("bad sds token {other:?}"))),
        }
    }

    let df_line = cur.next("df")?;
    let df_fields = parse_kv_line(df_line, "df").map_err(|d| cur.err(d))?;
    let df_mode = df_fields
        .get("mode")
        .and_then(|s| DfMode::parse(s))
        .ok_or_else(|| cur.err("bad df mode".into()))?;
    let df_m: f64 = df_fields
        .get("m")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| cur.err("bad df m".into()))?;

    let thr_line = cur.next("thresholds")?;
    let thr_fields = parse_kv_line(thr_line, "thresholds").map_err(|d| cur.err(d))?;
    let alpha: f64 = thr_fields
        .get("alpha")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| cur.err("bad alpha".into()))?;
    let gamma: f64 = thr_fields
        .get("gamma")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| cur.err("bad gamma".into()))?;

    let alloc_line = cur.next("alloc")?;
    let k: Vec<usize> = alloc_line
        .strip_prefix("alloc ")
        .ok_or_else(|| cur.err("bad alloc line".into()))?
        .split(' ')
        .map(|x| {
            x.parse()
                .map_err(|_| cur.err(format!("bad alloc value {x:?}")))
        })
        .collect::<Result<_, _>>()?;

    let params_line = cur.next("params")?;
    let n_params: usize = params_line
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| cur.err("bad params line".into()))?;

    let mut params = ParamSet::default();
    for _ in 0..n_params {
        let head = cur.next("param header")?;
        let mut toks = head.split(' ');
        if toks.next() != Some("param") {
            return Err(cur.err(format!("bad param header {head:?}")));
        }
        let name = toks
            .next()
            .ok_or_else(|| cur.err("missing param name".into()))?
            .to_string();
        let trainable = match toks.next() {
            Some("trainable") => true,
            Some("frozen") => false,
            other => return Err(cur.err(format!("bad trainable flag {other:?}"))),
        };
        let rank: usize = toks
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| cur.err("bad rank".into()))?;
        let shape: Vec<usize> = toks
            .map(|x| x.parse().map_err(|_| cur.err(format!("bad dim {x:?}"))))
            .collect::<Result<_, _>>()?;
        if shape.len() != rank {
            return Err(cur.err(format!("rank {rank} but {} dims", shape.len())));
        }
        let (rows, cols) = tensor_rows_cols(&shape);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = cur.next("tensor row")?;
            for tok in row.split(' ') {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| cur.err(format!("bad value {tok:?}")))?,
                );
            }
        }
        if data.len() != rows * cols {
            return Err(cur.err("tensor data length mismatch".into()));
        }
        let value = Tensor::new(shape, data).map_err(|e| cur.err(e.to_string()))?;
        params.entries.push(Param { name, value, trainable });
    }

    let d = encoder.output_dim().map_err(ModelError::from)?;
    let config = ModelConfig {
        encoder,
        pooling,
        sds,
        sds_scaled,
        df_mode,
        df_m,
        alpha,
        gamma,
    };
    let alloc = DfAllocation { mode: df_mode, m: df_m, d, k };
    Ok(Model::from_parts(config, class_names, alloc, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model, TrainError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    parse_checkpoint(&text, path)
}
