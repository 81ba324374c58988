//! The `sedmil` command line: dataset generation, training,
//! prediction and evaluation.
//!
//! Exit codes: 0 success, 2 usage or input-validation failure, 1
//! internal error. Reports go to stdout; diagnostics to stderr.

use crate::data::{
    self, class_durations, load_classes, load_events_csv, load_manifest, load_weak_csv,
    parse_synthetic_spec, write_events_csv, write_features, write_weak_csv, DataError, Dataset,
    FeatureSequence,
};
use crate::disentangle::DfMode;
use crate::encoder::EncoderConfig;
use crate::metrics::{clip_f1, f1, macro_f1, match_events, ClasswiseCounts, CollarConfig};
use crate::model::{ModelConfig, ModelError};
use crate::pooling::PoolingSpec;
use crate::postprocess::{frames_to_events, smooth_pipeline, SmoothingConfig, DEFAULT_BETA};
use crate::trainer::{self, train, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sedmil",
    version,
    about = "Weakly-supervised polyphonic sound event detection via multiple instance learning",
    after_help = "\
FILE FORMATS
  features        text: header line `T d`, then T lines of d space-separated values
  classes.txt     one class name per line; index = line number
  <split>.csv     manifest: clip_id,feature_path,classA;classB (paths relative to the dataset dir)
  weak CSV        clip_id,classA;classB
  strong/event CSV  clip_id,class,onset_s,offset_s (6-decimal seconds)
  history CSV     epoch,train_loss,val_macro_f1,lr (with header)
  checkpoint      versioned text container: config echo, class names, allocation, parameter tensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Gen(GenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Predict clip and event labels with a trained checkpoint.
    Predict(PredictArgs),
    /// Evaluate predictions against references.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Synthetic spec file (see README for the format).
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (train.csv + validation.csv + classes.txt).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.txt, history.csv, alloc.txt.
    #[arg(long)]
    out: PathBuf,
    /// Config file with `key value` lines for any knob below;
    /// precedence is flags > config file > defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pooling module: igmp igap igsp iatp egmp egap egsp eatp.
    #[arg(long)]
    pooling: Option<String>,
    /// Use the specialized decision surface for frame predictions
    /// (requires ATP pooling).
    #[arg(long)]
    sds: bool,
    /// Ablation: keep the attention logit scaling inside the
    /// specialized surface (requires --sds).
    #[arg(long)]
    sds_scaled: bool,
    /// Disentangled-feature mode: none, df1 or dfw.
    #[arg(long)]
    df: Option<String>,
    /// DF minimum-dimension factor m in [0,1] (default 0).
    #[arg(long)]
    m: Option<f64>,
    /// Encoder kind: identity, mlp or cnn (default identity).
    #[arg(long)]
    encoder: Option<String>,
    /// MLP layer widths, comma separated (default 32,16).
    #[arg(long)]
    mlp_widths: Option<String>,
    /// CNN channels per block, comma separated (default 64,128,160).
    #[arg(long)]
    cnn_channels: Option<String>,
    /// CNN frequency-pooling factors (default 4,4,4).
    #[arg(long)]
    cnn_pools: Option<String>,
    /// Learning rate (default 0.0018).
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size (default 64).
    #[arg(long)]
    batch: Option<usize>,
    /// Random seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch cap (default 100).
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Early-stopping patience in epochs (default 10).
    #[arg(long)]
    patience: Option<usize>,
    /// Clip-level threshold (default 0.5).
    #[arg(long)]
    alpha: Option<f64>,
    /// Frame-level threshold (default 0.5).
    #[arg(long)]
    gamma: Option<f64>,
    /// Frame hop in seconds (bookkeeping only during training).
    #[arg(long)]
    hop: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Config file with `key value` lines for any knob below;
    /// precedence is flags > config file > defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split to predict (reads <split>.csv; default test).
    #[arg(long)]
    split: Option<String>,
    /// Median-filter window factor β (default 1/3).
    #[arg(long)]
    beta: Option<f64>,
    /// Fixed odd median window in frames, overriding adaptivity.
    #[arg(long)]
    fixed_window: Option<usize>,
    /// Strong-label CSV providing per-class average durations
    /// (typically the validation split's).
    #[arg(long)]
    durations_from: Option<PathBuf>,
    /// Frame hop in seconds; defaults to the dataset's frame_hop.txt
    /// or 0.02.
    #[arg(long)]
    hop: Option<f64>,
    /// Also dump per-clip frame probabilities (C rows × T columns).
    #[arg(long)]
    dump_frame_probs: bool,
    /// Also dump per-clip high-level features (T rows × d columns) for
    /// external projection/plotting.
    #[arg(long)]
    dump_features: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// classes.txt fixing the class universe.
    #[arg(long)]
    classes: PathBuf,
    /// Reference strong labels CSV.
    #[arg(long)]
    ref_strong: PathBuf,
    /// Reference weak labels CSV.
    #[arg(long)]
    ref_weak: PathBuf,
    /// Predicted events CSV.
    #[arg(long)]
    pred_events: PathBuf,
    /// Predicted clip labels CSV (weak format).
    #[arg(long)]
    pred_clips: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    onset_collar: f64,
    #[arg(long, default_value_t = 0.2)]
    offset_collar: f64,
    /// Offset collar as a fraction of the reference event length.
    #[arg(long, default_value_t = 0.2)]
    offset_collar_rel: f64,
    /// Also write the report as machine-readable CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// `key value` lines, `#` comments; keys are the long flag names
/// (dashes and underscores are interchangeable).
struct ConfigFile {
    values: std::collections::BTreeMap<String, String>,
}

impl ConfigFile {
    fn empty() -> Self {
        Self { values: Default::default() }
    }

    fn load(path: &Path, allowed: &[&str]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut values = std::collections::BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(char::is_whitespace).ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected `key value`", path.display(), i + 1))
            })?;
            let key = key.replace('-', "_");
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Usage(format!(
                    "{}:{}: unknown config key {key:?}",
                    path.display(),
                    i + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                CliError::Usage(format!("config key {key}: bad value {raw:?}"))
            }),
        }
    }

    /// flags > config file > default.
    fn knob<T: std::str::FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.parsed(key)?.unwrap_or(default)),
        }
    }

    fn flag(&self, set_on_cli: bool, key: &str) -> Result<bool, CliError> {
        Ok(set_on_cli || self.parsed::<bool>(key)?.unwrap_or(false))
    }
}

enum CliError {
    Usage(String),
    Internal(String),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<crate::metrics::MetricsError> for CliError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<crate::postprocess::PostError> for CliError {
    fn from(e: crate::postprocess::PostError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Entry point used by the binary.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.spec)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.spec.display())))?;
    let mut spec = parse_synthetic_spec(&text, &args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    std::fs::create_dir_all(&args.out)?;
    let generated = data::generate(&spec, &args.out)?;
    std::fs::write(args.out.join("frame_hop.txt"), format!("{}\n", spec.frame_hop))?;
    eprintln!(
        "generated {} train / {} validation / {} test clips in {}",
        generated.train.entries.len(),
        generated.validation.entries.len(),
        generated.test.entries.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::Usage(format!("bad {what} list {s:?}")))
        })
        .collect()
}

fn dataset_hop(dir: &Path, flag: Option<f64>) -> Result<f64, CliError> {
    if let Some(hop) = flag {
        if hop <= 0.0 {
            return Err(CliError::Usage(format!("hop {hop} must be > 0")));
        }
        return Ok(hop);
    }
    let path = dir.join("frame_hop.txt");
    if path.is_file() {
        let text = std::fs::read_to_string(&path)?;
        return text
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{}: bad hop value", path.display())));
    }
    Ok(data::DEFAULT_FRAME_HOP)
}

const TRAIN_CONFIG_KEYS: &[&str] = &[
    "pooling", "sds", "sds_scaled", "df", "m", "encoder", "mlp_widths", "cnn_channels",
    "cnn_pools", "lr", "batch", "seed", "max_epochs", "patience", "alpha", "gamma", "hop",
];

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => ConfigFile::load(path, TRAIN_CONFIG_KEYS)?,
        None => ConfigFile::empty(),
    };
    let pooling_name = args
        .pooling
        .clone()
        .or(file.parsed::<String>("pooling")?)
        .ok_or_else(|| CliError::Usage("missing --pooling (or a config-file `pooling`)".into()))?;
    let pooling = PoolingSpec::parse_short(&pooling_name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown pooling {pooling_name:?}; use one of igmp igap igsp iatp egmp egap egsp eatp"
        ))
    })?;
    let df_name = file.knob(args.df.clone(), "df", "none".into())?;
    let df = DfMode::parse(&df_name)
        .ok_or_else(|| CliError::Usage(format!("unknown df mode {df_name:?}; use none, df1 or dfw")))?;
    let sds = file.flag(args.sds, "sds")?;
    let sds_scaled = file.flag(args.sds_scaled, "sds_scaled")?;
    let m = file.knob(args.m, "m", 0.0)?;
    let encoder_kind = file.knob(args.encoder.clone(), "encoder", "identity".into())?;
    let mlp_widths = file.knob(args.mlp_widths.clone(), "mlp_widths", "32,16".into())?;
    let cnn_channels = file.knob(args.cnn_channels.clone(), "cnn_channels", "64,128,160".into())?;
    let cnn_pools = file.knob(args.cnn_pools.clone(), "cnn_pools", "4,4,4".into())?;
    let lr = file.knob(args.lr, "lr", 0.0018)?;
    let batch = file.knob(args.batch, "batch", 64)?;
    let seed = file.knob(args.seed, "seed", 0)?;
    let max_epochs = file.knob(args.max_epochs, "max_epochs", 100)?;
    let patience = file.knob(args.patience, "patience", 10)?;
    let alpha = file.knob(args.alpha, "alpha", 0.5)?;
    let gamma = file.knob(args.gamma, "gamma", 0.5)?;
    let hop_flag = match args.hop {
        Some(h) => Some(h),
        None => file.parsed::<f64>("hop")?,
    };

    let hop = dataset_hop(&args.data, hop_flag)?;
    let train_manifest = load_manifest(&args.data, "train")?;
    let val_manifest = load_manifest(&args.data, "validation")?;
    let train_set = Dataset::load(&train_manifest, hop)?;
    let val_set = Dataset::load(&val_manifest, hop)?;
    let bands = train_set
        .clips
        .first()
        .map(|c| c.features.cols())
        .ok_or_else(|| CliError::Usage("training set is empty".into()))?;

    let encoder = match encoder_kind.as_str() {
        "identity" => EncoderConfig::identity(bands),
        "mlp" => EncoderConfig::mlp(bands, parse_usize_list(&mlp_widths, "mlp widths")?),
        "cnn" => EncoderConfig::cnn(
            bands,
            parse_usize_list(&cnn_channels, "cnn channels")?,
            parse_usize_list(&cnn_pools, "cnn pools")?,
        ),
        other => {
            return Err(CliError::Usage(format!(
                "unknown encoder {other:?}; use identity, mlp or cnn"
            )))
        }
    };
    if df != DfMode::None && m >= 1.0 {
        eprintln!("warning: m=1 makes DF degenerate to the general feature");
    }

    let model_config = ModelConfig {
        encoder,
        pooling,
        sds,
        sds_scaled,
        df_mode: df,
        df_m: m,
        alpha,
        gamma,
    };
    let config = TrainConfig {
        lr,
        batch_size: batch,
        lr_decay: 0.8,
        lr_decay_every: 10,
        patience,
        max_epochs,
        seed,
        model: model_config,
    };
    config.validate()?;

    std::fs::create_dir_all(&args.out)?;
    let outcome = train(&config, &train_set, &val_set)?;
    trainer::save_checkpoint(&args.out.join("checkpoint.txt"), &outcome.model)?;
    std::fs::write(
        args.out.join("history.csv"),
        trainer::history_csv(&outcome.history),
    )?;
    if outcome.model.config.df_mode != DfMode::None {
        std::fs::write(
            args.out.join("alloc.txt"),
            outcome
                .model
                .alloc
                .report(&outcome.model.class_names, outcome.alloc_score.as_ref()),
        )?;
    }
    println!("val_macro_f1 {:.6}", outcome.best_val_f1);
    Ok(())
}

const PREDICT_CONFIG_KEYS: &[&str] = &[
    "split", "beta", "fixed_window", "durations_from", "hop", "dump_frame_probs", "dump_features",
];

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => ConfigFile::load(path, PREDICT_CONFIG_KEYS)?,
        None => ConfigFile::empty(),
    };
    let split = file.knob(args.split.clone(), "split", "test".into())?;
    let beta = file.knob(args.beta, "beta", DEFAULT_BETA)?;
    let fixed_window = match args.fixed_window {
        Some(w) => Some(w),
        None => file.parsed::<usize>("fixed_window")?,
    };
    let durations_from = match args.durations_from.clone() {
        Some(p) => Some(p),
        None => file.parsed::<PathBuf>("durations_from")?,
    };
    let hop_flag = match args.hop {
        Some(h) => Some(h),
        None => file.parsed::<f64>("hop")?,
    };
    let dump_frame_probs = file.flag(args.dump_frame_probs, "dump_frame_probs")?;
    let dump_features = file.flag(args.dump_features, "dump_features")?;

    let model = trainer::load_checkpoint(&args.checkpoint)?;
    let hop = dataset_hop(&args.data, hop_flag)?;
    let manifest = load_manifest(&args.data, &split)?;
    if manifest.class_names != model.class_names {
        return Err(CliError::Usage(format!(
            "dataset classes {:?} do not match checkpoint classes {:?}",
            manifest.class_names, model.class_names
        )));
    }
    let dataset = Dataset::load(&manifest, hop)?;
    let c = model.num_classes();

    let smoothing = match fixed_window {
        Some(window) => SmoothingConfig::fixed(window, c, hop)?,
        None => {
            let from = durations_from.as_ref().ok_or_else(|| {
                CliError::Usage(
                    "adaptive windows need --durations-from <strong.csv> \
                     (e.g. the dataset's validation_strong.csv); \
                     or pass --fixed-window N"
                        .into(),
                )
            })?;
            let events = load_events_csv(from, &model.class_names)?;
            let durations = class_durations(&events, &model.class_names)?;
            SmoothingConfig::adaptive(durations, beta, hop)?
        }
    };

    std::fs::create_dir_all(&args.out)?;
    if dump_frame_probs {
        std::fs::create_dir_all(args.out.join("frame_probs"))?;
    }
    if dump_features {
        std::fs::create_dir_all(args.out.join("features_hl"))?;
    }

    let mut weak_rows: Vec<(String, Vec<usize>)> = Vec::new();
    let mut prob_rows = String::new();
    let mut events = Vec::new();
    for clip in &dataset.clips {
        let (clip_pred, frame_pred) = model.predict_clip(&clip.features)?;
        let classes: Vec<usize> = clip_pred
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .map(|(i, _)| i)
            .collect();
        for (class, prob) in clip_pred.probs.iter().enumerate() {
            let _ = writeln!(
                prob_rows,
                "{},{},{prob:.6}",
                clip.clip_id, model.class_names[class]
            );
        }
        weak_rows.push((clip.clip_id.clone(), classes));

        let smoothed = smooth_pipeline(
            &frame_pred.probs,
            &clip_pred.labels,
            &smoothing,
            model.config.gamma,
        )?;
        events.extend(frames_to_events(&smoothed, hop, &clip.clip_id));

        if dump_frame_probs {
            let path = args.out.join("frame_probs").join(format!("{}.txt", clip.clip_id));
            let probs_matrix = FeatureSequence {
                clip_id: clip.clip_id.clone(),
                frames: frame_pred.probs.clone(),
                frame_hop: hop,
            };
            write_features(&path, &probs_matrix)?;
        }
        if dump_features {
            let path = args.out.join("features_hl").join(format!("{}.txt", clip.clip_id));
            let reps = model.high_level_features(&clip.features)?;
            write_features(
                &path,
                &FeatureSequence {
                    clip_id: clip.clip_id.clone(),
                    frames: reps,
                    frame_hop: hop,
                },
            )?;
        }
    }

    write_weak_csv(&args.out.join("clips.csv"), &weak_rows, &model.class_names)?;
    std::fs::write(args.out.join("clip_probs.csv"), prob_rows)?;
    write_events_csv(&args.out.join("events.csv"), &events, &model.class_names)?;
    eprintln!(
        "predicted {} clips, {} events -> {}",
        dataset.clips.len(),
        events.len(),
        args.out.display()
    );
    Ok(())
}

fn report_section(
    out: &mut String,
    title: &str,
    class_names: &[String],
    counts: &ClasswiseCounts,
    extra: Option<(f64, f64)>,
) {
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:<28} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}",
        "class", "P", "R", "F1", "tp", "fp", "fn"
    );
    for (name, c) in class_names.iter().zip(&counts.per_class) {
        let (p, r, f) = f1(c.tp, c.fp, c.fn_);
        let _ = writeln!(
            out,
            "{name:<28} {p:>9.6} {r:>9.6} {f:>9.6} {:>6} {:>6} {:>6}",
            c.tp, c.fp, c.fn_
        );
    }
    let macro_score = macro_f1(counts).unwrap_or(0.0);
    let _ = writeln!(out, "{:<28} {:>9} {:>9} {macro_score:>9.6}", "macro", "", "");
    if let Some((macro_f, micro_f)) = extra {
        debug_assert!((macro_f - macro_score).abs() < 1e-12);
        let _ = writeln!(out, "{:<28} {:>9} {:>9} {micro_f:>9.6}", "micro", "", "");
    }
}

fn csv_section(out: &mut String, section: &str, class_names: &[String], counts: &ClasswiseCounts) {
    for (name, c) in class_names.iter().zip(&counts.per_class) {
        let (p, r, f) = f1(c.tp, c.fp, c.fn_);
        let _ = writeln!(
            out,
            "{section},{name},{p:.6},{r:.6},{f:.6},{},{},{}",
            c.tp, c.fp, c.fn_
        );
    }
    let macro_score = macro_f1(counts).unwrap_or(0.0);
    let _ = writeln!(out, "{section},macro,,,{macro_score:.6},,,");
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let class_names = load_classes(&args.classes)?;
    let c = class_names.len();
    let ref_strong = load_events_csv(&args.ref_strong, &class_names)?;
    let ref_weak = load_weak_csv(&args.ref_weak, &class_names)?;
    let pred_events = load_events_csv(&args.pred_events, &class_names)?;
    let pred_clips = load_weak_csv(&args.pred_clips, &class_names)?;

    let tagging = clip_f1(&ref_weak, &pred_clips, c)?;
    let collars = CollarConfig {
        onset_collar: args.onset_collar,
        offset_collar_abs: args.offset_collar,
        offset_collar_rel: args.offset_collar_rel,
    };
    let event_counts = match_events(&ref_strong, &pred_events, &collars, c)?;

    let mut out = String::new();
    report_section(
        &mut out,
        "audio tagging (clip-level)",
        &class_names,
        &tagging.counts,
        Some((tagging.macro_f1, tagging.micro_f1)),
    );
    let _ = writeln!(out);
    report_section(
        &mut out,
        &format!(
            "event detection (onset collar {:.3} s, offset collar max({:.3} s, {:.0}% of length))",
            collars.onset_collar,
            collars.offset_collar_abs,
            collars.offset_collar_rel * 100.0
        ),
        &class_names,
        &event_counts,
        None,
    );
    print!("{out}");

    if let Some(csv_path) = args.csv {
        let mut csv = String::from("section,class,precision,recall,f1,tp,fp,fn\n");
        csv_section(&mut csv, "tagging", &class_names, &tagging.counts);
        let _ = writeln!(csv, "tagging,micro,,,{:.6},,,", tagging.micro_f1);
        csv_section(&mut csv, "events", &class_names, &event_counts);
        std::fs::write(&csv_path, csv)?;
    }
    Ok(())
}
