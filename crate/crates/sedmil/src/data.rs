//! Dataset ingestion and synthesis.
//!
//! A dataset directory holds `classes.txt` (one class name per line,
//! index = line number), one manifest CSV per split
//! (`clip_id,feature_path,classA;classB`, paths relative to the
//! directory), optional strong-label CSVs
//! (`clip_id,class,onset_s,offset_s`, 6-decimal seconds) and the
//! feature files themselves.
//!
//! Feature files are plain text: a `T d` header line, then T lines of
//! d space-separated decimals in shortest round-trip representation.
//!
//! The synthetic generator builds desk-scale bags with the pathologies
//! the detection pipeline has to survive: class imbalance, forced
//! co-occurrence and overlapping events (overlapping cluster draws are
//! summed). Everything it emits is deterministic under the generator seed.
//!
//! Log-mel extraction from raw audio is out of scope; features are
//! consumed precomputed. The reference extraction the file format was
//! designed around: 64 mel bands at 44.1 kHz, 40 ms frames with 50%
//! overlap (FFT 2048), 500 frames per 10 s clip, hop 0.02 s.

use crate::numerics::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Frame hop of the reference front end, seconds.
pub const DEFAULT_FRAME_HOP: f64 = 0.02;
/// Mel bands of the reference front end.
pub const DEFAULT_BANDS: usize = 64;
/// Frames per 10 s clip in the reference front end.
pub const DEFAULT_FRAMES: usize = 500;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{path}: expected {expected} rows, found {found}")]
    RowCountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: non-finite value")]
    NonFinite { path: PathBuf, line: usize },
    #[error("unknown class name {name:?}")]
    UnknownClass { name: String },
    #[error("clip {clip_id}: strong event class {class} missing from weak labels")]
    StrongOutsideWeak { clip_id: String, class: String },
    #[error("clip {clip_id}: feature file {path} does not resolve")]
    MissingFeatureFile { clip_id: String, path: PathBuf },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("class {name} has no events")]
    NoEventsForClass { name: String },
    #[error("event {clip_id}/{class}: onset {onset} >= offset {offset}")]
    MalformedEvent {
        clip_id: String,
        class: usize,
        onset: f64,
        offset: f64,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// A strong annotation or prediction: one event interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub clip_id: String,
    pub class: usize,
    pub onset: f64,
    pub offset: f64,
}

/// Events ordered by (clip, class, onset).
pub type EventList = Vec<Event>;

/// Sorts an event list into canonical (clip, class, onset) order.
pub fn sort_events(events: &mut EventList) {
    events.sort_by(|a, b| {
        (&a.clip_id, a.class)
            .cmp(&(&b.clip_id, b.class))
            .then(a.onset.total_cmp(&b.onset))
    });
}

/// One clip's T×F matrix of frame feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    pub clip_id: String,
    pub frames: Tensor,
    pub frame_hop: f64,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_bands(&self) -> usize {
        self.frames.cols()
    }
}

/// Writes a feature matrix in the text format.
pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<(), DataError> {
    let mut out = String::new();
    let (t, d) = (seq.frames.rows(), seq.frames.cols());
    let _ = writeln!(out, "{t} {d}");
    for r in 0..t {
        let row = seq.frames.row(r);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Loads a feature file with the default frame hop.
pub fn load_features(path: &Path) -> Result<FeatureSequence, DataError> {
    load_features_with_hop(path, DEFAULT_FRAME_HOP)
}

pub fn load_features_with_hop(path: &Path, frame_hop: f64) -> Result<FeatureSequence, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Parse {
        path: path.to_path_buf(),
        line: 1,
        detail: "empty file".into(),
    })?;
    let mut parts = header.split(' ');
    let parse_dim = |s: Option<&str>| -> Option<usize> { s.and_then(|v| v.parse().ok()) };
    let (t, d) = match (parse_dim(parts.next()), parse_dim(parts.next()), parts.next()) {
        (Some(t), Some(d), None) => (t, d),
        _ => {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: 1,
                detail: format!("bad header {header:?}, expected \"T d\""),
            })
        }
    };
    let mut data = Vec::with_capacity(t * d);
    let mut rows = 0usize;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        rows += 1;
        if rows > t {
            return Err(DataError::RowCountMismatch {
                path: path.to_path_buf(),
                expected: t,
                found: rows,
            });
        }
        let mut count = 0usize;
        for tok in line.split(' ') {
            let v: f64 = tok.parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                detail: format!("bad value {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite { path: path.to_path_buf(), line: idx + 1 });
            }
            data.push(v);
            count += 1;
        }
        if count != d {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                detail: format!("expected {d} values, found {count}"),
            });
        }
    }
    if rows != t {
        return Err(DataError::RowCountMismatch {
            path: path.to_path_buf(),
            expected: t,
            found: rows,
        });
    }
    let frames = Tensor::new(vec![t, d], data).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: 1,
        detail: e.to_string(),
    })?;
    let clip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureSequence { clip_id, frames, frame_hop })
}

/// Writes `classes.txt`.
pub fn write_classes(path: &Path, names: &[String]) -> Result<(), DataError> {
    let mut out = String::new();
    for name in names {
        let _ = writeln!(out, "{name}");
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_classes(path: &Path) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let names: Vec<String> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect();
    for (i, name) in names.iter().enumerate() {
        if name.contains(',') || name.contains(';') {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("class name {name:?} may not contain ',' or ';'"),
            });
        }
    }
    Ok(names)
}

fn class_index(names: &[String], name: &str) -> Result<usize, DataError> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| DataError::UnknownClass { name: name.to_string() })
}

fn format_weak(names: &[String], classes: &[usize]) -> String {
    classes
        .iter()
        .map(|&c| names[c].as_str())
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_weak(names: &[String], field: &str) -> Result<Vec<usize>, DataError> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field.split(';').map(|n| class_index(names, n)).collect()
}

/// Writes a weak-label CSV: `clip_id,classA;classB`.
pub fn write_weak_csv(
    path: &Path,
    labels: &[(String, Vec<usize>)],
    names: &[String],
) -> Result<(), DataError> {
    let mut out = String::new();
    for (clip, classes) in labels {
        let _ = writeln!(out, "{clip},{}", format_weak(names, classes));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_weak_csv(
    path: &Path,
    names: &[String],
) -> Result<Vec<(String, Vec<usize>)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (clip, field) = line.split_once(',').ok_or_else(|| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: "expected clip_id,classes".into(),
        })?;
        out.push((clip.to_string(), parse_weak(names, field)?));
    }
    Ok(out)
}

/// Writes a strong-label / event CSV: `clip_id,class,onset_s,offset_s`
/// with 6-decimal fixed-point seconds.
pub fn write_events_csv(
    path: &Path,
    events: &EventList,
    names: &[String],
) -> Result<(), DataError> {
    let mut sorted = events.clone();
    sort_events(&mut sorted);
    let mut out = String::new();
    for e in &sorted {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6}",
            e.clip_id, names[e.class], e.onset, e.offset
        );
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_events_csv(path: &Path, names: &[String]) -> Result<EventList, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: "expected clip_id,class,onset_s,offset_s".into(),
            });
        }
        let class = class_index(names, fields[1])?;
        let onset: f64 = fields[2].parse().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: format!("bad onset {:?}", fields[2]),
        })?;
        let offset: f64 = fields[3].parse().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: format!("bad offset {:?}", fields[3]),
        })?;
        events.push(Event {
            clip_id: fields[0].to_string(),
            class,
            onset,
            offset,
        });
    }
    sort_events(&mut events);
    Ok(events)
}

/// One manifest row.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub feature_path: PathBuf,
    pub weak: Vec<usize>,
    pub strong: Option<Vec<Event>>,
}

/// A split's manifest: entries plus the class universe.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub split: String,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Weak label sets as (clip_id, class indices).
    pub fn weak_labels(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| (e.clip_id.clone(), e.weak.clone()))
            .collect()
    }

    /// All strong events across entries, canonical order.
    pub fn strong_events(&self) -> EventList {
        let mut events: EventList = self
            .entries
            .iter()
            .flat_map(|e| e.strong.clone().unwrap_or_default())
            .collect();
        sort_events(&mut events);
        events
    }
}

/// Loads `<split>.csv` (+ optional `<split>_strong.csv`) from a dataset
/// directory and checks referential integrity.
pub fn load_manifest(dir: &Path, split: &str) -> Result<DatasetManifest, DataError> {
    let class_names = load_classes(&dir.join("classes.txt"))?;
    let manifest_path = dir.join(format!("{split}.csv"));
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(DataError::Parse {
                path: manifest_path.clone(),
                line: i + 1,
                detail: "expected clip_id,feature_path,classes".into(),
            });
        }
        let feature_path = PathBuf::from(fields[1]);
        if !dir.join(&feature_path).is_file() {
            return Err(DataError::MissingFeatureFile {
                clip_id: fields[0].to_string(),
                path: feature_path,
            });
        }
        entries.push(ManifestEntry {
            clip_id: fields[0].to_string(),
            feature_path,
            weak: parse_weak(&class_names, fields[2])?,
            strong: None,
        });
    }

    let strong_path = dir.join(format!("{split}_strong.csv"));
    if strong_path.is_file() {
        let events = load_events_csv(&strong_path, &class_names)?;
        let mut by_clip: BTreeMap<String, Vec<Event>> = BTreeMap::new();
        for e in events {
            by_clip.entry(e.clip_id.clone()).or_default().push(e);
        }
        for entry in &mut entries {
            if let Some(evts) = by_clip.remove(&entry.clip_id) {
                for e in &evts {
                    if !entry.weak.contains(&e.class) {
                        return Err(DataError::StrongOutsideWeak {
                            clip_id: entry.clip_id.clone(),
                            class: class_names[e.class].clone(),
                        });
                    }
                }
                entry.strong = Some(evts);
            }
        }
    }

    Ok(DatasetManifest {
        base_dir: dir.to_path_buf(),
        split: split.to_string(),
        class_names,
        entries,
    })
}

/// A split loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: String,
    pub class_names: Vec<String>,
    pub clips: Vec<LoadedClip>,
}

#[derive(Clone, Debug)]
pub struct LoadedClip {
    pub clip_id: String,
    pub features: Tensor,
    pub frame_hop: f64,
    pub weak: Vec<bool>,
    pub strong: Option<Vec<Event>>,
}

impl Dataset {
    /// Loads every feature file referenced by a manifest.
    pub fn load(manifest: &DatasetManifest, frame_hop: f64) -> Result<Self, DataError> {
        let c = manifest.num_classes();
        let mut clips = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let seq =
                load_features_with_hop(&manifest.base_dir.join(&entry.feature_path), frame_hop)?;
            let mut weak = vec![false; c];
            for &cl in &entry.weak {
                weak[cl] = true;
            }
            clips.push(LoadedClip {
                clip_id: entry.clip_id.clone(),
                features: seq.frames,
                frame_hop,
                weak,
                strong: entry.strong.clone(),
            });
        }
        Ok(Self {
            split: manifest.split.clone(),
            class_names: manifest.class_names.clone(),
            clips,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn weak_label_sets(&self) -> Vec<(String, Vec<usize>)> {
        self.clips
            .iter()
            .map(|c| {
                let classes = c
                    .weak
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p)
                    .map(|(i, _)| i)
                    .collect();
                (c.clip_id.clone(), classes)
            })
            .collect()
    }
}

/// Mean event length per class, seconds. Every class must have at
/// least one event.
pub fn class_durations(events: &[Event], class_names: &[String]) -> Result<Vec<f64>, DataError> {
    let c = class_names.len();
    let mut sums = vec![0.0f64; c];
    let mut counts = vec![0usize; c];
    for e in events {
        if e.onset >= e.offset {
            return Err(DataError::MalformedEvent {
                clip_id: e.clip_id.clone(),
                class: e.class,
                onset: e.onset,
                offset: e.offset,
            });
        }
        sums[e.class] += e.offset - e.onset;
        counts[e.class] += 1;
    }
    for (i, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(DataError::NoEventsForClass { name: class_names[i].clone() });
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect())
}

/// Gaussian cluster: a mean vector plus isotropic spread.
#[derive(Clone, Debug)]
pub struct ClusterSpec {
    pub mean: Vec<f64>,
    pub spread: f64,
}

/// Per-class event duration distribution, seconds.
#[derive(Clone, Debug)]
pub struct DurationSpec {
    pub mean_s: f64,
    pub jitter_s: f64,
}

/// One class-combination row: which classes co-occur, and how many
/// clips per split.
#[derive(Clone, Debug)]
pub struct ComboSpec {
    pub classes: Vec<usize>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Synthetic bag generator specification.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub frames: usize,
    pub frame_hop: f64,
    pub combos: Vec<ComboSpec>,
    pub durations: Vec<DurationSpec>,
    pub clusters: Vec<ClusterSpec>,
    pub background: ClusterSpec,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        let c = self.class_names.len();
        let bad = |msg: String| Err(DataError::InvalidSpec(msg));
        if c == 0 {
            return bad("no classes".into());
        }
        if self.feature_dim == 0 || self.frames == 0 || self.frame_hop <= 0.0 {
            return bad("dim, frames and hop must be positive".into());
        }
        if self.durations.len() != c || self.clusters.len() != c {
            return bad(format!(
                "need one duration and one cluster per class ({c})"
            ));
        }
        let clip_len = self.frames as f64 * self.frame_hop;
        for (i, d) in self.durations.iter().enumerate() {
            if d.mean_s <= 0.0 || d.jitter_s < 0.0 {
                return bad(format!("class {i}: non-positive duration", ));
            }
            if d.mean_s + d.jitter_s > clip_len + 1e-12 {
                return bad(format!(
                    "class {i}: event duration up to {} s exceeds clip length {} s",
                    d.mean_s + d.jitter_s,
                    clip_len
                ));
            }
        }
        for (i, cl) in self.clusters.iter().enumerate() {
            if cl.mean.len() != self.feature_dim {
                return bad(format!("class {i}: cluster mean has wrong dimension"));
            }
            if cl.spread < 0.0 {
                return bad(format!("class {i}: negative spread"));
            }
        }
        if self.background.mean.len() != self.feature_dim {
            return bad("background mean has wrong dimension".into());
        }
        for i in 0..c {
            for j in (i + 1)..c {
                if self.clusters[i].mean == self.clusters[j].mean {
                    return bad(format!("classes {i} and {j} share a cluster mean"));
                }
            }
        }
        for combo in &self.combos {
            for &cl in &combo.classes {
                if cl >= c {
                    return bad(format!("combo references class {cl} out of range"));
                }
            }
        }
        Ok(())
    }
}

/// Manifests of the three generated splits.
#[derive(Debug)]
pub struct GeneratedDataset {
    pub train: DatasetManifest,
    pub validation: DatasetManifest,
    pub test: DatasetManifest,
}

/// Generates a synthetic dataset on disk: features, manifests, weak
/// and strong label CSVs for train/validation/test.
pub fn generate(spec: &SyntheticSpec, dir: &Path) -> Result<GeneratedDataset, DataError> {
    spec.validate()?;
    fs::create_dir_all(dir.join("features")).map_err(io_err(dir))?;
    write_classes(&dir.join("classes.txt"), &spec.class_names)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (t, d, hop) = (spec.frames, spec.feature_dim, spec.frame_hop);
    let mut manifests = Vec::new();

    for split in ["train", "validation", "test"] {
        let mut entries = Vec::new();
        let mut weak_rows = Vec::new();
        let mut strong_rows: EventList = Vec::new();
        let mut idx = 0usize;
        for combo in &spec.combos {
            let count = match split {
                "train" => combo.train,
                "validation" => combo.val,
                _ => combo.test,
            };
            for _ in 0..count {
                let clip_id = format!("{split}_{idx:05}");
                idx += 1;
                let mut frames = vec![0.0f64; t * d];
                for (fi, value) in frames.iter_mut().enumerate() {
                    let band = fi % d;
                    *value = spec.background.mean[band]
                        + normal.sample(&mut rng) * spec.background.spread;
                }
                let mut events = Vec::new();
                for &class in &combo.classes {
                    let dur = &spec.durations[class];
                    let dur_s = if dur.jitter_s > 0.0 {
                        dur.mean_s + rng.random_range(-dur.jitter_s..=dur.jitter_s)
                    } else {
                        dur.mean_s
                    };
                    let dur_frames = ((dur_s / hop).round() as usize).clamp(1, t);
                    let onset_frame = rng.random_range(0..=(t - dur_frames));
                    let cluster = &spec.clusters[class];
                    for ti in onset_frame..onset_frame + dur_frames {
                        for band in 0..d {
                            frames[ti * d + band] +=
                                cluster.mean[band] + normal.sample(&mut rng) * cluster.spread;
                        }
                    }
                    events.push(Event {
                        clip_id: clip_id.clone(),
                        class,
                        onset: onset_frame as f64 * hop,
                        offset: (onset_frame + dur_frames) as f64 * hop,
                    });
                }
                if spec.noise > 0.0 {
                    for value in &mut frames {
                        *value += normal.sample(&mut rng) * spec.noise;
                    }
                }
                let tensor = Tensor::new(vec![t, d], frames).map_err(|e| {
                    DataError::InvalidSpec(format!("generated non-finite features: {e}"))
                })?;
                let rel = PathBuf::from(format!("features/{clip_id}.txt"));
                write_features(
                    &dir.join(&rel),
                    &FeatureSequence {
                        clip_id: clip_id.clone(),
                        frames: tensor,
                        frame_hop: hop,
                    },
                )?;
                weak_rows.push((clip_id.clone(), combo.classes.clone()));
                strong_rows.extend(events.iter().cloned());
                entries.push(ManifestEntry {
                    clip_id,
                    feature_path: rel,
                    weak: combo.classes.clone(),
                    strong: Some(events),
                });
            }
        }

        let mut manifest_text = String::new();
        for entry in &entries {
            let _ = writeln!(
                manifest_text,
                "{},{},{}",
                entry.clip_id,
                entry.feature_path.display(),
                format_weak(&spec.class_names, &entry.weak)
            );
        }
        let manifest_path = dir.join(format!("{split}.csv"));
        fs::write(&manifest_path, manifest_text).map_err(io_err(&manifest_path))?;
        write_weak_csv(
            &dir.join(format!("{split}_weak.csv")),
            &weak_rows,
            &spec.class_names,
        )?;
        write_events_csv(
            &dir.join(format!("{split}_strong.csv")),
            &strong_rows,
            &spec.class_names,
        )?;
        manifests.push(DatasetManifest {
            base_dir: dir.to_path_buf(),
            split: split.to_string(),
            class_names: spec.class_names.clone(),
            entries,
        });
    }

    let test = manifests.pop().expect("three splits");
    let validation = manifests.pop().expect("three splits");
    let train = manifests.pop().expect("three splits");
    Ok(GeneratedDataset { train, validation, test })
}

/// Parses the line-based synthetic spec format used by the CLI.
///
/// ```text
/// classes A,B,C
/// dim 16
/// frames 100
/// hop 0.02
/// seed 7
/// noise 0.05
/// background spread=0.3 mean=0:-0.5,1:-0.5
/// cluster A spread=0.4 mean=0:2.5,1:0.8
/// duration A mean=0.5 jitter=0.2
/// combo A train=30 val=8 test=8
/// combo A+B train=10 val=3 test=3
/// ```
///
/// Mean vectors are sparse `coord:value` lists over the feature
/// dimension; unlisted coordinates are zero.
pub fn parse_synthetic_spec(text: &str, path: &Path) -> Result<SyntheticSpec, DataError> {
    let perr = |line: usize, detail: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut class_names: Vec<String> = Vec::new();
    let mut dim = 0usize;
    let mut frames = 0usize;
    let mut hop = DEFAULT_FRAME_HOP;
    let mut seed = 0u64;
    let mut noise = 0.0f64;
    let mut background: Option<(Vec<(usize, f64)>, f64)> = None;
    let mut clusters: BTreeMap<String, (Vec<(usize, f64)>, f64)> = BTreeMap::new();
    let mut durations: BTreeMap<String, DurationSpec> = BTreeMap::new();
    let mut combos: Vec<(Vec<String>, usize, usize, usize)> = Vec::new();

    let parse_kv = |tok: &str, line: usize| -> Result<(String, String), DataError> {
        tok.split_once('=')
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .ok_or_else(|| perr(line, format!("expected key=value, got {tok:?}")))
    };
    let parse_sparse = |s: &str, line: usize| -> Result<Vec<(usize, f64)>, DataError> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|pair| {
                let (i, v) = pair
                    .split_once(':')
                    .ok_or_else(|| perr(line, format!("expected coord:value, got {pair:?}")))?;
                let i: usize = i
                    .parse()
                    .map_err(|_| perr(line, format!("bad coordinate {i:?}")))?;
                let v: f64 = v
                    .parse()
                    .map_err(|_| perr(line, format!("bad value {v:?}")))?;
                Ok((i, v))
            })
            .collect()
    };

    for (li, raw) in text.lines().enumerate() {
        let line_no = li + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let key = toks.next().unwrap();
        match key {
            "classes" => {
                let v = toks
                    .next()
                    .ok_or_else(|| perr(line_no, "classes needs a list".into()))?;
                class_names = v.split(',').map(|s| s.to_string()).collect();
            }
            "dim" | "frames" | "seed" => {
                let v = toks
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .ok_or_else(|| perr(line_no, format!("{key} needs an integer")))?;
                match key {
                    "dim" => dim = v as usize,
                    "frames" => frames = v as usize,
                    _ => seed = v,
                }
            }
            "hop" | "noise" => {
                let v = toks
                    .next()
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| perr(line_no, format!("{key} needs a number")))?;
                if key == "hop" {
                    hop = v;
                } else {
                    noise = v;
                }
            }
            "background" | "cluster" => {
                let name = if key == "cluster" {
                    Some(
                        toks.next()
                            .ok_or_else(|| perr(line_no, "cluster needs a class name".into()))?
                            .to_string(),
                    )
                } else {
                    None
                };
                let mut mean = Vec::new();
                let mut spread = 0.0;
                for tok in toks {
                    let (k, v) = parse_kv(tok, line_no)?;
                    match k.as_str() {
                        "spread" => {
                            spread = v
                                .parse()
                                .map_err(|_| perr(line_no, format!("bad spread {v:?}")))?
                        }
                        "mean" => mean = parse_sparse(&v, line_no)?,
                        other => return Err(perr(line_no, format!("unknown key {other:?}"))),
                    }
                }
                match name {
                    Some(n) => {
                        clusters.insert(n, (mean, spread));
                    }
                    None => background = Some((mean, spread)),
                }
            }
            "duration" => {
                let name = toks
                    .next()
                    .ok_or_else(|| perr(line_no, "duration needs a class name".into()))?
                    .to_string();
                let mut mean_s = 0.0;
                let mut jitter_s = 0.0;
                for tok in toks {
                    let (k, v) = parse_kv(tok, line_no)?;
                    let fv: f64 = v
                        .parse()
                        .map_err(|_| perr(line_no, format!("bad number {v:?}")))?;
                    match k.as_str() {
                        "mean" => mean_s = fv,
                        "jitter" => jitter_s = fv,
                        other => return Err(perr(line_no, format!("unknown key {other:?}"))),
                    }
                }
                durations.insert(name, DurationSpec { mean_s, jitter_s });
            }
            "combo" => {
                let subset = toks
                    .next()
                    .ok_or_else(|| perr(line_no, "combo needs a class subset".into()))?;
                let classes: Vec<String> = if subset == "-" {
                    Vec::new()
                } else {
                    subset.split('+').map(|s| s.to_string()).collect()
                };
                let (mut train, mut val, mut test) = (0usize, 0usize, 0usize);
                for tok in toks {
                    let (k, v) = parse_kv(tok, line_no)?;
                    let n: usize = v
                        .parse()
                        .map_err(|_| perr(line_no, format!("bad count {v:?}")))?;
                    match k.as_str() {
                        "train" => train = n,
                        "val" => val = n,
                        "test" => test = n,
                        other => return Err(perr(line_no, format!("unknown key {other:?}"))),
                    }
                }
                combos.push((classes, train, val, test));
            }
            other => return Err(perr(line_no, format!("unknown directive {other:?}"))),
        }
    }

    if class_names.is_empty() {
        return Err(perr(0, "missing classes directive".into()));
    }
    let densify = |sparse: &[(usize, f64)]| -> Result<Vec<f64>, DataError> {
        let mut mean = vec![0.0; dim];
        for &(i, v) in sparse {
            if i >= dim {
                return Err(DataError::InvalidSpec(format!(
                    "mean coordinate {i} out of range for dim {dim}"
                )));
            }
            mean[i] = v;
        }
        Ok(mean)
    };
    let lookup = |name: &str| -> Result<usize, DataError> {
        class_index(&class_names, name)
    };

    let mut cluster_specs = Vec::with_capacity(class_names.len());
    let mut duration_specs = Vec::with_capacity(class_names.len());
    for name in &class_names {
        let (mean, spread) = clusters
            .get(name)
            .ok_or_else(|| DataError::InvalidSpec(format!("missing cluster for class {name}")))?;
        cluster_specs.push(ClusterSpec { mean: densify(mean)?, spread: *spread });
        let dur = durations
            .get(name)
            .ok_or_else(|| DataError::InvalidSpec(format!("missing duration for class {name}")))?;
        duration_specs.push(dur.clone());
    }
    let (bg_mean, bg_spread) = background.unwrap_or((Vec::new(), 0.0));
    let combo_specs = combos
        .into_iter()
        .map(|(names, train, val, test)| {
            let classes = names
                .iter()
                .map(|n| lookup(n))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ComboSpec { classes, train, val, test })
        })
        .collect::<Result<Vec<_>, DataError>>()?;

    Ok(SyntheticSpec {
        class_names,
        feature_dim: dim,
        frames,
        frame_hop: hop,
        combos: combo_specs,
        durations: duration_specs,
        clusters: cluster_specs,
        background: ClusterSpec { mean: densify(&bg_mean)?, spread: bg_spread },
        noise,
        seed,
    })
}
