//! Dataset manifests, sequence loading with pixel normalization, and the
//! synthetic micro-expression generator.
//!
//! A dataset is a `manifest.jsonl` file plus one MERT frames file per
//! sequence. The first manifest line is a header object carrying the class
//! list and the normalization rule; every following line is one record:
//!
//! ```text
//! {"id": "...", "frames_path": "frames/x.mert", "subject": "s00",
//!  "emotion": "happiness", "aus": [6, 12], "num_frames": 8}
//! ```
//!
//! Frame files store raw pixel values in `[0, 255]`; loading maps them to
//! `[-1, 1]` via `x/127.5 - 1`.
//!
//! The generator is a stand-in for lab-recorded clips: every sequence is
//! baseline noise plus, for each AU of its class, a raised-cosine temporal
//! intensity bump (onset, apex, offset) confined to that AU's facial patch.
//! Annotations drop at most one AU per sequence at random so co-occurrence
//! statistics stay informative rather than degenerate.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AdjacencyMatrix, AuVocabulary, GraphError};
use crate::io::{read_container, write_container, ContainerError};
use crate::tensor::{Tensor, TensorError};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const NORMALIZATION_RULE: &str = "x/127.5-1";

/// Raw pixel in `[0,255]` to model input in `[-1,1]`.
pub fn normalize_pixel(x: f64) -> f64 {
    x / 127.5 - 1.0
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest parse error on line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("manifest is missing its header line (class_names)")]
    MissingHeader,
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}`: emotion `{emotion}` is not in the class list {classes:?}")]
    UnknownEmotion {
        id: String,
        emotion: String,
        classes: Vec<String>,
    },
    #[error("record `{0}`: AU set is empty")]
    EmptyAus(String),
    #[error("record `{id}`: frames file has shape {got:?}, expected {expected:?}")]
    FrameShapeMismatch {
        id: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("record `{id}`: frames file holds no `frames` entry")]
    MissingFramesEntry { id: String },
    #[error("synthetic config invalid: {0}")]
    BadSyntheticConfig(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ── Manifest ────────────────────────────────────────────────────────────

/// One labeled sequence. `frames_path` is resolved against the manifest
/// directory at load time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub frames_path: PathBuf,
    pub subject: String,
    pub emotion: String,
    pub aus: BTreeSet<u32>,
    pub num_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    version: u32,
    class_names: Vec<String>,
    normalization: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub records: Vec<SequenceRecord>,
    /// Directory the manifest was loaded from.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.subject.as_str()).collect()
    }

    pub fn class_index(&self, emotion: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == emotion)
    }

    pub fn record(&self, id: &str) -> Option<&SequenceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// AU annotation sets in record order, e.g. for adjacency building.
    pub fn annotations(&self) -> Vec<BTreeSet<u32>> {
        self.records.iter().map(|r| r.aus.clone()).collect()
    }
}

/// Parses and validates `manifest.jsonl`; all record invariants are checked
/// eagerly so downstream code can trust the manifest.
pub fn load_manifest<P: AsRef<Path>>(path: P) -> Result<DatasetManifest, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut lines = reader.lines().enumerate();
    let header: ManifestHeader = match lines.next() {
        None => return Err(DataError::MissingHeader),
        Some((i, line)) => {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|source| {
                if line.contains("\"id\"") {
                    DataError::MissingHeader
                } else {
                    DataError::Parse {
                        line: i + 1,
                        source,
                    }
                }
            })?
        }
    };
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: SequenceRecord = serde_json::from_str(&line).map_err(|source| {
            DataError::Parse {
                line: i + 1,
                source,
            }
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId(record.id));
        }
        if !header.class_names.contains(&record.emotion) {
            return Err(DataError::UnknownEmotion {
                id: record.id,
                emotion: record.emotion,
                classes: header.class_names.clone(),
            });
        }
        if record.aus.is_empty() {
            return Err(DataError::EmptyAus(record.id));
        }
        if record.frames_path.is_relative() {
            record.frames_path = root.join(&record.frames_path);
        }
        records.push(record);
    }
    Ok(DatasetManifest {
        class_names: header.class_names,
        records,
        root,
    })
}

/// Loads a record's frames and normalizes raw pixels into `[-1, 1]`.
pub fn load_sequence(record: &SequenceRecord) -> Result<Tensor, DataError> {
    let entries = read_container(&record.frames_path)?;
    let (_, raw) = entries
        .into_iter()
        .find(|(name, _)| name == "frames")
        .ok_or_else(|| DataError::MissingFramesEntry {
            id: record.id.clone(),
        })?;
    let shape = raw.shape().to_vec();
    if shape.len() != 4 || shape[1] != record.num_frames {
        return Err(DataError::FrameShapeMismatch {
            id: record.id.clone(),
            expected: vec![shape.first().copied().unwrap_or(0), record.num_frames, 112, 112],
            got: shape,
        });
    }
    let data: Vec<f64> = raw.data().iter().map(|&x| normalize_pixel(x)).collect();
    Ok(Tensor::new(shape, data)?)
}

// ── Synthetic generator ─────────────────────────────────────────────────

/// Square facial patch, `size`×`size` pixels at (row, col).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub n_classes: usize,
    pub sequences_per_class_per_subject: usize,
    /// Frames per sequence.
    pub t: usize,
    pub channels: usize,
    /// Gaussian pixel noise (raw [0,255] scale) around the gray baseline.
    pub noise_std: f64,
    /// Class index -> the AU set whose regions light up.
    pub au_map: BTreeMap<usize, BTreeSet<u32>>,
    /// AU id -> facial patch.
    pub region_map: BTreeMap<u32, Region>,
    /// Peak intensity added inside a patch at the apex frame.
    pub bump_amplitude: f64,
    pub seed: u64,
}

/// CASME-style emotion names for small class counts.
pub fn default_class_names(n_classes: usize) -> Vec<String> {
    const NAMES: [&str; 7] = [
        "happiness",
        "disgust",
        "surprise",
        "repression",
        "others",
        "fear",
        "sadness",
    ];
    (0..n_classes)
        .map(|i| {
            NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class{i}"))
        })
        .collect()
}

/// FACS-flavored default AU sets per class (some AUs shared across classes
/// so the co-occurrence graph is connected) and their facial patches.
fn default_au_map(n_classes: usize) -> BTreeMap<usize, BTreeSet<u32>> {
    const SETS: [&[u32]; 7] = [
        &[6, 12],     // happiness: cheek raiser + lip corner puller
        &[4, 9],      // disgust: brow lowerer + nose wrinkler
        &[1, 2, 26],  // surprise: inner/outer brow raiser + jaw drop
        &[4, 14],     // repression: brow lowerer + dimpler
        &[1, 4],      // others
        &[1, 15],
        &[20, 26],
    ];
    (0..n_classes)
        .map(|c| {
            let set: BTreeSet<u32> = SETS
                .get(c)
                .map(|s| s.iter().copied().collect())
                .unwrap_or_else(|| [100 + c as u32, 120 + c as u32].into_iter().collect());
            (c, set)
        })
        .collect()
}

fn default_region_map() -> BTreeMap<u32, Region> {
    // Disjoint 24x24 patches on a 28-pixel grid, roughly face-ordered:
    // brows up top, nose and cheeks mid-face, mouth and jaw below.
    [
        (1, Region { row: 2, col: 30, size: 24 }),
        (2, Region { row: 2, col: 2, size: 24 }),
        (4, Region { row: 2, col: 58, size: 24 }),
        (6, Region { row: 30, col: 2, size: 24 }),
        (9, Region { row: 30, col: 30, size: 24 }),
        (12, Region { row: 58, col: 2, size: 24 }),
        (14, Region { row: 58, col: 30, size: 24 }),
        (15, Region { row: 58, col: 58, size: 24 }),
        (20, Region { row: 86, col: 2, size: 24 }),
        (26, Region { row: 86, col: 30, size: 24 }),
    ]
    .into_iter()
    .collect()
}

impl SyntheticConfig {
    /// Sensible defaults for a desk-scale dataset; AU and region maps come
    /// from the built-in FACS-flavored tables.
    pub fn new(
        n_subjects: usize,
        n_classes: usize,
        sequences_per_class_per_subject: usize,
        t: usize,
        seed: u64,
    ) -> Self {
        let mut region_map = default_region_map();
        let au_map = default_au_map(n_classes);
        for set in au_map.values() {
            for &au in set {
                region_map.entry(au).or_insert(Region {
                    row: 50,
                    col: 50,
                    size: 12,
                });
            }
        }
        SyntheticConfig {
            n_subjects,
            n_classes,
            sequences_per_class_per_subject,
            t,
            channels: 1,
            noise_std: 8.0,
            au_map,
            region_map,
            bump_amplitude: 60.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::BadSyntheticConfig(msg));
        if self.n_subjects == 0 || self.n_classes == 0 || self.sequences_per_class_per_subject == 0
        {
            return bad("subject, class, and per-class counts must be positive".into());
        }
        if self.t == 0 || self.channels == 0 {
            return bad("t and channels must be positive".into());
        }
        if self.noise_std < 0.0 || self.bump_amplitude < 0.0 {
            return bad("noise_std and bump_amplitude must be non-negative".into());
        }
        let mut seen_sets: Vec<&BTreeSet<u32>> = Vec::new();
        for c in 0..self.n_classes {
            let set = match self.au_map.get(&c) {
                Some(s) if !s.is_empty() => s,
                _ => return bad(format!("class {c} has no AU set")),
            };
            if seen_sets.iter().any(|other| **other == *set) {
                return bad(format!("class {c} repeats another class's AU set"));
            }
            seen_sets.push(set);
            for &au in set {
                match self.region_map.get(&au) {
                    None => return bad(format!("AU {au} has no region")),
                    Some(r) => {
                        if r.size == 0 || r.row + r.size > 112 || r.col + r.size > 112 {
                            return bad(format!("AU {au} region falls outside 112x112"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Raised-cosine weight peaking at 1 on the apex frame and falling to 0
/// within `half_width` frames on both sides.
fn temporal_bump(frame: usize, apex: usize, half_width: usize) -> f64 {
    let d = frame.abs_diff(apex);
    if d > half_width {
        return 0.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * d as f64 / half_width as f64).cos())
}

/// AU-specific spatial texture inside a patch: a grating with an integer
/// number of periods, so its mean over the patch is exactly 1 and the
/// apex-frame patch mean still exceeds the surround by the bump amplitude.
/// Each AU's muscle gets its own orientation/frequency, which cheap
/// convolutional features can tell apart far better than bare location.
fn patch_texture(au: u32, size: usize) -> Vec<f64> {
    let m = 1 + (au as usize % 4);
    let n = 1 + (au as usize / 4 % 4);
    let mut texture = Vec::with_capacity(size * size);
    for dr in 0..size {
        for dc in 0..size {
            let phase =
                2.0 * std::f64::consts::PI * (m * dr + n * dc) as f64 / size as f64;
            texture.push(1.0 + 0.5 * phase.sin());
        }
    }
    texture
}

/// Writes MERT frame files and a manifest under `out_dir` and returns the
/// loaded manifest. Byte-identical output for identical configs.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, DataError> {
    config.validate()?;
    let frames_dir = out_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let class_names = default_class_names(config.n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = if config.noise_std > 0.0 {
        Some(Normal::new(0.0, config.noise_std).expect("validated std"))
    } else {
        None
    };
    let half_width = (config.t / 4).max(1);
    let baseline = 127.5;

    let mut manifest_lines: Vec<String> = Vec::new();
    let header = ManifestHeader {
        version: 1,
        class_names: class_names.clone(),
        normalization: NORMALIZATION_RULE.to_string(),
        generator: Some(serde_json::to_value(config).expect("config serializes")),
    };
    manifest_lines.push(serde_json::to_string(&header).expect("header serializes"));

    let plane = 112 * 112;
    for subject in 0..config.n_subjects {
        for class in 0..config.n_classes {
            let class_aus = &config.au_map[&class];
            for rep in 0..config.sequences_per_class_per_subject {
                let id = format!("s{subject:02}_c{class}_r{rep:02}");
                // Apex placed so onset and offset both fit when possible.
                let apex = if config.t > 2 * half_width {
                    rng.random_range(half_width..config.t - half_width)
                } else {
                    config.t / 2
                };
                // Annotation dropout: at most one AU, never emptying the set.
                let mut aus = class_aus.clone();
                if aus.len() >= 2 && rng.random_bool(0.5) {
                    let victim = *aus
                        .iter()
                        .nth(rng.random_range(0..aus.len()))
                        .expect("set is non-empty");
                    aus.remove(&victim);
                }
                let mut data = vec![baseline; config.channels * config.t * plane];
                if let Some(dist) = noise {
                    for v in &mut data {
                        *v += rng.sample(dist);
                    }
                }
                // Bumps light every class AU even when the annotation
                // dropped one; labels are noisy, muscles are not.
                for &au in class_aus {
                    let region = config.region_map[&au];
                    let texture = patch_texture(au, region.size);
                    for c in 0..config.channels {
                        for frame in 0..config.t {
                            let w = temporal_bump(frame, apex, half_width);
                            if w == 0.0 {
                                continue;
                            }
                            let add = config.bump_amplitude * w;
                            let base = (c * config.t + frame) * plane;
                            for dr in 0..region.size {
                                let row_start =
                                    base + (region.row + dr) * 112 + region.col;
                                let trow = &texture[dr * region.size..(dr + 1) * region.size];
                                for (v, tx) in
                                    data[row_start..row_start + region.size].iter_mut().zip(trow)
                                {
                                    *v += add * tx;
                                }
                            }
                        }
                    }
                }
                for v in &mut data {
                    *v = v.clamp(0.0, 255.0);
                }
                let tensor = Tensor::new(vec![config.channels, config.t, 112, 112], data)?;
                let file_rel = PathBuf::from("frames").join(format!("{id}.mert"));
                write_container(out_dir.join(&file_rel), &[("frames", &tensor)])?;
                let record = SequenceRecord {
                    id,
                    frames_path: file_rel,
                    subject: format!("subj{subject:02}"),
                    emotion: class_names[class].clone(),
                    aus,
                    num_frames: config.t,
                };
                manifest_lines.push(serde_json::to_string(&record).expect("record serializes"));
            }
        }
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let mut file = std::fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    for line in &manifest_lines {
        writeln!(file, "{line}").map_err(io_err(&manifest_path))?;
    }
    load_manifest(&manifest_path)
}

// ── Co-occurrence statistics ────────────────────────────────────────────

/// Occurrence and joint-occurrence counts over one set of annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    pub counts: Vec<u64>,
    /// Row-major n×n.
    pub pair_counts: Vec<u64>,
}

/// Per-class and overall AU co-occurrence summary for a manifest.
#[derive(Debug, Clone)]
pub struct CooccurrenceSummary {
    pub vocab: AuVocabulary,
    pub overall: CountTable,
    pub per_class: BTreeMap<String, CountTable>,
}

fn count_table(
    annotations: &[BTreeSet<u32>],
    vocab: &AuVocabulary,
) -> Result<CountTable, DataError> {
    let adj = AdjacencyMatrix::build(annotations, vocab)?;
    Ok(CountTable {
        counts: adj.counts().to_vec(),
        pair_counts: adj.pair_counts().to_vec(),
    })
}

/// Tabulates N_j and N_{i∩j} overall and per emotion class.
pub fn cooccurrence_stats(manifest: &DatasetManifest) -> Result<CooccurrenceSummary, DataError> {
    let annotations = manifest.annotations();
    let vocab = AuVocabulary::from_annotations(&annotations)?;
    let overall = count_table(&annotations, &vocab)?;
    let mut per_class = BTreeMap::new();
    for class in &manifest.class_names {
        let class_annotations: Vec<BTreeSet<u32>> = manifest
            .records
            .iter()
            .filter(|r| &r.emotion == class)
            .map(|r| r.aus.clone())
            .collect();
        if class_annotations.is_empty() {
            continue;
        }
        per_class.insert(class.clone(), count_table(&class_annotations, &vocab)?);
    }
    Ok(CooccurrenceSummary {
        vocab,
        overall,
        per_class,
    })
}
