//! Dataset model and on-disk format.
//!
//! A dataset directory holds:
//!
//! - `manifest.json`: shapes, domains and a CRC32 for every other file.
//! - `stories.jsonl`: one story per line.
//! - `behavior.jsonl`: one line per `(story_id, t)` with beliefs for every domain.
//! - `index.json`: `[story_id, t]` pairs giving the row order of every tensor.
//! - `layer_<l>.f32`: `N x q` little-endian `f32`, row-major, no header.
//!
//! Writing is canonical: the same [`Dataset`] always encodes to the same bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elicitation::{self, RATING_LEVELS};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STORIES_FILE: &str = "stories.jsonl";
pub const BEHAVIOR_FILE: &str = "behavior.jsonl";
pub const INDEX_FILE: &str = "index.json";

/// Tolerance for raw rating rows summing to one.
pub const SIMPLEX_TOL: f64 = 1e-6;
/// Tolerance between a stored belief and the aggregate of its raw distribution.
pub const AGGREGATION_TOL: f64 = 1e-9;

pub fn layer_file(layer: usize) -> String {
    format!("layer_{layer}.f32")
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {file} (line {line}): {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("no trajectories")]
    NoTrajectories,
    #[error("shape mismatch in {file}: {message}")]
    ShapeMismatch { file: String, message: String },
    #[error("checksum mismatch for {file}: manifest {expected}, computed {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("raw distribution for {story_id} t={t} {domain}/{concept} is not on the simplex: {message}")]
    NonSimplex {
        story_id: String,
        t: usize,
        domain: String,
        concept: String,
        message: String,
    },
    #[error("duplicate record ({0}, {1})")]
    DuplicateRecord(String, usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

/// A named, ordered set of concepts (e.g. `emotions`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptDomain {
    pub name: String,
    pub concepts: Vec<String>,
}

impl ConceptDomain {
    pub fn new<S: Into<String>>(name: impl Into<String>, concepts: impl IntoIterator<Item = S>) -> Result<Self> {
        let domain = ConceptDomain {
            name: name.into(),
            concepts: concepts.into_iter().map(Into::into).collect(),
        };
        domain.validate()?;
        Ok(domain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(invalid("domain name is empty"));
        }
        if self.concepts.len() < 2 {
            return Err(invalid(format!(
                "domain {} needs at least 2 concepts, has {}",
                self.name,
                self.concepts.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.concepts {
            if c.is_empty() || !seen.insert(c.as_str()) {
                return Err(invalid(format!("domain {}: empty or duplicate concept {c:?}", self.name)));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.concepts.len()
    }

    pub fn index_of(&self, concept: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == concept)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryRecord {
    pub story_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    pub sentences: Vec<String>,
}

impl StoryRecord {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// An 11-bin rating distribution row over the integers 0..=10.
pub type RawRatings = [f64; RATING_LEVELS];

/// Beliefs of one story for one domain: row `t-1` holds `y_t` in concept order.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefTrajectory {
    pub story_id: String,
    pub domain: String,
    pub values: Vec<Vec<f64>>,
    pub raw: Option<Vec<Vec<RawRatings>>>,
}

impl BeliefTrajectory {
    /// Number of sentences `T`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Belief for 1-based sentence `t` and concept index `c`.
    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t - 1][c]
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.values.is_empty() {
            return Err(invalid(format!("trajectory {} is empty", self.story_id)));
        }
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != k {
                return Err(invalid(format!(
                    "trajectory {} t={} has {} values, domain {} has {k} concepts",
                    self.story_id,
                    i + 1,
                    row.len(),
                    self.domain
                )));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
                return Err(invalid(format!(
                    "trajectory {} t={} value {v} outside [0,1]",
                    self.story_id,
                    i + 1
                )));
            }
        }
        if let Some(raw) = &self.raw {
            if raw.len() != self.values.len() {
                return Err(invalid(format!("trajectory {}: raw/values length mismatch", self.story_id)));
            }
            for (i, (raw_row, row)) in raw.iter().zip(&self.values).enumerate() {
                if raw_row.len() != k {
                    return Err(invalid(format!("trajectory {}: raw row width mismatch", self.story_id)));
                }
                for (c, (dist, &value)) in raw_row.iter().zip(row).enumerate() {
                    check_raw(dist, value).map_err(|message| DataError::NonSimplex {
                        story_id: self.story_id.clone(),
                        t: i + 1,
                        domain: self.domain.clone(),
                        concept: c.to_string(),
                        message,
                    })?;
                }
            }
        }
        Ok(())
    }
}

fn check_raw(dist: &RawRatings, value: f64) -> std::result::Result<(), String> {
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("negative or non-finite probability".into());
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("sums to {sum}"));
    }
    let agg = elicitation::aggregate(dist).map_err(|e| e.to_string())?;
    if (agg - value).abs() > AGGREGATION_TOL {
        return Err(format!("aggregates to {agg}, stored value {value}"));
    }
    Ok(())
}

/// Row key of an activation tensor: story and 1-based sentence index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(String, usize)", into = "(String, usize)")]
pub struct RecordKey {
    pub story_id: String,
    pub t: usize,
}

impl RecordKey {
    pub fn new(story_id: impl Into<String>, t: usize) -> Self {
        RecordKey {
            story_id: story_id.into(),
            t,
        }
    }
}

impl From<(String, usize)> for RecordKey {
    fn from((story_id, t): (String, usize)) -> Self {
        RecordKey { story_id, t }
    }
}

impl From<RecordKey> for (String, usize) {
    fn from(k: RecordKey) -> Self {
        (k.story_id, k.t)
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.story_id, self.t)
    }
}

/// Residual activations of one layer, one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    layer: usize,
    dim: usize,
    rows: Vec<f32>,
    index: Vec<RecordKey>,
}

impl ActivationDataset {
    pub fn new(layer: usize, dim: usize, rows: Vec<f32>, index: Vec<RecordKey>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("activation dimension is zero"));
        }
        if rows.len() != index.len() * dim {
            return Err(DataError::ShapeMismatch {
                file: layer_file(layer),
                message: format!(
                    "{} floats for {} index entries of dimension {dim}",
                    rows.len(),
                    index.len()
                ),
            });
        }
        let mut seen = HashSet::with_capacity(index.len());
        for key in &index {
            if !seen.insert(key) {
                return Err(DataError::DuplicateRecord(key.story_id.clone(), key.t));
            }
        }
        Ok(ActivationDataset {
            layer,
            dim,
            rows,
            index,
        })
    }

    pub fn from_rows(layer: usize, rows: &[Vec<f64>], index: Vec<RecordKey>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(invalid("ragged activation rows"));
        }
        let flat = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
        Self::new(layer, dim, flat, index)
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Hidden dimension `q`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &[RecordKey] {
        &self.index
    }

    pub fn raw(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn positions(&self) -> HashMap<&RecordKey, usize> {
        self.index.iter().enumerate().map(|(i, k)| (k, i)).collect()
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows.len() * 4);
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Marks a dataset captured under an activation intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeredRun {
    pub concept: String,
    pub alpha: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: String,
    pub model_id: String,
    pub hidden_dim: usize,
    pub layers: Vec<usize>,
    pub domains: BTreeMap<String, Vec<String>>,
    pub n_stories: usize,
    pub split: String,
    pub checksums: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steered: Option<SteeredRun>,
}

impl DatasetManifest {
    pub fn domain(&self, name: &str) -> Option<ConceptDomain> {
        self.domains.get(name).map(|concepts| ConceptDomain {
            name: name.to_string(),
            concepts: concepts.clone(),
        })
    }

    pub fn domain_list(&self) -> Vec<ConceptDomain> {
        self.domains
            .iter()
            .map(|(name, concepts)| ConceptDomain {
                name: name.clone(),
                concepts: concepts.clone(),
            })
            .collect()
    }
}

/// A fully validated dataset whose manifest (shapes and checksums) matches its
/// content.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stories: Vec<StoryRecord>,
    pub trajectories: Vec<BeliefTrajectory>,
    pub activations: Vec<ActivationDataset>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BehaviorLine {
    story_id: String,
    t: usize,
    beliefs: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw: Option<BTreeMap<String, BTreeMap<String, Vec<f64>>>>,
}

impl Dataset {
    /// Validates the parts, orders them canonically and derives the manifest.
    ///
    /// Trajectories are sorted by story order then domain name; activations by
    /// layer. All activation layers must share one row index.
    pub fn assemble(
        model_id: impl Into<String>,
        split: impl Into<String>,
        domains: &[ConceptDomain],
        stories: Vec<StoryRecord>,
        mut trajectories: Vec<BeliefTrajectory>,
        mut activations: Vec<ActivationDataset>,
    ) -> Result<Self> {
        let story_pos: HashMap<&str, usize> = stories
            .iter()
            .enumerate()
            .map(|(i, s)| (s.story_id.as_str(), i))
            .collect();
        trajectories.sort_by(|a, b| {
            let pa = story_pos.get(a.story_id.as_str()).copied().unwrap_or(usize::MAX);
            let pb = story_pos.get(b.story_id.as_str()).copied().unwrap_or(usize::MAX);
            pa.cmp(&pb).then_with(|| a.domain.cmp(&b.domain))
        });
        activations.sort_by_key(ActivationDataset::layer);
        let hidden_dim = activations.first().map_or(0, ActivationDataset::dim);
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION.to_string(),
            model_id: model_id.into(),
            hidden_dim,
            layers: activations.iter().map(ActivationDataset::layer).collect(),
            domains: domains
                .iter()
                .map(|d| (d.name.clone(), d.concepts.clone()))
                .collect(),
            n_stories: stories.len(),
            split: split.into(),
            checksums: BTreeMap::new(),
            steered: None,
        };
        let mut dataset = Dataset {
            manifest,
            stories,
            trajectories,
            activations,
        };
        dataset.refresh_checksums()?;
        Ok(dataset)
    }

    /// Marks the dataset as a steered run and recomputes checksums.
    pub fn with_steered(mut self, steered: SteeredRun) -> Result<Self> {
        self.manifest.steered = Some(steered);
        self.refresh_checksums()?;
        Ok(self)
    }

    fn refresh_checksums(&mut self) -> Result<()> {
        self.validate_content()?;
        let files = self.encode_payload()?;
        self.manifest.checksums = files
            .iter()
            .map(|(name, bytes)| (name.clone(), crc_hex(bytes)))
            .collect();
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Option<ConceptDomain> {
        self.manifest.domain(name)
    }

    pub fn story(&self, story_id: &str) -> Option<&StoryRecord> {
        self.stories.iter().find(|s| s.story_id == story_id)
    }

    /// Trajectories of one domain in story order.
    pub fn trajectories_for(&self, domain: &str) -> Vec<&BeliefTrajectory> {
        self.trajectories.iter().filter(|t| t.domain == domain).collect()
    }

    pub fn layer(&self, layer: usize) -> Option<&ActivationDataset> {
        self.activations.iter().find(|a| a.layer() == layer)
    }

    /// Checks every content invariant except checksums.
    pub fn validate_content(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(invalid(format!("unsupported format_version {}", m.format_version)));
        }
        if m.domains.is_empty() {
            return Err(invalid("manifest declares no domains"));
        }
        for (name, concepts) in &m.domains {
            ConceptDomain {
                name: name.clone(),
                concepts: concepts.clone(),
            }
            .validate()?;
        }
        if m.n_stories != self.stories.len() {
            return Err(invalid(format!(
                "manifest declares {} stories, found {}",
                m.n_stories,
                self.stories.len()
            )));
        }
        let mut story_len: HashMap<&str, usize> = HashMap::new();
        for s in &self.stories {
            if s.story_id.is_empty() {
                return Err(invalid("empty story_id"));
            }
            if s.sentences.is_empty() {
                return Err(invalid(format!("story {} has no sentences", s.story_id)));
            }
            if story_len.insert(s.story_id.as_str(), s.sentences.len()).is_some() {
                return Err(invalid(format!("duplicate story_id {}", s.story_id)));
            }
        }
        if self.trajectories.is_empty() {
            return Err(DataError::NoTrajectories);
        }
        let mut seen = HashSet::new();
        for tr in &self.trajectories {
            let concepts = m
                .domains
                .get(&tr.domain)
                .ok_or_else(|| invalid(format!("trajectory for undeclared domain {}", tr.domain)))?;
            let t_len = *story_len
                .get(tr.story_id.as_str())
                .ok_or_else(|| invalid(format!("trajectory for unknown story {}", tr.story_id)))?;
            if tr.len() != t_len {
                return Err(invalid(format!(
                    "trajectory {}/{} has {} steps, story has {t_len} sentences",
                    tr.story_id,
                    tr.domain,
                    tr.len()
                )));
            }
            if !seen.insert((tr.story_id.as_str(), tr.domain.as_str())) {
                return Err(invalid(format!("duplicate trajectory {}/{}", tr.story_id, tr.domain)));
            }
            tr.validate(concepts.len()).map_err(|e| match e {
                DataError::NonSimplex {
                    story_id,
                    t,
                    domain,
                    concept,
                    message,
                } => DataError::NonSimplex {
                    concept: concept
                        .parse::<usize>()
                        .ok()
                        .and_then(|c| concepts.get(c).cloned())
                        .unwrap_or(concept),
                    story_id,
                    t,
                    domain,
                    message,
                },
                other => other,
            })?;
        }
        if m.layers != self.activations.iter().map(ActivationDataset::layer).collect::<Vec<_>>() {
            return Err(invalid("manifest layers do not match activation tensors"));
        }
        if let Some(first) = self.activations.first() {
            for key in first.index() {
                match story_len.get(key.story_id.as_str()) {
                    Some(&len) if key.t >= 1 && key.t <= len => {}
                    _ => return Err(invalid(format!("index entry {key} does not name a sentence"))),
                }
            }
            for a in &self.activations {
                if a.dim() != m.hidden_dim {
                    return Err(DataError::ShapeMismatch {
                        file: layer_file(a.layer()),
                        message: format!("dimension {} but hidden_dim {}", a.dim(), m.hidden_dim),
                    });
                }
                if a.index() != first.index() {
                    return Err(invalid(format!(
                        "layer {} row index differs from layer {}",
                        a.layer(),
                        first.layer()
                    )));
                }
            }
        }
        if let Some(s) = &m.steered {
            if !s.alpha.is_finite() {
                return Err(invalid("steered alpha is not finite"));
            }
        }
        Ok(())
    }

    /// Encodes every file except the manifest.
    fn encode_payload(&self) -> Result<BTreeMap<String, Vec<u8>>> {
        let mut files = BTreeMap::new();
        let mut stories = Vec::new();
        for s in &self.stories {
            serde_json::to_writer(&mut stories, s).map_err(|e| invalid(e.to_string()))?;
            stories.push(b'\n');
        }
        files.insert(STORIES_FILE.to_string(), stories);

        let mut by_story: HashMap<&str, Vec<&BeliefTrajectory>> = HashMap::new();
        for tr in &self.trajectories {
            by_story.entry(tr.story_id.as_str()).or_default().push(tr);
        }
        let mut behavior = Vec::new();
        for s in &self.stories {
            let Some(trs) = by_story.get(s.story_id.as_str()) else {
                continue;
            };
            for t in 1..=s.sentences.len() {
                let mut line = BehaviorLine {
                    story_id: s.story_id.clone(),
                    t,
                    beliefs: BTreeMap::new(),
                    raw: None,
                };
                for tr in trs {
                    let concepts = &self.manifest.domains[&tr.domain];
                    line.beliefs.insert(
                        tr.domain.clone(),
                        concepts
                            .iter()
                            .cloned()
                            .zip(tr.values[t - 1].iter().copied())
                            .collect(),
                    );
                    if let Some(raw) = &tr.raw {
                        line.raw.get_or_insert_with(BTreeMap::new).insert(
                            tr.domain.clone(),
                            concepts
                                .iter()
                                .cloned()
                                .zip(raw[t - 1].iter().map(|d| d.to_vec()))
                                .collect(),
                        );
                    }
                }
                serde_json::to_writer(&mut behavior, &line).map_err(|e| invalid(e.to_string()))?;
                behavior.push(b'\n');
            }
        }
        files.insert(BEHAVIOR_FILE.to_string(), behavior);

        if let Some(first) = self.activations.first() {
            let mut index = serde_json::to_vec(first.index()).map_err(|e| invalid(e.to_string()))?;
            index.push(b'\n');
            files.insert(INDEX_FILE.to_string(), index);
            for a in &self.activations {
                files.insert(layer_file(a.layer()), a.to_bytes());
            }
        }
        Ok(files)
    }

    /// All files of the dataset, manifest included, as written to disk.
    pub fn encode(&self) -> Result<BTreeMap<String, Vec<u8>>> {
        self.validate_content()?;
        let mut files = self.encode_payload()?;
        for (name, bytes) in &files {
            let expected = self.manifest.checksums.get(name);
            let actual = crc_hex(bytes);
            if expected != Some(&actual) {
                return Err(DataError::Checksum {
                    file: name.clone(),
                    expected: expected.cloned().unwrap_or_else(|| "<none>".into()),
                    actual,
                });
            }
        }
        if self.manifest.checksums.len() != files.len() {
            return Err(invalid("manifest checksums list files that are not part of the dataset"));
        }
        let mut manifest = serde_json::to_vec_pretty(&self.manifest).map_err(|e| invalid(e.to_string()))?;
        manifest.push(b'\n');
        files.insert(MANIFEST_FILE.to_string(), manifest);
        Ok(files)
    }
}

pub fn crc_hex(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `dataset` under `root`. Invariants are checked before any byte is
/// written; re-writing the same dataset produces identical files.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let files = dataset.encode()?;
    fs::create_dir_all(root).map_err(io_err(root))?;
    for (name, bytes) in files {
        let path = root.join(&name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

fn read_file(root: &Path, name: &str) -> Result<Vec<u8>> {
    let path = root.join(name);
    if !path.is_file() {
        return Err(DataError::MissingFile(path));
    }
    fs::read(&path).map_err(io_err(&path))
}

fn verify_checksum(manifest: &DatasetManifest, name: &str, bytes: &[u8]) -> Result<()> {
    let expected = manifest.checksums.get(name).ok_or_else(|| DataError::Checksum {
        file: name.to_string(),
        expected: "<none>".into(),
        actual: crc_hex(bytes),
    })?;
    let actual = crc_hex(bytes);
    if *expected != actual {
        return Err(DataError::Checksum {
            file: name.to_string(),
            expected: expected.clone(),
            actual,
        });
    }
    Ok(())
}

fn parse_lines<T: for<'de> Deserialize<'de>>(file: &str, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| DataError::Parse {
        file: file.to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Parse {
                file: file.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reader that validates the manifest, stories, behavior and index eagerly and
/// loads activation layers on demand.
#[derive(Debug, Clone)]
pub struct DatasetReader {
    root: PathBuf,
    pub manifest: DatasetManifest,
    pub stories: Vec<StoryRecord>,
    pub trajectories: Vec<BeliefTrajectory>,
    index: Vec<RecordKey>,
}

impl DatasetReader {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_bytes = read_file(root, MANIFEST_FILE)?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&manifest_bytes).map_err(|e| DataError::Parse {
                file: MANIFEST_FILE.to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(invalid(format!("unsupported format_version {}", manifest.format_version)));
        }

        let stories_bytes = read_file(root, STORIES_FILE)?;
        verify_checksum(&manifest, STORIES_FILE, &stories_bytes)?;
        let stories: Vec<StoryRecord> = parse_lines(STORIES_FILE, &stories_bytes)?;

        let behavior_bytes = read_file(root, BEHAVIOR_FILE)?;
        let lines: Vec<BehaviorLine> = parse_lines(BEHAVIOR_FILE, &behavior_bytes)?;
        if lines.is_empty() {
            return Err(DataError::NoTrajectories);
        }
        verify_checksum(&manifest, BEHAVIOR_FILE, &behavior_bytes)?;
        let trajectories = trajectories_from_lines(&manifest, &stories, lines)?;

        let index = if manifest.layers.is_empty() {
            Vec::new()
        } else {
            let bytes = read_file(root, INDEX_FILE)?;
            verify_checksum(&manifest, INDEX_FILE, &bytes)?;
            let index: Vec<RecordKey> = serde_json::from_slice(&bytes).map_err(|e| DataError::Parse {
                file: INDEX_FILE.to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
            let mut seen = HashSet::new();
            for key in &index {
                if !seen.insert(key) {
                    return Err(DataError::DuplicateRecord(key.story_id.clone(), key.t));
                }
            }
            for &layer in &manifest.layers {
                let name = layer_file(layer);
                let path = root.join(&name);
                let meta = fs::metadata(&path).map_err(|_| DataError::MissingFile(path.clone()))?;
                let expected = (index.len() * manifest.hidden_dim * 4) as u64;
                if meta.len() != expected {
                    return Err(DataError::ShapeMismatch {
                        file: name,
                        message: format!(
                            "{} bytes, expected {expected} ({} rows x {} floats)",
                            meta.len(),
                            index.len(),
                            manifest.hidden_dim
                        ),
                    });
                }
            }
            index
        };

        let reader = DatasetReader {
            root: root.to_path_buf(),
            manifest,
            stories,
            trajectories,
            index,
        };
        // Validate everything that does not need tensor bytes.
        Dataset {
            manifest: reader.manifest.clone(),
            stories: reader.stories.clone(),
            trajectories: reader.trajectories.clone(),
            activations: Vec::new(),
        }
        .validate_content_without_layers()?;
        Ok(reader)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> &[RecordKey] {
        &self.index
    }

    pub fn read_layer(&self, layer: usize) -> Result<ActivationDataset> {
        if !self.manifest.layers.contains(&layer) {
            return Err(invalid(format!("layer {layer} is not part of the dataset")));
        }
        let name = layer_file(layer);
        let bytes = read_file(&self.root, &name)?;
        let q = self.manifest.hidden_dim;
        if bytes.len() != self.index.len() * q * 4 {
            return Err(DataError::ShapeMismatch {
                file: name,
                message: format!("{} bytes for {} rows of {q} floats", bytes.len(), self.index.len()),
            });
        }
        verify_checksum(&self.manifest, &name, &bytes)?;
        let rows = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ActivationDataset::new(layer, q, rows, self.index.clone())
    }

    pub fn into_dataset(self) -> Result<Dataset> {
        let activations = self
            .manifest
            .layers
            .iter()
            .map(|&l| self.read_layer(l))
            .collect::<Result<Vec<_>>>()?;
        let dataset = Dataset {
            manifest: self.manifest,
            stories: self.stories,
            trajectories: self.trajectories,
            activations,
        };
        dataset.validate_content()?;
        Ok(dataset)
    }
}

impl Dataset {
    fn validate_content_without_layers(&self) -> Result<()> {
        let mut probe = self.clone();
        probe.manifest.layers.clear();
        probe.validate_content()
    }
}

fn trajectories_from_lines(
    manifest: &DatasetManifest,
    stories: &[StoryRecord],
    lines: Vec<BehaviorLine>,
) -> Result<Vec<BeliefTrajectory>> {
    type Cells = BTreeMap<usize, (Vec<f64>, Option<Vec<RawRatings>>)>;
    let mut cells: HashMap<(String, String), Cells> = HashMap::new();
    for line in lines {
        if line.t == 0 {
            return Err(invalid(format!("story {}: sentence index 0 (indices are 1-based)", line.story_id)));
        }
        for (domain, beliefs) in &line.beliefs {
            let concepts = manifest
                .domains
                .get(domain)
                .ok_or_else(|| invalid(format!("behavior line for undeclared domain {domain}")))?;
            if beliefs.len() != concepts.len() || concepts.iter().any(|c| !beliefs.contains_key(c)) {
                return Err(invalid(format!(
                    "story {} t={} domain {domain}: concept keys do not match manifest",
                    line.story_id, line.t
                )));
            }
            let values: Vec<f64> = concepts.iter().map(|c| beliefs[c]).collect();
            let raw = match line.raw.as_ref().and_then(|r| r.get(domain)) {
                None => None,
                Some(raw) => {
                    let mut rows = Vec::with_capacity(concepts.len());
                    for c in concepts {
                        let dist = raw.get(c).ok_or_else(|| {
                            invalid(format!("story {} t={} raw missing concept {c}", line.story_id, line.t))
                        })?;
                        let arr: RawRatings = dist.as_slice().try_into().map_err(|_| DataError::NonSimplex {
                            story_id: line.story_id.clone(),
                            t: line.t,
                            domain: domain.clone(),
                            concept: c.clone(),
                            message: format!("{} entries, expected {RATING_LEVELS}", dist.len()),
                        })?;
                        rows.push(arr);
                    }
                    Some(rows)
                }
            };
            let slot = cells
                .entry((line.story_id.clone(), domain.clone()))
                .or_default();
            if slot.insert(line.t, (values, raw)).is_some() {
                return Err(DataError::DuplicateRecord(line.story_id.clone(), line.t));
            }
        }
    }

    let mut out = Vec::new();
    for s in stories {
        for domain in manifest.domains.keys() {
            let Some(steps) = cells.remove(&(s.story_id.clone(), domain.clone())) else {
                continue;
            };
            let n = steps.len();
            if steps.keys().copied().ne(1..=n) {
                return Err(invalid(format!(
                    "story {} domain {domain}: sentence indices are not contiguous from 1",
                    s.story_id
                )));
            }
            let has_raw = steps.values().next().is_some_and(|(_, r)| r.is_some());
            if steps.values().any(|(_, r)| r.is_some() != has_raw) {
                return Err(invalid(format!(
                    "story {} domain {domain}: raw distributions present for only some sentences",
                    s.story_id
                )));
            }
            let mut values = Vec::with_capacity(n);
            let mut raw = has_raw.then(|| Vec::with_capacity(n));
            for (_, (v, r)) in steps {
                values.push(v);
                if let (Some(raw), Some(r)) = (raw.as_mut(), r) {
                    raw.push(r);
                }
            }
            out.push(BeliefTrajectory {
                story_id: s.story_id.clone(),
                domain: domain.clone(),
                values,
                raw,
            });
        }
    }
    if let Some(((story, _), _)) = cells.into_iter().next() {
        return Err(invalid(format!("behavior for unknown story {story}")));
    }
    if out.is_empty() {
        return Err(DataError::NoTrajectories);
    }
    Ok(out)
}

/// Loads and validates a dataset directory, reading every activation layer.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    DatasetReader::open(root)?.into_dataset()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let domain = ConceptDomain::new("emotions", ["happiness", "sadness"]).unwrap();
        let stories = vec![
            StoryRecord {
                story_id: "a".into(),
                style: Some("classic".into()),
                sentences: vec!["One.".into(), "Two.".into()],
            },
            StoryRecord {
                story_id: "b".into(),
                style: None,
                sentences: vec!["Only.".into()],
            },
        ];
        let mut raw_a = [0.0; 11];
        raw_a[4] = 0.5;
        raw_a[8] = 0.5;
        let trajectories = vec![
            BeliefTrajectory {
                story_id: "b".into(),
                domain: "emotions".into(),
                values: vec![vec![0.25, 0.75]],
                raw: None,
            },
            BeliefTrajectory {
                story_id: "a".into(),
                domain: "emotions".into(),
                values: vec![vec![0.6, 0.0], vec![1.0, 0.1]],
                raw: Some(vec![
                    vec![raw_a, {
                        let mut r = [0.0; 11];
                        r[0] = 1.0;
                        r
                    }],
                    vec![
                        {
                            let mut r = [0.0; 11];
                            r[10] = 1.0;
                            r
                        },
                        {
                            let mut r = [0.0; 11];
                            r[1] = 1.0;
                            r
                        },
                    ],
                ]),
            },
        ];
        let index = vec![RecordKey::new("a", 1), RecordKey::new("a", 2), RecordKey::new("b", 1)];
        let rows: Vec<f32> = (0..9).map(|i| i as f32 * 0.5 - 1.0).collect();
        let acts = vec![
            ActivationDataset::new(3, 3, rows.clone(), index.clone()).unwrap(),
            ActivationDataset::new(1, 3, rows.iter().map(|v| -v).collect(), index).unwrap(),
        ];
        Dataset::assemble("toy", "train", &[domain], stories, trajectories, acts).unwrap()
    }

    #[test]
    fn assemble_orders_canonically() {
        let d = tiny();
        assert_eq!(d.manifest.layers, vec![1, 3]);
        assert_eq!(d.trajectories[0].story_id, "a");
        assert_eq!(d.manifest.hidden_dim, 3);
        assert_eq!(d.manifest.checksums.len(), 5);
    }

    #[test]
    fn write_load_round_trip_is_byte_identical() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, d);
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &loaded).unwrap();
        for name in d.encode().unwrap().keys() {
            assert_eq!(
                fs::read(dir.path().join(name)).unwrap(),
                fs::read(dir2.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn empty_behavior_is_rejected() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        fs::write(dir.path().join(BEHAVIOR_FILE), b"").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "no trajectories");
    }

    #[test]
    fn truncated_tensor_is_a_shape_mismatch() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let path = dir.path().join(layer_file(3));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::ShapeMismatch { .. })));
    }

    #[test]
    fn permuted_index_is_detected() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        fs::write(
            dir.path().join(INDEX_FILE),
            b"[[\"a\",2],[\"a\",1],[\"b\",1]]\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Checksum { .. })));
    }

    #[test]
    fn nan_value_is_refused_before_writing() {
        let mut d = tiny();
        d.trajectories[1].values[0][0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("out");
        assert!(write_dataset(&root, &d).is_err());
        assert!(!root.exists());
    }

    #[test]
    fn non_simplex_raw_is_rejected() {
        let mut d = tiny();
        d.trajectories[0].raw.as_mut().unwrap()[0][1][0] = 0.9;
        match d.validate_content() {
            Err(DataError::NonSimplex { concept, .. }) => assert_eq!(concept, "sadness"),
            other => panic!("expected NonSimplex, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_index_entry_is_rejected() {
        let index = vec![RecordKey::new("a", 1), RecordKey::new("a", 1)];
        assert!(matches!(
            ActivationDataset::new(0, 1, vec![0.0, 1.0], index),
            Err(DataError::DuplicateRecord(_, 1))
        ));
    }

    #[test]
    fn domain_invariants() {
        assert!(ConceptDomain::new("d", ["x"]).is_err());
        assert!(ConceptDomain::new("d", ["x", "x"]).is_err());
        let d = ConceptDomain::new("d", ["x", "y"]).unwrap();
        assert_eq!(d.index_of("y"), Some(1));
    }

    #[test]
    fn manifest_keys_are_exact() {
        let d = tiny();
        let files = d.encode().unwrap();
        let v: serde_json::Value = serde_json::from_slice(&files[MANIFEST_FILE]).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            ["checksums", "domains", "format_version", "hidden_dim", "layers", "model_id", "n_stories", "split"]
        );
        assert_eq!(v["format_version"], "1");
    }
}
