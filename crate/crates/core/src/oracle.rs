//! Synthetic generator with a planted two-dimensional belief space.
//!
//! Each story follows a latent walk `b_t` in a disk of radius `R`. Concept
//! `c` has an anchor `a_c` and belief
//!
//! ```text
//! y_c(b) = clamp01(1/2 + (β/4)·(‖b‖² + ‖a_c‖² − ‖b − a_c‖²))
//! ```
//!
//! which is affine in `b`, so a linear probe can recover it exactly. Layer `l`
//! embeds the latent as `z_l = W_l·(b + τ_l·η) + σ_z·ε`, with `W_l = g_l·√q·Q_l`
//! for orthonormal `Q_l` whose rows all have equal norm. The layer with the smallest jitter `τ_l` carries
//! the cleanest signal.
//!
//! Interventions propagate forward: an offset injected at layer `l` maps to a
//! latent offset through `W_l⁺` and is carried to the next layer scaled by `ρ`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ActivationDataset, BeliefTrajectory, ConceptDomain, Dataset, RecordKey, StoryRecord};
use crate::elicitation::{aggregate, RATING_LEVELS};
use crate::geometry::{procrustes, CentroidSet};
use crate::steering::{InterventionModel, SteeringVector};
use crate::stats;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid planted space: {0}")]
    InvalidSpace(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("unknown layer {0}")]
    UnknownLayer(usize),
    #[error("unknown concept {0}")]
    UnknownConcept(String),
    #[error("ground truth I/O on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

pub const ORACLE_FILE: &str = "oracle.json";

pub fn oracle_w_file(layer: usize) -> String {
    format!("oracle_w_{layer}.f32")
}

const STYLES: [&str; 5] = ["adventure", "classic", "lighthearted", "melancholy", "tragic"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub concept: String,
    pub point: [f64; 2],
}

/// Parameters of the generative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSpace {
    pub model_id: String,
    pub domain: String,
    pub anchors: Vec<Anchor>,
    /// Radius `R` of the latent disk.
    pub radius: f64,
    pub beta: f64,
    pub hidden_dim: usize,
    pub layers: Vec<usize>,
    /// Embedding gain `g_l` per layer.
    pub gains: Vec<f64>,
    /// Latent jitter `τ_l` per layer.
    pub layer_jitter: Vec<f64>,
    pub rho: f64,
    /// Behavior noise.
    pub sigma: f64,
    /// Per-coordinate activation noise.
    pub activation_sigma: f64,
    /// Walk step standard deviation as a fraction of the disk diameter.
    pub step_scale: f64,
    /// Replace the first latent coordinate with a ramp in the sentence index.
    pub position_axis: bool,
}

fn polar(deg: f64, r: f64) -> [f64; 2] {
    let t = deg.to_radians();
    [r * t.cos(), r * t.sin()]
}

impl Default for PlantedSpace {
    fn default() -> Self {
        let r = 0.67;
        let anchors = [
            ("happiness", 75.0),
            ("surprise", 90.0),
            ("anger", 105.0),
            ("sadness", -15.0),
            ("fear", 0.0),
            ("disgust", 15.0),
        ]
        .into_iter()
        .map(|(c, deg)| Anchor {
            concept: c.to_string(),
            point: polar(deg, r),
        })
        .collect();
        PlantedSpace {
            model_id: "synthetic-oracle".into(),
            domain: "emotions".into(),
            anchors,
            radius: r,
            beta: 2.0,
            hidden_dim: 64,
            layers: vec![0, 1, 2, 3],
            gains: vec![1.0; 4],
            layer_jitter: vec![0.08, 0.05, 0.0, 0.03],
            rho: 0.5,
            sigma: 0.05,
            activation_sigma: 0.05,
            step_scale: 0.15,
            position_axis: false,
        }
    }
}

impl PlantedSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OracleError::InvalidSpace(m));
        if self.anchors.len() < 2 {
            return bad("need at least 2 anchors".into());
        }
        if self.anchors.iter().any(|a| a.point.iter().any(|v| !v.is_finite())) {
            return bad("anchor coordinates must be finite".into());
        }
        self.domain_spec()?;
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad(format!("radius must be > 0, got {}", self.radius));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if self.hidden_dim < 2 {
            return bad(format!("hidden_dim must be >= 2, got {}", self.hidden_dim));
        }
        if self.layers.is_empty() || self.layers.windows(2).any(|w| w[1] <= w[0]) {
            return bad("layers must be non-empty and strictly increasing".into());
        }
        if self.gains.len() != self.layers.len() || self.layer_jitter.len() != self.layers.len() {
            return bad("gains and layer_jitter need one entry per layer".into());
        }
        if self.gains.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return bad("gains must be > 0".into());
        }
        if self.layer_jitter.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return bad("layer_jitter must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.activation_sigma >= 0.0 && self.activation_sigma.is_finite()) {
            return bad(format!("activation_sigma must be >= 0, got {}", self.activation_sigma));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return bad(format!("step_scale must be > 0, got {}", self.step_scale));
        }
        Ok(())
    }

    pub fn domain_spec(&self) -> Result<ConceptDomain> {
        ConceptDomain::new(self.domain.clone(), self.anchors.iter().map(|a| a.concept.clone()))
            .map_err(|e| OracleError::InvalidSpace(e.to_string()))
    }

    /// Layer with the smallest latent jitter (lowest index on ties).
    pub fn signal_layer(&self) -> usize {
        let mut best = 0;
        for (i, t) in self.layer_jitter.iter().enumerate() {
            if *t < self.layer_jitter[best] {
                best = i;
            }
        }
        self.layers[best]
    }

    /// Noise-free beliefs at latent point `b`.
    pub fn latent_readout(&self, b: [f64; 2]) -> Vec<f64> {
        self.anchors
            .iter()
            .map(|a| {
                let (ax, ay) = (a.point[0], a.point[1]);
                let bb = b[0] * b[0] + b[1] * b[1];
                let aa = ax * ax + ay * ay;
                let d2 = (b[0] - ax).powi(2) + (b[1] - ay).powi(2);
                (0.5 + self.beta / 4.0 * (bb + aa - d2)).clamp(0.0, 1.0)
            })
            .collect()
    }

    fn layer_pos(&self, layer: usize) -> Result<usize> {
        self.layers.iter().position(|&l| l == layer).ok_or(OracleError::UnknownLayer(layer))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_stories: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_stories: 200,
            t_min: 8,
            t_max: 15,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stories == 0 {
            return Err(OracleError::InvalidSpace("n_stories must be >= 1".into()));
        }
        if self.t_min == 0 || self.t_max < self.t_min {
            return Err(OracleError::InvalidSpace(format!(
                "sentence range [{}, {}] is invalid",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// Hidden generative state, stored apart from the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub space: PlantedSpace,
    pub config: GenerateConfig,
    /// `W_l`, `q x 2`, entries exactly representable in `f32`.
    pub embeddings: Vec<DMatrix<f64>>,
    pub latents: BTreeMap<String, Vec<[f64; 2]>>,
}

impl GroundTruth {
    pub fn embedding(&self, layer: usize) -> Result<&DMatrix<f64>> {
        Ok(&self.embeddings[self.space.layer_pos(layer)?])
    }

    /// `W_l·a_c`, the activation-space image of a concept anchor.
    pub fn concept_axis(&self, concept: &str, layer: usize) -> Result<Vec<f64>> {
        let a = self
            .space
            .anchors
            .iter()
            .find(|a| a.concept == concept)
            .ok_or_else(|| OracleError::UnknownConcept(concept.to_string()))?;
        let w = self.embedding(layer)?;
        Ok((w * DVector::from_column_slice(&a.point)).iter().copied().collect())
    }

    pub fn model(&self) -> OracleModel {
        OracleModel::new(self.space.clone(), self.embeddings.clone())
    }
}

pub struct Generated {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

fn story_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Equal-norm tight frame scaled by `gain·√q`, rounded through `f32`. Row
/// `j` points at angle `φ₀ + πj/q` with a random sign, rows shuffled, so
/// the columns are orthogonal and every row has norm `gain·√2`.
fn embedding_matrix(q: usize, gain: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let phase = rng.random::<f64>() * std::f64::consts::PI;
    let mut rows: Vec<[f64; 2]> = (0..q)
        .map(|j| {
            let a = phase + std::f64::consts::PI * j as f64 / q as f64;
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            [s * a.cos(), s * a.sin()]
        })
        .collect();
    rows.shuffle(rng);
    let scale = gain * 2f64.sqrt();
    DMatrix::from_fn(q, 2, |r, c| f64::from((rows[r][c] * scale) as f32))
}

fn reflect_into(v: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    let mut x = (v - lo).rem_euclid(2.0 * width);
    if x > width {
        x = 2.0 * width - x;
    }
    lo + x
}

fn reflect_disk(p: [f64; 2], r: f64) -> [f64; 2] {
    let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
    if n <= r {
        return p;
    }
    let folded = reflect_into(n, -r, r).abs();
    [p[0] / n * folded, p[1] / n * folded]
}

fn latent_walk(space: &PlantedSpace, cfg: &GenerateConfig, t_len: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let r = space.radius;
    let step = space.step_scale * 2.0 * r;
    let mut out = Vec::with_capacity(t_len);
    if space.position_axis {
        let lim = 0.5 * r;
        let mut y = rng.random_range(-lim..=lim);
        let slope = 1.6 * r / (cfg.t_max.max(2) - 1) as f64;
        for t in 0..t_len {
            if t > 0 {
                y = reflect_into(y + step * normal(rng), -lim, lim);
            }
            out.push([-0.8 * r + slope * t as f64, y]);
        }
        return out;
    }
    let (rad, ang): (f64, f64) = (rng.random::<f64>().sqrt() * r, rng.random::<f64>() * std::f64::consts::TAU);
    let mut b = [rad * ang.cos(), rad * ang.sin()];
    for t in 0..t_len {
        if t > 0 {
            b = reflect_disk([b[0] + step * normal(rng), b[1] + step * normal(rng)], r);
        }
        out.push(b);
    }
    out
}

/// Two-point rating distribution with mean `10·y`.
fn two_point(y: f64) -> [f64; RATING_LEVELS] {
    let v = (y * 10.0).clamp(0.0, 10.0);
    let f = v.floor() as usize;
    let mut d = [0.0; RATING_LEVELS];
    if f >= 10 {
        d[10] = 1.0;
    } else {
        let p = v - f as f64;
        d[f] = 1.0 - p;
        d[f + 1] = p;
    }
    d
}

struct StoryDraw {
    story: StoryRecord,
    trajectory: BeliefTrajectory,
    latents: Vec<[f64; 2]>,
    rows: Vec<Vec<f32>>,
}

fn draw_story(space: &PlantedSpace, cfg: &GenerateConfig, w: &[DMatrix<f64>], i: usize) -> StoryDraw {
    let mut rng = story_rng(cfg.seed, i as u64 + 1);
    let story_id = format!("syn-{i:04}");
    let t_len = rng.random_range(cfg.t_min..=cfg.t_max);
    let latents = latent_walk(space, cfg, t_len, &mut rng);
    let q = space.hidden_dim;
    let mut values = Vec::with_capacity(t_len);
    let mut raw = Vec::with_capacity(t_len);
    let mut rows = vec![Vec::with_capacity(t_len * q); w.len()];
    for b in &latents {
        let clean = space.latent_readout(*b);
        let mut vrow = Vec::with_capacity(clean.len());
        let mut rrow = Vec::with_capacity(clean.len());
        for y in clean {
            let noisy = (y + space.sigma * normal(&mut rng)).clamp(0.0, 1.0);
            let dist = two_point(noisy);
            vrow.push(aggregate(&dist).expect("two-point distribution is valid"));
            rrow.push(dist);
        }
        values.push(vrow);
        raw.push(rrow);
        for (li, wl) in w.iter().enumerate() {
            let tau = space.layer_jitter[li];
            let lb = [b[0] + tau * normal(&mut rng), b[1] + tau * normal(&mut rng)];
            for r in 0..q {
                let z = wl[(r, 0)] * lb[0] + wl[(r, 1)] * lb[1] + space.activation_sigma * normal(&mut rng);
                rows[li].push(z as f32);
            }
        }
    }
    let style = STYLES[i % STYLES.len()].to_string();
    StoryDraw {
        story: StoryRecord {
            story_id: story_id.clone(),
            style: Some(style),
            sentences: (1..=t_len).map(|t| format!("Sentence {t} of {story_id}.")).collect(),
        },
        trajectory: BeliefTrajectory {
            story_id,
            domain: space.domain.clone(),
            values,
            raw: Some(raw),
        },
        latents,
        rows,
    }
}

/// Draws a full dataset and its hidden ground truth. Stories are generated in
/// parallel, each from its own seeded stream.
pub fn generate(space: &PlantedSpace, cfg: &GenerateConfig) -> Result<Generated> {
    space.validate()?;
    cfg.validate()?;
    let domain = space.domain_spec()?;
    let embeddings: Vec<DMatrix<f64>> = space
        .gains
        .iter()
        .enumerate()
        .map(|(li, &g)| embedding_matrix(space.hidden_dim, g, &mut story_rng(cfg.seed, u64::MAX - li as u64)))
        .collect();
    let draws: Vec<StoryDraw> = (0..cfg.n_stories)
        .into_par_iter()
        .map(|i| draw_story(space, cfg, &embeddings, i))
        .collect();

    let q = space.hidden_dim;
    let mut index = Vec::new();
    let mut layer_rows: Vec<Vec<f32>> = vec![Vec::new(); space.layers.len()];
    let mut stories = Vec::with_capacity(draws.len());
    let mut trajectories = Vec::with_capacity(draws.len());
    let mut latents = BTreeMap::new();
    for d in draws {
        for t in 1..=d.latents.len() {
            index.push(RecordKey::new(d.story.story_id.clone(), t));
        }
        for (li, rows) in d.rows.into_iter().enumerate() {
            layer_rows[li].extend(rows);
        }
        latents.insert(d.story.story_id.clone(), d.latents);
        stories.push(d.story);
        trajectories.push(d.trajectory);
    }
    let activations = space
        .layers
        .iter()
        .zip(layer_rows)
        .map(|(&l, rows)| ActivationDataset::new(l, q, rows, index.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let dataset = Dataset::assemble(space.model_id.clone(), "none", &[domain], stories, trajectories, activations)?;
    Ok(Generated {
        dataset,
        truth: GroundTruth {
            space: space.clone(),
            config: cfg.clone(),
            embeddings,
            latents,
        },
    })
}

/// Analytic forward model over the planted embeddings.
#[derive(Debug, Clone)]
pub struct OracleModel {
    space: PlantedSpace,
    embeddings: Vec<DMatrix<f64>>,
    pinv: Vec<DMatrix<f64>>,
}

impl OracleModel {
    pub fn new(space: PlantedSpace, embeddings: Vec<DMatrix<f64>>) -> Self {
        let pinv = embeddings
            .iter()
            .map(|w| {
                let wtw = w.transpose() * w;
                wtw.try_inverse().expect("embedding has full column rank") * w.transpose()
            })
            .collect();
        OracleModel {
            space,
            embeddings,
            pinv,
        }
    }

    pub fn space(&self) -> &PlantedSpace {
        &self.space
    }

    /// `W_l⁺·z`.
    pub fn latent(&self, z: &[f64], layer: usize) -> Result<[f64; 2]> {
        let li = self.space.layer_pos(layer)?;
        if z.len() != self.space.hidden_dim {
            return Err(OracleError::DimensionMismatch {
                expected: self.space.hidden_dim,
                actual: z.len(),
            });
        }
        Ok(self.project(li, z))
    }

    fn project(&self, li: usize, z: &[f64]) -> [f64; 2] {
        let p = &self.pinv[li];
        let mut out = [0.0; 2];
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..z.len()).map(|j| p[(r, j)] * z[j]).sum();
        }
        out
    }

    /// Beliefs recovered from an activation at `layer`.
    pub fn oracle_readout(&self, z: &[f64], layer: usize) -> Result<Vec<f64>> {
        Ok(self.space.latent_readout(self.latent(z, layer)?))
    }

    /// Derivative of the final-layer readout with respect to `α` when the
    /// vector is applied over its span, ignoring clamping.
    pub fn readout_gradient(&self, vector: &SteeringVector) -> Result<Vec<f64>> {
        let mut off = [0.0; 2];
        for (li, &l) in self.space.layers.iter().enumerate() {
            off = [off[0] * self.space.rho, off[1] * self.space.rho];
            if let Some(v) = vector.direction(l) {
                if v.len() != self.space.hidden_dim {
                    return Err(OracleError::DimensionMismatch {
                        expected: self.space.hidden_dim,
                        actual: v.len(),
                    });
                }
                let p = self.project(li, v);
                off = [off[0] + p[0], off[1] + p[1]];
            }
        }
        Ok(self
            .space
            .anchors
            .iter()
            .map(|a| self.space.beta / 2.0 * (a.point[0] * off[0] + a.point[1] * off[1]))
            .collect())
    }
}

impl InterventionModel for OracleModel {
    fn layers(&self) -> &[usize] {
        &self.space.layers
    }

    fn dim(&self) -> usize {
        self.space.hidden_dim
    }

    fn propagate(&self, base: &[Vec<f64>], inject: &[Option<Vec<f64>>]) -> Vec<Vec<f64>> {
        let rho = self.space.rho;
        let mut off = [0.0f64; 2];
        let mut out = Vec::with_capacity(base.len());
        for (li, z) in base.iter().enumerate() {
            let carried = [rho * off[0], rho * off[1]];
            let w = &self.embeddings[li];
            let mut zl = z.clone();
            if carried != [0.0, 0.0] {
                for (r, v) in zl.iter_mut().enumerate() {
                    *v += w[(r, 0)] * carried[0] + w[(r, 1)] * carried[1];
                }
            }
            off = carried;
            if let Some(inj) = &inject[li] {
                for (v, d) in zl.iter_mut().zip(inj) {
                    *v += d;
                }
                let p = self.project(li, inj);
                off = [off[0] + p[0], off[1] + p[1]];
            }
            out.push(zl);
        }
        out
    }

    fn readout(&self, final_activation: &[f64]) -> Vec<f64> {
        let li = self.space.layers.len() - 1;
        self.space.latent_readout(self.project(li, final_activation))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleFile {
    space: PlantedSpace,
    config: GenerateConfig,
    embedding_files: Vec<String>,
    latents: BTreeMap<String, Vec<[f64; 2]>>,
}

/// Writes `oracle.json` and one `oracle_w_<l>.f32` per layer (`q x 2`,
/// row-major).
pub fn write_ground_truth(dir: &Path, truth: &GroundTruth) -> Result<()> {
    let io = |p: &Path, e: std::io::Error| OracleError::Io {
        path: p.to_path_buf(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut files = Vec::new();
    for (&l, w) in truth.space.layers.iter().zip(&truth.embeddings) {
        let name = oracle_w_file(l);
        let mut bytes = Vec::with_capacity(w.len() * 4);
        for r in 0..w.nrows() {
            for c in 0..2 {
                bytes.extend_from_slice(&(w[(r, c)] as f32).to_le_bytes());
            }
        }
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        files.push(name);
    }
    let file = OracleFile {
        space: truth.space.clone(),
        config: truth.config.clone(),
        embedding_files: files,
        latents: truth.latents.clone(),
    };
    let path = dir.join(ORACLE_FILE);
    let mut json = serde_json::to_vec(&file).map_err(|e| OracleError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| io(&path, e))
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join(ORACLE_FILE);
    let fail = |p: &Path, m: String| OracleError::Io {
        path: p.to_path_buf(),
        message: m,
    };
    let text = fs::read(&path).map_err(|e| fail(&path, e.to_string()))?;
    let file: OracleFile = serde_json::from_slice(&text).map_err(|e| fail(&path, e.to_string()))?;
    file.space.validate()?;
    let q = file.space.hidden_dim;
    let embeddings = file
        .embedding_files
        .iter()
        .map(|name| {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| fail(&p, e.to_string()))?;
            if bytes.len() != q * 2 * 4 {
                return Err(fail(&p, format!("{} bytes, expected {}", bytes.len(), q * 8)));
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            Ok(DMatrix::from_row_slice(q, 2, &vals))
        })
        .collect::<Result<Vec<_>>>()?;
    if embeddings.len() != file.space.layers.len() {
        return Err(fail(&path, "one embedding file per layer expected".into()));
    }
    Ok(GroundTruth {
        space: file.space,
        config: file.config,
        embeddings,
        latents: file.latents,
    })
}

/// Recovered geometry measured against the planted one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthReport {
    pub concepts: Vec<String>,
    /// Procrustes disparity between recovered centroids and planted anchors.
    pub centroid_disparity: f64,
    /// Mean disparity after shuffling centroid labels, for reference.
    pub shuffled_disparity: f64,
    /// Cosine between each steering direction and `W_l·a_c` at its first layer.
    pub direction_cosines: BTreeMap<String, f64>,
}

pub fn anchor_disparity(truth: &GroundTruth, centroids: &CentroidSet) -> Result<f64> {
    let anchors = ordered_anchors(truth, &centroids.concepts)?;
    Ok(procrustes(&anchors, &centroids.centroids)?.disparity)
}

fn ordered_anchors(truth: &GroundTruth, concepts: &[String]) -> Result<Vec<Vec<f64>>> {
    concepts
        .iter()
        .map(|c| {
            truth
                .space
                .anchors
                .iter()
                .find(|a| &a.concept == c)
                .map(|a| a.point.to_vec())
                .ok_or_else(|| OracleError::UnknownConcept(c.clone()))
        })
        .collect()
}

pub fn ground_truth_compare(
    truth: &GroundTruth,
    centroids: &CentroidSet,
    vectors: &[&SteeringVector],
    shuffles: usize,
    seed: u64,
) -> Result<GroundTruthReport> {
    let anchors = ordered_anchors(truth, &centroids.concepts)?;
    let centroid_disparity = procrustes(&anchors, &centroids.centroids)?.disparity;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..shuffles {
        let mut shuffled = centroids.centroids.clone();
        shuffled.shuffle(&mut rng);
        total += procrustes(&anchors, &shuffled)?.disparity;
    }
    let mut direction_cosines = BTreeMap::new();
    for v in vectors {
        let layer = v.layers[0];
        let axis = truth.concept_axis(&v.concept, layer)?;
        direction_cosines.insert(v.concept.clone(), stats::cosine(&v.directions[0], &axis));
    }
    Ok(GroundTruthReport {
        concepts: centroids.concepts.clone(),
        centroid_disparity,
        shuffled_disparity: if shuffles > 0 { total / shuffles as f64 } else { f64::NAN },
        direction_cosines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::SteeringMethod;

    fn small() -> (PlantedSpace, GenerateConfig) {
        let space = PlantedSpace {
            hidden_dim: 8,
            ..PlantedSpace::default()
        };
        let cfg = GenerateConfig {
            n_stories: 6,
            t_min: 3,
            t_max: 5,
            seed: 11,
        };
        (space, cfg)
    }

    #[test]
    fn defaults_are_valid() {
        let s = PlantedSpace::default();
        s.validate().unwrap();
        assert_eq!(s.signal_layer(), 2);
        assert_eq!(s.domain_spec().unwrap().k(), 6);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let bad = PlantedSpace {
            sigma: -0.1,
            ..PlantedSpace::default()
        };
        assert!(matches!(bad.validate(), Err(OracleError::InvalidSpace(_))));
        let bad = PlantedSpace {
            rho: 1.5,
            ..PlantedSpace::default()
        };
        assert!(bad.validate().is_err());
        let bad = PlantedSpace {
            gains: vec![1.0],
            ..PlantedSpace::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sharp_readout_saturates_at_anchor() {
        let s = PlantedSpace {
            beta: 1e9,
            ..PlantedSpace::default()
        };
        let y = s.latent_readout(s.anchors[1].point);
        assert_eq!(y[1], 1.0);
    }

    #[test]
    fn anchor_maximizes_its_own_belief() {
        let s = PlantedSpace::default();
        for (c, a) in s.anchors.iter().enumerate() {
            let y = s.latent_readout(a.point);
            let best = (0..y.len()).max_by(|&i, &j| y[i].total_cmp(&y[j])).unwrap();
            assert_eq!(best, c);
        }
        let centre = s.latent_readout([0.0, 0.0]);
        assert!(centre.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reflection_stays_inside() {
        assert!((reflect_into(1.2, -1.0, 1.0) - 0.8).abs() < 1e-12);
        assert!((reflect_into(-1.5, -1.0, 1.0) + 0.5).abs() < 1e-12);
        let p = reflect_disk([0.0, 1.3], 1.0);
        assert!((p[1] - 0.7).abs() < 1e-12);
        let p = reflect_disk([3.5, 0.0], 1.0);
        assert!(p[0].abs() <= 1.0);
    }

    #[test]
    fn two_point_aggregates_to_input() {
        for y in [0.0, 0.05, 0.37, 0.5, 0.999, 1.0] {
            let d = two_point(y);
            assert!((aggregate(&d).unwrap() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let (space, cfg) = small();
        let a = generate(&space, &cfg).unwrap();
        let b = generate(&space, &cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.dataset.encode().unwrap(), b.dataset.encode().unwrap());
        a.dataset.validate_content().unwrap();
        for w in &a.truth.embeddings {
            let wtw = w.transpose() * w;
            assert!((wtw[(0, 0)] - 8.0).abs() < 1e-4 && wtw[(0, 1)].abs() < 1e-4);
        }
    }

    #[test]
    fn noiseless_activations_decode_to_latents() {
        let (mut space, cfg) = small();
        space.sigma = 0.0;
        space.activation_sigma = 0.0;
        space.layer_jitter = vec![0.0; 4];
        let g = generate(&space, &cfg).unwrap();
        let model = g.truth.model();
        let acts = g.dataset.layer(1).unwrap();
        for (i, key) in acts.index().iter().enumerate() {
            let b = model.latent(&acts.row_f64(i), 1).unwrap();
            let truth = g.truth.latents[&key.story_id][key.t - 1];
            assert!((b[0] - truth[0]).abs() < 1e-5 && (b[1] - truth[1]).abs() < 1e-5);
        }
    }

    #[test]
    fn ground_truth_round_trip() {
        let (space, cfg) = small();
        let g = generate(&space, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_ground_truth(dir.path(), &g.truth).unwrap();
        assert_eq!(read_ground_truth(dir.path()).unwrap(), g.truth);
    }

    #[test]
    fn full_persistence_makes_injection_layer_irrelevant() {
        let (mut space, cfg) = small();
        space.rho = 1.0;
        space.sigma = 0.0;
        space.activation_sigma = 0.0;
        let g = generate(&space, &cfg).unwrap();
        let model = g.truth.model();
        let u = [0.03, -0.02];
        let base: Vec<Vec<f64>> = (0..4).map(|l| g.dataset.layer(l).unwrap().row_f64(0)).collect();
        let mut finals = Vec::new();
        for li in 0..4 {
            let w = &g.truth.embeddings[li];
            let inj: Vec<f64> = (0..8).map(|r| w[(r, 0)] * u[0] + w[(r, 1)] * u[1]).collect();
            let mut inject = vec![None; 4];
            inject[li] = Some(inj);
            let out = model.propagate(&base, &inject);
            finals.push(model.readout(&out[3]));
        }
        for f in &finals[1..] {
            for (a, b) in f.iter().zip(&finals[0]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (space, cfg) = small();
        let g = generate(&space, &cfg).unwrap();
        let model = g.truth.model();
        let axis = g.truth.concept_axis("surprise", 2).unwrap();
        let v = SteeringVector::new("surprise", SteeringMethod::ProbeWeights, vec![2, 3], vec![axis.clone(), axis]).unwrap();
        let grad = model.readout_gradient(&v).unwrap();
        let z: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0; 8]).collect();
        let h = 1e-3;
        let inject: Vec<Option<Vec<f64>>> = (0..4)
            .map(|l| v.direction(l).map(|d| d.iter().map(|x| x * h).collect()))
            .collect();
        let y0 = model.readout(&z[3]);
        let y1 = model.readout(&model.propagate(&z, &inject)[3]);
        for c in 0..6 {
            assert!(((y1[c] - y0[c]) / h - grad[c]).abs() < 1e-6);
        }
        assert!(grad[1] > 0.0);
    }
}
