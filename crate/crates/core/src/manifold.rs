//! Max-activating selection, PCA reducer and projection into manifold space.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ActivationDataset, BeliefTrajectory, ConceptDomain, RecordKey};

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("concept {concept} not in domain {domain}")]
    UnknownConcept { domain: String, concept: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("source mismatch: {0}")]
    SourceMismatch(String),
    #[error("record {0} missing from activations")]
    MissingRecord(RecordKey),
    #[error("non-finite input")]
    NonFinite,
    #[error("manifold I/O on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, ManifoldError>;

pub const DEFAULT_N_TOTAL: usize = 1000;
pub const DEFAULT_PER_STORY_CAP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub story_id: String,
    pub t: usize,
    pub score: f64,
}

impl Selection {
    pub fn key(&self) -> RecordKey {
        RecordKey::new(self.story_id.clone(), self.t)
    }
}

/// Per-concept max-activating sentences, each list sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxActivatingSet {
    pub domain: String,
    pub per_story_cap: usize,
    pub concepts: BTreeMap<String, Vec<Selection>>,
}

/// Top `n_total` sentences by belief in `concept`, at most `per_story_cap`
/// from any one story. Ties are broken by `(story_id, t)`.
pub fn select_max_activating(
    trajectories: &[&BeliefTrajectory],
    domain: &ConceptDomain,
    concept: &str,
    n_total: usize,
    per_story_cap: usize,
) -> Result<Vec<Selection>> {
    if n_total == 0 || per_story_cap == 0 {
        return Err(ManifoldError::InvalidArgument("n_total and per_story_cap must be >= 1".into()));
    }
    let c = domain.index_of(concept).ok_or_else(|| ManifoldError::UnknownConcept {
        domain: domain.name.clone(),
        concept: concept.to_string(),
    })?;
    let mut all: Vec<Selection> = trajectories
        .iter()
        .filter(|tr| tr.domain == domain.name)
        .flat_map(|tr| {
            tr.values.iter().enumerate().map(move |(i, row)| Selection {
                story_id: tr.story_id.clone(),
                t: i + 1,
                score: row[c],
            })
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.story_id.cmp(&b.story_id))
            .then(a.t.cmp(&b.t))
    });
    let mut taken: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(n_total.min(all.len()));
    for s in all {
        if out.len() == n_total {
            break;
        }
        let count = taken.entry(s.story_id.clone()).or_insert(0);
        if *count < per_story_cap {
            *count += 1;
            out.push(s);
        }
    }
    Ok(out)
}

pub fn select_all_concepts(
    trajectories: &[&BeliefTrajectory],
    domain: &ConceptDomain,
    n_total: usize,
    per_story_cap: usize,
) -> Result<MaxActivatingSet> {
    let mut concepts = BTreeMap::new();
    for concept in &domain.concepts {
        let sel = select_max_activating(trajectories, domain, concept, n_total, per_story_cap)?;
        concepts.insert(concept.clone(), sel);
    }
    Ok(MaxActivatingSet {
        domain: domain.name.clone(),
        per_story_cap,
        concepts,
    })
}

/// A fitted map from `input_dim` features to `output_dim` manifold coordinates.
pub trait Reducer: Send + Sync {
    fn kind(&self) -> &'static str;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Mean-centred principal axes, one row per axis, descending variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

const RANK_TOL: f64 = 1e-12;

/// Fits PCA with `d` components. Uses the covariance eigenproblem when there
/// are at least as many rows as features and the Gram matrix otherwise.
pub fn fit_pca(x: &DMatrix<f64>, d: usize) -> Result<Pca> {
    let (m, p) = x.shape();
    if d == 0 || d > p {
        return Err(ManifoldError::InvalidArgument(format!("d={d} must be in 1..={p}")));
    }
    if m < d + 1 {
        return Err(ManifoldError::TooFewPoints { needed: d + 1, got: m });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ManifoldError::NonFinite);
    }
    let mean: Vec<f64> = (0..p).map(|j| x.column(j).sum() / m as f64).collect();
    let mut xc = x.clone();
    for j in 0..p {
        xc.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let denom = (m - 1) as f64;

    let (vals, mut axes) = if m >= p {
        let cov = (xc.transpose() * &xc) / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues.iter().copied().collect::<Vec<_>>());
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let axes: Vec<Vec<f64>> = order
            .iter()
            .take(d)
            .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect();
        (vals, axes)
    } else {
        let gram = (&xc * xc.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues.iter().copied().collect::<Vec<_>>());
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let top = vals.first().copied().unwrap_or(0.0);
        let mut axes = Vec::with_capacity(d);
        for (&i, &lam) in order.iter().zip(&vals).take(d) {
            if lam <= RANK_TOL * top.max(f64::MIN_POSITIVE) {
                break;
            }
            let u = eig.eigenvectors.column(i);
            let v = xc.transpose() * u;
            let n = v.norm();
            axes.push(v.iter().map(|a| a / n).collect());
        }
        (vals, axes)
    };

    let total: f64 = vals.iter().sum();
    let top = vals.first().copied().unwrap_or(0.0);
    let mut warnings = Vec::new();
    let rank = vals.iter().filter(|&&v| v > RANK_TOL * top && v > 0.0).count();
    if rank < d {
        warnings.push(format!("data has numerical rank {rank} < d={d}; trailing axes carry no variance"));
    }
    complete_orthonormal(&mut axes, d, p);
    for axis in &mut axes {
        orient(axis);
    }
    let explained_variance: Vec<f64> = vals.iter().take(d).copied().chain(std::iter::repeat(0.0)).take(d).collect();
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(Pca {
        mean,
        axes,
        explained_variance,
        explained_variance_ratio,
        warnings,
    })
}

fn descending(vals: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    order
}

/// Extends `axes` to `d` orthonormal rows by Gram-Schmidt on the standard basis.
fn complete_orthonormal(axes: &mut Vec<Vec<f64>>, d: usize, p: usize) {
    let mut e = 0;
    while axes.len() < d && e < p {
        let mut v = vec![0.0; p];
        v[e] = 1.0;
        for _ in 0..2 {
            for a in axes.iter() {
                let proj: f64 = a.iter().zip(&v).map(|(x, y)| x * y).sum();
                for (vi, ai) in v.iter_mut().zip(a) {
                    *vi -= proj * ai;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            axes.push(v.into_iter().map(|x| x / n).collect());
        }
        e += 1;
    }
}

/// Flips `axis` so its largest-magnitude entry is positive (first on ties).
fn orient(axis: &mut [f64]) {
    let mut best = 0;
    for (i, v) in axis.iter().enumerate() {
        if v.abs() > axis[best].abs() {
            best = i;
        }
    }
    if axis[best] < 0.0 {
        axis.iter_mut().for_each(|v| *v = -*v);
    }
}

impl Reducer for Pca {
    fn kind(&self) -> &'static str {
        "pca"
    }

    fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn output_dim(&self) -> usize {
        self.axes.len()
    }

    fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(ManifoldError::DimensionMismatch {
                expected: self.mean.len(),
                actual: x.len(),
            });
        }
        Ok(self
            .axes
            .iter()
            .map(|a| a.iter().zip(x.iter().zip(&self.mean)).map(|(w, (v, m))| w * (v - m)).sum())
            .collect())
    }
}

/// Projects every row of `x`; rows are processed in parallel.
pub fn project<R: Reducer + ?Sized>(reducer: &R, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    if x.ncols() != reducer.input_dim() {
        return Err(ManifoldError::DimensionMismatch {
            expected: reducer.input_dim(),
            actual: x.ncols(),
        });
    }
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            reducer.transform_row(&row)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ManifoldSource {
    Behavior { domain: String },
    Activations { domain: String, layer: usize },
}

impl ManifoldSource {
    pub fn domain(&self) -> &str {
        match self {
            ManifoldSource::Behavior { domain } | ManifoldSource::Activations { domain, .. } => domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub story_id: String,
    pub t: usize,
    pub coords: Vec<f64>,
    pub label: String,
}

/// A fitted reducer together with its embedded training points.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifold {
    pub source: ManifoldSource,
    pub reducer: Pca,
    pub points: Vec<EmbeddedPoint>,
}

impl Manifold {
    pub fn d(&self) -> usize {
        self.reducer.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.reducer.input_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedTrajectory {
    pub story_id: String,
    pub coords: Vec<Vec<f64>>,
}

fn fit_on(
    source: ManifoldSource,
    labelled: Vec<(RecordKey, String)>,
    rows: Vec<Vec<f64>>,
    d: usize,
) -> Result<Manifold> {
    let p = rows.first().map_or(0, Vec::len);
    let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let reducer = fit_pca(&x, d)?;
    for w in &reducer.warnings {
        log::warn!("{w}");
    }
    let coords = project(&reducer, &x)?;
    let points = labelled
        .into_iter()
        .zip(coords)
        .map(|((key, label), coords)| EmbeddedPoint {
            story_id: key.story_id,
            t: key.t,
            coords,
            label,
        })
        .collect();
    Ok(Manifold {
        source,
        reducer,
        points,
    })
}

fn selected_keys(set: &MaxActivatingSet, domain: &ConceptDomain) -> Vec<(RecordKey, String)> {
    domain
        .concepts
        .iter()
        .flat_map(|c| set.concepts.get(c).into_iter().flatten().map(move |s| (s.key(), c.clone())))
        .collect()
}

/// Fits 𝓜_y: PCA over belief vectors of the max-activating sentences.
pub fn fit_behavior_manifold(
    trajectories: &[&BeliefTrajectory],
    domain: &ConceptDomain,
    selection: &MaxActivatingSet,
    d: usize,
) -> Result<Manifold> {
    let by_story: HashMap<&str, &BeliefTrajectory> = trajectories
        .iter()
        .filter(|t| t.domain == domain.name)
        .map(|t| (t.story_id.as_str(), *t))
        .collect();
    let labelled = selected_keys(selection, domain);
    let rows = labelled
        .iter()
        .map(|(key, _)| {
            by_story
                .get(key.story_id.as_str())
                .filter(|tr| key.t >= 1 && key.t <= tr.len())
                .map(|tr| tr.values[key.t - 1].clone())
                .ok_or_else(|| ManifoldError::MissingRecord(key.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    fit_on(
        ManifoldSource::Behavior {
            domain: domain.name.clone(),
        },
        labelled,
        rows,
        d,
    )
}

/// Fits 𝓜_z: PCA over layer activations of the max-activating sentences.
pub fn fit_activation_manifold(
    acts: &ActivationDataset,
    domain: &ConceptDomain,
    selection: &MaxActivatingSet,
    d: usize,
) -> Result<Manifold> {
    let pos = acts.positions();
    let labelled = selected_keys(selection, domain);
    let rows = labelled
        .iter()
        .map(|(key, _)| {
            pos.get(key)
                .map(|&i| acts.row_f64(i))
                .ok_or_else(|| ManifoldError::MissingRecord(key.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    fit_on(
        ManifoldSource::Activations {
            domain: domain.name.clone(),
            layer: acts.layer(),
        },
        labelled,
        rows,
        d,
    )
}

/// Projects `y_1..y_T` of a behavior trajectory.
pub fn embed_behavior(manifold: &Manifold, trajectory: &BeliefTrajectory) -> Result<EmbeddedTrajectory> {
    match &manifold.source {
        ManifoldSource::Behavior { domain } if *domain == trajectory.domain => {}
        other => {
            return Err(ManifoldError::SourceMismatch(format!(
                "manifold source {other:?} cannot embed behavior of domain {}",
                trajectory.domain
            )))
        }
    }
    let coords = trajectory
        .values
        .iter()
        .map(|y| manifold.reducer.transform_row(y))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddedTrajectory {
        story_id: trajectory.story_id.clone(),
        coords,
    })
}

/// Projects the activations `z_{l,1..T}` of one story, in sentence order.
pub fn embed_activations(manifold: &Manifold, acts: &ActivationDataset, story_id: &str) -> Result<EmbeddedTrajectory> {
    match &manifold.source {
        ManifoldSource::Activations { layer, .. } if *layer == acts.layer() => {}
        other => {
            return Err(ManifoldError::SourceMismatch(format!(
                "manifold source {other:?} cannot embed activations of layer {}",
                acts.layer()
            )))
        }
    }
    let mut rows: Vec<(usize, usize)> = acts
        .index()
        .iter()
        .enumerate()
        .filter(|(_, k)| k.story_id == story_id)
        .map(|(i, k)| (k.t, i))
        .collect();
    if rows.is_empty() {
        return Err(ManifoldError::MissingRecord(RecordKey::new(story_id, 1)));
    }
    rows.sort_unstable();
    let coords = rows
        .iter()
        .map(|&(_, i)| manifold.reducer.transform_row(&acts.row_f64(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddedTrajectory {
        story_id: story_id.to_string(),
        coords,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifoldHeader {
    source: ManifoldSource,
    kind: String,
    d: usize,
    input_dim: usize,
    mean: Vec<f64>,
    explained_variance: Vec<f64>,
    explained_variance_ratio: Vec<f64>,
    axes_file: String,
    points_file: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

fn io_err(path: &Path) -> impl Fn(String) -> ManifoldError + '_ {
    move |message| ManifoldError::Io {
        path: path.to_path_buf(),
        message,
    }
}

/// Writes `<name>.json`, `<name>_axes.f32` (`d x p` row-major) and
/// `<name>_points.csv`. Returns the header path.
pub fn write_manifold(dir: &Path, name: &str, manifold: &Manifold) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir)(e.to_string()))?;
    let axes_file = format!("{name}_axes.f32");
    let points_file = format!("{name}_points.csv");
    let r = &manifold.reducer;
    let header = ManifoldHeader {
        source: manifold.source.clone(),
        kind: r.kind().to_string(),
        d: r.output_dim(),
        input_dim: r.input_dim(),
        mean: r.mean.clone(),
        explained_variance: r.explained_variance.clone(),
        explained_variance_ratio: r.explained_variance_ratio.clone(),
        axes_file: axes_file.clone(),
        points_file: points_file.clone(),
        warnings: r.warnings.clone(),
    };
    let bytes: Vec<u8> = r.axes.iter().flatten().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let apath = dir.join(&axes_file);
    fs::write(&apath, bytes).map_err(|e| io_err(&apath)(e.to_string()))?;
    let ppath = dir.join(&points_file);
    write_points_csv(&ppath, &manifold.points, manifold.d())?;
    let hpath = dir.join(format!("{name}.json"));
    let mut json = serde_json::to_vec_pretty(&header).map_err(|e| io_err(&hpath)(e.to_string()))?;
    json.push(b'\n');
    fs::write(&hpath, json).map_err(|e| io_err(&hpath)(e.to_string()))?;
    Ok(hpath)
}

pub fn write_points_csv(path: &Path, points: &[EmbeddedPoint], d: usize) -> Result<()> {
    let err = io_err(path);
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut head = vec!["story_id".to_string(), "t".to_string()];
    head.extend((0..d).map(|i| format!("dim_{i}")));
    head.push("label".into());
    w.write_record(&head).map_err(|e| err(e.to_string()))?;
    for p in points {
        let mut rec = vec![p.story_id.clone(), p.t.to_string()];
        rec.extend(p.coords.iter().map(|v| v.to_string()));
        rec.push(p.label.clone());
        w.write_record(&rec).map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}

pub fn read_points_csv(path: &Path) -> Result<Vec<EmbeddedPoint>> {
    let err = io_err(path);
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let width = r.headers().map_err(|e| err(e.to_string()))?.len();
    if width < 4 {
        return Err(err(format!("expected at least 4 columns, found {width}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let t = rec[1].parse::<usize>().map_err(|e| err(e.to_string()))?;
        let coords = (2..width - 1).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
        out.push(EmbeddedPoint {
            story_id: rec[0].to_string(),
            t,
            coords,
            label: rec[width - 1].to_string(),
        });
    }
    Ok(out)
}

pub fn read_manifold(header_path: &Path) -> Result<Manifold> {
    let err = io_err(header_path);
    let text = fs::read(header_path).map_err(|e| err(e.to_string()))?;
    let h: ManifoldHeader = serde_json::from_slice(&text).map_err(|e| err(e.to_string()))?;
    if h.kind != "pca" {
        return Err(err(format!("unsupported reducer kind {:?}", h.kind)));
    }
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&h.axes_file)).map_err(|e| err(e.to_string()))?;
    if bytes.len() != 4 * h.d * h.input_dim || h.mean.len() != h.input_dim {
        return Err(err(format!("axes file has {} bytes for {}x{}", bytes.len(), h.d, h.input_dim)));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let axes = flat.chunks(h.input_dim).map(<[f64]>::to_vec).collect();
    let points = read_points_csv(&dir.join(&h.points_file))?;
    if points.iter().any(|p| p.coords.len() != h.d) {
        return Err(err("points width does not match d".into()));
    }
    Ok(Manifold {
        source: h.source,
        reducer: Pca {
            mean: h.mean,
            axes,
            explained_variance: h.explained_variance,
            explained_variance_ratio: h.explained_variance_ratio,
            warnings: h.warnings,
        },
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: &str, ys: &[f64]) -> BeliefTrajectory {
        BeliefTrajectory {
            story_id: id.into(),
            domain: "d".into(),
            values: ys.iter().map(|&y| vec![y, 1.0 - y]).collect(),
            raw: None,
        }
    }

    fn domain() -> ConceptDomain {
        ConceptDomain::new("d", ["a", "b"]).unwrap()
    }

    #[test]
    fn cap_one_picks_argmax() {
        let tr = traj("s", &[0.2, 0.9, 0.5]);
        let sel = select_max_activating(&[&tr], &domain(), "a", 10, 1).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].t, 2);
    }

    #[test]
    fn cap_binds() {
        let tr = traj("s", &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let sel = select_max_activating(&[&tr], &domain(), "a", 5, 3).unwrap();
        assert_eq!(sel.iter().map(|s| s.t).collect::<Vec<_>>(), vec![6, 5, 4]);
    }

    #[test]
    fn ties_break_by_story_then_t() {
        let a = traj("b", &[0.5, 0.5]);
        let b = traj("a", &[0.5]);
        let sel = select_max_activating(&[&a, &b], &domain(), "a", 3, 3).unwrap();
        let keys: Vec<(String, usize)> = sel.iter().map(|s| (s.story_id.clone(), s.t)).collect();
        assert_eq!(keys, vec![("a".into(), 1), ("b".into(), 1), ("b".into(), 2)]);
    }

    #[test]
    fn selection_errors() {
        let tr = traj("s", &[0.5]);
        assert!(matches!(
            select_max_activating(&[&tr], &domain(), "zz", 1, 1),
            Err(ManifoldError::UnknownConcept { .. })
        ));
        assert!(select_max_activating(&[&tr], &domain(), "a", 0, 1).is_err());
        assert!(select_max_activating(&[&tr], &domain(), "a", 1, 0).is_err());
    }

    #[test]
    fn collinear_points_have_unit_ratio() {
        let x = DMatrix::from_fn(5, 2, |i, j| (i + 1) as f64 * (j + 1) as f64);
        let pca = fit_pca(&x, 1).unwrap();
        assert!((pca.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        let s = 1.0 / 5f64.sqrt();
        assert!((pca.axes[0][0] - s).abs() < 1e-12 && (pca.axes[0][1] - 2.0 * s).abs() < 1e-12);
    }

    #[test]
    fn full_rank_reconstruction() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.3, -0.2, 1.1, 0.7, -0.9, -1.4, 0.1]);
        let pca = fit_pca(&x, 2).unwrap();
        let coords = project(&pca, &x).unwrap();
        for (i, c) in coords.iter().enumerate() {
            for j in 0..2 {
                let back = pca.mean[j] + c[0] * pca.axes[0][j] + c[1] * pca.axes[1][j];
                assert!((back - x[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_maps_to_origin_and_bad_shapes_fail() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 4.0, 2.0, 0.0, 1.0]);
        let pca = fit_pca(&x, 2).unwrap();
        let origin = pca.transform_row(&pca.mean).unwrap();
        assert!(origin.iter().all(|v| v.abs() < 1e-15));
        assert!(fit_pca(&x, 4).is_err());
        assert!(fit_pca(&x, 0).is_err());
        assert!(matches!(fit_pca(&x.rows(0, 2).into_owned(), 2), Err(ManifoldError::TooFewPoints { .. })));
        assert!(matches!(pca.transform_row(&[1.0]), Err(ManifoldError::DimensionMismatch { .. })));
    }

    #[test]
    fn rank_deficiency_warns() {
        let x = DMatrix::from_fn(6, 3, |i, j| if j == 0 { i as f64 } else { 0.0 });
        let pca = fit_pca(&x, 2).unwrap();
        assert_eq!(pca.warnings.len(), 1);
        let dot: f64 = pca.axes[0].iter().zip(&pca.axes[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn gram_path_matches_covariance_path() {
        // 4 rows, 6 columns: the Gram route; compare with the same data padded
        // by its own reflection about the mean (same covariance up to scale).
        let x = DMatrix::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - (j as f64) * 0.3 * i as f64);
        let pca = fit_pca(&x, 2).unwrap();
        let mut cov_pca_rows = Vec::new();
        for i in 0..4 {
            cov_pca_rows.push(x.row(i).iter().copied().collect::<Vec<_>>());
        }
        let mean: Vec<f64> = (0..6).map(|j| x.column(j).mean()).collect();
        for i in 0..4 {
            cov_pca_rows.push((0..6).map(|j| 2.0 * mean[j] - x[(i, j)]).collect());
        }
        let big = DMatrix::from_fn(8, 6, |i, j| cov_pca_rows[i][j]);
        let reference = fit_pca(&big, 2).unwrap();
        for a in 0..2 {
            for j in 0..6 {
                assert!((pca.axes[a][j] - reference.axes[a][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn embed_checks_source() {
        let trs = [traj("s", &[0.1, 0.9, 0.4]), traj("u", &[0.3, 0.2, 0.8])];
        let refs: Vec<&BeliefTrajectory> = trs.iter().collect();
        let sel = select_all_concepts(&refs, &domain(), 10, 3).unwrap();
        let m = fit_behavior_manifold(&refs, &domain(), &sel, 1).unwrap();
        let e = embed_behavior(&m, &trs[0]).unwrap();
        assert_eq!(e.coords.len(), 3);
        let acts = ActivationDataset::from_rows(2, &[vec![0.0, 1.0]], vec![RecordKey::new("s", 1)]).unwrap();
        assert!(matches!(embed_activations(&m, &acts, "s"), Err(ManifoldError::SourceMismatch(_))));
    }

    #[test]
    fn file_round_trip() {
        let trs = [traj("s,1", &[0.1, 0.9, 0.4]), traj("u", &[0.3, 0.2, 0.8])];
        let refs: Vec<&BeliefTrajectory> = trs.iter().collect();
        let sel = select_all_concepts(&refs, &domain(), 10, 3).unwrap();
        let m = fit_behavior_manifold(&refs, &domain(), &sel, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifold(dir.path(), "behavior_d", &m).unwrap();
        let back = read_manifold(&path).unwrap();
        assert_eq!(back.points, m.points);
        assert_eq!(back.source, m.source);
        assert_eq!(back.reducer.mean, m.reducer.mean);
    }
}
