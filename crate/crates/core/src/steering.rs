//! Steering vectors, additive interventions and entanglement analysis.
//!
//! The module never runs a model. Effects are measured either through an
//! [`InterventionModel`] (the synthetic oracle implements one) or by comparing
//! a base behavior dataset against steered runs captured elsewhere.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ActivationDataset, BeliefTrajectory, ConceptDomain, RecordKey};
use crate::geometry::DistanceMatrix;
use crate::probes::Probe;
use crate::stats;

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("zero direction: {0}")]
    ZeroDirection(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value")]
    NonFinite,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid layer span: {0}")]
    InvalidSpan(String),
    #[error("record sets differ: {0}")]
    RecordMismatch(String),
    #[error("missing steered run for concept {0}")]
    MissingTarget(String),
    #[error("missing probe for layer {0}")]
    MissingProbe(usize),
    #[error("missing activations for layer {0}")]
    MissingLayer(usize),
    #[error("concept sets differ: {0}")]
    ConceptMismatch(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("steering bundle I/O on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Probe(#[from] crate::probes::ProbeError),
}

pub type Result<T> = std::result::Result<T, SteeringError>;

/// Default span length for probe-weight steering.
pub const DEFAULT_PROBE_SPAN: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMethod {
    ProbeWeights,
    DiffInMeans,
}

impl SteeringMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SteeringMethod::ProbeWeights => "probe_weights",
            SteeringMethod::DiffInMeans => "diff_in_means",
        }
    }
}

/// Unit directions `v_{c,l}` over a contiguous span of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub concept: String,
    pub method: SteeringMethod,
    pub layers: Vec<usize>,
    pub directions: Vec<Vec<f64>>,
    /// Norm of each direction before normalization.
    pub norms: Vec<f64>,
}

impl SteeringVector {
    pub fn new(
        concept: impl Into<String>,
        method: SteeringMethod,
        layers: Vec<usize>,
        raw: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(SteeringError::InvalidSpan("empty".into()));
        }
        if layers.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(SteeringError::InvalidSpan(format!("{layers:?} is not contiguous")));
        }
        if raw.len() != layers.len() {
            return Err(SteeringError::DimensionMismatch {
                expected: layers.len(),
                actual: raw.len(),
            });
        }
        let mut directions = Vec::with_capacity(raw.len());
        let mut norms = Vec::with_capacity(raw.len());
        for (l, v) in layers.iter().zip(raw) {
            let (u, n) = normalize(&v).map_err(|_| SteeringError::ZeroDirection(format!("layer {l}")))?;
            directions.push(u);
            norms.push(n);
        }
        let dim = directions[0].len();
        if let Some(d) = directions.iter().find(|d| d.len() != dim) {
            return Err(SteeringError::DimensionMismatch {
                expected: dim,
                actual: d.len(),
            });
        }
        Ok(SteeringVector {
            concept: concept.into(),
            method,
            layers,
            directions,
            norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.directions[0].len()
    }

    pub fn direction(&self, layer: usize) -> Option<&[f64]> {
        self.layers.iter().position(|&l| l == layer).map(|i| self.directions[i].as_slice())
    }
}

fn normalize(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(SteeringError::NonFinite);
    }
    let n = stats::norm(v);
    if n == 0.0 {
        return Err(SteeringError::ZeroDirection("zero vector".into()));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// `θ / ‖θ‖` in the probe's raw activation basis.
pub fn vector_from_probe(probe: &Probe) -> Result<Vec<f64>> {
    normalize(&probe.model.raw_weights())
        .map(|(u, _)| u)
        .map_err(|_| SteeringError::ZeroDirection(format!("probe {} at layer {}", probe.concept, probe.layer)))
}

/// Probe-weight steering vector over `layers`, one probe per layer.
pub fn probe_steering_vector(probes: &[&Probe], concept: &str, layers: &[usize]) -> Result<SteeringVector> {
    let raw = layers
        .iter()
        .map(|&l| {
            probes
                .iter()
                .find(|p| p.layer == l && p.concept == concept)
                .map(|p| p.model.raw_weights())
                .ok_or(SteeringError::MissingProbe(l))
        })
        .collect::<Result<Vec<_>>>()?;
    SteeringVector::new(concept, SteeringMethod::ProbeWeights, layers.to_vec(), raw)
}

/// Contiguous span of up to `len` layers starting at `start`, clipped to the
/// available layers.
pub fn clip_span(start: usize, len: usize, available: &[usize]) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(SteeringError::InvalidSpan("length 0".into()));
    }
    let span: Vec<usize> = (start..start + len).take_while(|l| available.contains(l)).collect();
    if span.is_empty() {
        return Err(SteeringError::InvalidSpan(format!("layer {start} not available")));
    }
    Ok(span)
}

/// Normalized difference of row means, `mean(pos) - mean(neg)`.
pub fn vector_diff_in_means(pos: &DMatrix<f64>, neg: &DMatrix<f64>) -> Result<Vec<f64>> {
    if pos.nrows() == 0 {
        return Err(SteeringError::Empty("positive set"));
    }
    if neg.nrows() == 0 {
        return Err(SteeringError::Empty("negative set"));
    }
    if pos.ncols() != neg.ncols() {
        return Err(SteeringError::DimensionMismatch {
            expected: pos.ncols(),
            actual: neg.ncols(),
        });
    }
    let diff: Vec<f64> = (0..pos.ncols()).map(|j| pos.column(j).mean() - neg.column(j).mean()).collect();
    normalize(&diff)
        .map(|(u, _)| u)
        .map_err(|_| SteeringError::ZeroDirection("positive and negative means coincide".into()))
}

/// Single-layer difference-in-means vector from two record sets.
pub fn dim_steering_vector(
    acts: &ActivationDataset,
    concept: &str,
    pos: &[RecordKey],
    neg: &[RecordKey],
) -> Result<SteeringVector> {
    let positions = acts.positions();
    let gather = |keys: &[RecordKey]| -> Result<DMatrix<f64>> {
        let rows = keys
            .iter()
            .map(|k| {
                positions
                    .get(k)
                    .map(|&i| acts.row_f64(i))
                    .ok_or_else(|| SteeringError::RecordMismatch(format!("{k} not in layer {}", acts.layer())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(rows.len(), acts.dim(), |i, j| rows[i][j]))
    };
    let raw: Vec<f64> = {
        let (p, n) = (gather(pos)?, gather(neg)?);
        if p.nrows() == 0 || n.nrows() == 0 {
            return Err(SteeringError::Empty("contrast set"));
        }
        (0..acts.dim()).map(|j| p.column(j).mean() - n.column(j).mean()).collect()
    };
    SteeringVector::new(concept, SteeringMethod::DiffInMeans, vec![acts.layer()], vec![raw])
}

/// `z + α·v`.
pub fn apply_steering(z: &[f64], alpha: f64, v: &[f64]) -> Result<Vec<f64>> {
    if z.len() != v.len() {
        return Err(SteeringError::DimensionMismatch {
            expected: z.len(),
            actual: v.len(),
        });
    }
    if !alpha.is_finite() {
        return Err(SteeringError::NonFinite);
    }
    if alpha == 0.0 {
        return Ok(z.to_vec());
    }
    Ok(z.iter().zip(v).map(|(a, b)| a + alpha * b).collect())
}

/// A forward model that can be intervened on layer by layer.
pub trait InterventionModel: Sync {
    /// Layers in forward order.
    fn layers(&self) -> &[usize];
    fn dim(&self) -> usize;
    /// Activations at every layer after adding `inject[i]` at `layers()[i]`
    /// and letting the change propagate forward. `base[i]` is the unsteered
    /// activation at `layers()[i]`.
    fn propagate(&self, base: &[Vec<f64>], inject: &[Option<Vec<f64>>]) -> Vec<Vec<f64>>;
    /// Beliefs per concept read from the final layer's activation.
    fn readout(&self, final_activation: &[f64]) -> Vec<f64>;
}

/// Outcome of simulating one steering configuration on every record.
#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub concept: String,
    pub alpha: f64,
    pub method: SteeringMethod,
    pub layers: Vec<ActivationDataset>,
    pub base_behavior: Vec<BeliefTrajectory>,
    pub steered_behavior: Vec<BeliefTrajectory>,
}

fn check_layer_stack<'a>(model: &dyn InterventionModel, base: &[&'a ActivationDataset]) -> Result<Vec<&'a ActivationDataset>> {
    let stack = model
        .layers()
        .iter()
        .map(|&l| base.iter().find(|a| a.layer() == l).copied().ok_or(SteeringError::MissingLayer(l)))
        .collect::<Result<Vec<_>>>()?;
    let first = stack[0];
    for a in &stack {
        if a.dim() != model.dim() {
            return Err(SteeringError::DimensionMismatch {
                expected: model.dim(),
                actual: a.dim(),
            });
        }
        if a.index() != first.index() {
            return Err(SteeringError::RecordMismatch(format!("layer {} row order differs", a.layer())));
        }
    }
    Ok(stack)
}

fn trajectories_from_rows(domain: &str, index: &[RecordKey], beliefs: Vec<Vec<f64>>) -> Vec<BeliefTrajectory> {
    let mut by_story: BTreeMap<&str, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    for (key, y) in index.iter().zip(beliefs) {
        by_story.entry(key.story_id.as_str()).or_default().push((key.t, y));
    }
    by_story
        .into_iter()
        .map(|(story, mut rows)| {
            rows.sort_by_key(|r| r.0);
            BeliefTrajectory {
                story_id: story.to_string(),
                domain: domain.to_string(),
                values: rows.into_iter().map(|r| r.1).collect(),
                raw: None,
            }
        })
        .collect()
}

/// Steers every record by `alpha * vector` and reads beliefs through `model`.
/// Base beliefs are the model's readout of the unsteered activations, so
/// `alpha = 0` yields bitwise-identical activations and zero effect.
pub fn simulate_steering(
    model: &dyn InterventionModel,
    domain: &ConceptDomain,
    base: &[&ActivationDataset],
    vector: &SteeringVector,
    alpha: f64,
) -> Result<SimulatedRun> {
    if !alpha.is_finite() {
        return Err(SteeringError::NonFinite);
    }
    let stack = check_layer_stack(model, base)?;
    if vector.dim() != model.dim() {
        return Err(SteeringError::DimensionMismatch {
            expected: model.dim(),
            actual: vector.dim(),
        });
    }
    for l in &vector.layers {
        if !model.layers().contains(l) {
            return Err(SteeringError::InvalidSpan(format!("layer {l} not in model")));
        }
    }
    let n = stack[0].len();
    let inject: Vec<Option<Vec<f64>>> = model
        .layers()
        .iter()
        .map(|&l| vector.direction(l).map(|v| v.iter().map(|x| alpha * x).collect()))
        .collect();
    let rows: Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let z: Vec<Vec<f64>> = stack.iter().map(|a| a.row_f64(i)).collect();
            let base_y = model.readout(z.last().expect("non-empty stack"));
            if alpha == 0.0 {
                let y = base_y.clone();
                return (z, base_y, y);
            }
            let steered = model.propagate(&z, &inject);
            let y = model.readout(steered.last().expect("non-empty stack"));
            (steered, base_y, y)
        })
        .collect();
    let q = model.dim();
    let mut layer_rows: Vec<Vec<f32>> = vec![Vec::with_capacity(n * q); stack.len()];
    let mut base_y = Vec::with_capacity(n);
    let mut steered_y = Vec::with_capacity(n);
    for (z, b, s) in rows {
        for (li, zl) in z.into_iter().enumerate() {
            if alpha == 0.0 {
                layer_rows[li].extend_from_slice(stack[li].row(base_y.len()));
            } else {
                layer_rows[li].extend(zl.into_iter().map(|v| v as f32));
            }
        }
        base_y.push(b);
        steered_y.push(s);
    }
    let index = stack[0].index().to_vec();
    let layers = stack
        .iter()
        .zip(layer_rows)
        .map(|(a, rows)| ActivationDataset::new(a.layer(), q, rows, index.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(SimulatedRun {
        concept: vector.concept.clone(),
        alpha,
        method: vector.method,
        layers,
        base_behavior: trajectories_from_rows(&domain.name, &index, base_y),
        steered_behavior: trajectories_from_rows(&domain.name, &index, steered_y),
    })
}

fn behavior_map<'a>(trs: &'a [&'a BeliefTrajectory]) -> HashMap<&'a str, &'a BeliefTrajectory> {
    trs.iter().map(|t| (t.story_id.as_str(), *t)).collect()
}

/// Mean over records of `y_steered - y_base` for every concept.
pub fn steering_effects(base: &[&BeliefTrajectory], steered: &[&BeliefTrajectory]) -> Result<(Vec<f64>, usize)> {
    let b = behavior_map(base);
    let s = behavior_map(steered);
    if b.len() != s.len() {
        return Err(SteeringError::RecordMismatch(format!("{} base stories vs {} steered", b.len(), s.len())));
    }
    let mut sums: Vec<f64> = Vec::new();
    let mut n = 0usize;
    let mut ids: Vec<&&str> = b.keys().collect();
    ids.sort();
    for id in ids {
        let bt = b[*id];
        let st = s
            .get(*id)
            .ok_or_else(|| SteeringError::RecordMismatch(format!("story {id} missing from steered run")))?;
        if bt.len() != st.len() {
            return Err(SteeringError::RecordMismatch(format!("story {id}: T differs")));
        }
        for (yb, ys) in bt.values.iter().zip(&st.values) {
            if yb.len() != ys.len() {
                return Err(SteeringError::RecordMismatch(format!("story {id}: concept count differs")));
            }
            if sums.is_empty() {
                sums = vec![0.0; yb.len()];
            }
            for (acc, (x, y)) in sums.iter_mut().zip(yb.iter().zip(ys)) {
                *acc += y - x;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(SteeringError::Empty("behavior"));
    }
    Ok((sums.into_iter().map(|v| v / n as f64).collect(), n))
}

/// Mean change in concept `c_query` between base and steered behavior.
pub fn steering_effect(base: &[&BeliefTrajectory], steered: &[&BeliefTrajectory], c_query: usize) -> Result<f64> {
    let (effects, _) = steering_effects(base, steered)?;
    effects
        .get(c_query)
        .copied()
        .ok_or(SteeringError::DimensionMismatch {
            expected: effects.len(),
            actual: c_query + 1,
        })
}

/// `E[c][c']`: mean change in `y_{c'}` when steering toward `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementMatrix {
    pub concepts: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl EntanglementMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("steered");
        for c in &self.concepts {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.concepts.iter().zip(&self.values) {
            out.push_str(c);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn entanglement_matrix(
    base: &[&BeliefTrajectory],
    steered: &BTreeMap<String, Vec<BeliefTrajectory>>,
    domain: &ConceptDomain,
) -> Result<EntanglementMatrix> {
    let mut values = Vec::with_capacity(domain.k());
    let mut counts = Vec::with_capacity(domain.k());
    for c in &domain.concepts {
        let run = steered.get(c).ok_or_else(|| SteeringError::MissingTarget(c.clone()))?;
        let refs: Vec<&BeliefTrajectory> = run.iter().collect();
        let (row, n) = steering_effects(base, &refs)?;
        if row.len() != domain.k() {
            return Err(SteeringError::DimensionMismatch {
                expected: domain.k(),
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SteeringError::NonFinite);
        }
        values.push(row);
        counts.push(n);
    }
    Ok(EntanglementMatrix {
        concepts: domain.concepts.clone(),
        values,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

fn ols(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let mx = stats::mean(x);
    let my = stats::mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some(LinearFit {
        intercept: my - slope * mx,
        slope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub steered: String,
    pub queried: String,
    pub distance: f64,
    pub effect: f64,
    pub predicted: f64,
}

/// Relationship between off-diagonal entanglement and centroid distance.
/// Closer concepts are expected to show larger co-effects, so
/// `r_neg_distance` is positive when the expectation holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementPrediction {
    pub r_distance: f64,
    pub r_neg_distance: f64,
    pub fit: LinearFit,
    /// Row `c` predicted from a line fitted on cells not involving `c`.
    /// Empty when `k < 3`.
    pub leave_one_out: Vec<CellPrediction>,
    pub leave_one_out_r: Option<f64>,
}

pub fn predict_entanglement(e: &EntanglementMatrix, d: &DistanceMatrix) -> Result<EntanglementPrediction> {
    if e.concepts != d.concepts {
        return Err(SteeringError::ConceptMismatch(format!("{:?} vs {:?}", e.concepts, d.concepts)));
    }
    let k = e.concepts.len();
    let cells: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    if cells.len() < 2 {
        return Err(SteeringError::DegenerateVariance("fewer than two off-diagonal cells".into()));
    }
    let xs: Vec<f64> = cells.iter().map(|&(i, j)| d.values[i][j]).collect();
    let ys: Vec<f64> = cells.iter().map(|&(i, j)| e.values[i][j]).collect();
    let r = stats::pearson(&xs, &ys)
        .ok_or_else(|| SteeringError::DegenerateVariance("effects or distances are constant off the diagonal".into()))?;
    let fit = ols(&xs, &ys).ok_or_else(|| SteeringError::DegenerateVariance("constant distances".into()))?;

    let mut leave_one_out = Vec::new();
    if k >= 3 {
        for c in 0..k {
            let train: Vec<usize> = (0..cells.len()).filter(|&n| cells[n].0 != c && cells[n].1 != c).collect();
            let tx: Vec<f64> = train.iter().map(|&n| xs[n]).collect();
            let ty: Vec<f64> = train.iter().map(|&n| ys[n]).collect();
            let Some(f) = ols(&tx, &ty) else {
                continue;
            };
            for (n, &(i, j)) in cells.iter().enumerate() {
                if i == c {
                    leave_one_out.push(CellPrediction {
                        steered: e.concepts[i].clone(),
                        queried: e.concepts[j].clone(),
                        distance: xs[n],
                        effect: ys[n],
                        predicted: f.predict(xs[n]),
                    });
                }
            }
        }
    }
    let leave_one_out_r = if leave_one_out.len() >= 2 {
        let a: Vec<f64> = leave_one_out.iter().map(|p| p.effect).collect();
        let b: Vec<f64> = leave_one_out.iter().map(|p| p.predicted).collect();
        stats::pearson(&a, &b)
    } else {
        None
    };
    Ok(EntanglementPrediction {
        r_distance: r,
        r_neg_distance: -r,
        fit,
        leave_one_out,
        leave_one_out_r,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub mean: f64,
    pub n: usize,
}

fn cell_mean(v: &[f64]) -> Option<CellMean> {
    (!v.is_empty()).then(|| CellMean {
        mean: stats::mean(v),
        n: v.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffects {
    pub on_target: CellMean,
    /// `None` when both clusters are singletons.
    pub within_cluster: Option<CellMean>,
    pub cross_cluster: CellMean,
    pub epsilon: f64,
    pub cross_cluster_negligible: bool,
}

/// Splits off-diagonal entanglement into within- and cross-cluster cells.
pub fn cluster_effect_analysis(e: &EntanglementMatrix, split: &(Vec<String>, Vec<String>), epsilon: f64) -> Result<ClusterEffects> {
    if split.0.is_empty() || split.1.is_empty() {
        return Err(SteeringError::InvalidSplit("a cluster is empty".into()));
    }
    let mut side = vec![None; e.concepts.len()];
    for (s, group) in [&split.0, &split.1].into_iter().enumerate() {
        for c in group {
            let i = e
                .concepts
                .iter()
                .position(|x| x == c)
                .ok_or_else(|| SteeringError::InvalidSplit(format!("{c} not in matrix")))?;
            if side[i].replace(s).is_some() {
                return Err(SteeringError::InvalidSplit(format!("{c} in both clusters")));
            }
        }
    }
    if let Some(i) = side.iter().position(Option::is_none) {
        return Err(SteeringError::InvalidSplit(format!("{} not covered", e.concepts[i])));
    }
    let (mut on, mut within, mut cross) = (Vec::new(), Vec::new(), Vec::new());
    for (i, row) in e.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                on.push(v);
            } else if side[i] == side[j] {
                within.push(v);
            } else {
                cross.push(v);
            }
        }
    }
    let cross_cluster = cell_mean(&cross).expect("both clusters non-empty");
    Ok(ClusterEffects {
        on_target: cell_mean(&on).expect("k >= 2"),
        within_cluster: cell_mean(&within),
        cross_cluster_negligible: cross_cluster.mean.abs() < epsilon,
        cross_cluster,
        epsilon,
    })
}

/// Effect per queried concept for each magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeCurve {
    pub concept: String,
    pub concepts: Vec<String>,
    pub alphas: Vec<f64>,
    /// `effects[i][c']` for `alphas[i]`.
    pub effects: Vec<Vec<f64>>,
}

pub fn magnitude_sweep(
    model: &dyn InterventionModel,
    domain: &ConceptDomain,
    base: &[&ActivationDataset],
    vector: &SteeringVector,
    alphas: &[f64],
) -> Result<MagnitudeCurve> {
    if alphas.is_empty() {
        return Err(SteeringError::Empty("alpha grid"));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(SteeringError::NonFinite);
    }
    let effects = alphas
        .par_iter()
        .map(|&a| {
            let run = simulate_steering(model, domain, base, vector, a)?;
            let b: Vec<&BeliefTrajectory> = run.base_behavior.iter().collect();
            let s: Vec<&BeliefTrajectory> = run.steered_behavior.iter().collect();
            steering_effects(&b, &s).map(|r| r.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MagnitudeCurve {
        concept: vector.concept.clone(),
        concepts: domain.concepts.clone(),
        alphas: alphas.to_vec(),
        effects,
    })
}

/// Mean calibrated probe prediction per layer on base and steered rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceCurve {
    pub concept: String,
    pub layers: Vec<usize>,
    pub base_mean: Vec<f64>,
    pub steered_mean: Vec<f64>,
    pub delta: Vec<f64>,
    /// `delta` divided by `delta` at `reference_layer`.
    pub relative: Vec<f64>,
    pub reference_layer: usize,
}

pub fn layer_persistence(
    probes: &[&Probe],
    concept: &str,
    base: &[&ActivationDataset],
    steered: &[&ActivationDataset],
    reference_layer: usize,
) -> Result<PersistenceCurve> {
    let mut layers: Vec<usize> = base.iter().map(|a| a.layer()).collect();
    layers.sort_unstable();
    let mean_pred = |probe: &Probe, acts: &ActivationDataset| -> Result<f64> {
        if acts.is_empty() {
            return Err(SteeringError::Empty("activation layer"));
        }
        let preds = (0..acts.len())
            .into_par_iter()
            .map(|i| probe.predict(&acts.row_f64(i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(stats::mean(&preds))
    };
    let mut base_mean = Vec::new();
    let mut steered_mean = Vec::new();
    for &l in &layers {
        let probe = probes
            .iter()
            .find(|p| p.layer == l && p.concept == concept)
            .ok_or(SteeringError::MissingProbe(l))?;
        let b = base.iter().find(|a| a.layer() == l).ok_or(SteeringError::MissingLayer(l))?;
        let s = steered.iter().find(|a| a.layer() == l).ok_or(SteeringError::MissingLayer(l))?;
        if b.index() != s.index() {
            return Err(SteeringError::RecordMismatch(format!("layer {l} rows differ")));
        }
        base_mean.push(mean_pred(probe, b)?);
        steered_mean.push(mean_pred(probe, s)?);
    }
    let delta: Vec<f64> = steered_mean.iter().zip(&base_mean).map(|(s, b)| s - b).collect();
    let r = layers
        .iter()
        .position(|&l| l == reference_layer)
        .ok_or(SteeringError::MissingLayer(reference_layer))?;
    let relative = delta
        .iter()
        .map(|d| if delta[r] != 0.0 { d / delta[r] } else { 0.0 })
        .collect();
    Ok(PersistenceCurve {
        concept: concept.to_string(),
        layers,
        base_mean,
        steered_mean,
        delta,
        relative,
        reference_layer,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    concept: String,
    method: SteeringMethod,
    layers: Vec<usize>,
    dim: usize,
    norms: Vec<f64>,
    direction_files: Vec<String>,
}

/// Writes `steer_<concept>.json` and one `f32` file per span layer.
pub fn write_steering_bundle(dir: &Path, v: &SteeringVector) -> Result<PathBuf> {
    let err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| SteeringError::Io {
            path: p,
            message: e.to_string(),
        }
    };
    fs::create_dir_all(dir).map_err(err(dir))?;
    let mut files = Vec::new();
    for (l, d) in v.layers.iter().zip(&v.directions) {
        let name = format!("steer_{}_l{l}.f32", v.concept);
        let path = dir.join(&name);
        let bytes: Vec<u8> = d.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(err(&path))?;
        files.push(name);
    }
    let header = BundleHeader {
        concept: v.concept.clone(),
        method: v.method,
        layers: v.layers.clone(),
        dim: v.dim(),
        norms: v.norms.clone(),
        direction_files: files,
    };
    let path = dir.join(format!("steer_{}.json", v.concept));
    let mut json = serde_json::to_vec_pretty(&header).map_err(|e| SteeringError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    json.push(b'\n');
    fs::write(&path, json).map_err(err(&path))?;
    Ok(path)
}

pub fn read_steering_bundle(path: &Path) -> Result<SteeringVector> {
    let fail = |message: String| SteeringError::Io {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read(path).map_err(|e| fail(e.to_string()))?;
    let h: BundleHeader = serde_json::from_slice(&text).map_err(|e| fail(e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    if h.direction_files.len() != h.layers.len() || h.norms.len() != h.layers.len() {
        return Err(fail("layer, norm and file counts differ".into()));
    }
    let mut directions = Vec::new();
    for f in &h.direction_files {
        let bytes = fs::read(dir.join(f)).map_err(|e| fail(e.to_string()))?;
        if bytes.len() != 4 * h.dim {
            return Err(fail(format!("{f}: {} bytes for dimension {}", bytes.len(), h.dim)));
        }
        directions.push(
            bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect::<Vec<f64>>(),
        );
    }
    let mut v = SteeringVector::new(h.concept, h.method, h.layers, directions)?;
    v.norms = h.norms;
    Ok(v)
}
