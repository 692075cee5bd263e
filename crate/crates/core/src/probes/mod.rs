//! Linear probes from activations to elicited beliefs.
//!
//! A [`Probe`] is a ridge readout for one `(layer, concept)` pair followed by
//! an isotonic [`CalibrationMap`] fitted on held-out stories. [`layer_sweep`]
//! fits every pair and picks the layer with the lowest mean test RMSE.

mod isotonic;
mod ridge;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ActivationDataset, BeliefTrajectory, ConceptDomain};
use crate::stats;

pub use isotonic::{pava, CalibrationMap};
pub use ridge::{default_lambda_grid, fit_ridge, select_lambda_cv, FeatureScaling, RidgeModel, Standardization};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("need at least 2 story groups for cross-validation, got {0}")]
    TooFewGroups(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("ridge penalty must be finite and >= 0, got {0}")]
    InvalidLambda(f64),
    #[error("non-finite input")]
    NonFinite,
    #[error("normal equations are singular at lambda={lambda}; use lambda > 0")]
    Singular { lambda: f64 },
    #[error("weights must be positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("invalid calibration map: {0}")]
    InvalidCalibration(String),
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error("no layers to sweep")]
    NoLayers,
    #[error("split {0} has no usable rows")]
    EmptySplit(&'static str),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("probe bundle I/O on {path}: {message}")]
    Bundle { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, ProbeError>;

/// Calibrated linear probe for one concept at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub layer: usize,
    pub concept: String,
    pub model: RidgeModel,
    pub calibration: CalibrationMap,
}

impl Probe {
    /// Calibrated belief prediction clamped to `[0, 1]`.
    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        predict(&self.model, &self.calibration, z)
    }
}

pub fn predict(model: &RidgeModel, calibration: &CalibrationMap, z: &[f64]) -> Result<f64> {
    Ok(calibration.apply(model.predict_raw(z)?).clamp(0.0, 1.0))
}

/// Root mean squared error of calibrated predictions.
pub fn evaluate_rmse(model: &RidgeModel, calibration: &CalibrationMap, z: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    if z.nrows() == 0 || y.is_empty() {
        return Err(ProbeError::EmptyEvaluation);
    }
    if z.nrows() != y.len() {
        return Err(ProbeError::DimensionMismatch {
            expected: z.nrows(),
            actual: y.len(),
        });
    }
    let preds = (0..z.nrows())
        .map(|i| {
            let row: Vec<f64> = z.row(i).iter().copied().collect();
            predict(model, calibration, &row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stats::rmse(&preds, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Cal,
    Test,
}

/// Story-level train / calibration / test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorySplit {
    pub train: BTreeSet<String>,
    pub cal: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl StorySplit {
    /// Shuffles the sorted story ids with `seed` and cuts them by the given
    /// train and calibration fractions; the remainder is the test set.
    pub fn random<S: AsRef<str>>(story_ids: &[S], train: f64, cal: f64, seed: u64) -> Result<Self> {
        if !(train > 0.0 && cal > 0.0 && train + cal < 1.0) {
            return Err(ProbeError::InvalidSplit(format!("fractions train={train} cal={cal}")));
        }
        let mut ids: Vec<String> = story_ids.iter().map(|s| s.as_ref().to_string()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() < 3 {
            return Err(ProbeError::InvalidSplit(format!("{} stories; need at least 3", ids.len())));
        }
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ids.len();
        let n_train = ((n as f64 * train).round() as usize).clamp(1, n - 2);
        let n_cal = ((n as f64 * cal).round() as usize).clamp(1, n - n_train - 1);
        let test = ids.split_off(n_train + n_cal).into_iter().collect();
        let cal = ids.split_off(n_train).into_iter().collect();
        Ok(StorySplit {
            train: ids.into_iter().collect(),
            cal,
            test,
        })
    }

    /// Default 70 / 15 / 15 partition.
    pub fn standard<S: AsRef<str>>(story_ids: &[S], seed: u64) -> Result<Self> {
        Self::random(story_ids, 0.70, 0.15, seed)
    }

    pub fn part_of(&self, story_id: &str) -> Option<SplitPart> {
        if self.train.contains(story_id) {
            Some(SplitPart::Train)
        } else if self.cal.contains(story_id) {
            Some(SplitPart::Cal)
        } else if self.test.contains(story_id) {
            Some(SplitPart::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LambdaPolicy {
    Fixed { lambda: f64 },
    CrossValidated { grid: Vec<f64>, folds: usize },
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::CrossValidated {
            grid: default_lambda_grid(),
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambda: LambdaPolicy,
    pub scaling: FeatureScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub layer: usize,
    pub concept: String,
    pub lambda: f64,
    pub train_rmse: f64,
    pub test_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub domain: String,
    pub layers: Vec<usize>,
    pub concepts: Vec<String>,
    pub scores: Vec<ProbeScore>,
    /// Mean test RMSE across concepts, aligned with `layers`.
    pub mean_test_rmse: Vec<f64>,
    pub selected_layer: usize,
}

impl ProbeReport {
    pub fn score(&self, layer: usize, concept: &str) -> Option<&ProbeScore> {
        self.scores.iter().find(|s| s.layer == layer && s.concept == concept)
    }
}

#[derive(Debug, Clone)]
pub struct LayerSweep {
    pub report: ProbeReport,
    pub probes: Vec<Probe>,
}

impl LayerSweep {
    pub fn probe(&self, layer: usize, concept: &str) -> Option<&Probe> {
        self.probes.iter().find(|p| p.layer == layer && p.concept == concept)
    }
}

struct SplitRows {
    rows: Vec<usize>,
    targets: Vec<Vec<f64>>,
}

struct Aligned {
    train: SplitRows,
    cal: SplitRows,
    test: SplitRows,
    train_groups: Vec<String>,
}

fn align(
    acts: &ActivationDataset,
    trajectories: &[&BeliefTrajectory],
    domain: &ConceptDomain,
    split: &StorySplit,
) -> Aligned {
    let by_story: HashMap<&str, &BeliefTrajectory> = trajectories
        .iter()
        .filter(|t| t.domain == domain.name)
        .map(|t| (t.story_id.as_str(), *t))
        .collect();
    let empty = || SplitRows {
        rows: Vec::new(),
        targets: Vec::new(),
    };
    let mut out = Aligned {
        train: empty(),
        cal: empty(),
        test: empty(),
        train_groups: Vec::new(),
    };
    for (i, key) in acts.index().iter().enumerate() {
        let Some(tr) = by_story.get(key.story_id.as_str()) else {
            continue;
        };
        if key.t == 0 || key.t > tr.len() {
            continue;
        }
        let target = tr.values[key.t - 1].clone();
        let part = match split.part_of(&key.story_id) {
            Some(SplitPart::Train) => {
                out.train_groups.push(key.story_id.clone());
                &mut out.train
            }
            Some(SplitPart::Cal) => &mut out.cal,
            Some(SplitPart::Test) => &mut out.test,
            None => continue,
        };
        part.rows.push(i);
        part.targets.push(target);
    }
    out
}

fn design(acts: &ActivationDataset, rows: &[usize]) -> DMatrix<f64> {
    let q = acts.dim();
    DMatrix::from_fn(rows.len(), q, |i, j| f64::from(acts.row(rows[i])[j]))
}

/// Fits a calibrated probe: ridge on the train rows, isotonic map on the
/// calibration rows.
pub fn fit_probe(
    layer: usize,
    concept: &str,
    z_train: &DMatrix<f64>,
    y_train: &[f64],
    train_groups: &[&str],
    z_cal: &DMatrix<f64>,
    y_cal: &[f64],
    config: &SweepConfig,
) -> Result<Probe> {
    let lambda = match &config.lambda {
        LambdaPolicy::Fixed { lambda } => *lambda,
        LambdaPolicy::CrossValidated { grid, folds } => {
            select_lambda_cv(z_train, y_train, train_groups, grid, *folds, config.scaling)?
        }
    };
    let model = fit_ridge(z_train, y_train, lambda, config.scaling)?;
    if z_cal.nrows() == 0 {
        return Err(ProbeError::EmptySplit("cal"));
    }
    let scores = (0..z_cal.nrows())
        .map(|i| {
            let row: Vec<f64> = z_cal.row(i).iter().copied().collect();
            model.predict_raw(&row)
        })
        .collect::<Result<Vec<_>>>()?;
    let calibration = CalibrationMap::fit(&scores, y_cal, &vec![1.0; y_cal.len()])?;
    Ok(Probe {
        layer,
        concept: concept.to_string(),
        model,
        calibration,
    })
}

/// Fits and scores a probe for every `(layer, concept)` pair and selects the
/// layer with the lowest mean test RMSE (ties go to the lowest layer index).
pub fn layer_sweep(
    layers: &[&ActivationDataset],
    trajectories: &[&BeliefTrajectory],
    domain: &ConceptDomain,
    split: &StorySplit,
    config: &SweepConfig,
) -> Result<LayerSweep> {
    if layers.is_empty() {
        return Err(ProbeError::NoLayers);
    }
    let mut layers: Vec<&ActivationDataset> = layers.to_vec();
    layers.sort_by_key(|a| a.layer());

    let jobs: Vec<(usize, usize)> = (0..layers.len())
        .flat_map(|li| (0..domain.k()).map(move |c| (li, c)))
        .collect();
    let aligned: Vec<Aligned> = layers
        .iter()
        .map(|a| align(a, trajectories, domain, split))
        .collect();
    for (name, rows) in [
        ("train", &aligned[0].train),
        ("cal", &aligned[0].cal),
        ("test", &aligned[0].test),
    ] {
        if rows.rows.is_empty() {
            return Err(ProbeError::EmptySplit(name));
        }
    }
    let matrices: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = layers
        .iter()
        .zip(&aligned)
        .map(|(a, al)| (design(a, &al.train.rows), design(a, &al.cal.rows), design(a, &al.test.rows)))
        .collect();

    let fitted = jobs
        .par_iter()
        .map(|&(li, c)| {
            let al = &aligned[li];
            let (zt, zc, zs) = &matrices[li];
            let col = |rows: &SplitRows| rows.targets.iter().map(|r| r[c]).collect::<Vec<f64>>();
            let (yt, yc, ys) = (col(&al.train), col(&al.cal), col(&al.test));
            let groups: Vec<&str> = al.train_groups.iter().map(String::as_str).collect();
            let probe = fit_probe(layers[li].layer(), &domain.concepts[c], zt, &yt, &groups, zc, &yc, config)?;
            let train_rmse = evaluate_rmse(&probe.model, &probe.calibration, zt, &yt)?;
            let test_rmse = evaluate_rmse(&probe.model, &probe.calibration, zs, &ys)?;
            let score = ProbeScore {
                layer: probe.layer,
                concept: probe.concept.clone(),
                lambda: probe.model.lambda,
                train_rmse,
                test_rmse,
            };
            Ok((probe, score))
        })
        .collect::<Result<Vec<_>>>()?;

    let k = domain.k();
    let mean_test_rmse: Vec<f64> = fitted
        .chunks(k)
        .map(|chunk| chunk.iter().map(|(_, s)| s.test_rmse).sum::<f64>() / k as f64)
        .collect();
    let mut best = 0;
    for (i, &m) in mean_test_rmse.iter().enumerate() {
        if m < mean_test_rmse[best] {
            best = i;
        }
    }
    let (probes, scores): (Vec<Probe>, Vec<ProbeScore>) = fitted.into_iter().unzip();
    Ok(LayerSweep {
        report: ProbeReport {
            domain: domain.name.clone(),
            layers: layers.iter().map(|a| a.layer()).collect(),
            concepts: domain.concepts.clone(),
            scores,
            mean_test_rmse,
            selected_layer: layers[best].layer(),
        },
        probes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    layer: usize,
    concept: String,
    lambda: f64,
    bias: f64,
    standardization: Standardization,
    weights_file: String,
    calibration: CalibrationMap,
}

pub fn bundle_stem(layer: usize, concept: &str) -> String {
    format!("probe_l{layer}_{concept}")
}

/// Writes `<stem>.json` plus the raw `f32` weight vector `<stem>.f32`.
/// Returns the header path.
pub fn write_probe_bundle(dir: &Path, probe: &Probe) -> Result<PathBuf> {
    let stem = bundle_stem(probe.layer, &probe.concept);
    let weights_file = format!("{stem}.f32");
    let header = BundleHeader {
        layer: probe.layer,
        concept: probe.concept.clone(),
        lambda: probe.model.lambda,
        bias: probe.model.bias,
        standardization: probe.model.standardization.clone(),
        weights_file: weights_file.clone(),
        calibration: probe.calibration.clone(),
    };
    let bundle_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: std::io::Error| ProbeError::Bundle {
            path,
            message: e.to_string(),
        }
    };
    fs::create_dir_all(dir).map_err(bundle_err(dir))?;
    let bytes: Vec<u8> = probe
        .model
        .weights
        .iter()
        .flat_map(|&w| (w as f32).to_le_bytes())
        .collect();
    let wpath = dir.join(&weights_file);
    fs::write(&wpath, bytes).map_err(bundle_err(&wpath))?;
    let hpath = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_vec_pretty(&header).map_err(|e| ProbeError::Bundle {
        path: hpath.clone(),
        message: e.to_string(),
    })?;
    json.push(b'\n');
    fs::write(&hpath, json).map_err(bundle_err(&hpath))?;
    Ok(hpath)
}

pub fn read_probe_bundle(header_path: &Path) -> Result<Probe> {
    let fail = |message: String| ProbeError::Bundle {
        path: header_path.to_path_buf(),
        message,
    };
    let text = fs::read(header_path).map_err(|e| fail(e.to_string()))?;
    let header: BundleHeader = serde_json::from_slice(&text).map_err(|e| fail(e.to_string()))?;
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&header.weights_file)).map_err(|e| fail(e.to_string()))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != header.standardization.mean.len() {
        return Err(fail(format!(
            "weights file holds {} bytes for dimension {}",
            bytes.len(),
            header.standardization.mean.len()
        )));
    }
    let weights = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let calibration = CalibrationMap::new(
        header.calibration.breakpoints().to_vec(),
        header.calibration.values().to_vec(),
    )?;
    Ok(Probe {
        layer: header.layer,
        concept: header.concept,
        model: RidgeModel {
            weights,
            bias: header.bias,
            lambda: header.lambda,
            standardization: header.standardization,
        },
        calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RecordKey;

    #[test]
    fn constant_predictor_rmse() {
        let model = RidgeModel {
            weights: vec![0.0],
            bias: 0.5,
            lambda: 1.0,
            standardization: Standardization {
                mean: vec![0.0],
                scale: vec![1.0],
            },
        };
        let z = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let r = evaluate_rmse(&model, &CalibrationMap::identity(), &z, &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        let r = evaluate_rmse(&model, &CalibrationMap::identity(), &z, &[0.5; 4]).unwrap();
        assert_eq!(r, 0.0);
        assert!(matches!(
            evaluate_rmse(&model, &CalibrationMap::identity(), &DMatrix::zeros(0, 1), &[]),
            Err(ProbeError::EmptyEvaluation)
        ));
    }

    #[test]
    fn predict_clamps_and_checks_dimension() {
        let model = fit_ridge(
            &DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            &[2.0, 4.0, 6.0],
            0.0,
            FeatureScaling::Standardize,
        )
        .unwrap();
        assert_eq!(predict(&model, &CalibrationMap::identity(), &[2.0]).unwrap(), 1.0);
        assert_eq!(predict(&model, &CalibrationMap::constant(0.3), &[2.0]).unwrap(), 0.3);
        assert!(matches!(
            predict(&model, &CalibrationMap::identity(), &[1.0, 2.0]),
            Err(ProbeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn split_is_story_level_and_deterministic() {
        let ids: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
        let a = StorySplit::standard(&ids, 4).unwrap();
        let b = StorySplit::standard(&ids, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.cal.len(), a.test.len()), (14, 3, 3));
        assert!(a.train.is_disjoint(&a.test) && a.cal.is_disjoint(&a.test));
        assert!(StorySplit::standard(&ids[..2], 4).is_err());
    }

    fn toy_layer(layer: usize, signal: f64) -> (ActivationDataset, Vec<BeliefTrajectory>) {
        // Two concepts; the activation's first coordinate carries concept 0
        // scaled by `signal`, second coordinate concept 1, plus a fixed wobble.
        let mut rows = Vec::new();
        let mut index = Vec::new();
        let mut trajectories = Vec::new();
        for s in 0..30 {
            let mut values = Vec::new();
            for t in 1..=5 {
                let a = ((s * 7 + t * 3) % 11) as f64 / 10.0;
                let b = ((s * 5 + t) % 7) as f64 / 6.0;
                let wobble = (((s * 13 + t * 17) % 19) as f64 / 19.0 - 0.5) * 0.2;
                rows.push(vec![a * signal + wobble, b * signal - wobble, wobble]);
                index.push(RecordKey::new(format!("s{s:02}"), t));
                values.push(vec![a, b]);
            }
            trajectories.push(BeliefTrajectory {
                story_id: format!("s{s:02}"),
                domain: "d".into(),
                values,
                raw: None,
            });
        }
        (ActivationDataset::from_rows(layer, &rows, index).unwrap(), trajectories)
    }

    #[test]
    fn sweep_picks_cleaner_layer_and_breaks_ties_low() {
        let domain = ConceptDomain::new("d", ["x", "y"]).unwrap();
        let (weak, trajectories) = toy_layer(1, 0.3);
        let (strong, _) = toy_layer(2, 5.0);
        let (strong_copy, _) = toy_layer(3, 5.0);
        let ids: Vec<String> = trajectories.iter().map(|t| t.story_id.clone()).collect();
        let split = StorySplit::standard(&ids, 1).unwrap();
        let refs: Vec<&BeliefTrajectory> = trajectories.iter().collect();
        let config = SweepConfig::default();

        let single = layer_sweep(&[&weak], &refs, &domain, &split, &config).unwrap();
        assert_eq!(single.report.selected_layer, 1);

        let sweep = layer_sweep(&[&strong_copy, &weak, &strong], &refs, &domain, &split, &config).unwrap();
        assert_eq!(sweep.report.layers, vec![1, 2, 3]);
        assert_eq!(sweep.report.selected_layer, 2);
        assert_eq!(sweep.report.scores.len(), 6);
        assert_eq!(sweep.report.mean_test_rmse[1], sweep.report.mean_test_rmse[2]);
    }

    #[test]
    fn bundle_round_trip() {
        let domain = ConceptDomain::new("d", ["x", "y"]).unwrap();
        let (layer, trajectories) = toy_layer(4, 1.0);
        let ids: Vec<String> = trajectories.iter().map(|t| t.story_id.clone()).collect();
        let split = StorySplit::standard(&ids, 1).unwrap();
        let refs: Vec<&BeliefTrajectory> = trajectories.iter().collect();
        let sweep = layer_sweep(&[&layer], &refs, &domain, &split, &SweepConfig::default()).unwrap();
        let probe = sweep.probe(4, "y").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_probe_bundle(dir.path(), probe).unwrap();
        let back = read_probe_bundle(&path).unwrap();
        assert_eq!(back.layer, 4);
        assert_eq!(back.calibration, probe.calibration);
        for (a, b) in back.model.weights.iter().zip(&probe.model.weights) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }
}
