//! Pipeline configuration: one JSON or TOML document plus flag overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use beliefspace::geometry::DEFAULT_PERMUTATIONS;
use beliefspace::manifold::{DEFAULT_N_TOTAL, DEFAULT_PER_STORY_CAP};
use beliefspace::oracle::{GenerateConfig, PlantedSpace};
use beliefspace::probes::{FeatureScaling, LambdaPolicy};
use beliefspace::steering::{SteeringMethod, DEFAULT_PROBE_SPAN};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Defaults to `<out>/dataset`.
    pub dataset: Option<PathBuf>,
    /// Defaults to the first domain in the manifest.
    pub domain: Option<String>,
    /// Restricts the probe sweep; defaults to every stored layer.
    pub layers: Option<Vec<usize>>,
    pub synth: SynthConfig,
    pub probe: ProbeConfig,
    pub manifold: ManifoldConfig,
    pub geometry: GeometryConfig,
    pub steer: SteerConfig,
    pub plots: PlotConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            out: PathBuf::from("out"),
            dataset: None,
            domain: None,
            layers: None,
            synth: SynthConfig::default(),
            probe: ProbeConfig::default(),
            manifold: ManifoldConfig::default(),
            geometry: GeometryConfig::default(),
            steer: SteerConfig::default(),
            plots: PlotConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub space: PlantedSpace,
    /// `seed` inside is ignored in favour of the pipeline seed.
    pub generate: GenerateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lambda: LambdaPolicy,
    pub scaling: FeatureScaling,
    pub train_fraction: f64,
    pub calibration_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lambda: LambdaPolicy::default(),
            scaling: FeatureScaling::default(),
            train_fraction: 0.70,
            calibration_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    #[default]
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldConfig {
    pub reducer: ReducerKind,
    pub d: usize,
    pub n_total: usize,
    pub per_story_cap: usize,
    /// Activation layer for 𝓜_z; defaults to the probe sweep's selection.
    pub layer: Option<usize>,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        ManifoldConfig {
            reducer: ReducerKind::Pca,
            d: 2,
            n_total: DEFAULT_N_TOTAL,
            per_story_cap: DEFAULT_PER_STORY_CAP,
            layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub permutations: usize,
    /// JSON `ReferenceSpace` to compare the activation centroids against.
    pub reference: Option<PathBuf>,
    pub shuffles: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            permutations: DEFAULT_PERMUTATIONS,
            reference: None,
            shuffles: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerConfig {
    pub method: SteeringMethod,
    pub alpha: f64,
    pub span: usize,
    /// First span layer; defaults to the probe sweep's selection.
    pub layer: Option<usize>,
    /// Magnitude grid for the per-concept sweep.
    pub alphas: Vec<f64>,
    pub epsilon: f64,
    /// Steered datasets captured elsewhere, keyed by concept. When present,
    /// they replace the simulated interventions.
    pub imported: BTreeMap<String, PathBuf>,
    /// Write each simulated run as a steered dataset under `steer/runs`.
    pub write_runs: bool,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            method: SteeringMethod::ProbeWeights,
            alpha: 1.5,
            span: DEFAULT_PROBE_SPAN,
            layer: None,
            alphas: vec![-1.5, -0.75, 0.0, 0.25, 0.5, 1.0, 1.5],
            epsilon: 0.02,
            imported: BTreeMap::new(),
            write_runs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Empty means every story.
    pub stories: Vec<String>,
    /// Concept whose steered run supplies the `steered` column.
    pub steered_concept: Option<String>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("reading config {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset"))
    }

    pub fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.probe;
        if !(p.train_fraction > 0.0 && p.calibration_fraction > 0.0 && p.train_fraction + p.calibration_fraction < 1.0) {
            return Err(invalid(format!(
                "probe fractions train={} calibration={} must be positive and sum below 1",
                p.train_fraction, p.calibration_fraction
            )));
        }
        match &p.lambda {
            LambdaPolicy::Fixed { lambda } if !(*lambda >= 0.0 && lambda.is_finite()) => {
                return Err(invalid(format!("lambda {lambda} must be finite and >= 0")));
            }
            LambdaPolicy::CrossValidated { grid, folds } => {
                if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                    return Err(invalid("lambda grid must be non-empty, finite and >= 0"));
                }
                if *folds < 2 {
                    return Err(invalid("cross-validation needs at least 2 folds"));
                }
            }
            LambdaPolicy::Fixed { .. } => {}
        }
        let m = &self.manifold;
        if m.d == 0 || m.n_total == 0 || m.per_story_cap == 0 {
            return Err(invalid("manifold d, n_total and per_story_cap must be >= 1"));
        }
        let s = &self.steer;
        if !s.alpha.is_finite() || s.alphas.iter().any(|a| !a.is_finite()) {
            return Err(invalid("steering magnitudes must be finite"));
        }
        if s.span == 0 {
            return Err(invalid("steering span must be >= 1"));
        }
        if !(s.epsilon >= 0.0) {
            return Err(invalid("epsilon must be >= 0"));
        }
        if let Some(r) = &self.geometry.reference {
            if !r.is_file() {
                return Err(invalid(format!("reference space {} does not exist", r.display())));
            }
        }
        for (c, path) in &s.imported {
            if !path.is_dir() {
                return Err(invalid(format!("imported run for {c}: {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}
