mod geometry;
mod manifold;
mod plots;
mod probe;
mod steer;
mod synth;

use std::path::{Path, PathBuf};

use beliefspace::data::{load_dataset, ConceptDomain, Dataset, MANIFEST_FILE};
use beliefspace::probes::{bundle_stem, read_probe_bundle, Probe, ProbeReport};

use crate::config::PipelineConfig;
use crate::error::{invalid, OrInvalid, Result};
use crate::io::{read_artifact, require};

pub use geometry::geometry;
pub use manifold::manifold;
pub use plots::{export_plots, PlotRow};
pub use probe::probe;
pub use steer::steer;
pub use synth::synth_gen;

pub const PROBE_DIR: &str = "probes";
pub const MANIFOLD_DIR: &str = "manifolds";
pub const GEOMETRY_DIR: &str = "geometry";
pub const STEER_DIR: &str = "steer";
pub const PLOT_DIR: &str = "plots";
pub const ORACLE_DIR: &str = "oracle";
pub const REPORT_FILE: &str = "report.json";

pub(crate) struct Loaded {
    pub dataset: Dataset,
    pub domain: ConceptDomain,
}

pub(crate) fn load(cfg: &PipelineConfig) -> Result<Loaded> {
    let root = cfg.dataset_dir();
    require(&root.join(MANIFEST_FILE), "synth-gen")?;
    let dataset = load_dataset(&root).or_invalid(&format!("dataset {}", root.display()))?;
    let domain = pick_domain(&dataset, cfg.domain.as_deref())?;
    Ok(Loaded { dataset, domain })
}

fn pick_domain(dataset: &Dataset, name: Option<&str>) -> Result<ConceptDomain> {
    match name {
        Some(n) => dataset
            .domain(n)
            .ok_or_else(|| invalid(format!("domain {n} not in dataset (have {:?})", dataset.manifest.domains.keys()))),
        None => dataset
            .manifest
            .domain_list()
            .into_iter()
            .next()
            .ok_or_else(|| invalid("dataset declares no domains")),
    }
}

pub(crate) fn probe_report(cfg: &PipelineConfig) -> Result<ProbeReport> {
    read_artifact(&cfg.dir(PROBE_DIR).join(REPORT_FILE), "probe")
}

pub(crate) fn bundle_path(cfg: &PipelineConfig, layer: usize, concept: &str) -> PathBuf {
    cfg.dir(PROBE_DIR).join("bundles").join(format!("{}.json", bundle_stem(layer, concept)))
}

/// Every probe listed in the report.
pub(crate) fn load_probes(cfg: &PipelineConfig, report: &ProbeReport) -> Result<Vec<Probe>> {
    let mut out = Vec::new();
    for &l in &report.layers {
        for c in &report.concepts {
            let path = bundle_path(cfg, l, c);
            require(&path, "probe")?;
            out.push(read_probe_bundle(&path).or_invalid(&path.display().to_string())?);
        }
    }
    Ok(out)
}

/// Layer for manifolds and steering: an explicit override or the sweep's
/// selection.
pub(crate) fn analysis_layer(cfg: &PipelineConfig, dataset: &Dataset, explicit: Option<usize>) -> Result<usize> {
    let layer = match explicit {
        Some(l) => l,
        None => probe_report(cfg)?.selected_layer,
    };
    if dataset.layer(layer).is_none() {
        return Err(invalid(format!(
            "layer {layer} not in dataset (have {:?})",
            dataset.manifest.layers
        )));
    }
    Ok(layer)
}

/// File-system-safe form of an identifier.
pub(crate) fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

pub(crate) fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?;
    crate::io::write_bytes(path, &bytes)
}
