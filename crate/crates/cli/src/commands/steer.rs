use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use beliefspace::data::{load_dataset, ActivationDataset, BeliefTrajectory, ConceptDomain, Dataset, RecordKey, SteeredRun};
use beliefspace::geometry::{centroids, distance_matrix, top_level_split, ward_cluster};
use beliefspace::manifold::MaxActivatingSet;
use beliefspace::oracle::{read_ground_truth, GroundTruth, ORACLE_FILE};
use beliefspace::probes::Probe;
use beliefspace::stats::cosine;
use beliefspace::steering::{
    clip_span, cluster_effect_analysis, dim_steering_vector, entanglement_matrix, layer_persistence, magnitude_sweep,
    predict_entanglement, probe_steering_vector, simulate_steering, write_steering_bundle, EntanglementMatrix,
    PersistenceCurve, SteeringMethod, SteeringVector,
};
use serde::Serialize;

use super::geometry::load_manifold;
use super::manifold::{BEHAVIOR, SELECTION_FILE};
use super::{
    analysis_layer, file_stem, load, load_probes, probe_report, Loaded, MANIFOLD_DIR, ORACLE_DIR, REPORT_FILE,
    STEER_DIR,
};
use crate::config::PipelineConfig;
use crate::error::{invalid, OrInvalid, Result};
use crate::io::{read_artifact, require, reset_dir, write_bytes, write_json};

pub const RUNS_DIR: &str = "runs";

#[derive(Serialize)]
struct Persistence {
    single_layer: PersistenceCurve,
    span: PersistenceCurve,
}

#[derive(Serialize)]
struct Summary {
    domain: String,
    method: SteeringMethod,
    alpha: f64,
    span: Vec<usize>,
    source: &'static str,
    /// Per concept: diagonal entry minus mean off-diagonal entry of its row.
    diagonal_margin: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_distance: Option<f64>,
    cross_cluster_negligible: bool,
}

fn build_vectors(
    cfg: &PipelineConfig,
    ds: &Dataset,
    domain: &ConceptDomain,
    probes: &[Probe],
    span: &[usize],
) -> Result<Vec<SteeringVector>> {
    let refs: Vec<&Probe> = probes.iter().collect();
    match cfg.steer.method {
        SteeringMethod::ProbeWeights => domain
            .concepts
            .iter()
            .map(|c| probe_steering_vector(&refs, c, span).map_err(Into::into))
            .collect(),
        SteeringMethod::DiffInMeans => {
            let sel: MaxActivatingSet = read_artifact(&cfg.dir(MANIFOLD_DIR).join(SELECTION_FILE), "manifold")?;
            domain
                .concepts
                .iter()
                .map(|c| {
                    let pos: Vec<RecordKey> = sel
                        .concepts
                        .get(c)
                        .ok_or_else(|| invalid(format!("selection has no entry for {c}")))?
                        .iter()
                        .map(|s| s.key())
                        .collect();
                    let pos_set: BTreeSet<&RecordKey> = pos.iter().collect();
                    let mut raw = Vec::new();
                    for &l in span {
                        let acts = ds.layer(l).ok_or_else(|| invalid(format!("layer {l} not in dataset")))?;
                        let neg: Vec<RecordKey> =
                            acts.index().iter().filter(|k| !pos_set.contains(k)).cloned().collect();
                        let v = dim_steering_vector(acts, c, &pos, &neg)?;
                        raw.push(v.directions[0].iter().map(|x| x * v.norms[0]).collect());
                    }
                    Ok(SteeringVector::new(c.clone(), SteeringMethod::DiffInMeans, span.to_vec(), raw)?)
                })
                .collect()
        }
    }
}

/// Steered trajectories and activations per concept, plus the matching base.
struct Effects {
    base: Vec<BeliefTrajectory>,
    steered: BTreeMap<String, Vec<BeliefTrajectory>>,
    steered_layers: BTreeMap<String, Vec<ActivationDataset>>,
    source: &'static str,
}

fn simulated(
    cfg: &PipelineConfig,
    loaded: &Loaded,
    truth: &GroundTruth,
    vectors: &[SteeringVector],
    dir: &Path,
) -> Result<Effects> {
    let (ds, domain) = (&loaded.dataset, &loaded.domain);
    let model = truth.model();
    let base_layers: Vec<&ActivationDataset> = ds.activations.iter().collect();
    let mut base = Vec::new();
    let mut steered = BTreeMap::new();
    let mut steered_layers = BTreeMap::new();
    for v in vectors {
        let run = simulate_steering(&model, domain, &base_layers, v, cfg.steer.alpha)?;
        let curve = magnitude_sweep(&model, domain, &base_layers, v, &cfg.steer.alphas)?;
        write_json(&dir.join(format!("sweep_{}.json", file_stem(&v.concept))), &curve)?;
        if cfg.steer.write_runs {
            let out = Dataset::assemble(
                ds.manifest.model_id.clone(),
                ds.manifest.split.clone(),
                std::slice::from_ref(domain),
                ds.stories.clone(),
                run.steered_behavior.clone(),
                run.layers.clone(),
            )?
            .with_steered(SteeredRun {
                concept: v.concept.clone(),
                alpha: cfg.steer.alpha,
                method: v.method.as_str().to_string(),
            })?;
            beliefspace::data::write_dataset(&dir.join(RUNS_DIR).join(file_stem(&v.concept)), &out)?;
        }
        base = run.base_behavior;
        steered.insert(v.concept.clone(), run.steered_behavior);
        steered_layers.insert(v.concept.clone(), run.layers);
    }
    Ok(Effects {
        base,
        steered,
        steered_layers,
        source: "oracle",
    })
}

fn imported(cfg: &PipelineConfig, loaded: &Loaded) -> Result<Effects> {
    let domain = &loaded.domain;
    let mut steered = BTreeMap::new();
    let mut steered_layers = BTreeMap::new();
    for c in &domain.concepts {
        let path = cfg
            .steer
            .imported
            .get(c)
            .ok_or_else(|| invalid(format!("steer.imported has no dataset for {c}")))?;
        let run = load_dataset(path).or_invalid(&format!("steered dataset {}", path.display()))?;
        match &run.manifest.steered {
            Some(s) if &s.concept == c => {}
            other => {
                return Err(invalid(format!(
                    "{} is not a steered run for {c} (steered: {other:?})",
                    path.display()
                )))
            }
        }
        steered.insert(c.clone(), run.trajectories_for(&domain.name).into_iter().cloned().collect());
        steered_layers.insert(c.clone(), run.activations);
    }
    Ok(Effects {
        base: loaded.dataset.trajectories_for(&domain.name).into_iter().cloned().collect(),
        steered,
        steered_layers,
        source: "imported",
    })
}

fn persistence(
    probes: &[Probe],
    concept: &str,
    base: &[&ActivationDataset],
    steered: &[ActivationDataset],
    reference: usize,
) -> Result<PersistenceCurve> {
    let refs: Vec<&Probe> = probes.iter().collect();
    let probed: BTreeSet<usize> = probes.iter().map(|p| p.layer).collect();
    let b: Vec<&ActivationDataset> = base.iter().copied().filter(|a| probed.contains(&a.layer())).collect();
    let s: Vec<&ActivationDataset> = steered.iter().filter(|a| probed.contains(&a.layer())).collect();
    Ok(layer_persistence(&refs, concept, &b, &s, reference)?)
}

fn diagonal_margins(e: &EntanglementMatrix) -> BTreeMap<String, f64> {
    let k = e.concepts.len();
    e.concepts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let off = (0..k).filter(|&j| j != i).map(|j| e.values[i][j]).sum::<f64>() / (k - 1).max(1) as f64;
            (c.clone(), e.values[i][i] - off)
        })
        .collect()
}

pub fn steer(cfg: &PipelineConfig) -> Result<()> {
    let my = load_manifold(cfg, BEHAVIOR)?;
    let loaded = load(cfg)?;
    let (ds, domain) = (&loaded.dataset, &loaded.domain);
    let oracle_dir = cfg.dir(ORACLE_DIR);
    let use_oracle = cfg.steer.imported.is_empty();
    if use_oracle {
        require(&oracle_dir.join(ORACLE_FILE), "synth-gen").map_err(|_| {
            invalid(format!(
                "no intervention source: {} is missing and steer.imported is empty",
                oracle_dir.join(ORACLE_FILE).display()
            ))
        })?;
    }
    let start = analysis_layer(cfg, ds, cfg.steer.layer)?;
    let span = clip_span(start, cfg.steer.span, &ds.manifest.layers).or_invalid("steering span")?;
    let report = probe_report(cfg)?;
    let probes = load_probes(cfg, &report)?;
    let vectors = build_vectors(cfg, ds, domain, &probes, &span)?;

    let dir = cfg.dir(STEER_DIR);
    reset_dir(&dir)?;
    for v in &vectors {
        write_steering_bundle(&dir.join("vectors"), v)?;
    }
    let truth = if use_oracle { Some(read_ground_truth(&oracle_dir)?) } else { None };
    let effects = match &truth {
        Some(t) => simulated(cfg, &loaded, t, &vectors, &dir)?,
        None => imported(cfg, &loaded)?,
    };

    let base_refs: Vec<&BeliefTrajectory> = effects.base.iter().collect();
    let e = entanglement_matrix(&base_refs, &effects.steered, domain)?;
    write_bytes(&dir.join("entanglement.csv"), e.to_csv().as_bytes())?;
    write_json(&dir.join("entanglement.json"), &e)?;

    let cy = centroids(&my.points, &domain.concepts)?;
    let d = distance_matrix(&cy)?;
    let prediction = predict_entanglement(&e, &d);
    match &prediction {
        Ok(p) => write_json(&dir.join("prediction.json"), p)?,
        Err(err) => write_json(&dir.join("prediction.json"), &serde_json::json!({ "error": err.to_string() }))?,
    }
    let split = top_level_split(&ward_cluster(&d)?);
    let clusters = cluster_effect_analysis(&e, &split, cfg.steer.epsilon)?;
    write_json(&dir.join("clusters.json"), &clusters)?;

    let base_layers: Vec<&ActivationDataset> = ds.activations.iter().collect();
    if let Some(t) = &truth {
        let model = t.model();
        for v in &vectors {
            let single = SteeringVector::new(
                v.concept.clone(),
                v.method,
                vec![v.layers[0]],
                vec![v.directions[0].iter().map(|x| x * v.norms[0]).collect()],
            )?;
            let run = simulate_steering(&model, domain, &base_layers, &single, cfg.steer.alpha)?;
            let curves = Persistence {
                single_layer: persistence(&probes, &v.concept, &base_layers, &run.layers, span[0])?,
                span: persistence(&probes, &v.concept, &base_layers, &effects.steered_layers[&v.concept], span[0])?,
            };
            write_json(&dir.join(format!("persistence_{}.json", file_stem(&v.concept))), &curves)?;
        }
        let cosines: BTreeMap<String, Vec<f64>> = vectors
            .iter()
            .map(|v| {
                let per_layer = v
                    .layers
                    .iter()
                    .zip(&v.directions)
                    .map(|(&l, dir)| t.concept_axis(&v.concept, l).map(|axis| cosine(dir, &axis)))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok((v.concept.clone(), per_layer))
            })
            .collect::<Result<_>>()?;
        write_json(&dir.join("ground_truth.json"), &serde_json::json!({ "direction_cosines": cosines }))?;
    } else {
        for (c, layers) in &effects.steered_layers {
            if layers.is_empty() {
                continue;
            }
            let curve = persistence(&probes, c, &base_layers, layers, span[0])?;
            write_json(&dir.join(format!("persistence_{}.json", file_stem(c))), &curve)?;
        }
    }

    let summary = Summary {
        domain: domain.name.clone(),
        method: cfg.steer.method,
        alpha: cfg.steer.alpha,
        span,
        source: effects.source,
        diagonal_margin: diagonal_margins(&e),
        r_distance: prediction.as_ref().ok().map(|p| p.r_distance),
        cross_cluster_negligible: clusters.cross_cluster_negligible,
    };
    println!(
        "steer: {} concepts via {} over layers {:?}, entanglement-distance r={}",
        e.concepts.len(),
        effects.source,
        summary.span,
        summary.r_distance.map_or("n/a".to_string(), |r| format!("{r:.3}"))
    );
    write_json(&dir.join(REPORT_FILE), &summary)
}
