use std::path::Path;

use beliefspace::geometry::{
    behavior_correlations, centroids, compare_to_reference, distance_matrix, matrix_correlation,
    position_encoding_check, top_level_split, ward_cluster, CentroidSet, Dendrogram, DistanceMatrix, MantelResult,
    ReferenceComparison, ReferenceSpace,
};
use beliefspace::manifold::{read_manifold, Manifold};
use beliefspace::oracle::{ground_truth_compare, read_ground_truth, ORACLE_FILE};
use serde::Serialize;

use super::manifold::{ACTIVATIONS, BEHAVIOR};
use super::{load, write_csv, GEOMETRY_DIR, MANIFOLD_DIR, ORACLE_DIR, REPORT_FILE};
use crate::config::PipelineConfig;
use crate::error::{invalid, OrInvalid, Result};
use crate::io::{require, reset_dir, write_bytes, write_json};

pub(crate) fn load_manifold(cfg: &PipelineConfig, name: &str) -> Result<Manifold> {
    let path = cfg.dir(MANIFOLD_DIR).join(format!("{name}.json"));
    require(&path, "manifold")?;
    read_manifold(&path).or_invalid(&path.display().to_string())
}

#[derive(Serialize)]
struct SpaceSummary {
    concepts: Vec<String>,
    split: (Vec<String>, Vec<String>),
    newick: String,
}

#[derive(Serialize)]
struct PositionSummary {
    r2: f64,
    n: usize,
}

#[derive(Serialize)]
struct Summary {
    domain: String,
    behavior: SpaceSummary,
    activations: SpaceSummary,
    distance_correlation: MantelResult,
    position: PositionSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<ReferenceComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    anchor_disparity: Option<(f64, f64)>,
}

fn centroid_csv(path: &Path, set: &CentroidSet) -> Result<()> {
    let d = set.centroids.first().map_or(0, Vec::len);
    let mut header = vec!["concept".to_string(), "count".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    let rows: Vec<Vec<String>> = set
        .concepts
        .iter()
        .zip(&set.centroids)
        .zip(&set.counts)
        .map(|((c, x), n)| {
            let mut row = vec![c.clone(), n.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

fn analyse_space(dir: &Path, name: &str, set: &CentroidSet) -> Result<(DistanceMatrix, SpaceSummary)> {
    let dist = distance_matrix(set)?;
    let tree: Dendrogram = ward_cluster(&dist)?;
    let split = top_level_split(&tree);
    centroid_csv(&dir.join(format!("centroids_{name}.csv")), set)?;
    write_bytes(&dir.join(format!("distances_{name}.csv")), dist.to_csv().as_bytes())?;
    let newick = tree.to_newick();
    write_bytes(&dir.join(format!("dendrogram_{name}.nwk")), format!("{newick}\n").as_bytes())?;
    write_json(&dir.join(format!("dendrogram_{name}.json")), &tree)?;
    Ok((
        dist,
        SpaceSummary {
            concepts: set.concepts.clone(),
            split,
            newick,
        },
    ))
}

pub fn geometry(cfg: &PipelineConfig) -> Result<()> {
    let my = load_manifold(cfg, BEHAVIOR)?;
    let mz = load_manifold(cfg, ACTIVATIONS)?;
    let loaded = load(cfg)?;
    let domain = &loaded.domain;
    if my.source.domain() != domain.name || mz.source.domain() != domain.name {
        return Err(invalid(format!(
            "manifolds were fitted on domain {}, not {}; rerun `beliefspace manifold`",
            my.source.domain(),
            domain.name
        )));
    }
    let g = &cfg.geometry;
    let cy = centroids(&my.points, &domain.concepts)?;
    let cz = centroids(&mz.points, &domain.concepts)?;

    let dir = cfg.dir(GEOMETRY_DIR);
    reset_dir(&dir)?;
    let (dy, behavior) = analyse_space(&dir, BEHAVIOR, &cy)?;
    let (dz, activations) = analyse_space(&dir, ACTIVATIONS, &cz)?;
    let mantel = matrix_correlation(&dy, &dz, g.permutations, cfg.seed)?;
    write_json(&dir.join("mantel.json"), &mantel)?;

    let trajs = loaded.dataset.trajectories_for(&domain.name);
    write_json(&dir.join("behavior_correlations.json"), &behavior_correlations(&trajs, domain)?)?;

    let pts: Vec<(usize, Vec<f64>)> = mz.points.iter().map(|p| (p.t, p.coords.clone())).collect();
    let position = PositionSummary {
        r2: position_encoding_check(&pts)?,
        n: pts.len(),
    };
    write_json(&dir.join("position.json"), &position)?;

    let reference = match &g.reference {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let space: ReferenceSpace =
                serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let cmp = compare_to_reference(&cz, &space, g.permutations, cfg.seed).or_invalid("reference space")?;
            write_json(&dir.join("reference.json"), &cmp)?;
            Some(cmp)
        }
        None => None,
    };

    let oracle = cfg.dir(ORACLE_DIR);
    let anchor_disparity = if oracle.join(ORACLE_FILE).is_file() {
        let truth = read_ground_truth(&oracle)?;
        let ry = ground_truth_compare(&truth, &cy, &[], g.shuffles, cfg.seed)?;
        let rz = ground_truth_compare(&truth, &cz, &[], g.shuffles, cfg.seed)?;
        write_json(&dir.join("ground_truth.json"), &serde_json::json!({ BEHAVIOR: ry, ACTIVATIONS: rz }))?;
        Some((ry.centroid_disparity, rz.centroid_disparity))
    } else {
        None
    };

    println!(
        "geometry: distance correlation r={:.3} (p={:.4}), split {:?} | {:?}",
        mantel.r, mantel.p_value, activations.split.0, activations.split.1
    );
    write_json(
        &dir.join(REPORT_FILE),
        &Summary {
            domain: domain.name.clone(),
            behavior,
            activations,
            distance_correlation: mantel,
            position,
            reference,
            anchor_disparity,
        },
    )
}
