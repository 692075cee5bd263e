use beliefspace::manifold::{
    embed_activations, embed_behavior, fit_activation_manifold, fit_behavior_manifold, select_all_concepts,
    write_manifold, EmbeddedTrajectory, Manifold,
};
use serde::Serialize;

use super::{analysis_layer, load, write_csv, MANIFOLD_DIR, REPORT_FILE};
use crate::config::{PipelineConfig, ReducerKind};
use crate::error::Result;
use crate::io::{reset_dir, write_json};

pub const BEHAVIOR: &str = "behavior";
pub const ACTIVATIONS: &str = "activations";
pub const SELECTION_FILE: &str = "selection.json";

#[derive(Serialize)]
struct Summary<'a> {
    domain: &'a str,
    reducer: ReducerKind,
    layer: usize,
    d: usize,
    n_points: usize,
    behavior_explained_variance_ratio: &'a [f64],
    activation_explained_variance_ratio: &'a [f64],
}

fn trajectory_rows(trajs: &[EmbeddedTrajectory]) -> Vec<Vec<String>> {
    trajs
        .iter()
        .flat_map(|tr| {
            tr.coords.iter().enumerate().map(move |(i, c)| {
                let mut row = vec![tr.story_id.clone(), (i + 1).to_string()];
                row.extend(c.iter().map(|v| v.to_string()));
                row
            })
        })
        .collect()
}

fn write_trajectories(path: &std::path::Path, m: &Manifold, trajs: &[EmbeddedTrajectory]) -> Result<()> {
    let mut header = vec!["story_id".to_string(), "t".to_string()];
    header.extend((1..=m.d()).map(|i| format!("x{i}")));
    write_csv(path, &header, &trajectory_rows(trajs))
}

pub fn manifold(cfg: &PipelineConfig) -> Result<()> {
    let loaded = load(cfg)?;
    let (ds, domain) = (&loaded.dataset, &loaded.domain);
    let layer = analysis_layer(cfg, ds, cfg.manifold.layer)?;
    let acts = ds.layer(layer).expect("checked by analysis_layer");
    let trajs = ds.trajectories_for(&domain.name);
    let m = &cfg.manifold;
    let sel = select_all_concepts(&trajs, domain, m.n_total, m.per_story_cap)?;
    let my = fit_behavior_manifold(&trajs, domain, &sel, m.d)?;
    let mz = fit_activation_manifold(acts, domain, &sel, m.d)?;

    let dir = cfg.dir(MANIFOLD_DIR);
    reset_dir(&dir)?;
    write_json(&dir.join(SELECTION_FILE), &sel)?;
    write_manifold(&dir, BEHAVIOR, &my)?;
    write_manifold(&dir, ACTIVATIONS, &mz)?;

    let ey = trajs.iter().map(|t| embed_behavior(&my, t)).collect::<std::result::Result<Vec<_>, _>>()?;
    write_trajectories(&dir.join("behavior_trajectories.csv"), &my, &ey)?;
    let ez = ds
        .stories
        .iter()
        .map(|s| embed_activations(&mz, acts, &s.story_id))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_trajectories(&dir.join("activation_trajectories.csv"), &mz, &ez)?;

    write_json(
        &dir.join(REPORT_FILE),
        &Summary {
            domain: &domain.name,
            reducer: m.reducer,
            layer,
            d: m.d,
            n_points: my.points.len(),
            behavior_explained_variance_ratio: &my.reducer.explained_variance_ratio,
            activation_explained_variance_ratio: &mz.reducer.explained_variance_ratio,
        },
    )?;
    println!(
        "manifold: {} points, layer {layer}, explained variance {:.3} (behavior) {:.3} (activations)",
        my.points.len(),
        my.reducer.explained_variance_ratio.iter().sum::<f64>(),
        mz.reducer.explained_variance_ratio.iter().sum::<f64>()
    );
    Ok(())
}
