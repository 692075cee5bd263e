use beliefspace::data::ActivationDataset;
use beliefspace::probes::{layer_sweep, write_probe_bundle, StorySplit, SweepConfig};

use super::{load, PROBE_DIR, REPORT_FILE};
use crate::config::PipelineConfig;
use crate::error::{invalid, OrInvalid, Result};
use crate::io::{reset_dir, write_json};

pub fn probe(cfg: &PipelineConfig) -> Result<()> {
    let loaded = load(cfg)?;
    let (ds, domain) = (&loaded.dataset, &loaded.domain);
    if ds.activations.is_empty() {
        return Err(invalid(format!("dataset {} has no activations", cfg.dataset_dir().display())));
    }
    let layers: Vec<&ActivationDataset> = match &cfg.layers {
        None => ds.activations.iter().collect(),
        Some(ls) => ls
            .iter()
            .map(|&l| ds.layer(l).ok_or_else(|| invalid(format!("layer {l} not in dataset"))))
            .collect::<Result<_>>()?,
    };
    let trajs = ds.trajectories_for(&domain.name);
    let ids: Vec<&str> = ds.stories.iter().map(|s| s.story_id.as_str()).collect();
    let split = StorySplit::random(&ids, cfg.probe.train_fraction, cfg.probe.calibration_fraction, cfg.seed)
        .or_invalid("story split")?;
    let sweep_cfg = SweepConfig {
        lambda: cfg.probe.lambda.clone(),
        scaling: cfg.probe.scaling,
    };
    let sweep = layer_sweep(&layers, &trajs, domain, &split, &sweep_cfg)?;

    let dir = cfg.dir(PROBE_DIR);
    reset_dir(&dir)?;
    for p in &sweep.probes {
        write_probe_bundle(&dir.join("bundles"), p)?;
    }
    write_json(&dir.join("split.json"), &split)?;
    write_json(&dir.join(REPORT_FILE), &sweep.report)?;
    let r = &sweep.report;
    let best = r.layers.iter().position(|&l| l == r.selected_layer).map_or(f64::NAN, |i| r.mean_test_rmse[i]);
    println!("probe: selected layer {} (mean test RMSE {best:.4})", r.selected_layer);
    Ok(())
}
