use std::fs;

use beliefspace::data::{write_dataset, MANIFEST_FILE};
use beliefspace::oracle::{generate, write_ground_truth, GenerateConfig};

use super::ORACLE_DIR;
use crate::config::PipelineConfig;
use crate::error::{invalid, OrInvalid, Result};
use crate::io::reset_dir;

pub fn synth_gen(cfg: &PipelineConfig) -> Result<()> {
    let space = &cfg.synth.space;
    let gen_cfg = GenerateConfig {
        seed: cfg.seed,
        ..cfg.synth.generate.clone()
    };
    space.validate().or_invalid("synth.space")?;
    gen_cfg.validate().or_invalid("synth.generate")?;
    let g = generate(space, &gen_cfg)?;

    let root = cfg.dataset_dir();
    if root.exists() {
        let occupied = fs::read_dir(&root)?.next().is_some();
        if occupied && !root.join(MANIFEST_FILE).is_file() {
            return Err(invalid(format!(
                "{} exists and is not a dataset; refusing to overwrite",
                root.display()
            )));
        }
    }
    reset_dir(&root)?;
    write_dataset(&root, &g.dataset)?;
    let oracle = cfg.dir(ORACLE_DIR);
    reset_dir(&oracle)?;
    write_ground_truth(&oracle, &g.truth)?;
    println!(
        "synth-gen: {} stories, {} records, layers {:?} -> {}",
        g.dataset.stories.len(),
        g.dataset.activations.first().map_or(0, |a| a.len()),
        g.dataset.manifest.layers,
        root.display()
    );
    Ok(())
}
