use std::collections::HashMap;
use std::path::PathBuf;

use beliefspace::data::{BeliefTrajectory, DatasetReader};
use beliefspace::probes::{read_probe_bundle, Probe};

use super::steer::RUNS_DIR;
use super::{bundle_path, file_stem, load, probe_report, write_csv, Loaded, PLOT_DIR, PROBE_DIR, REPORT_FILE, STEER_DIR};
use crate::config::PipelineConfig;
use crate::error::{invalid, OrInvalid, Result};
use crate::io::{reset_dir, write_bytes};
use crate::svg::{line_chart, Series, Stroke};

/// One CSV line: belief in `concept` after sentence `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub t: usize,
    pub concept: String,
    pub value: f64,
    pub predicted: Option<f64>,
    pub steered: Option<f64>,
}

/// Calibrated probes at the selected layer, when the probe step has run and
/// the dataset carries that layer.
fn selected_probes(cfg: &PipelineConfig, loaded: &Loaded) -> Result<Option<(usize, Vec<Probe>)>> {
    if !cfg.dir(PROBE_DIR).join(REPORT_FILE).is_file() {
        return Ok(None);
    }
    let report = probe_report(cfg)?;
    if loaded.dataset.layer(report.selected_layer).is_none() || report.domain != loaded.domain.name {
        return Ok(None);
    }
    let probes = loaded
        .domain
        .concepts
        .iter()
        .map(|c| {
            let path = bundle_path(cfg, report.selected_layer, c);
            read_probe_bundle(&path).or_invalid(&path.display().to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some((report.selected_layer, probes)))
}

fn steered_source(cfg: &PipelineConfig, loaded: &Loaded) -> Result<Option<(String, PathBuf)>> {
    let explicit = cfg.plots.steered_concept.clone();
    let concept = match explicit.clone().or_else(|| loaded.domain.concepts.first().cloned()) {
        Some(c) => c,
        None => return Ok(None),
    };
    let path = cfg
        .steer
        .imported
        .get(&concept)
        .cloned()
        .unwrap_or_else(|| cfg.dir(STEER_DIR).join(RUNS_DIR).join(file_stem(&concept)));
    if path.is_dir() {
        Ok(Some((concept, path)))
    } else if explicit.is_some() {
        Err(invalid(format!("no steered run for {concept} at {}", path.display())))
    } else {
        Ok(None)
    }
}

pub fn export_plots(cfg: &PipelineConfig) -> Result<()> {
    let loaded = load(cfg)?;
    let (ds, domain) = (&loaded.dataset, &loaded.domain);
    let trajs: HashMap<&str, &BeliefTrajectory> =
        ds.trajectories_for(&domain.name).into_iter().map(|t| (t.story_id.as_str(), t)).collect();
    let stories: Vec<String> = if cfg.plots.stories.is_empty() {
        ds.stories.iter().map(|s| s.story_id.clone()).collect()
    } else {
        cfg.plots.stories.clone()
    };
    for s in &stories {
        if ds.story(s).is_none() {
            return Err(invalid(format!("unknown story_id {s}")));
        }
    }
    let probes = selected_probes(cfg, &loaded)?;
    let steered = match steered_source(cfg, &loaded)? {
        Some((concept, path)) => {
            let run = DatasetReader::open(&path).or_invalid(&format!("steered run {}", path.display()))?;
            let by_story: HashMap<String, BeliefTrajectory> = run
                .trajectories
                .into_iter()
                .filter(|t| t.domain == domain.name)
                .map(|t| (t.story_id.clone(), t))
                .collect();
            Some((concept, by_story))
        }
        None => None,
    };
    let positions = probes.as_ref().map(|(l, _)| ds.layer(*l).expect("checked").positions());

    let dir = cfg.dir(PLOT_DIR);
    reset_dir(&dir)?;
    for story in &stories {
        let traj = trajs
            .get(story.as_str())
            .ok_or_else(|| invalid(format!("story {story} has no {} trajectory", domain.name)))?;
        let acts = probes.as_ref().map(|(l, _)| ds.layer(*l).expect("checked"));
        let mut rows = Vec::with_capacity(traj.len() * domain.k());
        for t in 1..=traj.len() {
            let z = match (acts, &positions) {
                (Some(a), Some(pos)) => pos
                    .get(&beliefspace::data::RecordKey::new(story.clone(), t))
                    .map(|&i| a.row_f64(i)),
                _ => None,
            };
            for (c, concept) in domain.concepts.iter().enumerate() {
                let predicted = match (&probes, &z) {
                    (Some((_, ps)), Some(z)) => Some(ps[c].predict(z)?),
                    _ => None,
                };
                let steered = steered
                    .as_ref()
                    .and_then(|(_, m)| m.get(story))
                    .filter(|s| s.len() == traj.len())
                    .map(|s| s.value(t, c));
                rows.push(PlotRow {
                    t,
                    concept: concept.clone(),
                    value: traj.value(t, c),
                    predicted,
                    steered,
                });
            }
        }
        let stem = format!("{}_{}", file_stem(story), file_stem(&domain.name));
        write_story_csv(&dir.join(format!("{stem}.csv")), &rows, probes.is_some(), steered.is_some())?;
        let title = match &steered {
            Some((c, _)) => format!("{story} / {} (steered: {c})", domain.name),
            None => format!("{story} / {}", domain.name),
        };
        let svg = line_chart(&title, traj.len(), &series(&domain.concepts, &rows));
        write_bytes(&dir.join(format!("{stem}.svg")), svg.as_bytes())?;
    }
    println!("export-plots: {} stories -> {}", stories.len(), dir.display());
    Ok(())
}

fn write_story_csv(path: &std::path::Path, rows: &[PlotRow], predicted: bool, steered: bool) -> Result<()> {
    let mut header: Vec<String> = ["t", "concept", "value"].iter().map(|s| s.to_string()).collect();
    if predicted {
        header.push("predicted".into());
    }
    if steered {
        header.push("steered".into());
    }
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let lines: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.t.to_string(), r.concept.clone(), r.value.to_string()];
            if predicted {
                line.push(opt(r.predicted));
            }
            if steered {
                line.push(opt(r.steered));
            }
            line
        })
        .collect();
    write_csv(path, &header, &lines)
}

fn series(concepts: &[String], rows: &[PlotRow]) -> Vec<Series> {
    let mut out = Vec::new();
    for (ci, c) in concepts.iter().enumerate() {
        let mine: Vec<&PlotRow> = rows.iter().filter(|r| &r.concept == c).collect();
        let line = |label: String, stroke, pick: &dyn Fn(&PlotRow) -> Option<f64>| {
            let points: Vec<(f64, f64)> = mine.iter().filter_map(|r| pick(r).map(|v| (r.t as f64, v))).collect();
            (!points.is_empty()).then_some(Series {
                label,
                color: ci,
                stroke,
                points,
            })
        };
        out.extend(line(c.clone(), Stroke::Solid, &|r| Some(r.value)));
        out.extend(line(format!("{c} (probe)"), Stroke::Dashed, &|r| r.predicted));
        out.extend(line(format!("{c} (steered)"), Stroke::Dotted, &|r| r.steered));
    }
    out
}
