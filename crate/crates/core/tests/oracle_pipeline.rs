//! End-to-end runs of the analysis stack on the default planted space.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use beliefspace::data::{ActivationDataset, BeliefTrajectory, ConceptDomain};
use beliefspace::geometry::{
    centroids, distance_matrix, matrix_correlation, top_level_split, ward_cluster, CentroidSet,
};
use beliefspace::manifold::{fit_activation_manifold, fit_behavior_manifold, select_all_concepts, Manifold};
use beliefspace::oracle::{anchor_disparity, generate, GenerateConfig, Generated, PlantedSpace};
use beliefspace::probes::{layer_sweep, LayerSweep, StorySplit, SweepConfig};
use beliefspace::steering::{
    clip_span, cluster_effect_analysis, entanglement_matrix, layer_persistence, predict_entanglement,
    probe_steering_vector, simulate_steering, EntanglementMatrix,
};

fn as_sets(split: &(Vec<String>, Vec<String>)) -> BTreeSet<BTreeSet<String>> {
    [&split.0, &split.1].iter().map(|g| g.iter().cloned().collect()).collect()
}

struct Fixture {
    space: PlantedSpace,
    domain: ConceptDomain,
    g: Generated,
    sweep: LayerSweep,
    mz: Manifold,
    my: Manifold,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let space = PlantedSpace::default();
        let g = generate(&space, &GenerateConfig { seed: 7, ..GenerateConfig::default() }).unwrap();
        let domain = space.domain_spec().unwrap();
        let trajs: Vec<&BeliefTrajectory> = g.dataset.trajectories.iter().collect();
        let layers: Vec<&ActivationDataset> = g.dataset.activations.iter().collect();
        let ids: Vec<&str> = g.dataset.stories.iter().map(|s| s.story_id.as_str()).collect();
        let split = StorySplit::standard(&ids, 7).unwrap();
        let sweep = layer_sweep(&layers, &trajs, &domain, &split, &SweepConfig::default()).unwrap();
        let sel = select_all_concepts(&trajs, &domain, 1000, 3).unwrap();
        let mz = fit_activation_manifold(g.dataset.layer(sweep.report.selected_layer).unwrap(), &domain, &sel, 2).unwrap();
        let my = fit_behavior_manifold(&trajs, &domain, &sel, 2).unwrap();
        Fixture {
            space,
            domain,
            g,
            sweep,
            mz,
            my,
        }
    })
}

fn centroid_sets(f: &Fixture) -> (CentroidSet, CentroidSet) {
    (
        centroids(&f.mz.points, &f.domain.concepts).unwrap(),
        centroids(&f.my.points, &f.domain.concepts).unwrap(),
    )
}

#[test]
fn probes_recover_beliefs_at_the_planted_layer() {
    let f = fixture();
    assert_eq!(f.sweep.report.selected_layer, f.space.signal_layer());
    for c in &f.domain.concepts {
        let s = f.sweep.report.score(f.space.signal_layer(), c).unwrap();
        assert!(s.test_rmse <= f.space.sigma + 0.02, "{c}: {}", s.test_rmse);
    }
    assert_eq!(f.sweep.report.scores.len(), 4 * 6);
}

#[test]
fn manifold_centroids_match_planted_geometry() {
    let f = fixture();
    let (cz, cy) = centroid_sets(f);
    assert!(anchor_disparity(&f.g.truth, &cz).unwrap() < 0.05);
    assert!(anchor_disparity(&f.g.truth, &cy).unwrap() < 0.05);
    let m = matrix_correlation(&distance_matrix(&cy).unwrap(), &distance_matrix(&cz).unwrap(), 999, 1).unwrap();
    assert!(m.r >= 0.9, "{m:?}");
    assert!(m.p_value < 0.05);
    let split = top_level_split(&ward_cluster(&distance_matrix(&cz).unwrap()).unwrap());
    assert_eq!(
        as_sets(&split),
        as_sets(&(
            vec!["happiness".into(), "surprise".into(), "anger".into()],
            vec!["sadness".into(), "fear".into(), "disgust".into()],
        ))
    );
}

fn entanglement(f: &Fixture, alpha: f64) -> EntanglementMatrix {
    let model = f.g.truth.model();
    let layers: Vec<&ActivationDataset> = f.g.dataset.activations.iter().collect();
    let probes: Vec<_> = f.sweep.probes.iter().collect();
    let span = clip_span(f.sweep.report.selected_layer, 7, &f.space.layers).unwrap();
    let mut steered = BTreeMap::new();
    let mut base = Vec::new();
    for c in &f.domain.concepts {
        let v = probe_steering_vector(&probes, c, &span).unwrap();
        let run = simulate_steering(&model, &f.domain, &layers, &v, alpha).unwrap();
        base = run.base_behavior;
        steered.insert(c.clone(), run.steered_behavior);
    }
    let refs: Vec<&BeliefTrajectory> = base.iter().collect();
    entanglement_matrix(&refs, &steered, &f.domain).unwrap()
}

#[test]
fn steering_entanglement_follows_behavior_geometry() {
    let f = fixture();
    let e = entanglement(f, 1.5);
    let k = e.concepts.len();
    for i in 0..k {
        let off: f64 = (0..k).filter(|&j| j != i).map(|j| e.values[i][j]).sum::<f64>() / (k - 1) as f64;
        assert!(e.values[i][i] > off, "row {i}");
    }
    let (_, cy) = centroid_sets(f);
    let p = predict_entanglement(&e, &distance_matrix(&cy).unwrap()).unwrap();
    assert!(p.r_distance.abs() >= 0.8, "{}", p.r_distance);
    assert!(p.r_neg_distance > 0.0);

    let split = top_level_split(&ward_cluster(&distance_matrix(&cy).unwrap()).unwrap());
    let c = cluster_effect_analysis(&e, &split, 0.02).unwrap();
    let within = c.within_cluster.unwrap().mean;
    assert!(c.on_target.mean > within && within > c.cross_cluster.mean.abs());
    assert!(c.cross_cluster_negligible, "{:?}", c.cross_cluster);
}

#[test]
fn zero_alpha_gives_exactly_zero_matrix() {
    let f = fixture();
    let e = entanglement(f, 0.0);
    assert!(e.values.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn single_layer_effects_decay_and_spans_persist() {
    let f = fixture();
    let model = f.g.truth.model();
    let layers: Vec<&ActivationDataset> = f.g.dataset.activations.iter().collect();
    let probes: Vec<_> = f.sweep.probes.iter().collect();
    let last = *f.space.layers.last().unwrap();

    let v = probe_steering_vector(&probes, "surprise", &[0]).unwrap();
    let run = simulate_steering(&model, &f.domain, &layers, &v, 1.5).unwrap();
    let steered: Vec<&ActivationDataset> = run.layers.iter().collect();
    let single = layer_persistence(&probes, "surprise", &layers, &steered, 0).unwrap();
    assert!(single.delta[0] > 0.05);
    assert!(single.relative[3] < 0.2, "{:?}", single.relative);

    let v = probe_steering_vector(&probes, "surprise", &f.space.layers).unwrap();
    let run = simulate_steering(&model, &f.domain, &layers, &v, 1.5).unwrap();
    let steered: Vec<&ActivationDataset> = run.layers.iter().collect();
    let span = layer_persistence(&probes, "surprise", &layers, &steered, 0).unwrap();
    let final_rel = span.relative[span.layers.iter().position(|&l| l == last).unwrap()];
    assert!(final_rel >= 0.8, "{:?}", span.relative);
}
