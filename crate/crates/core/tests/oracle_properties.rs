//! Derived properties of the planted space checked against closed forms.

use std::collections::BTreeSet;

use beliefspace::data::{ActivationDataset, BeliefTrajectory, RecordKey};
use beliefspace::geometry::{behavior_correlations, position_encoding_check};
use beliefspace::manifold::{fit_activation_manifold, select_all_concepts, select_max_activating};
use beliefspace::oracle::{generate, GenerateConfig, Generated, PlantedSpace};
use beliefspace::probes::{layer_sweep, LambdaPolicy, StorySplit, SweepConfig};
use beliefspace::stats::{cosine, dot};
use beliefspace::steering::{dim_steering_vector, magnitude_sweep, probe_steering_vector, simulate_steering};

fn run(space: &PlantedSpace, seed: u64) -> Generated {
    generate(space, &GenerateConfig { seed, ..GenerateConfig::default() }).unwrap()
}

fn layers(g: &Generated) -> Vec<&ActivationDataset> {
    g.dataset.activations.iter().collect()
}

fn trajs(g: &Generated) -> Vec<&BeliefTrajectory> {
    g.dataset.trajectories.iter().collect()
}

fn story_ids(g: &Generated) -> Vec<&str> {
    g.dataset.stories.iter().map(|s| s.story_id.as_str()).collect()
}

#[test]
fn noiseless_probes_are_exact() {
    let space = PlantedSpace {
        sigma: 0.0,
        activation_sigma: 0.0,
        ..PlantedSpace::default()
    };
    let cfg = GenerateConfig {
        n_stories: 1000,
        seed: 3,
        ..GenerateConfig::default()
    };
    let g = generate(&space, &cfg).unwrap();
    let domain = space.domain_spec().unwrap();
    let split = StorySplit::standard(&story_ids(&g), 3).unwrap();
    let cfg = SweepConfig {
        lambda: LambdaPolicy::Fixed { lambda: 1e-6 },
        ..SweepConfig::default()
    };
    let sweep = layer_sweep(&layers(&g), &trajs(&g), &domain, &split, &cfg).unwrap();
    assert_eq!(sweep.report.selected_layer, space.signal_layer());
    for c in &domain.concepts {
        let s = sweep.report.score(space.signal_layer(), c).unwrap();
        assert!(s.test_rmse < 1e-3, "{c}: {}", s.test_rmse);
    }
}

fn position_r2(space: &PlantedSpace, seed: u64) -> (f64, usize) {
    let g = run(space, seed);
    let domain = space.domain_spec().unwrap();
    let sel = select_all_concepts(&trajs(&g), &domain, 1000, 3).unwrap();
    let m = fit_activation_manifold(g.dataset.layer(space.signal_layer()).unwrap(), &domain, &sel, 2).unwrap();
    let pts: Vec<(usize, Vec<f64>)> = m.points.iter().map(|p| (p.t, p.coords.clone())).collect();
    (position_encoding_check(&pts).unwrap(), pts.len())
}

#[test]
fn planted_position_is_decodable() {
    let space = PlantedSpace {
        position_axis: true,
        ..PlantedSpace::default()
    };
    let (r2, _) = position_r2(&space, 5);
    assert!(r2 >= 0.8, "{r2}");
}

#[test]
fn position_free_latents_do_not_encode_t() {
    let (r2, n) = position_r2(&PlantedSpace::default(), 5);
    assert!(n >= 200);
    assert!(r2 < 0.05, "{r2}");
}

#[test]
fn behavior_correlations_match_isotropic_disk() {
    let space = PlantedSpace::default();
    let g = run(&space, 9);
    let domain = space.domain_spec().unwrap();
    let cm = behavior_correlations(&trajs(&g), &domain).unwrap();
    // Uniform disk of radius R has per-axis variance R²/4.
    let s2 = space.radius * space.radius / 4.0;
    let k = domain.k();
    for i in 0..k {
        for j in i + 1..k {
            let (a, b) = (space.anchors[i].point, space.anchors[j].point);
            let signal = |x: [f64; 2], y: [f64; 2]| (space.beta / 2.0).powi(2) * s2 * dot(&x, &y);
            let var = |x: [f64; 2]| signal(x, x) + space.sigma * space.sigma;
            let expected = signal(a, b) / (var(a) * var(b)).sqrt();
            let tol = 3.0 / (cm.n as f64).sqrt();
            assert!((cm.values[i][j] - expected).abs() < tol, "{i},{j}: {} vs {expected}", cm.values[i][j]);
        }
    }
}

#[test]
fn recovered_directions_align_with_planted_axes() {
    let space = PlantedSpace::default();
    let g = run(&space, 7);
    let domain = space.domain_spec().unwrap();
    let l = space.signal_layer();
    let split = StorySplit::standard(&story_ids(&g), 7).unwrap();
    let sweep = layer_sweep(&layers(&g), &trajs(&g), &domain, &split, &SweepConfig::default()).unwrap();
    let probes: Vec<_> = sweep.probes.iter().collect();
    let acts = g.dataset.layer(l).unwrap();
    for c in &domain.concepts {
        let axis = g.truth.concept_axis(c, l).unwrap();
        let pv = probe_steering_vector(&probes, c, &[l]).unwrap();
        let cos = cosine(&pv.directions[0], &axis);
        assert!(cos >= 0.95, "probe {c}: {cos}");

        let pos: Vec<RecordKey> = select_max_activating(&trajs(&g), &domain, c, 1000, 3)
            .unwrap()
            .iter()
            .map(|s| s.key())
            .collect();
        let pos_set: BTreeSet<&RecordKey> = pos.iter().collect();
        let neg: Vec<RecordKey> = acts.index().iter().filter(|k| !pos_set.contains(k)).cloned().collect();
        let dv = dim_steering_vector(acts, c, &pos, &neg).unwrap();
        let cos = cosine(&dv.directions[0], &axis);
        assert!(cos >= 0.95, "dim {c}: {cos}");
    }
}

#[test]
fn magnitude_sweep_matches_readout_gradient() {
    let space = PlantedSpace::default();
    let g = run(&space, 7);
    let domain = space.domain_spec().unwrap();
    let split = StorySplit::standard(&story_ids(&g), 7).unwrap();
    let sweep = layer_sweep(&layers(&g), &trajs(&g), &domain, &split, &SweepConfig::default()).unwrap();
    let probes: Vec<_> = sweep.probes.iter().collect();
    let model = g.truth.model();
    let v = probe_steering_vector(&probes, "happiness", &[2, 3]).unwrap();
    let grad = model.readout_gradient(&v).unwrap();
    let alphas = [-0.2, -0.1, 0.0, 0.1, 0.2];
    let curve = magnitude_sweep(&model, &domain, &layers(&g), &v, &alphas).unwrap();
    assert!(curve.effects[2].iter().all(|&e| e == 0.0));
    for (i, &a) in alphas.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (c, &gc) in grad.iter().enumerate() {
            let slope = curve.effects[i][c] / a;
            if gc.abs() > 0.05 {
                assert!((slope - gc).abs() <= 0.05 * gc.abs(), "α={a} c={c}: {slope} vs {gc}");
            }
        }
    }
    for c in 0..domain.k() {
        let (lo, hi) = (curve.effects[0][c], curve.effects[4][c]);
        assert!((lo + hi).abs() <= 1e-3 * hi.abs().max(1e-6), "c={c}: {lo} {hi}");
    }
}

#[test]
fn on_target_effect_grows_and_orthogonal_concepts_stay_put() {
    let space = PlantedSpace::default();
    let g = run(&space, 7);
    let domain = space.domain_spec().unwrap();
    let split = StorySplit::standard(&story_ids(&g), 7).unwrap();
    let sweep = layer_sweep(&layers(&g), &trajs(&g), &domain, &split, &SweepConfig::default()).unwrap();
    let probes: Vec<_> = sweep.probes.iter().collect();
    let model = g.truth.model();
    let v = probe_steering_vector(&probes, "surprise", &[2, 3]).unwrap();
    let alphas = [0.25, 0.5, 1.0, 1.5];
    let curve = magnitude_sweep(&model, &domain, &layers(&g), &v, &alphas).unwrap();
    let on = domain.index_of("surprise").unwrap();
    let fear = domain.index_of("fear").unwrap();
    let on_curve: Vec<f64> = curve.effects.iter().map(|e| e[on]).collect();
    assert!(on_curve[0] > 0.0);
    assert!(on_curve.windows(2).all(|w| w[1] > w[0]), "{on_curve:?}");
    for e in &curve.effects {
        assert!(e[fear].abs() < 0.02, "{}", e[fear]);
    }

    let run = simulate_steering(&model, &domain, &layers(&g), &v, 0.0).unwrap();
    for (a, b) in run.layers.iter().zip(&g.dataset.activations) {
        assert_eq!(a.raw(), b.raw());
    }
}
