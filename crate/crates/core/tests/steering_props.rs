//! Algebraic invariants of steering vectors and interventions.

use beliefspace::probes::{CalibrationMap, Probe, RidgeModel, Standardization};
use beliefspace::steering::{apply_steering, vector_diff_in_means, vector_from_probe, SteeringMethod, SteeringVector};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, n)
}

fn dyadic(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec((-64i32..64).prop_map(|k| f64::from(k) / 8.0), n)
}

fn probe(weights: Vec<f64>, scale: Vec<f64>) -> Probe {
    let q = weights.len();
    Probe {
        layer: 0,
        concept: "c".into(),
        model: RidgeModel {
            weights,
            bias: 0.3,
            lambda: 1.0,
            standardization: Standardization {
                mean: vec![0.0; q],
                scale,
            },
        },
        calibration: CalibrationMap::identity(),
    }
}

proptest! {
    #[test]
    fn additive_in_alpha((z, v) in (1usize..16).prop_flat_map(|n| (vec_of(n), vec_of(n))), a1 in -5.0f64..5.0, a2 in -5.0f64..5.0) {
        let twice = apply_steering(&apply_steering(&z, a1, &v).unwrap(), a2, &v).unwrap();
        let once = apply_steering(&z, a1 + a2, &v).unwrap();
        for (x, y) in twice.iter().zip(&once) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs())) * 16.0);
        }
        prop_assert_eq!(apply_steering(&z, 0.0, &v).unwrap(), z);
    }

    #[test]
    fn opposite_alpha_restores_exactly((z, v) in (1usize..16).prop_flat_map(|n| (dyadic(n), dyadic(n))), k in -16i32..16) {
        let a = f64::from(k) / 4.0;
        let back = apply_steering(&apply_steering(&z, a, &v).unwrap(), -a, &v).unwrap();
        prop_assert_eq!(back, z);
    }

    #[test]
    fn probe_direction_ignores_positive_rescaling(
        (w, s) in (1usize..12).prop_flat_map(|n| (vec_of(n), proptest::collection::vec(0.1f64..5.0, n))),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(w.iter().any(|x| x.abs() > 1e-6));
        let a = vector_from_probe(&probe(w.clone(), s.clone())).unwrap();
        let b = vector_from_probe(&probe(w.iter().map(|x| c * x).collect(), s)).unwrap();
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn diff_in_means_is_antisymmetric(
        (pos, neg, q) in (1usize..6, 1usize..6, 1usize..8).prop_flat_map(|(a, b, q)| (vec_of(a * q), vec_of(b * q), Just(q))),
    ) {
        let p = DMatrix::from_row_slice(pos.len() / q, q, &pos);
        let n = DMatrix::from_row_slice(neg.len() / q, q, &neg);
        match vector_diff_in_means(&p, &n) {
            Ok(fwd) => {
                let rev = vector_diff_in_means(&n, &p).unwrap();
                let neg_fwd: Vec<f64> = fwd.iter().map(|x| -x).collect();
                prop_assert_eq!(rev, neg_fwd);
            }
            Err(_) => prop_assert!(vector_diff_in_means(&n, &p).is_err()),
        }
    }

    #[test]
    fn stored_directions_are_unit(raw in proptest::collection::vec(vec_of(5), 1..5), start in 0usize..10) {
        prop_assume!(raw.iter().all(|v| v.iter().any(|x| x.abs() > 1e-6)));
        let layers: Vec<usize> = (start..start + raw.len()).collect();
        let v = SteeringVector::new("c", SteeringMethod::ProbeWeights, layers, raw.clone()).unwrap();
        for (d, (r, n)) in v.directions.iter().zip(raw.iter().zip(&v.norms)) {
            let norm: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
            for (a, b) in d.iter().zip(r) {
                prop_assert!((a * n - b).abs() < 1e-9 * n.max(1.0));
            }
        }
    }
}

#[test]
fn non_contiguous_span_is_rejected() {
    let raw = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(SteeringVector::new("c", SteeringMethod::DiffInMeans, vec![3, 5], raw).is_err());
}
