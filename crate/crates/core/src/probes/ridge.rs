//! Ridge regression with an unpenalized intercept on centered (and by default
//! standardized) features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ProbeError, Result};

/// How features are transformed before the penalty is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScaling {
    /// Center and divide by the population standard deviation.
    #[default]
    Standardize,
    /// Center only; the penalty acts on raw-unit weights.
    CenterOnly,
}

/// Per-dimension `(z - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    fn fit(z: &DMatrix<f64>, scaling: FeatureScaling) -> Self {
        let n = z.nrows() as f64;
        let mut mean = Vec::with_capacity(z.ncols());
        let mut scale = Vec::with_capacity(z.ncols());
        for col in z.column_iter() {
            let m = col.sum() / n;
            mean.push(m);
            let s = match scaling {
                FeatureScaling::CenterOnly => 1.0,
                FeatureScaling::Standardize => {
                    let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                    let sd = var.sqrt();
                    // Constant columns carry no signal; unit scale keeps them inert.
                    if sd > 0.0 && sd.is_finite() {
                        sd
                    } else {
                        1.0
                    }
                }
            };
            scale.push(s);
        }
        Standardization { mean, scale }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// A fitted linear readout `f(z) = w . standardize(z) + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub standardization: Standardization,
}

impl RidgeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Raw (uncalibrated) prediction.
    pub fn predict_raw(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(ProbeError::DimensionMismatch {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        let mut acc = self.bias;
        for ((v, w), (m, s)) in z
            .iter()
            .zip(&self.weights)
            .zip(self.standardization.mean.iter().zip(&self.standardization.scale))
        {
            acc += w * (v - m) / s;
        }
        Ok(acc)
    }

    /// Weights in the raw activation basis (standardization folded in).
    pub fn raw_weights(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.standardization.scale)
            .map(|(w, s)| w / s)
            .collect()
    }

    /// Intercept in the raw activation basis.
    pub fn raw_bias(&self) -> f64 {
        self.bias
            - self
                .raw_weights()
                .iter()
                .zip(&self.standardization.mean)
                .map(|(w, m)| w * m)
                .sum::<f64>()
    }
}

/// Minimizes `sum_n (w . x_n + b - y_n)^2 + lambda * |w|^2` where `x_n` are the
/// transformed features and `b` is unpenalized.
///
/// Solves the primal `q x q` system when `N >= q` and the dual `N x N` system
/// otherwise; both give the same minimizer for `lambda > 0`.
pub fn fit_ridge(z: &DMatrix<f64>, y: &[f64], lambda: f64, scaling: FeatureScaling) -> Result<RidgeModel> {
    let n = z.nrows();
    if n < 2 {
        return Err(ProbeError::TooFewSamples(n));
    }
    if y.len() != n {
        return Err(ProbeError::DimensionMismatch {
            expected: n,
            actual: y.len(),
        });
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ProbeError::InvalidLambda(lambda));
    }
    if z.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite);
    }

    let standardization = Standardization::fit(z, scaling);
    let q = z.ncols();
    let x = DMatrix::from_fn(n, q, |i, j| {
        (z[(i, j)] - standardization.mean[j]) / standardization.scale[j]
    });
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    let weights = if n >= q || lambda == 0.0 {
        let mut gram = x.tr_mul(&x);
        for i in 0..q {
            gram[(i, i)] += lambda;
        }
        let rhs = x.tr_mul(&yc);
        let chol = gram.cholesky().ok_or(ProbeError::Singular { lambda })?;
        chol.solve(&rhs)
    } else {
        let mut kernel = &x * x.transpose();
        for i in 0..n {
            kernel[(i, i)] += lambda;
        }
        let chol = kernel.cholesky().ok_or(ProbeError::Singular { lambda })?;
        x.tr_mul(&chol.solve(&yc))
    };

    Ok(RidgeModel {
        weights: weights.iter().copied().collect(),
        bias: y_mean,
        lambda,
        standardization,
    })
}

/// Log-spaced default grid `1e-3, 1e-2, ..., 1e3`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-3..=3).map(|e| 10f64.powi(e)).collect()
}

/// Picks `lambda` by grouped k-fold cross-validation: rows sharing a group
/// label (a story) always land in the same fold. Returns the largest grid
/// value whose mean fold MSE is within one standard error of the best mean.
pub fn select_lambda_cv(
    z: &DMatrix<f64>,
    y: &[f64],
    groups: &[&str],
    grid: &[f64],
    folds: usize,
    scaling: FeatureScaling,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(ProbeError::InvalidLambda(f64::NAN));
    }
    let mut labels: Vec<&str> = groups.to_vec();
    labels.sort_unstable();
    labels.dedup();
    let folds = folds.min(labels.len());
    if folds < 2 {
        return Err(ProbeError::TooFewGroups(labels.len()));
    }
    let fold_of = |g: &str| labels.binary_search(&g).map(|i| i % folds).unwrap_or(0);
    let assignment: Vec<usize> = groups.iter().map(|g| fold_of(g)).collect();

    // (lambda, mean fold MSE, standard error)
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut fold_mse = Vec::with_capacity(folds);
        for fold in 0..folds {
            let train: Vec<usize> = (0..z.nrows()).filter(|&i| assignment[i] != fold).collect();
            let held: Vec<usize> = (0..z.nrows()).filter(|&i| assignment[i] == fold).collect();
            if train.len() < 2 || held.is_empty() {
                continue;
            }
            let zt = z.select_rows(&train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = fit_ridge(&zt, &yt, lambda, scaling)?;
            let mut sse = 0.0;
            for &i in &held {
                let row: Vec<f64> = z.row(i).iter().copied().collect();
                let e = model.predict_raw(&row)? - y[i];
                sse += e * e;
            }
            fold_mse.push(sse / held.len() as f64);
        }
        let n = fold_mse.len();
        if n == 0 {
            return Err(ProbeError::TooFewGroups(labels.len()));
        }
        let mean = fold_mse.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = fold_mse.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        scores.push((lambda, mean, se));
    }
    let best = scores
        .iter()
        .fold(scores[0], |b, s| if s.1 < b.1 { *s } else { b });
    let threshold = best.1 + best.2;
    Ok(scores
        .iter()
        .filter(|s| s.1 <= threshold)
        .map(|s| s.0)
        .fold(best.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn column(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(xs.len(), 1, xs)
    }

    #[test]
    fn exact_linear_data_unpenalized() {
        let m = fit_ridge(&column(&[1.0, 2.0, 3.0]), &[2.0, 4.0, 6.0], 0.0, FeatureScaling::Standardize).unwrap();
        assert!((m.raw_weights()[0] - 2.0).abs() < 1e-12);
        assert!(m.raw_bias().abs() < 1e-12);
        assert!((m.predict_raw(&[2.0]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn centered_ridge_matches_closed_form() {
        // slope = Sxy / (Sxx + lambda) = 4 / (2 + 2)
        let m = fit_ridge(&column(&[1.0, 2.0, 3.0]), &[2.0, 4.0, 6.0], 2.0, FeatureScaling::CenterOnly).unwrap();
        assert!((m.raw_weights()[0] - 1.0).abs() < 1e-12);
        assert!((m.raw_bias() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(
            fit_ridge(&column(&[1.0]), &[1.0], 1.0, FeatureScaling::Standardize),
            Err(ProbeError::TooFewSamples(1))
        ));
        assert!(matches!(
            fit_ridge(&column(&[1.0, f64::NAN]), &[1.0, 2.0], 1.0, FeatureScaling::Standardize),
            Err(ProbeError::NonFinite)
        ));
        // two identical columns: singular without a penalty
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(matches!(
            fit_ridge(&z, &[1.0, 2.0, 3.0], 0.0, FeatureScaling::Standardize),
            Err(ProbeError::Singular { .. })
        ));
        assert!(fit_ridge(&z, &[1.0, 2.0, 3.0], 0.1, FeatureScaling::Standardize).is_ok());
        assert!(matches!(
            fit_ridge(&z, &[1.0, 2.0, 3.0], -1.0, FeatureScaling::Standardize),
            Err(ProbeError::InvalidLambda(_))
        ));
    }

    fn random_problem(seed: u64, n: usize, q: usize) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, q, |_, j| rng.random_range(-1.0..1.0) * (1.0 + j as f64));
        let y = (0..n).map(|i| z.row(i).sum() * 0.1 + rng.random_range(-0.5..0.5)).collect();
        (z, y)
    }

    fn objective(m: &RidgeModel, x: &DMatrix<f64>, y: &[f64], w: &[f64], b: f64) -> f64 {
        let mut sse = 0.0;
        for i in 0..x.nrows() {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let xs = m.standardization.apply(&row);
            let p: f64 = xs.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
            sse += (p - y[i]).powi(2);
        }
        sse + m.lambda * w.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn gradient_vanishes_by_finite_differences() {
        let (z, y) = random_problem(7, 40, 6);
        let m = fit_ridge(&z, &y, 0.7, FeatureScaling::Standardize).unwrap();
        let h = 1e-6;
        let f0 = objective(&m, &z, &y, &m.weights, m.bias);
        for j in 0..=m.weights.len() {
            let (mut wp, mut wm) = (m.weights.clone(), m.weights.clone());
            let (mut bp, mut bm) = (m.bias, m.bias);
            if j < m.weights.len() {
                wp[j] += h;
                wm[j] -= h;
            } else {
                bp += h;
                bm -= h;
            }
            let g = (objective(&m, &z, &y, &wp, bp) - objective(&m, &z, &y, &wm, bm)) / (2.0 * h);
            assert!(g.abs() <= 1e-5 * f0.max(1.0), "component {j}: {g}");
        }
    }

    #[test]
    fn weight_norm_shrinks_with_lambda() {
        let (z, y) = random_problem(11, 30, 5);
        let mut last = f64::INFINITY;
        for lambda in [0.0, 0.01, 0.1, 1.0, 10.0, 100.0] {
            let m = fit_ridge(&z, &y, lambda, FeatureScaling::Standardize).unwrap();
            let norm = m.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!(norm <= last + 1e-12);
            last = norm;
        }
    }

    #[test]
    fn dual_and_primal_agree() {
        let (z, y) = random_problem(3, 12, 20);
        let dual = fit_ridge(&z, &y, 0.5, FeatureScaling::Standardize).unwrap();
        let x = DMatrix::from_fn(12, 20, |i, j| {
            (z[(i, j)] - dual.standardization.mean[j]) / dual.standardization.scale[j]
        });
        let ym = y.iter().sum::<f64>() / 12.0;
        let yc = DVector::from_iterator(12, y.iter().map(|v| v - ym));
        let mut g = x.tr_mul(&x);
        for i in 0..20 {
            g[(i, i)] += 0.5;
        }
        let w = g.lu().solve(&x.tr_mul(&yc)).unwrap();
        for (a, b) in dual.weights.iter().zip(w.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn standardization_is_folded_into_predictions() {
        let (z, y) = random_problem(5, 25, 4);
        let m = fit_ridge(&z, &y, 0.3, FeatureScaling::Standardize).unwrap();
        let pre = DMatrix::from_fn(25, 4, |i, j| (z[(i, j)] - m.standardization.mean[j]) / m.standardization.scale[j]);
        let m2 = fit_ridge(&pre, &y, 0.3, FeatureScaling::Standardize).unwrap();
        for i in 0..25 {
            let a: Vec<f64> = z.row(i).iter().copied().collect();
            let b: Vec<f64> = pre.row(i).iter().copied().collect();
            assert!((m.predict_raw(&a).unwrap() - m2.predict_raw(&b).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_validation_prefers_small_lambda_on_clean_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = DMatrix::from_fn(60, 3, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..60).map(|i| z[(i, 0)] - 2.0 * z[(i, 2)]).collect();
        let groups: Vec<String> = (0..60).map(|i| format!("s{}", i / 6)).collect();
        let groups: Vec<&str> = groups.iter().map(String::as_str).collect();
        let lambda = select_lambda_cv(&z, &y, &groups, &default_lambda_grid(), 5, FeatureScaling::Standardize).unwrap();
        assert_eq!(lambda, 1e-3);
    }
}
