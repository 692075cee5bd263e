//! Isotonic calibration by pool-adjacent-violators.

use serde::{Deserialize, Serialize};

use super::{ProbeError, Result};

/// Weighted least-squares non-decreasing fit of `y` in the given order.
///
/// Returns one fitted value per input, unclipped.
pub fn pava(y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if y.len() != w.len() {
        return Err(ProbeError::DimensionMismatch {
            expected: y.len(),
            actual: w.len(),
        });
    }
    if let Some(&bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(ProbeError::NonPositiveWeight(bad));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite);
    }
    // Blocks of (weighted mean, total weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&yi, &wi) in y.iter().zip(w) {
        blocks.push((yi, wi, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let wt = w1 + w2;
            *blocks.last_mut().unwrap() = ((m1 * w1 + m2 * w2) / wt, wt, n1 + n2);
        }
    }
    Ok(blocks
        .into_iter()
        .flat_map(|(m, _, n)| std::iter::repeat_n(m, n))
        .collect())
}

/// A monotone map on `[0, 1]`: piecewise linear between knots, constant
/// beyond the end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl CalibrationMap {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(ProbeError::InvalidCalibration("knot lists empty or of unequal length".into()));
        }
        if breakpoints.windows(2).any(|p| !(p[0] < p[1])) || breakpoints.iter().any(|x| !x.is_finite()) {
            return Err(ProbeError::InvalidCalibration("breakpoints not strictly increasing".into()));
        }
        if values.windows(2).any(|p| !(p[0] <= p[1])) || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ProbeError::InvalidCalibration("values not non-decreasing within [0,1]".into()));
        }
        Ok(CalibrationMap { breakpoints, values })
    }

    /// Identity on `[0, 1]`, clamping outside.
    pub fn identity() -> Self {
        CalibrationMap {
            breakpoints: vec![0.0, 1.0],
            values: vec![0.0, 1.0],
        }
    }

    pub fn constant(value: f64) -> Self {
        CalibrationMap {
            breakpoints: vec![0.0],
            values: vec![value.clamp(0.0, 1.0)],
        }
    }

    /// Fits an isotonic map from scores `x` to targets `y`. Tied scores are
    /// pooled first so equal inputs always calibrate to equal outputs.
    pub fn fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<Self> {
        if x.is_empty() {
            return Err(ProbeError::TooFewSamples(0));
        }
        if x.len() != y.len() || x.len() != w.len() {
            return Err(ProbeError::DimensionMismatch {
                expected: x.len(),
                actual: y.len().min(w.len()),
            });
        }
        if let Some(&bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(ProbeError::NonPositiveWeight(bad));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite);
        }
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));

        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut ws: Vec<f64> = Vec::new();
        for i in order {
            if xs.last() == Some(&x[i]) {
                let last = ys.len() - 1;
                let wt = ws[last] + w[i];
                ys[last] = (ys[last] * ws[last] + y[i] * w[i]) / wt;
                ws[last] = wt;
            } else {
                xs.push(x[i]);
                ys.push(y[i]);
                ws.push(w[i]);
            }
        }
        let fitted = pava(&ys, &ws)?;
        let values = fitted.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(CalibrationMap {
            breakpoints: xs,
            values,
        })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn apply(&self, x: f64) -> f64 {
        let bp = &self.breakpoints;
        let last = bp.len() - 1;
        if x.is_nan() {
            return f64::NAN;
        }
        if x <= bp[0] {
            return self.values[0];
        }
        if x >= bp[last] {
            return self.values[last];
        }
        // bp[hi-1] < x < bp[hi]
        let hi = bp.partition_point(|&b| b <= x);
        let lo = hi - 1;
        let frac = (x - bp[lo]) / (bp[hi] - bp[lo]);
        self.values[lo] + frac * (self.values[hi] - self.values[lo])
    }
}
