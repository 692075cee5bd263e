//! Concept centroids, distance matrices, Ward clustering and matrix comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BeliefTrajectory, ConceptDomain};
use crate::manifold::EmbeddedPoint;
use crate::stats;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("concept {0} has no points")]
    EmptyConcept(String),
    #[error("need at least {needed} concepts, got {got}")]
    TooFewConcepts { needed: usize, got: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-finite value")]
    NonFinite,
    #[error("concept sets differ: {0}")]
    ConceptMismatch(String),
    #[error("zero variance: {0}")]
    ZeroVariance(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

pub const DEFAULT_PERMUTATIONS: usize = 9999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    pub concepts: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

/// Mean of the embedded points carrying each label, in `concepts` order.
/// Points with other labels are ignored.
pub fn centroids(points: &[EmbeddedPoint], concepts: &[String]) -> Result<CentroidSet> {
    let d = points.first().map_or(0, |p| p.coords.len());
    let mut sums = vec![vec![0.0; d]; concepts.len()];
    let mut counts = vec![0usize; concepts.len()];
    let lookup: BTreeMap<&str, usize> = concepts.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    for p in points {
        let Some(&c) = lookup.get(p.label.as_str()) else {
            continue;
        };
        if p.coords.len() != d {
            return Err(GeometryError::DimensionMismatch {
                expected: d,
                actual: p.coords.len(),
            });
        }
        for (s, v) in sums[c].iter_mut().zip(&p.coords) {
            *s += v;
        }
        counts[c] += 1;
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(GeometryError::EmptyConcept(concepts[i].clone()));
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    if centroids.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    Ok(CentroidSet {
        concepts: concepts.to_vec(),
        centroids,
        counts,
    })
}

/// Symmetric `k x k` matrix over an ordered concept list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub concepts: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn k(&self) -> usize {
        self.concepts.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Entries above the diagonal, row-major.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let k = self.k();
        (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).map(|(i, j)| self.values[i][j]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("concept");
        for c in &self.concepts {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.concepts.iter().zip(&self.values) {
            out.push_str(c);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Same matrix with concepts relabelled through `perm` (`new[i] = old[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        DistanceMatrix {
            concepts: perm.iter().map(|&i| self.concepts[i].clone()).collect(),
            values: perm.iter().map(|&i| perm.iter().map(|&j| self.values[i][j]).collect()).collect(),
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn distance_matrix(set: &CentroidSet) -> Result<DistanceMatrix> {
    let k = set.concepts.len();
    if k < 2 {
        return Err(GeometryError::TooFewConcepts { needed: 2, got: k });
    }
    let mut values = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = euclidean(&set.centroids[i], &set.centroids[j]);
            if !d.is_finite() {
                return Err(GeometryError::NonFinite);
            }
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    Ok(DistanceMatrix {
        concepts: set.concepts.clone(),
        values,
    })
}

/// One agglomeration step. Leaves are `0..k`; merge `i` creates cluster `k + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Leaf indices under cluster `id`, ascending.
    pub fn members(&self, id: usize) -> Vec<usize> {
        let k = self.labels.len();
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if n < k {
                out.push(n);
            } else {
                let m = &self.merges[n - k];
                stack.push(m.a);
                stack.push(m.b);
            }
        }
        out.sort_unstable();
        out
    }

    /// Leaves in left-to-right drawing order.
    pub fn leaf_order(&self) -> Vec<usize> {
        let k = self.labels.len();
        let mut out = Vec::with_capacity(k);
        let mut stack = vec![self.root()];
        while let Some(n) = stack.pop() {
            if n < k {
                out.push(n);
            } else {
                let m = &self.merges[n - k];
                stack.push(m.b);
                stack.push(m.a);
            }
        }
        out
    }

    fn root(&self) -> usize {
        self.labels.len() + self.merges.len() - 1
    }

    fn height_of(&self, id: usize) -> f64 {
        let k = self.labels.len();
        if id < k {
            0.0
        } else {
            self.merges[id - k].height
        }
    }

    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.newick_node(self.root(), None, &mut out);
        out.push(';');
        out
    }

    fn newick_node(&self, id: usize, parent_height: Option<f64>, out: &mut String) {
        let k = self.labels.len();
        if id < k {
            out.push_str(&newick_label(&self.labels[id]));
        } else {
            let m = &self.merges[id - k];
            out.push('(');
            self.newick_node(m.a, Some(m.height), out);
            out.push(',');
            self.newick_node(m.b, Some(m.height), out);
            out.push(')');
        }
        if let Some(h) = parent_height {
            let _ = write!(out, ":{}", h - self.height_of(id));
        }
    }
}

fn newick_label(s: &str) -> String {
    if s.chars().any(|c| "()[]':;, \t".contains(c)) {
        format!("'{}'", s.replace('\'', "''"))
    } else {
        s.to_string()
    }
}

/// Ward linkage on a Euclidean distance matrix via Lance-Williams updates.
/// Heights follow the usual convention `sqrt(2 * ΔSSE)`. Among equal
/// candidate distances the pair with the smallest `(a, b)` ids wins.
pub fn ward_cluster(dist: &DistanceMatrix) -> Result<Dendrogram> {
    let k = dist.k();
    if k < 2 {
        return Err(GeometryError::TooFewConcepts { needed: 2, got: k });
    }
    if dist.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let total = 2 * k - 1;
    let mut d = vec![vec![f64::INFINITY; total]; total];
    for i in 0..k {
        for j in 0..k {
            d[i][j] = dist.values[i][j];
        }
    }
    let mut size = vec![1usize; total];
    let mut active: Vec<usize> = (0..k).collect();
    let mut merges = Vec::with_capacity(k - 1);
    for step in 0..k - 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for (x, &a) in active.iter().enumerate() {
            for &b in &active[x + 1..] {
                if d[a][b] < best.0 {
                    best = (d[a][b], a, b);
                }
            }
        }
        let (h, a, b) = best;
        let new = k + step;
        size[new] = size[a] + size[b];
        active.retain(|&c| c != a && c != b);
        for &c in &active {
            let (na, nb, nc) = (size[a] as f64, size[b] as f64, size[c] as f64);
            let v = ((na + nc) * d[a][c].powi(2) + (nb + nc) * d[b][c].powi(2) - nc * h * h) / (na + nb + nc);
            let v = v.max(0.0).sqrt();
            d[new][c] = v;
            d[c][new] = v;
        }
        active.push(new);
        merges.push(Merge {
            a,
            b,
            height: h,
            size: size[new],
        });
    }
    Ok(Dendrogram {
        labels: dist.concepts.clone(),
        merges,
    })
}

/// The two concept groups joined by the final merge. The group holding the
/// lowest leaf index comes first.
pub fn top_level_split(dendrogram: &Dendrogram) -> (Vec<String>, Vec<String>) {
    let last = dendrogram.merges.last().expect("dendrogram with k >= 2");
    let (mut a, mut b) = (dendrogram.members(last.a), dendrogram.members(last.b));
    if b[0] < a[0] {
        std::mem::swap(&mut a, &mut b);
    }
    let names = |ids: Vec<usize>| ids.into_iter().map(|i| dendrogram.labels[i].clone()).collect();
    (names(a), names(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MantelResult {
    pub r: f64,
    pub p_value: f64,
    pub permutations: usize,
    pub seed: u64,
}

fn check_same_concepts(a: &DistanceMatrix, b: &DistanceMatrix) -> Result<()> {
    if a.concepts != b.concepts {
        return Err(GeometryError::ConceptMismatch(format!("{:?} vs {:?}", a.concepts, b.concepts)));
    }
    Ok(())
}

/// Pearson r over the upper triangles and a one-sided Mantel p-value from
/// `permutations` random relabellings of `b`'s concepts.
/// Permutation `i` draws from its own ChaCha stream, so the result does not
/// depend on thread count.
pub fn matrix_correlation(a: &DistanceMatrix, b: &DistanceMatrix, permutations: usize, seed: u64) -> Result<MantelResult> {
    check_same_concepts(a, b)?;
    let k = a.k();
    if k < 3 {
        return Err(GeometryError::TooFewConcepts { needed: 3, got: k });
    }
    let ua = a.upper_triangle();
    let ub = b.upper_triangle();
    if ua.iter().chain(&ub).any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let r = stats::pearson(&ua, &ub).ok_or_else(|| GeometryError::ZeroVariance("distance matrix triangle".into()))?;
    let hits: usize = (0..permutations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let up: Vec<f64> = (0..k)
                .flat_map(|x| (x + 1..k).map(move |y| (x, y)))
                .map(|(x, y)| b.values[perm[x]][perm[y]])
                .collect();
            let rp = stats::pearson(&ua, &up).unwrap_or(0.0);
            usize::from(rp >= r - 1e-12)
        })
        .sum();
    Ok(MantelResult {
        r,
        p_value: (hits + 1) as f64 / (permutations + 1) as f64,
        permutations,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub concepts: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub n: usize,
}

/// Pearson correlation of every concept pair over pooled `(story, t)` beliefs.
pub fn behavior_correlations(trajectories: &[&BeliefTrajectory], domain: &ConceptDomain) -> Result<CorrelationMatrix> {
    let k = domain.k();
    let mut cols = vec![Vec::new(); k];
    for tr in trajectories.iter().filter(|t| t.domain == domain.name) {
        for row in &tr.values {
            for (c, v) in row.iter().enumerate() {
                cols[c].push(*v);
            }
        }
    }
    let n = cols[0].len();
    if n < 2 {
        return Err(GeometryError::TooFewPoints { needed: 2, got: n });
    }
    let mut values = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let r = stats::pearson(&cols[i], &cols[j]).ok_or_else(|| {
                GeometryError::ZeroVariance(format!("{} or {} is constant", domain.concepts[i], domain.concepts[j]))
            })?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        concepts: domain.concepts.clone(),
        values,
        n,
    })
}

/// In-sample R² of the least-squares fit `t ~ 1 + coords`.
pub fn position_encoding_check(points: &[(usize, Vec<f64>)]) -> Result<f64> {
    let n = points.len();
    if n < 3 {
        return Err(GeometryError::TooFewPoints { needed: 3, got: n });
    }
    let d = points[0].1.len();
    if let Some(p) = points.iter().find(|p| p.1.len() != d) {
        return Err(GeometryError::DimensionMismatch {
            expected: d,
            actual: p.1.len(),
        });
    }
    if n < d + 2 {
        return Err(GeometryError::DegenerateDesign(format!("{n} points for {d} coordinates")));
    }
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { points[i].1[j - 1] });
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let y: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let my = stats::mean(&y);
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sst <= 0.0 {
        return Err(GeometryError::DegenerateDesign("sentence index is constant".into()));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= smax * 1e-10 {
        return Err(GeometryError::DegenerateDesign("coordinates are collinear".into()));
    }
    let yv = nalgebra::DVector::from_vec(y.clone());
    let beta = svd.solve(&yv, 0.0).map_err(|e| GeometryError::DegenerateDesign(e.to_string()))?;
    let fitted = &x * beta;
    let sse: f64 = fitted.iter().zip(&y).map(|(f, v)| (f - v) * (f - v)).sum();
    Ok((1.0 - sse / sst).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcrustesResult {
    /// Sum of squared residuals after both sides are centred, scaled to unit
    /// Frobenius norm and optimally rotated. Lies in `[0, 1]`.
    pub disparity: f64,
    /// `target` mapped into the standardized frame of `reference`.
    pub aligned: Vec<Vec<f64>>,
    /// Scale, orthogonal map and translation taking raw `target` rows onto raw
    /// `reference` rows: `reference ≈ scale * target * rotation + translation`.
    pub scale: f64,
    pub rotation: Vec<Vec<f64>>,
    pub translation: Vec<f64>,
}

/// Similarity Procrustes (rotation with reflection, uniform scale,
/// translation). The narrower side is zero-padded to the wider dimension.
pub fn procrustes(reference: &[Vec<f64>], target: &[Vec<f64>]) -> Result<ProcrustesResult> {
    let n = reference.len();
    if n != target.len() {
        return Err(GeometryError::DimensionMismatch {
            expected: n,
            actual: target.len(),
        });
    }
    if n < 3 {
        return Err(GeometryError::TooFewPoints { needed: 3, got: n });
    }
    let dim = reference.iter().chain(target).map(Vec::len).max().unwrap_or(0);
    let pad = |rows: &[Vec<f64>]| DMatrix::from_fn(n, dim, |i, j| rows[i].get(j).copied().unwrap_or(0.0));
    let a = pad(reference);
    let b = pad(target);
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let center = |m: &DMatrix<f64>| {
        let mu: Vec<f64> = (0..dim).map(|j| m.column(j).mean()).collect();
        let mut c = m.clone();
        for j in 0..dim {
            c.column_mut(j).add_scalar_mut(-mu[j]);
        }
        (c, mu)
    };
    let (ac, mu_a) = center(&a);
    let (bc, mu_b) = center(&b);
    let (na, nb) = (ac.norm(), bc.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(GeometryError::ZeroVariance("configuration collapses to a point".into()));
    }
    let an = &ac / na;
    let bn = &bc / nb;
    let svd = (bn.transpose() * &an).svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let r = u * vt;
    let s: f64 = svd.singular_values.sum();
    let aligned_m = &bn * &r * s;
    let disparity = (&an - &aligned_m).norm_squared();
    let scale = s * na / nb;
    let translation: Vec<f64> = (0..dim)
        .map(|j| mu_a[j] - scale * (0..dim).map(|i| mu_b[i] * r[(i, j)]).sum::<f64>())
        .collect();
    Ok(ProcrustesResult {
        disparity: disparity.clamp(0.0, 1.0),
        aligned: stats::rows_of(&aligned_m),
        scale,
        rotation: stats::rows_of(&r),
        translation,
    })
}

/// Externally supplied coordinates per concept, such as valence and arousal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpace {
    pub name: String,
    #[serde(default)]
    pub axes: Vec<String>,
    pub coords: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub reference: String,
    pub concepts: Vec<String>,
    pub procrustes_disparity: f64,
    pub distance_correlation: MantelResult,
}

/// Aligns centroids to a reference space and correlates the two distance
/// matrices over the shared concepts (in centroid order).
pub fn compare_to_reference(
    set: &CentroidSet,
    reference: &ReferenceSpace,
    permutations: usize,
    seed: u64,
) -> Result<ReferenceComparison> {
    let shared: Vec<usize> = (0..set.concepts.len())
        .filter(|&i| reference.coords.contains_key(&set.concepts[i]))
        .collect();
    if shared.len() < 3 {
        return Err(GeometryError::TooFewConcepts {
            needed: 3,
            got: shared.len(),
        });
    }
    let concepts: Vec<String> = shared.iter().map(|&i| set.concepts[i].clone()).collect();
    let ours: Vec<Vec<f64>> = shared.iter().map(|&i| set.centroids[i].clone()).collect();
    let theirs: Vec<Vec<f64>> = concepts.iter().map(|c| reference.coords[c].clone()).collect();
    let rdim = theirs[0].len();
    if theirs.iter().any(|v| v.len() != rdim) {
        return Err(GeometryError::DimensionMismatch {
            expected: rdim,
            actual: theirs.iter().map(Vec::len).find(|&l| l != rdim).unwrap_or(rdim),
        });
    }
    if rdim > ours[0].len() {
        return Err(GeometryError::DimensionMismatch {
            expected: ours[0].len(),
            actual: rdim,
        });
    }
    let pr = procrustes(&theirs, &ours)?;
    let dm = |pts: Vec<Vec<f64>>| {
        distance_matrix(&CentroidSet {
            concepts: concepts.clone(),
            counts: vec![1; pts.len()],
            centroids: pts,
        })
    };
    let a = dm(ours)?;
    let b = dm(theirs)?;
    Ok(ReferenceComparison {
        reference: reference.name.clone(),
        concepts,
        procrustes_disparity: pr.disparity,
        distance_correlation: matrix_correlation(&a, &b, permutations, seed)?,
    })
}
