//! Belief elicitation: a model rates a concept on an integer scale 0..=10 and
//! the rating distribution collapses to its expectation on `[0, 1]`,
//! `y = (1/10) * sum_i i * p(i)`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BeliefTrajectory, ConceptDomain, RawRatings};

/// Number of integer ratings, 0 through 10.
pub const RATING_LEVELS: usize = 11;

#[derive(Debug, Error, PartialEq)]
pub enum ElicitationError {
    #[error("expected {RATING_LEVELS} rating probabilities, got {0}")]
    WrongLength(usize),
    #[error("probability for rating {index} is negative or not finite: {value}")]
    NegativeProbability { index: usize, value: f64 },
    #[error("rating distribution has no mass")]
    AllZero,
    #[error("rating distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("sentence index must be >= 1")]
    ZeroSentence,
    #[error("missing rating for t={t}, concept {concept}")]
    MissingCell { t: usize, concept: String },
    #[error("duplicate rating for t={t}, concept {concept}")]
    DuplicateCell { t: usize, concept: String },
    #[error("no ratings supplied for story {0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, ElicitationError>;

fn check_entries(probs: &[f64]) -> Result<f64> {
    if probs.len() != RATING_LEVELS {
        return Err(ElicitationError::WrongLength(probs.len()));
    }
    for (index, &value) in probs.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(ElicitationError::NegativeProbability { index, value });
        }
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(ElicitationError::AllZero);
    }
    Ok(total)
}

/// Expected rating of an 11-entry probability vector, scaled to `[0, 1]`.
///
/// The entries are used as given (no renormalization); use
/// [`RatingDistribution::renormalize`] first for raw token mass.
pub fn aggregate(probs: &[f64]) -> Result<f64> {
    check_entries(probs)?;
    let weighted: f64 = probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
    Ok(weighted / 10.0)
}

/// Probability of each integer rating given the story prefix and a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingDistribution([f64; RATING_LEVELS]);

impl RatingDistribution {
    pub fn new(probs: [f64; RATING_LEVELS]) -> Result<Self> {
        let total = check_entries(&probs)?;
        if (total - 1.0).abs() > crate::data::SIMPLEX_TOL {
            return Err(ElicitationError::NotNormalized(total));
        }
        Ok(RatingDistribution(probs))
    }

    /// Rescales non-negative token mass onto the simplex.
    pub fn renormalize(raw_mass: &[f64]) -> Result<Self> {
        let total = check_entries(raw_mass)?;
        let mut probs = [0.0; RATING_LEVELS];
        for (p, m) in probs.iter_mut().zip(raw_mass) {
            *p = m / total;
        }
        Ok(RatingDistribution(probs))
    }

    pub fn point_mass(rating: usize) -> Self {
        assert!(rating < RATING_LEVELS, "rating {rating} out of range");
        let mut probs = [0.0; RATING_LEVELS];
        probs[rating] = 1.0;
        RatingDistribution(probs)
    }

    pub fn uniform() -> Self {
        RatingDistribution([1.0 / RATING_LEVELS as f64; RATING_LEVELS])
    }

    pub fn probs(&self) -> &[f64; RATING_LEVELS] {
        &self.0
    }

    pub fn expected_rating(&self) -> f64 {
        expected_rating(self)
    }
}

pub fn expected_rating(dist: &RatingDistribution) -> f64 {
    let weighted: f64 = dist.0.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
    weighted / 10.0
}

/// Which query prompt family a concept is rated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    Emotion,
    Genre,
    Arbitrary,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::Emotion => "emotion",
            TemplateId::Genre => "genre",
            TemplateId::Arbitrary => "arbitrary",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub domain: String,
    pub concept: String,
    pub template: TemplateId,
}

/// One elicited rating: sentence `t` (1-based) and concept.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingCell {
    pub t: usize,
    pub concept: String,
    pub dist: RatingDistribution,
}

/// Builds `y_{1:T}` for one story from a rating for every `(t, concept)` cell.
///
/// `T` is the largest sentence index present; every cell in `1..=T x concepts`
/// must be supplied exactly once.
pub fn assemble_trajectory(
    story_id: &str,
    domain: &ConceptDomain,
    cells: impl IntoIterator<Item = RatingCell>,
) -> Result<BeliefTrajectory> {
    let k = domain.k();
    let mut grid: BTreeMap<usize, Vec<Option<RatingDistribution>>> = BTreeMap::new();
    for cell in cells {
        if cell.t == 0 {
            return Err(ElicitationError::ZeroSentence);
        }
        let c = domain
            .index_of(&cell.concept)
            .ok_or_else(|| ElicitationError::UnknownConcept(cell.concept.clone()))?;
        let row = grid.entry(cell.t).or_insert_with(|| vec![None; k]);
        if row[c].replace(cell.dist).is_some() {
            return Err(ElicitationError::DuplicateCell {
                t: cell.t,
                concept: cell.concept,
            });
        }
    }
    let t_max = *grid
        .keys()
        .next_back()
        .ok_or_else(|| ElicitationError::Empty(story_id.to_string()))?;

    let mut values = Vec::with_capacity(t_max);
    let mut raw = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let row = grid.get(&t);
        let mut vrow = Vec::with_capacity(k);
        let mut rrow: Vec<RawRatings> = Vec::with_capacity(k);
        for (c, concept) in domain.concepts.iter().enumerate() {
            let dist = row.and_then(|r| r[c]).ok_or_else(|| ElicitationError::MissingCell {
                t,
                concept: concept.clone(),
            })?;
            vrow.push(dist.expected_rating());
            rrow.push(*dist.probs());
        }
        values.push(vrow);
        raw.push(rrow);
    }
    Ok(BeliefTrajectory {
        story_id: story_id.to_string(),
        domain: domain.name.clone(),
        values,
        raw: Some(raw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn point_masses_and_uniform() {
        assert_eq!(RatingDistribution::point_mass(10).expected_rating(), 1.0);
        assert_eq!(RatingDistribution::point_mass(0).expected_rating(), 0.0);
        for i in 0..RATING_LEVELS {
            assert_eq!(RatingDistribution::point_mass(i).expected_rating(), i as f64 / 10.0);
        }
        assert!((RatingDistribution::uniform().expected_rating() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_point_distribution() {
        let mut p = [0.0; RATING_LEVELS];
        p[4] = 0.5;
        p[8] = 0.5;
        let d = RatingDistribution::new(p).unwrap();
        assert!((d.expected_rating() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let mut p = [0.1; RATING_LEVELS];
        p[3] = -0.1;
        assert!(matches!(aggregate(&p), Err(ElicitationError::NegativeProbability { index: 3, .. })));
        assert_eq!(aggregate(&[0.0; RATING_LEVELS]), Err(ElicitationError::AllZero));
        assert_eq!(
            RatingDistribution::renormalize(&[0.0; RATING_LEVELS]),
            Err(ElicitationError::AllZero)
        );
        assert_eq!(aggregate(&[1.0; 3]), Err(ElicitationError::WrongLength(3)));
        assert!(matches!(
            RatingDistribution::new([0.5; RATING_LEVELS]),
            Err(ElicitationError::NotNormalized(_))
        ));
    }

    #[test]
    fn renormalize_examples() {
        let mut raw = [0.0; RATING_LEVELS];
        raw[0] = 2.0;
        assert_eq!(RatingDistribution::renormalize(&raw).unwrap(), RatingDistribution::point_mass(0));

        let u = RatingDistribution::renormalize(&[1.0; RATING_LEVELS]).unwrap();
        assert!(u.probs().iter().all(|p| (p - 1.0 / 11.0).abs() < 1e-15));

        let mut raw = [0.0; RATING_LEVELS];
        raw[0] = 0.2;
        raw[1] = 0.3;
        let d = RatingDistribution::renormalize(&raw).unwrap();
        // 0.2 / 0.5 and 0.3 / 0.5
        assert!((d.probs()[0] - 0.4).abs() < 1e-15);
        assert!((d.probs()[1] - 0.6).abs() < 1e-15);
        assert!(d.probs()[2..].iter().all(|&p| p == 0.0));
    }

    fn emotions() -> ConceptDomain {
        ConceptDomain::new("emotions", ["happiness", "sadness"]).unwrap()
    }

    #[test]
    fn assemble_single_step() {
        let cells = ["happiness", "sadness"].map(|c| RatingCell {
            t: 1,
            concept: c.into(),
            dist: RatingDistribution::uniform(),
        });
        let tr = assemble_trajectory("s", &emotions(), cells).unwrap();
        assert_eq!(tr.len(), 1);
        assert!(tr.values[0].iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(tr.validate(2).is_ok());
    }

    #[test]
    fn assemble_reports_missing_cell() {
        let mut cells = Vec::new();
        for t in 1..=3 {
            for c in ["happiness", "sadness"] {
                if !(t == 2 && c == "sadness") {
                    cells.push(RatingCell {
                        t,
                        concept: c.into(),
                        dist: RatingDistribution::point_mass(t),
                    });
                }
            }
        }
        let err = assemble_trajectory("s", &emotions(), cells).unwrap_err();
        assert_eq!(
            err,
            ElicitationError::MissingCell {
                t: 2,
                concept: "sadness".into()
            }
        );
        assert!(err.to_string().contains("t=2"));
    }

    #[test]
    fn assemble_rejects_duplicates() {
        let cell = RatingCell {
            t: 1,
            concept: "happiness".into(),
            dist: RatingDistribution::uniform(),
        };
        let err = assemble_trajectory("s", &emotions(), [cell.clone(), cell]).unwrap_err();
        assert!(matches!(err, ElicitationError::DuplicateCell { t: 1, .. }));
    }

    fn simplex() -> impl Strategy<Value = [f64; RATING_LEVELS]> {
        prop::array::uniform11(0.0f64..1.0).prop_filter_map("mass", |raw| {
            RatingDistribution::renormalize(&raw).ok().map(|d| *d.probs())
        })
    }

    proptest! {
        #[test]
        fn bounds_hold(p in simplex()) {
            let y = aggregate(&p).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&y));
        }

        #[test]
        fn linear_in_mixtures(p in simplex(), q in simplex(), lambda in 0.0f64..=1.0) {
            let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            let lhs = aggregate(&mix).unwrap();
            let rhs = lambda * aggregate(&p).unwrap() + (1.0 - lambda) * aggregate(&q).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn shifting_mass_up_never_decreases(p in simplex(), i in 0usize..10, gap in 1usize..10, frac in 0.0f64..=1.0) {
            let j = (i + gap).min(RATING_LEVELS - 1);
            let mut shifted = p;
            let moved = shifted[i] * frac;
            shifted[i] -= moved;
            shifted[j] += moved;
            prop_assert!(aggregate(&shifted).unwrap() >= aggregate(&p).unwrap() - 1e-15);
        }
    }
}
