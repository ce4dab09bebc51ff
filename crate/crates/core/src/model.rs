//! Linear logistic classifier primitives.
//!
//! A detector is a single [`ParamVector`] of length `d + 1`: `d` weights
//! followed by the bias, which is paired with an implicit constant-1 feature.
//! Keeping the bias inside the vector means the multi-task penalty and the
//! running averages treat it exactly like any other coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};

/// Tolerance under which an ingested feature vector is taken as already unit-norm.
const UNIT_NORM_TOL: f64 = 1e-12;

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Dense feature vector `phi(x)` of a candidate window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Wraps raw values without normalizing. Values must be finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "feature coordinate {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    /// Ingest-time normalization: rescales to unit L2 norm. Vectors that are
    /// already unit-norm to within `1e-12` are kept bit-for-bit, so
    /// normalized streams survive a write/read cycle unchanged.
    pub fn ingest(values: Vec<f64>) -> Result<Self> {
        let mut fv = Self::new(values)?;
        let norm = fv.norm();
        if norm == 0.0 {
            return Err(Error::Config("zero feature vector cannot be normalized".into()));
        }
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            fv.0.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(fv)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Weights plus trailing bias; length is feature dimension + 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// The all-zero detector for features of dimension `feature_dim`.
    pub fn zeros(feature_dim: usize) -> Self {
        Self(vec![0.0; feature_dim + 1])
    }

    pub fn from_weights(weights: &[f64], bias: f64) -> Self {
        let mut v = Vec::with_capacity(weights.len() + 1);
        v.extend_from_slice(weights);
        v.push(bias);
        Self(v)
    }

    /// Builds from the full `(d + 1)`-coordinate layout. Rejects non-finite
    /// entries and the empty vector.
    pub fn from_raw(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Config("parameter vector needs at least the bias".into()));
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("parameter coordinate {i} is not finite")));
        }
        Ok(Self(coords))
    }

    /// Dimension of the features this vector scores.
    pub fn feature_dim(&self) -> usize {
        self.0.len() - 1
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }

    pub fn bias(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Squared Euclidean distance to `other`.
    pub fn distance_sq(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// `w . phi + b` with no dimension check.
    #[inline]
    pub(crate) fn margin(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len() + 1, self.0.len());
        let mut acc = 0.0;
        for (w, x) in self.0.iter().zip(f) {
            acc += w * x;
        }
        acc + self.0[self.0.len() - 1]
    }

    pub(crate) fn check_features(&self, f: &FeatureVector) -> Result<()> {
        if f.dim() + 1 != self.0.len() {
            return Err(dim_mismatch("score", self.feature_dim(), f.dim()));
        }
        Ok(())
    }
}

/// Binary training label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// `+1.0` or `-1.0`.
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: FeatureVector,
    pub label: Label,
}

impl LabeledSample {
    pub fn positive(features: FeatureVector) -> Self {
        Self { features, label: Label::Positive }
    }

    pub fn negative(features: FeatureVector) -> Self {
        Self { features, label: Label::Negative }
    }
}

/// Pre-sigmoid margin `w . phi(x) + b`.
pub fn score(p: &ParamVector, f: &FeatureVector) -> Result<f64> {
    p.check_features(f)?;
    Ok(p.margin(f.as_slice()))
}

/// Probability that the window contains the category.
pub fn probability(p: &ParamVector, f: &FeatureVector) -> Result<f64> {
    score(p, f).map(sigmoid)
}

/// Logistic loss `ln(1 + exp(-y * margin))`.
pub fn loss(p: &ParamVector, s: &LabeledSample) -> Result<f64> {
    let m = score(p, &s.features)?;
    Ok(log1p_exp(-s.label.sign() * m))
}

/// Gradient of [`loss`] with respect to all `d + 1` coordinates.
pub fn loss_gradient(p: &ParamVector, s: &LabeledSample) -> Result<Vec<f64>> {
    p.check_features(&s.features)?;
    let mut g = vec![0.0; p.len()];
    accumulate_gradient(p, s, 1.0, &mut g);
    Ok(g)
}

/// Adds `scale * grad loss(p, s)` into `out`. Dimensions are the caller's
/// responsibility.
#[inline]
pub(crate) fn accumulate_gradient(p: &ParamVector, s: &LabeledSample, scale: f64, out: &mut [f64]) {
    let y = s.label.sign();
    let coef = -y * sigmoid(-y * p.margin(s.features.as_slice())) * scale;
    let (w_out, b_out) = out.split_at_mut(out.len() - 1);
    for (o, x) in w_out.iter_mut().zip(s.features.as_slice()) {
        *o += coef * x;
    }
    b_out[0] += coef;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn score_examples() {
        let f = fv(&[0.3, -0.7, 0.1]);
        assert_eq!(score(&ParamVector::zeros(3), &f).unwrap(), 0.0);

        let p = ParamVector::from_weights(&[1.0, 0.0, 0.0], 0.0);
        assert_eq!(score(&p, &fv(&[1.0, 0.0, 0.0])).unwrap(), 1.0);

        let r = 10f64.sqrt();
        let p = ParamVector::from_weights(&[2.0, -1.0], 0.5);
        let s = score(&p, &fv(&[1.0 / r, 3.0 / r])).unwrap();
        assert!((s - (0.5 - 1.0 / r)).abs() < 1e-12);
        assert!((s - 0.18377).abs() < 1e-5);
    }

    #[test]
    fn score_rejects_dimension_mismatch() {
        let err = score(&ParamVector::zeros(3), &fv(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        let tiny = sigmoid(-50.0);
        assert!(tiny > 0.0 && tiny < 1e-20);
        assert!(sigmoid(-1e3).is_finite() && sigmoid(1e3) == 1.0);
    }

    #[test]
    fn loss_examples() {
        let f = fv(&[1.0]);
        let zero = ParamVector::zeros(1);
        let l = loss(&zero, &LabeledSample::positive(f.clone())).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        let big = ParamVector::from_weights(&[0.0], 800.0);
        assert!(loss(&big, &LabeledSample::positive(f.clone())).unwrap() < 1e-300);

        let one = ParamVector::from_weights(&[0.0], 1.0);
        let l = loss(&one, &LabeledSample::negative(f)).unwrap();
        assert!((l - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((l - 1.313262).abs() < 1e-6);
    }

    #[test]
    fn gradient_examples() {
        let s = LabeledSample::positive(fv(&[1.0, 0.0]));
        let g = loss_gradient(&ParamVector::zeros(2), &s).unwrap();
        assert_eq!(g, vec![-0.5, 0.0, -0.5]);

        let sat = ParamVector::from_weights(&[0.0, 0.0], 50.0);
        let g = loss_gradient(&sat, &s).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn large_margins_stay_finite() {
        let f = fv(&[1.0]);
        for m in [-1e3, -700.0, -1.0, 0.0, 1.0, 700.0, 1e3] {
            let p = ParamVector::from_weights(&[0.0], m);
            for s in [LabeledSample::positive(f.clone()), LabeledSample::negative(f.clone())] {
                assert!(loss(&p, &s).unwrap().is_finite());
                assert!(loss_gradient(&p, &s).unwrap().iter().all(|v| v.is_finite()));
            }
            assert!(probability(&p, &f).unwrap().is_finite());
        }
    }

    #[test]
    fn ingest_normalizes_once() {
        let f = FeatureVector::ingest(vec![3.0, 4.0]).unwrap();
        assert_eq!(f.as_slice(), &[0.6, 0.8]);
        let again = FeatureVector::ingest(f.as_slice().to_vec()).unwrap();
        assert_eq!(again, f);
        assert!(FeatureVector::ingest(vec![0.0, 0.0]).is_err());
        assert!(FeatureVector::ingest(vec![f64::NAN]).is_err());
    }
}
