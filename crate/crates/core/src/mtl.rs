//! Mean-regularized joint training of the instance detectors.
//!
//! Every instance model is pulled toward the category mean `w̄` while it fits
//! its own frame batch. The instance keeps its plain SGD iterate and a Polyak
//! average of all iterates since spawn; the average is the deployed detector
//! and is what feeds the category mean at each frame barrier.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::geometry::CandidateWindow;
use crate::model::{accumulate_gradient, LabeledSample, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub eta: f64,
    pub lambda: f64,
    pub n_steps: u32,
}

impl Hyperparams {
    pub fn new(eta: f64, lambda: f64, n_steps: u32) -> Result<Self> {
        let hp = Self { eta, lambda, n_steps };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.eta)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One tracker's detector: the raw SGD iterate plus its running average.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceModel {
    pub(crate) instance_id: u64,
    pub(crate) current: ParamVector,
    pub(crate) polyak: ParamVector,
    pub(crate) steps_total: u64,
    pub(crate) samples_seen: u64,
}

impl InstanceModel {
    /// A model sitting at `init` with no averaged iterates yet.
    pub fn new(instance_id: u64, init: ParamVector) -> Self {
        Self {
            instance_id,
            polyak: init.clone(),
            current: init,
            steps_total: 0,
            samples_seen: 0,
        }
    }

    /// Rebuilds a model from persisted parts.
    pub fn from_parts(
        instance_id: u64,
        current: ParamVector,
        polyak: ParamVector,
        steps_total: u64,
        samples_seen: u64,
    ) -> Result<Self> {
        if current.len() != polyak.len() {
            return Err(dim_mismatch("instance model", current.len(), polyak.len()));
        }
        Ok(Self { instance_id, current, polyak, steps_total, samples_seen })
    }

    pub fn instance_id(&self) -> u64 {
        self.instance_id
    }

    pub fn current(&self) -> &ParamVector {
        &self.current
    }

    pub fn polyak(&self) -> &ParamVector {
        &self.polyak
    }

    pub fn steps_total(&self) -> u64 {
        self.steps_total
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    /// The deployed detector: the Polyak average of every iterate so far.
    pub fn snapshot(&self) -> Result<&ParamVector> {
        if self.steps_total == 0 {
            return Err(Error::Contract(format!(
                "snapshot of instance {} before any update",
                self.instance_id
            )));
        }
        Ok(&self.polyak)
    }

    /// Folds `current` into the running average.
    fn fold_iterate(&mut self) {
        self.steps_total += 1;
        let k = self.steps_total as f64;
        for (a, c) in self.polyak.as_mut_slice().iter_mut().zip(self.current.as_slice()) {
            *a += (c - *a) / k;
        }
    }
}

/// The category detector `w̄` and the number of instance snapshots averaged into it.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryModel {
    pub(crate) mean: ParamVector,
    pub(crate) mass: u64,
}

impl CategoryModel {
    /// `w̄ = 0` with no mass.
    pub fn new(feature_dim: usize) -> Self {
        Self { mean: ParamVector::zeros(feature_dim), mass: 0 }
    }

    pub fn from_parts(mean: ParamVector, mass: u64) -> Self {
        Self { mean, mass }
    }

    pub fn mean(&self) -> &ParamVector {
        &self.mean
    }

    pub fn mass(&self) -> u64 {
        self.mass
    }
}

/// Mean-regularization penalty `(1 / 2N) * sum_i |w_i - w̄|^2`.
pub fn regularizer(models: &[ParamVector], mean: &ParamVector) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::Contract("regularizer over an empty ensemble".into()));
    }
    let mut total = 0.0;
    for m in models {
        if m.len() != mean.len() {
            return Err(dim_mismatch("regularizer", mean.len(), m.len()));
        }
        total += m.distance_sq(mean);
    }
    Ok(total / (2.0 * models.len() as f64))
}

fn check_batch(len: usize, batch: &[LabeledSample]) -> Result<()> {
    for s in batch {
        if s.features.dim() + 1 != len {
            return Err(dim_mismatch("training sample", len - 1, s.features.dim()));
        }
    }
    Ok(())
}

/// Runs `hp.n_steps` full-batch steps of
/// `w <- w - eta * (mean_k grad l(x_k, y_k, w) + (lambda / n_active) * (w - w̄))`,
/// folding every new iterate into the Polyak average.
pub fn asgd_step(
    m: &InstanceModel,
    batch: &[LabeledSample],
    mean: &ParamVector,
    hp: &Hyperparams,
    n_active: usize,
) -> Result<InstanceModel> {
    if batch.is_empty() {
        return Err(Error::Contract("asgd_step on an empty batch".into()));
    }
    if n_active == 0 {
        return Err(Error::Contract("asgd_step with no active instances".into()));
    }
    hp.validate()?;
    if mean.len() != m.current.len() {
        return Err(dim_mismatch("category mean", m.current.len() - 1, mean.feature_dim()));
    }
    check_batch(m.current.len(), batch)?;

    let mut out = m.clone();
    let n = batch.len() as f64;
    let pull = hp.lambda / n_active as f64;
    let mut grad = vec![0.0; out.current.len()];
    for _ in 0..hp.n_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for s in batch {
            accumulate_gradient(&out.current, s, 1.0, &mut grad);
        }
        grad.iter_mut().for_each(|g| *g /= n);
        if hp.lambda != 0.0 {
            for ((g, w), c) in grad.iter_mut().zip(out.current.as_slice()).zip(mean.as_slice()) {
                *g += pull * (w - c);
            }
        }
        for (w, g) in out.current.as_mut_slice().iter_mut().zip(&grad) {
            *w -= hp.eta * g;
        }
        out.fold_iterate();
    }
    out.samples_seen += batch.len() as u64;
    Ok(out)
}

/// Frame barrier: folds this frame's instance snapshots into `w̄`,
/// `w̄ <- (mass * w̄ + sum snapshots) / (mass + N)`.
pub fn category_update(c: &CategoryModel, snapshots: &[ParamVector]) -> Result<CategoryModel> {
    if snapshots.is_empty() {
        return Ok(c.clone());
    }
    let mut sum: Vec<f64> = c.mean.as_slice().iter().map(|v| v * c.mass as f64).collect();
    for s in snapshots {
        if s.len() != sum.len() {
            return Err(dim_mismatch("instance snapshot", c.mean.feature_dim(), s.feature_dim()));
        }
        for (acc, v) in sum.iter_mut().zip(s.as_slice()) {
            *acc += v;
        }
    }
    let mass = c.mass + snapshots.len() as u64;
    let total = mass as f64;
    sum.iter_mut().for_each(|v| *v /= total);
    Ok(CategoryModel { mean: ParamVector::from_raw(sum)?, mass })
}

/// Initial detector of a new tracker: warm-started at the current category
/// mean and fit to its seed against random negatives.
pub fn spawn_instance(
    instance_id: u64,
    c: &CategoryModel,
    seed: &CandidateWindow,
    random_negatives: &[&CandidateWindow],
    hp: &Hyperparams,
) -> Result<InstanceModel> {
    if random_negatives.is_empty() {
        return Err(Error::Contract("spawn_instance needs at least one negative".into()));
    }
    let mut batch = Vec::with_capacity(1 + random_negatives.len());
    batch.push(LabeledSample::positive(seed.features.clone()));
    batch.extend(random_negatives.iter().map(|w| LabeledSample::negative(w.features.clone())));
    let fresh = InstanceModel::new(instance_id, c.mean.clone());
    asgd_step(&fresh, &batch, &c.mean, hp, 1)
}
