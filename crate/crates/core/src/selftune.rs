//! Greedy hyper-parameter self-tuning.
//!
//! No labeled validation data exists along the stream, so each tracker picks
//! its update by the only signal it has: after a tentative update, does the
//! tracker's own detector rank the object's current location first among all
//! candidates of the frame? Grid points are visited from least to most
//! aggressive (fewest steps, strongest pull toward the mean, smallest learning
//! rate) and the first rank-1 update wins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, CandidateWindow};
use crate::model::{LabeledSample, ParamVector};
use crate::mtl::{asgd_step, Hyperparams, InstanceModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneGrid {
    pub steps_grid: Vec<u32>,
    pub lambda_grid: Vec<f64>,
    pub eta_grid: Vec<f64>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        Self {
            steps_grid: vec![1, 10, 100],
            lambda_grid: vec![1.0, 0.9, 0.5, 0.1],
            eta_grid: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
        }
    }
}

impl TuneGrid {
    pub fn validate(&self) -> Result<()> {
        if self.steps_grid.is_empty() || self.lambda_grid.is_empty() || self.eta_grid.is_empty() {
            return Err(Error::Config("tune grid axes must be non-empty".into()));
        }
        for p in self.points() {
            p.validate()?;
        }
        Ok(())
    }

    /// Same grid with the regularization axis collapsed to `lambda = 0`.
    pub fn without_regularization(&self) -> Self {
        Self { lambda_grid: vec![0.0], ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.steps_grid.len() * self.lambda_grid.len() * self.eta_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in visiting order: steps outermost, then lambda, then eta.
    pub fn points(&self) -> impl Iterator<Item = Hyperparams> + '_ {
        self.steps_grid.iter().flat_map(move |&n_steps| {
            self.lambda_grid.iter().flat_map(move |&lambda| {
                self.eta_grid.iter().map(move |&eta| Hyperparams { eta, lambda, n_steps })
            })
        })
    }
}

/// 1-based position of the matching candidate in the detector's ranking.
/// `Unmatched` orders after every position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    At(usize),
    Unmatched,
}

impl std::fmt::Display for Rank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rank::At(r) => write!(f, "{r}"),
            Rank::Unmatched => f.write_str("unmatched"),
        }
    }
}

/// Ranks `candidates` by descending detector score (ties by index) and
/// returns the position of the candidate overlapping `predicted` the most,
/// provided the overlap reaches `match_threshold`.
pub fn rank_of_prediction(
    detector: &ParamVector,
    candidates: &[CandidateWindow],
    predicted: &BoundingBox,
    match_threshold: f64,
) -> Result<Rank> {
    if candidates.is_empty() {
        return Err(Error::Contract("rank_of_prediction over no candidates".into()));
    }
    let mut target: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let o = iou(&c.bbox, predicted);
        if o >= match_threshold && target.is_none_or(|(_, best)| o > best) {
            target = Some((i, o));
        }
    }
    let Some((t, _)) = target else {
        return Ok(Rank::Unmatched);
    };

    let scores = candidates
        .iter()
        .map(|c| {
            detector.check_features(&c.features)?;
            Ok(detector.margin(c.features.as_slice()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let st = scores[t];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < t))
        .count();
    Ok(Rank::At(ahead + 1))
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub chosen: Hyperparams,
    pub updated: InstanceModel,
    pub achieved_rank: Rank,
    /// Position of `chosen` in grid visiting order.
    pub grid_index: usize,
    /// Tentative updates evaluated before returning.
    pub evaluations: usize,
}

/// Everything a tuning call needs to know about the current frame.
#[derive(Debug, Clone, Copy)]
pub struct TuneFrame<'a> {
    pub batch: &'a [LabeledSample],
    /// Frame-start category mean.
    pub mean: &'a ParamVector,
    pub candidates: &'a [CandidateWindow],
    /// Current location estimate of the tracked object.
    pub predicted: &'a BoundingBox,
    pub n_active: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTuner {
    pub grid: TuneGrid,
    pub match_threshold: f64,
}

impl SelfTuner {
    pub fn new(grid: TuneGrid, match_threshold: f64) -> Self {
        Self { grid, match_threshold }
    }

    fn tentative(&self, m: &InstanceModel, frame: &TuneFrame<'_>, hp: &Hyperparams) -> Result<(InstanceModel, Rank)> {
        let t = asgd_step(m, frame.batch, frame.mean, hp, frame.n_active)?;
        let rank = rank_of_prediction(t.snapshot()?, frame.candidates, frame.predicted, self.match_threshold)?;
        Ok((t, rank))
    }

    /// Tries grid points in order, each branching from `m` itself, and
    /// returns the first that ranks the prediction first. Failing that, the
    /// best-ranked tentative wins, earliest grid point on ties.
    pub fn tune_and_update(&self, m: &InstanceModel, frame: &TuneFrame<'_>) -> Result<TuneOutcome> {
        if frame.batch.is_empty() {
            return Err(Error::Contract("tune_and_update on an empty batch".into()));
        }
        let mut best: Option<TuneOutcome> = None;
        for (idx, hp) in self.grid.points().enumerate() {
            let (updated, rank) = self.tentative(m, frame, &hp)?;
            if rank == Rank::At(1) {
                return Ok(TuneOutcome { chosen: hp, updated, achieved_rank: rank, grid_index: idx, evaluations: idx + 1 });
            }
            if best.as_ref().is_none_or(|b| rank < b.achieved_rank) {
                best = Some(TuneOutcome { chosen: hp, updated, achieved_rank: rank, grid_index: idx, evaluations: 0 });
            }
        }
        let mut out = best.ok_or_else(|| Error::Config("empty tune grid".into()))?;
        out.evaluations = self.grid.len();
        Ok(out)
    }

    /// Rank achieved by every grid point, without early exit.
    pub fn evaluate_grid(&self, m: &InstanceModel, frame: &TuneFrame<'_>) -> Result<Vec<(Hyperparams, Rank)>> {
        self.grid
            .points()
            .map(|hp| self.tentative(m, frame, &hp).map(|(_, r)| (hp, r)))
            .collect()
    }
}
