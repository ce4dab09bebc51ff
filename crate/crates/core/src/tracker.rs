//! Per-instance tracking-by-detection.
//!
//! Each tracker predicts where its object went with a constant-velocity model
//! on box centers, picks the best-overlapping detection of its own detector,
//! and turns the rest of the detection pool into hard negatives. Objects are
//! assumed to move smoothly and to be unique, so a detection far from the
//! prediction is never the object, and regions belonging to other tracked
//! objects are never used as negatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, CandidateWindow};
use crate::model::{LabeledSample, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Minimum IoU between prediction and detection for a match.
    pub match_threshold: f64,
    /// Negatives overlapping the positive or another tracked object above this are dropped.
    pub exclusion_threshold: f64,
    /// Number of top-scoring candidates forming each tracker's detection pool.
    pub pool_size: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { match_threshold: 0.5, exclusion_threshold: 0.3, pool_size: 10 }
    }
}

/// One detector output on the current frame.
#[derive(Debug, Clone, Copy)]
pub struct Detection<'a> {
    pub window: &'a CandidateWindow,
    pub score: f64,
}

/// Scores every candidate and keeps the `k` best (descending score, ties by
/// candidate order).
pub fn detection_pool<'a>(
    detector: &ParamVector,
    candidates: &'a [CandidateWindow],
    k: usize,
) -> Result<Vec<Detection<'a>>> {
    let mut scored = candidates
        .iter()
        .map(|c| {
            detector.check_features(&c.features)?;
            Ok(Detection { window: c, score: detector.margin(c.features.as_slice()) })
        })
        .collect::<Result<Vec<_>>>()?;
    // stable sort keeps earlier candidates first on equal scores
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    scored.truncate(k);
    Ok(scored)
}

/// Training data harvested by one tracker on one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameLabeling<'a> {
    pub positive: Option<&'a CandidateWindow>,
    pub negatives: Vec<&'a CandidateWindow>,
}

impl FrameLabeling<'_> {
    pub fn is_empty(&self) -> bool {
        self.positive.is_none() && self.negatives.is_empty()
    }

    /// Positive first, then negatives in pool order.
    pub fn samples(&self) -> Vec<LabeledSample> {
        let mut out = Vec::with_capacity(1 + self.negatives.len());
        if let Some(p) = self.positive {
            out.push(LabeledSample::positive(p.features.clone()));
        }
        out.extend(self.negatives.iter().map(|n| LabeledSample::negative(n.features.clone())));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub instance_id: u64,
    pub last_box: BoundingBox,
    /// Center displacement per frame, in pixels.
    pub velocity: (f64, f64),
    pub alive: bool,
    /// Frames advanced since spawn.
    pub age: u32,
}

impl TrackerState {
    pub fn spawn(instance_id: u64, seed_box: BoundingBox) -> Self {
        Self { instance_id, last_box: seed_box, velocity: (0.0, 0.0), alive: true, age: 0 }
    }

    fn ensure_alive(&self, op: &str) -> Result<()> {
        if self.alive {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{op} called on lost tracker {}",
                self.instance_id
            )))
        }
    }

    /// Last box shifted by the current velocity estimate.
    pub fn predict_location(&self) -> Result<BoundingBox> {
        self.ensure_alive("predict_location")?;
        Ok(self.last_box.translated(self.velocity.0, self.velocity.1))
    }

    /// Index of the detection overlapping the prediction the most, if that
    /// overlap reaches `match_threshold`. Equal overlaps prefer the higher
    /// score, then the earlier detection.
    pub fn match_detection(&self, detections: &[Detection<'_>], match_threshold: f64) -> Result<Option<usize>> {
        let predicted = self.predict_location()?;
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in detections.iter().enumerate() {
            let o = iou(&predicted, &d.window.bbox);
            if o < match_threshold {
                continue;
            }
            best = match best {
                Some((j, bo)) if bo > o || (bo == o && detections[j].score >= d.score) => Some((j, bo)),
                _ => Some((i, o)),
            };
        }
        Ok(best.map(|(i, _)| i))
    }

    /// Labels this frame's pool: the match is the positive, every other
    /// detection clear of the positive and of `others` is a negative. An
    /// unmatched tracker yields an empty labeling and should be marked lost.
    pub fn harvest<'a>(
        &self,
        detections: &[Detection<'a>],
        others: &[BoundingBox],
        cfg: &TrackerConfig,
    ) -> Result<FrameLabeling<'a>> {
        let Some(m) = self.match_detection(detections, cfg.match_threshold)? else {
            return Ok(FrameLabeling::default());
        };
        let positive = detections[m].window;
        let negatives = detections
            .iter()
            .enumerate()
            .filter(|&(i, d)| {
                i != m
                    && iou(&d.window.bbox, &positive.bbox) <= cfg.exclusion_threshold
                    && others.iter().all(|o| iou(&d.window.bbox, o) <= cfg.exclusion_threshold)
            })
            .map(|(_, d)| d.window)
            .collect();
        Ok(FrameLabeling { positive: Some(positive), negatives })
    }

    /// Moves the tracker to `new_box`, re-estimating velocity from centers.
    pub fn advance(&self, new_box: BoundingBox) -> Result<TrackerState> {
        self.ensure_alive("advance")?;
        let (ox, oy) = self.last_box.center();
        let (nx, ny) = new_box.center();
        Ok(TrackerState {
            instance_id: self.instance_id,
            last_box: new_box,
            velocity: (nx - ox, ny - oy),
            alive: true,
            age: self.age + 1,
        })
    }

    /// Irreversible.
    pub fn mark_lost(&mut self) {
        self.alive = false;
    }
}
