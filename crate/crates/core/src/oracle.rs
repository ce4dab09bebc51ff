//! The confident-but-laconic oracle: a black box that labels a few easy
//! objects per frame and is right most of the time.
//!
//! `Replay` reads the detections stored in the stream and keeps its top
//! fraction. `Synthetic` fires on ground-truth objects with a controlled
//! precision, which turns the oracle's reliability into an experimental knob.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, CandidateWindow};
use crate::stream::FrameRecord;

/// Seeds must overlap a ground-truth box this much to count as true; false
/// seeds are drawn from candidates below [`NON_OBJECT_IOU`] with every object.
const OBJECT_IOU: f64 = 0.5;
const NON_OBJECT_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    Replay,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub mode: OracleMode,
    /// Replay: fraction of each frame's scored list kept as seeds.
    pub top_fraction: f64,
    /// Synthetic: probability that an emitted seed is a true object.
    pub precision: f64,
    /// Synthetic: per-object, per-frame probability of firing.
    pub seed_rate: f64,
    /// Synthetic: box jitter of true seeds, as a fraction of box size.
    pub jitter: f64,
    pub max_seeds_per_frame: usize,
    /// Frames between invocations.
    pub period: u64,
    pub rng_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mode: OracleMode::Synthetic,
            top_fraction: 0.05,
            precision: 0.95,
            seed_rate: 0.05,
            jitter: 0.05,
            max_seeds_per_frame: 3,
            period: 1,
            rng_seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("oracle {name} {v} must lie in (0, 1]")))
            }
        };
        unit(self.top_fraction, "top_fraction")?;
        unit(self.precision, "precision")?;
        unit(self.seed_rate, "seed_rate")?;
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::Config(format!("oracle jitter {} must lie in [0, 0.5)", self.jitter)));
        }
        if self.max_seeds_per_frame == 0 {
            return Err(Error::Config("oracle max_seeds_per_frame must be positive".into()));
        }
        if self.period == 0 {
            return Err(Error::Config("oracle period must be positive".into()));
        }
        Ok(())
    }
}

/// A seed: a window the oracle is confident contains an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDetection {
    #[serde(flatten)]
    pub window: CandidateWindow,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct Oracle {
    cfg: OracleConfig,
}

impl Oracle {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn is_due(&self, frame_id: u64) -> bool {
        frame_id.is_multiple_of(self.cfg.period)
    }

    /// Seeds for one frame, by descending confidence, at most
    /// `max_seeds_per_frame`. Output depends only on the frame and the config.
    pub fn emit_seeds(&self, frame: &FrameRecord) -> Result<Vec<SeedDetection>> {
        let mut seeds = match self.cfg.mode {
            OracleMode::Replay => self.replay(frame),
            OracleMode::Synthetic => self.synthesize(frame)?,
        };
        // stable: equal confidences keep emission order
        seeds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        seeds.truncate(self.cfg.max_seeds_per_frame);
        Ok(seeds)
    }

    fn replay(&self, frame: &FrameRecord) -> Vec<SeedDetection> {
        let Some(dets) = frame.oracle_detections.as_ref() else {
            return Vec::new();
        };
        let mut sorted = dets.clone();
        sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let keep = (self.cfg.top_fraction * sorted.len() as f64).ceil() as usize;
        sorted.truncate(keep);
        sorted
    }

    fn synthesize(&self, frame: &FrameRecord) -> Result<Vec<SeedDetection>> {
        let Some(gt) = frame.ground_truth.as_ref() else {
            return Err(Error::Config(format!(
                "synthetic oracle needs ground truth, frame {} has none",
                frame.frame_id
            )));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.rng_seed);
        rng.set_stream(frame.frame_id);

        let non_objects: Vec<&CandidateWindow> = frame
            .candidates
            .iter()
            .filter(|c| gt.iter().all(|g| iou(&c.bbox, &g.bbox) < NON_OBJECT_IOU))
            .collect();

        let mut seeds = Vec::new();
        for g in gt {
            // draw every variate for every object so that one object's branch
            // never shifts another object's randomness
            let fire = rng.random::<f64>() < self.cfg.seed_rate;
            let truthful = rng.random::<f64>() < self.cfg.precision;
            let confidence = rng.random_range(0.5..1.0);
            let shake: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            let decoy = non_objects.choose(&mut rng).copied();
            if !fire {
                continue;
            }
            if truthful {
                let Some(obj) = best_overlap(&frame.candidates, &g.bbox) else {
                    continue;
                };
                let j = self.cfg.jitter;
                let b = &g.bbox;
                let bbox = BoundingBox::new(
                    b.x + shake[0] * j * b.w,
                    b.y + shake[1] * j * b.h,
                    b.w * (1.0 + shake[2] * j),
                    b.h * (1.0 + shake[3] * j),
                )?;
                seeds.push(SeedDetection {
                    window: CandidateWindow::new(bbox, obj.features.clone()),
                    confidence,
                });
            } else if let Some(d) = decoy {
                seeds.push(SeedDetection { window: d.clone(), confidence });
            }
        }
        Ok(seeds)
    }
}

fn best_overlap<'a>(candidates: &'a [CandidateWindow], target: &BoundingBox) -> Option<&'a CandidateWindow> {
    let mut best: Option<(&CandidateWindow, f64)> = None;
    for c in candidates {
        let o = iou(&c.bbox, target);
        if o >= OBJECT_IOU && best.is_none_or(|(_, b)| o > b) {
            best = Some((c, o));
        }
    }
    best.map(|(c, _)| c)
}
