//! Synthetic streams with a known latent category.
//!
//! Objects of the category share a unit direction `u` in feature space: an
//! instance's appearance mean is `s * u + eps_i` with an instance-specific
//! offset `eps_i`, and each frame adds a smaller appearance jitter. Distractors
//! are either background (isotropic noise) or hard negatives whose mean
//! direction has cosine `hard_negative_similarity` with `u`, the remainder
//! pointing along a fixed confuser direction orthogonal to `u`.
//!
//! A fixed number of object slots run in parallel. Each slot hosts a
//! sequence of instances that appear, move at constant speed with reflection
//! off the arena walls, and disappear after a random lifetime.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FrameRecord, GroundTruth, StreamHeader};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, CandidateWindow};
use crate::model::FeatureVector;

/// Distractors overlapping an object above this are re-drawn.
const DISTRACTOR_MAX_IOU: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub d: usize,
    /// Object slots alive at the same time.
    pub n_instances: usize,
    pub category_direction_strength: f64,
    /// Std of each instance's appearance offset, per coordinate.
    pub instance_noise: f64,
    /// Per-frame appearance jitter, relative to `instance_noise`.
    pub frame_noise_ratio: f64,
    pub distractors_per_frame: usize,
    /// Share of distractors that are hard negatives.
    pub hard_negative_fraction: f64,
    pub hard_negative_similarity: f64,
    pub n_frames: u64,
    pub arena: (f64, f64),
    /// Pixels per frame.
    pub speed: f64,
    /// Instance lifetime range in frames, inclusive.
    pub lifetime: (u64, u64),
    /// Longest pause before a slot hosts its next instance.
    pub max_gap: u64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_instances: 5,
            category_direction_strength: 3.0,
            instance_noise: 1.0,
            frame_noise_ratio: 0.25,
            distractors_per_frame: 40,
            hard_negative_fraction: 0.1,
            hard_negative_similarity: 0.5,
            n_frames: 500,
            arena: (640.0, 480.0),
            speed: 3.0,
            lifetime: (80, 200),
            max_gap: 30,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return fail("synthetic d must be positive".into());
        }
        if !(self.category_direction_strength >= 0.0 && self.instance_noise >= 0.0 && self.frame_noise_ratio >= 0.0) {
            return fail("synthetic noise levels and strength must be non-negative".into());
        }
        if self.category_direction_strength == 0.0 && self.instance_noise == 0.0 {
            return fail("objects need a category direction or instance noise".into());
        }
        if !(0.0..1.0).contains(&self.hard_negative_similarity) {
            return fail(format!("hard_negative_similarity {} must lie in [0, 1)", self.hard_negative_similarity));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            return fail(format!("hard_negative_fraction {} must lie in [0, 1]", self.hard_negative_fraction));
        }
        if !(self.arena.0 >= 64.0 && self.arena.1 >= 64.0 && self.arena.0.is_finite() && self.arena.1.is_finite()) {
            return fail(format!("arena {:?} must be at least 64x64", self.arena));
        }
        if !(self.speed >= 0.0 && self.speed < self.arena.0.min(self.arena.1) / 4.0) {
            return fail(format!("speed {} out of range", self.speed));
        }
        if self.lifetime.0 == 0 || self.lifetime.0 > self.lifetime.1 {
            return fail(format!("lifetime range {:?} is empty", self.lifetime));
        }
        Ok(())
    }

    pub fn header(&self) -> StreamHeader {
        StreamHeader::new(self.d, self.arena)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone)]
struct Instance {
    tag: u64,
    mean: Vec<f64>,
    bbox: BoundingBox,
    vx: f64,
    vy: f64,
    exit: u64,
}

#[derive(Debug, Clone)]
enum Slot {
    Waiting { enter: u64 },
    Active(Instance),
}

/// Iterator over generated frames. Equal configs yield equal streams.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    category: Vec<f64>,
    confuser: Vec<f64>,
    slots: Vec<Slot>,
    next_tag: u64,
    frame: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl SyntheticStream {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let category = unit(gaussian(&mut rng, cfg.d));
        // Gram-Schmidt against the category direction; zero when d = 1
        let raw = gaussian(&mut rng, cfg.d);
        let dot: f64 = raw.iter().zip(&category).map(|(a, b)| a * b).sum();
        let confuser = if cfg.d > 1 {
            unit(raw.iter().zip(&category).map(|(a, b)| a - dot * b).collect())
        } else {
            vec![0.0]
        };
        let slots = (0..cfg.n_instances)
            .map(|_| Slot::Waiting { enter: rng.random_range(0..=cfg.max_gap) })
            .collect();
        Ok(Self { cfg, rng, category, confuser, slots, next_tag: 0, frame: 0 })
    }

    pub fn header(&self) -> StreamHeader {
        self.cfg.header()
    }

    /// The latent category direction `u`.
    pub fn category_direction(&self) -> &[f64] {
        &self.category
    }

    fn random_box(&mut self) -> BoundingBox {
        let (aw, ah) = self.cfg.arena;
        let w = aw * self.rng.random_range(0.05..0.1);
        let h = (w * self.rng.random_range(1.5..2.0)).min(ah / 2.0);
        let x = self.rng.random_range(0.0..aw - w);
        let y = self.rng.random_range(0.0..ah - h);
        BoundingBox { x, y, w, h }
    }

    fn new_instance(&mut self, frame: u64) -> Instance {
        let d = self.cfg.d;
        let s = self.cfg.category_direction_strength;
        let noise = gaussian(&mut self.rng, d);
        let mean = self
            .category
            .iter()
            .zip(&noise)
            .map(|(u, e)| s * u + self.cfg.instance_noise * e)
            .collect();
        let bbox = self.random_box();
        let angle = self.rng.random_range(0.0..std::f64::consts::TAU);
        let life = self.rng.random_range(self.cfg.lifetime.0..=self.cfg.lifetime.1);
        let tag = self.next_tag;
        self.next_tag += 1;
        Instance {
            tag,
            mean,
            bbox,
            vx: self.cfg.speed * angle.cos(),
            vy: self.cfg.speed * angle.sin(),
            exit: frame + life,
        }
    }

    fn features(&mut self, mean: &[f64], jitter: f64) -> FeatureVector {
        let mut v: Vec<f64> = mean.to_vec();
        if jitter > 0.0 {
            for x in v.iter_mut() {
                *x += jitter * self.rng.sample::<f64, _>(StandardNormal);
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            // measure-zero event; keeps ingestion well defined
            v[0] = 1.0;
        }
        FeatureVector::ingest(v).expect("finite nonzero features")
    }

    fn step_slots(&mut self, frame: u64) {
        let (aw, ah) = self.cfg.arena;
        for i in 0..self.slots.len() {
            let slot = self.slots[i].clone();
            self.slots[i] = match slot {
                Slot::Waiting { enter } if enter <= frame => Slot::Active(self.new_instance(frame)),
                Slot::Active(inst) if inst.exit <= frame => {
                    let gap = self.rng.random_range(0..=self.cfg.max_gap);
                    if gap == 0 {
                        Slot::Active(self.new_instance(frame))
                    } else {
                        Slot::Waiting { enter: frame + gap }
                    }
                }
                Slot::Active(mut inst) if frame > 0 => {
                    let b = &mut inst.bbox;
                    b.x += inst.vx;
                    b.y += inst.vy;
                    if b.x < 0.0 {
                        b.x = -b.x;
                        inst.vx = -inst.vx;
                    } else if b.x + b.w > aw {
                        b.x = 2.0 * (aw - b.w) - b.x;
                        inst.vx = -inst.vx;
                    }
                    if b.y < 0.0 {
                        b.y = -b.y;
                        inst.vy = -inst.vy;
                    } else if b.y + b.h > ah {
                        b.y = 2.0 * (ah - b.h) - b.y;
                        inst.vy = -inst.vy;
                    }
                    Slot::Active(inst)
                }
                other => other,
            };
        }
    }

    fn make_frame(&mut self) -> FrameRecord {
        let frame = self.frame;
        self.step_slots(frame);

        let jitter = self.cfg.instance_noise * self.cfg.frame_noise_ratio;
        let mut candidates = Vec::new();
        let mut ground_truth = Vec::new();
        let active: Vec<Instance> = self
            .slots
            .iter()
            .filter_map(|s| match s {
                Slot::Active(i) => Some(i.clone()),
                Slot::Waiting { .. } => None,
            })
            .collect();
        for inst in &active {
            let features = self.features(&inst.mean, jitter);
            candidates.push(CandidateWindow::new(inst.bbox, features));
            ground_truth.push(GroundTruth { bbox: inst.bbox, instance: inst.tag });
        }

        let n_hard = (self.cfg.distractors_per_frame as f64 * self.cfg.hard_negative_fraction).round() as usize;
        let rho = self.cfg.hard_negative_similarity;
        let s = self.cfg.category_direction_strength.max(1.0);
        let hard_mean: Vec<f64> = self
            .category
            .iter()
            .zip(&self.confuser)
            .map(|(u, v)| s * (rho * u + (1.0 - rho * rho).sqrt() * v))
            .collect();
        let hard_noise = self.cfg.instance_noise;
        let zero = vec![0.0; self.cfg.d];
        for k in 0..self.cfg.distractors_per_frame {
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let b = self.random_box();
                if ground_truth.iter().all(|g| iou(&g.bbox, &b) <= DISTRACTOR_MAX_IOU) {
                    placed = Some(b);
                    break;
                }
            }
            let features = if k < n_hard {
                self.features(&hard_mean, hard_noise)
            } else {
                self.features(&zero, 1.0)
            };
            if let Some(b) = placed {
                candidates.push(CandidateWindow::new(b, features));
            }
        }

        // candidate order carries no information
        for i in (1..candidates.len()).rev() {
            let j = self.rng.random_range(0..=i);
            candidates.swap(i, j);
        }

        self.frame += 1;
        FrameRecord { frame_id: frame, candidates, ground_truth: Some(ground_truth), oracle_detections: None }
    }
}

impl Iterator for SyntheticStream {
    type Item = FrameRecord;

    fn next(&mut self) -> Option<FrameRecord> {
        if self.frame >= self.cfg.n_frames {
            return None;
        }
        Some(self.make_frame())
    }
}
