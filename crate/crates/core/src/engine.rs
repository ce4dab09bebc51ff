//! The self-learning loop: oracle seeds spawn instance trackers, trackers
//! harvest their own training data, and every frame ends with the category
//! model absorbing the instance snapshots.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::eval::{evaluate, GroundTruthIndex, PrCurve, ScoredDetection, DEFAULT_IOU_THRESHOLD};
use crate::geometry::{iou, nms, BoundingBox, CandidateWindow};
use crate::model::ParamVector;
use crate::mtl::{category_update, spawn_instance, CategoryModel, Hyperparams, InstanceModel};
use crate::oracle::{Oracle, OracleConfig, SeedDetection};
use crate::persist::ModelFile;
use crate::selftune::{Rank, SelfTuner, TuneFrame, TuneGrid};
use crate::stream::{read_stream, FrameRecord, StreamHeader};
use crate::tracker::{detection_pool, TrackerConfig, TrackerState};

/// Key mixed into the run seed for negative sampling at spawn time.
const SPAWN_STREAM_KEY: u64 = 0x5eed_5a3f_1e5b_0001;
const ORACLE_STREAM_KEY: u64 = 0x0a11_ce00_0000_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Mean-regularized ensemble.
    #[default]
    Eit,
    /// Independent trackers: the tune grid's lambda axis is forced to zero.
    IEit,
    /// Diagnostic: seeds plus random negatives only, no tracking.
    SeedsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    /// Adapt on the leading part of the stream, evaluate on the rest.
    #[default]
    Half,
    /// Adapt and evaluate on the whole stream.
    Same,
}

/// Initial fit of a newly spawned tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpawnConfig {
    pub n_negatives: usize,
    pub n_steps: u32,
    pub eta: f64,
    pub lambda: f64,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self { n_negatives: 20, n_steps: 100, eta: 1e-2, lambda: 0.0 }
    }
}

impl SpawnConfig {
    fn hyperparams(&self) -> Result<Hyperparams> {
        Hyperparams::new(self.eta, self.lambda, self.n_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub mode: Mode,
    pub tune: TuneGrid,
    pub tracker: TrackerConfig,
    pub nms_threshold: f64,
    pub eval_iou_threshold: f64,
    pub oracle: OracleConfig,
    pub spawn: SpawnConfig,
    /// Share of the stream used for learning under [`EvalSplit::Half`].
    pub adaptation_fraction: f64,
    pub eval_split: EvalSplit,
    /// Write `w̄` every this many adapted frames; 0 disables checkpoints.
    pub checkpoint_every: u64,
    /// Stop adapting after this many frames.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_frames: Option<u64>,
    /// Also run the lambda = 0 ensemble and report its AP.
    pub compare_i_eit: bool,
    pub rng_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Eit,
            tune: TuneGrid::default(),
            tracker: TrackerConfig::default(),
            nms_threshold: 0.3,
            eval_iou_threshold: DEFAULT_IOU_THRESHOLD,
            oracle: OracleConfig::default(),
            spawn: SpawnConfig::default(),
            adaptation_fraction: 0.5,
            eval_split: EvalSplit::Half,
            checkpoint_every: 0,
            max_frames: None,
            compare_i_eit: false,
            rng_seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64, name: &str| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} {v} must lie in (0, 1)")))
            }
        };
        unit_open(self.tracker.match_threshold, "match_threshold")?;
        unit_open(self.tracker.exclusion_threshold, "exclusion_threshold")?;
        unit_open(self.nms_threshold, "nms_threshold")?;
        unit_open(self.eval_iou_threshold, "eval_iou_threshold")?;
        unit_open(self.adaptation_fraction, "adaptation_fraction")?;
        if self.tracker.pool_size == 0 {
            return Err(Error::Config("pool_size must be positive".into()));
        }
        if self.spawn.n_negatives == 0 {
            return Err(Error::Config("spawn n_negatives must be positive".into()));
        }
        self.spawn.hyperparams()?;
        self.tune.validate()?;
        self.oracle.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is TOML-representable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Tune grid actually searched in this mode.
    pub fn effective_grid(&self) -> TuneGrid {
        match self.mode {
            Mode::IEit => self.tune.without_regularization(),
            Mode::Eit | Mode::SeedsOnly => self.tune.clone(),
        }
    }

    /// Number of leading frames used for adaptation out of `n`.
    pub fn adaptation_frames(&self, n: usize) -> usize {
        let split = match self.eval_split {
            EvalSplit::Half => (n as f64 * self.adaptation_fraction).floor() as usize,
            EvalSplit::Same => n,
        };
        match self.max_frames {
            Some(m) => split.min(m as usize),
            None => split,
        }
    }

    /// Frames held out for evaluation.
    pub fn evaluation_range(&self, n: usize) -> std::ops::Range<usize> {
        match self.eval_split {
            EvalSplit::Half => (n as f64 * self.adaptation_fraction).floor() as usize..n,
            EvalSplit::Same => 0..n,
        }
    }
}

/// Cumulative tracker counts. `spawned == alive + lost` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub spawned: u64,
    pub alive: u64,
    pub lost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneChoice {
    pub instance_id: u64,
    pub eta: f64,
    pub lambda: f64,
    pub n_steps: u32,
    pub rank: Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub frame_id: u64,
    pub seeds: usize,
    pub new_trackers: usize,
    pub new_lost: usize,
    pub census: Census,
    pub choices: Vec<TuneChoice>,
}

#[derive(Debug, Clone)]
struct Tracker {
    state: TrackerState,
    model: InstanceModel,
}

/// Online state of one adaptation run.
#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    d: usize,
    tuner: SelfTuner,
    oracle: Oracle,
    spawn_hp: Hyperparams,
    category: CategoryModel,
    trackers: Vec<Tracker>,
    retired: Vec<InstanceModel>,
    next_id: u64,
    census: Census,
}

impl Engine {
    pub fn new(cfg: EngineConfig, d: usize) -> Result<Self> {
        cfg.validate()?;
        if d == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let tuner = SelfTuner::new(cfg.effective_grid(), cfg.tracker.match_threshold);
        let oracle_cfg = OracleConfig {
            rng_seed: cfg.oracle.rng_seed ^ cfg.rng_seed.wrapping_mul(ORACLE_STREAM_KEY | 1),
            ..cfg.oracle.clone()
        };
        let oracle = Oracle::new(oracle_cfg)?;
        let spawn_hp = cfg.spawn.hyperparams()?;
        Ok(Self {
            cfg,
            d,
            tuner,
            oracle,
            spawn_hp,
            category: CategoryModel::new(d),
            trackers: Vec::new(),
            retired: Vec::new(),
            next_id: 0,
            census: Census::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn category(&self) -> &CategoryModel {
        &self.category
    }

    pub fn census(&self) -> Census {
        self.census
    }

    /// Models of live trackers followed by those of lost ones, each group in
    /// spawn order.
    pub fn instance_models(&self) -> impl Iterator<Item = &InstanceModel> {
        self.trackers.iter().map(|t| &t.model).chain(&self.retired)
    }

    pub fn tracker_states(&self) -> impl Iterator<Item = &TrackerState> {
        self.trackers.iter().map(|t| &t.state)
    }

    /// Seeds kept after dropping those that duplicate a tracked object or an
    /// earlier seed of the same frame.
    fn fresh_seeds(&self, frame: &FrameRecord, predicted: &[BoundingBox]) -> Result<Vec<SeedDetection>> {
        if !self.oracle.is_due(frame.frame_id) {
            return Ok(Vec::new());
        }
        let thr = self.cfg.tracker.match_threshold;
        let mut kept: Vec<SeedDetection> = Vec::new();
        for s in self.oracle.emit_seeds(frame)? {
            if s.window.features.dim() != self.d {
                return Err(Error::Stream {
                    frame_id: frame.frame_id,
                    message: format!("oracle seed has {} features, stream has {}", s.window.features.dim(), self.d),
                });
            }
            let dup = predicted.iter().chain(kept.iter().map(|k| &k.window.bbox)).any(|b| iou(b, &s.window.bbox) >= thr);
            if !dup {
                kept.push(s);
            }
        }
        Ok(kept)
    }

    fn spawn(&mut self, frame: &FrameRecord, seeds: &[SeedDetection], predicted: &[BoundingBox]) -> Result<Vec<Tracker>> {
        let excl = self.cfg.tracker.exclusion_threshold;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.rng_seed ^ SPAWN_STREAM_KEY);
        rng.set_stream(frame.frame_id);
        let mut out = Vec::new();
        for seed in seeds {
            let eligible: Vec<&CandidateWindow> = frame
                .candidates
                .iter()
                .filter(|c| {
                    predicted.iter().chain(seeds.iter().map(|s| &s.window.bbox)).all(|b| iou(&c.bbox, b) <= excl)
                })
                .collect();
            if eligible.is_empty() {
                continue;
            }
            let n = self.cfg.spawn.n_negatives.min(eligible.len());
            let mut picks = sample(&mut rng, eligible.len(), n).into_vec();
            picks.sort_unstable();
            let negatives: Vec<&CandidateWindow> = picks.into_iter().map(|i| eligible[i]).collect();
            let id = self.next_id;
            self.next_id += 1;
            let model = spawn_instance(id, &self.category, &seed.window, &negatives, &self.spawn_hp)?;
            out.push(Tracker { state: TrackerState::spawn(id, seed.window.bbox), model });
        }
        Ok(out)
    }

    /// Processes one frame and returns its log entry.
    pub fn process_frame(&mut self, frame: &FrameRecord) -> Result<FrameLog> {
        for c in &frame.candidates {
            if c.features.dim() != self.d {
                return Err(dim_mismatch("frame candidates", self.d, c.features.dim()));
            }
        }
        let predicted: Vec<BoundingBox> =
            self.trackers.iter().map(|t| t.state.predict_location()).collect::<Result<_>>()?;
        let seeds = self.fresh_seeds(frame, &predicted)?;
        let spawned = self.spawn(frame, &seeds, &predicted)?;
        let n_new = spawned.len();
        self.census.spawned += n_new as u64;

        if self.cfg.mode == Mode::SeedsOnly {
            let snaps = spawned.iter().map(|t| t.model.snapshot().cloned()).collect::<Result<Vec<_>>>()?;
            self.category = category_update(&self.category, &snaps)?;
            self.census.lost += n_new as u64;
            self.retired.extend(spawned.into_iter().map(|t| t.model));
            return Ok(FrameLog {
                frame_id: frame.frame_id,
                seeds: seeds.len(),
                new_trackers: n_new,
                new_lost: n_new,
                census: self.census,
                choices: Vec::new(),
            });
        }

        // detect and label with every existing tracker
        let seed_boxes: Vec<BoundingBox> = seeds.iter().map(|s| s.window.bbox).collect();
        let mut labelings = Vec::with_capacity(self.trackers.len());
        for (i, t) in self.trackers.iter().enumerate() {
            let pool = detection_pool(t.model.snapshot()?, &frame.candidates, self.cfg.tracker.pool_size)?;
            let others: Vec<BoundingBox> = predicted
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| *b)
                .chain(seed_boxes.iter().copied())
                .collect();
            labelings.push(t.state.harvest(&pool, &others, &self.cfg.tracker)?);
        }
        let n_survivors = labelings.iter().filter(|l| l.positive.is_some()).count();
        let n_active = n_survivors + n_new;

        let mean = self.category.mean().clone();
        let mut choices = Vec::with_capacity(n_survivors);
        let mut snapshots = Vec::with_capacity(n_active);
        let mut kept = Vec::with_capacity(n_active);
        let mut new_lost = 0;
        for (mut t, lab) in std::mem::take(&mut self.trackers).into_iter().zip(labelings) {
            let Some(positive) = lab.positive else {
                t.state.mark_lost();
                self.retired.push(t.model);
                new_lost += 1;
                continue;
            };
            let batch = lab.samples();
            let tf = TuneFrame {
                batch: &batch,
                mean: &mean,
                candidates: &frame.candidates,
                predicted: &positive.bbox,
                n_active,
            };
            let outcome = self.tuner.tune_and_update(&t.model, &tf)?;
            choices.push(TuneChoice {
                instance_id: t.state.instance_id,
                eta: outcome.chosen.eta,
                lambda: outcome.chosen.lambda,
                n_steps: outcome.chosen.n_steps,
                rank: outcome.achieved_rank,
            });
            t.model = outcome.updated;
            t.state = t.state.advance(positive.bbox)?;
            snapshots.push(t.model.snapshot()?.clone());
            kept.push(t);
        }
        for t in spawned {
            snapshots.push(t.model.snapshot()?.clone());
            kept.push(t);
        }
        self.category = category_update(&self.category, &snapshots)?;
        self.trackers = kept;
        self.census.lost += new_lost as u64;
        self.census.alive = self.trackers.len() as u64;

        Ok(FrameLog {
            frame_id: frame.frame_id,
            seeds: seeds.len(),
            new_trackers: n_new,
            new_lost,
            census: self.census,
            choices,
        })
    }
}

/// Scores every candidate of every frame with `detector` and keeps the
/// per-frame NMS survivors.
pub fn detect(detector: &ParamVector, frames: &[FrameRecord], nms_threshold: f64) -> Result<Vec<ScoredDetection>> {
    let mut out = Vec::new();
    for f in frames {
        let mut boxes = Vec::with_capacity(f.candidates.len());
        let mut scores = Vec::with_capacity(f.candidates.len());
        for c in &f.candidates {
            if c.features.dim() != detector.feature_dim() {
                return Err(dim_mismatch("model vs stream", detector.feature_dim(), c.features.dim()));
            }
            boxes.push(c.bbox);
            scores.push(detector.margin(c.features.as_slice()));
        }
        for i in nms(&boxes, &scores, nms_threshold) {
            out.push(ScoredDetection { frame_id: f.frame_id, bbox: boxes[i], score: scores[i] });
        }
    }
    Ok(out)
}

/// Ground truth of `frames`; every frame must carry some.
pub fn ground_truth_index(frames: &[FrameRecord]) -> Result<GroundTruthIndex> {
    frames
        .iter()
        .map(|f| {
            f.ground_truth_boxes()
                .map(|b| (f.frame_id, b))
                .ok_or_else(|| Error::Eval(format!("frame {} has no ground truth", f.frame_id)))
        })
        .collect()
}

/// PR curve of `dets` on `frames`. Detections must refer to frames present.
pub fn evaluate_on(dets: &[ScoredDetection], frames: &[FrameRecord], iou_threshold: f64) -> Result<PrCurve> {
    let gt = ground_truth_index(frames)?;
    if let Some(d) = dets.iter().find(|d| !gt.contains_key(&d.frame_id)) {
        return Err(Error::Eval(format!("detection refers to frame {} which is not in the stream", d.frame_id)));
    }
    evaluate(dets, &gt, iou_threshold)
}

/// The oracle's own seeds on `frames`, ranked by confidence.
pub fn oracle_detections(cfg: &EngineConfig, frames: &[FrameRecord]) -> Result<Vec<ScoredDetection>> {
    let engine = Engine::new(cfg.clone(), 1)?;
    let mut out = Vec::new();
    for f in frames.iter().filter(|f| engine.oracle.is_due(f.frame_id)) {
        for s in engine.oracle.emit_seeds(f)? {
            out.push(ScoredDetection { frame_id: f.frame_id, bbox: s.window.bbox, score: s.confidence });
        }
    }
    Ok(out)
}

/// Adapts on the leading frames, calling `on_frame` after each one.
pub fn adapt_frames(
    cfg: &EngineConfig,
    d: usize,
    frames: &[FrameRecord],
    mut on_frame: impl FnMut(&Engine, &FrameLog) -> Result<()>,
) -> Result<(Engine, Vec<FrameLog>)> {
    let mut engine = Engine::new(cfg.clone(), d)?;
    let n = cfg.adaptation_frames(frames.len());
    let mut logs = Vec::with_capacity(n);
    for f in &frames[..n] {
        let log = engine.process_frame(f)?;
        on_frame(&engine, &log)?;
        logs.push(log);
    }
    Ok((engine, logs))
}

/// Held-out APs of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub adapted: Option<f64>,
    pub oracle_only: Option<f64>,
    pub i_eit: Option<f64>,
}

/// Adapts and scores the result on the evaluation frames. Scores are left
/// empty when the evaluation frames lack ground truth or are empty.
pub fn run_experiment(cfg: &EngineConfig, d: usize, frames: &[FrameRecord]) -> Result<(Engine, Vec<FrameLog>, Scores)> {
    let (engine, logs) = adapt_frames(cfg, d, frames, |_, _| Ok(()))?;
    let scores = score_engine(cfg, d, frames, &engine)?;
    Ok((engine, logs, scores))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelPaths {
    pub category: String,
    pub category_text: String,
    pub instances: Vec<String>,
    pub checkpoints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: EngineConfig,
    pub stream: StreamHeader,
    pub frames_total: usize,
    pub frames_adapted: usize,
    pub frames_evaluated: usize,
    pub census: Census,
    pub category_mass: u64,
    pub models: ModelPaths,
    pub scores: Scores,
    pub frames: Vec<FrameLog>,
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

/// Full adapt run: reads the stream, adapts, writes models and
/// `report.json` under `out_dir`.
pub fn run_adapt(stream: &Path, cfg: &EngineConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let (header, frames) = read_stream(stream)?;
    fs::create_dir_all(out_dir)?;
    let ckpt_dir = out_dir.join("checkpoints");
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let every = cfg.checkpoint_every;

    let (engine, logs) = adapt_frames(cfg, header.d, &frames, |e, log| {
        if every > 0 && (log.frame_id + 1) % every == 0 {
            fs::create_dir_all(&ckpt_dir)?;
            let p = ckpt_dir.join(format!("category_{:08}.mtl", log.frame_id));
            ModelFile::Category(e.category().clone()).save(&p)?;
            checkpoints.push(p);
        }
        Ok(())
    })?;
    let held_out = &frames[cfg.evaluation_range(frames.len())];
    let scores = score_engine(cfg, header.d, &frames, &engine)?;

    let category = ModelFile::Category(engine.category().clone());
    let cat_path = out_dir.join("category.mtl");
    let cat_text = out_dir.join("category.txt");
    category.save(&cat_path)?;
    category.save_text(&cat_text)?;
    let inst_dir = out_dir.join("instances");
    fs::create_dir_all(&inst_dir)?;
    let mut instances = Vec::new();
    for m in engine.instance_models() {
        let p = inst_dir.join(format!("instance_{}.mtl", m.instance_id()));
        ModelFile::Instance(m.clone()).save(&p)?;
        instances.push(rel(out_dir, &p));
    }
    instances.sort();

    let report = RunReport {
        config: cfg.clone(),
        stream: header,
        frames_total: frames.len(),
        frames_adapted: logs.len(),
        frames_evaluated: held_out.len(),
        census: engine.census(),
        category_mass: engine.category().mass(),
        models: ModelPaths {
            category: rel(out_dir, &cat_path),
            category_text: rel(out_dir, &cat_text),
            instances,
            checkpoints: checkpoints.iter().map(|p| rel(out_dir, p)).collect(),
        },
        scores,
        frames: logs,
    };
    let json = serde_json::to_string_pretty(&report).map_err(std::io::Error::from)?;
    fs::write(out_dir.join("report.json"), json + "\n")?;
    Ok(report)
}

fn score_engine(cfg: &EngineConfig, d: usize, frames: &[FrameRecord], engine: &Engine) -> Result<Scores> {
    let held_out = &frames[cfg.evaluation_range(frames.len())];
    let n_gt: usize = held_out.iter().filter_map(|f| f.ground_truth.as_ref()).map(Vec::len).sum();
    if held_out.is_empty() || n_gt == 0 || held_out.iter().any(|f| f.ground_truth.is_none()) {
        return Ok(Scores::default());
    }
    let ap_of = |p: &ParamVector| -> Result<f64> {
        Ok(evaluate_on(&detect(p, held_out, cfg.nms_threshold)?, held_out, cfg.eval_iou_threshold)?.ap)
    };
    let mut scores = Scores {
        adapted: Some(ap_of(engine.category().mean())?),
        oracle_only: Some(evaluate_on(&oracle_detections(cfg, held_out)?, held_out, cfg.eval_iou_threshold)?.ap),
        i_eit: None,
    };
    if cfg.compare_i_eit {
        let alt = EngineConfig { mode: Mode::IEit, compare_i_eit: false, ..cfg.clone() };
        let (ie, _) = adapt_frames(&alt, d, frames, |_, _| Ok(()))?;
        scores.i_eit = Some(ap_of(ie.category().mean())?);
    }
    Ok(scores)
}
