//! Detection evaluation: greedy IoU matching, precision-recall curve and
//! all-points Average Precision.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Ground-truth boxes keyed by frame id.
pub type GroundTruthIndex = BTreeMap<u64, Vec<BoundingBox>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub frame_id: u64,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
}

impl MatchLabel {
    pub fn is_tp(self) -> bool {
        self == MatchLabel::TruePositive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// One point per ranked detection, plus the area under the precision
/// envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// Indices of `dets` by descending score; equal scores keep input order.
pub fn ranking(dets: &[ScoredDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Labels each detection (in input order) as a true or false positive.
///
/// Detections are visited by descending score. Each takes the unmatched
/// ground-truth box of its frame with the highest IoU (earliest on ties) if
/// that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[ScoredDetection], gt: &GroundTruthIndex, iou_threshold: f64) -> Vec<MatchLabel> {
    let mut used: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    let mut labels = vec![MatchLabel::FalsePositive; dets.len()];
    for i in ranking(dets) {
        let det = &dets[i];
        let Some(boxes) = gt.get(&det.frame_id) else {
            continue;
        };
        let taken = used.entry(det.frame_id).or_insert_with(|| vec![false; boxes.len()]);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in boxes.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou(&det.bbox, g);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            if o >= iou_threshold {
                taken[j] = true;
                labels[i] = MatchLabel::TruePositive;
            }
        }
    }
    labels
}

/// Precision-recall sweep over `labels`, given in rank order. AP is the
/// exact area under the precision envelope (all-points interpolation).
pub fn average_precision(labels: &[MatchLabel], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(Error::Eval("average precision is undefined without ground truth".into()));
    }
    let mut points = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (k, l) in labels.iter().enumerate() {
        if l.is_tp() {
            tp += 1;
        }
        points.push(PrPoint { recall: tp as f64 / n_gt as f64, precision: tp as f64 / (k + 1) as f64 });
    }
    // recall only moves at true positives, by 1/n_gt each time
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for (p, l) in points.iter().zip(labels).rev() {
        envelope = envelope.max(p.precision);
        if l.is_tp() {
            ap += envelope;
        }
    }
    Ok(PrCurve { points, ap: ap / n_gt as f64 })
}

/// Matches and scores a detection list against ground truth.
pub fn evaluate(dets: &[ScoredDetection], gt: &GroundTruthIndex, iou_threshold: f64) -> Result<PrCurve> {
    let n_gt = gt.values().map(Vec::len).sum();
    let labels = match_detections(dets, gt, iou_threshold);
    let ranked: Vec<MatchLabel> = ranking(dets).into_iter().map(|i| labels[i]).collect();
    average_precision(&ranked, n_gt)
}

#[derive(Serialize, Deserialize)]
struct DetectionRow {
    frame_id: u64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, frame: "?".into(), field: "detections".into(), message: e.to_string() }
}

/// Writes `frame_id,x,y,w,h,score` rows.
pub fn write_detections_csv<W: Write>(out: W, dets: &[ScoredDetection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for d in dets {
        let b = d.bbox;
        w.serialize(DetectionRow { frame_id: d.frame_id, x: b.x, y: b.y, w: b.w, h: b.h, score: d.score })
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections_csv<R: Read>(input: R) -> Result<Vec<ScoredDetection>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize::<DetectionRow>() {
        let row = row.map_err(csv_error)?;
        let line = out.len() + 2;
        let parse_err = |field: &str, message: String| Error::Parse {
            line,
            frame: row.frame_id.to_string(),
            field: field.into(),
            message,
        };
        let bbox = BoundingBox::new(row.x, row.y, row.w, row.h).map_err(|e| parse_err("box", e.to_string()))?;
        if !row.score.is_finite() {
            return Err(parse_err("score", "score must be finite".into()));
        }
        out.push(ScoredDetection { frame_id: row.frame_id, bbox, score: row.score });
    }
    Ok(out)
}

pub fn save_detections(path: &Path, dets: &[ScoredDetection]) -> Result<()> {
    write_detections_csv(File::create(path)?, dets)
}

pub fn load_detections(path: &Path) -> Result<Vec<ScoredDetection>> {
    read_detections_csv(File::open(path)?)
}

/// Writes `recall,precision` rows, one per ranked detection.
pub fn write_pr_csv<W: Write>(out: W, curve: &PrCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in &curve.points {
        w.serialize(p).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
