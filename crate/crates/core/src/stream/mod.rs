//! Frame streams: on-disk JSON-lines format and the synthetic generator.
//!
//! A stream file is one header line followed by one frame per line:
//!
//! ```text
//! {"format":"eit-stream","version":1,"d":64,"arena":[640.0,480.0]}
//! {"frame_id":0,"candidates":[{"box":[x,y,w,h],"features":[...]}, ...],
//!  "ground_truth":[{"box":[x,y,w,h],"instance":3}],
//!  "oracle_detections":[{"box":[...],"features":[...],"confidence":0.9}]}
//! ```
//!
//! `ground_truth` and `oracle_detections` are optional. Files ending in `.gz`
//! are gzip-compressed. Feature vectors are L2-normalized on ingestion.

mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

pub use synth::{SynthConfig, SyntheticStream};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, CandidateWindow};
use crate::model::FeatureVector;
use crate::oracle::SeedDetection;

pub const STREAM_FORMAT: &str = "eit-stream";
pub const STREAM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub format: String,
    pub version: u32,
    /// Feature dimension of every candidate.
    pub d: usize,
    /// Frame size in pixels, (width, height).
    pub arena: (f64, f64),
}

impl StreamHeader {
    pub fn new(d: usize, arena: (f64, f64)) -> Self {
        Self { format: STREAM_FORMAT.into(), version: STREAM_VERSION, d, arena }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub instance: u64,
}

/// One tick of the stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub candidates: Vec<CandidateWindow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruth>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_detections: Option<Vec<SeedDetection>>,
}

impl FrameRecord {
    pub fn ground_truth_boxes(&self) -> Option<Vec<BoundingBox>> {
        self.ground_truth.as_ref().map(|g| g.iter().map(|g| g.bbox).collect())
    }
}

#[derive(Deserialize)]
struct RawWindow {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    features: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSeed {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    features: Vec<f64>,
    confidence: f64,
}

#[derive(Deserialize)]
struct RawGroundTruth {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    instance: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    frame_id: u64,
    candidates: Vec<RawWindow>,
    #[serde(default)]
    ground_truth: Option<Vec<RawGroundTruth>>,
    #[serde(default)]
    oracle_detections: Option<Vec<RawSeed>>,
}

/// Lazily decodes frames, validating each one as it is read.
pub struct StreamReader<R> {
    header: StreamHeader,
    lines: std::io::Lines<R>,
    line_no: usize,
    last_frame_id: Option<u64>,
    failed: bool,
}

impl<R: BufRead> StreamReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines.next().transpose()?.ok_or_else(|| Error::Parse {
            line: 1,
            frame: "-".into(),
            field: "header".into(),
            message: "missing stream header".into(),
        })?;
        let header: StreamHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            frame: "-".into(),
            field: "header".into(),
            message: e.to_string(),
        })?;
        if header.format != STREAM_FORMAT || header.version != STREAM_VERSION {
            return Err(Error::Parse {
                line: 1,
                frame: "-".into(),
                field: "header".into(),
                message: format!("unsupported stream {} v{}", header.format, header.version),
            });
        }
        if header.d == 0 {
            return Err(Error::Parse {
                line: 1,
                frame: "-".into(),
                field: "header.d".into(),
                message: "feature dimension must be positive".into(),
            });
        }
        Ok(Self { header, lines, line_no: 1, last_frame_id: None, failed: false })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    fn decode(&mut self, line: &str) -> Result<FrameRecord> {
        let line_no = self.line_no;
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            frame: "?".into(),
            field: "record".into(),
            message: e.to_string(),
        })?;
        let frame = value
            .get("frame_id")
            .map(|v| v.to_string())
            .unwrap_or_else(|| "?".into());
        let parse_err = |field: String, message: String| Error::Parse {
            line: line_no,
            frame: frame.clone(),
            field,
            message,
        };
        let raw: RawFrame = serde_json::from_value(value).map_err(|e| parse_err("record".into(), e.to_string()))?;

        let d = self.header.d;
        let window = |field: String, bbox: [f64; 4], features: Vec<f64>| -> Result<CandidateWindow> {
            let bbox = BoundingBox::try_from(bbox).map_err(|e| parse_err(format!("{field}.box"), e.to_string()))?;
            if features.len() != d {
                return Err(parse_err(
                    format!("{field}.features"),
                    format!("expected {d} features, found {}", features.len()),
                ));
            }
            let features =
                FeatureVector::ingest(features).map_err(|e| parse_err(format!("{field}.features"), e.to_string()))?;
            Ok(CandidateWindow::new(bbox, features))
        };

        let candidates = raw
            .candidates
            .into_iter()
            .enumerate()
            .map(|(i, w)| window(format!("candidates[{i}]"), w.bbox, w.features))
            .collect::<Result<Vec<_>>>()?;
        let ground_truth = raw
            .ground_truth
            .map(|gt| {
                gt.into_iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let bbox = BoundingBox::try_from(g.bbox)
                            .map_err(|e| parse_err(format!("ground_truth[{i}].box"), e.to_string()))?;
                        Ok(GroundTruth { bbox, instance: g.instance })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let oracle_detections = raw
            .oracle_detections
            .map(|ds| {
                ds.into_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let field = format!("oracle_detections[{i}]");
                        if !s.confidence.is_finite() {
                            return Err(parse_err(format!("{field}.confidence"), "not finite".into()));
                        }
                        Ok(SeedDetection { window: window(field, s.bbox, s.features)?, confidence: s.confidence })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;

        if let Some(prev) = self.last_frame_id {
            if raw.frame_id <= prev {
                return Err(Error::Stream {
                    frame_id: raw.frame_id,
                    message: format!("frame ids must increase (previous {prev})"),
                });
            }
        }
        self.last_frame_id = Some(raw.frame_id);
        Ok(FrameRecord { frame_id: raw.frame_id, candidates, ground_truth, oracle_detections })
    }
}

impl<R: BufRead> Iterator for StreamReader<R> {
    type Item = Result<FrameRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e.into()));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let out = self.decode(&line);
            self.failed = out.is_err();
            return Some(out);
        }
    }
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Opens a stream file for lazy reading.
pub fn open_stream(path: &Path) -> Result<StreamReader<Box<dyn BufRead>>> {
    let file = File::open(path)?;
    let reader: Box<dyn BufRead> = if is_gzip(path) {
        Box::new(BufReader::new(GzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    StreamReader::new(reader)
}

/// Reads a whole stream into memory.
pub fn read_stream(path: &Path) -> Result<(StreamHeader, Vec<FrameRecord>)> {
    let reader = open_stream(path)?;
    let header = reader.header().clone();
    let frames = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, frames))
}

pub struct StreamWriter<W: Write> {
    out: W,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut out: W, header: &StreamHeader) -> Result<Self> {
        serde_json::to_writer(&mut out, header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn write_frame(&mut self, frame: &FrameRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, frame).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Writes `frames` to `path`, gzip-compressed when the name ends in `.gz`.
pub fn write_stream<'a>(
    path: &Path,
    header: &StreamHeader,
    frames: impl IntoIterator<Item = &'a FrameRecord>,
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    if is_gzip(path) {
        let mut w = StreamWriter::new(GzEncoder::new(file, Compression::default()), header)?;
        for f in frames {
            w.write_frame(f)?;
        }
        w.into_inner().finish()?.flush()?;
    } else {
        let mut w = StreamWriter::new(file, header)?;
        for f in frames {
            w.write_frame(f)?;
        }
        w.into_inner().flush()?;
    }
    Ok(())
}
