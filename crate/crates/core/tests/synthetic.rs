mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::reference_gd;
use eit::eval::{average_precision, MatchLabel};
use eit::geometry::iou;
use eit::stream::{read_stream, write_stream, SynthConfig, SyntheticStream};
use eit::{Error, LabeledSample, ParamVector};

fn pooled(cfg: SynthConfig) -> Vec<LabeledSample> {
    let mut out = Vec::new();
    for f in SyntheticStream::new(cfg).unwrap() {
        let gt = f.ground_truth_boxes().unwrap();
        for c in f.candidates {
            let object = gt.iter().any(|g| iou(g, &c.bbox) >= 0.5);
            out.push(if object { LabeledSample::positive(c.features) } else { LabeledSample::negative(c.features) });
        }
    }
    out
}

#[test]
fn category_is_linearly_separable_offline() {
    let data = pooled(SynthConfig { n_frames: 60, rng_seed: 3, ..Default::default() });
    let n_pos = data.iter().filter(|s| s.label.sign() > 0.0).count();
    assert!(n_pos > 100, "{n_pos} positives");
    let w = reference_gd(&ParamVector::zeros(64), &data, 2.0, 1500).pop().unwrap();
    let correct = data
        .iter()
        .filter(|s| {
            let x = s.features.as_slice();
            let m: f64 = w[..64].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[64];
            m * s.label.sign() > 0.0
        })
        .count();
    let acc = correct as f64 / data.len() as f64;
    assert!(acc > 0.95, "train accuracy {acc}");
}

#[test]
fn random_ranking_ap_tracks_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    // the precision envelope biases short lists upward; 2000 keeps that well under tolerance
    let (trials, n) = (10_000, 2000);
    let mut total = 0.0;
    for _ in 0..trials {
        // balanced labels in random order; every object is detected once
        let mut labels: Vec<MatchLabel> =
            (0..n).map(|i| if i % 2 == 0 { MatchLabel::TruePositive } else { MatchLabel::FalsePositive }).collect();
        for i in (1..n).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        total += average_precision(&labels, n / 2).unwrap().ap;
    }
    let mean = total / trials as f64;
    assert!((mean - 0.5).abs() <= 0.02, "mean AP {mean}");
}

#[test]
fn gzip_streams_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_frames: 25, d: 6, ..Default::default() };
    let s = SyntheticStream::new(cfg.clone()).unwrap();
    let header = s.header();
    let frames: Vec<_> = s.collect();
    for name in ["s.jsonl", "s.jsonl.gz"] {
        let p = dir.path().join(name);
        write_stream(&p, &header, &frames).unwrap();
        let (h, back) = read_stream(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, frames);
    }
    let plain = std::fs::metadata(dir.path().join("s.jsonl")).unwrap().len();
    let gz = std::fs::metadata(dir.path().join("s.jsonl.gz")).unwrap().len();
    assert!(gz < plain);
}

#[test]
fn malformed_streams_report_frame_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    let header = r#"{"format":"eit-stream","version":1,"d":2,"arena":[100.0,100.0]}"#;

    std::fs::write(&p, format!("{header}\n")).unwrap();
    assert!(read_stream(&p).unwrap().1.is_empty());

    let short = r#"{"frame_id":4,"candidates":[{"box":[0,0,1,1],"features":[1.0]}]}"#;
    std::fs::write(&p, format!("{header}\n{short}\n")).unwrap();
    match read_stream(&p) {
        Err(Error::Parse { frame, field, .. }) => {
            assert_eq!(frame, "4");
            assert!(field.contains("features"), "{field}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }

    let ok = |id: u64| format!(r#"{{"frame_id":{id},"candidates":[{{"box":[0,0,1,1],"features":[1.0,0.0]}}]}}"#);
    std::fs::write(&p, format!("{header}\n{}\n{}\n", ok(5), ok(5))).unwrap();
    assert!(matches!(read_stream(&p), Err(Error::Stream { frame_id: 5, .. })));
}
