mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use common::*;
use eit::eval::{average_precision, match_detections, ranking, MatchLabel, ScoredDetection};
use eit::geometry::{iou, nms, BoundingBox, CandidateWindow};
use eit::model::{loss, loss_gradient, score};
use eit::mtl::{asgd_step, category_update, regularizer};
use eit::persist::ModelFile;
use eit::stream::{FrameRecord, GroundTruth, StreamHeader, StreamReader, StreamWriter};
use eit::{CategoryModel, Hyperparams, InstanceModel, LabeledSample, ParamVector};

fn features(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, d).prop_filter("nonzero", |v| l2(v) > 1e-3)
}

fn params(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, d + 1)
}

fn batch(d: usize, max: usize) -> impl Strategy<Value = Vec<LabeledSample>> {
    prop::collection::vec((features(d), any::<bool>()), 1..max)
        .prop_map(|v| v.into_iter().map(|(x, y)| sample(x, y)).collect())
}

fn grid_box() -> impl Strategy<Value = BoundingBox> {
    // coarse integer grid so that exact IoU ties and threshold hits occur
    (0..6u8, 0..6u8, 1..5u8, 1..5u8)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x as f64, y as f64, w as f64, h as f64).unwrap())
}

fn any_box() -> impl Strategy<Value = BoundingBox> {
    (-100.0..100.0f64, -100.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gradient_matches_finite_differences(
        (theta, x, y) in (1usize..12).prop_flat_map(|d| (params(d), features(d), any::<bool>())),
    ) {
        let s = sample(x, y);
        let p = ParamVector::from_raw(theta.clone()).unwrap();
        let g = loss_gradient(&p, &s).unwrap();
        let n = fd_gradient(&theta, s.features.as_slice(), s.label.sign(), 1e-6);
        let diff: Vec<f64> = g.iter().zip(&n).map(|(a, b)| a - b).collect();
        prop_assert!(l2(&diff) <= 1e-5 * l2(&g).max(1e-8));
    }

    #[test]
    fn loss_antisymmetry(theta in params(5), x in features(5)) {
        let p = ParamVector::from_raw(theta).unwrap();
        let f = unit(x);
        let m = score(&p, &f).unwrap();
        let lp = loss(&p, &LabeledSample::positive(f.clone())).unwrap();
        let ln = loss(&p, &LabeledSample::negative(f)).unwrap();
        prop_assert!((lp - ln + m).abs() <= 1e-12 * (1.0 + m.abs()));
        prop_assert!(lp >= 0.0 && ln >= 0.0);
    }

    #[test]
    fn loss_is_convex_along_segments(a in params(4), b in params(4), x in features(4), y: bool, t in 0.0..1.0f64) {
        let s = sample(x, y);
        let pa = ParamVector::from_raw(a.clone()).unwrap();
        let pb = ParamVector::from_raw(b.clone()).unwrap();
        let mid = ParamVector::from_raw(a.iter().zip(&b).map(|(u, v)| t * u + (1.0 - t) * v).collect()).unwrap();
        let lhs = loss(&mid, &s).unwrap();
        let rhs = t * loss(&pa, &s).unwrap() + (1.0 - t) * loss(&pb, &s).unwrap();
        prop_assert!(lhs <= rhs + 1e-12);
    }

    #[test]
    fn iou_symmetric_bounded_translation_invariant(a in any_box(), b in any_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let o = iou(&a, &b);
        prop_assert_eq!(o, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert!((iou(&a.translated(dx, dy), &b.translated(dx, dy)) - o).abs() <= 1e-9);
        prop_assert!((iou(&a, &a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn nms_keeps_a_maximal_non_overlapping_set(
        boxes in prop::collection::vec(grid_box(), 0..12),
        raw in prop::collection::vec(0..5u8, 12),
        thr in 0.1..0.9f64,
    ) {
        let scores: Vec<f64> = raw[..boxes.len()].iter().map(|&s| s as f64).collect();
        let kept = nms(&boxes, &scores, thr);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(iou(&boxes[a], &boxes[b]) <= thr);
            }
        }
        for j in 0..boxes.len() {
            if !kept.contains(&j) {
                prop_assert!(kept.iter().any(|&k| iou(&boxes[k], &boxes[j]) > thr
                    && (scores[k] > scores[j] || (scores[k] == scores[j] && k < j))));
            }
        }
    }

    #[test]
    fn matcher_equals_brute_force(
        dets in prop::collection::vec((0..2u64, grid_box(), 0..4u8), 0..7),
        gt in prop::collection::vec((0..2u64, grid_box()), 0..5),
        thr in prop::sample::select(vec![0.3, 0.5, 0.7]),
    ) {
        let dets: Vec<ScoredDetection> = dets.into_iter()
            .map(|(f, b, s)| ScoredDetection { frame_id: f, bbox: b, score: s as f64 })
            .collect();
        let mut index: BTreeMap<u64, Vec<BoundingBox>> = BTreeMap::new();
        for (f, b) in &gt {
            index.entry(*f).or_default().push(*b);
        }
        let got = labels_to_bools(&match_detections(&dets, &index, thr));
        prop_assert_eq!(got, brute_match(&dets, &gt, thr));
        // every ground-truth box is used at most once
        let tps = match_detections(&dets, &index, thr).iter().filter(|l| l.is_tp()).count();
        prop_assert!(tps <= gt.len());
    }

    #[test]
    fn ap_equals_brute_force_and_is_monotone(labels in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..4) {
        let n_tp = labels.iter().filter(|t| **t).count();
        let n_gt = n_tp + extra + 1;
        let ml: Vec<MatchLabel> = labels.iter()
            .map(|&t| if t { MatchLabel::TruePositive } else { MatchLabel::FalsePositive })
            .collect();
        let c = average_precision(&ml, n_gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&c.ap));
        prop_assert!((c.ap - brute_ap(&labels, n_gt)).abs() <= 1e-12);
        prop_assert!(c.points.windows(2).all(|w| w[0].recall <= w[1].recall));

        let mut front = vec![MatchLabel::TruePositive];
        front.extend_from_slice(&ml);
        prop_assert!(average_precision(&front, n_gt).unwrap().ap >= c.ap - 1e-12);
    }

    #[test]
    fn equal_scores_rank_in_input_order(scores in prop::collection::vec(0..3u8, 0..20)) {
        let dets: Vec<ScoredDetection> = scores.iter().enumerate()
            .map(|(i, &s)| ScoredDetection { frame_id: i as u64, bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), score: s as f64 })
            .collect();
        let r = ranking(&dets);
        for w in r.windows(2) {
            let (a, b) = (&dets[w[0]], &dets[w[1]]);
            prop_assert!(a.score > b.score || (a.score == b.score && w[0] < w[1]));
        }
    }

    #[test]
    fn polyak_and_category_match_history(
        ops in prop::collection::vec((0usize..3, any::<bool>(), 0.001..0.2f64, 0.0..2.0f64), 1..60),
        b in batch(3, 6),
    ) {
        let mut models: Vec<InstanceModel> = (0..3).map(|i| InstanceModel::new(i, ParamVector::zeros(3))).collect();
        let mut history: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 3];
        let mut category = CategoryModel::new(3);
        let mut fed: Vec<Vec<f64>> = Vec::new();
        for (i, barrier, eta, lambda) in ops {
            if barrier {
                let snaps: Vec<ParamVector> = models.iter().filter_map(|m| m.snapshot().ok().cloned()).collect();
                fed.extend(snaps.iter().map(|s| s.as_slice().to_vec()));
                category = category_update(&category, &snaps).unwrap();
            } else {
                let hp = Hyperparams::new(eta, lambda, 1).unwrap();
                models[i] = asgd_step(&models[i], &b, category.mean(), &hp, 3).unwrap();
                history[i].push(models[i].current().as_slice().to_vec());
            }
        }
        for (m, h) in models.iter().zip(&history) {
            if h.is_empty() {
                prop_assert!(m.snapshot().is_err());
                continue;
            }
            let snap = m.snapshot().unwrap().as_slice();
            for k in 0..4 {
                let mean = h.iter().map(|v| v[k]).sum::<f64>() / h.len() as f64;
                prop_assert!((snap[k] - mean).abs() <= 1e-10);
            }
        }
        prop_assert_eq!(category.mass(), fed.len() as u64);
        for k in 0..4 {
            let mean = if fed.is_empty() { 0.0 } else { fed.iter().map(|v| v[k]).sum::<f64>() / fed.len() as f64 };
            prop_assert!((category.mean().as_slice()[k] - mean).abs() <= 1e-10);
        }
    }

    #[test]
    fn uncoupled_step_is_plain_gradient_descent(
        init in params(4), mean in params(4), b in batch(4, 8), eta in 1e-4..0.5f64, steps in 1u32..20, n_active in 1usize..9,
    ) {
        let init = ParamVector::from_raw(init).unwrap();
        let m = InstanceModel::new(0, init.clone());
        let hp = Hyperparams::new(eta, 0.0, steps).unwrap();
        let a = asgd_step(&m, &b, &ParamVector::from_raw(mean).unwrap(), &hp, n_active).unwrap();
        let other = asgd_step(&m, &b, &ParamVector::zeros(4), &hp, 1).unwrap();
        prop_assert_eq!(&a, &other);
        let reference = reference_gd(&init, &b, eta, steps as usize);
        prop_assert_eq!(a.current().as_slice(), &reference.last().unwrap()[..]);
    }

    #[test]
    fn small_steps_descend_the_objective(
        init in params(3), mean in params(3), b in batch(3, 33), lambda in 0.0..2.0f64, n_active in 1usize..5,
    ) {
        let objective = |w: &ParamVector, c: &ParamVector| {
            let data: f64 = b.iter().map(|s| loss(w, s).unwrap()).sum::<f64>() / b.len() as f64;
            data + lambda / (2.0 * n_active as f64) * w.distance_sq(c)
        };
        let mean = ParamVector::from_raw(mean).unwrap();
        let mut m = InstanceModel::new(0, ParamVector::from_raw(init).unwrap());
        let hp = Hyperparams::new(1e-3, lambda, 1).unwrap();
        let mut prev = objective(m.current(), &mean);
        for _ in 0..100 {
            m = asgd_step(&m, &b, &mean, &hp, n_active).unwrap();
            let now = objective(m.current(), &mean);
            prop_assert!(now <= prev + 1e-8);
            prev = now;
        }
        // the penalty is the usual half squared distance
        let r = regularizer(&[m.current().clone()], &mean).unwrap();
        prop_assert!((r - 0.5 * m.current().distance_sq(&mean)).abs() <= 1e-12);
    }

    #[test]
    fn model_files_round_trip(
        mean in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..20),
        mass in any::<u64>(),
        steps in 1u64..1000,
    ) {
        let c = ModelFile::Category(CategoryModel::from_parts(ParamVector::from_raw(mean.clone()).unwrap(), mass));
        prop_assert_eq!(&ModelFile::from_bytes(&c.to_bytes()).unwrap(), &c);
        prop_assert_eq!(&ModelFile::from_text(&c.to_text()).unwrap(), &c);
        let rev: Vec<f64> = mean.iter().rev().cloned().collect();
        let inst = InstanceModel::from_parts(7, ParamVector::from_raw(mean).unwrap(), ParamVector::from_raw(rev).unwrap(), steps, 3).unwrap();
        let i = ModelFile::Instance(inst);
        prop_assert_eq!(&ModelFile::from_bytes(&i.to_bytes()).unwrap(), &i);
        prop_assert_eq!(&ModelFile::from_text(&i.to_text()).unwrap(), &i);
    }
}

fn frame_strategy(d: usize) -> impl Strategy<Value = Vec<FrameRecord>> {
    let window = (any_box(), features(d)).prop_map(|(b, f)| CandidateWindow::new(b, unit(f)));
    let frame = (prop::collection::vec(window, 0..5), prop::option::of(prop::collection::vec((any_box(), 0..9u64), 0..3)));
    prop::collection::vec(frame, 0..6).prop_map(|frames| {
        frames
            .into_iter()
            .enumerate()
            .map(|(i, (candidates, gt))| FrameRecord {
                frame_id: 3 * i as u64,
                candidates,
                ground_truth: gt.map(|g| g.into_iter().map(|(bbox, instance)| GroundTruth { bbox, instance }).collect()),
                oracle_detections: None,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streams_round_trip_bit_exactly(frames in frame_strategy(5)) {
        let header = StreamHeader::new(5, (640.0, 480.0));
        let mut w = StreamWriter::new(Vec::new(), &header).unwrap();
        for f in &frames {
            w.write_frame(f).unwrap();
        }
        let bytes = w.into_inner();
        let reader = StreamReader::new(&bytes[..]).unwrap();
        prop_assert_eq!(reader.header(), &header);
        let back: Vec<FrameRecord> = reader.collect::<Result<_, _>>().unwrap();
        prop_assert_eq!(back, frames);
    }
}
