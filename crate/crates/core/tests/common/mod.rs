//! Independent reference implementations used as test oracles. They share
//! no code with the library beyond its plain data types.
#![allow(dead_code)]

use std::collections::HashSet;

use eit::eval::{MatchLabel, ScoredDetection};
use eit::geometry::BoundingBox;
use eit::{FeatureVector, LabeledSample, ParamVector};

/// Logistic loss computed directly from its definition, with the bias as
/// an extra weight on a constant feature.
pub fn naive_loss(theta: &[f64], x: &[f64], y: f64) -> f64 {
    let m: f64 = theta[..x.len()].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + theta[x.len()];
    let z = -y * m;
    // log(1 + e^z) without overflow
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Central finite-difference gradient of [`naive_loss`].
pub fn fd_gradient(theta: &[f64], x: &[f64], y: f64, h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[k] += h;
            dn[k] -= h;
            (naive_loss(&up, x, y) - naive_loss(&dn, x, y)) / (2.0 * h)
        })
        .collect()
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn unit(v: Vec<f64>) -> FeatureVector {
    FeatureVector::ingest(v).unwrap()
}

pub fn sample(x: Vec<f64>, positive: bool) -> LabeledSample {
    if positive {
        LabeledSample::positive(unit(x))
    } else {
        LabeledSample::negative(unit(x))
    }
}

/// Plain full-batch gradient descent with `lambda = 0`, written without the
/// library's step code. Returns every iterate.
pub fn reference_gd(init: &ParamVector, batch: &[LabeledSample], eta: f64, steps: usize) -> Vec<Vec<f64>> {
    let mut w = init.as_slice().to_vec();
    let d = w.len() - 1;
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = vec![0.0; w.len()];
        for s in batch {
            let x = s.features.as_slice();
            let y = s.label.sign();
            let m: f64 = w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let coef = -y * eit::model::sigmoid(-y * m);
            for k in 0..d {
                g[k] += coef * x[k];
            }
            g[d] += coef;
        }
        for k in 0..w.len() {
            w[k] -= eta * (g[k] / batch.len() as f64);
        }
        history.push(w.clone());
    }
    history
}

fn overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Greedy matcher written out longhand: ranks by (score desc, index asc),
/// then for each detection scans the frame's ground truth for the best
/// still-unused box.
pub fn brute_match(dets: &[ScoredDetection], gt: &[(u64, BoundingBox)], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let (a, b) = (order[i], order[j]);
            let swap = dets[b].score > dets[a].score || (dets[b].score == dets[a].score && b < a);
            if swap {
                order.swap(i, j);
            }
        }
    }
    let mut used: HashSet<usize> = HashSet::new();
    let mut tp = vec![false; dets.len()];
    for &i in &order {
        let mut best = -1.0;
        let mut best_j = None;
        for (j, (f, g)) in gt.iter().enumerate() {
            if *f != dets[i].frame_id || used.contains(&j) {
                continue;
            }
            let o = overlap(&dets[i].bbox, g);
            if o > best {
                best = o;
                best_j = Some(j);
            }
        }
        if let Some(j) = best_j {
            if best >= thr {
                used.insert(j);
                tp[i] = true;
            }
        }
    }
    tp
}

/// Area under the interpolated PR curve, evaluated in O(n^2) from the
/// definition: sum over recall steps of the best precision at or beyond it.
pub fn brute_ap(ranked_tp: &[bool], n_gt: usize) -> f64 {
    let n = ranked_tp.len();
    let prec: Vec<f64> = (0..n)
        .map(|k| ranked_tp[..=k].iter().filter(|t| **t).count() as f64 / (k + 1) as f64)
        .collect();
    let rec: Vec<f64> = (0..n)
        .map(|k| ranked_tp[..=k].iter().filter(|t| **t).count() as f64 / n_gt as f64)
        .collect();
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for k in 0..n {
        if rec[k] > prev_r {
            let p = prec[k..].iter().cloned().fold(0.0, f64::max);
            area += (rec[k] - prev_r) * p;
            prev_r = rec[k];
        }
    }
    area
}

pub fn labels_to_bools(labels: &[MatchLabel]) -> Vec<bool> {
    labels.iter().map(|l| l.is_tp()).collect()
}
