//! Detection metrics and feature export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Dataset, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::losses::Domain;
use crate::nn::{self, Detection, ForwardOptions, ModelParams, NetConfig};
use crate::tensor::Tensor;

pub const CONF_FLOOR: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
pub const MATCH_IOU: f64 = 0.5;

/// Intersection over union of two `(cx, cy, w, h)` boxes; 0 when either has
/// no area.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |b: [f64; 4]| b[2].max(0.0) * b[3].max(0.0);
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let ix = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
    let iy = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
    let inter = ix * iy;
    inter / (aa + ab - inter)
}

/// Box from corner coordinates.
pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> [f64; 4] {
    [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
}

fn rank(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.cell.cmp(&b.cell))
        .then(a.class.cmp(&b.class))
}

/// Greedy per-class suppression in descending confidence; ties go to the
/// lower cell index, then the lower class id.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| k.class != d.class || iou(k.bbox, d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// A scored box of a single class on image `image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub image: usize,
    pub confidence: f64,
    pub bbox: [f64; 4],
}

/// Greedy matching in the given order: true positives flagged.
fn match_greedy(order: &[Scored], gt: &[(usize, [f64; 4])], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gt.len()];
    order
        .iter()
        .map(|d| {
            let best = gt
                .iter()
                .enumerate()
                .filter(|(j, g)| !used[*j] && g.0 == d.image)
                .map(|(j, g)| (j, iou(d.bbox, g.1)))
                .filter(|&(_, v)| v >= thr)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn sorted_by_confidence(dets: &[Scored]) -> Vec<Scored> {
    let mut v = dets.to_vec();
    v.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.image.cmp(&b.image)));
    v
}

/// Area under the precision-recall curve with a monotone precision
/// envelope (all-point interpolation). Detections with equal confidence
/// share one operating point, so the result does not depend on their order.
pub fn average_precision(dets: &[Scored], gt: &[(usize, [f64; 4])], iou_threshold: f64) -> f64 {
    if gt.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let order = sorted_by_confidence(dets);
    let tp = match_greedy(&order, gt, iou_threshold);
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        // tied confidences form one operating point
        if order.get(k + 1).is_some_and(|n| n.confidence == order[k].confidence) {
            continue;
        }
        recall.push(hits as f64 / gt.len() as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

/// Reference AP: for every confidence threshold, recomputes matches among
/// the detections at or above it, then averages the best precision reachable
/// at each of the `n_gt` recall levels.
pub fn average_precision_bruteforce(dets: &[Scored], gt: &[(usize, [f64; 4])], iou_threshold: f64) -> f64 {
    if gt.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points = Vec::new();
    for t in dets.iter().map(|d| d.confidence) {
        let above: Vec<Scored> = dets.iter().copied().filter(|d| d.confidence >= t).collect();
        let order = sorted_by_confidence(&above);
        let hits = match_greedy(&order, gt, iou_threshold).iter().filter(|&&b| b).count();
        points.push((hits, hits as f64 / above.len() as f64));
    }
    (1..=gt.len())
        .map(|level| {
            points
                .iter()
                .filter(|(hits, _)| *hits >= level)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / gt.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_class: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, Counts>,
    pub images: usize,
    pub zero_context: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Post-processed detections for every image of `set`.
pub fn detect(params: &ModelParams<f32>, net: &NetConfig, set: &Dataset, zero_context: bool) -> Result<Vec<Vec<Detection>>> {
    const BATCH: usize = 16;
    let opts = ForwardOptions::<f32> {
        local: false,
        global: false,
        zero_context,
        train: false,
        ..ForwardOptions::default()
    };
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.samples.chunks(BATCH) {
        let per = chunk[0].image.numel();
        let mut data = Vec::with_capacity(per * chunk.len());
        for s in chunk {
            data.extend_from_slice(s.image.data());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].image.shape());
        let fwd = nn::model_forward(params, net, &Tensor::new(&shape, data)?, &opts)?;
        let head = fwd.detections.expect("detection head requested");
        for i in 0..chunk.len() {
            let kept: Vec<Detection> = nn::decode(&head, i, net.num_classes)
                .into_iter()
                .filter(|d| d.confidence >= CONF_FLOOR)
                .collect();
            out.push(nms(&kept, NMS_IOU));
        }
    }
    Ok(out)
}

/// Per-class AP and mAP of the model on a labelled set.
pub fn evaluate(params: &ModelParams<f32>, net: &NetConfig, set: &Dataset, zero_context: bool) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    for s in &set.samples {
        let a = s
            .annotations
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sample {} has no labels to evaluate against", s.id)))?;
        if let Some(k) = a.classes.iter().find(|&&k| k >= net.num_classes) {
            return Err(Error::Contract(format!(
                "dataset class id {k} but the model has {} classes",
                net.num_classes
            )));
        }
    }
    let dets = detect(params, net, set, zero_context)?;
    Ok(report_from(&dets, set, net.num_classes, zero_context))
}

/// Scores precomputed detections against the labels of `set`.
pub fn report_from(dets: &[Vec<Detection>], set: &Dataset, num_classes: usize, zero_context: bool) -> EvalReport {
    let mut per_class = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut sum = 0.0;
    for k in 0..num_classes {
        let scored: Vec<Scored> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| {
                ds.iter()
                    .filter(|d| d.class == k)
                    .map(move |d| Scored { image: i, confidence: d.confidence, bbox: d.bbox })
            })
            .collect();
        let gt: Vec<(usize, [f64; 4])> = set
            .samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                let a = s.annotations.as_ref().expect("checked by caller");
                a.boxes
                    .iter()
                    .zip(&a.classes)
                    .filter(|(_, &c)| c == k)
                    .map(move |(b, _)| (i, *b))
                    .collect::<Vec<_>>()
            })
            .collect();
        let ap = average_precision(&scored, &gt, MATCH_IOU);
        let tp = match_greedy(&sorted_by_confidence(&scored), &gt, MATCH_IOU).iter().filter(|&&b| b).count();
        let name = CLASS_NAMES.get(k).map_or_else(|| format!("class{k}"), |s| s.to_string());
        counts.insert(name.clone(), Counts { tp, fp: scored.len() - tp, fn_: gt.len() - tp, gt: gt.len() });
        per_class.insert(name, ap);
        sum += ap;
    }
    EvalReport {
        map: sum / num_classes as f64,
        per_class,
        counts,
        images: set.len(),
        zero_context,
    }
}

/// Leading principal directions of row-major `points` (n × d), by power
/// iteration with deflation from a seeded start.
pub fn pca(points: &[Vec<f64>], components: usize, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = points.len();
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (p[i] - mean[i]) * (p[j] - mean[j]) / n as f64;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..components {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..1000 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
            for b in &basis {
                let dot: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                // no variance left: any unit vector orthogonal to the basis
                w = (0..d).map(|i| if i == basis.len() { 1.0 } else { 0.0 }).collect();
                for b in &basis {
                    let dot: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                    w.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
                let nn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                w.iter_mut().for_each(|x| *x /= nn);
                v = w;
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            if delta < 1e-13 {
                break;
            }
        }
        // sign convention: largest-magnitude entry positive
        let (imax, _) = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, &x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
        if v[imax] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        basis.push(v);
    }
    (mean, basis)
}

/// One projected point of the feature export.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub domain: Domain,
    pub id: usize,
}

/// Global-average-pooled backbone features for each image.
pub fn pooled_features(params: &ModelParams<f32>, set: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    for s in &set.samples {
        let mut shape = vec![1];
        shape.extend_from_slice(s.image.shape());
        let (_, f) = nn::forward_features(params, &Tensor::new(&shape, s.image.to_vec())?)?;
        out.push(f.global_avg_pool()?.to_f64_vec());
    }
    Ok(out)
}

/// Projects pooled features of both sets onto two principal components
/// fitted on their union and writes `x,y,domain,id` rows.
pub fn export_features(
    params: &ModelParams<f32>,
    source: &Dataset,
    target: &Dataset,
    path: &Path,
) -> Result<(Vec<ProjectedPoint>, Vec<Vec<f64>>)> {
    let total = source.len() + target.len();
    if total < 3 {
        return Err(Error::Contract(format!("feature export needs at least 3 samples, got {total}")));
    }
    let mut feats = pooled_features(params, source)?;
    feats.extend(pooled_features(params, target)?);
    let (mean, basis) = pca(&feats, 2, 0);
    let tags = source
        .samples
        .iter()
        .map(|s| (Domain::Source, s.id))
        .chain(target.samples.iter().map(|s| (Domain::Target, s.id)));
    let mut csv = String::from("x,y,domain,id\n");
    let mut points = Vec::with_capacity(total);
    for (f, (domain, id)) in feats.iter().zip(tags) {
        let proj = |b: &Vec<f64>| f.iter().zip(&mean).zip(b).map(|((x, m), v)| (x - m) * v).sum::<f64>();
        let p = ProjectedPoint { x: proj(&basis[0]), y: proj(&basis[1]), domain, id };
        let _ = writeln!(csv, "{},{},{},{}", p.x, p.y, p.domain, p.id);
        points.push(p);
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    Ok((points, basis))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(conf: f64, cell: usize, class: usize, bbox: [f64; 4]) -> Detection {
        Detection { bbox, class, confidence: conf, cell }
    }

    fn s(image: usize, confidence: f64, bbox: [f64; 4]) -> Scored {
        Scored { image, confidence, bbox }
    }

    #[test]
    fn iou_examples() {
        let a = from_corners(0.0, 0.0, 2.0, 2.0);
        let b = from_corners(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(a, a), 1.0);
        assert!((iou(a, b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(a, from_corners(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(a, [1.0, 1.0, 0.0, 1.0]), 0.0);
    }

    #[test]
    fn nms_examples() {
        let a = from_corners(0.0, 0.0, 2.0, 2.0);
        let one = vec![det(0.9, 0, 0, a)];
        assert_eq!(nms(&one, 0.5), one);
        let dup = vec![det(0.8, 1, 0, a), det(0.9, 2, 0, a)];
        assert_eq!(nms(&dup, 0.5), vec![det(0.9, 2, 0, a)]);
        let b = from_corners(1.0, 1.0, 3.0, 3.0);
        assert_eq!(nms(&[det(0.9, 0, 0, a), det(0.8, 1, 0, b)], 0.5).len(), 2);
        // equal confidence: lower cell wins
        assert_eq!(nms(&[det(0.5, 7, 0, a), det(0.5, 3, 0, a)], 0.5), vec![det(0.5, 3, 0, a)]);
        // other classes never suppress
        assert_eq!(nms(&[det(0.9, 0, 0, a), det(0.8, 0, 1, a)], 0.5).len(), 2);
    }

    #[test]
    fn ap_examples() {
        let g = [0.5, 0.5, 0.2, 0.2];
        let far = [0.1, 0.1, 0.05, 0.05];
        assert_eq!(average_precision(&[s(0, 0.9, g)], &[(0, g)], 0.5), 1.0);
        assert_eq!(average_precision(&[s(0, 0.9, far)], &[(0, g)], 0.5), 0.0);
        assert_eq!(average_precision(&[s(0, 0.9, g), s(0, 0.5, far)], &[(0, g)], 0.5), 1.0);
        let g2 = [0.2, 0.2, 0.2, 0.2];
        assert_eq!(average_precision(&[s(0, 0.9, far), s(0, 0.5, g)], &[(0, g), (0, g2)], 0.5), 0.25);
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        assert_eq!(average_precision(&[s(0, 0.9, g)], &[], 0.5), 0.0);
        for (d, gt) in [
            (vec![s(0, 0.9, g), s(0, 0.5, far)], vec![(0, g)]),
            (vec![s(0, 0.9, far), s(0, 0.5, g)], vec![(0, g), (0, g2)]),
        ] {
            assert_eq!(average_precision_bruteforce(&d, &gt, 0.5), average_precision(&d, &gt, 0.5));
        }
    }

    #[test]
    fn pca_components_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|j| rng.random_range(-1.0..1.0) * if j == 5 { 10.0 } else { 1.0 }).collect()).collect();
        let (_, b) = pca(&pts, 2, 0);
        let dot = |a: &Vec<f64>, c: &Vec<f64>| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&b[0], &b[0]) - 1.0).abs() < 1e-9);
        assert!((dot(&b[1], &b[1]) - 1.0).abs() < 1e-9);
        assert!(dot(&b[0], &b[1]).abs() < 1e-9);
        // the dominant axis is the last coordinate (largest spread)
        assert!(b[0][5].abs() > 0.9);
    }
}
