//! Average precision with interpolated precision at fixed recall points.

use crate::geometry::Box3D;
use crate::heads::{iou, Detection, IouMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecallPoints {
    R11,
    R40,
}

impl RecallPoints {
    pub fn points(self) -> Vec<f64> {
        match self {
            RecallPoints::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            RecallPoints::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

/// Evaluation of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub class: usize,
    pub iou_thr: f64,
    /// Precision and recall after each detection of the descending-score sweep.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// `None` when the class has no ground truth.
    pub ap_r11: Option<f64>,
    pub ap_r40: Option<f64>,
}

/// One scene's detections and ground truth; `ignore[g]` marks boxes excluded from scoring.
/// Detections matching an ignored box count neither as true nor false positives.
#[derive(Debug, Clone, Copy)]
pub struct EvalScene<'a> {
    pub dets: &'a [Detection],
    pub gt: &'a [Box3D],
    pub ignore: Option<&'a [bool]>,
}

impl<'a> EvalScene<'a> {
    pub fn new(dets: &'a [Detection], gt: &'a [Box3D]) -> Self {
        Self { dets, gt, ignore: None }
    }
}

/// Per-detection outcome of greedy matching, in descending score order.
fn sweep(scenes: &[EvalScene], class: usize, iou_thr: f64, mode: IouMode) -> (Vec<bool>, usize) {
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    let mut n_gt = 0;
    for (s, sc) in scenes.iter().enumerate() {
        for (d, det) in sc.dets.iter().enumerate() {
            if det.bbox.label == class {
                order.push((det.bbox.score, s, d));
            }
        }
        n_gt += sc
            .gt
            .iter()
            .enumerate()
            .filter(|(g, b)| b.label == class && !sc.ignore.is_some_and(|m| m[*g]))
            .count();
    }
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gt.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for (_, s, d) in order {
        let sc = &scenes[s];
        let det = &sc.dets[d].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in sc.gt.iter().enumerate() {
            if b.label != class || used[s][g] {
                continue;
            }
            let o = iou(det, b, mode);
            if o >= iou_thr && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, _)) => {
                used[s][g] = true;
                if sc.ignore.is_some_and(|m| m[g]) {
                    continue;
                }
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    (tp, n_gt)
}

/// Mean of right-max interpolated precision at the recall points.
pub fn interpolated_ap(precision: &[f64], recall: &[f64], points: RecallPoints) -> f64 {
    let pts = points.points();
    let total: f64 = pts
        .iter()
        .map(|&r| {
            precision
                .iter()
                .zip(recall)
                .filter(|(_, &rc)| rc >= r - 1e-12)
                .map(|(&p, _)| p)
                .fold(0.0, f64::max)
        })
        .sum();
    total / pts.len() as f64
}

pub fn evaluate_class(scenes: &[EvalScene], class: usize, iou_thr: f64, mode: IouMode) -> ApResult {
    let (tp, n_gt) = sweep(scenes, class, iou_thr, mode);
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { hits as f64 / n_gt as f64 });
    }
    let (ap_r11, ap_r40) = if n_gt == 0 {
        (None, None)
    } else {
        (
            Some(interpolated_ap(&precision, &recall, RecallPoints::R11)),
            Some(interpolated_ap(&precision, &recall, RecallPoints::R40)),
        )
    };
    ApResult { class, iou_thr, precision, recall, ap_r11, ap_r40 }
}

/// One result per class in `0..classes`.
pub fn evaluate(scenes: &[EvalScene], classes: usize, iou_thr: f64, mode: IouMode) -> Vec<ApResult> {
    (0..classes).map(|c| evaluate_class(scenes, c, iou_thr, mode)).collect()
}

/// Single-scene AP for one class; `None` without ground truth.
pub fn average_precision(dets: &[Detection], gts: &[Box3D], class: usize, iou_thr: f64, mode: IouMode, points: RecallPoints) -> Option<f64> {
    let r = evaluate_class(&[EvalScene::new(dets, gts)], class, iou_thr, mode);
    match points {
        RecallPoints::R11 => r.ap_r11,
        RecallPoints::R40 => r.ap_r40,
    }
}
