//! Loss terms with their analytic gradients.
//!
//! Each function returns the scalar and the gradient with respect to its prediction inputs so
//! the model can record it on the tape as a single node.

use std::io::Write;

use ndarray::{Array2, ArrayView2};

use crate::backbone::sigmoid;
use crate::config::LossWeights;
use crate::error::{shape_err, Result};
use crate::geometry::{box_contains, dist2, Box3D, CORNER_SIGNS};
use crate::heads::{bin_center, bin_width, encode_angle, reg_width, Heatmap};
use crate::sampling::{centrality_mask, ForegroundScores};
use crate::scene::SceneSample;

pub const EPS: f64 = 1e-7;

/// Binary cross-entropy with the probability clamped to `[EPS, 1 - EPS]` inside the logs.
pub fn bce(p: f64, t: f64) -> f64 {
    let pc = p.clamp(EPS, 1.0 - EPS);
    let mut v = 0.0;
    if t != 0.0 {
        v -= t * pc.ln();
    }
    if t != 1.0 {
        v -= (1.0 - t) * (1.0 - pc).ln();
    }
    v
}

/// `d bce / d p`; zero where the clamp is active.
pub fn bce_grad(p: f64, t: f64) -> f64 {
    if !(EPS..=1.0 - EPS).contains(&p) {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

/// `d bce / d t`.
fn bce_dtarget(p: f64) -> f64 {
    let pc = p.clamp(EPS, 1.0 - EPS);
    (1.0 - pc).ln() - pc.ln()
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Foreground terms are weighted by `masks[i]`, background terms by 1; mean over rows,
/// summed over class columns. `classes[i]` is the target column of row `i` or -1.
pub fn masked_bce(scores: ArrayView2<f64>, classes: &[i64], masks: &[f64]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = scores.dim();
    if classes.len() != n || masks.len() != n {
        return Err(shape_err("one label and mask per score row required"));
    }
    let mut grad = Array2::zeros((n, c));
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..c {
            let pos = classes[i] >= 0 && (c == 1 || classes[i] as usize == k);
            let (t, w) = if pos { (1.0, masks[i]) } else { (0.0, 1.0) };
            let p = scores[[i, k]];
            total += w * bce(p, t);
            grad[[i, k]] = w * bce_grad(p, t) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

fn scene_targets(scene: &SceneSample) -> (Vec<i64>, Vec<f64>) {
    let masks = (0..scene.len())
        .map(|i| match scene.owners[i] {
            o if o >= 0 => centrality_mask(&scene.gt[o as usize], scene.cloud.point(i)),
            _ => 0.0,
        })
        .collect();
    (scene.labels.clone(), masks)
}

/// Foreground-probability loss for one score per point (any class counts as foreground).
pub fn sampling_loss(scores: &ForegroundScores, scene: &SceneSample) -> Result<f64> {
    let s = Array2::from_shape_vec((scores.scores.len(), 1), scores.scores.clone()).map_err(|e| shape_err(e.to_string()))?;
    Ok(sampling_loss_grad(s.view(), scene)?.0)
}

/// Per-class version; a single column is treated as class-agnostic foreground.
pub fn sampling_loss_grad(scores: ArrayView2<f64>, scene: &SceneSample) -> Result<(f64, Array2<f64>)> {
    if scores.nrows() != scene.len() {
        return Err(shape_err("one score row per scene point required"));
    }
    let (classes, masks) = scene_targets(scene);
    masked_bce(scores, &classes, &masks)
}

/// Mean summed smooth-L1 between foreground votes and their box centers; 0 without any.
pub fn vote_loss(positions: ArrayView2<f64>, owners: &[i64], gt: &[Box3D]) -> Result<(f64, Array2<f64>)> {
    if owners.len() != positions.nrows() || positions.ncols() != 3 {
        return Err(shape_err("vote loss needs M x 3 positions and M owners"));
    }
    let mut grad = Array2::zeros(positions.dim());
    let fg: Vec<usize> = (0..owners.len()).filter(|&i| owners[i] >= 0).collect();
    if fg.is_empty() {
        return Ok((0.0, grad));
    }
    let n = fg.len() as f64;
    let mut total = 0.0;
    for &i in &fg {
        let c = gt[owners[i] as usize].center;
        for a in 0..3 {
            let e = positions[[i, a]] - c[a];
            total += smooth_l1(e);
            grad[[i, a]] = smooth_l1_grad(e) / n;
        }
    }
    Ok((total / n, grad))
}

/// Box containing each seed; the nearest center wins when several do.
pub fn assign_seeds(positions: ArrayView2<f64>, gt: &[Box3D]) -> Vec<Option<usize>> {
    positions
        .rows()
        .into_iter()
        .map(|r| {
            let p = [r[0], r[1], r[2]];
            gt.iter()
                .enumerate()
                .filter(|(_, b)| box_contains(b, p))
                .min_by(|a, b| dist2(a.1.center, p).total_cmp(&dist2(b.1.center, p)))
                .map(|(i, _)| i)
        })
        .collect()
}

/// Centrality and its gradient with respect to the point (zero gradient outside or on faces).
pub fn centrality_with_grad(b: &Box3D, p: [f64; 3]) -> (f64, [f64; 3]) {
    let m = centrality_mask(b, p);
    if m <= 0.0 {
        return (0.0, [0.0; 3]);
    }
    let q = b.to_local(p);
    let mut dq = [0.0; 3];
    for a in 0..3 {
        let h = b.size[a] / 2.0;
        let (r, dr) = if q[a] >= 0.0 {
            ((h - q[a]) / (h + q[a]), -2.0 * h / (h + q[a]).powi(2))
        } else {
            ((h + q[a]) / (h - q[a]), 2.0 * h / (h - q[a]).powi(2))
        };
        dq[a] = m / (3.0 * r) * dr;
    }
    let (s, c) = b.yaw.sin_cos();
    (m, [c * dq[0] - s * dq[1], s * dq[0] + c * dq[1], dq[2]])
}

/// A loss value with gradients for the prediction matrix and the seed positions.
#[derive(Debug, Clone)]
pub struct Part {
    pub value: f64,
    pub d_pred: Array2<f64>,
    pub d_seed: Array2<f64>,
}

impl Part {
    fn zero(pred: (usize, usize), seeds: usize) -> Self {
        Self { value: 0.0, d_pred: Array2::zeros(pred), d_seed: Array2::zeros((seeds, 3)) }
    }
}

/// Per-class BCE averaged over proposals. Positive targets are the centrality of the seed in
/// its box when `soft`, otherwise 1.
pub fn cls_loss(probs: ArrayView2<f64>, seeds: ArrayView2<f64>, assign: &[Option<usize>], gt: &[Box3D], soft: bool) -> Result<Part> {
    let (m, c) = probs.dim();
    if seeds.nrows() != m || assign.len() != m {
        return Err(shape_err("cls loss needs one seed and assignment per proposal"));
    }
    let mut part = Part::zero((m, c), m);
    if m == 0 {
        return Ok(part);
    }
    let n = m as f64;
    for i in 0..m {
        let (label, target, dt) = match assign[i] {
            Some(g) if soft => {
                let (t, d) = centrality_with_grad(&gt[g], [seeds[[i, 0]], seeds[[i, 1]], seeds[[i, 2]]]);
                (Some(gt[g].label), t, d)
            }
            Some(g) => (Some(gt[g].label), 1.0, [0.0; 3]),
            None => (None, 0.0, [0.0; 3]),
        };
        for k in 0..c {
            let p = probs[[i, k]];
            let t = if label == Some(k) { target } else { 0.0 };
            part.value += bce(p, t);
            part.d_pred[[i, k]] = bce_grad(p, t) / n;
            if label == Some(k) {
                let g = bce_dtarget(p) / n;
                for a in 0..3 {
                    part.d_seed[[i, a]] += g * dt[a];
                }
            }
        }
    }
    part.value /= n;
    Ok(part)
}

/// Regression terms of the box head.
#[derive(Debug, Clone)]
pub struct BoxLosses {
    pub loc: Part,
    pub size: Part,
    pub angle_bin: Part,
    pub angle_res: Part,
    pub corner: Part,
    /// Predicted bin and heading-flip choice per assigned proposal.
    pub choices: Vec<(usize, bool)>,
}

fn corner_terms(center: [f64; 3], size: [f64; 3], yaw: f64, target: &[[f64; 3]; 8]) -> (f64, [f64; 3], [f64; 3], f64) {
    let (s, c) = yaw.sin_cos();
    let (mut v, mut dc, mut ds, mut dy) = (0.0, [0.0; 3], [0.0; 3], 0.0);
    for (k, sg) in CORNER_SIGNS.iter().enumerate() {
        let a = sg[0] * size[0] / 2.0;
        let b = sg[1] * size[1] / 2.0;
        let z = sg[2] * size[2] / 2.0;
        let p = [center[0] + c * a - s * b, center[1] + s * a + c * b, center[2] + z];
        let e = [p[0] - target[k][0], p[1] - target[k][1], p[2] - target[k][2]];
        let g = e.map(|x| x.signum() * (x != 0.0) as u8 as f64 / 8.0);
        v += e.iter().map(|x| x.abs()).sum::<f64>() / 8.0;
        for ax in 0..3 {
            dc[ax] += g[ax];
        }
        ds[0] += g[0] * c * sg[0] / 2.0 + g[1] * s * sg[0] / 2.0;
        ds[1] += -g[0] * s * sg[1] / 2.0 + g[1] * c * sg[1] / 2.0;
        ds[2] += g[2] * sg[2] / 2.0;
        dy += g[0] * (-s * a - c * b) + g[1] * (c * a - s * b);
    }
    (v, dc, ds, dy)
}

/// Location, size, angle-bin, angle-residual and corner losses averaged over assigned
/// proposals. `reg` rows use the layout of [`crate::heads::decode_boxes`].
pub fn box_losses(reg: ArrayView2<f64>, seeds: ArrayView2<f64>, assign: &[Option<usize>], gt: &[Box3D], bins: usize) -> Result<BoxLosses> {
    let m = reg.nrows();
    if reg.ncols() != reg_width(bins) || seeds.nrows() != m || assign.len() != m {
        return Err(shape_err("box losses need matching regression rows, seeds and assignments"));
    }
    let z = || Part::zero(reg.dim(), m);
    let mut out = BoxLosses { loc: z(), size: z(), angle_bin: z(), angle_res: z(), corner: z(), choices: vec![] };
    let fg: Vec<(usize, usize)> = assign.iter().enumerate().filter_map(|(i, a)| a.map(|g| (i, g))).collect();
    if fg.is_empty() {
        return Ok(out);
    }
    let n = fg.len() as f64;
    let w = bin_width(bins);
    for &(i, g) in &fg {
        let b = &gt[g];
        let r = reg.row(i);
        let center = [seeds[[i, 0]] + r[0], seeds[[i, 1]] + r[1], seeds[[i, 2]] + r[2]];
        for a in 0..3 {
            let e = center[a] - b.center[a];
            out.loc.value += smooth_l1(e);
            out.loc.d_pred[[i, a]] = smooth_l1_grad(e) / n;
            out.loc.d_seed[[i, a]] = smooth_l1_grad(e) / n;
        }
        let mut size = [0.0; 3];
        for a in 0..3 {
            let logit = r[3 + a];
            size[a] = crate::backbone::softplus(logit);
            let e = size[a] - b.size[a];
            out.size.value += smooth_l1(e);
            out.size.d_pred[[i, 3 + a]] = smooth_l1_grad(e) * sigmoid(logit) / n;
        }
        let (tb, tr) = encode_angle(b.yaw, bins);
        let logits = r.slice(ndarray::s![6..6 + bins]);
        let mx = logits.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let ez: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let zsum: f64 = ez.iter().sum();
        out.angle_bin.value += -(ez[tb] / zsum).ln();
        for k in 0..bins {
            out.angle_bin.d_pred[[i, 6 + k]] = (ez[k] / zsum - (k == tb) as u8 as f64) / n;
        }
        let e = r[6 + bins + tb] - tr;
        out.angle_res.value += smooth_l1(e);
        out.angle_res.d_pred[[i, 6 + bins + tb]] = smooth_l1_grad(e) / n;

        let mut pb = 0;
        for k in 1..bins {
            if r[6 + k] > r[6 + pb] {
                pb = k;
            }
        }
        let yaw = bin_center(pb, bins) + r[6 + bins + pb] * w / 2.0;
        let t1 = b.corners();
        let t2 = crate::geometry::box_corners(b.center, b.size, b.yaw + std::f64::consts::PI);
        let a1 = corner_terms(center, size, yaw, &t1);
        let a2 = corner_terms(center, size, yaw, &t2);
        let flip = a2.0 < a1.0;
        out.choices.push((pb, flip));
        let (v, dc, ds, dy) = if flip { a2 } else { a1 };
        out.corner.value += v;
        for a in 0..3 {
            out.corner.d_pred[[i, a]] = dc[a] / n;
            out.corner.d_seed[[i, a]] = dc[a] / n;
            out.corner.d_pred[[i, 3 + a]] = ds[a] * sigmoid(r[3 + a]) / n;
        }
        out.corner.d_pred[[i, 6 + bins + pb]] = dy * w / 2.0 / n;
    }
    for p in [&mut out.loc, &mut out.size, &mut out.angle_bin, &mut out.angle_res, &mut out.corner] {
        p.value /= n;
    }
    Ok(out)
}

/// Corner distance between two boxes, minimised over the target's yaw and yaw + pi.
pub fn corner_distance(pred: &Box3D, target: &Box3D) -> f64 {
    let t2 = crate::geometry::box_corners(target.center, target.size, target.yaw + std::f64::consts::PI);
    let a = corner_terms(pred.center, pred.size, pred.yaw, &target.corners()).0;
    let b = corner_terms(pred.center, pred.size, pred.yaw, &t2).0;
    a.min(b)
}

/// Penalty-reduced focal loss (alpha 2, beta 4) over dense planes, divided by the number of
/// target cells equal to 1 (at least one).
pub fn heatmap_loss(pred: &Heatmap, target: &Heatmap) -> Result<f64> {
    let planes: Vec<ArrayView2<f64>> = pred.planes.iter().map(|p| p.view()).collect();
    Ok(heatmap_loss_grad(&planes, target)?.0)
}

pub fn heatmap_loss_grad(pred: &[ArrayView2<f64>], target: &Heatmap) -> Result<(f64, Vec<Array2<f64>>)> {
    if pred.len() != target.planes.len() || pred.iter().zip(&target.planes).any(|(p, t)| p.dim() != t.dim()) {
        return Err(shape_err("heatmap prediction and target shapes differ"));
    }
    let peaks = target.planes.iter().map(|t| t.iter().filter(|&&v| v == 1.0).count()).sum::<usize>().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(&target.planes) {
        let mut g = Array2::zeros(p.dim());
        for ((idx, &pv), &tv) in p.indexed_iter().zip(t.iter()) {
            let (v, d) = focal_term(pv, tv);
            total += v;
            g[idx] = d / peaks;
        }
        grads.push(g);
    }
    Ok((total / peaks, grads))
}

/// Focal term for one cell and its derivative in `p`.
pub fn focal_term(p: f64, t: f64) -> (f64, f64) {
    if t == 1.0 {
        let q = 1.0 - p;
        if q == 0.0 {
            return (0.0, 0.0);
        }
        let pc = p.max(EPS);
        let d = if p < EPS { 0.0 } else { 2.0 * q * pc.ln() - q * q / p };
        (-q * q * pc.ln(), d)
    } else {
        if p == 0.0 {
            return (0.0, 0.0);
        }
        let wt = (1.0 - t).powi(4);
        let qc = (1.0 - p).max(EPS);
        let d = if 1.0 - p < EPS { 0.0 } else { -wt * (2.0 * p * qc.ln() - p * p / (1.0 - p)) };
        (-wt * p * p * qc.ln(), d)
    }
}

/// `lambda * sum theta^2`.
pub fn l2_penalty<'a>(lambda: f64, params: impl IntoIterator<Item = &'a Array2<f64>>) -> f64 {
    lambda * params.into_iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
}

/// Named loss parts and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub sample: f64,
    pub vote: f64,
    pub cls: f64,
    pub loc: f64,
    pub size: f64,
    pub angle_bin: f64,
    pub angle_res: f64,
    pub corner: f64,
    pub heatmap: f64,
    pub l2: f64,
    pub total: f64,
}

pub const PART_NAMES: [&str; 10] =
    ["sample", "vote", "cls", "loc", "size", "angle_bin", "angle_res", "corner", "heatmap", "l2"];

impl LossBreakdown {
    pub fn parts(&self) -> [f64; 10] {
        [
            self.sample,
            self.vote,
            self.cls,
            self.loc,
            self.size,
            self.angle_bin,
            self.angle_res,
            self.corner,
            self.heatmap,
            self.l2,
        ]
    }

    pub fn with_total(mut self, w: &LossWeights) -> Self {
        self.total = total_loss(&self, w);
        self
    }
}

pub fn total_loss(parts: &LossBreakdown, w: &LossWeights) -> f64 {
    parts.parts().iter().zip(PART_NAMES).map(|(v, n)| w.weight(n) * v).sum()
}

pub const LOG_HEADER: &str = "step,sample,vote,cls,loc,size,angle_bin,angle_res,corner,heatmap,l2,total";

pub fn write_log_row<W: Write>(out: &mut W, step: usize, b: &LossBreakdown) -> Result<()> {
    let vals: Vec<String> = b.parts().iter().chain([b.total].iter()).map(|v| format!("{v}")).collect();
    writeln!(out, "{step},{}", vals.join(","))?;
    Ok(())
}
