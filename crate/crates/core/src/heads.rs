//! Detection head pieces: heatmap targets and peaks, votes, context aggregation, channel
//! attention, box decoding, rotated IoU and NMS.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use ndarray::{s, Array2, ArrayView2};

use crate::backbone::{dense_forward, group_pool_on_tape, mlp_on_tape, sigmoid, softplus, DenseLayer, LayerVars};
use crate::backbone::{SAStage, StageOutput};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{wrap_angle, Box3D};
use crate::grid::{Cell, GridSpec};
use crate::tape::{Tape, Var};

/// One `height x width` plane per class, indexed `[iy, ix]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub spec: GridSpec,
    pub planes: Vec<Array2<f64>>,
}

impl Heatmap {
    pub fn zeros(spec: GridSpec, classes: usize) -> Self {
        Self { spec, planes: vec![Array2::zeros((spec.height, spec.width)); classes] }
    }

    pub fn classes(&self) -> usize {
        self.planes.len()
    }

    pub fn get(&self, class: usize, c: Cell) -> f64 {
        self.planes[class][[c.1, c.0]]
    }
}

/// Gaussian radius in cells for a box footprint.
pub fn heatmap_sigma(b: &Box3D, spec: &GridSpec, div: f64) -> f64 {
    let cell = spec.cell[0].min(spec.cell[1]);
    (b.size[0].min(b.size[1]) / (div * cell)).max(1.0)
}

/// Splats `exp(-d^2 / 2 sigma^2)` around each box's center cell, keeping the cellwise max.
/// Boxes centered outside the grid are skipped.
pub fn heatmap_target(gt: &[Box3D], spec: &GridSpec, classes: usize, sigma_div: f64) -> Result<Heatmap> {
    let mut hm = Heatmap::zeros(*spec, classes);
    for b in gt {
        if b.label >= classes {
            return Err(Error::InvalidArgument(format!("box label {} exceeds {classes} classes", b.label)));
        }
        let Some((cx, cy)) = spec.world_to_cell([b.center[0], b.center[1]]) else { continue };
        let sigma = heatmap_sigma(b, spec, sigma_div);
        let r = (3.0 * sigma).ceil() as i64;
        let plane = &mut hm.planes[b.label];
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                if !spec.in_bounds(x, y) {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut plane[[y as usize, x as usize]];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Ok(hm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub class: usize,
    pub cell: Cell,
    pub position: [f64; 3],
    pub score: f64,
}

/// Top-`k` 3x3 local maxima over all classes, ties by lowest linear index then class.
/// Peak heights come from `anchor_z[class]`.
pub fn heatmap_peaks(hm: &Heatmap, k: usize, anchor_z: &[f64]) -> Vec<Peak> {
    let spec = hm.spec;
    let mut cand = Vec::new();
    for (class, plane) in hm.planes.iter().enumerate() {
        for iy in 0..spec.height {
            for ix in 0..spec.width {
                let v = plane[[iy, ix]];
                let mut is_max = true;
                'nb: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (x, y) = (ix as i64 + dx, iy as i64 + dy);
                        if (dx, dy) != (0, 0) && spec.in_bounds(x, y) && plane[[y as usize, x as usize]] > v {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    cand.push((v, spec.linear((ix, iy)), class));
                }
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cand.truncate(k);
    cand.into_iter()
        .map(|(score, lin, class)| {
            let cell = spec.unlinear(lin);
            let [x, y] = spec.cell_center(cell);
            let z = anchor_z.get(class).or(anchor_z.first()).copied().unwrap_or(0.0);
            Peak { class, cell, position: [x, y, z], score }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Vote,
    HeatmapPeak,
}

/// Proposal seeds: `origins` index stage points for votes and linear cells for peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteSet {
    pub origins: Vec<usize>,
    pub positions: Array2<f64>,
    pub sources: Vec<SeedSource>,
}

impl VoteSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        let r = self.positions.row(i);
        [r[0], r[1], r[2]]
    }

    /// Appends heatmap peaks as extra seeds, leaving existing votes untouched.
    pub fn supplement(&self, peaks: &[Peak], spec: &GridSpec) -> Self {
        let mut positions = Array2::zeros((self.len() + peaks.len(), 3));
        positions.slice_mut(s![..self.len(), ..]).assign(&self.positions);
        let mut origins = self.origins.clone();
        let mut sources = self.sources.clone();
        for (i, p) in peaks.iter().enumerate() {
            for c in 0..3 {
                positions[[self.len() + i, c]] = p.position[c];
            }
            origins.push(spec.linear(p.cell));
            sources.push(SeedSource::HeatmapPeak);
        }
        Self { origins, positions, sources }
    }
}

/// Moves each point by the offset predicted from its feature.
pub fn vote(points: ArrayView2<f64>, feats: ArrayView2<f64>, head: &[DenseLayer]) -> Result<VoteSet> {
    if points.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if points.nrows() != feats.nrows() || points.ncols() != 3 {
        return Err(shape_err("vote needs M x 3 points with one feature row each"));
    }
    let mut h = feats.to_owned();
    for l in head {
        h = dense_forward(l, &h)?;
    }
    if h.ncols() != 3 {
        return Err(shape_err("vote head must emit 3 offsets"));
    }
    Ok(VoteSet {
        origins: (0..points.nrows()).collect(),
        positions: &points + &h,
        sources: vec![SeedSource::Vote; points.nrows()],
    })
}

/// Set abstraction centered on the vote positions over `source`.
pub fn aggregate_context(votes: &VoteSet, source: &StageOutput, stage: &SAStage) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let c = tape.constant(votes.positions.clone());
    let f = tape.constant(source.feats.clone());
    let branches: Vec<Vec<LayerVars>> =
        stage.branches.iter().map(|b| b.iter().map(|l| LayerVars::constant(&mut tape, l)).collect()).collect();
    let agg = LayerVars::constant(&mut tape, &stage.agg);
    let out = group_pool_on_tape(&mut tape, c, &source.coords, f, &stage.radii, &stage.nquery, &branches, Some(&agg))?;
    Ok(tape.value(out).clone())
}

/// `x = [point, grid]`, `out = x * sigmoid(gate(x))` where `gate` ends in a linear layer.
pub fn channel_attention_on_tape(tape: &mut Tape, point: Var, grid: Var, gate: &[LayerVars]) -> Var {
    let x = tape.concat(&[point, grid]);
    let raw = mlp_on_tape(tape, x, gate);
    let g = tape.act(raw, crate::backbone::Activation::Sigmoid);
    tape.mul(x, g)
}

pub fn channel_attention(point: ArrayView2<f64>, grid: ArrayView2<f64>, gate: &[DenseLayer]) -> Result<Array2<f64>> {
    if point.nrows() != grid.nrows() {
        return Err(shape_err("point and grid features must share rows"));
    }
    let width = point.ncols() + grid.ncols();
    if gate.first().map(DenseLayer::in_dim) != Some(width) || gate.last().map(DenseLayer::out_dim) != Some(width) {
        return Err(shape_err(format!("gate must map {width} -> {width}")));
    }
    let mut tape = Tape::new();
    let p = tape.constant(point.to_owned());
    let g = tape.constant(grid.to_owned());
    let layers: Vec<LayerVars> = gate.iter().map(|l| LayerVars::constant(&mut tape, l)).collect();
    let out = channel_attention_on_tape(&mut tape, p, g, &layers);
    Ok(tape.value(out).clone())
}

/// A decoded box with per-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class_scores: Vec<f64>,
}

/// Width of the regression output: offset, size logits, bin logits and bin residuals.
pub fn reg_width(bins: usize) -> usize {
    6 + 2 * bins
}

pub fn bin_width(bins: usize) -> f64 {
    2.0 * PI / bins as f64
}

pub fn bin_center(i: usize, bins: usize) -> f64 {
    -PI + (i as f64 + 0.5) * bin_width(bins)
}

/// Bin index and residual normalised by half the bin width.
pub fn encode_angle(yaw: f64, bins: usize) -> (usize, f64) {
    let w = bin_width(bins);
    let y = wrap_angle(yaw);
    let i = (((y + PI) / w).floor() as usize).min(bins - 1);
    (i, (y - bin_center(i, bins)) / (w / 2.0))
}

pub fn decode_angle(bin: usize, residual: f64, bins: usize) -> f64 {
    wrap_angle(bin_center(bin, bins) + residual * bin_width(bins) / 2.0)
}

/// Turns regression rows `[dx dy dz, size logits, bin logits, residuals]` and class logits
/// into boxes around `seeds`.
pub fn decode_boxes(reg: ArrayView2<f64>, cls: ArrayView2<f64>, seeds: ArrayView2<f64>, bins: usize) -> Result<Vec<Detection>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("angle bins must be positive".into()));
    }
    if reg.ncols() != reg_width(bins) || reg.nrows() != seeds.nrows() || cls.nrows() != seeds.nrows() || cls.ncols() == 0 {
        return Err(shape_err(format!("decode expects {} regression columns and matching rows", reg_width(bins))));
    }
    let mut out = Vec::with_capacity(seeds.nrows());
    for i in 0..seeds.nrows() {
        let r = reg.row(i);
        let center = [seeds[[i, 0]] + r[0], seeds[[i, 1]] + r[1], seeds[[i, 2]] + r[2]];
        let size = [softplus(r[3]), softplus(r[4]), softplus(r[5])].map(|v| v.max(1e-6));
        let mut bin = 0;
        for b in 1..bins {
            if r[6 + b] > r[6 + bin] {
                bin = b;
            }
        }
        let yaw = decode_angle(bin, r[6 + bins + bin], bins);
        let class_scores: Vec<f64> = cls.row(i).iter().map(|&v| sigmoid(v)).collect();
        let (label, score) = class_scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        out.push(Detection { bbox: Box3D::new(center, size, yaw, label, score)?, class_scores });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouMode {
    Bev,
    ThreeD,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    if n < 3 {
        return 0.0;
    }
    (0..n).map(|i| p[i][0] * p[(i + 1) % n][1] - p[(i + 1) % n][0] * p[i][1]).sum::<f64>().abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` by the convex counter-clockwise `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners()))
}

pub fn iou(a: &Box3D, b: &Box3D, mode: IouMode) -> f64 {
    let inter = bev_intersection(a, b);
    let (aa, ab) = (a.size[0] * a.size[1], b.size[0] * b.size[1]);
    let v = match mode {
        IouMode::Bev => {
            let union = aa + ab - inter;
            if union <= 0.0 {
                return 0.0;
            }
            inter / union
        }
        IouMode::ThreeD => {
            let lo = (a.center[2] - a.size[2] / 2.0).max(b.center[2] - b.size[2] / 2.0);
            let hi = (a.center[2] + a.size[2] / 2.0).min(b.center[2] + b.size[2] / 2.0);
            let inter3 = inter * (hi - lo).max(0.0);
            let union = a.volume() + b.volume() - inter3;
            if union <= 0.0 {
                return 0.0;
            }
            inter3 / union
        }
    };
    v.clamp(0.0, 1.0)
}

/// Score filter then per-class greedy suppression by 3-D IoU; output sorted by score.
pub fn nms(dets: &[Detection], iou_thr: f64, score_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].bbox.score >= score_thr).collect();
    order.sort_by(|&a, &b| dets[b].bbox.score.total_cmp(&dets[a].bbox.score).then(a.cmp(&b)));
    let mut keep: Vec<&Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if keep.iter().all(|k| k.bbox.label != d.bbox.label || iou(&k.bbox, &d.bbox, IouMode::ThreeD) <= iou_thr) {
            keep.push(d);
        }
    }
    keep.into_iter().cloned().collect()
}

pub const DETECTION_HEADER: &str = "cx,cy,cz,l,w,h,yaw,label,score";

fn det_line(d: &Detection) -> String {
    let b = &d.bbox;
    format!(
        "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e}",
        b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw, b.label, b.score
    )
}

/// Detections grouped by scene, each group introduced by a `# scene <id>` line.
pub fn write_detections<W: Write>(groups: &[(usize, Vec<Detection>)], out: &mut W) -> Result<()> {
    writeln!(out, "{DETECTION_HEADER}")?;
    for (id, dets) in groups {
        writeln!(out, "# scene {id}")?;
        for d in dets {
            writeln!(out, "{}", det_line(d))?;
        }
    }
    Ok(())
}

/// Reads detection CSV; lines before any `# scene` marker belong to scene 0.
pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<(usize, Vec<Detection>)>> {
    let mut groups: Vec<(usize, Vec<Detection>)> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let ln = i + 1;
        let t = line.trim();
        if t.is_empty() || t == DETECTION_HEADER {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            let toks: Vec<&str> = rest.split_whitespace().collect();
            if toks.len() == 2 && toks[0] == "scene" {
                let id = toks[1].parse().map_err(|e| Error::Parse { line: ln, msg: format!("{e}") })?;
                groups.push((id, Vec::new()));
            }
            continue;
        }
        let toks: Vec<&str> = t.split(',').map(str::trim).collect();
        if toks.len() != 9 {
            return Err(Error::Parse { line: ln, msg: format!("expected 9 fields, found {}", toks.len()) });
        }
        let v = toks
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != 7)
            .map(|(_, s)| s.parse::<f64>().map_err(|e| Error::Parse { line: ln, msg: format!("{s}: {e}") }))
            .collect::<Result<Vec<_>>>()?;
        let label: usize = toks[7].parse().map_err(|e| Error::Parse { line: ln, msg: format!("{e}") })?;
        let bbox = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], label, v[7])
            .map_err(|e| Error::Parse { line: ln, msg: e.to_string() })?;
        if groups.is_empty() {
            groups.push((0, Vec::new()));
        }
        let mut class_scores = vec![0.0; label + 1];
        class_scores[label] = bbox.score;
        groups.last_mut().unwrap().1.push(Detection { bbox, class_scores });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Activation;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> GridSpec {
        GridSpec::new([0.0, 0.0, -2.0, 20.0, 20.0, 2.0], 20, 20).unwrap()
    }

    fn cube(c: [f64; 3], s: f64) -> Box3D {
        Box3D::gt(c, [s, s, s], 0.0, 0).unwrap()
    }

    fn det(b: Box3D, score: f64) -> Detection {
        Detection { bbox: Box3D { score, ..b }, class_scores: vec![score] }
    }

    #[test]
    fn heatmap_target_examples() {
        let g = small_grid();
        let b = Box3D::gt([5.5, 7.5, 0.0], [2.0, 2.0, 1.0], 0.0, 0).unwrap();
        let hm = heatmap_target(&[b], &g, 1, 3.0).unwrap();
        assert_eq!(hm.get(0, (5, 7)), 1.0);
        assert!((hm.get(0, (6, 7)) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((hm.get(0, (6, 7)) - 0.6065307).abs() < 1e-7);
        let b2 = Box3D::gt([6.5, 7.5, 0.0], [2.0, 2.0, 1.0], 0.0, 0).unwrap();
        let two = heatmap_target(&[b, b2], &g, 1, 3.0).unwrap();
        assert!(two.planes[0].iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(two.get(0, (6, 7)), 1.0);
        let out = Box3D::gt([-5.0, 7.5, 0.0], [2.0, 2.0, 1.0], 0.0, 0).unwrap();
        assert!(heatmap_target(&[out], &g, 1, 3.0).unwrap().planes[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn peak_examples() {
        let g = small_grid();
        let mut hm = Heatmap::zeros(g, 1);
        hm.planes[0][[3, 4]] = 0.7;
        assert_eq!(heatmap_peaks(&hm, 1, &[0.0])[0].cell, (4, 3));
        let mut flat = Heatmap::zeros(g, 1);
        flat.planes[0].fill(0.5);
        let p = heatmap_peaks(&flat, 3, &[-1.0]);
        assert_eq!(p.iter().map(|p| p.cell).collect::<Vec<_>>(), vec![(0, 0), (1, 0), (2, 0)]);
        assert_eq!(p[0].position, [0.5, 0.5, -1.0]);
        let mut two = Heatmap::zeros(g, 1);
        two.planes[0][[2, 2]] = 0.8;
        two.planes[0][[10, 12]] = 0.9;
        assert_eq!(heatmap_peaks(&two, 1, &[0.0])[0].cell, (12, 10));
        let mut blob = Heatmap::zeros(g, 1);
        blob.planes[0][[5, 5]] = 1.0;
        blob.planes[0][[5, 6]] = 0.9;
        let p = heatmap_peaks(&blob, 2, &[0.0]);
        assert_eq!(p[0].cell, (5, 5));
        assert_ne!(p[1].cell, (6, 5));
    }

    #[test]
    fn vote_examples() {
        let pts = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
        let f = array![[0.3, 0.1], [0.9, -0.2]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = vec![DenseLayer::init(2, 4, Activation::Relu, &mut rng), DenseLayer::init(4, 3, Activation::None, &mut rng)];
        head[1].weights.fill(0.0);
        head[1].bias.fill(0.0);
        assert_eq!(vote(pts.view(), f.view(), &head).unwrap().positions, pts);
        head[1] = DenseLayer::init(4, 3, Activation::None, &mut rng);
        let a = vote(pts.view(), f.view(), &head).unwrap();
        let moved = &pts + 10.0;
        let b = vote(moved.view(), f.view(), &head).unwrap();
        let da = &a.positions - &pts;
        let db = &b.positions - &moved;
        assert!(da.iter().zip(db.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn attention_examples() {
        let p = array![[1.0, -2.0], [0.5, 4.0]];
        let g = array![[3.0], [0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut gate = vec![DenseLayer::init(3, 2, Activation::Relu, &mut rng), DenseLayer::init(2, 3, Activation::None, &mut rng)];
        for l in &mut gate {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let out = channel_attention(p.view(), g.view(), &gate).unwrap();
        assert_eq!(out, array![[0.5, -1.0, 1.5], [0.25, 2.0, 0.0]]);
        assert_eq!(out.ncols(), 3);
    }

    #[test]
    fn decode_examples() {
        let bins = 12;
        let reg = Array2::zeros((2, reg_width(bins)));
        let cls = Array2::zeros((2, 3));
        let seeds = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let d = decode_boxes(reg.view(), cls.view(), seeds.view(), bins).unwrap();
        assert_eq!(d[0].bbox.center, [1.0, 2.0, 3.0]);
        assert!((d[0].bbox.yaw - bin_center(0, bins)).abs() < 1e-15);
        assert!((d[0].bbox.size[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((d[0].bbox.size[0] - 0.6931).abs() < 1e-4);
        assert!((bin_width(bins) - PI / 6.0).abs() < 1e-15);
        assert!(d[1].class_scores.iter().all(|&s| s > 0.0 && s < 1.0));
        assert_eq!(reg_width(12), 30);
    }

    #[test]
    fn angle_encoding_round_trips() {
        for k in 0..100 {
            let yaw = -PI + k as f64 * 0.0628;
            let (b, r) = encode_angle(yaw, 12);
            assert!(r.abs() <= 1.0 + 1e-9, "{r}");
            assert!((wrap_angle(decode_angle(b, r, 12) - yaw)).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_examples() {
        let a = cube([0.0; 3], 2.0);
        assert!((iou(&a, &a, IouMode::ThreeD) - 1.0).abs() < 1e-12);
        let b = cube([1.0, 0.0, 0.0], 2.0);
        assert!((iou(&a, &b, IouMode::ThreeD) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &cube([5.0, 0.0, 0.0], 2.0), IouMode::Bev), 0.0);
        let r = Box3D::gt([0.0; 3], [4.0, 2.0, 1.0], 0.3, 0).unwrap();
        let flipped = Box3D::gt([0.0; 3], [4.0, 2.0, 1.0], 0.3 + PI, 0).unwrap();
        assert!((iou(&r, &flipped, IouMode::Bev) - 1.0).abs() < 1e-12);
    }

    fn mc_bev(a: &Box3D, b: &Box3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let pts: Vec<[f64; 2]> = a.bev_corners().into_iter().chain(b.bev_corners()).collect();
        let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |acc, p| (acc.0.min(p[0]), acc.1.max(p[0])));
        let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |acc, p| (acc.0.min(p[1]), acc.1.max(p[1])));
        let inside = |bx: &Box3D, x: f64, y: f64| {
            let q = bx.to_local([x, y, bx.center[2]]);
            q[0].abs() <= bx.size[0] / 2.0 && q[1].abs() <= bx.size[1] / 2.0
        };
        let (mut i, mut u) = (0usize, 0usize);
        for _ in 0..n {
            let (x, y) = (rng.gen_range(x0..x1), rng.gen_range(y0..y1));
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            i += (ia && ib) as usize;
            u += (ia || ib) as usize;
        }
        i as f64 / u.max(1) as f64
    }

    #[test]
    fn bev_iou_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let a = Box3D::gt([0.0, 0.0, 0.0], [rng.gen_range(1.0..4.0), rng.gen_range(1.0..3.0), 1.0], rng.gen_range(-3.0..3.0), 0).unwrap();
            let b = Box3D::gt([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0], [rng.gen_range(1.0..4.0), rng.gen_range(1.0..3.0), 1.0], rng.gen_range(-3.0..3.0), 0).unwrap();
            let mc = mc_bev(&a, &b, 20_000, &mut rng);
            assert!((iou(&a, &b, IouMode::Bev) - mc).abs() < 0.03);
        }
    }

    #[test]
    fn nms_examples() {
        let a = cube([0.0; 3], 2.0);
        let kept = nms(&[det(a, 0.8), det(a, 0.9)], 0.1, 0.1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox.score, 0.9);
        assert!(nms(&[det(a, 0.05), det(a, 0.09)], 0.1, 0.1).is_empty());
        let far = cube([10.0, 0.0, 0.0], 2.0);
        let k = nms(&[det(a, 0.3), det(far, 0.6)], 0.1, 0.1);
        assert_eq!(k.iter().map(|d| d.bbox.score).collect::<Vec<_>>(), vec![0.6, 0.3]);
    }

    #[test]
    fn detections_round_trip() {
        let d = det(Box3D::new([1.0 / 3.0, 2.0, -0.5], [3.9, 1.6, 1.5], 0.25, 0, 0.123456789).unwrap(), 0.123456789);
        let groups = vec![(3, vec![d.clone(), d.clone()]), (4, vec![])];
        let mut buf = Vec::new();
        write_detections(&groups, &mut buf).unwrap();
        let back = read_detections(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, 3);
        assert_eq!(back[0].1[0].bbox, d.bbox);
        assert!(back[1].1.is_empty());
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-3.0..3.0f64, -3.0..3.0f64, -0.5..0.5f64, 0.5..4.0f64, 0.5..3.0f64, 0.5..2.0f64, -3.1..3.1f64, 0usize..2)
            .prop_map(|(x, y, z, l, w, h, yaw, c)| Box3D::new([x, y, z], [l, w, h], yaw, c, 0.5).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            for m in [IouMode::Bev, IouMode::ThreeD] {
                let (x, y) = (iou(&a, &b, m), iou(&b, &a, m));
                prop_assert!((0.0..=1.0).contains(&x));
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((iou(&a, &a, IouMode::ThreeD) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn nms_invariants(boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..15), thr in 0.0..0.8f64) {
            let dets: Vec<Detection> = boxes.iter().map(|(b, s)| det(*b, *s)).collect();
            let kept = nms(&dets, thr, 0.1);
            for w in kept.windows(2) {
                prop_assert!(w[0].bbox.score >= w[1].bbox.score);
            }
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    if kept[i].bbox.label == kept[j].bbox.label {
                        prop_assert!(iou(&kept[i].bbox, &kept[j].bbox, IouMode::ThreeD) <= thr);
                    }
                }
            }
            prop_assert_eq!(nms(&kept, thr, 0.1), kept);
        }

        #[test]
        fn removing_a_box_never_raises_the_heatmap(n in 1usize..5, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = small_grid();
            let gt: Vec<Box3D> = (0..n).map(|_| Box3D::gt([rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), 0.0], [rng.gen_range(1.0..5.0), rng.gen_range(1.0..3.0), 1.0], 0.0, rng.gen_range(0..2)).unwrap()).collect();
            let full = heatmap_target(&gt, &g, 2, 3.0).unwrap();
            let part = heatmap_target(&gt[1..], &g, 2, 3.0).unwrap();
            for c in 0..2 {
                prop_assert!(full.planes[c].iter().zip(part.planes[c].iter()).all(|(a, b)| b <= a));
                prop_assert!(full.planes[c].iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let (cx, cy) = g.world_to_cell([gt[0].center[0], gt[0].center[1]]).unwrap();
            prop_assert_eq!(full.get(gt[0].label, (cx, cy)), 1.0);
        }
    }
}
