//! Seeded synthetic LiDAR-like scenes, augmentations and ground-truth pasting.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_kv, parse_value, parse_values};
use crate::error::{Error, Result};
use crate::geometry::{box_contains, Box3D};
use crate::heads::bev_intersection;
use crate::scene::{label_points, SceneSample};

/// Size ranges for one object class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub scenes: usize,
    pub boxes: (usize, usize),
    pub classes: Vec<ClassSpec>,
    pub yaw: (f64, f64),
    pub points_per_box: (usize, usize),
    pub clutter: usize,
    /// Fraction of clutter lifted off the ground plane.
    pub clutter_elevated: f64,
    pub sparsify: f64,
    /// Probability that a box keeps points in one half of its frame only.
    pub occlusion: f64,
    /// Placement region `[x0, y0, x1, y1]`.
    pub area: [f64; 4],
    pub ground_z: f64,
    /// Maximum inward depth of surface hits.
    pub surface_depth: f64,
}

impl ScenarioSpec {
    /// Car-sized single-class scenes over the micro grid area.
    pub fn micro() -> Self {
        Self {
            seed: 0,
            scenes: 20,
            boxes: (1, 3),
            classes: vec![ClassSpec { size_min: [3.4, 1.5, 1.4], size_max: [4.4, 1.9, 1.7] }],
            yaw: (-FRAC_PI_4, FRAC_PI_4),
            points_per_box: (40, 80),
            clutter: 200,
            clutter_elevated: 0.2,
            sparsify: 0.0,
            occlusion: 0.5,
            area: [2.0, -10.0, 23.0, 10.0],
            ground_z: -1.6,
            surface_depth: 0.15,
        }
    }

    /// Many small sparse objects among heavy clutter.
    pub fn small_objects() -> Self {
        Self {
            seed: 0,
            scenes: 100,
            boxes: (4, 8),
            classes: vec![ClassSpec { size_min: [0.5, 0.5, 1.5], size_max: [0.9, 0.8, 1.9] }],
            yaw: (-PI, PI),
            points_per_box: (4, 12),
            clutter: 3000,
            clutter_elevated: 0.3,
            sparsify: 0.0,
            occlusion: 0.5,
            area: [2.0, -20.0, 40.0, 20.0],
            ground_z: -1.6,
            surface_depth: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.sparsify) || !frac(self.occlusion) || !frac(self.clutter_elevated) {
            return Err(Error::InvalidArgument("scenario fractions must lie in [0, 1]".into()));
        }
        if self.boxes.0 > self.boxes.1 || self.points_per_box.0 > self.points_per_box.1 {
            return Err(Error::InvalidArgument("count ranges need min <= max".into()));
        }
        if self.boxes.1 > 0 && self.classes.is_empty() {
            return Err(Error::InvalidArgument("boxes requested without any class".into()));
        }
        for c in &self.classes {
            if (0..3).any(|a| !(c.size_min[a] > 0.0) || c.size_min[a] > c.size_max[a]) {
                return Err(Error::InvalidArgument("class sizes need 0 < min <= max".into()));
            }
        }
        if !(self.area[2] > self.area[0] && self.area[3] > self.area[1]) || self.yaw.0 > self.yaw.1 {
            return Err(Error::InvalidArgument("area and yaw ranges need min < max".into()));
        }
        if !(self.surface_depth > 1e-3) {
            return Err(Error::InvalidArgument("surface depth must exceed 1e-3".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of [`ScenarioSpec::micro`].
    pub fn from_str_kv(text: &str) -> Result<Self> {
        let mut s = Self::micro();
        let mut classes_seen = false;
        for (line, key, v) in parse_kv(text)? {
            let pair = |v: &str| -> Result<(f64, f64)> {
                let xs: Vec<f64> = parse_values(line, &key, v)?;
                match xs[..] {
                    [a, b] => Ok((a, b)),
                    _ => Err(Error::Config { line, msg: format!("{key} expects two values") }),
                }
            };
            match key.as_str() {
                "seed" => s.seed = parse_value(line, &key, &v)?,
                "scenes" => s.scenes = parse_value(line, &key, &v)?,
                "boxes" => {
                    let (a, b) = pair(&v)?;
                    s.boxes = (a as usize, b as usize);
                }
                "yaw" => s.yaw = pair(&v)?,
                "points_per_box" => {
                    let (a, b) = pair(&v)?;
                    s.points_per_box = (a as usize, b as usize);
                }
                "clutter" => s.clutter = parse_value(line, &key, &v)?,
                "clutter_elevated" => s.clutter_elevated = parse_value(line, &key, &v)?,
                "sparsify" => s.sparsify = parse_value(line, &key, &v)?,
                "occlusion" => s.occlusion = parse_value(line, &key, &v)?,
                "ground_z" => s.ground_z = parse_value(line, &key, &v)?,
                "surface_depth" => s.surface_depth = parse_value(line, &key, &v)?,
                "area" => {
                    let a: Vec<f64> = parse_values(line, &key, &v)?;
                    s.area = a.try_into().map_err(|_| Error::Config { line, msg: "area expects 4 values".into() })?;
                }
                k if k.starts_with("class.") => {
                    if !classes_seen {
                        s.classes.clear();
                        classes_seen = true;
                    }
                    let rest = &k["class.".len()..];
                    let (idx, field) = rest
                        .split_once('.')
                        .ok_or_else(|| Error::Config { line, msg: format!("bad class key `{k}`") })?;
                    let idx: usize = parse_value(line, k, idx)?;
                    if idx > s.classes.len() {
                        return Err(Error::Config { line, msg: "class indices must be contiguous from 0".into() });
                    }
                    if idx == s.classes.len() {
                        s.classes.push(ClassSpec { size_min: [1.0; 3], size_max: [1.0; 3] });
                    }
                    let xs: Vec<f64> = parse_values(line, k, &v)?;
                    let arr: [f64; 3] =
                        xs.try_into().map_err(|_| Error::Config { line, msg: format!("{k} expects l,w,h") })?;
                    match field {
                        "size_min" => s.classes[idx].size_min = arr,
                        "size_max" => s.classes[idx].size_max = arr,
                        _ => return Err(Error::Config { line, msg: format!("unknown key `{k}`") }),
                    }
                }
                _ => return Err(Error::Config { line, msg: format!("unknown key `{key}`") }),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "seed = {}", self.seed);
        let _ = writeln!(o, "scenes = {}", self.scenes);
        let _ = writeln!(o, "boxes = {},{}", self.boxes.0, self.boxes.1);
        let _ = writeln!(o, "yaw = {},{}", self.yaw.0, self.yaw.1);
        let _ = writeln!(o, "points_per_box = {},{}", self.points_per_box.0, self.points_per_box.1);
        let _ = writeln!(o, "clutter = {}", self.clutter);
        let _ = writeln!(o, "clutter_elevated = {}", self.clutter_elevated);
        let _ = writeln!(o, "sparsify = {}", self.sparsify);
        let _ = writeln!(o, "occlusion = {}", self.occlusion);
        let _ = writeln!(o, "area = {},{},{},{}", self.area[0], self.area[1], self.area[2], self.area[3]);
        let _ = writeln!(o, "ground_z = {}", self.ground_z);
        let _ = writeln!(o, "surface_depth = {}", self.surface_depth);
        for (i, c) in self.classes.iter().enumerate() {
            let [a, b, d] = c.size_min;
            let _ = writeln!(o, "class.{i}.size_min = {a},{b},{d}");
            let [a, b, d] = c.size_max;
            let _ = writeln!(o, "class.{i}.size_max = {a},{b},{d}");
        }
        o
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Surface hit in the box frame on a side or top face, pushed inward by up to `depth`.
fn surface_point(rng: &mut ChaCha8Rng, size: [f64; 3], depth: f64) -> [f64; 3] {
    let [l, w, h] = size;
    let areas = [w * h, w * h, l * h, l * h, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    while face < 4 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let d = |rng: &mut ChaCha8Rng, half: f64| uniform(rng, 1e-3, depth.min(half * 0.9).max(2e-3));
    let mut q = [
        uniform(rng, -l / 2.0 * 0.98, l / 2.0 * 0.98),
        uniform(rng, -w / 2.0 * 0.98, w / 2.0 * 0.98),
        uniform(rng, -h / 2.0 * 0.98, h / 2.0 * 0.98),
    ];
    match face {
        0 => q[0] = l / 2.0 - d(rng, l / 2.0),
        1 => q[0] = -l / 2.0 + d(rng, l / 2.0),
        2 => q[1] = w / 2.0 - d(rng, w / 2.0),
        3 => q[1] = -w / 2.0 + d(rng, w / 2.0),
        _ => q[2] = h / 2.0 - d(rng, h / 2.0),
    }
    q
}

/// Places up to `n` boxes with disjoint footprints; fails after 1000 rejected draws.
fn place_boxes(spec: &ScenarioSpec, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<Box3D>> {
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    let mut tries = 0;
    while boxes.len() < n {
        tries += 1;
        if tries > 1000 {
            return Err(Error::Placement);
        }
        let label = rng.gen_range(0..spec.classes.len());
        let c = &spec.classes[label];
        let size = [0, 1, 2].map(|a| uniform(rng, c.size_min[a], c.size_max[a]));
        let yaw = uniform(rng, spec.yaw.0, spec.yaw.1);
        let r = (size[0] * size[0] + size[1] * size[1]).sqrt() / 2.0;
        let [x0, y0, x1, y1] = spec.area;
        if x1 - x0 <= 2.0 * r || y1 - y0 <= 2.0 * r {
            continue;
        }
        let center = [uniform(rng, x0 + r, x1 - r), uniform(rng, y0 + r, y1 - r), spec.ground_z + size[2] / 2.0];
        let b = Box3D::gt(center, size, yaw, label)?;
        if boxes.iter().all(|o| bev_intersection(o, &b) == 0.0) {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

/// Deterministic scene `index` of the scenario.
pub fn generate_scene(spec: &ScenarioSpec, index: usize) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index);
    let n_boxes = rng.gen_range(spec.boxes.0..=spec.boxes.1);
    let boxes = place_boxes(spec, &mut rng, n_boxes)?;
    let mut pts: Vec<[f64; 3]> = Vec::new();
    for b in &boxes {
        let n = rng.gen_range(spec.points_per_box.0..=spec.points_per_box.1);
        let occluded = rng.gen_bool(spec.occlusion);
        let (axis, sign) = (rng.gen_range(0..2usize), if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        let mut local = Vec::with_capacity(n);
        for _ in 0..n {
            let mut q = surface_point(&mut rng, b.size, spec.surface_depth);
            if occluded && q[axis] * sign < 0.0 {
                q[axis] = -q[axis];
            }
            local.push(q);
        }
        if spec.sparsify > 0.0 && local.len() > 1 {
            let keep = ((local.len() as f64) * (1.0 - spec.sparsify)).round().max(1.0) as usize;
            local.shuffle(&mut rng);
            local.truncate(keep);
        }
        pts.extend(local.into_iter().map(|q| b.to_world(q)));
    }
    let r_max = {
        let [x0, y0, x1, y1] = spec.area;
        [x0, x1].iter().flat_map(|x| [y0, y1].map(|y| (x * x + y * y).sqrt())).fold(0.0, f64::max)
    };
    let mut added = 0;
    let mut guard = 0usize;
    while added < spec.clutter {
        guard += 1;
        if guard > 1000 * (spec.clutter + 1) {
            return Err(Error::Placement);
        }
        let r = uniform(&mut rng, 0.0, r_max.ln()).exp();
        let t = rng.gen_range(-PI..PI);
        let (x, y) = (r * t.cos(), r * t.sin());
        let [x0, y0, x1, y1] = spec.area;
        if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
            continue;
        }
        let z = if rng.gen_bool(spec.clutter_elevated) {
            spec.ground_z + rng.gen_range(0.0..2.5)
        } else {
            spec.ground_z + rng.gen_range(-0.05..0.05)
        };
        let p = [x, y, z];
        if boxes.iter().any(|b| box_contains(b, p)) {
            continue;
        }
        pts.push(p);
        added += 1;
    }
    pts.shuffle(&mut rng);
    let coords = Array2::from_shape_fn((pts.len(), 3), |(r, c)| pts[r][c]);
    SceneSample::from_points(index, coords, boxes)
}

pub fn generate_scenes(spec: &ScenarioSpec) -> Result<Vec<SceneSample>> {
    (0..spec.scenes).map(|i| generate_scene(spec, i)).collect()
}

/// True when every interior point of box `b` lies in one half of its local x or y axis.
pub fn is_one_sided(scene: &SceneSample, b: usize) -> bool {
    let bx = &scene.gt[b];
    let qs: Vec<[f64; 3]> =
        (0..scene.len()).filter(|&i| scene.owners[i] == b as i64).map(|i| bx.to_local(scene.cloud.point(i))).collect();
    if qs.is_empty() {
        return true;
    }
    (0..2).any(|a| qs.iter().all(|q| q[a] >= 0.0) || qs.iter().all(|q| q[a] <= 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augment {
    Flip,
    Rotate(f64),
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Flip,
    Rotate,
    Scale,
}

fn map_scene(scene: &SceneSample, pf: impl Fn([f64; 3]) -> [f64; 3], bf: impl Fn(&Box3D) -> Box3D) -> Result<SceneSample> {
    let n = scene.len();
    let mut coords = Array2::zeros((n, 3));
    for i in 0..n {
        let p = pf(scene.cloud.point(i));
        for c in 0..3 {
            coords[[i, c]] = p[c];
        }
    }
    let gt: Vec<Box3D> = scene.gt.iter().map(bf).collect();
    let feats = coords.column(2).to_owned().insert_axis(ndarray::Axis(1));
    Ok(SceneSample {
        id: scene.id,
        cloud: crate::geometry::PointCloud::new(coords, feats)?,
        gt,
        labels: scene.labels.clone(),
        owners: scene.owners.clone(),
    })
}

pub fn apply_augment(scene: &SceneSample, a: Augment) -> Result<SceneSample> {
    match a {
        Augment::Flip => map_scene(scene, |[x, y, z]| [x, -y, z], |b| Box3D {
            center: [b.center[0], -b.center[1], b.center[2]],
            yaw: crate::geometry::wrap_angle(-b.yaw),
            ..*b
        }),
        Augment::Rotate(t) => {
            let (s, c) = t.sin_cos();
            let rot = move |[x, y, z]: [f64; 3]| [c * x - s * y, s * x + c * y, z];
            map_scene(scene, rot, |b| Box3D { center: rot(b.center), yaw: crate::geometry::wrap_angle(b.yaw + t), ..*b })
        }
        Augment::Scale(f) => {
            if !(f > 0.0) {
                return Err(Error::InvalidArgument("scale factor must be positive".into()));
            }
            map_scene(scene, |p| p.map(|v| v * f), |b| Box3D { center: b.center.map(|v| v * f), size: b.size.map(|v| v * f), ..*b })
        }
    }
}

/// Seeded augmentation: rotation in +-pi/4, scale in [0.95, 1.05].
pub fn augment(scene: &SceneSample, kind: AugmentKind, seed: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = match kind {
        AugmentKind::Flip => Augment::Flip,
        AugmentKind::Rotate => Augment::Rotate(rng.gen_range(-FRAC_PI_4..=FRAC_PI_4)),
        AugmentKind::Scale => Augment::Scale(rng.gen_range(0.95..=1.05)),
    };
    apply_augment(scene, a)
}

/// Flip with probability 1/2, then a random rotation and scaling.
pub fn random_augment(scene: &SceneSample, seed: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = scene.clone();
    if rng.gen_bool(0.5) {
        s = apply_augment(&s, Augment::Flip)?;
    }
    s = apply_augment(&s, Augment::Rotate(rng.gen_range(-FRAC_PI_4..=FRAC_PI_4)))?;
    apply_augment(&s, Augment::Scale(rng.gen_range(0.95..=1.05)))
}

/// Copies donor boxes with at least `min_points` interior points into free space, up to
/// `per_class[c]` per class. Points of the scene inside a pasted box are removed.
pub fn gt_paste(scene: &SceneSample, donors: &[SceneSample], per_class: &[usize], min_points: usize, seed: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cands: Vec<(usize, usize)> =
        donors.iter().enumerate().flat_map(|(d, s)| (0..s.gt.len()).map(move |b| (d, b))).collect();
    cands.shuffle(&mut rng);
    let mut gt = scene.gt.clone();
    let mut pasted: Vec<(Box3D, Vec<[f64; 3]>)> = Vec::new();
    let mut counts = vec![0usize; per_class.len()];
    for (d, b) in cands {
        let donor = &donors[d];
        let bx = donor.gt[b];
        if bx.label >= per_class.len() || counts[bx.label] >= per_class[bx.label] {
            continue;
        }
        let pts: Vec<[f64; 3]> =
            (0..donor.len()).filter(|&i| donor.owners[i] == b as i64).map(|i| donor.cloud.point(i)).collect();
        if pts.len() < min_points {
            continue;
        }
        if gt.iter().any(|o| crate::heads::iou(o, &bx, crate::heads::IouMode::Bev) >= 0.05 || bev_intersection(o, &bx) > 0.0) {
            continue;
        }
        counts[bx.label] += 1;
        gt.push(bx);
        pasted.push((bx, pts));
    }
    let mut pts: Vec<[f64; 3]> = (0..scene.len())
        .map(|i| scene.cloud.point(i))
        .filter(|&p| !pasted.iter().any(|(b, _)| box_contains(b, p)))
        .collect();
    for (_, p) in &pasted {
        pts.extend_from_slice(p);
    }
    let coords = Array2::from_shape_fn((pts.len(), 3), |(r, c)| pts[r][c]);
    let (labels, owners) = label_points(&coords, &gt);
    let feats = coords.column(2).to_owned().insert_axis(ndarray::Axis(1));
    Ok(SceneSample { id: scene.id, cloud: crate::geometry::PointCloud::new(coords, feats)?, gt, labels, owners })
}
