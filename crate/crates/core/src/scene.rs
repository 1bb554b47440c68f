//! Labelled scenes and their text record format.

use std::io::{BufRead, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{box_contains, Box3D, PointCloud};

/// A point cloud with ground-truth boxes and per-point labels.
///
/// `labels[i]` is the class of the owning box or -1; `owners[i]` the box index or -1.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: usize,
    pub cloud: PointCloud,
    pub gt: Vec<Box3D>,
    pub labels: Vec<i64>,
    pub owners: Vec<i64>,
}

impl SceneSample {
    /// Builds a scene and labels each point by the first box that contains it.
    /// Point features are the heights.
    pub fn from_points(id: usize, coords: Array2<f64>, gt: Vec<Box3D>) -> Result<Self> {
        let (labels, owners) = label_points(&coords, &gt);
        let feats = coords.column(2).to_owned().insert_axis(ndarray::Axis(1));
        let cloud = PointCloud::new(coords, feats)?;
        Ok(Self { id, cloud, gt, labels, owners })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        self.owners[i] >= 0
    }

    /// Checks owner ranges and that every foreground point lies in its box.
    pub fn validate(&self) -> Result<()> {
        let n = self.cloud.len();
        if self.labels.len() != n || self.owners.len() != n {
            return Err(Error::InvalidArgument("label arrays do not match the point count".into()));
        }
        for i in 0..n {
            let o = self.owners[i];
            if o < -1 || o >= self.gt.len() as i64 {
                return Err(Error::InvalidArgument(format!("point {i} has owner {o} out of range")));
            }
            if o >= 0 {
                let b = &self.gt[o as usize];
                if !box_contains(b, self.cloud.point(i)) {
                    return Err(Error::InvalidArgument(format!("point {i} lies outside its owning box")));
                }
                if self.labels[i] != b.label as i64 {
                    return Err(Error::InvalidArgument(format!("point {i} label disagrees with its box")));
                }
            } else if self.labels[i] != -1 {
                return Err(Error::InvalidArgument(format!("background point {i} carries a label")));
            }
        }
        Ok(())
    }
}

/// First-containing-box labels for every row of `coords`.
pub fn label_points(coords: &Array2<f64>, gt: &[Box3D]) -> (Vec<i64>, Vec<i64>) {
    let mut labels = vec![-1; coords.nrows()];
    let mut owners = vec![-1; coords.nrows()];
    for (i, r) in coords.rows().into_iter().enumerate() {
        let p = [r[0], r[1], r[2]];
        if let Some(b) = gt.iter().position(|b| box_contains(b, p)) {
            owners[i] = b as i64;
            labels[i] = gt[b].label as i64;
        }
    }
    (labels, owners)
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_scene<W: Write>(s: &SceneSample, out: &mut W) -> Result<()> {
    writeln!(out, "scene {} {} {}", s.id, s.cloud.len(), s.gt.len())?;
    for i in 0..s.cloud.len() {
        let p = s.cloud.point(i);
        writeln!(out, "{} {} {} {} {}", f(p[0]), f(p[1]), f(p[2]), s.labels[i], s.owners[i])?;
    }
    for b in &s.gt {
        let [x, y, z] = b.center;
        let [l, w, h] = b.size;
        writeln!(out, "{} {} {} {} {} {} {} {}", f(x), f(y), f(z), f(l), f(w), f(h), f(b.yaw), b.label)?;
    }
    Ok(())
}

pub fn write_scenes<W: Write>(scenes: &[SceneSample], out: &mut W) -> Result<()> {
    for s in scenes {
        write_scene(s, out)?;
    }
    Ok(())
}

fn nums<T: std::str::FromStr>(line: &str, n: usize, ln: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != n {
        return Err(Error::Parse { line: ln, msg: format!("expected {n} fields, found {}", toks.len()) });
    }
    toks.iter().map(|t| t.parse::<T>().map_err(|e| Error::Parse { line: ln, msg: format!("{t}: {e}") })).collect()
}

/// Parses every scene record; labels are taken from the file and then validated.
pub fn read_scenes<R: BufRead>(input: R) -> Result<Vec<SceneSample>> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut scenes = Vec::new();
    while let Some((ln, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "scene" {
            return Err(Error::Parse { line: ln, msg: "expected `scene <id> <n_points> <n_boxes>`".into() });
        }
        let hdr: Vec<usize> = nums(&toks[1..].join(" "), 3, ln)?;
        let (id, np, nb) = (hdr[0], hdr[1], hdr[2]);
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((l, s)) => Ok((l, s?)),
                None => Err(Error::Parse { line: ln, msg: format!("scene {id} truncated in {what}") }),
            }
        };
        let mut coords = Array2::zeros((np, 3));
        let mut labels = Vec::with_capacity(np);
        let mut owners = Vec::with_capacity(np);
        for i in 0..np {
            let (l, s) = next("points")?;
            let toks: Vec<&str> = s.split_whitespace().collect();
            if toks.len() != 5 {
                return Err(Error::Parse { line: l, msg: "point line needs `x y z label box_idx`".into() });
            }
            let xyz: Vec<f64> = nums(&toks[..3].join(" "), 3, l)?;
            let lo: Vec<i64> = nums(&toks[3..].join(" "), 2, l)?;
            for c in 0..3 {
                coords[[i, c]] = xyz[c];
            }
            labels.push(lo[0]);
            owners.push(lo[1]);
        }
        let mut gt = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (l, s) = next("boxes")?;
            let toks: Vec<&str> = s.split_whitespace().collect();
            if toks.len() != 8 {
                return Err(Error::Parse { line: l, msg: "box line needs `cx cy cz l w h yaw label`".into() });
            }
            let v: Vec<f64> = nums(&toks[..7].join(" "), 7, l)?;
            let label: usize = toks[7].parse().map_err(|e| Error::Parse { line: l, msg: format!("{e}") })?;
            let b = Box3D::gt([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], label)
                .map_err(|e| Error::Parse { line: l, msg: e.to_string() })?;
            gt.push(b);
        }
        let feats = coords.column(2).to_owned().insert_axis(ndarray::Axis(1));
        let cloud = PointCloud::new(coords, feats)?;
        let s = SceneSample { id, cloud, gt, labels, owners };
        s.validate().map_err(|e| Error::Parse { line: ln, msg: e.to_string() })?;
        scenes.push(s);
    }
    Ok(scenes)
}
