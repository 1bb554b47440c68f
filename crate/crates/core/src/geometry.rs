//! Point clouds, oriented boxes and the containment test used for labelling.

use ndarray::{Array2, ArrayView1};
use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w -= 2.0 * PI;
    }
    w
}

/// `N` points with one feature row each.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Array2<f64>,
    pub feats: Array2<f64>,
}

impl PointCloud {
    pub fn new(coords: Array2<f64>, feats: Array2<f64>) -> Result<Self> {
        if coords.ncols() != 3 {
            return Err(shape_err(format!("coords must be N x 3, got {:?}", coords.dim())));
        }
        if coords.nrows() != feats.nrows() {
            return Err(shape_err(format!(
                "coords has {} rows but feats has {}",
                coords.nrows(),
                feats.nrows()
            )));
        }
        if feats.ncols() == 0 {
            return Err(shape_err("feats need at least one column"));
        }
        if coords.iter().chain(feats.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point data".into()));
        }
        Ok(Self { coords, feats })
    }

    /// Cloud whose features are copies of the coordinates.
    pub fn from_coords(coords: Array2<f64>) -> Result<Self> {
        let feats = coords.clone();
        Self::new(coords, feats)
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }
}

/// Oriented 3-D box: center, size `(l, w, h)` and yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub label: usize,
    pub score: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, label: usize, score: f64) -> Result<Self> {
        if size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("box sizes must be positive, got {size:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::InvalidArgument("non-finite box parameters".into()));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score {score} outside [0,1]")));
        }
        Ok(Self { center, size, yaw: wrap_angle(yaw), label, score })
    }

    /// Ground-truth style constructor with score 1.
    pub fn gt(center: [f64; 3], size: [f64; 3], yaw: f64, label: usize) -> Result<Self> {
        Self::new(center, size, yaw, label, 1.0)
    }

    /// Point expressed in the box frame (origin at the center, x along the heading).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * q[0] - s * q[1],
            self.center[1] + s * q[0] + c * q[1],
            self.center[2] + q[2],
        ]
    }

    /// The four BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| {
            let w = self.to_world([x, y, 0.0]);
            [w[0], w[1]]
        })
    }

    /// The eight 3-D corners, ordered by (sx, sy, sz) sign bits.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        box_corners(self.center, self.size, self.yaw)
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }
}

pub(crate) const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, -1.0, -1.0],
];

pub fn box_corners(center: [f64; 3], size: [f64; 3], yaw: f64) -> [[f64; 3]; 8] {
    let (s, c) = yaw.sin_cos();
    CORNER_SIGNS.map(|sg| {
        let x = sg[0] * size[0] / 2.0;
        let y = sg[1] * size[1] / 2.0;
        let z = sg[2] * size[2] / 2.0;
        [center[0] + c * x - s * y, center[1] + s * x + c * y, center[2] + z]
    })
}

/// True iff `p` lies inside the closed box.
pub fn box_contains(b: &Box3D, p: [f64; 3]) -> bool {
    let q = b.to_local(p);
    q[0].abs() <= b.size[0] / 2.0 && q[1].abs() <= b.size[1] / 2.0 && q[2].abs() <= b.size[2] / 2.0
}

pub fn row3(r: ArrayView1<f64>) -> [f64; 3] {
    [r[0], r[1], r[2]]
}

pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}
