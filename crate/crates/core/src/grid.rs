//! BEV lattice arithmetic and the grid receptive-field recurrence.

use crate::error::{Error, Result};

/// A fixed BEV lattice over a metric range. `width` cells along x, `height` along y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub range: [f64; 6],
    pub width: usize,
    pub height: usize,
    pub cell: [f64; 2],
}

pub type Cell = (usize, usize);

impl GridSpec {
    pub fn new(range: [f64; 6], width: usize, height: usize) -> Result<Self> {
        for a in 0..3 {
            if !(range[a + 3] > range[a]) {
                return Err(Error::InvalidArgument(format!("grid range axis {a} has max <= min")));
            }
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("grid needs at least one cell per axis".into()));
        }
        let cell = [(range[3] - range[0]) / width as f64, (range[4] - range[1]) / height as f64];
        Ok(Self { range, width, height, cell })
    }

    /// KITTI-style range `[0,-40,-3,70.4,40,1]` on a 176 x 200 lattice.
    pub fn kitti() -> Self {
        Self::new([0.0, -40.0, -3.0, 70.4, 40.0, 1.0], 176, 200).expect("valid default grid")
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    /// Row-major (y-major) linear index.
    pub fn linear(&self, c: Cell) -> usize {
        c.1 * self.width + c.0
    }

    pub fn unlinear(&self, i: usize) -> Cell {
        (i % self.width, i / self.width)
    }

    /// Cell containing `xy`, or `None` outside the half-open range.
    pub fn world_to_cell(&self, xy: [f64; 2]) -> Option<Cell> {
        let [x, y] = xy;
        if !(x >= self.range[0] && x < self.range[3] && y >= self.range[1] && y < self.range[4]) {
            return None;
        }
        let ix = (((x - self.range[0]) / self.cell[0]).floor() as usize).min(self.width - 1);
        let iy = (((y - self.range[1]) / self.cell[1]).floor() as usize).min(self.height - 1);
        Some((ix, iy))
    }

    pub fn cell_center(&self, c: Cell) -> [f64; 2] {
        [
            self.range[0] + (c.0 as f64 + 0.5) * self.cell[0],
            self.range[1] + (c.1 as f64 + 0.5) * self.cell[1],
        ]
    }

    pub fn in_bounds(&self, ix: i64, iy: i64) -> bool {
        ix >= 0 && iy >= 0 && (ix as usize) < self.width && (iy as usize) < self.height
    }

    /// True when the 3-D point also lies inside the vertical range.
    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        self.world_to_cell([p[0], p[1]]).is_some() && p[2] >= self.range[2] && p[2] < self.range[5]
    }
}

/// Receptive field after each layer: `RF_{i+1} = RF_i + (k_i - 1) * S_i` with `RF_0 = 1`,
/// where `S_i` is the product of the strides of the layers already applied (`S_0 = 1`).
pub fn receptive_field(kernel_sizes: &[usize], strides: &[usize]) -> Result<Vec<usize>> {
    if kernel_sizes.len() != strides.len() {
        return Err(Error::InvalidArgument("kernel and stride lists differ in length".into()));
    }
    if kernel_sizes.iter().chain(strides).any(|&v| v == 0) {
        return Err(Error::InvalidArgument("kernel sizes and strides must be >= 1".into()));
    }
    let mut rf = 1usize;
    let mut jump = 1usize;
    let mut out = Vec::with_capacity(kernel_sizes.len());
    for (&k, &s) in kernel_sizes.iter().zip(strides) {
        rf += (k - 1) * jump;
        jump *= s;
        out.push(rf);
    }
    Ok(out)
}
