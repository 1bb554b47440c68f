//! Point dilation on the BEV lattice: sparse projection, binary dilation, spherical-harmonic
//! angle weights, Gaussian scale weights, coefficient fusion and height compression.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView2};

use crate::backbone::{mlp_on_tape, softplus, Activation, DenseLayer, LayerVars, StageOutput};
use crate::config::FusionMode;
use crate::error::{shape_err, Error, Result};
use crate::grid::{Cell, GridSpec};
use crate::tape::{Tape, Var};

/// Polar angle used for in-plane cell offsets.
pub const EQUATORIAL: f64 = FRAC_PI_2;

/// Feature rows keyed by occupied cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    pub spec: GridSpec,
    pub dim: usize,
    pub cells: BTreeMap<Cell, Vec<f64>>,
}

impl SparseGrid {
    pub fn new(spec: GridSpec, dim: usize) -> Self {
        Self { spec, dim, cells: BTreeMap::new() }
    }

    pub fn occupancy(&self) -> BTreeSet<Cell> {
        self.cells.keys().copied().collect()
    }

    /// Adds `feat` into `cell`, creating it when absent.
    pub fn accumulate(&mut self, cell: Cell, feat: &[f64]) -> Result<()> {
        if feat.len() != self.dim {
            return Err(shape_err(format!("feature width {} does not match grid width {}", feat.len(), self.dim)));
        }
        if cell.0 >= self.spec.width || cell.1 >= self.spec.height {
            return Err(Error::InvalidArgument(format!("cell {cell:?} outside the grid")));
        }
        let row = self.cells.entry(cell).or_insert_with(|| vec![0.0; self.dim]);
        for (r, f) in row.iter_mut().zip(feat) {
            *r += f;
        }
        Ok(())
    }
}

/// Odd square binary footprint centered on its middle element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    pub size: usize,
    pub mask: Vec<bool>,
}

impl StructuringElement {
    pub fn new(size: usize, mask: Vec<bool>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("structuring element size {size} must be odd")));
        }
        if mask.len() != size * size {
            return Err(shape_err(format!("mask needs {} entries", size * size)));
        }
        Ok(Self { size, mask })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, vec![true; size * size])
    }

    /// Active `(dx, dy)` offsets in row-major order.
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let r = (self.size / 2) as i64;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if self.mask[((dy + r) as usize) * self.size + (dx + r) as usize] {
                    out.push((dx, dy));
                }
            }
        }
        out
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square(5).expect("5 is odd")
    }
}

/// Sums the features of in-range points into their cells; points outside the range are dropped.
pub fn project_to_grid(points: ArrayView2<f64>, feats: ArrayView2<f64>, spec: &GridSpec) -> Result<SparseGrid> {
    if points.nrows() != feats.nrows() || points.ncols() < 2 {
        return Err(shape_err("points and features must share rows; points need x and y"));
    }
    let mut g = SparseGrid::new(*spec, feats.ncols());
    for (p, f) in points.rows().into_iter().zip(feats.rows()) {
        if let Some(c) = spec.world_to_cell([p[0], p[1]]) {
            let row = g.cells.entry(c).or_insert_with(|| vec![0.0; feats.ncols()]);
            for (r, v) in row.iter_mut().zip(f) {
                *r += v;
            }
        }
    }
    Ok(g)
}

fn shifted(spec: &GridSpec, c: Cell, (dx, dy): (i64, i64)) -> Option<Cell> {
    let (x, y) = (c.0 as i64 + dx, c.1 as i64 + dy);
    spec.in_bounds(x, y).then_some((x as usize, y as usize))
}

/// Union of the structuring element translated to every occupied cell, clipped to the grid.
pub fn dilate(occ: &BTreeSet<Cell>, se: &StructuringElement, spec: &GridSpec) -> BTreeSet<Cell> {
    let offs = se.offsets();
    occ.iter().flat_map(|&c| offs.iter().filter_map(move |&o| shifted(spec, c, o))).collect()
}

/// Associated Legendre function `(1 - x^2)^{m/2} d^m/dx^m P_l(x)`, without the Condon-Shortley sign.
pub fn legendre(l: usize, m: usize, x: f64) -> Result<f64> {
    if m > l {
        return Err(Error::InvalidArgument(format!("order {m} exceeds degree {l}")));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!("legendre argument {x} outside [-1, 1]")));
    }
    Ok(legendre_unchecked(l, m, x, (1.0 - x * x).max(0.0).sqrt()))
}

/// `s` is `sqrt(1 - x^2)`.
fn legendre_unchecked(l: usize, m: usize, x: f64, s: f64) -> f64 {
    let mut pmm = 1.0;
    for i in 0..m {
        pmm *= (2 * i + 1) as f64 * s;
    }
    if l == m {
        return pmm;
    }
    let mut prev = pmm;
    let mut cur = x * (2 * m + 1) as f64 * pmm;
    for ll in m + 2..=l {
        let next = ((2 * ll - 1) as f64 * x * cur - (ll + m - 1) as f64 * prev) / (ll - m) as f64;
        prev = cur;
        cur = next;
    }
    cur
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Real orthonormal spherical harmonics ordered `(l, m)` for `l = 0..=L`, `m = -l..=l`.
pub fn sh_basis(degree: usize, theta: f64, phi: f64) -> Vec<f64> {
    let x = theta.cos().clamp(-1.0, 1.0);
    let s = theta.sin().abs();
    let mut out = Vec::with_capacity((degree + 1) * (degree + 1));
    for l in 0..=degree {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let k = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - am) / factorial(l + am)).sqrt();
            let p = legendre_unchecked(l, am, x, s);
            let v = match m {
                0 => k * p,
                m if m > 0 => std::f64::consts::SQRT_2 * k * (m as f64 * phi).cos() * p,
                _ => std::f64::consts::SQRT_2 * k * (am as f64 * phi).sin() * p,
            };
            out.push(v);
        }
    }
    out
}

/// Per-center spherical-harmonic weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SHCoeffs {
    pub degree: usize,
    pub values: Vec<f64>,
}

impl SHCoeffs {
    pub fn new(degree: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != (degree + 1) * (degree + 1) {
            return Err(shape_err(format!("degree {degree} needs {} coefficients", (degree + 1) * (degree + 1))));
        }
        Ok(Self { degree, values })
    }
}

/// Degree whose coefficient count is `n`, when `n` is a perfect square.
pub fn degree_for_count(n: usize) -> Option<usize> {
    let l = (n as f64).sqrt().round() as usize;
    (l >= 1 && l * l == n).then(|| l - 1)
}

fn offset(center: Cell, target: Cell) -> (f64, f64) {
    (target.0 as f64 - center.0 as f64, target.1 as f64 - center.1 as f64)
}

/// `alpha = sum c_l^m Y_l^m(theta, phi)` with `phi` the in-plane direction from center to target.
pub fn angle_coefficient(coeffs: &SHCoeffs, center: Cell, target: Cell) -> f64 {
    angle_coefficient_at(coeffs, center, target, EQUATORIAL)
}

pub fn angle_coefficient_at(coeffs: &SHCoeffs, center: Cell, target: Cell, theta: f64) -> f64 {
    let (dx, dy) = offset(center, target);
    let basis = sh_basis(coeffs.degree, theta, dy.atan2(dx));
    basis.iter().zip(&coeffs.values).map(|(y, c)| y * c).sum()
}

/// Isotropic bivariate normal density at squared distance `d2`.
pub fn gaussian_density(sigma: f64, d2: f64) -> f64 {
    let s2 = sigma * sigma;
    (-d2 / (2.0 * s2)).exp() / (2.0 * PI * s2)
}

pub fn gaussian_density_dsigma(sigma: f64, d2: f64) -> f64 {
    gaussian_density(sigma, d2) * (d2 / sigma.powi(3) - 2.0 / sigma)
}

/// `beta` between cell centers, distances in cell units.
pub fn scale_coefficient(sigma: f64, center: Cell, target: Cell) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let (dx, dy) = offset(center, target);
    Ok(gaussian_density(sigma, dx * dx + dy * dy))
}

/// Positive scale produced from a raw head output.
pub fn sigma_from_logit(raw: f64, floor: f64) -> f64 {
    softplus(raw) + floor
}

pub fn fuse_coefficients(feat: &[f64], alpha: f64, beta: f64, mode: FusionMode) -> Result<Vec<f64>> {
    let c = feat.len();
    match mode {
        FusionMode::Straight => Ok(feat.iter().map(|f| (alpha + beta) * f).collect()),
        FusionMode::Split | FusionMode::HalfSum if c % 2 == 1 => {
            Err(shape_err(format!("fusion needs an even feature width, got {c}")))
        }
        FusionMode::Split => {
            Ok(feat[..c / 2].iter().map(|f| alpha * f).chain(feat[c / 2..].iter().map(|f| beta * f)).collect())
        }
        FusionMode::HalfSum => Ok(feat[..c / 2].iter().zip(&feat[c / 2..]).map(|(a, b)| alpha * a + beta * b).collect()),
    }
}

/// Grid after dilation and height compression with per-cell contributor counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedGrid {
    pub spec: GridSpec,
    pub dim: usize,
    pub cells: BTreeMap<Cell, Vec<f64>>,
    pub counts: BTreeMap<Cell, usize>,
}

impl DilatedGrid {
    pub fn as_sparse(&self) -> SparseGrid {
        SparseGrid { spec: self.spec, dim: self.dim, cells: self.cells.clone() }
    }
}

/// Sums every contribution landing on a cell, in the given order.
pub fn height_compress(spec: &GridSpec, contributions: &[(Cell, Vec<f64>)]) -> Result<DilatedGrid> {
    let dim = contributions.first().map_or(0, |c| c.1.len());
    let mut g = SparseGrid::new(*spec, dim);
    let mut counts = BTreeMap::new();
    for (cell, f) in contributions {
        g.accumulate(*cell, f)?;
        *counts.entry(*cell).or_insert(0) += 1;
    }
    Ok(DilatedGrid { spec: *spec, dim, cells: g.cells, counts })
}

/// Settings of the dilation neck.
#[derive(Debug, Clone, PartialEq)]
pub struct PdmOptions {
    pub se: StructuringElement,
    pub fusion: FusionMode,
    pub theta: f64,
    pub sigma_floor: f64,
    pub scale_enabled: bool,
}

impl Default for PdmOptions {
    fn default() -> Self {
        Self {
            se: StructuringElement::default(),
            fusion: FusionMode::Split,
            theta: EQUATORIAL,
            sigma_floor: 0.1,
            scale_enabled: true,
        }
    }
}

/// Neck tensors recorded on a tape.
#[derive(Debug, Clone)]
pub struct PdmTape {
    /// Output cells in key order; row `r` of `feats` belongs to `cells[r]`.
    pub cells: Vec<Cell>,
    pub feats: Var,
    pub counts: Vec<usize>,
    pub index: BTreeMap<Cell, usize>,
    pub centers: Vec<Cell>,
    pub coeffs: Option<Var>,
    pub sigma: Option<Var>,
}

/// Projects point features, predicts per-center coefficients and scales, and spreads the
/// fused center features over each footprint. Center cells also keep their raw feature.
pub fn pdm_on_tape(
    tape: &mut Tape,
    coords: &Array2<f64>,
    feats: Var,
    spec: &GridSpec,
    sh_head: &[LayerVars],
    sigma_head: &[LayerVars],
    opts: &PdmOptions,
) -> Result<PdmTape> {
    let c_in = tape.value(feats).ncols();
    if coords.nrows() != tape.value(feats).nrows() {
        return Err(shape_err("coordinates and features must share rows"));
    }
    if matches!(opts.fusion, FusionMode::Split | FusionMode::HalfSum) && c_in % 2 == 1 {
        return Err(shape_err(format!("fusion needs an even feature width, got {c_in}")));
    }
    let out_dim = if opts.fusion == FusionMode::HalfSum { c_in / 2 } else { c_in };

    let mut center_of: BTreeMap<Cell, usize> = BTreeMap::new();
    let mut pts = Vec::new();
    let mut pt_cells = Vec::new();
    for (i, p) in coords.rows().into_iter().enumerate() {
        if let Some(c) = spec.world_to_cell([p[0], p[1]]) {
            pts.push(i);
            pt_cells.push(c);
            center_of.insert(c, 0);
        }
    }
    let centers: Vec<Cell> = center_of.keys().copied().collect();
    for (i, c) in centers.iter().enumerate() {
        center_of.insert(*c, i);
    }
    if centers.is_empty() {
        let f = tape.constant(Array2::zeros((0, out_dim)));
        return Ok(PdmTape {
            cells: vec![],
            feats: f,
            counts: vec![],
            index: BTreeMap::new(),
            centers,
            coeffs: None,
            sigma: None,
        });
    }
    let gathered = tape.gather_rows(feats, &pts);
    let owner: Vec<usize> = pt_cells.iter().map(|c| center_of[c]).collect();
    let center_feats = tape.scatter_add(gathered, owner, centers.len());

    let coeffs = mlp_on_tape(tape, center_feats, sh_head);
    let k = tape.value(coeffs).ncols();
    let degree = degree_for_count(k).ok_or_else(|| shape_err(format!("{k} is not a spherical-harmonic count")))?;
    let sigma = if opts.scale_enabled {
        let raw = mlp_on_tape(tape, center_feats, sigma_head);
        if tape.value(raw).ncols() != 1 {
            return Err(shape_err("scale head must emit one value per center"));
        }
        let floor = tape.constant(Array2::from_elem((centers.len(), 1), opts.sigma_floor));
        Some(tape.add(raw, floor))
    } else {
        None
    };

    let offs: Vec<(i64, i64)> = opts.se.offsets().into_iter().filter(|&o| o != (0, 0)).collect();
    let bases: Vec<Vec<f64>> =
        offs.iter().map(|&(dx, dy)| sh_basis(degree, opts.theta, (dy as f64).atan2(dx as f64))).collect();

    let mut out_cells: BTreeSet<Cell> = centers.iter().copied().collect();
    let mut contrib = Vec::new();
    for (ci, &c) in centers.iter().enumerate() {
        for (oi, &o) in offs.iter().enumerate() {
            if let Some(t) = shifted(spec, c, o) {
                contrib.push((ci, oi, t));
                out_cells.insert(t);
            }
        }
    }
    let cells: Vec<Cell> = out_cells.into_iter().collect();
    let index: BTreeMap<Cell, usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut counts = vec![0usize; cells.len()];
    for c in &centers {
        counts[index[c]] += 1;
    }

    let raw = if opts.fusion == FusionMode::HalfSum {
        let a = tape.slice(center_feats, 0, out_dim);
        let b = tape.slice(center_feats, out_dim, out_dim);
        tape.add(a, b)
    } else {
        center_feats
    };
    let center_rows: Vec<usize> = centers.iter().map(|c| index[c]).collect();
    let mut out = tape.scatter_add(raw, center_rows, cells.len());

    if !contrib.is_empty() {
        let src: Vec<usize> = contrib.iter().map(|x| x.0).collect();
        let mut basis = Array2::zeros((contrib.len(), k));
        let mut d2 = Vec::with_capacity(contrib.len());
        for (r, &(_, oi, _)) in contrib.iter().enumerate() {
            for (j, v) in bases[oi].iter().enumerate() {
                basis[[r, j]] = *v;
            }
            let (dx, dy) = offs[oi];
            d2.push((dx * dx + dy * dy) as f64);
            counts[index[&contrib[r].2]] += 1;
        }
        let cr = tape.gather_rows(coeffs, &src);
        let alpha = tape.row_dot(cr, basis);
        let beta = match sigma {
            Some(s) => {
                let sr = tape.gather_rows(s, &src);
                tape.gaussian(sr, d2)
            }
            None => tape.constant(Array2::zeros((contrib.len(), 1))),
        };
        let f = tape.gather_rows(center_feats, &src);
        let fused = match opts.fusion {
            FusionMode::Straight => {
                let w = tape.add(alpha, beta);
                tape.row_scale(f, w)
            }
            FusionMode::Split | FusionMode::HalfSum => {
                let h = c_in / 2;
                let a = tape.slice(f, 0, h);
                let b = tape.slice(f, h, h);
                let a = tape.row_scale(a, alpha);
                let b = tape.row_scale(b, beta);
                if opts.fusion == FusionMode::Split {
                    tape.concat(&[a, b])
                } else {
                    tape.add(a, b)
                }
            }
        };
        let targets: Vec<usize> = contrib.iter().map(|x| index[&x.2]).collect();
        let spread = tape.scatter_add(fused, targets, cells.len());
        out = tape.add(out, spread);
    }
    Ok(PdmTape { cells, feats: out, counts, index, centers, coeffs: Some(coeffs), sigma })
}

/// Dilation heads with their own weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PdmHeads {
    pub sh: Vec<DenseLayer>,
    pub sigma: Vec<DenseLayer>,
}

impl PdmHeads {
    /// Single linear layers `C -> (L+1)^2` and `C -> 1`, softplus on the scale.
    pub fn init<R: rand::Rng>(in_dim: usize, degree: usize, rng: &mut R) -> Self {
        Self {
            sh: vec![DenseLayer::init(in_dim, (degree + 1) * (degree + 1), Activation::None, rng)],
            sigma: vec![DenseLayer::init(in_dim, 1, Activation::Softplus, rng)],
        }
    }
}

pub fn pdm_forward(last: &StageOutput, heads: &PdmHeads, spec: &GridSpec, opts: &PdmOptions) -> Result<DilatedGrid> {
    if last.coords.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut tape = Tape::new();
    let f = tape.constant(last.feats.clone());
    let sh: Vec<LayerVars> = heads.sh.iter().map(|l| LayerVars::constant(&mut tape, l)).collect();
    let sg: Vec<LayerVars> = heads.sigma.iter().map(|l| LayerVars::constant(&mut tape, l)).collect();
    let out = pdm_on_tape(&mut tape, &last.coords, f, spec, &sh, &sg, opts)?;
    Ok(tape_to_grid(&tape, &out, spec))
}

pub fn tape_to_grid(tape: &Tape, out: &PdmTape, spec: &GridSpec) -> DilatedGrid {
    let v = tape.value(out.feats);
    let cells = out.cells.iter().enumerate().map(|(r, &c)| (c, v.row(r).to_vec())).collect();
    let counts = out.cells.iter().zip(&out.counts).map(|(&c, &n)| (c, n)).collect();
    DilatedGrid { spec: *spec, dim: v.ncols(), cells, counts }
}

/// Dense plane as `height` lines of `width` space-separated values, row `iy` per line.
pub fn write_dense<W: Write>(plane: ArrayView2<f64>, out: &mut W) -> Result<()> {
    for row in plane.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_dense<R: BufRead>(input: R) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse { line: ln + 1, msg: e.to_string() }))
            .collect::<Result<Vec<_>>>()?;
        if rows.first().is_some_and(|r| r.len() != vals.len()) {
            return Err(Error::Parse { line: ln + 1, msg: "ragged row".into() });
        }
        rows.push(vals);
    }
    let w = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), w), flat).map_err(|e| shape_err(e.to_string()))
}

/// Sparse `ix,iy,c0..` CSV with a header line.
pub fn write_sparse_csv<W: Write>(grid: &SparseGrid, out: &mut W) -> Result<()> {
    let head: Vec<String> = (0..grid.dim).map(|i| format!("c{i}")).collect();
    writeln!(out, "ix,iy,{}", head.join(","))?;
    for (&(ix, iy), f) in &grid.cells {
        let vals: Vec<String> = f.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{ix},{iy},{}", vals.join(","))?;
    }
    Ok(())
}

pub fn read_sparse_csv<R: BufRead>(input: R, spec: &GridSpec) -> Result<SparseGrid> {
    let mut grid: Option<SparseGrid> = None;
    for (ln, line) in input.lines().enumerate() {
        let line = line?;
        let perr = |msg: String| Error::Parse { line: ln + 1, msg };
        if ln == 0 {
            let n = line.split(',').count();
            if n < 2 {
                return Err(perr("missing header".into()));
            }
            grid = Some(SparseGrid::new(*spec, n - 2));
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let g = grid.as_mut().ok_or_else(|| perr("missing header".into()))?;
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != g.dim + 2 {
            return Err(perr(format!("expected {} fields", g.dim + 2)));
        }
        let ix = toks[0].trim().parse::<usize>().map_err(|e| perr(e.to_string()))?;
        let iy = toks[1].trim().parse::<usize>().map_err(|e| perr(e.to_string()))?;
        let f = toks[2..]
            .iter()
            .map(|t| t.trim().parse::<f64>().map_err(|e| perr(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        g.accumulate((ix, iy), &f)?;
    }
    grid.ok_or(Error::EmptyInput)
}
