//! PointNet-style encoder pieces: dense layers with explicit backward, ball query,
//! multi-scale grouping with max-pool, and set-abstraction stages.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::sampling::SampleResult;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Softplus,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::None => x,
            Self::Relu => x.max(0.0),
            Self::Sigmoid => sigmoid(x),
            Self::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the activation output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Self::None => 1.0,
            Self::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Sigmoid => y * (1.0 - y),
            Self::Softplus => -(-y).exp_m1(),
        }
    }
}

/// Fully connected layer `activation(x W^T + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(shape_err(format!("weights {:?} vs bias {}", weights.dim(), bias.len())));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite layer parameters".into()));
        }
        Ok(Self { weights, bias, activation })
    }

    /// Uniform init in `+-sqrt(6 / (in + out))`, zero bias.
    pub fn init<R: Rng>(inp: usize, out: usize, activation: Activation, rng: &mut R) -> Self {
        Self { weights: xavier(inp, out, rng), bias: Array1::zeros(out), activation }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

pub(crate) fn xavier<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Array2<f64> {
    let a = (6.0 / (inp + out) as f64).sqrt();
    Array2::from_shape_fn((out, inp), |_| rng.gen_range(-a..a))
}

pub(crate) fn dense_forward_raw(w: ArrayView2<f64>, b: ArrayView1<f64>, act: Activation, x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    out += &b;
    if act != Activation::None {
        out.mapv_inplace(|v| act.apply(v));
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)` given the forward output.
pub(crate) fn dense_backward_raw(
    w: ArrayView2<f64>,
    act: Activation,
    x: ArrayView2<f64>,
    out: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let mut g = upstream.to_owned();
    if act != Activation::None {
        ndarray::Zip::from(&mut g).and(&out).for_each(|gv, &o| *gv *= act.derivative_from_output(o));
    }
    let gx = g.dot(&w);
    let gw = g.t().dot(&x);
    let gb = g.sum_axis(Axis(0));
    (gx, gw, gb)
}

pub fn dense_forward(layer: &DenseLayer, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != layer.in_dim() {
        return Err(shape_err(format!("input has {} columns, layer expects {}", x.ncols(), layer.in_dim())));
    }
    Ok(dense_forward_raw(layer.weights.view(), layer.bias.view(), layer.activation, x.view()))
}

/// Exact reverse-mode gradients of [`dense_forward`].
pub fn dense_backward(
    layer: &DenseLayer,
    x: &Array2<f64>,
    upstream: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
    let out = dense_forward(layer, x)?;
    if upstream.dim() != out.dim() {
        return Err(shape_err(format!("upstream {:?} vs output {:?}", upstream.dim(), out.dim())));
    }
    Ok(dense_backward_raw(layer.weights.view(), layer.activation, x.view(), out.view(), upstream.view()))
}

/// For every center, `k` source indices within `radius`.
///
/// Indices are taken in ascending order; a short ball is padded with its first hit and an
/// empty ball is filled with the nearest source point.
pub fn ball_query(centers: &Array2<f64>, source: &Array2<f64>, radius: f64, k: usize) -> Result<Array2<usize>> {
    if source.nrows() == 0 {
        return Err(Error::EmptySource);
    }
    if !(radius > 0.0) || k == 0 {
        return Err(Error::InvalidArgument("ball query needs radius > 0 and k >= 1".into()));
    }
    if centers.ncols() != 3 || source.ncols() != 3 {
        return Err(shape_err("ball query expects 3-D coordinates"));
    }
    let r2 = radius * radius;
    let mut out = Array2::zeros((centers.nrows(), k));
    for (ci, c) in centers.rows().into_iter().enumerate() {
        let mut found = 0usize;
        let mut nearest = (f64::INFINITY, 0usize);
        for (si, s) in source.rows().into_iter().enumerate() {
            let d = (s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2) + (s[2] - c[2]).powi(2);
            if d < nearest.0 {
                nearest = (d, si);
            }
            if d <= r2 && found < k {
                out[[ci, found]] = si;
                found += 1;
                if found == k {
                    break;
                }
            }
        }
        let fill = if found == 0 { nearest.1 } else { out[[ci, 0]] };
        for j in found..k {
            out[[ci, j]] = fill;
        }
    }
    Ok(out)
}

/// Layer handles on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
    pub act: Activation,
}

impl LayerVars {
    pub fn constant(tape: &mut Tape, layer: &DenseLayer) -> Self {
        let w = tape.constant(layer.weights.clone());
        let b = tape.constant(layer.bias.clone().insert_axis(Axis(0)));
        Self { w, b, act: layer.activation }
    }
}

pub fn mlp_on_tape(tape: &mut Tape, mut x: Var, layers: &[LayerVars]) -> Var {
    for l in layers {
        x = tape.linear(x, l.w, l.b, l.act);
    }
    x
}

/// Ball-query grouping of `source` around `centers`, per-branch layers, max-pool over the
/// neighbours, concatenation and the aggregation layer.
///
/// Grouped rows are `[neighbour feature, neighbour - center]`.
#[allow(clippy::too_many_arguments)]
pub fn group_pool_on_tape(
    tape: &mut Tape,
    centers: Var,
    source_coords: &Array2<f64>,
    source_feats: Var,
    radii: &[f64],
    nquery: &[usize],
    branches: &[Vec<LayerVars>],
    agg: Option<&LayerVars>,
) -> Result<Var> {
    let centers_v = tape.value(centers).clone();
    let m = centers_v.nrows();
    let mut pooled = Vec::with_capacity(branches.len());
    for ((&r, &k), layers) in radii.iter().zip(nquery).zip(branches) {
        let idx = ball_query(&centers_v, source_coords, r, k)?;
        let flat: Vec<usize> = idx.iter().copied().collect();
        let rep: Vec<usize> = (0..m).flat_map(|c| std::iter::repeat(c).take(k)).collect();
        let mut nb = Array2::zeros((flat.len(), 3));
        for (row, &s) in flat.iter().enumerate() {
            nb.row_mut(row).assign(&source_coords.row(s));
        }
        let nb = tape.constant(nb);
        let cr = tape.gather_rows(centers, &rep);
        let rel = tape.sub(nb, cr);
        let f = tape.gather_rows(source_feats, &flat);
        let x = tape.concat(&[f, rel]);
        let h = mlp_on_tape(tape, x, layers);
        pooled.push(tape.max_pool(h, k));
    }
    let cat = if pooled.len() == 1 { pooled[0] } else { tape.concat(&pooled) };
    Ok(match agg {
        Some(a) => tape.linear(cat, a.w, a.b, a.act),
        None => cat,
    })
}

/// A multi-scale set-abstraction stage with its own weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SAStage {
    pub npoint: usize,
    pub radii: Vec<f64>,
    pub nquery: Vec<usize>,
    pub branches: Vec<Vec<DenseLayer>>,
    pub agg: DenseLayer,
}

impl SAStage {
    pub fn new(
        npoint: usize,
        radii: Vec<f64>,
        nquery: Vec<usize>,
        branches: Vec<Vec<DenseLayer>>,
        agg: DenseLayer,
    ) -> Result<Self> {
        if radii.len() != nquery.len() || radii.len() != branches.len() || radii.is_empty() {
            return Err(Error::InvalidArgument("radii, nquery and branches must have equal nonzero length".into()));
        }
        if radii.windows(2).any(|w| w[1] <= w[0]) || radii[0] <= 0.0 {
            return Err(Error::InvalidArgument("radii must be positive and strictly increasing".into()));
        }
        let concat: usize = branches.iter().map(|b| b.last().map_or(0, DenseLayer::out_dim)).sum();
        if concat != agg.in_dim() {
            return Err(shape_err(format!("branches emit {concat} features, aggregation expects {}", agg.in_dim())));
        }
        Ok(Self { npoint, radii, nquery, branches, agg })
    }

    /// Randomly initialised stage for `in_dim` input features.
    pub fn init<R: Rng>(spec: &crate::config::SaSpec, in_dim: usize, rng: &mut R) -> Self {
        let branches = spec
            .dims
            .iter()
            .map(|dims| {
                let mut prev = in_dim + 3;
                dims.iter()
                    .map(|&d| {
                        let l = DenseLayer::init(prev, d, Activation::Relu, rng);
                        prev = d;
                        l
                    })
                    .collect()
            })
            .collect();
        let agg = DenseLayer::init(spec.concat_dim(), spec.agg, Activation::Relu, rng);
        Self { npoint: spec.npoint, radii: spec.radii.clone(), nquery: spec.nquery.clone(), branches, agg }
    }
}

/// Points and features emitted by a stage together with the indices sampled from its input.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub coords: Array2<f64>,
    pub feats: Array2<f64>,
    pub indices: Vec<usize>,
}

pub fn set_abstraction(stage: &SAStage, prev: &StageOutput, sample: &SampleResult) -> Result<StageOutput> {
    let n = prev.coords.nrows();
    if let Some(&bad) = sample.indices.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("sample index {bad} out of range for {n} points")));
    }
    let expect = prev.feats.ncols() + 3;
    for b in &stage.branches {
        if b.first().map(DenseLayer::in_dim) != Some(expect) {
            return Err(shape_err(format!("branch input must be {expect} wide")));
        }
    }
    let mut tape = Tape::new();
    let mut centers = Array2::zeros((sample.indices.len(), 3));
    for (r, &i) in sample.indices.iter().enumerate() {
        centers.row_mut(r).assign(&prev.coords.row(i));
    }
    let cv = tape.constant(centers.clone());
    let fv = tape.constant(prev.feats.clone());
    let branches: Vec<Vec<LayerVars>> =
        stage.branches.iter().map(|b| b.iter().map(|l| LayerVars::constant(&mut tape, l)).collect()).collect();
    let agg = LayerVars::constant(&mut tape, &stage.agg);
    let out = group_pool_on_tape(&mut tape, cv, &prev.coords, fv, &stage.radii, &stage.nquery, &branches, Some(&agg))?;
    Ok(StageOutput { coords: centers, feats: tape.value(out).clone(), indices: sample.indices.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> DenseLayer {
        DenseLayer::new(Array2::eye(n), Array1::zeros(n), Activation::None).unwrap()
    }

    #[test]
    fn dense_forward_examples() {
        let l = DenseLayer::new(Array2::eye(2), Array1::zeros(2), Activation::Relu).unwrap();
        assert_eq!(dense_forward(&l, &array![[-1.0, 2.0]]).unwrap(), array![[0.0, 2.0]]);
        let z = DenseLayer::new(Array2::zeros((2, 3)), array![1.5, -2.0], Activation::None).unwrap();
        let out = dense_forward(&z, &Array2::ones((4, 3))).unwrap();
        assert!(out.rows().into_iter().all(|r| r == array![1.5, -2.0]));
        let d = DenseLayer::new(array![[1.0, 1.0]], array![0.0], Activation::None).unwrap();
        assert_eq!(dense_forward(&d, &array![[2.0, 3.0]]).unwrap(), array![[5.0]]);
        assert!(dense_forward(&d, &array![[2.0, 3.0, 4.0]]).is_err());
    }

    #[test]
    fn dense_backward_examples() {
        let w = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]];
        let lin = DenseLayer::new(w.clone(), Array1::zeros(3), Activation::None).unwrap();
        let up = array![[1.0, -1.0, 2.0]];
        let (gx, _, gb) = dense_backward(&lin, &array![[0.3, 0.2]], &up).unwrap();
        assert_eq!(gx, up.dot(&w));
        assert_eq!(gb, array![1.0, -1.0, 2.0]);
        let relu = DenseLayer::new(Array2::eye(2), Array1::zeros(2), Activation::Relu).unwrap();
        let (gx, _, _) = dense_backward(&relu, &array![[-1.0, 1.0]], &array![[5.0, 5.0]]).unwrap();
        assert_eq!(gx, array![[0.0, 5.0]]);
        assert!(dense_backward(&relu, &array![[-1.0, 1.0]], &array![[5.0]]).is_err());
    }

    #[test]
    fn dense_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for act in [Activation::None, Activation::Sigmoid, Activation::Softplus, Activation::Relu] {
            let mut layer = DenseLayer::init(4, 3, act, &mut rng);
            layer.bias = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
            let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
            let up = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
            let f = |l: &DenseLayer, x: &Array2<f64>| (dense_forward(l, x).unwrap() * &up).sum();
            let (gx, gw, gb) = dense_backward(&layer, &x, &up).unwrap();
            let h = 1e-6;
            let mut worst = 0.0f64;
            for i in 0..3 {
                for j in 0..4 {
                    let (mut p, mut m) = (layer.clone(), layer.clone());
                    p.weights[[i, j]] += h;
                    m.weights[[i, j]] -= h;
                    let n = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
                    worst = worst.max((n - gw[[i, j]]).abs() / n.abs().max(gw[[i, j]].abs()).max(1e-3));
                }
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.bias[i] += h;
                m.bias[i] -= h;
                let n = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
                worst = worst.max((n - gb[i]).abs() / n.abs().max(gb[i].abs()).max(1e-3));
            }
            for r in 0..5 {
                for c in 0..4 {
                    let (mut p, mut m) = (x.clone(), x.clone());
                    p[[r, c]] += h;
                    m[[r, c]] -= h;
                    let n = (f(&layer, &p) - f(&layer, &m)) / (2.0 * h);
                    worst = worst.max((n - gx[[r, c]]).abs() / n.abs().max(gx[[r, c]].abs()).max(1e-3));
                }
            }
            assert!(worst < 1e-6, "{act:?}: {worst}");
        }
    }

    #[test]
    fn ball_query_rules() {
        let c = array![[0.0, 0.0, 0.0]];
        let s = array![[0.5, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(ball_query(&c, &s, 1.0, 2).unwrap(), array![[0, 0]]);
        let pts = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 5.0, 5.0]];
        let q = ball_query(&pts, &pts, 0.1, 1).unwrap();
        assert_eq!(q.column(0).to_vec(), vec![0, 1, 2]);
        let far = array![[10.0, 0.0, 0.0]];
        assert_eq!(ball_query(&far, &pts, 0.5, 3).unwrap(), array![[2, 2, 2]]);
        assert!(matches!(ball_query(&c, &Array2::zeros((0, 3)), 1.0, 1), Err(Error::EmptySource)));
        let many = array![[0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [0.3, 0.0, 0.0], [0.4, 0.0, 0.0]];
        assert_eq!(ball_query(&c, &many, 1.0, 3).unwrap(), array![[0, 1, 2]]);
    }

    fn stage_with(branches: Vec<Vec<DenseLayer>>, agg: DenseLayer, radii: Vec<f64>, nq: Vec<usize>) -> SAStage {
        SAStage::new(2, radii, nq, branches, agg).unwrap()
    }

    #[test]
    fn identical_neighbours_pool_to_their_row() {
        let coords = array![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]];
        let feats = array![[0.5, 2.0], [0.5, 2.0], [0.5, 2.0]];
        let prev = StageOutput { coords, feats, indices: vec![0, 1, 2] };
        let st = stage_with(vec![vec![identity(5)]], identity(5), vec![1.0], vec![3]);
        let out = set_abstraction(&st, &prev, &SampleResult { indices: vec![1] }).unwrap();
        assert_eq!(out.feats, array![[0.5, 2.0, 0.0, 0.0, 0.0]]);
    }

    #[test]
    fn two_branch_width_is_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = crate::config::SaSpec::parse("SA(4096,[0.2,0.8],[16,32],[[16,16,32],[32,32,64]])").unwrap();
        assert_eq!(spec.concat_dim(), 96);
        let mut spec = spec;
        spec.agg = 64;
        let st = SAStage::init(&spec, 1, &mut rng);
        assert_eq!(st.agg.in_dim(), 96);
        assert_eq!(st.agg.out_dim(), 64);
        let coords = Array2::from_shape_fn((40, 3), |_| rng.gen_range(-1.0..1.0));
        let feats = Array2::from_shape_fn((40, 1), |_| rng.gen_range(-1.0..1.0));
        let prev = StageOutput { coords, feats, indices: (0..40).collect() };
        let out = set_abstraction(&st, &prev, &SampleResult { indices: vec![0, 5, 9] }).unwrap();
        assert_eq!(out.feats.dim(), (3, 64));
    }

    #[test]
    fn neighbour_permutation_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut spec = crate::config::SaSpec::parse("SA(8,[0.5,1.0],[64,64],[[8,8],[8]])").unwrap();
        spec.agg = 6;
        let st = SAStage::init(&spec, 2, &mut rng);
        let n = 30;
        let coords = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-0.6..0.6));
        let feats = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let prev = StageOutput { coords: coords.clone(), feats: feats.clone(), indices: (0..n).collect() };
        let a = set_abstraction(&st, &prev, &SampleResult { indices: vec![0] }).unwrap();
        // reverse every point except the center (kept at index 0)
        let mut perm: Vec<usize> = (1..n).rev().collect();
        perm.insert(0, 0);
        let pc = Array2::from_shape_fn((n, 3), |(r, c)| coords[[perm[r], c]]);
        let pf = Array2::from_shape_fn((n, 2), |(r, c)| feats[[perm[r], c]]);
        let prev2 = StageOutput { coords: pc, feats: pf, indices: (0..n).collect() };
        let b = set_abstraction(&st, &prev2, &SampleResult { indices: vec![0] }).unwrap();
        for (x, y) in a.feats.iter().zip(b.feats.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_leaves_features_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut spec = crate::config::SaSpec::parse("SA(8,[0.4,0.9],[8,16],[[8,8],[8]])").unwrap();
        spec.agg = 6;
        let st = SAStage::init(&spec, 2, &mut rng);
        let coords = Array2::from_shape_fn((50, 3), |_| rng.gen_range(-1.0..1.0));
        let feats = Array2::from_shape_fn((50, 2), |_| rng.gen_range(-1.0..1.0));
        let prev = StageOutput { coords: coords.clone(), feats: feats.clone(), indices: (0..50).collect() };
        let sample = SampleResult { indices: vec![0, 7, 21, 33] };
        let a = set_abstraction(&st, &prev, &sample).unwrap();
        let shifted = &coords + &array![[0.25, -3.0, 1.5]];
        let prev2 = StageOutput { coords: shifted, feats, indices: (0..50).collect() };
        let b = set_abstraction(&st, &prev2, &sample).unwrap();
        for (x, y) in a.feats.iter().zip(b.feats.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
