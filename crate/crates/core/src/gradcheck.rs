//! Central finite-difference checks of the analytic gradients.

use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{mlp_on_tape, xavier, Activation, LayerVars};
use crate::config::{FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::grid::GridSpec;
use crate::heads::heatmap_target;
use crate::losses::{heatmap_loss_grad, sampling_loss_grad};
use crate::model::Model;
use crate::neck::{gaussian_density_dsigma, pdm_on_tape, scale_coefficient, PdmOptions};
use crate::scene::SceneSample;
use crate::scenegen::{generate_scene, ClassSpec, ScenarioSpec};
use crate::tape::{Tape, Var};

/// Base step; the step for an entry is `H * max(1, |x|)`.
pub const H: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;
const MAX_RESAMPLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Linear,
    Dense,
    SamplingLoss,
    ScaleCoefficient,
    Fusion,
    HeatmapLoss,
    Model,
}

impl Target {
    pub const ALL: [Target; 7] = [
        Target::Linear,
        Target::Dense,
        Target::SamplingLoss,
        Target::ScaleCoefficient,
        Target::Fusion,
        Target::HeatmapLoss,
        Target::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Linear => "linear",
            Target::Dense => "dense",
            Target::SamplingLoss => "sampling_loss",
            Target::ScaleCoefficient => "scale_coefficient",
            Target::Fusion => "fusion",
            Target::HeatmapLoss => "heatmap_loss",
            Target::Model => "model",
        }
    }
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck target `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    /// Entries skipped because a discrete decision changed within the step.
    pub resampled: usize,
}

impl GradCheck {
    fn merge(&mut self, o: GradCheck) {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
        self.resampled += o.resampled;
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks `entries` draws against `analytic`. `f` returns the scalar and the structural
/// signature at a parameter setting; a signature change at either side resamples the entry.
fn check_entries<R: Rng>(
    x: &mut [Array2<f64>],
    analytic: &[Array2<f64>],
    base_sig: u64,
    per_tensor: usize,
    rng: &mut R,
    f: &mut dyn FnMut(&[Array2<f64>]) -> Result<(f64, u64)>,
) -> Result<GradCheck> {
    let mut out = GradCheck::default();
    for t in 0..x.len() {
        if x[t].is_empty() {
            continue;
        }
        let mut done = 0;
        let mut tries = 0;
        while done < per_tensor.min(x[t].len()) && tries < per_tensor + MAX_RESAMPLES {
            tries += 1;
            let e = rng.gen_range(0..x[t].len());
            let (r, c) = (e / x[t].ncols(), e % x[t].ncols());
            let orig = x[t][[r, c]];
            let h = H * orig.abs().max(1.0);
            x[t][[r, c]] = orig + h;
            let (fp, sp) = f(x)?;
            x[t][[r, c]] = orig - h;
            let (fm, sm) = f(x)?;
            x[t][[r, c]] = orig;
            if sp != base_sig || sm != base_sig {
                out.resampled += 1;
                continue;
            }
            let n = (fp - fm) / (2.0 * h);
            out.worst = out.worst.max(relative_error(analytic[t][[r, c]], n));
            out.checked += 1;
            done += 1;
        }
    }
    Ok(out)
}

type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Gradient check of a scalar graph built over parameter tensors.
fn check_graph<R: Rng>(mut x: Vec<Array2<f64>>, per_tensor: usize, rng: &mut R, graph: &Graph) -> Result<GradCheck> {
    let run = |x: &[Array2<f64>]| -> Result<(Tape, Var)> {
        let mut tape = Tape::tracking();
        let vars: Vec<Var> = x.iter().enumerate().map(|(i, v)| tape.param(i, v)).collect();
        let root = graph(&mut tape, &vars)?;
        Ok((tape, root))
    };
    let (tape, root) = run(&x)?;
    let mut analytic: Vec<Array2<f64>> = x.iter().map(|v| Array2::zeros(v.dim())).collect();
    for (id, g) in tape.backward(root) {
        analytic[id] = g;
    }
    let sig = tape.signature();
    let mut f = |x: &[Array2<f64>]| -> Result<(f64, u64)> {
        let (t, r) = run(x)?;
        Ok((t.scalar(r), t.signature()))
    };
    check_entries(&mut x, &analytic, sig, per_tensor, rng, &mut f)
}

fn uniform<R: Rng>(rng: &mut R, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.gen_range(lo..hi))
}

/// Weighted sum of `v` against fixed random weights.
fn project(tape: &mut Tape, v: Var, weights: &Array2<f64>) -> Var {
    let val = (tape.value(v) * weights).sum();
    tape.loss(val, vec![(v, weights.clone())])
}

fn dense_trial<R: Rng>(rng: &mut R, acts: &[Activation]) -> Result<GradCheck> {
    let n = rng.gen_range(2..6);
    let mut dims = vec![rng.gen_range(2..6)];
    for _ in acts {
        dims.push(rng.gen_range(2..7));
    }
    let mut x = vec![uniform(rng, n, dims[0], -1.0, 1.0)];
    for w in dims.windows(2) {
        x.push(xavier(w[0], w[1], rng));
        x.push(uniform(rng, 1, w[1], -0.3, 0.3));
    }
    let proj = uniform(rng, n, *dims.last().unwrap(), -1.0, 1.0);
    let acts = acts.to_vec();
    check_graph(x, 3, rng, &move |tape, v| {
        let layers: Vec<LayerVars> = acts.iter().enumerate().map(|(i, &act)| LayerVars { w: v[1 + 2 * i], b: v[2 + 2 * i], act }).collect();
        let out = mlp_on_tape(tape, v[0], &layers);
        Ok(project(tape, out, &proj))
    })
}

fn small_scene(seed: u64, points: usize) -> Result<SceneSample> {
    let spec = ScenarioSpec {
        seed,
        scenes: 1,
        boxes: (1, 1),
        classes: vec![ClassSpec { size_min: [3.4, 1.5, 1.4], size_max: [4.4, 1.9, 1.7] }],
        points_per_box: (points * 5 / 8, points * 5 / 8),
        clutter: points - points * 5 / 8,
        area: [4.0, -6.0, 20.0, 6.0],
        ..ScenarioSpec::micro()
    };
    generate_scene(&spec, 0)
}

fn sampling_trial<R: Rng>(rng: &mut R, seed: u64) -> Result<GradCheck> {
    let scene = small_scene(seed, 24)?;
    let classes = rng.gen_range(1..3);
    let scores = uniform(rng, scene.len(), classes, 0.05, 0.95);
    check_graph(vec![scores], 6, rng, &|tape, v| {
        let (val, g) = sampling_loss_grad(tape.value(v[0]).view(), &scene)?;
        Ok(tape.loss(val, vec![(v[0], g)]))
    })
}

fn scale_trial<R: Rng>(rng: &mut R) -> Result<GradCheck> {
    let mut out = GradCheck::default();
    let sigma: f64 = rng.gen_range(0.3..3.0);
    let d = (rng.gen_range(-3..=3i64), rng.gen_range(-3..=3i64));
    let (c, t) = ((5usize, 5usize), ((5 + d.0) as usize, (5 + d.1) as usize));
    let h = H * sigma.max(1.0);
    let n = (scale_coefficient(sigma + h, c, t)? - scale_coefficient(sigma - h, c, t)?) / (2.0 * h);
    let a = gaussian_density_dsigma(sigma, (d.0 * d.0 + d.1 * d.1) as f64);
    out.worst = relative_error(a, n);
    out.checked = 1;
    let sig = uniform(rng, 6, 1, 0.3, 3.0);
    let d2: Vec<f64> = (0..6).map(|_| rng.gen_range(0..9) as f64).collect();
    let proj = uniform(rng, 6, 1, -1.0, 1.0);
    out.merge(check_graph(vec![sig], 3, rng, &move |tape, v| {
        let g = tape.gaussian(v[0], d2.clone());
        Ok(project(tape, g, &proj))
    })?);
    Ok(out)
}

fn fusion_trial<R: Rng>(rng: &mut R) -> Result<GradCheck> {
    let spec = GridSpec::new([0.0, 0.0, -3.0, 8.0, 8.0, 1.0], 8, 8)?;
    let n = rng.gen_range(3..8);
    let c = 2 * rng.gen_range(1..4);
    let mut coords = uniform(rng, n, 3, 0.0, 8.0);
    coords.column_mut(2).fill(0.0);
    let degree = rng.gen_range(1..4);
    let k = (degree + 1) * (degree + 1);
    let mut out = GradCheck::default();
    for fusion in [FusionMode::Split, FusionMode::Straight, FusionMode::HalfSum] {
        let opts = PdmOptions { fusion, ..PdmOptions::default() };
        let out_dim = if fusion == FusionMode::HalfSum { c / 2 } else { c };
        let x = vec![
            uniform(rng, n, c, -1.0, 1.0),
            xavier(c, k, rng),
            uniform(rng, 1, k, -0.2, 0.2),
            xavier(c, 1, rng),
            uniform(rng, 1, 1, -0.2, 0.2),
        ];
        let proj = uniform(rng, spec.num_cells(), out_dim, -1.0, 1.0);
        let coords = coords.clone();
        out.merge(check_graph(x, 4, rng, &move |tape, v| {
            let sh = [LayerVars { w: v[1], b: v[2], act: Activation::None }];
            let sg = [LayerVars { w: v[3], b: v[4], act: Activation::Softplus }];
            let p = pdm_on_tape(tape, &coords, v[0], &spec, &sh, &sg, &opts)?;
            let rows = tape.value(p.feats).nrows();
            let w = proj.slice(ndarray::s![..rows, ..]).to_owned();
            Ok(project(tape, p.feats, &w))
        })?);
    }
    Ok(out)
}

fn heatmap_trial<R: Rng>(rng: &mut R) -> Result<GradCheck> {
    let spec = GridSpec::new([0.0, -6.4, -3.0, 12.8, 6.4, 1.0], 16, 16)?;
    let classes = rng.gen_range(1..3);
    let gt: Vec<Box3D> = (0..rng.gen_range(1..4))
        .map(|_| Box3D::gt([rng.gen_range(1.0..12.0), rng.gen_range(-5.0..5.0), -1.0], [3.9, 1.6, 1.5], rng.gen_range(-1.0..1.0), rng.gen_range(0..classes)))
        .collect::<Result<_>>()?;
    let target = heatmap_target(&gt, &spec, classes, 3.0)?;
    let x: Vec<Array2<f64>> = target
        .planes
        .iter()
        .map(|t| t.mapv(|v| (v + rng.gen_range(-0.25..0.25)).clamp(0.02, 0.98)))
        .collect();
    check_graph(x, 8, rng, &|tape, v| {
        let views: Vec<_> = v.iter().map(|&p| tape.value(p).view()).collect();
        let (val, g) = heatmap_loss_grad(&views, &target)?;
        let parts = v.iter().copied().zip(g).collect();
        Ok(tape.loss(val, parts))
    })
}

/// Checks the total loss of `model` on `scene`, `per_tensor` entries of every tensor.
pub fn check_model<R: Rng>(model: &mut Model, scene: &SceneSample, per_tensor: usize, rng: &mut R) -> Result<GradCheck> {
    let step = model.train_step(scene)?;
    let mut x = std::mem::take(&mut model.params.values);
    let mut f = |x: &[Array2<f64>]| -> Result<(f64, u64)> {
        let mut m = model.clone();
        m.params.values = x.to_vec();
        let (l, s) = m.loss_with_signature(scene)?;
        Ok((l.total, s))
    };
    let out = check_entries(&mut x, &step.grads, step.signature, per_tensor, rng, &mut f);
    model.params.values = x;
    out
}

fn model_trial<R: Rng>(rng: &mut R, seed: u64) -> Result<GradCheck> {
    let cfg = ModelConfig { seed, ..ModelConfig::micro() };
    let mut model = Model::new(cfg)?;
    let scene = small_scene(seed, 16)?;
    check_model(&mut model, &scene, 2, rng)
}

/// Worst relative error over `trials` random instances of `target`.
pub fn gradcheck(target: Target, trials: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::default();
    for t in 0..trials {
        let r = match target {
            Target::Linear => dense_trial(&mut rng, &[Activation::None])?,
            Target::Dense => {
                let relu_mix = [Activation::Relu, Activation::Sigmoid, Activation::Relu, Activation::Softplus, Activation::None];
                dense_trial(&mut rng, &relu_mix)?
            }
            Target::SamplingLoss => sampling_trial(&mut rng, seed.wrapping_add(t as u64))?,
            Target::ScaleCoefficient => scale_trial(&mut rng)?,
            Target::Fusion => fusion_trial(&mut rng)?,
            Target::HeatmapLoss => heatmap_trial(&mut rng)?,
            Target::Model => model_trial(&mut rng, seed.wrapping_add(t as u64))?,
        };
        out.merge(r);
    }
    Ok(out)
}
