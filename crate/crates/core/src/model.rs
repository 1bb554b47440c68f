//! The full detector: backbone stages, vote head, dilation neck, heatmap head and the box
//! head, all recorded on one tape.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{group_pool_on_tape, mlp_on_tape, xavier, Activation, LayerVars};
use crate::config::{HeadMode, ModelConfig, SaSpec, Sampler};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::heads::{
    channel_attention_on_tape, decode_boxes, heatmap_peaks, heatmap_target, nms, reg_width, Detection, Heatmap, Peak,
    SeedSource, VoteSet,
};
use crate::losses::{
    assign_seeds, box_losses, cls_loss, heatmap_loss_grad, masked_bce, vote_loss, LossBreakdown, Part,
};
use crate::neck::{pdm_on_tape, tape_to_grid, DilatedGrid, PdmOptions, StructuringElement};
use crate::sampling::{centrality_mask, farthest_rows, sample_random, sample_topk_foreground, ForegroundScores};
use crate::scene::SceneSample;
use crate::tape::{Tape, Var};

/// Initial bias of the heatmap output, a foreground prior of about 0.1.
const HEAT_PRIOR_LOGIT: f64 = -2.19;

/// Named parameter tensors. Biases are stored as `1 x out` rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, value: Array2<f64>) -> usize {
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies every tensor whose name and shape exist in `other`; returns how many were copied.
    pub fn copy_from(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(v) = other.get(name) {
                if v.dim() == self.values[i].dim() {
                    self.values[i].assign(v);
                    n += 1;
                }
            }
        }
        n
    }

    /// Text manifest (`name rows cols` per line, then `end`) followed by little-endian f64 data.
    pub fn save<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "pdm-ssd-checkpoint 1")?;
        writeln!(out, "tensors {}", self.len())?;
        for (n, v) in self.names.iter().zip(&self.values) {
            writeln!(out, "{n} {} {}", v.nrows(), v.ncols())?;
        }
        writeln!(out, "end")?;
        for v in &self.values {
            for x in v.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut input: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut line = String::new();
        let read_line = |input: &mut R, line: &mut String| -> Result<()> {
            line.clear();
            if input.read_line(line)? == 0 {
                return Err(bad("truncated manifest"));
            }
            Ok(())
        };
        read_line(&mut input, &mut line)?;
        if line.trim() != "pdm-ssd-checkpoint 1" {
            return Err(bad("unrecognised checkpoint header"));
        }
        read_line(&mut input, &mut line)?;
        let n: usize = line
            .trim()
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected `tensors <n>`"))?;
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            read_line(&mut input, &mut line)?;
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 3 {
                return Err(bad("manifest lines are `name rows cols`"));
            }
            let r: usize = t[1].parse().map_err(|_| bad("bad row count"))?;
            let c: usize = t[2].parse().map_err(|_| bad("bad column count"))?;
            shapes.push((t[0].to_string(), r, c));
        }
        read_line(&mut input, &mut line)?;
        if line.trim() != "end" {
            return Err(bad("manifest must finish with `end`"));
        }
        let mut store = ParamStore::default();
        let mut buf = [0u8; 8];
        for (name, r, c) in shapes {
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r * c {
                input.read_exact(&mut buf).map_err(|_| bad("tensor data truncated"))?;
                data.push(f64::from_le_bytes(buf));
            }
            let a = Array2::from_shape_vec((r, c), data).map_err(|e| bad(&e.to_string()))?;
            store.push(name, a);
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerRef {
    w: usize,
    b: usize,
    act: Activation,
}

#[derive(Debug, Clone)]
struct StageRef {
    spec: SaSpec,
    branches: Vec<Vec<LayerRef>>,
    agg: LayerRef,
    semantic: Option<Vec<LayerRef>>,
}

#[derive(Debug, Clone)]
struct NeckRef {
    sh: Vec<LayerRef>,
    sigma: Vec<LayerRef>,
    heat: Vec<LayerRef>,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Vec<LayerRef>,
    stages: Vec<StageRef>,
    vote: Vec<LayerRef>,
    agg: StageRef,
    neck: Option<NeckRef>,
    attention: Option<Vec<LayerRef>>,
    cls: Vec<LayerRef>,
    reg: Vec<LayerRef>,
}

struct Builder<'a, R: Rng> {
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn layer(&mut self, name: &str, inp: usize, out: usize, act: Activation) -> LayerRef {
        let w = self.store.push(format!("{name}.w"), xavier(inp, out, self.rng));
        let bias = Array2::from_shape_simple_fn((1, out), || self.rng.gen_range(-0.01..0.01));
        let b = self.store.push(format!("{name}.b"), bias);
        LayerRef { w, b, act }
    }

    fn mlp(&mut self, name: &str, inp: usize, widths: &[usize], last: Activation) -> Vec<LayerRef> {
        let mut prev = inp;
        widths
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let act = if i + 1 == widths.len() { last } else { Activation::Relu };
                let l = self.layer(&format!("{name}.{i}"), prev, d, act);
                prev = d;
                l
            })
            .collect()
    }

    fn stage(&mut self, name: &str, spec: &SaSpec, inp: usize, semantic: Option<(usize, usize)>) -> StageRef {
        let branches = spec
            .dims
            .iter()
            .enumerate()
            .map(|(j, dims)| self.mlp(&format!("{name}.b{j}"), inp + 3, dims, Activation::Relu))
            .collect();
        let agg = self.layer(&format!("{name}.agg"), spec.concat_dim(), spec.agg, Activation::Relu);
        let semantic = semantic.map(|(hidden, classes)| self.mlp(&format!("{name}.sem"), inp, &[hidden, classes], Activation::Sigmoid));
        StageRef { spec: spec.clone(), branches, agg, semantic }
    }
}

/// Everything produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Detections after score thresholding and NMS.
    pub detections: Vec<Detection>,
    /// One decoded box per seed, before NMS.
    pub raw: Vec<Detection>,
    /// Seeds produced by the vote head alone.
    pub votes: VoteSet,
    /// Seeds fed to the box head (votes plus heatmap peaks in joint mode).
    pub seeds: VoteSet,
    pub peaks: Vec<Peak>,
    pub heatmap: Option<Heatmap>,
    pub grid: Option<DilatedGrid>,
    /// Scene point indices kept by each backbone stage.
    pub stage_points: Vec<Vec<usize>>,
}

/// Loss parts, gradients by parameter id and the structural signature of the pass.
#[derive(Debug, Clone)]
pub struct TrainStep {
    pub losses: LossBreakdown,
    pub grads: Vec<Array2<f64>>,
    pub signature: u64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

struct Pass {
    inference: Inference,
    total: Option<Var>,
    losses: LossBreakdown,
}

impl Model {
    /// Builds and randomly initialises a model; weights depend only on `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = Builder { store: ParamStore::default(), rng: &mut rng };
        let nc = cfg.n_classes;
        let input_dim = 1;
        let embed = b.mlp("embed", input_dim, &cfg.embed, Activation::Relu);
        let mut dim = cfg.embed.last().copied().unwrap_or(input_dim);
        let mut stages = Vec::new();
        for (s, spec) in cfg.stages.iter().enumerate() {
            let sem = (spec.sampler == Sampler::TopK).then_some((cfg.semantic_hidden, nc));
            stages.push(b.stage(&format!("sa{s}"), spec, dim, sem));
            dim = spec.agg;
        }
        let vote = b.mlp("vote", dim, &[cfg.vote_hidden, 3], Activation::None);
        let agg = b.stage("agg", &cfg.aggregation, dim, None);
        let mut head_in = cfg.aggregation.agg;
        let (neck, attention) = if cfg.neck_enabled {
            let grid_dim = if cfg.fusion == crate::config::FusionMode::HalfSum { dim / 2 } else { dim };
            let neck = NeckRef {
                sh: b.mlp("neck.sh", dim, &[cfg.sh_coeff_count()], Activation::None),
                sigma: b.mlp("neck.sigma", dim, &[1], Activation::Softplus),
                heat: b.mlp("neck.heat", grid_dim, &[cfg.heat_hidden, nc], Activation::Sigmoid),
            };
            let att = if cfg.head_mode == HeadMode::Joint {
                let w = head_in + grid_dim;
                head_in = w;
                Some(b.mlp("att", w, &[cfg.attention_hidden, w], Activation::None))
            } else {
                None
            };
            (Some(neck), att)
        } else {
            (None, None)
        };
        let mut cls_w = cfg.cls_hidden.clone();
        cls_w.push(nc);
        let cls = b.mlp("cls", head_in, &cls_w, Activation::None);
        let mut reg_w = cfg.reg_hidden.clone();
        reg_w.push(reg_width(cfg.angle_bins));
        let reg = b.mlp("reg", head_in, &reg_w, Activation::None);
        let mut params = b.store;
        if let Some(n) = &neck {
            let last = n.heat[n.heat.len() - 1].b;
            params.values[last].fill(HEAT_PRIOR_LOGIT);
        }
        let layout = Layout { embed, stages, vote, agg, neck, attention, cls, reg };
        Ok(Self { cfg, params, layout })
    }

    /// Replaces the weights with `params`, which must match names and shapes exactly.
    pub fn with_params(mut self, params: ParamStore) -> Result<Self> {
        if params.names != self.params.names {
            return Err(Error::Checkpoint("tensor names do not match the configured model".into()));
        }
        for (i, (a, b)) in params.values.iter().zip(&self.params.values).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::Checkpoint(format!("tensor {} has shape {:?}, expected {:?}", params.names[i], a.dim(), b.dim())));
            }
        }
        self.params = params;
        Ok(self)
    }

    fn pdm_options(&self) -> Result<PdmOptions> {
        Ok(PdmOptions {
            se: StructuringElement::square(self.cfg.se_size)?,
            fusion: self.cfg.fusion,
            theta: self.cfg.theta,
            sigma_floor: self.cfg.sigma_floor,
            scale_enabled: self.cfg.scale_enabled,
        })
    }

    fn vars(&self, tape: &mut Tape, layers: &[LayerRef]) -> Vec<LayerVars> {
        layers
            .iter()
            .map(|l| LayerVars {
                w: tape.param(l.w, &self.params.values[l.w]),
                b: tape.param(l.b, &self.params.values[l.b]),
                act: l.act,
            })
            .collect()
    }

    fn stage_pool(&self, tape: &mut Tape, st: &StageRef, centers: Var, coords: &Array2<f64>, feats: Var) -> Result<Var> {
        let branches: Vec<Vec<LayerVars>> = st.branches.iter().map(|b| self.vars(tape, b)).collect();
        let agg = self.vars(tape, std::slice::from_ref(&st.agg));
        group_pool_on_tape(tape, centers, coords, feats, &st.spec.radii, &st.spec.nquery, &branches, Some(&agg[0]))
    }

    fn pass(&self, tape: &mut Tape, cloud: &PointCloud, scene: Option<&SceneSample>) -> Result<Pass> {
        let cfg = &self.cfg;
        if cloud.is_empty() {
            return Err(Error::EmptyInput);
        }
        let w = &cfg.weights;
        let mut losses = LossBreakdown::default();
        let mut terms: Vec<(Var, f64)> = Vec::new();

        let mut coords = cloud.coords.clone();
        let mut origins: Vec<usize> = (0..cloud.len()).collect();
        let x = tape.constant(cloud.feats.column(cloud.feats.ncols() - 1).to_owned().insert_axis(Axis(1)));
        let embed = self.vars(tape, &self.layout.embed);
        let mut feats = mlp_on_tape(tape, x, &embed);
        let mut stage_points = Vec::new();

        for (s, st) in self.layout.stages.iter().enumerate() {
            let n = coords.nrows();
            let k = st.spec.npoint.min(n);
            let sample = match st.spec.sampler {
                Sampler::Dfps => farthest_rows(coords.view(), k, cfg.fps_start.min(n - 1))?,
                Sampler::FeatFps => farthest_rows(tape.value(feats).view(), k, cfg.fps_start.min(n - 1))?,
                Sampler::Random => sample_random(n, k, cfg.seed.wrapping_add(s as u64)),
                Sampler::TopK => {
                    let sem = self.layout.stages[s].semantic.as_ref().expect("top-k stage has a semantic head");
                    let sem = self.vars(tape, sem);
                    let probs = mlp_on_tape(tape, feats, &sem);
                    let pv = tape.value(probs);
                    let scores = ForegroundScores {
                        scores: pv.rows().into_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect(),
                    };
                    if let Some(sc) = scene {
                        let classes: Vec<i64> = origins.iter().map(|&o| sc.labels[o]).collect();
                        let masks: Vec<f64> = origins
                            .iter()
                            .map(|&o| match sc.owners[o] {
                                b if b >= 0 => centrality_mask(&sc.gt[b as usize], sc.cloud.point(o)),
                                _ => 0.0,
                            })
                            .collect();
                        let (v, g) = masked_bce(pv.view(), &classes, &masks)?;
                        losses.sample += v;
                        let node = tape.loss(v, vec![(probs, g)]);
                        terms.push((node, w.sample));
                    }
                    sample_topk_foreground(&scores, k)
                }
            };
            tape.note(hash_indices(&sample.indices));
            let mut centers = Array2::zeros((sample.indices.len(), 3));
            for (r, &i) in sample.indices.iter().enumerate() {
                centers.row_mut(r).assign(&coords.row(i));
            }
            let cv = tape.constant(centers.clone());
            feats = self.stage_pool(tape, st, cv, &coords, feats)?;
            coords = centers;
            origins = sample.indices.iter().map(|&i| origins[i]).collect();
            stage_points.push(origins.clone());
        }

        let vote_layers = self.vars(tape, &self.layout.vote);
        let offsets = mlp_on_tape(tape, feats, &vote_layers);
        let base = tape.constant(coords.clone());
        let votes = tape.add(base, offsets);
        let votes_v = VoteSet {
            origins: (0..coords.nrows()).collect(),
            positions: tape.value(votes).clone(),
            sources: vec![SeedSource::Vote; coords.nrows()],
        };
        if let Some(sc) = scene {
            let owners: Vec<i64> = origins.iter().map(|&o| sc.owners[o]).collect();
            let (v, g) = vote_loss(tape.value(votes).view(), &owners, &sc.gt)?;
            losses.vote = v;
            let node = tape.loss(v, vec![(votes, g)]);
            terms.push((node, w.vote));
        }

        let joint = self.layout.attention.is_some();
        let mut seeds = votes;
        let mut seeds_v = votes_v.clone();
        let mut grid_rows = None;
        let mut heatmap = None;
        let mut grid = None;
        let mut peaks = Vec::new();
        if let Some(neck) = self.layout.neck.as_ref().filter(|_| joint || scene.is_some()) {
            let sh = self.vars(tape, &neck.sh);
            let sg = self.vars(tape, &neck.sigma);
            let pdm = pdm_on_tape(tape, &coords, feats, &cfg.grid, &sh, &sg, &self.pdm_options()?)?;
            let heat = self.vars(tape, &neck.heat);
            let cell_probs = mlp_on_tape(tape, pdm.feats, &heat);
            let gdim = tape.value(pdm.feats).ncols();
            let zero = tape.constant(Array2::zeros((1, gdim)));
            let empty_probs = mlp_on_tape(tape, zero, &heat);
            let mut hm = Heatmap::zeros(cfg.grid, cfg.n_classes);
            {
                let ev = tape.value(empty_probs);
                for (c, p) in hm.planes.iter_mut().enumerate() {
                    p.fill(ev[[0, c]]);
                }
                let cv = tape.value(cell_probs);
                for (r, &(ix, iy)) in pdm.cells.iter().enumerate() {
                    for (c, p) in hm.planes.iter_mut().enumerate() {
                        p[[iy, ix]] = cv[[r, c]];
                    }
                }
            }
            if let Some(sc) = scene {
                let target = heatmap_target(&sc.gt, &cfg.grid, cfg.n_classes, cfg.heat_sigma_div)?;
                let views: Vec<_> = hm.planes.iter().map(|p| p.view()).collect();
                let (v, g) = heatmap_loss_grad(&views, &target)?;
                let mut g_cells = Array2::zeros((pdm.cells.len(), cfg.n_classes));
                let mut g_empty = Array2::zeros((1, cfg.n_classes));
                for (c, gp) in g.iter().enumerate() {
                    g_empty[[0, c]] = gp.sum();
                }
                for (r, &(ix, iy)) in pdm.cells.iter().enumerate() {
                    for (c, gp) in g.iter().enumerate() {
                        g_cells[[r, c]] = gp[[iy, ix]];
                        g_empty[[0, c]] -= gp[[iy, ix]];
                    }
                }
                losses.heatmap = v;
                let node = tape.loss(v, vec![(cell_probs, g_cells), (empty_probs, g_empty)]);
                terms.push((node, w.heatmap));
            }
            if joint {
                peaks = heatmap_peaks(&hm, cfg.top_k, &cfg.anchor_z);
                tape.note(hash_indices(&peaks.iter().map(|p| cfg.grid.linear(p.cell) * cfg.n_classes + p.class).collect::<Vec<_>>()));
                seeds_v = votes_v.supplement(&peaks, &cfg.grid);
                if !peaks.is_empty() {
                    let pc = tape.constant(seeds_v.positions.slice(ndarray::s![votes_v.len().., ..]).to_owned());
                    seeds = tape.vstack(&[votes, pc]);
                }
                let sv = tape.value(seeds).clone();
                let idx: Vec<Option<usize>> = sv
                    .rows()
                    .into_iter()
                    .map(|r| cfg.grid.world_to_cell([r[0], r[1]]).and_then(|c| pdm.index.get(&c).copied()))
                    .collect();
                grid_rows = Some(tape.gather(pdm.feats, idx));
            }
            grid = Some(tape_to_grid(tape, &pdm, &cfg.grid));
            heatmap = Some(hm);
        }

        let ctx = self.stage_pool(tape, &self.layout.agg, seeds, &coords, feats)?;
        let head_x = match (&self.layout.attention, grid_rows) {
            (Some(att), Some(g)) => {
                let att = self.vars(tape, att);
                channel_attention_on_tape(tape, ctx, g, &att)
            }
            _ => ctx,
        };
        let cls_l = self.vars(tape, &self.layout.cls);
        let logits = mlp_on_tape(tape, head_x, &cls_l);
        let reg_l = self.vars(tape, &self.layout.reg);
        let reg = mlp_on_tape(tape, head_x, &reg_l);

        let seed_vals = tape.value(seeds).clone();
        let raw = decode_boxes(tape.value(reg).view(), tape.value(logits).view(), seed_vals.view(), cfg.angle_bins)?;
        let detections = nms(&raw, cfg.nms_iou, cfg.score_thr);

        if let Some(sc) = scene {
            let assign = assign_seeds(seed_vals.view(), &sc.gt);
            tape.note(hash_indices(&assign.iter().map(|a| a.map_or(0, |g| g + 1)).collect::<Vec<_>>()));
            let probs = tape.act(logits, Activation::Sigmoid);
            let c = cls_loss(tape.value(probs).view(), seed_vals.view(), &assign, &sc.gt, cfg.cls_soft_targets)?;
            losses.cls = c.value;
            let mut push = |tape: &mut Tape, pred: Var, p: Part, weight: f64| {
                let node = tape.loss(p.value, vec![(pred, p.d_pred), (seeds, p.d_seed)]);
                terms.push((node, weight));
            };
            push(tape, probs, c, w.cls);
            let b = box_losses(tape.value(reg).view(), seed_vals.view(), &assign, &sc.gt, cfg.angle_bins)?;
            tape.note(hash_indices(&b.choices.iter().map(|&(p, f)| 2 * p + f as usize).collect::<Vec<_>>()));
            losses.loc = b.loc.value;
            losses.size = b.size.value;
            losses.angle_bin = b.angle_bin.value;
            losses.angle_res = b.angle_res.value;
            losses.corner = b.corner.value;
            push(tape, reg, b.loc, w.loc);
            push(tape, reg, b.size, w.size);
            push(tape, reg, b.angle_bin, w.angle_bin);
            push(tape, reg, b.angle_res, w.angle_res);
            push(tape, reg, b.corner, w.corner);
        }

        let total = if scene.is_some() && !terms.is_empty() { Some(tape.weighted_sum(terms)) } else { None };
        let inference = Inference { detections, raw, votes: votes_v, seeds: seeds_v, peaks, heatmap, grid, stage_points };
        Ok(Pass { inference, total, losses })
    }

    /// Inference on a bare point cloud.
    pub fn infer(&self, cloud: &PointCloud) -> Result<Inference> {
        let mut tape = Tape::new();
        Ok(self.pass(&mut tape, cloud, None)?.inference)
    }

    /// Loss parts (with the L2 term) and their weighted total, without gradients.
    pub fn loss(&self, scene: &SceneSample) -> Result<LossBreakdown> {
        Ok(self.loss_with_signature(scene)?.0)
    }

    pub fn loss_with_signature(&self, scene: &SceneSample) -> Result<(LossBreakdown, u64)> {
        let mut tape = Tape::tracking();
        let pass = self.pass(&mut tape, &scene.cloud, Some(scene))?;
        Ok((self.finish(pass.losses), tape.signature()))
    }

    fn finish(&self, mut l: LossBreakdown) -> LossBreakdown {
        l.l2 = crate::losses::l2_penalty(self.cfg.l2, &self.params.values);
        l.with_total(&self.cfg.weights)
    }

    /// Forward and backward pass on one labelled scene.
    pub fn train_step(&self, scene: &SceneSample) -> Result<TrainStep> {
        let mut tape = Tape::tracking();
        let pass = self.pass(&mut tape, &scene.cloud, Some(scene))?;
        let lw = self.cfg.weights.weight("l2");
        let mut grads: Vec<Array2<f64>> = self.params.values.iter().map(|v| v * (2.0 * self.cfg.l2 * lw)).collect();
        if let Some(root) = pass.total {
            for (id, g) in tape.backward(root) {
                grads[id] += &g;
            }
        }
        Ok(TrainStep { losses: self.finish(pass.losses), grads, signature: tape.signature() })
    }
}

fn hash_indices(v: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &x in v {
        h ^= x as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h ^ v.len() as u64
}
