//! Model configuration and the flat `key = value` file format.
//!
//! Set-abstraction stages use the compact form
//! `SA(npoint, [radii], [nquery], [[branch dims], ...])`.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    Dfps,
    FeatFps,
    Random,
    TopK,
}

impl Sampler {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "dfps" | "d-fps" => Self::Dfps,
            "featfps" | "feat-fps" => Self::FeatFps,
            "random" => Self::Random,
            "topk" | "top-k" => Self::TopK,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dfps => "dfps",
            Self::FeatFps => "featfps",
            Self::Random => "random",
            Self::TopK => "topk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Split channels in halves, weight by alpha and beta, concatenate.
    Split,
    /// Weight the whole feature by `alpha + beta`.
    Straight,
    /// Split, weight, and add the halves (halves the width).
    HalfSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Auxiliary,
    Joint,
}

/// One set-abstraction stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SaSpec {
    pub npoint: usize,
    pub radii: Vec<f64>,
    pub nquery: Vec<usize>,
    pub dims: Vec<Vec<usize>>,
    /// Width of the aggregation layer applied to the concatenated branches.
    pub agg: usize,
    pub sampler: Sampler,
}

impl SaSpec {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let inner = t
            .strip_prefix("SA(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("expected SA(...), got `{s}`"))?;
        let parts = split_top(inner)?;
        if parts.len() != 4 {
            return Err(format!("SA needs 4 arguments, got {}", parts.len()));
        }
        let npoint = parts[0].parse::<usize>().map_err(|e| format!("npoint: {e}"))?;
        let radii = parse_list::<f64>(&parts[1])?;
        let nquery = parse_list::<usize>(&parts[2])?;
        let dims_inner = parts[3]
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or("dims must be a list of lists")?;
        let dims = if dims_inner.is_empty() {
            Vec::new()
        } else {
            split_top(dims_inner)?.iter().map(|d| parse_list::<usize>(d)).collect::<std::result::Result<Vec<_>, _>>()?
        };
        let agg = dims.iter().map(|d| d.last().copied().unwrap_or(0)).sum();
        Ok(Self { npoint, radii, nquery, dims, agg, sampler: Sampler::Dfps })
    }

    pub fn to_syntax(&self) -> String {
        let mut out = format!("SA({},[", self.npoint);
        out += &join(&self.radii);
        out += "],[";
        out += &join(&self.nquery);
        out += "],[";
        let d: Vec<String> = self.dims.iter().map(|d| format!("[{}]", join(d))).collect();
        out += &d.join(",");
        out += "])";
        out
    }

    /// Width of the concatenated branch outputs.
    pub fn concat_dim(&self) -> usize {
        self.dims.iter().map(|d| d.last().copied().unwrap_or(0)).sum()
    }

    fn validate(&self, what: &str) -> std::result::Result<(), String> {
        if self.radii.len() != self.nquery.len() || self.radii.len() != self.dims.len() {
            return Err(format!("{what}: radii, nquery and dims must have equal length"));
        }
        if self.radii.is_empty() {
            return Err(format!("{what}: at least one branch required"));
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) || self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(format!("{what}: radii must be positive and strictly increasing"));
        }
        if self.nquery.iter().any(|&k| k == 0) || self.dims.iter().any(|d| d.is_empty() || d.contains(&0)) {
            return Err(format!("{what}: nquery and dims must be >= 1"));
        }
        if self.agg == 0 {
            return Err(format!("{what}: aggregation width must be >= 1"));
        }
        Ok(())
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits on commas that are not nested inside brackets.
fn split_top(s: &str) -> std::result::Result<Vec<String>, String> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return Err("unbalanced brackets".into());
        }
        if c == ',' && depth == 0 {
            parts.push(std::mem::take(&mut cur));
        } else {
            cur.push(c);
        }
    }
    if depth != 0 {
        return Err("unbalanced brackets".into());
    }
    parts.push(cur);
    Ok(parts)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let inner = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(|| format!("expected list, got `{s}`"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|v| v.trim().parse::<T>().map_err(|e| format!("`{v}`: {e}"))).collect()
}

fn parse_csv<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|v| v.trim().parse::<T>().map_err(|e| format!("`{v}`: {e}"))).collect()
}

/// Parses `key = value` lines; `#` starts a comment. Returns `(line, key, value)`.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config { line, msg: format!("{key}: {e}") })
}

pub(crate) fn parse_values<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    parse_csv::<T>(v).map_err(|msg| Error::Config { line, msg: format!("{key}: {msg}") })
}

pub(crate) fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config { line, msg: format!("{key}: expected boolean, got `{v}`") }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sample: f64,
    pub vote: f64,
    pub cls: f64,
    pub loc: f64,
    pub size: f64,
    pub angle_bin: f64,
    pub angle_res: f64,
    pub corner: f64,
    pub heatmap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sample: 1.0, vote: 1.0, cls: 1.0, loc: 1.0, size: 1.0, angle_bin: 1.0, angle_res: 1.0, corner: 1.0, heatmap: 1.0 }
    }
}

impl LossWeights {
    /// Weight of a named part; the regulariser carries its own coefficient and weighs 1.
    pub fn weight(&self, name: &str) -> f64 {
        let mut c = *self;
        c.slot(name).map_or(1.0, |v| *v)
    }

    fn slot(&mut self, name: &str) -> Option<&mut f64> {
        Some(match name {
            "sample" => &mut self.sample,
            "vote" => &mut self.vote,
            "cls" => &mut self.cls,
            "loc" => &mut self.loc,
            "size" => &mut self.size,
            "angle_bin" => &mut self.angle_bin,
            "angle_res" => &mut self.angle_res,
            "corner" => &mut self.corner,
            "heatmap" => &mut self.heatmap,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    /// Per-class z used for heatmap-derived seeds.
    pub anchor_z: Vec<f64>,
    pub grid: GridSpec,
    /// Widths of the point feature augmentation layers.
    pub embed: Vec<usize>,
    pub stages: Vec<SaSpec>,
    pub semantic_hidden: usize,
    pub vote_hidden: usize,
    pub aggregation: SaSpec,
    pub attention_hidden: usize,
    pub cls_hidden: Vec<usize>,
    pub reg_hidden: Vec<usize>,
    pub neck_enabled: bool,
    pub sh_degree: usize,
    pub se_size: usize,
    pub fusion: FusionMode,
    pub scale_enabled: bool,
    pub sigma_floor: f64,
    /// Polar angle fed to the spherical-harmonic basis for planar cell offsets.
    pub theta: f64,
    pub heat_hidden: usize,
    pub heat_sigma_div: f64,
    pub head_mode: HeadMode,
    pub top_k: usize,
    pub nms_iou: f64,
    pub score_thr: f64,
    pub angle_bins: usize,
    pub weights: LossWeights,
    pub l2: f64,
    pub cls_soft_targets: bool,
    pub fps_start: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The full-size layout: three stages from the lightweight backbone plus a fourth
    /// 256-point stage, an 256-centroid aggregation and 512-wide heads.
    pub fn kitti() -> Self {
        let sa = |s: &str, agg: usize, sampler: Sampler| {
            let mut st = SaSpec::parse(s).expect("valid default stage");
            st.agg = agg;
            st.sampler = sampler;
            st
        };
        Self {
            n_classes: 3,
            anchor_z: vec![-1.0, -0.6, -0.6],
            grid: GridSpec::kitti(),
            embed: vec![16],
            stages: vec![
                sa("SA(4096,[0.2,0.8],[16,32],[[16,16,32],[32,32,64]])", 64, Sampler::Dfps),
                sa("SA(1024,[0.8,1.6],[16,32],[[64,64,128],[64,96,128]])", 128, Sampler::Dfps),
                sa("SA(512,[1.6,4.8],[16,32],[[128,128,256],[128,256,256]])", 256, Sampler::TopK),
                sa("SA(256,[4.8,6.4],[16,32],[[256,256,256],[256,256,256]])", 256, Sampler::TopK),
            ],
            semantic_hidden: 128,
            vote_hidden: 128,
            aggregation: sa("SA(256,[4.8,6.4],[16,32],[[256,256,512],[256,512,1024]])", 512, Sampler::Dfps),
            attention_hidden: 128,
            cls_hidden: vec![256, 256],
            reg_hidden: vec![256, 256],
            neck_enabled: true,
            sh_degree: 3,
            se_size: 5,
            fusion: FusionMode::Split,
            scale_enabled: true,
            sigma_floor: 0.1,
            theta: FRAC_PI_2,
            heat_hidden: 64,
            heat_sigma_div: 3.0,
            head_mode: HeadMode::Joint,
            top_k: 256,
            nms_iou: 0.1,
            score_thr: 0.1,
            angle_bins: 12,
            weights: LossWeights::default(),
            l2: 0.01,
            cls_soft_targets: true,
            fps_start: 0,
            seed: 0,
        }
    }

    /// Two-stage, 64-wide layout used for desk-scale training.
    pub fn micro() -> Self {
        let sa = |s: &str, agg: usize, sampler: Sampler| {
            let mut st = SaSpec::parse(s).expect("valid micro stage");
            st.agg = agg;
            st.sampler = sampler;
            st
        };
        Self {
            n_classes: 1,
            anchor_z: vec![-0.85],
            grid: GridSpec::new([0.0, -12.8, -3.0, 25.6, 12.8, 1.0], 32, 32).expect("valid micro grid"),
            embed: vec![16],
            stages: vec![
                sa("SA(128,[0.8,1.6],[8,16],[[16,32],[32,32]])", 64, Sampler::Dfps),
                sa("SA(64,[1.6,3.2],[8,16],[[64,64],[64,64]])", 64, Sampler::TopK),
            ],
            semantic_hidden: 32,
            vote_hidden: 32,
            aggregation: sa("SA(64,[2.4,4.0],[8,16],[[64,64],[64,64]])", 64, Sampler::Dfps),
            attention_hidden: 32,
            cls_hidden: vec![64, 64],
            reg_hidden: vec![64, 64],
            neck_enabled: true,
            sh_degree: 3,
            se_size: 5,
            fusion: FusionMode::Split,
            scale_enabled: true,
            sigma_floor: 0.1,
            theta: FRAC_PI_2,
            heat_hidden: 32,
            heat_sigma_div: 3.0,
            head_mode: HeadMode::Joint,
            top_k: 16,
            nms_iou: 0.1,
            score_thr: 0.1,
            angle_bins: 12,
            weights: LossWeights::default(),
            l2: 1e-5,
            cls_soft_targets: true,
            fps_start: 0,
            seed: 0,
        }
    }

    /// Number of spherical-harmonic coefficients, `(L + 1)^2`.
    pub fn sh_coeff_count(&self) -> usize {
        (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    /// Feature width of the last backbone stage.
    pub fn point_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.agg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if self.n_classes == 0 {
            return bad("at least one class required".into());
        }
        if self.anchor_z.len() != self.n_classes {
            return bad(format!("anchor_z has {} entries for {} classes", self.anchor_z.len(), self.n_classes));
        }
        if self.stages.is_empty() {
            return bad("at least one SA stage required".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if let Err(m) = st.validate(&format!("sa.{}", i + 1)) {
                return bad(m);
            }
            if st.npoint == 0 {
                return bad(format!("sa.{}: npoint must be >= 1", i + 1));
            }
        }
        if self.stages.windows(2).any(|w| w[1].npoint >= w[0].npoint) {
            return bad("stage npoints must be strictly decreasing".into());
        }
        if let Err(m) = self.aggregation.validate("agg") {
            return bad(m);
        }
        if !(2..=4).contains(&self.sh_degree) {
            return bad(format!("sh_degree must be 2, 3 or 4, got {}", self.sh_degree));
        }
        if self.se_size % 2 == 0 || self.se_size == 0 {
            return bad(format!("structuring element size must be odd, got {}", self.se_size));
        }
        for (name, v) in [("nms.iou", self.nms_iou), ("score.threshold", self.score_thr)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        if self.angle_bins == 0 || self.top_k == 0 {
            return bad("angle_bins and top_k must be >= 1".into());
        }
        if self.fusion != FusionMode::Straight && self.point_dim() % 2 != 0 {
            return bad("split fusion needs an even feature width in the last stage".into());
        }
        if !(self.sigma_floor > 0.0) || self.l2 < 0.0 {
            return bad("sigma floor must be > 0 and l2 >= 0".into());
        }
        Ok(())
    }

    pub fn from_str_kv(text: &str) -> Result<Self> {
        Self::from_str_kv_with_base(text, Self::kitti())
    }

    /// Parses a config file on top of `base`; keys not present keep their base value.
    pub fn from_str_kv_with_base(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        let mut sh_coeffs: Option<(usize, usize)> = None;
        let mut grid_range = cfg.grid.range;
        let mut grid_size = (cfg.grid.width, cfg.grid.height);
        let entries = parse_kv(text)?;
        // Stage definitions replace the base list wholesale.
        if entries.iter().any(|(_, k, _)| is_stage_def(k)) {
            cfg.stages.clear();
        }
        let mut stage_defs: Vec<(usize, usize, SaSpec)> = Vec::new();
        for (line, key, v) in &entries {
            if is_stage_def(key) {
                let idx: usize = parse_value(*line, key, &key[3..])?;
                let mut st = SaSpec::parse(v).map_err(|msg| Error::Config { line: *line, msg })?;
                st.sampler = if idx <= 2 { Sampler::Dfps } else { Sampler::TopK };
                stage_defs.push((idx, *line, st));
            }
        }
        stage_defs.sort_by_key(|(i, _, _)| *i);
        for (n, (idx, line, st)) in stage_defs.into_iter().enumerate() {
            if idx != n + 1 {
                return Err(Error::Config { line, msg: format!("stage sa.{idx} out of sequence") });
            }
            cfg.stages.push(st);
        }
        for (line, key, v) in &entries {
            let (line, key, v) = (*line, key.as_str(), v.as_str());
            if is_stage_def(key) {
                continue;
            }
            if let Some(rest) = key.strip_prefix("sa.") {
                let (idx, field) = rest.split_once('.').ok_or_else(|| Error::Config { line, msg: format!("bad key `{key}`") })?;
                let idx: usize = parse_value(line, key, idx)?;
                if idx == 0 || idx > cfg.stages.len() {
                    return Err(Error::Config { line, msg: format!("`{key}` refers to a missing stage") });
                }
                let st = &mut cfg.stages[idx - 1];
                match field {
                    "agg" => st.agg = parse_value(line, key, v)?,
                    "sampler" => {
                        st.sampler = Sampler::parse(v).ok_or_else(|| Error::Config { line, msg: format!("unknown sampler `{v}`") })?
                    }
                    _ => return Err(Error::Config { line, msg: format!("unknown key `{key}`") }),
                }
                continue;
            }
            if let Some(name) = key.strip_prefix("loss.w.") {
                let slot = cfg.weights.slot(name).ok_or_else(|| Error::Config { line, msg: format!("unknown loss `{name}`") })?;
                *slot = parse_value(line, key, v)?;
                continue;
            }
            match key {
                "classes" => cfg.n_classes = parse_value(line, key, v)?,
                "anchor_z" => cfg.anchor_z = parse_values(line, key, v)?,
                "grid.range" => {
                    let r: Vec<f64> = parse_values(line, key, v)?;
                    grid_range = r.try_into().map_err(|_| Error::Config { line, msg: "grid.range needs 6 values".into() })?;
                }
                "grid.size" => {
                    let s: Vec<usize> = parse_values(line, key, v)?;
                    if s.len() != 2 {
                        return Err(Error::Config { line, msg: "grid.size needs W,H".into() });
                    }
                    grid_size = (s[0], s[1]);
                }
                "embed" => cfg.embed = parse_values(line, key, v)?,
                "semantic.hidden" => cfg.semantic_hidden = parse_value(line, key, v)?,
                "vote.hidden" => cfg.vote_hidden = parse_value(line, key, v)?,
                "agg" => {
                    let agg = cfg.aggregation.agg;
                    cfg.aggregation = SaSpec::parse(v).map_err(|msg| Error::Config { line, msg })?;
                    cfg.aggregation.agg = agg;
                }
                "agg.agg" => cfg.aggregation.agg = parse_value(line, key, v)?,
                "attention.hidden" => cfg.attention_hidden = parse_value(line, key, v)?,
                "head.cls" => cfg.cls_hidden = parse_values(line, key, v)?,
                "head.reg" => cfg.reg_hidden = parse_values(line, key, v)?,
                "head.mode" => {
                    cfg.head_mode = match v {
                        "auxiliary" | "aux" => HeadMode::Auxiliary,
                        "joint" => HeadMode::Joint,
                        _ => return Err(Error::Config { line, msg: format!("unknown head mode `{v}`") }),
                    }
                }
                "head.top_k" => cfg.top_k = parse_value(line, key, v)?,
                "head.angle_bins" => cfg.angle_bins = parse_value(line, key, v)?,
                "neck.enabled" => cfg.neck_enabled = parse_bool(line, key, v)?,
                "neck.sh_degree" => cfg.sh_degree = parse_value(line, key, v)?,
                "neck.sh_coeffs" => sh_coeffs = Some((line, parse_value(line, key, v)?)),
                "neck.se_size" => cfg.se_size = parse_value(line, key, v)?,
                "neck.fusion" => {
                    cfg.fusion = match v {
                        "split" => FusionMode::Split,
                        "straight" => FusionMode::Straight,
                        "half_sum" => FusionMode::HalfSum,
                        _ => return Err(Error::Config { line, msg: format!("unknown fusion mode `{v}`") }),
                    }
                }
                "neck.scale_enabled" => cfg.scale_enabled = parse_bool(line, key, v)?,
                "neck.sigma_floor" => cfg.sigma_floor = parse_value(line, key, v)?,
                "neck.theta" => cfg.theta = parse_value(line, key, v)?,
                "neck.heat_hidden" => cfg.heat_hidden = parse_value(line, key, v)?,
                "heatmap.sigma_div" => cfg.heat_sigma_div = parse_value(line, key, v)?,
                "nms.iou" => cfg.nms_iou = parse_value(line, key, v)?,
                "score.threshold" => cfg.score_thr = parse_value(line, key, v)?,
                "loss.l2" => cfg.l2 = parse_value(line, key, v)?,
                "loss.cls_soft" => cfg.cls_soft_targets = parse_bool(line, key, v)?,
                "fps.start" => cfg.fps_start = parse_value(line, key, v)?,
                "seed" => cfg.seed = parse_value(line, key, v)?,
                _ => return Err(Error::Config { line, msg: format!("unknown key `{key}`") }),
            }
        }
        cfg.grid = GridSpec::new(grid_range, grid_size.0, grid_size.1).map_err(|e| Error::Config { line: 0, msg: e.to_string() })?;
        if let Some((line, n)) = sh_coeffs {
            if n != cfg.sh_coeff_count() {
                return Err(Error::Config {
                    line,
                    msg: format!("degree {} has {} coefficients, not {n}", cfg.sh_degree, cfg.sh_coeff_count()),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut o = String::new();
        let f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(o, "classes = {}", self.n_classes);
        let _ = writeln!(o, "anchor_z = {}", f(&self.anchor_z));
        let _ = writeln!(o, "grid.range = {}", f(&self.grid.range));
        let _ = writeln!(o, "grid.size = {},{}", self.grid.width, self.grid.height);
        let _ = writeln!(o, "embed = {}", u(&self.embed));
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(o, "sa.{} = {}", i + 1, st.to_syntax());
            let _ = writeln!(o, "sa.{}.agg = {}", i + 1, st.agg);
            let _ = writeln!(o, "sa.{}.sampler = {}", i + 1, st.sampler.name());
        }
        let _ = writeln!(o, "semantic.hidden = {}", self.semantic_hidden);
        let _ = writeln!(o, "vote.hidden = {}", self.vote_hidden);
        let _ = writeln!(o, "agg = {}", self.aggregation.to_syntax());
        let _ = writeln!(o, "agg.agg = {}", self.aggregation.agg);
        let _ = writeln!(o, "attention.hidden = {}", self.attention_hidden);
        let _ = writeln!(o, "head.cls = {}", u(&self.cls_hidden));
        let _ = writeln!(o, "head.reg = {}", u(&self.reg_hidden));
        let _ = writeln!(o, "head.mode = {}", if self.head_mode == HeadMode::Joint { "joint" } else { "auxiliary" });
        let _ = writeln!(o, "head.top_k = {}", self.top_k);
        let _ = writeln!(o, "head.angle_bins = {}", self.angle_bins);
        let _ = writeln!(o, "neck.enabled = {}", self.neck_enabled);
        let _ = writeln!(o, "neck.sh_degree = {}", self.sh_degree);
        let _ = writeln!(o, "neck.se_size = {}", self.se_size);
        let fusion = match self.fusion {
            FusionMode::Split => "split",
            FusionMode::Straight => "straight",
            FusionMode::HalfSum => "half_sum",
        };
        let _ = writeln!(o, "neck.fusion = {fusion}");
        let _ = writeln!(o, "neck.scale_enabled = {}", self.scale_enabled);
        let _ = writeln!(o, "neck.sigma_floor = {}", self.sigma_floor);
        let _ = writeln!(o, "neck.theta = {}", self.theta);
        let _ = writeln!(o, "neck.heat_hidden = {}", self.heat_hidden);
        let _ = writeln!(o, "heatmap.sigma_div = {}", self.heat_sigma_div);
        let _ = writeln!(o, "nms.iou = {}", self.nms_iou);
        let _ = writeln!(o, "score.threshold = {}", self.score_thr);
        let w = &self.weights;
        for (n, v) in [
            ("sample", w.sample),
            ("vote", w.vote),
            ("cls", w.cls),
            ("loc", w.loc),
            ("size", w.size),
            ("angle_bin", w.angle_bin),
            ("angle_res", w.angle_res),
            ("corner", w.corner),
            ("heatmap", w.heatmap),
        ] {
            let _ = writeln!(o, "loss.w.{n} = {v}");
        }
        let _ = writeln!(o, "loss.l2 = {}", self.l2);
        let _ = writeln!(o, "loss.cls_soft = {}", self.cls_soft_targets);
        let _ = writeln!(o, "fps.start = {}", self.fps_start);
        let _ = writeln!(o, "seed = {}", self.seed);
        o
    }
}

fn is_stage_def(key: &str) -> bool {
    key.strip_prefix("sa.").is_some_and(|r| !r.contains('.'))
}
