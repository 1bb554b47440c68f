//! Command-line front end.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{sampling_benchmark, write_bench_csv, Method};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalScene};
use crate::gradcheck::{gradcheck, Target};
use crate::heads::{heatmap_target, read_detections, write_detections, IouMode};
use crate::model::{Model, ParamStore};
use crate::neck::{write_dense, write_sparse_csv};
use crate::scene::{read_scenes, write_scenes, SceneSample};
use crate::scenegen::{generate_scenes, ScenarioSpec};
use crate::train::{train, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "pdm-ssd", about = "Point dilation detector toolkit", version)]
struct Cli {
    /// Model configuration (`key = value` lines applied on top of the preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Micro)]
    preset: Preset,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Tabular output path; stdout when omitted.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Micro,
    Kitti,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate synthetic scenes.
    Gen {
        /// Scenario file (`key = value` lines over the micro scenario).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the samplers.
    BenchSampling {
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096, 16384])]
        counts: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Target name or `all`.
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// Run a checkpoint on a scene file and write detections.
    Infer {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average precision of a detection file.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, value_enum, default_value_t = Mode::ThreeD)]
        mode: Mode,
    },
    /// Overfit a model on a scene file (or the micro scenario) and log losses.
    Overfit(OverfitArgs),
    /// Dump heatmap planes and the dilated grid for one scene.
    HeatmapDump {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Predict with this checkpoint instead of dumping the target heatmap.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sparse dilated-grid CSV (needs a checkpoint).
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct OverfitArgs {
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Where to save the trained weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn model_config(cli: &Cli) -> Result<ModelConfig> {
    let base = match cli.preset {
        Preset::Micro => ModelConfig::micro(),
        Preset::Kitti => ModelConfig::kitti(),
    };
    let mut cfg = match &cli.config {
        Some(p) => ModelConfig::from_str_kv_with_base(&std::fs::read_to_string(p)?, base)?,
        None => base,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(cli: &Cli, checkpoint: &Path) -> Result<Model> {
    let params = ParamStore::load(open(checkpoint)?)?;
    Model::new(model_config(cli)?)?.with_params(params)
}

fn load_scenes(path: &Path) -> Result<Vec<SceneSample>> {
    read_scenes(open(path)?)
}

fn execute(cli: &Cli) -> Result<()> {
    let csv = cli.csv.as_deref();
    match &cli.cmd {
        Cmd::Gen { spec, out } => {
            let mut s = match spec {
                Some(p) => ScenarioSpec::from_str_kv(&std::fs::read_to_string(p)?)?,
                None => ScenarioSpec::micro(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let scenes = generate_scenes(&s)?;
            let mut w = create(out)?;
            write_scenes(&scenes, &mut w)?;
            w.flush()?;
        }
        Cmd::BenchSampling { counts, methods, repeats } => {
            let ms: Vec<Method> = if methods.is_empty() {
                Method::ALL.to_vec()
            } else {
                methods.iter().map(|m| m.parse()).collect::<Result<_>>()?
            };
            let rows = sampling_benchmark(counts, &ms, *repeats, cli.seed.unwrap_or(0))?;
            let mut w = output(csv)?;
            write_bench_csv(&rows, &mut w)?;
            w.flush()?;
        }
        Cmd::Gradcheck { target, trials } => {
            let targets: Vec<Target> = if target == "all" { Target::ALL.to_vec() } else { vec![target.parse()?] };
            let mut w = output(csv)?;
            writeln!(w, "target,worst_relative_error,checked,resampled")?;
            for t in targets {
                let r = gradcheck(t, *trials, cli.seed.unwrap_or(0))?;
                writeln!(w, "{},{:e},{},{}", t.name(), r.worst, r.checked, r.resampled)?;
            }
            w.flush()?;
        }
        Cmd::Infer { scenes, checkpoint, out } => {
            let model = load_model(cli, checkpoint)?;
            let scenes = load_scenes(scenes)?;
            let mut groups = Vec::with_capacity(scenes.len());
            for s in &scenes {
                groups.push((s.id, model.infer(&s.cloud)?.detections));
            }
            let mut w = output(out.as_deref().or(csv))?;
            write_detections(&groups, &mut w)?;
            w.flush()?;
        }
        Cmd::Eval { scenes, dets, iou, mode } => {
            let scenes = load_scenes(scenes)?;
            let dets = read_detections(open(dets)?)?;
            let empty = Vec::new();
            let es: Vec<EvalScene> = scenes
                .iter()
                .map(|s| {
                    let d = dets.iter().find(|(id, _)| *id == s.id).map_or(&empty, |g| &g.1);
                    EvalScene::new(d, &s.gt)
                })
                .collect();
            let classes = scenes.iter().flat_map(|s| s.gt.iter().map(|b| b.label + 1)).max().unwrap_or(1);
            let mode = match mode {
                Mode::Bev => IouMode::Bev,
                Mode::ThreeD => IouMode::ThreeD,
            };
            let mut w = output(csv)?;
            writeln!(w, "class,iou,AP_R11,AP_R40")?;
            let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |v| format!("{v:.6}"));
            for r in evaluate(&es, classes, *iou, mode) {
                writeln!(w, "{},{},{},{}", r.class, r.iou_thr, fmt(r.ap_r11), fmt(r.ap_r40))?;
            }
            w.flush()?;
        }
        Cmd::Overfit(a) => {
            let scenes = match &a.scenes {
                Some(p) => load_scenes(p)?,
                None => generate_scenes(&ScenarioSpec { seed: cli.seed.unwrap_or(0), ..ScenarioSpec::micro() })?,
            };
            let mut model = Model::new(model_config(cli)?)?;
            let mut opts = TrainOptions { epochs: a.epochs, ..TrainOptions::default() };
            opts.adam.lr = a.lr;
            opts.decay_at = vec![a.epochs * 7 / 10, a.epochs * 9 / 10];
            let mut w = output(csv)?;
            train(&mut model, &scenes, &opts, Some(&mut w))?;
            w.flush()?;
            if let Some(p) = &a.checkpoint {
                let mut f = create(p)?;
                model.params.save(&mut f)?;
                f.flush()?;
            }
        }
        Cmd::HeatmapDump { scenes, index, checkpoint, out, grid } => {
            let scenes = load_scenes(scenes)?;
            let s = scenes
                .get(*index)
                .ok_or_else(|| Error::InvalidArgument(format!("scene index {index} out of range")))?;
            let (planes, dilated) = match checkpoint {
                Some(ck) => {
                    let model = load_model(cli, ck)?;
                    let mut cfg = model.cfg.clone();
                    cfg.head_mode = crate::config::HeadMode::Joint;
                    let model = Model::new(cfg)?.with_params(model.params)?;
                    let inf = model.infer(&s.cloud)?;
                    let hm = inf.heatmap.ok_or_else(|| Error::InvalidArgument("model has no neck".into()))?;
                    (hm.planes, inf.grid)
                }
                None => {
                    let cfg = model_config(cli)?;
                    (heatmap_target(&s.gt, &cfg.grid, cfg.n_classes, cfg.heat_sigma_div)?.planes, None)
                }
            };
            let mut w = create(out)?;
            for p in &planes {
                write_dense(p.view(), &mut w)?;
                writeln!(w)?;
            }
            w.flush()?;
            if let Some(gp) = grid {
                let g = dilated.ok_or_else(|| Error::InvalidArgument("grid dump needs a checkpoint".into()))?;
                let mut w = create(gp)?;
                write_sparse_csv(&g.as_sparse(), &mut w)?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand. Returns 0 on success, 2 on
/// a usage error and 1 on a runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["pdm-ssd", "--bogus"]), 2);
        assert_eq!(run(["pdm-ssd"]), 2);
        assert_eq!(run(["pdm-ssd", "eval", "--scenes"]), 2);
    }

    #[test]
    fn runtime_errors_exit_1() {
        assert_eq!(run(["pdm-ssd", "infer", "--scenes", "/nonexistent/s.txt", "--checkpoint", "/nonexistent/c"]), 1);
        assert_eq!(run(["pdm-ssd", "gradcheck", "--target", "nope"]), 1);
    }

    #[test]
    fn gen_infer_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
        std::fs::write(p("spec.cfg"), "scenes = 2\nclutter = 50\n").unwrap();
        assert_eq!(run(["pdm-ssd", "gen", "--spec", &p("spec.cfg"), "--out", &p("s.txt")]), 0);
        let m = Model::new(ModelConfig::micro()).unwrap();
        let mut f = File::create(p("ck")).unwrap();
        m.params.save(&mut f).unwrap();
        drop(f);
        assert_eq!(run(["pdm-ssd", "infer", "--scenes", &p("s.txt"), "--checkpoint", &p("ck"), "--out", &p("d.csv")]), 0);
        assert_eq!(
            run(["pdm-ssd", "eval", "--scenes", &p("s.txt"), "--dets", &p("d.csv"), "--iou", "0.7", "--mode", "3d", "--csv", &p("ap.csv")]),
            0
        );
        let ap = std::fs::read_to_string(p("ap.csv")).unwrap();
        assert!(ap.starts_with("class,iou,AP_R11,AP_R40\n0,0.7,"));
        assert_eq!(
            run(["pdm-ssd", "heatmap-dump", "--scenes", &p("s.txt"), "--checkpoint", &p("ck"), "--out", &p("h.txt"), "--grid", &p("g.csv")]),
            0
        );
        let h = std::fs::read_to_string(p("h.txt")).unwrap();
        assert_eq!(h.lines().filter(|l| !l.is_empty()).count(), 32);
        assert!(std::fs::read_to_string(p("g.csv")).unwrap().starts_with("ix,iy,c0"));
    }

    #[test]
    fn bench_and_gradcheck_write_csv() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("b.csv").to_string_lossy().into_owned();
        assert_eq!(run(["pdm-ssd", "bench-sampling", "--counts", "64,128", "--csv", &out]), 0);
        assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 9);
        assert_eq!(run(["pdm-ssd", "gradcheck", "--target", "dense", "--trials", "1", "--csv", &out]), 0);
        assert!(std::fs::read_to_string(&out).unwrap().starts_with("target,"));
    }

    #[test]
    fn overfit_logs_every_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
        std::fs::write(p("spec.cfg"), "scenes = 1\nclutter = 40\n").unwrap();
        assert_eq!(run(["pdm-ssd", "gen", "--spec", &p("spec.cfg"), "--out", &p("s.txt")]), 0);
        assert_eq!(
            run(["pdm-ssd", "overfit", "--scenes", &p("s.txt"), "--epochs", "2", "--csv", &p("log.csv"), "--checkpoint", &p("ck")]),
            0
        );
        let log = std::fs::read_to_string(p("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(ParamStore::load(open(Path::new(&p("ck"))).unwrap()).is_ok());
    }
}
