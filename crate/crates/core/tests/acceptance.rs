//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdm_ssd::bench::{sampling_benchmark, CountingAlloc, Method};
use pdm_ssd::config::{HeadMode, ModelConfig};
use pdm_ssd::eval::{evaluate, evaluate_class, EvalScene, RecallPoints};
use pdm_ssd::geometry::{Box3D, PointCloud};
use pdm_ssd::gradcheck::{gradcheck, Target};
use pdm_ssd::grid::GridSpec;
use pdm_ssd::heads::{iou, Detection, IouMode};
use pdm_ssd::model::Model;
use pdm_ssd::neck::{dilate, legendre, project_to_grid, scale_coefficient, sh_basis, StructuringElement};
use pdm_ssd::sampling::{
    instance_recall, recall_of_positions, sample_dfps, sample_featfps, sample_random, sample_topk_foreground,
    ForegroundScores,
};
use pdm_ssd::scene::SceneSample;
use pdm_ssd::scenegen::{generate_scenes, is_one_sided, ScenarioSpec};
use pdm_ssd::train::{train, TrainOptions};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

// 1 -------------------------------------------------------------------------------------------

fn legendre_table(l: usize, m: usize, x: f64) -> f64 {
    let s = (1.0 - x * x).sqrt();
    match (l, m) {
        (0, 0) => 1.0,
        (1, 0) => x,
        (1, 1) => s,
        (2, 0) => 0.5 * (3.0 * x * x - 1.0),
        (2, 1) => 3.0 * x * s,
        (2, 2) => 3.0 * s * s,
        (3, 0) => 0.5 * (5.0 * x * x * x - 3.0 * x),
        (3, 1) => 1.5 * (5.0 * x * x - 1.0) * s,
        (3, 2) => 15.0 * x * s * s,
        (3, 3) => 15.0 * s * s * s,
        _ => unreachable!(),
    }
}

/// Cartesian real harmonics for l <= 3, ordered m = -l..=l.
fn sh_table(theta: f64, phi: f64) -> Vec<f64> {
    let (x, y, z) = (theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
    let r = |v: f64| v.sqrt();
    vec![
        0.5 * r(1.0 / PI),
        r(3.0 / (4.0 * PI)) * y,
        r(3.0 / (4.0 * PI)) * z,
        r(3.0 / (4.0 * PI)) * x,
        0.5 * r(15.0 / PI) * x * y,
        0.5 * r(15.0 / PI) * y * z,
        0.25 * r(5.0 / PI) * (3.0 * z * z - 1.0),
        0.5 * r(15.0 / PI) * x * z,
        0.25 * r(15.0 / PI) * (x * x - y * y),
        0.25 * r(35.0 / (2.0 * PI)) * y * (3.0 * x * x - y * y),
        0.5 * r(105.0 / PI) * x * y * z,
        0.25 * r(21.0 / (2.0 * PI)) * y * (5.0 * z * z - 1.0),
        0.25 * r(7.0 / PI) * (5.0 * z * z * z - 3.0 * z),
        0.25 * r(21.0 / (2.0 * PI)) * x * (5.0 * z * z - 1.0),
        0.25 * r(105.0 / PI) * z * (x * x - y * y),
        0.25 * r(35.0 / (2.0 * PI)) * x * (x * x - 3.0 * y * y),
    ]
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: f64 = rng.gen_range(-1.0..=1.0);
        for l in 0..=3 {
            for m in 0..=l {
                worst = worst.max((legendre(l, m, x).unwrap() - legendre_table(l, m, x)).abs());
            }
        }
        let (th, ph) = (rng.gen_range(0.0..PI), rng.gen_range(-PI..PI));
        for (a, b) in sh_basis(3, th, ph).iter().zip(sh_table(th, ph)) {
            worst = worst.max((a - b).abs());
        }
    }
    let n = 1_000_000;
    let k = 16;
    let mut gram = vec![0.0; k * k];
    for _ in 0..n {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let ph = rng.gen_range(-PI..PI);
        let y = sh_basis(3, z.acos(), ph);
        for i in 0..k {
            for j in i..k {
                gram[i * k + j] += y[i] * y[j];
            }
        }
    }
    let mut ortho: f64 = 0.0;
    for i in 0..k {
        for j in i..k {
            let v = 4.0 * PI * gram[i * k + j] / n as f64;
            ortho = ortho.max((v - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    outcome(
        worst <= 1e-12 && ortho <= 5e-3 && fast,
        format!("closed-form max error {worst:.2e} (<= 1e-12), orthonormality max deviation {ortho:.2e} (<= 5e-3), {time}"),
    )
}

// 2 -------------------------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut ok = true;
    let mut seen = Vec::new();
    for (l, n) in [(2, 9), (3, 16), (4, 25)] {
        let text = format!("neck.sh_degree = {l}\nneck.sh_coeffs = {n}\n");
        let counted = ModelConfig::from_str_kv_with_base(&text, ModelConfig::micro()).map(|c| c.sh_coeff_count());
        let model_width = ModelConfig::from_str_kv_with_base(&text, ModelConfig::micro())
            .and_then(Model::new)
            .map(|m| m.params.get("neck.sh.0.w").map(|w| w.nrows()));
        let rejected = ModelConfig::from_str_kv_with_base(&format!("neck.sh_degree = {l}\nneck.sh_coeffs = {}\n", n + 1), ModelConfig::micro()).is_err();
        let width = model_width.ok().flatten();
        ok &= counted.as_ref().ok() == Some(&n) && width == Some(n) && rejected;
        seen.push(format!(
            "L={l}: {} coefficients, SH head width {}, wrong count rejected {rejected}",
            counted.map_or("error".into(), |c| c.to_string()),
            width.map_or("missing".into(), |w| w.to_string())
        ));
    }
    outcome(ok, seen.join("; "))
}

// 3 -------------------------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut sum = 0.0;
    for ix in 0..41 {
        for iy in 0..41 {
            sum += scale_coefficient(1.0, (20, 20), (ix, iy)).unwrap();
        }
    }
    outcome((sum - 1.0).abs() <= 1e-3, format!("41x41 sum at sigma=1 is {sum:.9}"))
}

// 4 -------------------------------------------------------------------------------------------

fn random_cells(rng: &mut ChaCha8Rng, spec: &GridSpec, n: usize, margin: usize) -> BTreeSet<(usize, usize)> {
    (0..n)
        .map(|_| (rng.gen_range(margin..spec.width - margin), rng.gen_range(margin..spec.height - margin)))
        .collect()
}

fn criterion_4() -> Outcome {
    let spec = GridSpec::new([0.0, 0.0, -3.0, 32.0, 32.0, 1.0], 64, 64).unwrap();
    let se = StructuringElement::square(5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut ext, mut mono, mut equi) = (true, true, true);
    for _ in 0..300 {
        let na = rng.gen_range(1..30);
        let a = random_cells(&mut rng, &spec, na, 0);
        let mut b = a.clone();
        b.extend(random_cells(&mut rng, &spec, 10, 0));
        let da = dilate(&a, &se, &spec);
        ext &= a.is_subset(&da);
        mono &= da.is_subset(&dilate(&b, &se, &spec));
        let ni = rng.gen_range(1..20);
        let interior = random_cells(&mut rng, &spec, ni, 10);
        let (tx, ty) = (rng.gen_range(0..7usize), rng.gen_range(0..7usize));
        let shifted: BTreeSet<_> = interior.iter().map(|&(x, y)| (x + tx, y + ty)).collect();
        let lhs = dilate(&shifted, &se, &spec);
        let rhs: BTreeSet<_> = dilate(&interior, &se, &spec).into_iter().map(|(x, y)| (x + tx, y + ty)).collect();
        equi &= lhs == rhs;
    }
    let single = dilate(&BTreeSet::from([(30, 30)]), &se, &spec).len();

    let mut sparse = ScenarioSpec::small_objects();
    sparse.sparsify = 0.5;
    sparse.clutter = 800;
    let scenes = generate_scenes(&sparse).unwrap();
    let grid = GridSpec::new([0.0, -20.48, -3.0, 40.96, 20.48, 1.0], 128, 128).unwrap();
    let (mut covered, mut eligible, mut cover_ok) = (0usize, 0usize, true);
    for s in &scenes {
        let occ = project_to_grid(s.cloud.coords.view(), s.cloud.feats.view(), &grid).unwrap().occupancy();
        let dil = dilate(&occ, &se, &grid);
        for b in &s.gt {
            let Some(c) = grid.world_to_cell([b.center[0], b.center[1]]) else { continue };
            let near = occ.iter().any(|o| (o.0 as i64 - c.0 as i64).abs() <= 2 && (o.1 as i64 - c.1 as i64).abs() <= 2);
            if near {
                eligible += 1;
                if dil.contains(&c) {
                    covered += 1;
                } else {
                    cover_ok = false;
                }
            }
        }
    }
    outcome(
        ext && mono && equi && single == 25 && cover_ok && eligible > 0,
        format!(
            "extensive {ext}, monotone {mono}, translation-equivariant {equi}, interior footprint {single} cells, coverage {covered}/{eligible} centers on {} scenes",
            scenes.len()
        ),
    )
}

// 5 -------------------------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (target, trials, tol) in [
        (Target::Dense, 20, 1e-6),
        (Target::SamplingLoss, 10, 1e-5),
        (Target::ScaleCoefficient, 10, 1e-5),
        (Target::Fusion, 10, 1e-5),
        (Target::HeatmapLoss, 10, 1e-5),
        (Target::Model, 3, 1e-4),
    ] {
        match gradcheck(target, trials, 5) {
            Ok(r) => {
                ok &= r.worst < tol && r.checked > 0;
                parts.push(format!("{} {:.1e} (<{tol:.0e}, n={})", target.name(), r.worst, r.checked));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{} error {e}", target.name()));
            }
        }
    }
    let (fast, time) = within(t, Duration::from_secs(60));
    outcome(ok && fast, format!("{}; {time}", parts.join(", ")))
}

// 6 -------------------------------------------------------------------------------------------

fn fps_brute_force(pts: &[[f64; 3]], k: usize, start: usize) -> Vec<usize> {
    let d = |a: [f64; 3], b: [f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut chosen = vec![start];
    while chosen.len() < k.min(pts.len()) {
        let mut best: Option<(f64, usize)> = None;
        for (i, &p) in pts.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let m = chosen.iter().map(|&c| d(p, pts[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bm, _)| m > bm) {
                best = Some((m, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut agree = 0;
    for trial in 0..1000 {
        let n = rng.gen_range(1..=64);
        let grid_pts = trial % 4 == 0;
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                if grid_pts {
                    [rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64, 0.0]
                } else {
                    [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0)]
                }
            })
            .collect();
        let k = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        let coords = ndarray::Array2::from_shape_fn((n, 3), |(r, c)| pts[r][c]);
        let cloud = PointCloud::from_coords(coords).unwrap();
        if sample_dfps(&cloud, k, start).unwrap().indices == fps_brute_force(&pts, k, start) {
            agree += 1;
        }
    }

    let scenes = generate_scenes(&ScenarioSpec::small_objects()).unwrap();
    let mut r = [0.0; 4];
    for s in &scenes {
        let n = s.len();
        let k = n / 4;
        let oracle = ForegroundScores { scores: (0..n).map(|i| if s.is_foreground(i) { 1.0 } else { 0.0 }).collect() };
        r[0] += instance_recall(s, &sample_topk_foreground(&oracle, k));
        r[1] += instance_recall(s, &sample_featfps(&s.cloud, k, 0).unwrap());
        r[2] += instance_recall(s, &sample_dfps(&s.cloud, k, 0).unwrap());
        r[3] += instance_recall(s, &sample_random(n, k, s.id as u64));
    }
    let m = r.map(|v| v / scenes.len() as f64);
    let ordered = m[0] >= m[1] && m[1] >= m[2] && m[2] >= m[3];
    outcome(
        agree == 1000 && ordered && m[0] >= 0.95,
        format!(
            "oracle agreement {agree}/1000; mean recall at n/4: topK {:.3} >= featFPS {:.3} >= DFPS {:.3} >= random {:.3}",
            m[0], m[1], m[2], m[3]
        ),
    )
}

// 7 -------------------------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let rows = sampling_benchmark(&[16384], &[Method::Dfps, Method::FeatFps, Method::TopK], 5, 7).unwrap();
    let ms = |m: Method| rows.iter().find(|r| r.method == m).unwrap().median_ms;
    let (d, f, k) = (ms(Method::Dfps), ms(Method::FeatFps), ms(Method::TopK));
    let (fast, time) = within(t, Duration::from_secs(120));
    outcome(
        d >= 5.0 * k && d <= f && fast,
        format!("16384 points: topK {k:.3} ms, DFPS {d:.2} ms ({:.0}x), featFPS {f:.2} ms; {time}", d / k),
    )
}

// 8 -------------------------------------------------------------------------------------------

fn inside_bev(b: &Box3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    u.abs() <= b.size[0] / 2.0 && v.abs() <= b.size[1] / 2.0
}

fn monte_carlo_bev_iou(a: &Box3D, b: &Box3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let ext = |bx: &Box3D| (bx.size[0].hypot(bx.size[1])) / 2.0;
    let x0 = (a.center[0] - ext(a)).min(b.center[0] - ext(b));
    let x1 = (a.center[0] + ext(a)).max(b.center[0] + ext(b));
    let y0 = (a.center[1] - ext(a)).min(b.center[1] - ext(b));
    let y1 = (a.center[1] + ext(a)).max(b.center[1] + ext(b));
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..n {
        let (x, y) = (rng.gen_range(x0..x1), rng.gen_range(y0..y1));
        let (ia, ib) = (inside_bev(a, x, y), inside_bev(b, x, y));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    both as f64 / either.max(1) as f64
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = Box3D::gt([0.0, 0.0, 0.0], [rng.gen_range(1.0..5.0), rng.gen_range(0.5..3.0), 1.5], rng.gen_range(-PI..PI), 0).unwrap();
        let b = Box3D::gt(
            [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0],
            [rng.gen_range(1.0..5.0), rng.gen_range(0.5..3.0), 1.5],
            rng.gen_range(-PI..PI),
            0,
        )
        .unwrap();
        let mc = monte_carlo_bev_iou(&a, &b, 100_000, &mut rng);
        worst = worst.max((iou(&a, &b, IouMode::Bev) - mc).abs());
    }
    let c = Box3D::gt([1.0, 2.0, 0.5], [3.9, 1.6, 1.5], 0.7, 0).unwrap();
    let identity = [iou(&c, &c, IouMode::Bev), iou(&c, &c, IouMode::ThreeD)];
    let u = Box3D::gt([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
    let v = Box3D::gt([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
    let offset = [iou(&u, &v, IouMode::Bev), iou(&u, &v, IouMode::ThreeD)];
    let hand_ok = identity.iter().all(|x| (x - 1.0).abs() <= 1e-9) && offset.iter().all(|x| (x - 1.0 / 3.0).abs() <= 1e-9);
    outcome(
        worst <= 0.02 && hand_ok,
        format!("max |IoU - MC| over 100 pairs {worst:.4}; identity {:?}; offset cube {:?}", identity, offset),
    )
}

// 9 -------------------------------------------------------------------------------------------

/// Exhaustive sweep over score thresholds with a fresh greedy matching at each.
fn brute_force_ap(scenes: &[(Vec<Detection>, Vec<Box3D>)], thr: f64, pts: RecallPoints) -> Option<f64> {
    let n_gt: usize = scenes.iter().map(|s| s.1.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scenes.iter().flat_map(|s| s.0.iter().map(|d| d.bbox.score)).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let mut curve = Vec::new();
    for &t in &thresholds {
        let (mut tp, mut kept) = (0usize, 0usize);
        for (dets, gts) in scenes {
            let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.bbox.score >= t).collect();
            ds.sort_by(|a, b| b.bbox.score.total_cmp(&a.bbox.score));
            kept += ds.len();
            let mut used = vec![false; gts.len()];
            for d in ds {
                let best = (0..gts.len())
                    .filter(|&g| !used[g])
                    .map(|g| (g, iou(&d.bbox, &gts[g], IouMode::ThreeD)))
                    .filter(|&(_, o)| o >= thr)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((g, _)) = best {
                    used[g] = true;
                    tp += 1;
                }
            }
        }
        curve.push((tp as f64 / kept as f64, tp as f64 / n_gt as f64));
    }
    let r: Vec<f64> = match pts {
        RecallPoints::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
        RecallPoints::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
    };
    let mean = r
        .iter()
        .map(|&q| curve.iter().filter(|c| c.1 >= q - 1e-12).map(|c| c.0).fold(0.0, f64::max))
        .sum::<f64>()
        / r.len() as f64;
    Some(mean)
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut checked, mut mismatches) = (0, 0);
    for _ in 0..500 {
        let n_scenes = rng.gen_range(1..=3);
        let mut scenes = Vec::new();
        let mut budget = rng.gen_range(0..=10usize);
        for _ in 0..n_scenes {
            let gts: Vec<Box3D> = (0..rng.gen_range(1..=3))
                .map(|i| Box3D::gt([i as f64 * 6.0, 0.0, 0.0], [3.9, 1.6, 1.5], rng.gen_range(-0.3..0.3), 0).unwrap())
                .collect();
            let nd = rng.gen_range(0..=budget);
            budget -= nd;
            let dets: Vec<Detection> = (0..nd)
                .map(|_| {
                    let g = &gts[rng.gen_range(0..gts.len())];
                    let c = [g.center[0] + rng.gen_range(-1.5..1.5), g.center[1] + rng.gen_range(-0.6..0.6), 0.0];
                    let score = rng.gen_range(0.0..1.0);
                    Detection { bbox: Box3D::new(c, g.size, g.yaw, 0, score).unwrap(), class_scores: vec![score] }
                })
                .collect();
            scenes.push((dets, gts));
        }
        let es: Vec<EvalScene> = scenes.iter().map(|(d, g)| EvalScene::new(d, g)).collect();
        let r = evaluate_class(&es, 0, 0.5, IouMode::ThreeD);
        for (p, got) in [(RecallPoints::R11, r.ap_r11), (RecallPoints::R40, r.ap_r40)] {
            checked += 1;
            let want = brute_force_ap(&scenes, 0.5, p);
            if got.zip(want).is_none_or(|(a, b)| (a - b).abs() > 1e-12) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{checked} R11/R40 values on 500 instances, {mismatches} mismatches"))
}

// 10 ------------------------------------------------------------------------------------------

fn det_bits(d: &[Detection]) -> Vec<u64> {
    d.iter()
        .flat_map(|x| {
            let b = &x.bbox;
            b.center.into_iter().chain(b.size).chain([b.yaw, b.score, b.label as f64]).chain(x.class_scores.iter().copied())
        })
        .map(f64::to_bits)
        .collect()
}

fn criterion_10() -> Outcome {
    let scenes = generate_scenes(&ScenarioSpec { scenes: 6, ..ScenarioSpec::micro() }).unwrap();
    let aux_cfg = ModelConfig { head_mode: HeadMode::Auxiliary, seed: 10, ..ModelConfig::micro() };
    let mut aux = Model::new(aux_cfg.clone()).unwrap();
    let opts = TrainOptions { epochs: 3, ..TrainOptions::default() };
    train(&mut aux, &scenes[..4], &opts, None).unwrap();
    let mut bare = Model::new(ModelConfig { neck_enabled: false, seed: 99, ..aux_cfg }).unwrap();
    let copied = bare.params.copy_from(&aux.params);
    let mut identical = copied == bare.params.len();
    for s in &scenes {
        let (a, b) = (aux.infer(&s.cloud).unwrap(), bare.infer(&s.cloud).unwrap());
        identical &= det_bits(&a.detections) == det_bits(&b.detections) && det_bits(&a.raw) == det_bits(&b.raw);
        identical &= a.seeds.positions.iter().zip(b.seeds.positions.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        identical &= a.heatmap.is_none();
    }
    outcome(
        identical,
        format!("{copied}/{} tensors shared, outputs bit-identical on {} scenes", bare.params.len(), scenes.len()),
    )
}

// 11 ------------------------------------------------------------------------------------------

fn occluded_mask(s: &SceneSample) -> Vec<bool> {
    (0..s.gt.len()).map(|b| !is_one_sided(s, b)).collect()
}

fn train_mode(mode: HeadMode, scenes: &[SceneSample]) -> Model {
    let mut m = Model::new(ModelConfig { head_mode: mode, ..ModelConfig::micro() }).unwrap();
    train(&mut m, scenes, &TrainOptions::default(), None).unwrap();
    m
}

fn criterion_11() -> (Outcome, Model) {
    let t = Instant::now();
    let scenes = generate_scenes(&ScenarioSpec::micro()).unwrap();
    let (joint, aux) = std::thread::scope(|sc| {
        let j = sc.spawn(|| train_mode(HeadMode::Joint, &scenes));
        let a = sc.spawn(|| train_mode(HeadMode::Auxiliary, &scenes));
        (j.join().unwrap(), a.join().unwrap())
    });
    let masks: Vec<Vec<bool>> = scenes.iter().map(occluded_mask).collect();
    let n_occ = masks.iter().flatten().filter(|m| !**m).count();
    let ap = |m: &Model, subset: bool| {
        let dets: Vec<Vec<Detection>> = scenes.iter().map(|s| m.infer(&s.cloud).unwrap().detections).collect();
        let es: Vec<EvalScene> = scenes
            .iter()
            .zip(&dets)
            .zip(&masks)
            .map(|((s, d), mk)| EvalScene { dets: d, gt: &s.gt, ignore: subset.then_some(mk.as_slice()) })
            .collect();
        evaluate(&es, 1, 0.5, IouMode::ThreeD)[0].ap_r40.unwrap_or(0.0)
    };
    let (train_ap, joint_occ, aux_occ) = (ap(&joint, false), ap(&joint, true), ap(&aux, true));
    let (fast, time) = within(t, Duration::from_secs(600));
    let o = outcome(
        train_ap >= 0.8 && joint_occ >= aux_occ && fast,
        format!(
            "joint train AP3D@0.5 (R40) {train_ap:.3} (>= 0.8); occluded subset ({n_occ} boxes) joint {joint_occ:.3} vs auxiliary {aux_occ:.3}; {time}"
        ),
    );
    (o, joint)
}

// 12 ------------------------------------------------------------------------------------------

fn criterion_12(trained: &Model) -> Outcome {
    let mut sparse = ScenarioSpec { seed: 12, scenes: 40, ..ScenarioSpec::micro() };
    sparse.sparsify = 0.7;
    let scenes = generate_scenes(&sparse).unwrap();
    let fresh = Model::new(ModelConfig { seed: 12, ..ModelConfig::micro() }).unwrap();
    let (mut qualifying, mut violations, mut improved) = (0, 0, 0);
    for model in [&fresh, trained] {
        for s in &scenes {
            let inf = model.infer(&s.cloud).unwrap();
            let pos = |v: &pdm_ssd::heads::VoteSet| (0..v.len()).map(|i| v.position(i)).collect::<Vec<_>>();
            let plain = recall_of_positions(&s.gt, &pos(&inf.votes));
            if plain >= 1.0 {
                continue;
            }
            qualifying += 1;
            let supplemented = recall_of_positions(&s.gt, &pos(&inf.seeds));
            violations += (supplemented < plain) as usize;
            improved += (supplemented > plain) as usize;
        }
    }
    outcome(
        qualifying > 0 && violations == 0,
        format!("{qualifying} scene runs with missed GT, {violations} recall decreases, {improved} improved by heatmap peaks"),
    )
}

fn main() {
    let start = Instant::now();
    // Optional criterion numbers on the command line restrict the run.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    if wanted(1) {
        report(1, criterion_1());
    }
    if wanted(2) {
        report(2, criterion_2());
    }
    if wanted(3) {
        report(3, criterion_3());
    }
    if wanted(4) {
        report(4, criterion_4());
    }
    if wanted(5) {
        report(5, criterion_5());
    }
    if wanted(6) {
        report(6, criterion_6());
    }
    if wanted(7) {
        report(7, criterion_7());
    }
    if wanted(8) {
        report(8, criterion_8());
    }
    if wanted(9) {
        report(9, criterion_9());
    }
    if wanted(10) {
        report(10, criterion_10());
    }
    if wanted(11) || wanted(12) {
        let (o11, joint) = criterion_11();
        if wanted(11) {
            report(11, o11);
        }
        if wanted(12) {
            report(12, criterion_12(&joint));
        }
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} passed in {:.1}s", results.len() - failed.len(), results.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
