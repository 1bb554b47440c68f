//! Downsampling strategies, the box centrality weight and instance recall.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{box_contains, Box3D, PointCloud};
use crate::scene::SceneSample;

/// Indices into a source cloud, in sampling order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleResult {
    pub indices: Vec<usize>,
}

/// One foreground probability per point (max over classes when several heads exist).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForegroundScores {
    pub scores: Vec<f64>,
}

/// `k` distinct indices drawn uniformly without replacement; `k > n` returns all of them.
pub fn sample_random(n_pts: usize, k: usize, seed: u64) -> SampleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = k.min(n_pts);
    SampleResult { indices: rand::seq::index::sample(&mut rng, n_pts, k).into_vec() }
}

/// Greedy farthest-point selection over the rows of `data` (squared Euclidean distance).
pub fn farthest_rows(data: ArrayView2<f64>, k: usize, start: usize) -> Result<SampleResult> {
    let n = data.nrows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!("start index {start} out of range for {n} points")));
    }
    let k = k.min(n);
    if k == 0 {
        return Ok(SampleResult::default());
    }
    let dim = data.ncols();
    let owned;
    let flat: &[f64] = match data.as_slice() {
        Some(s) => s,
        None => {
            owned = data.iter().copied().collect::<Vec<_>>();
            &owned
        }
    };
    let mut min_d = vec![f64::INFINITY; n];
    let mut indices = Vec::with_capacity(k);
    let mut cur = start;
    for _ in 0..k {
        indices.push(cur);
        min_d[cur] = f64::NEG_INFINITY;
        let c = &flat[cur * dim..(cur + 1) * dim];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, (row, md)) in flat.chunks_exact(dim).zip(min_d.iter_mut()).enumerate() {
            if *md == f64::NEG_INFINITY {
                continue;
            }
            let d: f64 = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < *md {
                *md = d;
            }
            if *md > best.0 {
                best = (*md, i);
            }
        }
        if best.1 == usize::MAX {
            break;
        }
        cur = best.1;
    }
    Ok(SampleResult { indices })
}

/// Farthest-point sampling on coordinates; ties go to the lowest index.
pub fn sample_dfps(cloud: &PointCloud, k: usize, start: usize) -> Result<SampleResult> {
    farthest_rows(cloud.coords.view(), k, start)
}

/// Farthest-point sampling in feature space.
pub fn sample_featfps(cloud: &PointCloud, k: usize, start: usize) -> Result<SampleResult> {
    farthest_rows(cloud.feats.view(), k, start)
}

/// Indices of the `k` highest scores, descending, ties by lowest index.
pub fn sample_topk_foreground(scores: &ForegroundScores, k: usize) -> SampleResult {
    let n = scores.scores.len();
    let k = k.min(n);
    let s = &scores.scores;
    let cmp = |a: &usize, b: &usize| s[*b].total_cmp(&s[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..n).collect();
    if k == 0 {
        return SampleResult::default();
    }
    if k < n {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    SampleResult { indices: idx }
}

/// Cube root of the product of opposing face-distance ratios; 1 at the center, 0 on a face
/// or outside the box.
pub fn centrality_mask(b: &Box3D, p: [f64; 3]) -> f64 {
    if !box_contains(b, p) {
        return 0.0;
    }
    let q = b.to_local(p);
    let mut prod = 1.0;
    for a in 0..3 {
        let half = b.size[a] / 2.0;
        let (d1, d2) = (half - q[a], half + q[a]);
        prod *= d1.min(d2).max(0.0) / d1.max(d2);
    }
    prod.cbrt()
}

/// Fraction of ground-truth boxes that contain at least one kept point; 1 without boxes.
pub fn instance_recall(scene: &SceneSample, kept: &SampleResult) -> f64 {
    let pts: Vec<[f64; 3]> = kept.indices.iter().map(|&i| scene.cloud.point(i)).collect();
    recall_of_positions(&scene.gt, &pts)
}

/// Instance recall for arbitrary seed positions.
pub fn recall_of_positions(gt: &[Box3D], pts: &[[f64; 3]]) -> f64 {
    if gt.is_empty() {
        return 1.0;
    }
    let hit = gt.iter().filter(|b| pts.iter().any(|&p| box_contains(b, p))).count();
    hit as f64 / gt.len() as f64
}
