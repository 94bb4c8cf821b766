//! Baseline downsamplers: exact distance FPS, feature FPS, uniform random
//! and densest-block centroids.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::grid::{BlockGrid, BlockKey};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult<T: Real> {
    pub indices: Vec<usize>,
    pub positions: Vec<[T; 3]>,
}

impl<T: Real> SampleResult<T> {
    fn from_indices(indices: Vec<usize>, positions: &[[T; 3]]) -> Self {
        let positions = indices.iter().map(|&i| positions[i]).collect();
        Self { indices, positions }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

const PAR_MIN_LEN: usize = 16 * 1024;
const TAKEN: f64 = -1.0;

/// Argmax of `dist` with ties to the lowest index; `TAKEN` entries never win
/// unless everything is taken.
fn argmax_lowest(dist: &[f64]) -> usize {
    let pick = |a: (f64, usize), b: (f64, usize)| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a };
    if dist.len() >= 2 * PAR_MIN_LEN {
        dist.par_iter()
            .with_min_len(PAR_MIN_LEN)
            .enumerate()
            .map(|(i, &d)| (d, i))
            .reduce(|| (f64::NEG_INFINITY, usize::MAX), pick)
            .1
    } else {
        dist.iter()
            .enumerate()
            .fold((f64::NEG_INFINITY, usize::MAX), |a, (i, &d)| pick(a, (d, i)))
            .1
    }
}

fn check_counts(n: usize, m: usize, start: usize) -> Result<()> {
    if m > n {
        return Err(Error::arg("m", format!("cannot select {m} of {n} points")));
    }
    if m > 0 && start >= n {
        return Err(Error::arg("start", format!("index {start} out of range for {n} points")));
    }
    Ok(())
}

/// Greedy farthest-point selection under an arbitrary pairwise metric.
///
/// `metric(a, b)` must be symmetric and non-negative.
fn greedy<F>(n: usize, m: usize, start: usize, metric: F) -> Vec<usize>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let mut selected = Vec::with_capacity(m);
    if m == 0 {
        return selected;
    }
    let mut best = vec![f64::INFINITY; n];
    let mut last = start;
    best[last] = TAKEN;
    selected.push(last);
    while selected.len() < m {
        let update = |(i, d): (usize, &mut f64)| {
            if *d != TAKEN {
                let nd = metric(i, last);
                if nd < *d {
                    *d = nd;
                }
            }
        };
        if n >= 2 * PAR_MIN_LEN {
            best.par_iter_mut().with_min_len(PAR_MIN_LEN).enumerate().for_each(update);
        } else {
            best.iter_mut().enumerate().for_each(update);
        }
        last = argmax_lowest(&best);
        best[last] = TAKEN;
        selected.push(last);
    }
    selected
}

/// Exact distance-space farthest point sampling over raw positions.
pub fn fps_points<T: Real>(points: &[[T; 3]], m: usize, start: usize) -> Result<SampleResult<T>> {
    check_counts(points.len(), m, start)?;
    let soa: Vec<[f64; 3]> = points.iter().map(|p| p.map(|v| v.to_f64_lossy())).collect();
    let idx = greedy(points.len(), m, start, |i, j| {
        let (a, b) = (&soa[i], &soa[j]);
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        dx * dx + dy * dy + dz * dz
    });
    Ok(SampleResult::from_indices(idx, points))
}

pub fn fps<T: Real>(cloud: &PointCloud<T>, m: usize, start: usize) -> Result<SampleResult<T>> {
    fps_points(&cloud.positions(), m, start)
}

/// Feature-aware FPS with metric `lambda * |dxyz| + |dfeature|`.
pub fn f_fps<T: Real>(
    points: &[[T; 3]],
    features: ArrayView2<'_, T>,
    m: usize,
    lambda: f64,
    start: usize,
) -> Result<SampleResult<T>> {
    check_counts(points.len(), m, start)?;
    if features.nrows() != points.len() {
        return Err(Error::arg(
            "features",
            format!("{} feature rows for {} points", features.nrows(), points.len()),
        ));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::arg("lambda", format!("must be >= 0, got {lambda}")));
    }
    let soa: Vec<[f64; 3]> = points.iter().map(|p| p.map(|v| v.to_f64_lossy())).collect();
    let feats: Vec<Vec<f64>> = features
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let idx = greedy(points.len(), m, start, |i, j| {
        let dxyz = (0..3).map(|k| (soa[i][k] - soa[j][k]).powi(2)).sum::<f64>().sqrt();
        let dfeat = feats[i]
            .iter()
            .zip(&feats[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        lambda * dxyz + dfeat
    });
    Ok(SampleResult::from_indices(idx, points))
}

/// Uniform sampling without replacement (partial Fisher-Yates).
pub fn random_sample<T: Real>(cloud: &PointCloud<T>, m: usize, rng: &mut Rng) -> Result<SampleResult<T>> {
    let n = cloud.len();
    if m > n {
        return Err(Error::arg("m", format!("cannot select {m} of {n} points")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        perm.swap(i, j);
    }
    perm.truncate(m);
    Ok(SampleResult::from_indices(perm, &cloud.positions()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSample<T: Real> {
    pub keys: Vec<BlockKey>,
    pub blocks: Vec<usize>,
    pub positions: Vec<[T; 3]>,
    /// Fewer blocks than requested were available.
    pub short: bool,
}

/// Centroids of the `m` most populated blocks (ties by block key).
pub fn grid_centroid_sample<T: Real>(grid: &BlockGrid<T>, m: usize) -> Result<CentroidSample<T>> {
    if m == 0 {
        return Err(Error::arg("m", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| {
        grid.counts[b]
            .cmp(&grid.counts[a])
            .then(grid.block_keys[a].cmp(&grid.block_keys[b]))
    });
    let short = m > order.len();
    order.truncate(m);
    Ok(CentroidSample {
        keys: order.iter().map(|&b| grid.block_keys[b]).collect(),
        positions: order.iter().map(|&b| grid.centroids[b]).collect(),
        blocks: order,
        short,
    })
}
