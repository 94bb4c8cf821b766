//! Minibatch training of the block filter and the centroid offset head.
//!
//! Each step draws query blocks from one scene, encodes only the blocks their
//! neighborhoods touch, and backpropagates the mean per-block focal loss
//! through head, diffusion and encoder. The offset head is fitted on the
//! detached diffused features of labeled-foreground query blocks.

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{ddfl, m_den, m_dis, weighted_focal, DdflParams};
use super::nfdm::{neighborhoods, nfdm_train_backward, nfdm_train_forward, nfdm_with_neighbors};
use super::{classify, encode_blocks, BlockFeatures, LfdbfNets, DEFAULT_ALPHA, FIRST_NFDM_RADII};
use crate::ciss::{block_offset_target, offset_loss};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::grid::{augment, partition, AugmentedBlockMatrix, GridConfig};
use crate::labels::LabelSet;
use crate::nn::{segment_maxpool, segment_maxpool_backward};
use crate::pipeline::WeightsBundle;
use crate::rng::Rng;
use crate::scene::block_foreground;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Query blocks per step, all from one scene.
    pub batch_blocks: usize,
    /// Steps per epoch; `None` means as many steps as it takes to draw
    /// every training block once on average.
    pub steps_per_epoch: Option<usize>,
    /// Share of each batch drawn from labeled-foreground blocks; `None`
    /// draws blocks uniformly.
    pub foreground_share: Option<f64>,
    /// Trailing share of the scene list kept out of training.
    pub holdout_fraction: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Scale the focal term by the density and distance weights.
    pub density_distance: bool,
    /// Global gradient-norm cap; non-positive disables clipping.
    pub clip_norm: f64,
    pub offset_lr: f64,
    pub radii: Vec<f64>,
    pub grid: GridConfig,
    /// Blocks beyond this share of the scene's largest centroid range count as far.
    pub far_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 4,
            batch_blocks: 256,
            steps_per_epoch: None,
            foreground_share: Some(0.5),
            holdout_fraction: 0.2,
            alpha: DEFAULT_ALPHA,
            gamma: 2.0,
            density_distance: true,
            clip_norm: 5.0,
            offset_lr: 0.01,
            radii: FIRST_NFDM_RADII.to_vec(),
            grid: GridConfig::default(),
            far_fraction: 0.6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.offset_lr >= 0.0) {
            return Err(Error::arg("lr", "learning rates must be non-negative"));
        }
        if self.batch_blocks == 0 {
            return Err(Error::arg("batch_blocks", "must be at least 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::arg("steps_per_epoch", "must be at least 1"));
        }
        if self.foreground_share.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::arg("foreground_share", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::arg("holdout_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::arg("alpha", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.far_fraction) {
            return Err(Error::arg("far_fraction", "must lie in [0, 1]"));
        }
        DdflParams {
            gamma: self.gamma,
            ..DdflParams::default()
        }
        .validate()
    }
}

/// Block-level classification quality at the operating threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    /// Share of foreground blocks marked foreground.
    pub recall: f64,
    /// Share of background blocks marked background.
    pub rejection: f64,
    /// Recall restricted to foreground blocks beyond the far range.
    pub far_recall: f64,
    pub foreground_blocks: usize,
    pub background_blocks: usize,
    pub far_blocks: usize,
}

impl BlockMetrics {
    fn from_counts(c: &[usize; 6]) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        Self {
            recall: ratio(c[0], c[1]),
            rejection: ratio(c[2], c[3]),
            far_recall: ratio(c[4], c[5]),
            foreground_blocks: c[1],
            background_blocks: c[3],
            far_blocks: c[5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean step loss of the filter.
    pub loss: f64,
    /// Mean step loss of the offset head over steps with supervised rows.
    pub offset_loss: f64,
    pub holdout: BlockMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_scenes: Vec<usize>,
    pub holdout_scenes: Vec<usize>,
    /// Holdout metrics of the initial networks.
    pub initial: BlockMetrics,
    pub epochs: Vec<EpochMetrics>,
}

/// Per-scene tensors reused by every step.
struct Prepared {
    aug: AugmentedBlockMatrix<f32>,
    centroids: Vec<[f64; 3]>,
    neighbors: Vec<Vec<Vec<usize>>>,
    foreground: Vec<bool>,
    fg_blocks: Vec<usize>,
    bg_blocks: Vec<usize>,
    counts: Vec<usize>,
    ranges: Vec<f64>,
    params: DdflParams,
    /// Mean density-distance weight over the scene's blocks.
    mean_weight: f64,
    /// Offset target and in-box flag of labeled-foreground blocks.
    offsets: Vec<Option<([f64; 3], bool)>>,
}

fn prepare(cloud: &PointCloud<f32>, labels: &LabelSet, cfg: &TrainConfig) -> Result<Prepared> {
    labels.validate(Some(cloud.len()))?;
    let grid = partition(cloud, &cfg.grid)?;
    let aug = augment(&grid, cloud)?;
    let centroids: Vec<[f64; 3]> = grid.centroids.iter().map(|c| c.map(f64::from)).collect();
    let neighbors = cfg
        .radii
        .iter()
        .map(|&r| neighborhoods(&centroids, r, super::NFDM_MAX_K))
        .collect::<Result<Vec<_>>>()?;
    let foreground = block_foreground(&grid, labels);
    let ranges: Vec<f64> = centroids.iter().map(crate::real::norm3).collect();
    let n_max = grid.counts.iter().copied().max().unwrap_or(1);
    let m_d = ranges.iter().copied().fold(0.0, f64::max);
    let params = DdflParams {
        gamma: cfg.gamma,
        ..DdflParams::for_scene(n_max, m_d)
    };
    let mean_weight = (0..grid.len())
        .map(|b| Ok(m_den::<f64>(grid.counts[b], &params) * m_dis::<f64>(ranges[b], &params)?))
        .sum::<Result<f64>>()?
        / grid.len().max(1) as f64;
    let offsets = (0..grid.len())
        .map(|b| {
            foreground[b].then(|| {
                let t = block_offset_target(&grid, cloud, labels, b);
                (t.offset, t.in_box)
            })
        })
        .collect();
    Ok(Prepared {
        aug,
        centroids,
        neighbors,
        fg_blocks: (0..foreground.len()).filter(|&b| foreground[b]).collect(),
        bg_blocks: (0..foreground.len()).filter(|&b| !foreground[b]).collect(),
        foreground,
        counts: grid.counts.clone(),
        ranges,
        params,
        mean_weight,
        offsets,
    })
}

fn infer(p: &Prepared, nets: &LfdbfNets<f64>, alpha: f64) -> Result<BlockFeatures<f64>> {
    let encoded = encode_blocks(&p.aug, &nets.encoder)?;
    let diffused = nfdm_with_neighbors(&p.centroids, encoded.view(), &p.neighbors, &nets.nfdm)?;
    classify(diffused.view(), &nets.head, alpha)
}

fn metric_counts(p: &Prepared, bf: &BlockFeatures<f64>, far_fraction: f64) -> [usize; 6] {
    let far = far_fraction * p.params.m_d;
    let mut c = [0usize; 6];
    for b in 0..p.foreground.len() {
        let pred = bf.foreground_mask[b];
        if p.foreground[b] {
            c[0] += pred as usize;
            c[1] += 1;
            if p.ranges[b] > far {
                c[4] += pred as usize;
                c[5] += 1;
            }
        } else {
            c[2] += !pred as usize;
            c[3] += 1;
        }
    }
    c
}

fn holdout_metrics(set: &[Prepared], nets: &LfdbfNets<f64>, cfg: &TrainConfig) -> Result<BlockMetrics> {
    let mut total = [0usize; 6];
    for p in set {
        let bf = infer(p, nets, cfg.alpha)?;
        for (t, c) in total.iter_mut().zip(metric_counts(p, &bf, cfg.far_fraction)) {
            *t += c;
        }
    }
    Ok(BlockMetrics::from_counts(&total))
}

/// Block metrics of trained networks on one labeled scene.
pub fn block_metrics(
    cloud: &PointCloud<f32>,
    labels: &LabelSet,
    weights: &WeightsBundle,
    far_fraction: f64,
) -> Result<BlockMetrics> {
    let cfg = TrainConfig {
        grid: weights.grid,
        radii: weights.filter.nfdm.radii.clone(),
        alpha: weights.alpha,
        far_fraction,
        ..TrainConfig::default()
    };
    let p = prepare(cloud, labels, &cfg)?;
    let bf = infer(&p, &weights.filter, weights.alpha)?;
    Ok(BlockMetrics::from_counts(&metric_counts(&p, &bf, far_fraction)))
}

struct StepOutcome {
    loss: f64,
    offset_loss: Option<f64>,
}

fn train_step(
    p: &Prepared,
    queries: &[usize],
    bundle: &mut WeightsBundle,
    cfg: &TrainConfig,
    local: &mut [usize],
) -> Result<StepOutcome> {
    // Blocks touched by any query neighborhood, in ascending order.
    let mut touched: Vec<usize> = queries
        .iter()
        .flat_map(|&q| p.neighbors.iter().flat_map(move |n| n[q].iter().copied()))
        .collect();
    touched.sort_unstable();
    touched.dedup();
    for (l, &b) in touched.iter().enumerate() {
        local[b] = l;
    }

    let mut offsets = vec![0];
    let width = p.aug.width();
    let mut x = Vec::new();
    for &b in &touched {
        let rows = p.aug.block_rows(b);
        x.extend(rows.iter().map(|&v| v as f64));
        offsets.push(offsets.last().unwrap() + rows.nrows());
    }
    let x = Array2::from_shape_vec((x.len() / width, width), x).expect("rows of equal width");
    let nets = &bundle.filter;
    let (y, enc_cache) = nets.encoder.forward(x.view())?;
    let (pooled, arg) = segment_maxpool(y.view(), &offsets);

    let positions: Vec<[f64; 3]> = touched.iter().map(|&b| p.centroids[b]).collect();
    let local_queries: Vec<usize> = queries.iter().map(|&q| local[q]).collect();
    let local_neighbors: Vec<Vec<Vec<usize>>> = p
        .neighbors
        .iter()
        .map(|n| queries.iter().map(|&q| n[q].iter().map(|&j| local[j]).collect()).collect())
        .collect();
    let (diffused, tape) = nfdm_train_forward(&nets.nfdm, &positions, pooled.view(), &local_queries, &local_neighbors)?;
    let (conf, head_cache) = nets.head.forward(diffused.view())?;

    let inv = 1.0 / queries.len() as f64;
    let mut loss = 0.0;
    let mut d_conf = Array2::<f64>::zeros((queries.len(), 1));
    for (r, &q) in queries.iter().enumerate() {
        let label = p.foreground[q];
        let (l, g) = if cfg.density_distance {
            let (l, g) = ddfl(conf[[r, 0]], label, p.counts[q], p.ranges[q], &p.params)?;
            (l / p.mean_weight, g / p.mean_weight)
        } else {
            weighted_focal(conf[[r, 0]], label, cfg.gamma, 1.0)
        };
        loss += l * inv;
        d_conf[[r, 0]] = g * inv;
    }

    let (mut g_head, d_diffused) = nets.head.backward(&head_cache, d_conf.view())?;
    let (mut g_nfdm, d_pooled) = nfdm_train_backward(&nets.nfdm, &tape, d_diffused.view())?;
    let d_y = segment_maxpool_backward(d_pooled.view(), &arg, y.nrows());
    let (mut g_enc, _) = nets.encoder.backward(&enc_cache, d_y.view())?;

    let norm = (g_head.sum_squares() + g_nfdm.sum_squares() + g_enc.sum_squares()).sqrt();
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        let k = cfg.clip_norm / norm;
        g_head.scale(k);
        g_nfdm.scale(k);
        g_enc.scale(k);
    }

    // Offset head on the detached diffused features.
    let supervised: Vec<usize> = (0..queries.len())
        .filter(|&r| p.offsets[queries[r]].is_some())
        .collect();
    let mut offset_outcome = None;
    if !supervised.is_empty() {
        let c1 = diffused.ncols();
        let mut input = Array2::<f64>::zeros((supervised.len(), 3 + c1));
        let mut target = Array2::<f64>::zeros((supervised.len(), 3));
        let mut in_box = Vec::with_capacity(supervised.len());
        for (k, &r) in supervised.iter().enumerate() {
            let q = queries[r];
            let (t, flag) = p.offsets[q].expect("supervised rows carry targets");
            input.slice_mut(s![k, ..3]).assign(&ndarray::arr1(&p.centroids[q]));
            input.slice_mut(s![k, 3..]).assign(&diffused.row(r));
            target.row_mut(k).assign(&ndarray::arr1(&t));
            in_box.push(flag);
        }
        if in_box.iter().any(|&f| f) {
            let (pred, cache) = bundle.offset.forward(input.view())?;
            let (l, d_pred) = offset_loss(pred.view(), target.view(), &in_box)?;
            let (g_off, _) = bundle.offset.backward(&cache, d_pred.view())?;
            bundle.offset.sgd_step(&g_off, cfg.offset_lr);
            offset_outcome = Some(l);
        }
    }

    let nets = &mut bundle.filter;
    nets.head.sgd_step(&g_head, cfg.lr);
    nets.nfdm.sgd_step(&g_nfdm, cfg.lr);
    nets.encoder.sgd_step(&g_enc, cfg.lr);
    Ok(StepOutcome {
        loss,
        offset_loss: offset_outcome,
    })
}

/// Trains a fresh weight bundle on labeled scenes.
///
/// The last `ceil(holdout_fraction * n)` scenes are held out (at least one
/// scene always trains); with no held-out scene, metrics use the training set.
pub fn train_lfdbf(
    scenes: &[(PointCloud<f32>, LabelSet)],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(WeightsBundle, TrainReport)> {
    cfg.validate()?;
    let first = scenes
        .first()
        .ok_or_else(|| Error::arg("scenes", "need at least one labeled scene"))?;
    let channels = first.0.channels();
    if let Some(i) = scenes.iter().position(|(c, _)| c.channels() != channels) {
        return Err(Error::arg("scenes", format!("scene {i} has {} channels, expected {channels}", scenes[i].0.channels())));
    }
    let n = scenes.len();
    let held = ((n as f64 * cfg.holdout_fraction).ceil() as usize).min(n - 1);
    let train_ids: Vec<usize> = (0..n - held).collect();
    let holdout_ids: Vec<usize> = (n - held..n).collect();

    let mut init_rng = rng.split(0);
    let mut bundle = WeightsBundle::with_filter_radii(channels, &cfg.radii, &mut init_rng)?;
    bundle.grid = cfg.grid;
    bundle.alpha = cfg.alpha;

    let prepared: Vec<Prepared> = scenes
        .par_iter()
        .map(|(c, l)| prepare(c, l, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (train_set, holdout_set) = prepared.split_at(n - held);
    let eval_set = if holdout_set.is_empty() { train_set } else { holdout_set };

    let initial = holdout_metrics(eval_set, &bundle.filter, cfg)?;
    let mut order_rng = rng.split(1);
    let mut local = vec![0usize; train_set.iter().map(|p| p.centroids.len()).max().unwrap_or(0)];
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(train_set, cfg, &mut order_rng);
        let (mut loss_sum, mut off_sum, mut off_steps) = (0.0, 0.0, 0usize);
        for (scene, queries) in &batches {
            let out = train_step(&train_set[*scene], queries, &mut bundle, cfg, &mut local)?;
            loss_sum += out.loss;
            if let Some(l) = out.offset_loss {
                off_sum += l;
                off_steps += 1;
            }
        }
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / batches.len().max(1) as f64,
            offset_loss: if off_steps == 0 { 0.0 } else { off_sum / off_steps as f64 },
            holdout: holdout_metrics(eval_set, &bundle.filter, cfg)?,
        });
    }
    Ok((
        bundle,
        TrainReport {
            train_scenes: train_ids,
            holdout_scenes: holdout_ids,
            initial,
            epochs,
        },
    ))
}

/// `(scene, query blocks)` batches for one epoch.
fn epoch_batches(set: &[Prepared], cfg: &TrainConfig, rng: &mut Rng) -> Vec<(usize, Vec<usize>)> {
    let total: usize = set.iter().map(|p| p.centroids.len()).sum();
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| total.div_ceil(cfg.batch_blocks).max(1));
    let mut batches = Vec::with_capacity(steps);
    for _ in 0..steps {
        let s = rng.below(set.len());
        let p = &set[s];
        let queries = match cfg.foreground_share {
            None => rng.sample_indices(p.centroids.len(), cfg.batch_blocks.min(p.centroids.len())),
            Some(share) => {
                let want = (share * cfg.batch_blocks as f64).round() as usize;
                let k_fg = want.min(p.fg_blocks.len());
                let k_bg = (cfg.batch_blocks - k_fg).min(p.bg_blocks.len());
                let mut q: Vec<usize> = rng
                    .sample_indices(p.fg_blocks.len(), k_fg)
                    .into_iter()
                    .map(|i| p.fg_blocks[i])
                    .collect();
                q.extend(rng.sample_indices(p.bg_blocks.len(), k_bg).into_iter().map(|i| p.bg_blocks[i]));
                q
            }
        };
        if !queries.is_empty() {
            batches.push((s, queries));
        }
    }
    batches
}
