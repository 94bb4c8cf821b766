//! Block partition of a cloud and pillar-style per-point augmentation.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::real::Real;

pub type BlockKey = [i32; 3];

pub const DEFAULT_BLOCK_SIZE: [f64; 3] = [0.075, 0.075, 1.0];
pub const DEFAULT_S_MAX: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub block_size: [f64; 3],
    pub s_max: usize,
    /// Defaults to the per-axis minimum snapped down to a block multiple.
    #[serde(default)]
    pub origin: Option<[f64; 3]>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            s_max: DEFAULT_S_MAX,
            origin: None,
        }
    }
}

/// Occupied blocks of a cloud.
///
/// Member lists are stored flat: block `b` owns `members[offsets[b]..offsets[b + 1]]`,
/// ascending point index.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid<T: Real> {
    pub block_size: [f64; 3],
    pub origin: [f64; 3],
    pub s_max: usize,
    pub block_keys: Vec<BlockKey>,
    pub centroids: Vec<[T; 3]>,
    /// True occupancy N_v, including points beyond `s_max`.
    pub counts: Vec<usize>,
    /// Points excluded from feature computation by `s_max`.
    pub overflow: usize,
    members: Vec<u32>,
    offsets: Vec<usize>,
    block_of_point: Vec<u32>,
}

impl<T: Real> BlockGrid<T> {
    pub fn len(&self) -> usize {
        self.block_keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block_keys.is_empty()
    }

    pub fn points_of(&self, block: usize) -> &[u32] {
        &self.members[self.offsets[block]..self.offsets[block + 1]]
    }

    /// The first `s_max` members; these feed centroids and features.
    pub fn retained(&self, block: usize) -> &[u32] {
        let all = self.points_of(block);
        &all[..all.len().min(self.s_max)]
    }

    pub fn block_of_point(&self, point: usize) -> usize {
        self.block_of_point[point] as usize
    }

    pub fn find(&self, key: &BlockKey) -> Option<usize> {
        self.block_keys.binary_search(key).ok()
    }

    pub fn key_of(&self, p: &[T; 3]) -> BlockKey {
        key_for(p, &self.origin, &self.block_size)
    }

    pub fn geometric_center(&self, block: usize) -> [f64; 3] {
        let k = self.block_keys[block];
        std::array::from_fn(|a| self.origin[a] + (k[a] as f64 + 0.5) * self.block_size[a])
    }

    /// Debug dump: keys, counts and centroids.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "block_size": self.block_size,
            "origin": self.origin,
            "s_max": self.s_max,
            "overflow": self.overflow,
            "block_keys": self.block_keys,
            "counts": self.counts,
            "centroids": self
                .centroids
                .iter()
                .map(|c| c.map(|v| v.to_f64_lossy()))
                .collect::<Vec<_>>(),
        })
    }
}

#[inline]
fn key_for<T: Real>(p: &[T; 3], origin: &[f64; 3], size: &[f64; 3]) -> BlockKey {
    std::array::from_fn(|a| ((p[a].to_f64_lossy() - origin[a]) / size[a]).floor() as i32)
}

pub fn default_origin<T: Real>(cloud: &PointCloud<T>, block_size: &[f64; 3]) -> [f64; 3] {
    if cloud.is_empty() {
        return [0.0; 3];
    }
    let pts = cloud.points();
    std::array::from_fn(|a| {
        let min = pts
            .column(a)
            .iter()
            .map(|v| v.to_f64_lossy())
            .fold(f64::INFINITY, f64::min);
        (min / block_size[a]).floor() * block_size[a]
    })
}

pub fn partition<T: Real>(cloud: &PointCloud<T>, cfg: &GridConfig) -> Result<BlockGrid<T>> {
    if !cfg.block_size.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(Error::arg("block_size", format!("{:?} must be positive", cfg.block_size)));
    }
    if cfg.s_max == 0 {
        return Err(Error::arg("s_max", "must be at least 1"));
    }
    let origin = cfg
        .origin
        .unwrap_or_else(|| default_origin(cloud, &cfg.block_size));
    let n = cloud.len();
    let mut keyed: Vec<(BlockKey, u32)> = (0..n)
        .into_par_iter()
        .map(|i| (key_for(&cloud.xyz(i), &origin, &cfg.block_size), i as u32))
        .collect();
    keyed.par_sort_unstable();

    let mut block_keys = Vec::new();
    let mut offsets = vec![0usize];
    let mut block_of_point = vec![0u32; n];
    for (pos, &(key, idx)) in keyed.iter().enumerate() {
        if block_keys.last() != Some(&key) {
            if pos > 0 {
                offsets.push(pos);
            }
            block_keys.push(key);
        }
        block_of_point[idx as usize] = (block_keys.len() - 1) as u32;
    }
    if n > 0 {
        offsets.push(n);
    }
    let members: Vec<u32> = keyed.into_iter().map(|(_, i)| i).collect();
    let m = block_keys.len();

    let counts: Vec<usize> = (0..m).map(|b| offsets[b + 1] - offsets[b]).collect();
    let overflow = counts.iter().map(|&c| c.saturating_sub(cfg.s_max)).sum();
    let centroids = (0..m)
        .into_par_iter()
        .map(|b| {
            let list = &members[offsets[b]..offsets[b + 1]];
            let kept = &list[..list.len().min(cfg.s_max)];
            let mut acc = [0f64; 3];
            for &i in kept {
                let p = cloud.xyz(i as usize);
                for a in 0..3 {
                    acc[a] += p[a].to_f64_lossy();
                }
            }
            let inv = 1.0 / kept.len() as f64;
            acc.map(|v| T::from_f64_lossy(v * inv))
        })
        .collect();

    Ok(BlockGrid {
        block_size: cfg.block_size,
        origin,
        s_max: cfg.s_max,
        block_keys,
        centroids,
        counts,
        overflow,
        members,
        offsets,
        block_of_point,
    })
}

/// Per-point features `[raw channels ; p - centroid ; p - block center]`.
///
/// Stored ragged: block `b` owns rows `offsets[b]..offsets[b + 1]` of `rows`
/// (its retained points in ascending index order). [`Self::padded`] expands
/// to the dense `m x s x (c + 6)` tensor with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBlockMatrix<T: Real> {
    pub s: usize,
    rows: Array2<T>,
    offsets: Vec<usize>,
}

impl<T: Real> AugmentedBlockMatrix<T> {
    pub fn blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, T> {
        self.rows.view()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn block_rows(&self, block: usize) -> ArrayView2<'_, T> {
        self.rows
            .slice(ndarray::s![self.offsets[block]..self.offsets[block + 1], ..])
    }

    pub fn is_valid(&self, block: usize, slot: usize) -> bool {
        slot < self.offsets[block + 1] - self.offsets[block]
    }

    pub fn padded(&self) -> (Array3<T>, Array2<bool>) {
        let m = self.blocks();
        let mut values = Array3::zeros((m, self.s, self.width()));
        let mut mask = Array2::from_elem((m, self.s), false);
        for b in 0..m {
            for (slot, row) in self.block_rows(b).rows().into_iter().enumerate() {
                values.slice_mut(ndarray::s![b, slot, ..]).assign(&row);
                mask[[b, slot]] = true;
            }
        }
        (values, mask)
    }

    /// Rebuilds the ragged form from a padded tensor (valid slots must be a prefix).
    pub fn from_padded(values: ArrayView3<'_, T>, mask: ArrayView2<'_, bool>) -> Result<Self> {
        let (m, s, d) = values.dim();
        let mut offsets = vec![0];
        let mut flat = Vec::new();
        for b in 0..m {
            let mut count = 0;
            for slot in 0..s {
                if mask[[b, slot]] {
                    if slot != count {
                        return Err(Error::Validation(format!("block {b}: valid slots are not a prefix")));
                    }
                    flat.extend(values.slice(ndarray::s![b, slot, ..]).iter().copied());
                    count += 1;
                }
            }
            offsets.push(offsets[b] + count);
        }
        let rows = Array2::from_shape_vec((offsets[m], d), flat).map_err(|e| Error::Validation(e.to_string()))?;
        Ok(Self { s, rows, offsets })
    }
}

pub fn augment<T: Real>(grid: &BlockGrid<T>, cloud: &PointCloud<T>) -> Result<AugmentedBlockMatrix<T>> {
    let c = cloud.channels();
    if grid.block_of_point.len() != cloud.len() {
        return Err(Error::arg("grid", "grid was built from a different cloud"));
    }
    let m = grid.len();
    let mut offsets = Vec::with_capacity(m + 1);
    offsets.push(0);
    for b in 0..m {
        offsets.push(offsets[b] + grid.retained(b).len());
    }
    let total = offsets[m];
    let width = c + 6;
    let pts = cloud.points();
    let mut rows = Array2::<T>::zeros((total, width));
    let slices: Vec<&mut [T]> = {
        let buf = rows.as_slice_mut().expect("standard layout");
        let mut out = Vec::with_capacity(m);
        let mut rest = buf;
        for b in 0..m {
            let (head, tail) = rest.split_at_mut((offsets[b + 1] - offsets[b]) * width);
            out.push(head);
            rest = tail;
        }
        out
    };
    slices.into_par_iter().enumerate().for_each(|(b, chunk)| {
        let centroid = grid.centroids[b].map(|v| v.to_f64_lossy());
        let center = grid.geometric_center(b);
        for (slot, &i) in grid.retained(b).iter().enumerate() {
            let row = &mut chunk[slot * width..(slot + 1) * width];
            let i = i as usize;
            for k in 0..c {
                row[k] = pts[[i, k]];
            }
            for a in 0..3 {
                let p = pts[[i, a]].to_f64_lossy();
                row[c + a] = T::from_f64_lossy(p - centroid[a]);
                row[c + 3 + a] = T::from_f64_lossy(p - center[a]);
            }
        }
    });
    Ok(AugmentedBlockMatrix {
        s: grid.s_max,
        rows,
        offsets,
    })
}
