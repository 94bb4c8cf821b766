//! Centroid-instance sampling and the centroid offset head.
//!
//! Centers are the `m1` most confident foreground block centroids followed by
//! the `m2` foreground points closest to the sensor origin. Each center row
//! carries `[position ; block feature]`.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::grid::BlockGrid;
use crate::labels::{LabelSet, CONTAINMENT_SLACK};
use crate::lfdbf::BlockFeatures;
use crate::nn::{Activation, Mlp};
use crate::real::Real;
use crate::rng::Rng;
use crate::scene::{AsSampledRows, RowSource, SampledRow};

pub const OFFSET_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterTag {
    Centroid,
    Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet<T: Real> {
    pub positions: Vec<[T; 3]>,
    /// rows x (3 + c1); the first three entries mirror `positions`.
    pub features: Array2<T>,
    pub tags: Vec<CenterTag>,
    pub sources: Vec<RowSource>,
    /// Block index of every row (the owning block for instance rows).
    pub blocks: Vec<usize>,
    pub m1_eff: usize,
    pub m2_eff: usize,
    /// Set when no block passed the threshold; the set is then empty.
    pub no_foreground: bool,
}

impl<T: Real> CenterSet<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn empty(width: usize) -> Self {
        Self {
            positions: Vec::new(),
            features: Array2::zeros((0, width)),
            tags: Vec::new(),
            sources: Vec::new(),
            blocks: Vec::new(),
            m1_eff: 0,
            m2_eff: 0,
            no_foreground: false,
        }
    }
}

impl<T: Real> AsSampledRows for CenterSet<T> {
    fn sampled_rows(&self) -> Vec<SampledRow> {
        self.positions
            .iter()
            .zip(&self.sources)
            .map(|(p, &source)| SampledRow {
                position: p.map(|v| v.to_f64_lossy()),
                source,
            })
            .collect()
    }
}

fn range_of<C: Real>(p: &[C; 3]) -> f64 {
    crate::real::norm3(p)
}

pub fn ciss_select<C: Real, T: Real>(
    grid: &BlockGrid<C>,
    bf: &BlockFeatures<T>,
    cloud: &PointCloud<C>,
    m1: usize,
    m2: usize,
) -> Result<CenterSet<T>> {
    if bf.len() != grid.len() || bf.features.nrows() != grid.len() {
        return Err(Error::arg("bf", format!("{} block features for {} blocks", bf.len(), grid.len())));
    }
    let c1 = bf.features.ncols();
    let mut out = CenterSet::empty(3 + c1);
    let fg: Vec<usize> = (0..grid.len()).filter(|&b| bf.foreground_mask[b]).collect();
    if fg.is_empty() {
        out.no_foreground = true;
        return Ok(out);
    }

    let mut ranked = fg.clone();
    ranked.sort_by(|&a, &b| {
        bf.confidences[b]
            .partial_cmp(&bf.confidences[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(grid.block_keys[a].cmp(&grid.block_keys[b]))
    });
    ranked.truncate(m1);

    let mut instances: Vec<(f64, u32)> = fg
        .iter()
        .flat_map(|&b| grid.points_of(b).iter().map(|&i| (range_of(&cloud.xyz(i as usize)), i)))
        .collect();
    let by_range = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if instances.len() > m2 && m2 > 0 {
        instances.select_nth_unstable_by(m2 - 1, by_range);
    }
    instances.truncate(m2);
    instances.sort_unstable_by(by_range);

    let rows = ranked.len() + instances.len();
    let mut features = Array2::<T>::zeros((rows, 3 + c1));
    for (r, &b) in ranked.iter().enumerate() {
        let p = grid.centroids[b].map(|v| T::from_f64_lossy(v.to_f64_lossy()));
        out.positions.push(p);
        out.tags.push(CenterTag::Centroid);
        out.sources.push(RowSource::Block(grid.block_keys[b]));
        out.blocks.push(b);
        let mut row = features.row_mut(r);
        row.slice_mut(s![..3]).assign(&ndarray::arr1(&p));
        row.slice_mut(s![3..]).assign(&bf.features.row(b));
    }
    for (k, &(_, i)) in instances.iter().enumerate() {
        let i = i as usize;
        let b = grid.block_of_point(i);
        let p = cloud.xyz(i).map(|v| T::from_f64_lossy(v.to_f64_lossy()));
        out.positions.push(p);
        out.tags.push(CenterTag::Instance);
        out.sources.push(RowSource::Point(i));
        out.blocks.push(b);
        let mut row = features.row_mut(ranked.len() + k);
        row.slice_mut(s![..3]).assign(&ndarray::arr1(&p));
        row.slice_mut(s![3..]).assign(&bf.features.row(b));
    }
    out.features = features;
    out.m1_eff = ranked.len();
    out.m2_eff = instances.len();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetTarget {
    pub block: usize,
    /// Nearest labeled-foreground member of the block minus the centroid.
    pub offset: [f64; 3],
    pub in_box: bool,
}

/// Regression targets for one block. `None` when the block has no labeled
/// foreground member.
pub fn block_offset_target<C: Real>(
    grid: &BlockGrid<C>,
    cloud: &PointCloud<C>,
    labels: &LabelSet,
    block: usize,
) -> OffsetTarget {
    let centroid = grid.centroids[block].map(|v| v.to_f64_lossy());
    let mut best: Option<(f64, usize)> = None;
    for &i in grid.points_of(block) {
        let i = i as usize;
        if !labels.is_foreground(i) {
            continue;
        }
        let p = cloud.xyz(i).map(|v| v.to_f64_lossy());
        let d2 = crate::real::dist2(&p, &centroid);
        if best.is_none_or(|(bd, _)| d2 < bd) {
            best = Some((d2, i));
        }
    }
    match best {
        None => OffsetTarget {
            block,
            offset: [0.0; 3],
            in_box: false,
        },
        Some((_, i)) => {
            let p = cloud.xyz(i).map(|v| v.to_f64_lossy());
            let in_box = labels
                .boxes
                .iter()
                .any(|b| b.contains_with_slack(centroid, CONTAINMENT_SLACK));
            OffsetTarget {
                block,
                offset: std::array::from_fn(|a| p[a] - centroid[a]),
                in_box,
            }
        }
    }
}

/// Targets for every foreground block of `bf`, ascending block index.
pub fn offset_targets<C: Real, T: Real>(
    grid: &BlockGrid<C>,
    bf: &BlockFeatures<T>,
    cloud: &PointCloud<C>,
    labels: &LabelSet,
) -> Result<Vec<OffsetTarget>> {
    labels.validate(Some(cloud.len()))?;
    if bf.len() != grid.len() {
        return Err(Error::arg("bf", "block features do not match the grid"));
    }
    Ok((0..grid.len())
        .filter(|&b| bf.foreground_mask[b])
        .map(|b| block_offset_target(grid, cloud, labels, b))
        .collect())
}

#[inline]
fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Mean over `in_box` rows of the per-row summed SmoothL1 residual, with its
/// gradient with respect to `predicted`.
pub fn offset_loss<T: Real>(
    predicted: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
    in_box: &[bool],
) -> Result<(T, Array2<T>)> {
    if predicted.dim() != targets.dim() || predicted.nrows() != in_box.len() {
        return Err(Error::arg(
            "predicted",
            format!(
                "shapes {:?} / {:?} / {} flags disagree",
                predicted.dim(),
                targets.dim(),
                in_box.len()
            ),
        ));
    }
    let active = in_box.iter().filter(|&&f| f).count();
    let mut grad = Array2::zeros(predicted.raw_dim());
    if active == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = 1.0 / active as f64;
    let mut total = 0.0;
    for (r, &flag) in in_box.iter().enumerate() {
        if !flag {
            continue;
        }
        for c in 0..predicted.ncols() {
            let (l, g) = smooth_l1(predicted[[r, c]].to_f64_lossy() - targets[[r, c]].to_f64_lossy());
            total += l;
            grad[[r, c]] = T::from_f64_lossy(g * inv);
        }
    }
    Ok((T::from_f64_lossy(total * inv), grad))
}

/// `(3 + c1) -> 16 -> 3` regression head for centroid offsets.
pub fn offset_head<T: Real>(c1: usize, rng: &mut Rng) -> Mlp<T> {
    Mlp::new(&[3 + c1, OFFSET_HIDDEN, 3], &[Activation::Relu, Activation::None], rng)
}

/// Rows tagged as centroids, in output order.
pub fn centroid_rows<T: Real>(centers: &CenterSet<T>) -> Vec<usize> {
    (0..centers.len())
        .filter(|&r| centers.tags[r] == CenterTag::Centroid)
        .collect()
}

/// Adds `deltas` (one row per centroid row, in order) to centroid positions
/// and their feature prefixes; instance rows are untouched.
pub fn shift_centroids<T: Real>(centers: &CenterSet<T>, deltas: ndarray::ArrayView2<'_, T>) -> Result<CenterSet<T>> {
    let rows = centroid_rows(centers);
    if deltas.dim() != (rows.len(), 3) {
        return Err(Error::arg(
            "deltas",
            format!("shape {:?} for {} centroid rows", deltas.dim(), rows.len()),
        ));
    }
    let mut out = centers.clone();
    for (k, &r) in rows.iter().enumerate() {
        for a in 0..3 {
            out.positions[r][a] += deltas[[k, a]];
            out.features[[r, a]] = out.positions[r][a];
        }
    }
    Ok(out)
}

/// Moves centroid rows by the head's predicted offsets.
pub fn apply_offsets<T: Real>(centers: &CenterSet<T>, head: &Mlp<T>) -> Result<CenterSet<T>> {
    if head.input_width() != centers.features.ncols() || head.output_width() != 3 {
        return Err(Error::arg(
            "head",
            format!(
                "expects {} -> 3, centers have width {}",
                head.input_width(),
                centers.features.ncols()
            ),
        ));
    }
    let rows = centroid_rows(centers);
    if rows.is_empty() {
        return Ok(centers.clone());
    }
    let delta = head.predict(centers.features.select(Axis(0), &rows).view())?;
    shift_centroids(centers, delta.view())
}
