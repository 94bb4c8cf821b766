//! Radius-bounded neighbor search over a uniform spatial hash.

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::real::{dist2, Real};

type CellKey = [i64; 3];

/// Uniform hash grid over a fixed target set.
///
/// Targets are stored bucketed by cell, ascending target index within a cell.
#[derive(Debug, Clone)]
pub struct HashGrid<T: Real> {
    cell: f64,
    targets: Vec<[T; 3]>,
    order: Vec<u32>,
    cells: FxHashMap<CellKey, (u32, u32)>,
    /// Inclusive bounds of occupied cell keys.
    lo: CellKey,
    hi: CellKey,
}

#[inline]
fn cell_of<T: Real>(p: &[T; 3], inv_cell: f64) -> CellKey {
    [
        (p[0].to_f64_lossy() * inv_cell).floor() as i64,
        (p[1].to_f64_lossy() * inv_cell).floor() as i64,
        (p[2].to_f64_lossy() * inv_cell).floor() as i64,
    ]
}

impl<T: Real> HashGrid<T> {
    pub fn new(targets: &[[T; 3]], cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::arg("cell", format!("cell edge must be positive, got {cell}")));
        }
        let inv = 1.0 / cell;
        let mut keyed: Vec<(CellKey, u32)> = targets
            .iter()
            .enumerate()
            .map(|(i, p)| (cell_of(p, inv), i as u32))
            .collect();
        keyed.sort_unstable();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (k, _) in &keyed {
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
        }
        let mut cells = FxHashMap::with_capacity_and_hasher(keyed.len() / 2 + 1, Default::default());
        let mut start = 0usize;
        while start < keyed.len() {
            let key = keyed[start].0;
            let mut end = start + 1;
            while end < keyed.len() && keyed[end].0 == key {
                end += 1;
            }
            cells.insert(key, (start as u32, (end - start) as u32));
            start = end;
        }
        Ok(Self {
            cell,
            targets: targets.to_vec(),
            order: keyed.into_iter().map(|(_, i)| i).collect(),
            cells,
            lo,
            hi,
        })
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn targets(&self) -> &[[T; 3]] {
        &self.targets
    }

    /// Neighbors of `center` within `radius`, nearest `max_k` by
    /// (distance, index), returned in that order.
    ///
    /// Cells are visited ring by ring; the scan stops once the current
    /// `max_k`-th distance is strictly closer than anything an outer ring
    /// could hold, so the answer matches an exhaustive scan.
    pub fn query(&self, center: &[T; 3], radius: f64, max_k: usize, out: &mut Vec<(f64, u32)>) {
        out.clear();
        let r2 = radius * radius;
        let inv = 1.0 / self.cell;
        let c = cell_of(center, inv);
        let reach = (radius / self.cell).ceil().max(1.0) as i64;
        if self.targets.is_empty() {
            return;
        }
        // Offsets outside [lo - c, hi - c] address empty cells.
        let span: [(i64, i64); 3] = std::array::from_fn(|a| (self.lo[a] - c[a], self.hi[a] - c[a]));
        for ring in 0..=reach {
            let range = |a: usize| span[a].0.max(-ring)..=span[a].1.min(ring);
            for dx in range(0) {
                for dy in range(1) {
                    // Off the x/y shell only the z faces belong to this ring.
                    let on_side = dx.abs().max(dy.abs()) == ring;
                    for dz in range(2) {
                        if !on_side && dz.abs() != ring {
                            continue;
                        }
                        let key = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if let Some(&(start, len)) = self.cells.get(&key) {
                            for &t in &self.order[start as usize..(start + len) as usize] {
                                let d2 = dist2(center, &self.targets[t as usize]);
                                if d2 <= r2 {
                                    out.push((d2, t));
                                }
                            }
                        }
                    }
                }
            }
            let covered = (0..3).all(|a| span[a].0 >= -ring && span[a].1 <= ring);
            if covered {
                break;
            }
            if out.len() >= max_k && ring < reach {
                truncate_nearest(out, max_k);
                let bound = ring as f64 * self.cell;
                if out[max_k - 1].0 < bound * bound {
                    break;
                }
            }
        }
        truncate_nearest(out, max_k);
    }

    pub fn query_all(&self, centers: &[[T; 3]], radius: f64, max_k: usize) -> Vec<Vec<usize>> {
        centers
            .par_iter()
            .map_init(Vec::new, |buf, c| {
                self.query(c, radius, max_k, buf);
                buf.iter().map(|&(_, t)| t as usize).collect()
            })
            .collect()
    }
}

/// Keeps the `k` smallest by (distance, index), sorted.
fn truncate_nearest(v: &mut Vec<(f64, u32)>, k: usize) {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if v.len() > k {
        v.select_nth_unstable_by(k - 1, cmp);
        v.truncate(k);
    }
    v.sort_unstable_by(cmp);
}

fn check_args(radius: f64, max_k: usize) -> Result<()> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::arg("radius", format!("must be positive, got {radius}")));
    }
    if max_k == 0 {
        return Err(Error::arg("max_k", "must be at least 1"));
    }
    Ok(())
}

/// Ball query with the classic 27-cell probe (cell edge = radius).
pub fn ball_query<T: Real>(
    centers: &[[T; 3]],
    targets: &[[T; 3]],
    radius: f64,
    max_k: usize,
) -> Result<Vec<Vec<usize>>> {
    check_args(radius, max_k)?;
    let grid = HashGrid::new(targets, radius)?;
    Ok(grid.query_all(centers, radius, max_k))
}

/// Same contract as [`ball_query`] on a finer grid, which pays off when
/// `max_k` is small relative to the number of targets inside `radius`.
pub fn ball_query_with_cell<T: Real>(
    centers: &[[T; 3]],
    targets: &[[T; 3]],
    radius: f64,
    max_k: usize,
    cell: f64,
) -> Result<Vec<Vec<usize>>> {
    check_args(radius, max_k)?;
    let grid = HashGrid::new(targets, cell.min(radius))?;
    Ok(grid.query_all(centers, radius, max_k))
}
