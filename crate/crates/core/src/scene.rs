//! Synthetic labeled LiDAR scenes and sampling quality metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::grid::{BlockGrid, BlockKey};
use crate::labels::{BoxLabel, LabelSet};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    /// Default (length, width, height) in meters.
    pub fn size(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [4.5, 1.9, 1.6],
            ObjectClass::Pedestrian => [0.8, 0.8, 1.7],
            ObjectClass::Cyclist => [1.8, 0.6, 1.7],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceGroup {
    pub class: ObjectClass,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub ground_radius: f64,
    /// Sensor blind radius; no ground returns inside it.
    pub min_range: f64,
    pub ground_points: usize,
    pub instance_points: usize,
    pub instances: Vec<InstanceGroup>,
    /// Range interval for instance centers (meters).
    pub distance_range: [f64; 2],
    /// Ground surface density falls off as `1 / distance^falloff`.
    pub falloff: f64,
    /// Std-dev of ground height noise (meters).
    pub noise_sigma: f64,
    pub ground_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenePreset {
    Small,
    Large,
}

impl std::str::FromStr for ScenePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(ScenePreset::Small),
            "large" => Ok(ScenePreset::Large),
            other => Err(Error::arg("preset", format!("unknown scene preset `{other}`"))),
        }
    }
}

fn mix(total: usize) -> Vec<InstanceGroup> {
    let cars = (total * 3).div_ceil(5);
    let peds = (total - cars) / 2;
    vec![
        InstanceGroup { class: ObjectClass::Car, count: cars },
        InstanceGroup { class: ObjectClass::Pedestrian, count: peds },
        InstanceGroup { class: ObjectClass::Cyclist, count: total - cars - peds },
    ]
}

impl SceneSpec {
    /// small: 20k points / 8 instances; large: 100k points / 40 instances.
    pub fn preset(preset: ScenePreset, seed: u64) -> Self {
        let (total, instances, radius) = match preset {
            ScenePreset::Small => (20_000, 8, 40.0),
            ScenePreset::Large => (100_000, 40, 50.0),
        };
        let instance_points = total / 10;
        Self {
            seed,
            ground_radius: radius,
            min_range: 2.0,
            ground_points: total - instance_points,
            instance_points,
            instances: mix(instances),
            distance_range: [4.0, radius - 3.0],
            falloff: 1.5,
            noise_sigma: 0.03,
            ground_z: -1.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ground_radius > 0.0) {
            return Err(Error::arg("ground_radius", "must be positive"));
        }
        if !(self.falloff >= 0.0) {
            return Err(Error::arg("falloff", "must be non-negative"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::arg("noise_sigma", "must be non-negative"));
        }
        if !(self.min_range >= 0.0 && self.min_range < self.ground_radius) {
            return Err(Error::arg("min_range", "must lie in [0, ground_radius)"));
        }
        let [lo, hi] = self.distance_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::arg("distance_range", "must be an ordered non-negative interval"));
        }
        Ok(())
    }

    pub fn instance_count(&self) -> usize {
        self.instances.iter().map(|g| g.count).sum()
    }
}

/// Radius drawn so that surface density on the annulus falls off as `r^-falloff`.
fn sample_radius(rng: &mut Rng, r0: f64, r1: f64, falloff: f64) -> f64 {
    let u = rng.uniform();
    let k = 2.0 - falloff;
    if k.abs() < 1e-9 {
        let r0 = r0.max(1e-3);
        r0 * (r1 / r0).powf(u)
    } else {
        let a = r0.powf(k);
        let b = r1.powf(k);
        (a + u * (b - a)).powf(1.0 / k)
    }
}

/// Largest-remainder split of `budget` proportional to `weights`, at least
/// one point per instance while the budget allows.
fn allocate(budget: usize, weights: &[f64]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let floor_each = if budget >= n { 1 } else { 0 };
    let rest = budget - floor_each * n;
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| rest as f64 * w / total).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = rest - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    alloc.iter().map(|a| a + floor_each).collect()
}

/// Uniform point on the visible surface (four sides and the top) of a box,
/// in the box frame.
fn surface_point(rng: &mut Rng, size: [f64; 3]) -> [f64; 3] {
    let [l, w, h] = size;
    let areas = [w * h, w * h, l * h, l * h, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.uniform() * total;
    let mut face = 4;
    for (k, a) in areas.iter().enumerate() {
        if pick < *a {
            face = k;
            break;
        }
        pick -= a;
    }
    let u = rng.uniform() - 0.5;
    let v = rng.uniform() - 0.5;
    match face {
        0 => [0.5 * l, u * w, v * h],
        1 => [-0.5 * l, u * w, v * h],
        2 => [u * l, 0.5 * w, v * h],
        3 => [u * l, -0.5 * w, v * h],
        _ => [u * l, v * w, 0.5 * h],
    }
}

pub fn synth(spec: &SceneSpec) -> Result<(PointCloud<f32>, LabelSet)> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut place_rng = root.split(1);
    let mut inst_rng = root.split(2);
    let mut ground_rng = root.split(3);
    let mut shuffle_rng = root.split(4);

    let mut boxes: Vec<BoxLabel> = Vec::new();
    let mut ranges = Vec::new();
    let mut footprints: Vec<([f64; 2], f64)> = Vec::new();
    let [lo, hi] = spec.distance_range;
    for group in &spec.instances {
        for k in 0..group.count {
            let size = group.class.size();
            let reach = 0.5 * size[0].hypot(size[1]);
            let mut placed = false;
            for _ in 0..200 {
                let r = place_rng.range_f64(lo, hi);
                let theta = place_rng.range_f64(-std::f64::consts::PI, std::f64::consts::PI);
                let c = [r * theta.cos(), r * theta.sin()];
                let clear = footprints
                    .iter()
                    .all(|(o, rr)| (c[0] - o[0]).hypot(c[1] - o[1]) >= reach + rr + 0.5);
                if !clear {
                    continue;
                }
                let yaw = place_rng.range_f64(-std::f64::consts::PI, std::f64::consts::PI);
                boxes.push(BoxLabel {
                    center: [c[0], c[1], spec.ground_z + 0.5 * size[2]],
                    size,
                    yaw,
                    class: group.class.name().to_string(),
                });
                ranges.push(r);
                footprints.push((c, reach));
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Placement(format!("{} #{k}", group.class.name())));
            }
        }
    }

    let weights: Vec<f64> = ranges.iter().map(|r| 1.0 / (r * r).max(1e-6)).collect();
    let per_box = allocate(if boxes.is_empty() { 0 } else { spec.instance_points }, &weights);

    let mut rows: Vec<([f64; 4], i64)> = Vec::with_capacity(spec.ground_points + spec.instance_points);
    for (id, (b, &count)) in boxes.iter().zip(&per_box).enumerate() {
        let (s, c) = b.yaw.sin_cos();
        for _ in 0..count {
            let local = surface_point(&mut inst_rng, b.size);
            let p = [
                b.center[0] + c * local[0] - s * local[1],
                b.center[1] + s * local[0] + c * local[1],
                b.center[2] + local[2],
            ];
            rows.push(([p[0], p[1], p[2], inst_rng.uniform()], id as i64));
        }
    }
    let mut ground = 0;
    while ground < spec.ground_points {
        let r = sample_radius(&mut ground_rng, spec.min_range, spec.ground_radius, spec.falloff);
        let theta = ground_rng.range_f64(-std::f64::consts::PI, std::f64::consts::PI);
        let z = ground_rng.normal(spec.ground_z, spec.noise_sigma);
        let intensity = ground_rng.uniform();
        let p = [r * theta.cos(), r * theta.sin(), z];
        // Nothing is visible underneath an object.
        let occluded = boxes.iter().any(|b| {
            let l = b.to_local(p);
            l[0].abs() <= 0.5 * b.size[0] + 0.05 && l[1].abs() <= 0.5 * b.size[1] + 0.05
        });
        if occluded {
            continue;
        }
        rows.push(([p[0], p[1], p[2], intensity], -1));
        ground += 1;
    }

    for i in (1..rows.len()).rev() {
        let j = shuffle_rng.below(i + 1);
        rows.swap(i, j);
    }
    let n = rows.len();
    let points = Array2::from_shape_fn((n, 4), |(i, k)| rows[i].0[k] as f32);
    let labels = LabelSet {
        boxes,
        point_box_id: rows.iter().map(|r| r.1).collect(),
    };
    Ok((PointCloud::new(points)?, labels))
}

/// Where a sampled row came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "id")]
pub enum RowSource {
    /// A raw point of the source cloud.
    Point(usize),
    /// A block centroid (possibly moved by the offset head).
    Block(BlockKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledRow {
    pub position: [f64; 3],
    pub source: RowSource,
}

/// Anything that can be judged by [`evaluate`].
pub trait AsSampledRows {
    fn sampled_rows(&self) -> Vec<SampledRow>;
}

impl<T: Real> AsSampledRows for crate::samplers::SampleResult<T> {
    fn sampled_rows(&self) -> Vec<SampledRow> {
        self.indices
            .iter()
            .zip(&self.positions)
            .map(|(&i, p)| SampledRow {
                position: p.map(|v| v.to_f64_lossy()),
                source: RowSource::Point(i),
            })
            .collect()
    }
}

impl<T: Real> AsSampledRows for crate::samplers::CentroidSample<T> {
    fn sampled_rows(&self) -> Vec<SampledRow> {
        self.keys
            .iter()
            .zip(&self.positions)
            .map(|(&k, p)| SampledRow {
                position: p.map(|v| v.to_f64_lossy()),
                source: RowSource::Block(k),
            })
            .collect()
    }
}

impl AsSampledRows for [SampledRow] {
    fn sampled_rows(&self) -> Vec<SampledRow> {
        self.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    /// Fraction of rows that are foreground points or centroids of blocks
    /// holding at least one foreground point.
    pub foreground_recall: f64,
    /// Fraction of boxes containing at least one sampled position.
    pub instance_coverage: f64,
    pub rows: usize,
    pub foreground_rows: usize,
    pub covered_boxes: usize,
    pub boxes: usize,
}

/// Per block: does it hold at least one labeled foreground point?
pub fn block_foreground<T: Real>(grid: &BlockGrid<T>, labels: &LabelSet) -> Vec<bool> {
    (0..grid.len())
        .map(|b| grid.points_of(b).iter().any(|&i| labels.is_foreground(i as usize)))
        .collect()
}

pub fn evaluate<T: Real, S: AsSampledRows + ?Sized>(
    samples: &S,
    cloud: &PointCloud<T>,
    labels: &LabelSet,
    grid: Option<&BlockGrid<T>>,
) -> Result<SampleMetrics> {
    labels.validate(Some(cloud.len()))?;
    let rows = samples.sampled_rows();
    let fg_blocks = grid.map(|g| block_foreground(g, labels));
    let mut foreground_rows = 0;
    for row in &rows {
        let fg = match row.source {
            RowSource::Point(i) => {
                if i >= cloud.len() {
                    return Err(Error::arg("samples", format!("point index {i} out of range")));
                }
                labels.is_foreground(i)
            }
            RowSource::Block(key) => {
                let (g, fg) = grid
                    .zip(fg_blocks.as_ref())
                    .ok_or_else(|| Error::arg("grid", "centroid rows need the block grid"))?;
                let b = g
                    .find(&key)
                    .ok_or_else(|| Error::arg("samples", format!("unknown block {key:?}")))?;
                fg[b]
            }
        };
        foreground_rows += fg as usize;
    }
    let covered_boxes = labels
        .boxes
        .iter()
        .filter(|b| rows.iter().any(|r| b.contains(r.position)))
        .count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(SampleMetrics {
        foreground_recall: ratio(foreground_rows, rows.len()),
        instance_coverage: ratio(covered_boxes, labels.boxes.len()),
        rows: rows.len(),
        foreground_rows,
        covered_boxes,
        boxes: labels.boxes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::random_sample;

    fn one_box_spec(points: usize) -> SceneSpec {
        SceneSpec {
            instances: vec![InstanceGroup { class: ObjectClass::Car, count: 1 }],
            instance_points: points,
            ground_points: 500,
            ..SceneSpec::preset(ScenePreset::Small, 3)
        }
    }

    #[test]
    fn no_instances_all_background() {
        let spec = SceneSpec {
            instances: vec![],
            ground_points: 1000,
            ..SceneSpec::preset(ScenePreset::Small, 1)
        };
        let (cloud, labels) = synth(&spec).unwrap();
        assert_eq!(cloud.len(), 1000);
        assert!(labels.point_box_id.iter().all(|&id| id == -1));
    }

    #[test]
    fn single_box_gets_exact_budget_inside() {
        let (cloud, labels) = synth(&one_box_spec(100)).unwrap();
        assert_eq!(labels.point_box_id.iter().filter(|&&id| id == 0).count(), 100);
        labels.validate_containment(&cloud).unwrap();
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec::preset(ScenePreset::Small, 77);
        let a = synth(&spec).unwrap();
        let b = synth(&spec).unwrap();
        assert_eq!(crate::cloud::encode_pcf1(&a.0), crate::cloud::encode_pcf1(&b.0));
        assert_eq!(a.1, b.1);
        let c = synth(&SceneSpec::preset(ScenePreset::Small, 78)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn presets_have_expected_sizes() {
        let (cloud, labels) = synth(&SceneSpec::preset(ScenePreset::Small, 5)).unwrap();
        assert_eq!(cloud.len(), 20_000);
        assert_eq!(labels.boxes.len(), 8);
        let frac = labels.foreground_count() as f64 / cloud.len() as f64;
        assert!(frac <= 0.15);
        labels.validate_containment(&cloud).unwrap();
        let spec = SceneSpec::preset(ScenePreset::Large, 5);
        assert_eq!(spec.ground_points + spec.instance_points, 100_000);
        assert_eq!(spec.instance_count(), 40);
    }

    #[test]
    fn crowded_placement_fails_with_name() {
        let spec = SceneSpec {
            instances: vec![InstanceGroup { class: ObjectClass::Car, count: 50 }],
            distance_range: [5.0, 6.0],
            ..SceneSpec::preset(ScenePreset::Small, 1)
        };
        match synth(&spec) {
            Err(Error::Placement(what)) => assert!(what.starts_with("car")),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn allocation_is_exact() {
        assert_eq!(allocate(100, &[1.0]), vec![100]);
        let a = allocate(97, &[1.0, 0.25, 0.01]);
        assert_eq!(a.iter().sum::<usize>(), 97);
        assert!(a[2] >= 1);
    }

    #[test]
    fn metrics_basic_cases() {
        let (cloud, labels) = synth(&one_box_spec(50)).unwrap();
        let fg: Vec<SampledRow> = (0..cloud.len())
            .filter(|&i| labels.is_foreground(i))
            .take(5)
            .map(|i| SampledRow {
                position: cloud.xyz(i).map(|v| v as f64),
                source: RowSource::Point(i),
            })
            .collect();
        let m = evaluate(fg.as_slice(), &cloud, &labels, None).unwrap();
        assert_eq!(m.foreground_recall, 1.0);
        assert_eq!(m.instance_coverage, 1.0);

        let far = [SampledRow {
            position: [1e3, 1e3, 0.0],
            source: RowSource::Point(0),
        }];
        let m = evaluate(far.as_slice(), &cloud, &labels, None).unwrap();
        assert_eq!(m.instance_coverage, 0.0);
    }

    #[test]
    fn centroid_rows_need_grid() {
        let (cloud, labels) = synth(&one_box_spec(50)).unwrap();
        let rows = [SampledRow {
            position: [0.0; 3],
            source: RowSource::Block([0, 0, 0]),
        }];
        assert!(evaluate(rows.as_slice(), &cloud, &labels, None).is_err());
    }

    #[test]
    fn random_sampling_recall_tracks_foreground_share() {
        // Scene with ~10% foreground: uniform sampling recovers that share.
        let spec = SceneSpec::preset(ScenePreset::Small, 21);
        let (cloud, labels) = synth(&spec).unwrap();
        let share = labels.foreground_count() as f64 / cloud.len() as f64;
        assert!((share - 0.10).abs() < 1e-9);
        let mut total = 0.0;
        for seed in 0..20 {
            let s = random_sample(&cloud, 1000, &mut Rng::new(seed)).unwrap();
            total += evaluate(&s, &cloud, &labels, None).unwrap().foreground_recall;
        }
        let mean = total / 20.0;
        assert!((mean - 0.10).abs() <= 0.03, "{mean}");
    }

    proptest::proptest! {
        #[test]
        fn label_soundness(seed in 0u64..40) {
            let spec = SceneSpec { ground_points: 2000, instance_points: 400, ..SceneSpec::preset(ScenePreset::Small, seed) };
            let (cloud, labels) = synth(&spec).unwrap();
            proptest::prop_assert!(labels.validate_containment(&cloud).is_ok());
        }

        #[test]
        fn adding_foreground_row_never_lowers_recall(seed in 0u64..40, take in 1usize..50) {
            let spec = SceneSpec { ground_points: 2000, instance_points: 400, ..SceneSpec::preset(ScenePreset::Small, seed) };
            let (cloud, labels) = synth(&spec).unwrap();
            let mut rows: Vec<SampledRow> = (0..take).map(|i| SampledRow { position: cloud.xyz(i).map(|v| v as f64), source: RowSource::Point(i) }).collect();
            let before = evaluate(rows.as_slice(), &cloud, &labels, None).unwrap();
            let fg = (0..cloud.len()).find(|&i| labels.is_foreground(i)).unwrap();
            rows.push(SampledRow { position: cloud.xyz(fg).map(|v| v as f64), source: RowSource::Point(fg) });
            let after = evaluate(rows.as_slice(), &cloud, &labels, None).unwrap();
            proptest::prop_assert!(after.foreground_recall >= before.foreground_recall);
            proptest::prop_assert!(after.instance_coverage >= before.instance_coverage);
        }
    }
}
