//! Timing harness comparing samplers on stored or synthesized scenes.
//!
//! Every artifact is loaded and every method validated before the first
//! timed run. Each (scene, method) pair gets `warmups` discarded runs and
//! `repeats` timed runs; quality metrics come from the last run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloud::{load_cloud, CloudFormat, PointCloud};
use crate::error::{Error, Result};
use crate::grid::{partition, GridConfig};
use crate::labels::{load_labels, LabelSet};
use crate::pipeline::{icfps, IcfpsConfig, Preset, WeightsBundle};
use crate::rng::Rng;
use crate::samplers::{f_fps, fps, grid_centroid_sample, random_sample};
use crate::scene::{evaluate, synth, SampleMetrics, ScenePreset, SceneSpec};

pub const MIN_REPEATS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SynthSource {
    Preset { preset: ScenePreset, seed: u64 },
    Spec(SceneSpec),
}

impl SynthSource {
    pub fn spec(&self) -> SceneSpec {
        match self {
            SynthSource::Preset { preset, seed } => SceneSpec::preset(*preset, *seed),
            SynthSource::Spec(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneSource {
    Path(PathBuf),
    Files {
        cloud: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    Synth { synth: SynthSource },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum MethodSpec {
    Fps {
        m: usize,
    },
    Ffps {
        m: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Random {
        m: usize,
    },
    GridCentroid {
        m: usize,
        #[serde(default)]
        grid: Option<GridConfig>,
    },
    Ciss {
        preset: Preset,
        weights: PathBuf,
    },
}

fn default_lambda() -> f64 {
    1.0
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Fps { .. } => "fps",
            MethodSpec::Ffps { .. } => "ffps",
            MethodSpec::Random { .. } => "random",
            MethodSpec::GridCentroid { .. } => "grid-centroid",
            MethodSpec::Ciss { .. } => "ciss",
        }
    }
}

fn default_repeats() -> usize {
    5
}

fn default_warmups() -> usize {
    2
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scenes: Vec<SceneSource>,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_warmups")]
    pub warmups: usize,
    /// Worker count; 0 uses every available core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl BenchConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats < MIN_REPEATS {
            return Err(Error::arg("repeats", format!("{} < {MIN_REPEATS}", self.repeats)));
        }
        if self.scenes.is_empty() || self.methods.is_empty() {
            return Err(Error::arg("scenes", "need at least one scene and one method"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: String,
    pub scene: String,
    pub n: usize,
    pub m: Option<usize>,
    pub m1: Option<usize>,
    pub m2: Option<usize>,
    pub rows: usize,
    pub timings_ms: Vec<f64>,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub foreground_recall: Option<f64>,
    pub instance_coverage: Option<f64>,
    pub threads: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cpu: String,
    pub logical_cores: usize,
    pub build: String,
}

impl Environment {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        let profile = if cfg!(debug_assertions) { "debug-assertions" } else { "release" };
        Self {
            cpu,
            logical_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            build: format!("{profile} {}-{}", std::env::consts::ARCH, std::env::consts::OS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub records: Vec<BenchRecord>,
}

struct Scene {
    name: String,
    descriptor: serde_json::Value,
    cloud: PointCloud<f32>,
    labels: Option<LabelSet>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_scene(source: &SceneSource, base: &Path) -> Result<Scene> {
    let descriptor = serde_json::to_value(source).expect("scene sources serialize");
    match source {
        SceneSource::Path(p) => {
            let path = resolve(base, p);
            Ok(Scene {
                name: p.display().to_string(),
                descriptor,
                cloud: load_cloud(&path, CloudFormat::from_path(&path))?,
                labels: None,
            })
        }
        SceneSource::Files { cloud, labels } => {
            let path = resolve(base, cloud);
            let c = load_cloud(&path, CloudFormat::from_path(&path))?;
            let l = labels
                .as_ref()
                .map(|l| load_labels(resolve(base, l), Some(c.len())))
                .transpose()?;
            Ok(Scene {
                name: cloud.display().to_string(),
                descriptor,
                cloud: c,
                labels: l,
            })
        }
        SceneSource::Synth { synth: s } => {
            let spec = s.spec();
            let (cloud, labels) = synth(&spec)?;
            Ok(Scene {
                name: format!("synth-{}", spec.seed),
                descriptor,
                cloud,
                labels: Some(labels),
            })
        }
    }
}

fn config_hash(scene: &serde_json::Value, method: &MethodSpec, cfg: &BenchConfig) -> String {
    let canonical = serde_json::json!({
        "scene": scene,
        "method": method,
        "repeats": cfg.repeats,
        "warmups": cfg.warmups,
        "threads": cfg.threads,
        "seed": cfg.seed,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

fn check_count(m: usize, scene: &Scene) -> Result<()> {
    if m == 0 || m > scene.cloud.len() {
        return Err(Error::arg(
            "m",
            format!("{m} not in 1..={} for scene {}", scene.cloud.len(), scene.name),
        ));
    }
    Ok(())
}

/// One run of a method; returns sample count and metrics when labels exist.
fn run_once(
    method: &MethodSpec,
    scene: &Scene,
    weights: Option<&WeightsBundle>,
    seed: u64,
) -> Result<(usize, Option<SampleMetrics>)> {
    let cloud = &scene.cloud;
    let metrics = |r: Result<SampleMetrics>| r.map(Some);
    match method {
        MethodSpec::Fps { m } => {
            let r = fps(cloud, *m, 0)?;
            let q = scene.labels.as_ref().map(|l| evaluate(&r, cloud, l, None));
            Ok((r.len(), q.map(metrics).transpose()?.flatten()))
        }
        MethodSpec::Ffps { m, lambda } => {
            let r = f_fps(&cloud.positions(), cloud.attributes(), *m, *lambda, 0)?;
            let q = scene.labels.as_ref().map(|l| evaluate(&r, cloud, l, None));
            Ok((r.len(), q.map(metrics).transpose()?.flatten()))
        }
        MethodSpec::Random { m } => {
            let r = random_sample(cloud, *m, &mut Rng::new(seed))?;
            let q = scene.labels.as_ref().map(|l| evaluate(&r, cloud, l, None));
            Ok((r.len(), q.map(metrics).transpose()?.flatten()))
        }
        MethodSpec::GridCentroid { m, grid } => {
            let g = partition(cloud, &grid.unwrap_or_default())?;
            let r = grid_centroid_sample(&g, *m)?;
            let q = scene.labels.as_ref().map(|l| evaluate(&r, cloud, l, Some(&g)));
            Ok((r.keys.len(), q.map(metrics).transpose()?.flatten()))
        }
        MethodSpec::Ciss { preset, .. } => {
            let w = weights.expect("weights loaded for ciss methods");
            let out = icfps(cloud, w, &IcfpsConfig::from(*preset))?;
            let q = scene
                .labels
                .as_ref()
                .map(|l| evaluate(&out.centers, cloud, l, Some(&out.grid)));
            Ok((out.centers.len(), q.map(metrics).transpose()?.flatten()))
        }
    }
}

fn summarize(timings: &[f64]) -> (f64, f64, f64) {
    let mut sorted = timings.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (median, sorted[0], sorted[n - 1])
}

/// Runs every (scene, method) pair; `base` resolves relative paths.
pub fn run_bench(cfg: &BenchConfig, base: &Path) -> Result<BenchReport> {
    cfg.validate()?;
    let scenes = cfg
        .scenes
        .iter()
        .map(|s| load_scene(s, base))
        .collect::<Result<Vec<_>>>()?;
    let weights = cfg
        .methods
        .iter()
        .map(|m| match m {
            MethodSpec::Ciss { weights, .. } => WeightsBundle::load(resolve(base, weights)).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    for scene in &scenes {
        for (method, w) in cfg.methods.iter().zip(&weights) {
            match method {
                MethodSpec::Fps { m } | MethodSpec::Ffps { m, .. } | MethodSpec::Random { m } => check_count(*m, scene)?,
                MethodSpec::GridCentroid { m, .. } => {
                    if *m == 0 {
                        return Err(Error::arg("m", "must be at least 1"));
                    }
                }
                MethodSpec::Ciss { .. } => {
                    let w = w.as_ref().expect("loaded above");
                    if w.channels != scene.cloud.channels() {
                        return Err(Error::arg(
                            "weights",
                            format!("expect {} channels, scene {} has {}", w.channels, scene.name, scene.cloud.channels()),
                        ));
                    }
                }
            }
        }
    }

    let mut builder = rayon::ThreadPoolBuilder::new();
    if cfg.threads > 0 {
        builder = builder.num_threads(cfg.threads);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::arg("threads", e.to_string()))?;
    let threads = pool.current_num_threads();

    let mut records = Vec::new();
    for scene in &scenes {
        for (method, w) in cfg.methods.iter().zip(&weights) {
            let (rows, metrics, timings) = pool.install(|| -> Result<_> {
                for _ in 0..cfg.warmups {
                    run_once(method, scene, w.as_ref(), cfg.seed)?;
                }
                let mut timings = Vec::with_capacity(cfg.repeats);
                let mut last = (0, None);
                for _ in 0..cfg.repeats {
                    let t = Instant::now();
                    last = run_once(method, scene, w.as_ref(), cfg.seed)?;
                    timings.push(t.elapsed().as_secs_f64() * 1e3);
                }
                Ok((last.0, last.1, timings))
            })?;
            let (median_ms, min_ms, max_ms) = summarize(&timings);
            let (m, m1, m2) = match method {
                MethodSpec::Fps { m }
                | MethodSpec::Ffps { m, .. }
                | MethodSpec::Random { m }
                | MethodSpec::GridCentroid { m, .. } => (Some(*m), None, None),
                MethodSpec::Ciss { preset, .. } => {
                    let (a, b) = preset.budgets();
                    (None, Some(a), Some(b))
                }
            };
            records.push(BenchRecord {
                method: method.name().to_string(),
                scene: scene.name.clone(),
                n: scene.cloud.len(),
                m,
                m1,
                m2,
                rows,
                timings_ms: timings,
                median_ms,
                min_ms,
                max_ms,
                foreground_recall: metrics.map(|q| q.foreground_recall),
                instance_coverage: metrics.map(|q| q.instance_coverage),
                threads,
                seed: cfg.seed,
                config_hash: config_hash(&scene.descriptor, method, cfg),
            });
        }
    }
    Ok(BenchReport {
        environment: Environment::detect(),
        records,
    })
}

const CSV_HEADER: [&str; 16] = [
    "method",
    "scene",
    "n",
    "m",
    "m1",
    "m2",
    "rows",
    "median_ms",
    "min_ms",
    "max_ms",
    "foreground_recall",
    "instance_coverage",
    "threads",
    "seed",
    "config_hash",
    "timings_ms",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl BenchReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.method.clone(),
                r.scene.clone(),
                r.n.to_string(),
                opt(r.m),
                opt(r.m1),
                opt(r.m2),
                r.rows.to_string(),
                r.median_ms.to_string(),
                r.min_ms.to_string(),
                r.max_ms.to_string(),
                opt(r.foreground_recall),
                opt(r.instance_coverage),
                r.threads.to_string(),
                r.seed.to_string(),
                r.config_hash.clone(),
                r.timings_ms.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";"),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses records back from [`Self::to_csv`] output.
    pub fn records_from_csv(text: &str) -> Result<Vec<BenchRecord>> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let bad = |what: &str| Error::Validation(format!("csv: bad {what}"));
        let mut out = Vec::new();
        for row in rd.records() {
            let row = row.map_err(|e| Error::Validation(format!("csv: {e}")))?;
            let f = |i: usize| row.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64> { f(i).parse().map_err(|_| bad(CSV_HEADER[i])) };
            let int = |i: usize| -> Result<usize> { f(i).parse().map_err(|_| bad(CSV_HEADER[i])) };
            let opt_int = |i: usize| -> Result<Option<usize>> {
                if f(i).is_empty() { Ok(None) } else { int(i).map(Some) }
            };
            let opt_num = |i: usize| -> Result<Option<f64>> {
                if f(i).is_empty() { Ok(None) } else { num(i).map(Some) }
            };
            out.push(BenchRecord {
                method: f(0).to_string(),
                scene: f(1).to_string(),
                n: int(2)?,
                m: opt_int(3)?,
                m1: opt_int(4)?,
                m2: opt_int(5)?,
                rows: int(6)?,
                median_ms: num(7)?,
                min_ms: num(8)?,
                max_ms: num(9)?,
                foreground_recall: opt_num(10)?,
                instance_coverage: opt_num(11)?,
                threads: int(12)?,
                seed: f(13).parse().map_err(|_| bad("seed"))?,
                config_hash: f(14).to_string(),
                timings_ms: f(15)
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| bad("timings_ms")))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(out)
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let (jp, cp) = (json_path.as_ref(), csv_path.as_ref());
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(jp, e))?;
        std::fs::write(jp, text).map_err(|e| Error::io(jp, e))?;
        std::fs::write(cp, self.to_csv()?).map_err(|e| Error::io(cp, e))
    }
}
