//! Command-line front end: scene synthesis, partitioning, sampling,
//! training, the full sampler, evaluation and benchmarks.
//!
//! Exit codes: 0 on success, 1 on usage errors (with help), 2 on data or
//! validation errors (with the failing path and reason).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use icfps::bench::{run_bench, BenchConfig};
use icfps::lfdbf::{train_lfdbf, TrainConfig};
use icfps::pipeline::{centers_cloud, centers_meta};
use icfps::samplers::{f_fps, fps, grid_centroid_sample, random_sample};
use icfps::scene::{evaluate, synth, AsSampledRows, SampledRow, ScenePreset, SceneSpec};
use icfps::{
    icfps as run_icfps, load_cloud, load_labels, partition, save_cloud, save_labels, CloudFormat, Error, GridConfig,
    IcfpsConfig, Preset, Rng, WeightsBundle,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "icfps", version, about = "Instance-centroid point sampling for LiDAR point clouds")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Pcf1,
    KittiBin,
    XyzAscii,
}

impl From<FormatArg> for CloudFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Pcf1 => CloudFormat::Pcf1,
            FormatArg::KittiBin => CloudFormat::KittiBin,
            FormatArg::XyzAscii => CloudFormat::XyzAscii,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenePresetArg {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    S,
    M,
    L,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::S => Preset::S,
            PresetArg::M => Preset::M,
            PresetArg::L => Preset::L,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Fps,
    Ffps,
    Random,
    GridCentroid,
}

#[derive(Debug, clap::Args)]
struct CloudArgs {
    /// Input cloud (pcf1, KITTI .bin or ASCII xyz).
    #[arg(long)]
    cloud: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

impl CloudArgs {
    fn load(&self) -> icfps::Result<icfps::PointCloud> {
        let format = self
            .format
            .map(CloudFormat::from)
            .unwrap_or_else(|| CloudFormat::from_path(&self.cloud));
        load_cloud(&self.cloud, format)
    }
}

#[derive(Debug, clap::Args)]
struct GridArgs {
    /// Block edge lengths as x,y,z meters.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    block_size: Option<Vec<f64>>,
    /// Points kept per block.
    #[arg(long)]
    s_max: Option<usize>,
}

impl GridArgs {
    fn config(&self) -> GridConfig {
        let mut cfg = GridConfig::default();
        if let Some(b) = &self.block_size {
            cfg.block_size = [b[0], b[1], b[2]];
        }
        if let Some(s) = self.s_max {
            cfg.s_max = s;
        }
        cfg
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic scene.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "small")]
        preset: ScenePresetArg,
        #[arg(long)]
        out_cloud: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
    /// Partition a cloud into blocks and write the grid as JSON.
    Partition {
        #[command(flatten)]
        cloud: CloudArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a baseline sampler and write the sampled rows as JSON.
    Sample {
        #[command(flatten)]
        cloud: CloudArgs,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        m: usize,
        /// First pick for fps / ffps.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Position weight of the ffps metric.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the sampled positions as pcf1.
        #[arg(long)]
        out_cloud: Option<PathBuf>,
    },
    /// Train the block filter and offset head on a directory of labeled scenes.
    Train {
        /// Directory of `<name>.pcf1` clouds with `<name>.json` labels.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps_per_epoch: Option<usize>,
        /// Train with the plain focal loss instead of the density-distance weighted one.
        #[arg(long)]
        unweighted: bool,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the full sampler.
    Icfps {
        #[command(flatten)]
        cloud: CloudArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "s")]
        preset: PresetArg,
        /// Center positions as pcf1.
        #[arg(long)]
        out: PathBuf,
        /// Tags, sources, effective counts and sampled rows as JSON.
        #[arg(long)]
        out_meta: Option<PathBuf>,
    },
    /// Score sampled rows against labels.
    Eval {
        #[command(flatten)]
        cloud: CloudArgs,
        #[arg(long)]
        labels: PathBuf,
        /// JSON written by `sample` or `icfps --out-meta`.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time samplers as described by a benchmark config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        warmups: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn write_json(path: &Path, v: &Value) -> icfps::Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> icfps::Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn rows_json<S: AsSampledRows + ?Sized>(s: &S) -> Value {
    serde_json::to_value(s.sampled_rows()).expect("rows serialize")
}

/// `<stem>.pcf1` files with a `<stem>.json` label file, sorted by name.
fn load_scene_dir(dir: &Path) -> icfps::Result<Vec<(icfps::PointCloud, icfps::LabelSet)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut clouds: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pcf1"))
        .collect();
    clouds.sort();
    if clouds.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: "no .pcf1 scenes found".into(),
        });
    }
    clouds
        .iter()
        .map(|c| {
            let cloud = load_cloud(c, CloudFormat::Pcf1)?;
            let labels = load_labels(c.with_extension("json"), Some(cloud.len()))?;
            Ok((cloud, labels))
        })
        .collect()
}

fn run(cli: Cli) -> icfps::Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            preset,
            out_cloud,
            out_labels,
        } => {
            let preset = match preset {
                ScenePresetArg::Small => ScenePreset::Small,
                ScenePresetArg::Large => ScenePreset::Large,
            };
            let (cloud, labels) = synth(&SceneSpec::preset(preset, seed))?;
            save_cloud(&cloud, &out_cloud)?;
            save_labels(&labels, &out_labels)
        }
        Command::Partition { cloud, grid, out } => {
            let c = cloud.load()?;
            let g = partition(&c, &grid.config())?;
            write_json(&out, &g.to_json())
        }
        Command::Sample {
            cloud,
            method,
            m,
            start,
            seed,
            lambda,
            grid,
            out,
            out_cloud,
        } => {
            let c = cloud.load()?;
            let (doc, positions): (Value, Vec<[f32; 3]>) = match method {
                MethodArg::Fps | MethodArg::Ffps | MethodArg::Random => {
                    let r = match method {
                        MethodArg::Fps => fps(&c, m, start)?,
                        MethodArg::Ffps => f_fps(&c.positions(), c.attributes(), m, lambda, start)?,
                        _ => random_sample(&c, m, &mut Rng::new(seed))?,
                    };
                    (json!({ "indices": r.indices, "rows": rows_json(&r) }), r.positions)
                }
                MethodArg::GridCentroid => {
                    let cfg = grid.config();
                    let g = partition(&c, &cfg)?;
                    let r = grid_centroid_sample(&g, m)?;
                    (
                        json!({ "blocks": r.keys, "short": r.short, "grid": cfg, "rows": rows_json(&r) }),
                        r.positions,
                    )
                }
            };
            let mut doc = doc;
            doc["method"] = json!(format!("{method:?}").to_lowercase());
            doc["m"] = json!(m);
            write_json(&out, &doc)?;
            if let Some(p) = out_cloud {
                save_cloud(&icfps::PointCloud::from_xyz(&positions)?, p)?;
            }
            Ok(())
        }
        Command::Train {
            scenes,
            epochs,
            lr,
            seed,
            steps_per_epoch,
            unweighted,
            out,
            report,
        } => {
            let data = load_scene_dir(&scenes)?;
            let cfg = TrainConfig {
                epochs,
                lr,
                steps_per_epoch,
                density_distance: !unweighted,
                ..TrainConfig::default()
            };
            let (bundle, rep) = train_lfdbf(&data, &cfg, &mut Rng::new(seed))?;
            bundle.save(&out)?;
            if let Some(p) = report {
                write_json(&p, &serde_json::to_value(&rep).expect("report serializes"))?;
            }
            Ok(())
        }
        Command::Icfps {
            cloud,
            weights,
            preset,
            out,
            out_meta,
        } => {
            let c = cloud.load()?;
            let w = WeightsBundle::load(&weights)?;
            let result = run_icfps(&c, &w, &IcfpsConfig::from(Preset::from(preset)))?;
            if result.centers.no_foreground {
                eprintln!("warning: {}: no block passed the foreground threshold", cloud.cloud.display());
            }
            save_cloud(&centers_cloud(&result.centers)?, &out)?;
            if let Some(p) = out_meta {
                write_json(&p, &centers_meta(&result))?;
            }
            Ok(())
        }
        Command::Eval {
            cloud,
            labels,
            samples,
            out,
        } => {
            let c = cloud.load()?;
            let l = load_labels(&labels, Some(c.len()))?;
            let doc = read_json(&samples)?;
            let rows_value = doc.get("rows").ok_or_else(|| Error::Format {
                    path: samples.clone(),
                    reason: "no sampled rows".into(),
                })?;
            let rows: Vec<SampledRow> = serde_json::from_value(rows_value.clone()).map_err(|e| Error::json(&samples, e))?;
            let grid = match doc.get("grid") {
                Some(g) => {
                    let cfg: GridConfig = serde_json::from_value(g.clone()).map_err(|e| Error::json(&samples, e))?;
                    Some(partition(&c, &cfg)?)
                }
                None => None,
            };
            let metrics = evaluate(rows.as_slice(), &c, &l, grid.as_ref())?;
            let v = serde_json::to_value(metrics).expect("metrics serialize");
            match out {
                Some(p) => write_json(&p, &v),
                None => {
                    println!("{}", serde_json::to_string_pretty(&v).expect("metrics serialize"));
                    Ok(())
                }
            }
        }
        Command::Bench {
            config,
            out_json,
            out_csv,
            repeats,
            warmups,
            seed,
        } => {
            let mut cfg = BenchConfig::load(&config)?;
            if cli.threads > 0 {
                cfg.threads = cli.threads;
            }
            cfg.repeats = repeats.unwrap_or(cfg.repeats);
            cfg.warmups = warmups.unwrap_or(cfg.warmups);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let base = config.parent().unwrap_or(Path::new("."));
            let report = run_bench(&cfg, base)?;
            report.write(&out_json, &out_csv)
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        // Ignored if a pool already exists in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}
