//! The full sampler: block filter, centroid-instance selection, centroid
//! offsets and a second diffusion stage over the selected centers.

use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::ciss::{apply_offsets, ciss_select, offset_head, CenterSet};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::grid::{augment, partition, BlockGrid, GridConfig};
use crate::lfdbf::nfdm::nfdm;
use crate::lfdbf::{classify, encode_blocks, BlockFeatures, LfdbfNets, NfdmConfig, DEFAULT_ALPHA, FIRST_NFDM_RADII, NFDM_MAX_K};
use crate::nn::Mlp;
use crate::real::Real;
use crate::rng::Rng;
use crate::scene::AsSampledRows;

pub const SECOND_NFDM_RADII: [f64; 2] = [0.2, 0.8];
pub const SECOND_NFDM_SCALE_WIDTH: usize = 32;
pub const SECOND_NFDM_WIDTH: usize = 64;

/// Center budgets `(m1, m2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    S,
    M,
    L,
}

impl Preset {
    pub fn budgets(self) -> (usize, usize) {
        match self {
            Preset::S => (16384, 2048),
            Preset::M => (26000, 4096),
            Preset::L => (30720, 8197),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Preset::S),
            "m" => Ok(Preset::M),
            "l" => Ok(Preset::L),
            _ => Err(Error::arg("preset", format!("unknown preset {s:?}, expected s, m or l"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcfpsConfig {
    pub m1: usize,
    pub m2: usize,
}

impl From<Preset> for IcfpsConfig {
    fn from(p: Preset) -> Self {
        let (m1, m2) = p.budgets();
        Self { m1, m2 }
    }
}

/// Every trained or initialized network the sampler needs.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsBundle {
    pub channels: usize,
    pub grid: GridConfig,
    pub alpha: f64,
    pub filter: LfdbfNets<f64>,
    pub offset: Mlp<f64>,
    pub nfdm2: NfdmConfig<f64>,
}

impl WeightsBundle {
    /// Default architecture with a 4 m first diffusion radius.
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_filter_radii(channels, &FIRST_NFDM_RADII, rng)
    }

    pub fn with_filter_radii(channels: usize, radii: &[f64], rng: &mut Rng) -> Result<Self> {
        if channels < 3 {
            return Err(Error::arg("channels", format!("{channels} < 3")));
        }
        let filter = LfdbfNets::with_radii(channels, radii, NFDM_MAX_K, rng)?;
        let c1 = filter.feature_width();
        let offset = offset_head(c1, rng);
        let nfdm2 = NfdmConfig::new(
            &SECOND_NFDM_RADII,
            NFDM_MAX_K,
            3 + c1,
            SECOND_NFDM_SCALE_WIDTH,
            SECOND_NFDM_WIDTH,
            rng,
        )?;
        Ok(Self {
            channels,
            grid: GridConfig::default(),
            alpha: DEFAULT_ALPHA,
            filter,
            offset,
            nfdm2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.filter;
        if f.encoder.input_width() != self.channels + 6 {
            return Err(Error::Validation(format!(
                "encoder input width {} does not match {} channels",
                f.encoder.input_width(),
                self.channels
            )));
        }
        f.nfdm.validate(f.encoder.output_width())?;
        let c1 = f.feature_width();
        if f.head.input_width() != c1 || f.head.output_width() != 1 {
            return Err(Error::Validation(format!("classifier head must map {c1} -> 1")));
        }
        if self.offset.input_width() != 3 + c1 || self.offset.output_width() != 3 {
            return Err(Error::Validation(format!("offset head must map {} -> 3", 3 + c1)));
        }
        self.nfdm2.validate(3 + c1)?;
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "channels": self.channels,
            "grid": self.grid,
            "alpha": self.alpha,
            "encoder": self.filter.encoder.to_json(),
            "nfdm1": self.filter.nfdm.to_json(),
            "head": self.filter.head.to_json(),
            "offset": self.offset.to_json(),
            "nfdm2": self.nfdm2.to_json(),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let field = |k: &str| {
            v.get(k)
                .ok_or_else(|| Error::Validation(format!("weights: missing key {k:?}")))
        };
        let channels = field("channels")?
            .as_u64()
            .ok_or_else(|| Error::Validation("weights.channels: expected an integer".into()))? as usize;
        let grid: GridConfig = serde_json::from_value(field("grid")?.clone())
            .map_err(|e| Error::Validation(format!("weights.grid: {e}")))?;
        let alpha = field("alpha")?
            .as_f64()
            .ok_or_else(|| Error::Validation("weights.alpha: expected a number".into()))?;
        let bundle = Self {
            channels,
            grid,
            alpha,
            filter: LfdbfNets {
                encoder: Mlp::from_json(field("encoder")?)?,
                nfdm: NfdmConfig::from_json(field("nfdm1")?)?,
                head: Mlp::from_json(field("head")?)?,
            },
            offset: Mlp::from_json(field("offset")?)?,
            nfdm2: NfdmConfig::from_json(field("nfdm2")?)?,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_json()).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_json(&v).map_err(|e| match e {
            Error::Validation(reason) => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

/// Block features after the first diffusion stage, with classifier output.
pub fn filter_blocks<C: Real>(
    grid: &BlockGrid<C>,
    cloud: &PointCloud<C>,
    nets: &LfdbfNets<f64>,
    alpha: f64,
) -> Result<BlockFeatures<f64>> {
    let aug = augment(grid, cloud)?;
    let encoded = encode_blocks(&aug, &nets.encoder)?;
    let diffused = nfdm(&grid.centroids, encoded.view(), &nets.nfdm)?;
    classify(diffused.view(), &nets.head, alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcfpsOutput {
    /// Features are `[position ; second-stage feature]`.
    pub centers: CenterSet<f64>,
    pub grid: BlockGrid<f32>,
    pub foreground_blocks: usize,
}

pub fn icfps(cloud: &PointCloud<f32>, weights: &WeightsBundle, cfg: &IcfpsConfig) -> Result<IcfpsOutput> {
    weights.validate()?;
    if cloud.channels() != weights.channels {
        return Err(Error::arg(
            "cloud",
            format!("{} channels but weights expect {}", cloud.channels(), weights.channels),
        ));
    }
    let grid = partition(cloud, &weights.grid)?;
    let bf = filter_blocks(&grid, cloud, &weights.filter, weights.alpha)?;
    let selected = ciss_select(&grid, &bf, cloud, cfg.m1, cfg.m2)?;
    let mut centers = apply_offsets(&selected, &weights.offset)?;
    let width = 3 + weights.nfdm2.output_width();
    centers.features = if centers.is_empty() {
        Array2::zeros((0, width))
    } else {
        let diffused = nfdm(&centers.positions, centers.features.view(), &weights.nfdm2)?;
        let mut out = Array2::zeros((centers.len(), width));
        out.slice_mut(s![.., ..3])
            .assign(&centers.features.slice(s![.., ..3]));
        out.slice_mut(s![.., 3..]).assign(&diffused);
        out
    };
    Ok(IcfpsOutput {
        foreground_blocks: bf.foreground_count(),
        centers,
        grid,
    })
}

/// Centers as a `rows x 3` point cloud.
pub fn centers_cloud(centers: &CenterSet<f64>) -> Result<PointCloud<f32>> {
    let pts: Vec<[f32; 3]> = centers.positions.iter().map(|p| p.map(|v| v as f32)).collect();
    PointCloud::from_xyz(&pts)
}

/// Per-row tags and sources, effective counts, the grid used, and the rows
/// in the form read by evaluation.
pub fn centers_meta(out: &IcfpsOutput) -> serde_json::Value {
    let c = &out.centers;
    let grid = GridConfig {
        block_size: out.grid.block_size,
        s_max: out.grid.s_max,
        origin: Some(out.grid.origin),
    };
    serde_json::json!({
        "count": c.len(),
        "m1_eff": c.m1_eff,
        "m2_eff": c.m2_eff,
        "no_foreground": c.no_foreground,
        "foreground_blocks": out.foreground_blocks,
        "feature_width": c.features.ncols(),
        "tags": c.tags,
        "sources": c.sources,
        "grid": grid,
        "rows": c.sampled_rows(),
    })
}
