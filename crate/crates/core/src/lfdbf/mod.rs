//! Background block filter: block encoder, neighborhood feature diffusion,
//! confidence classification and the density-distance focal loss.

pub mod loss;
pub mod nfdm;
pub mod train;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::AugmentedBlockMatrix;
use crate::nn::{segment_maxpool, Activation, Mlp};
use crate::real::Real;
use crate::rng::Rng;

pub use loss::{ddfl, m_den, m_dis, total_loss, DdflParams};
pub use nfdm::{nfdm, NfdmConfig};
pub use train::{train_lfdbf, TrainConfig, TrainReport};

pub const ENCODER_WIDTHS: [usize; 3] = [16, 16, 32];
pub const FIRST_NFDM_RADII: [f64; 1] = [4.0];
pub const NFDM_MAX_K: usize = 16;
pub const DEFAULT_ALPHA: f64 = 0.45;

/// Block features with their classifier confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFeatures<T: Real> {
    /// m x c1
    pub features: Array2<T>,
    pub confidences: Vec<T>,
    pub foreground_mask: Vec<bool>,
    pub alpha: f64,
}

impl<T: Real> BlockFeatures<T> {
    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground_mask.iter().filter(|&&f| f).count()
    }
}

/// Point-wise encoder followed by a per-block max pool.
pub fn encode_blocks<C: Real, T: Real>(aug: &AugmentedBlockMatrix<C>, encoder: &Mlp<T>) -> Result<Array2<T>> {
    if encoder.input_width() != aug.width() {
        return Err(Error::arg(
            "encoder",
            format!("input width {} but augmented rows have {}", encoder.input_width(), aug.width()),
        ));
    }
    let x = aug.rows().mapv(|v| T::from_f64_lossy(v.to_f64_lossy()));
    let y = encoder.predict(x.view())?;
    Ok(segment_maxpool(y.view(), aug.offsets()).0)
}

/// Confidences from a sigmoid head; foreground iff confidence > alpha.
pub fn classify<T: Real>(features: ArrayView2<'_, T>, head: &Mlp<T>, alpha: f64) -> Result<BlockFeatures<T>> {
    let last = head
        .layers()
        .last()
        .ok_or_else(|| Error::arg("head", "empty network"))?;
    if last.act != Activation::Sigmoid || head.output_width() != 1 {
        return Err(Error::arg("head", "must end in a single sigmoid unit"));
    }
    let conf = head.predict(features)?;
    let confidences: Vec<T> = conf.column(0).to_vec();
    let foreground_mask = confidences.iter().map(|c| c.to_f64_lossy() > alpha).collect();
    Ok(BlockFeatures {
        features: features.to_owned(),
        confidences,
        foreground_mask,
        alpha,
    })
}

/// Encoder, first diffusion stage and classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct LfdbfNets<T: Real> {
    pub encoder: Mlp<T>,
    pub nfdm: NfdmConfig<T>,
    pub head: Mlp<T>,
}

impl<T: Real> LfdbfNets<T> {
    /// Default widths: encoder (c+6) -> 16 -> 16 -> 32, diffusion radius 4 m
    /// with 16 neighbors, 32-wide output, linear + sigmoid head.
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_radii(channels, &FIRST_NFDM_RADII, NFDM_MAX_K, rng)
    }

    pub fn with_radii(channels: usize, radii: &[f64], max_k: usize, rng: &mut Rng) -> Result<Self> {
        let c1 = ENCODER_WIDTHS[2];
        let encoder = Mlp::new(
            &[channels + 6, ENCODER_WIDTHS[0], ENCODER_WIDTHS[1], c1],
            &[Activation::Relu; 3],
            rng,
        );
        let nfdm = NfdmConfig::new(radii, max_k, c1, c1, c1, rng)?;
        let head = Mlp::new(&[c1, 1], &[Activation::Sigmoid], rng);
        Ok(Self { encoder, nfdm, head })
    }

    pub fn feature_width(&self) -> usize {
        self.nfdm.output_width()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use crate::grid::{augment, partition, GridConfig};
    use ndarray::Axis;

    fn encoder(rng: &mut Rng) -> Mlp<f64> {
        Mlp::new(&[9, 16, 16, 32], &[Activation::Relu; 3], rng)
    }

    #[test]
    fn single_point_block_pools_to_its_output() {
        let cloud = PointCloud::from_xyz(&[[1.0f32, 2.0, 3.0]]).unwrap();
        let grid = partition(&cloud, &GridConfig::default()).unwrap();
        let aug = augment(&grid, &cloud).unwrap();
        let enc = encoder(&mut Rng::new(1));
        let pooled = encode_blocks(&aug, &enc).unwrap();
        let x = aug.rows().mapv(|v| v as f64);
        assert_eq!(pooled, enc.predict(x.view()).unwrap());
    }

    #[test]
    fn duplicate_point_leaves_pool_unchanged() {
        let enc = encoder(&mut Rng::new(2));
        let pooled = |pts: &[[f32; 3]]| {
            let c = PointCloud::from_xyz(pts).unwrap();
            let g = partition(&c, &GridConfig::default()).unwrap();
            encode_blocks(&augment(&g, &c).unwrap(), &enc).unwrap()
        };
        let p = [0.02f32, 0.03, 0.5];
        assert_eq!(pooled(&[p]), pooled(&[p, p]));
    }

    #[test]
    fn encode_equals_forward_then_pool() {
        let mut rng = Rng::new(3);
        let pts: Vec<[f32; 3]> = (0..500)
            .map(|_| std::array::from_fn(|_| rng.range_f64(0.0, 1.0) as f32))
            .collect();
        let cloud = PointCloud::from_xyz(&pts).unwrap();
        let grid = partition(&cloud, &GridConfig { block_size: [0.2, 0.2, 1.0], ..Default::default() }).unwrap();
        let aug = augment(&grid, &cloud).unwrap();
        let enc = encoder(&mut rng);
        let got = encode_blocks(&aug, &enc).unwrap();
        let (values, mask) = aug.padded();
        let (m, s, w) = values.dim();
        let flat = values.mapv(|v| v as f64).into_shape_with_order((m * s, w)).unwrap();
        let y = enc.predict(flat.view()).unwrap().into_shape_with_order((m, s, 32)).unwrap();
        let (expect, _) = crate::nn::masked_maxpool(y.view(), mask.view());
        assert_eq!(got, expect);
    }

    #[test]
    fn encoder_width_mismatch() {
        let cloud = PointCloud::from_xyz(&[[1.0f32, 2.0, 3.0]]).unwrap();
        let grid = partition(&cloud, &GridConfig::default()).unwrap();
        let aug = augment(&grid, &cloud).unwrap();
        let enc = Mlp::<f64>::new(&[10, 4], &[Activation::Relu], &mut Rng::new(1));
        assert!(encode_blocks(&aug, &enc).is_err());
    }

    #[test]
    fn classify_thresholds() {
        let feats = Array2::from_shape_fn((5, 32), |(r, c)| (r * c) as f64 * 0.01);
        let zero = Mlp::<f64>::zeros(&[32, 1], &[Activation::Sigmoid]);
        let bf = classify(feats.view(), &zero, 0.45).unwrap();
        assert!(bf.confidences.iter().all(|&c| c == 0.5));
        assert_eq!(bf.foreground_count(), 5);
        assert_eq!(classify(feats.view(), &zero, 1.0).unwrap().foreground_count(), 0);
        assert_eq!(classify(feats.view(), &zero, 0.0).unwrap().foreground_count(), 5);
        let relu_head = Mlp::<f64>::zeros(&[32, 1], &[Activation::Relu]);
        assert!(classify(feats.view(), &relu_head, 0.45).is_err());
    }

    proptest::proptest! {
        #[test]
        fn classify_is_block_order_equivariant(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let feats = Array2::from_shape_fn((12, 32), |_| rng.range_f64(-1.0, 1.0));
            let head = Mlp::<f64>::new(&[32, 1], &[Activation::Sigmoid], &mut rng);
            let mut perm: Vec<usize> = (0..12).collect();
            for i in (1..12).rev() { perm.swap(i, rng.below(i + 1)); }
            let a = classify(feats.view(), &head, 0.45).unwrap();
            let b = classify(feats.select(Axis(0), &perm).view(), &head, 0.45).unwrap();
            for (k, &p) in perm.iter().enumerate() {
                proptest::prop_assert_eq!(a.confidences[p], b.confidences[k]);
                proptest::prop_assert_eq!(a.foreground_mask[p], b.foreground_mask[k]);
            }
        }
    }
}
