//! Point cloud container and on-disk formats.
//!
//! `pcf1` layout: magic `PCF1`, `u32` LE point count, `u32` LE channel count,
//! then `n * c` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::real::Real;

pub const PCF1_MAGIC: &[u8; 4] = b"PCF1";
pub const PCF1_HEADER_LEN: usize = 12;

/// N x C matrix of points. Columns 0..3 are x, y, z in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T: Real> {
    points: Array2<T>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Array2<T>) -> Result<Self> {
        let c = points.ncols();
        if c < 3 {
            return Err(Error::Validation(format!(
                "point cloud needs at least 3 channels, got {c}"
            )));
        }
        if let Some((row, _)) = points
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Validation(format!("non-finite value in row {row}")));
        }
        Ok(Self { points })
    }

    pub fn empty(c: usize) -> Result<Self> {
        Self::new(Array2::zeros((0, c)))
    }

    pub fn from_xyz(xyz: &[[T; 3]]) -> Result<Self> {
        let flat: Vec<T> = xyz.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((xyz.len(), 3), flat)
            .map_err(|e| Error::Validation(e.to_string()))?;
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, T> {
        self.points.view()
    }

    /// Channels after xyz.
    pub fn attributes(&self) -> ArrayView2<'_, T> {
        self.points.slice(ndarray::s![.., 3..])
    }

    #[inline]
    pub fn xyz(&self, i: usize) -> [T; 3] {
        [
            self.points[[i, 0]],
            self.points[[i, 1]],
            self.points[[i, 2]],
        ]
    }

    pub fn positions(&self) -> Vec<[T; 3]> {
        (0..self.len()).map(|i| self.xyz(i)).collect()
    }

    pub fn into_inner(self) -> Array2<T> {
        self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Pcf1,
    KittiBin,
    XyzAscii,
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcf1" => Ok(CloudFormat::Pcf1),
            "kitti_bin" | "kitti" | "bin" => Ok(CloudFormat::KittiBin),
            "xyz_ascii" | "xyz" => Ok(CloudFormat::XyzAscii),
            other => Err(Error::arg("format", format!("unknown cloud format `{other}`"))),
        }
    }
}

impl CloudFormat {
    /// Guess from the file extension, defaulting to pcf1.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => CloudFormat::KittiBin,
            Some("xyz") | Some("txt") => CloudFormat::XyzAscii,
            _ => CloudFormat::Pcf1,
        }
    }
}

fn finish(path: &Path, n: usize, c: usize, values: Vec<f32>) -> Result<PointCloud<f32>> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "{}: non-finite value in row {}",
            path.display(),
            pos / c
        )));
    }
    let points = Array2::from_shape_vec((n, c), values).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    PointCloud::new(points)
}

fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

pub fn decode_pcf1(path: &Path, bytes: &[u8]) -> Result<PointCloud<f32>> {
    if bytes.len() < PCF1_HEADER_LEN || &bytes[0..4] != PCF1_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "missing PCF1 magic or truncated header".into(),
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if c < 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("channel count {c} < 3"),
        });
    }
    let expected = n * c * 4;
    let payload = &bytes[PCF1_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    finish(path, n, c, decode_f32s(payload))
}

pub fn encode_pcf1(cloud: &PointCloud<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(PCF1_HEADER_LEN + cloud.len() * cloud.channels() * 4);
    out.extend_from_slice(PCF1_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.channels() as u32).to_le_bytes());
    for v in cloud.points.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_kitti(path: &Path, bytes: &[u8]) -> Result<PointCloud<f32>> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: bytes.len().div_ceil(16) * 16,
            found: bytes.len(),
        });
    }
    finish(path, bytes.len() / 16, 4, decode_f32s(bytes))
}

fn decode_xyz(path: &Path, bytes: &[u8]) -> Result<PointCloud<f32>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut values = Vec::new();
    let mut n = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: expected 3 values, got {}", lineno + 1, fields.len()),
            });
        }
        for f in fields {
            let v: f32 = f.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: cannot parse `{f}`", lineno + 1),
            })?;
            values.push(v);
        }
        n += 1;
    }
    finish(path, n, 3, values)
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Pcf1 => decode_pcf1(path, &bytes),
        CloudFormat::KittiBin => decode_kitti(path, &bytes),
        CloudFormat::XyzAscii => decode_xyz(path, &bytes),
    }
}

pub fn save_cloud(cloud: &PointCloud<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pcf1(cloud)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn pcf1_two_points() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"PCF1".to_vec();
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(3u32.to_le_bytes());
        for v in [0f32, 0., 0., 1., 2., 3.] {
            bytes.extend(v.to_le_bytes());
        }
        let p = write(&dir, "a.pcf1", &bytes);
        let cloud = load_cloud(&p, CloudFormat::Pcf1).unwrap();
        assert_eq!(cloud.points(), array![[0f32, 0., 0.], [1., 2., 3.]]);
    }

    #[test]
    fn kitti_16_bytes_is_one_point() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = [1f32, 2., 3., 0.5].iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = write(&dir, "a.bin", &bytes);
        let cloud = load_cloud(&p, CloudFormat::KittiBin).unwrap();
        assert_eq!((cloud.len(), cloud.channels()), (1, 4));
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"PCF1".to_vec();
        bytes.extend(3u32.to_le_bytes());
        bytes.extend(3u32.to_le_bytes());
        bytes.extend([0u8; 24]);
        let p = write(&dir, "a.pcf1", &bytes);
        assert!(matches!(
            load_cloud(&p, CloudFormat::Pcf1),
            Err(Error::Length { expected: 36, found: 24, .. })
        ));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.pcf1", b"PCF2\0\0\0\0\x03\0\0\0");
        assert!(matches!(load_cloud(&p, CloudFormat::Pcf1), Err(Error::Format { .. })));
    }

    #[test]
    fn nan_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"PCF1".to_vec();
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(3u32.to_le_bytes());
        for v in [0f32, 0., 0., 1., f32::NAN, 3.] {
            bytes.extend(v.to_le_bytes());
        }
        let p = write(&dir, "a.pcf1", &bytes);
        match load_cloud(&p, CloudFormat::Pcf1) {
            Err(Error::Validation(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_cloud_round_trips_as_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.pcf1");
        let cloud = PointCloud::<f32>::empty(3).unwrap();
        save_cloud(&cloud, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 12);
        assert_eq!(load_cloud(&p, CloudFormat::Pcf1).unwrap(), cloud);
    }

    #[test]
    fn seven_channels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c7.pcf1");
        let cloud = PointCloud::new(Array2::from_shape_fn((5, 7), |(i, j)| (i * 7 + j) as f32 * 0.25)).unwrap();
        save_cloud(&cloud, &p).unwrap();
        let back = load_cloud(&p, CloudFormat::Pcf1).unwrap();
        assert_eq!(back.channels(), 7);
        assert_eq!(back, cloud);
    }

    #[test]
    fn xyz_ascii_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.xyz", b"0 0 0\n1.5 2 -3\n\n");
        let cloud = load_cloud(&p, CloudFormat::XyzAscii).unwrap();
        assert_eq!(cloud.points(), array![[0f32, 0., 0.], [1.5, 2., -3.]]);
    }

    #[test]
    fn xyz_ascii_wrong_arity() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.xyz", b"0 0\n");
        assert!(matches!(load_cloud(&p, CloudFormat::XyzAscii), Err(Error::Format { .. })));
    }

    proptest::proptest! {
        #[test]
        fn pcf1_round_trip_is_bit_exact(
            n in 0usize..40,
            c in 3usize..8,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let cloud = PointCloud::new(Array2::from_shape_fn((n, c), |_| rng.range_f64(-1e4, 1e4) as f32)).unwrap();
            let bytes = encode_pcf1(&cloud);
            let back = decode_pcf1(Path::new("mem"), &bytes).unwrap();
            proptest::prop_assert_eq!(encode_pcf1(&back), bytes);
        }
    }
}
