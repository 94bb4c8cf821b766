//! Ground-truth boxes and per-point instance ids.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::real::Real;

/// Slack used when checking that labeled points sit inside their box.
pub const CONTAINMENT_SLACK: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub center: [f64; 3],
    /// Length, width, height in meters (along local x, y, z).
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: String,
}

impl BoxLabel {
    /// Position of `p` in the box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn contains_with_slack(&self, p: [f64; 3], slack: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|k| l[k].abs() <= 0.5 * self.size[k] + slack)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.contains_with_slack(p, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelSet {
    pub boxes: Vec<BoxLabel>,
    /// -1 for background, otherwise an index into `boxes`.
    pub point_box_id: Vec<i64>,
}

impl LabelSet {
    pub fn background(n: usize) -> Self {
        Self {
            boxes: Vec::new(),
            point_box_id: vec![-1; n],
        }
    }

    #[inline]
    pub fn is_foreground(&self, i: usize) -> bool {
        self.point_box_id[i] >= 0
    }

    pub fn foreground_count(&self) -> usize {
        self.point_box_id.iter().filter(|&&id| id >= 0).count()
    }

    /// Checks id ranges and, when a cloud length is given, the length match.
    pub fn validate(&self, cloud_len: Option<usize>) -> Result<()> {
        for (k, b) in self.boxes.iter().enumerate() {
            let finite = b.center.iter().chain(b.size.iter()).all(|v| v.is_finite()) && b.yaw.is_finite();
            if !finite {
                return Err(Error::Validation(format!("boxes[{k}]: non-finite value")));
            }
            if b.size.iter().any(|&s| s < 0.0) {
                return Err(Error::Validation(format!("boxes[{k}].size: negative extent")));
            }
        }
        for (i, &id) in self.point_box_id.iter().enumerate() {
            if id < -1 || id >= self.boxes.len() as i64 {
                return Err(Error::Validation(format!(
                    "point_box_id[{i}] = {id} out of range for {} boxes",
                    self.boxes.len()
                )));
            }
        }
        if let Some(n) = cloud_len {
            if n != self.point_box_id.len() {
                return Err(Error::Validation(format!(
                    "point_box_id has length {} but cloud has {n} points",
                    self.point_box_id.len()
                )));
            }
        }
        Ok(())
    }

    /// Every labeled point lies inside its box within [`CONTAINMENT_SLACK`].
    pub fn validate_containment<T: Real>(&self, cloud: &PointCloud<T>) -> Result<()> {
        self.validate(Some(cloud.len()))?;
        for (i, &id) in self.point_box_id.iter().enumerate() {
            if id < 0 {
                continue;
            }
            let p = cloud.xyz(i).map(|v| v.to_f64_lossy());
            if !self.boxes[id as usize].contains_with_slack(p, CONTAINMENT_SLACK) {
                return Err(Error::Validation(format!(
                    "point {i} lies outside its box {id}"
                )));
            }
        }
        Ok(())
    }
}

pub fn load_labels(path: impl AsRef<Path>, cloud_len: Option<usize>) -> Result<LabelSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    for key in ["boxes", "point_box_id"] {
        if value.get(key).is_none() {
            return Err(Error::Validation(format!(
                "{}: missing key `{key}`",
                path.display()
            )));
        }
    }
    let labels: LabelSet = serde_json::from_value(value).map_err(|e| {
        Error::Validation(format!("{}: {e}", path.display()))
    })?;
    labels.validate(cloud_len)?;
    Ok(labels)
}

pub fn save_labels(labels: &LabelSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(labels).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
