//! JSON pose / lens container:
//! `{"views": [{"m": 0, "W": [16 floats, row-major], "fx", "fy", "cx", "cy", "width", "height", "f"?, "Q"?}]}`.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CameraPose, LensParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub m: usize,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<f64>,
    #[serde(default, rename = "Q", skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub views: Vec<PoseRecord>,
}

impl PoseRecord {
    pub fn new(m: usize, cam: &CameraPose, lens: Option<LensParams>) -> Self {
        let mut w = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                w.push(cam.view[(r, c)]);
            }
        }
        Self {
            m,
            w,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            f: lens.map(|l| l.focal_distance),
            q: lens.map(|l| l.aperture),
        }
    }

    pub fn camera(&self) -> Result<CameraPose> {
        if self.w.len() != 16 {
            return Err(Error::Format(format!("view {}: W needs 16 values, got {}", self.m, self.w.len())));
        }
        let cam = CameraPose {
            view: Matrix4::from_row_slice(&self.w),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Lens when both `f` and `Q` are present.
    pub fn lens(&self) -> Option<LensParams> {
        Some(LensParams::new(self.f?, self.q?))
    }
}

impl PoseFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: PoseFile = serde_json::from_str(text)?;
        for (i, v) in file.views.iter().enumerate() {
            if v.m != i {
                return Err(Error::Format(format!("view {i} has index m = {}", v.m)));
            }
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pose file serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
