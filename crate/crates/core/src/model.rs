//! Scene primitives, cameras, lens parameters and the image buffers passed
//! between pipeline stages.
//!
//! Everything here uses physical values (scale in world units, opacity in
//! `[0, 1]`). The optimizer works on log-scale / logit-opacity and converts at
//! its boundary, see [`crate::optim::ParamStore`].

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zeroth-order real spherical harmonic constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// First-order real spherical harmonic constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Number of SH coefficient triplets stored per Gaussian (degree 0 and 1).
pub const SH_COEFFS: usize = 4;

const QUAT_TOLERANCE: f64 = 1e-3;

/// A single anisotropic 3D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub center: Vector3<f64>,
    /// Rotation as `(w, x, y, z)`; unit norm is an invariant but rendering
    /// normalizes defensively and differentiates through the normalization.
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    pub opacity: f64,
    /// SH coefficients per RGB channel; `sh[0]` is the DC term, `sh[1..4]`
    /// the degree-1 terms (ignored when the scene is degree 0).
    pub sh: [[f64; 3]; SH_COEFFS],
}

impl Gaussian3D {
    /// Builds a Gaussian with an identity rotation and a constant color.
    pub fn isotropic(center: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        Self {
            center,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: Vector3::repeat(scale),
            opacity,
            sh: [rgb_to_sh_dc(rgb), [0.0; 3], [0.0; 3], [0.0; 3]],
        }
    }

    pub fn quaternion(&self) -> Quaternion<f64> {
        let [w, x, y, z] = self.rotation;
        Quaternion::new(w, x, y, z)
    }

    /// DC color, i.e. the view-independent RGB.
    pub fn base_color(&self) -> [f64; 3] {
        sh_dc_to_rgb(self.sh[0])
    }

    pub fn set_base_color(&mut self, rgb: [f64; 3]) {
        self.sh[0] = rgb_to_sh_dc(rgb);
    }

    pub fn covariance(&self) -> Result<Covariance3> {
        covariance_from(self.quaternion(), self.scale)
    }
}

pub fn rgb_to_sh_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

pub fn sh_dc_to_rgb(dc: [f64; 3]) -> [f64; 3] {
    dc.map(|h| SH_C0 * h + 0.5)
}

/// Symmetric 3x3 covariance `R diag(s)^2 R^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

/// Rotation matrix of a (not necessarily unit) quaternion after normalization.
pub fn rotation_matrix(q: Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Covariance of a Gaussian with rotation `q` and per-axis standard deviation `s`.
pub fn covariance_from(q: Quaternion<f64>, s: Vector3<f64>) -> Result<Covariance3> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > QUAT_TOLERANCE {
        return Err(Error::Validation(format!("quaternion norm {n} is not 1")));
    }
    if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Validation(format!("scale {s:?} must be positive")));
    }
    let r = rotation_matrix(q);
    let m = r * Matrix3::from_diagonal(&s);
    Ok(Covariance3(m * m.transpose()))
}

/// The Gaussian scene plus its SH degree.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian3D>,
    /// 0 (constant color) or 1 (linear view dependence).
    pub sh_degree: u8,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        Self { gaussians, sh_degree: 0 }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Axis-aligned bounds of the centers, `None` for an empty scene.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.gaussians.first()?.center;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.center), hi.sup(&g.center))
        }))
    }
}

/// One invariant violation found by [`validate_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub index: usize,
    pub message: String,
}

/// Lists every invariant violation; an empty result means the scene is valid.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    if scene.sh_degree > 1 {
        out.push(Violation {
            index: usize::MAX,
            message: format!("sh degree {} unsupported (max 1)", scene.sh_degree),
        });
    }
    for (index, g) in scene.gaussians.iter().enumerate() {
        let mut flag = |message: String| out.push(Violation { index, message });
        if g.center.iter().any(|v| !v.is_finite()) {
            flag(format!("non-finite center {:?}", g.center));
        }
        let qn = g.quaternion().norm();
        if !qn.is_finite() || (qn - 1.0).abs() > 1e-6 {
            flag(format!("rotation norm {qn} is not 1"));
        }
        if g.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            flag(format!("scale {:?} must be positive", g.scale));
        }
        if !(0.0..=1.0).contains(&g.opacity) {
            flag(format!("opacity {} outside [0, 1]", g.opacity));
        }
        if g.sh.iter().flatten().any(|v| !v.is_finite()) {
            flag("non-finite color coefficients".to_string());
        }
    }
    out
}

/// World-to-camera transform plus pinhole intrinsics. Camera looks down +z,
/// with x to the right and y down in the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub view: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    /// Camera with an identity pose and principal point at the image center.
    pub fn centered(width: usize, height: usize, focal_px: f64) -> Self {
        Self {
            view: Matrix4::identity(),
            fx: focal_px,
            fy: focal_px,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// Camera at world position `eye` looking at `target`; `up_hint` is the
    /// world direction that should appear at the top of the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up_hint: Vector3<f64>,
        width: usize,
        height: usize,
        focal_px: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up_hint).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut view = Matrix4::identity();
        view.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        view.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self {
            view,
            ..Self::centered(width, height, focal_px)
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.view.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.view.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::Validation(format!(
                "view rotation is not orthonormal (error {err:e})"
            )));
        }
        let bottom = self.view.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::Validation("view matrix bottom row must be 0 0 0 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image size must be non-zero".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation("focal lengths must be positive".into()));
        }
        Ok(())
    }

    /// Rotation block as a unit quaternion, for callers that need one.
    pub fn orientation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation())
    }
}

/// Per-view thin-lens parameters: focal distance `f` (depth units) and the
/// aperture parameter `q` (depth x pixel units). `q == 0` is a pinhole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensParams {
    pub focal_distance: f64,
    pub aperture: f64,
}

impl LensParams {
    pub fn new(focal_distance: f64, aperture: f64) -> Self {
        Self { focal_distance, aperture }
    }

    pub fn pinhole() -> Self {
        Self { focal_distance: 1.0, aperture: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_distance.is_finite() && self.focal_distance > 0.0) {
            return Err(Error::Validation(format!(
                "focal distance {} must be > 0",
                self.focal_distance
            )));
        }
        if !(self.aperture.is_finite() && self.aperture >= 0.0) {
            return Err(Error::Validation(format!("aperture {} must be >= 0", self.aperture)));
        }
        Ok(())
    }
}

/// Row-major `height x width x channels` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Single channel `c` as its own image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image { width: self.width, height: self.height, channels: 1, data }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One training view: camera, learnable lens and the reference photo.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub index: usize,
    pub camera: CameraPose,
    pub lens: LensParams,
    pub image: Image,
}

impl TrainView {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.lens.validate()?;
        if self.image.width != self.camera.width
            || self.image.height != self.camera.height
            || self.image.channels != 3
        {
            return Err(Error::Shape(format!(
                "view {} image {}x{}x{} does not match camera {}x{}",
                self.index,
                self.image.width,
                self.image.height,
                self.image.channels,
                self.camera.width,
                self.camera.height
            )));
        }
        Ok(())
    }
}
