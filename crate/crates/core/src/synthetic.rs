//! Seeded synthetic scenes with self-rendered defocused references.
//!
//! Cameras share the identity orientation and are offset along x, so planes
//! perpendicular to the z axis have one depth in every view.

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CameraPose, Gaussian3D, Image, LensParams, Scene, TrainView};
use crate::raster::{render, render_all_in_focus, RasterConfig};

/// A fronto-parallel textured plane. `x_range` is in normalized image
/// coordinates of the central camera (`-1` left edge, `1` right edge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub depth: f64,
    pub x_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layout {
    Planes(Vec<PlaneSpec>),
    /// Random Gaussians filling the view frustum between two depths.
    RandomBox { count: usize, depth_range: (f64, f64) },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ColorScheme {
    /// Independent random color per Gaussian.
    Random,
    /// Two-color checkerboard with the given cell size in Gaussians.
    Checker(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub layout: Layout,
    pub colors: ColorScheme,
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    /// Lateral distance between neighboring cameras.
    pub baseline: f64,
    /// Grid spacing of plane Gaussians, in pixels at their depth.
    pub spacing_px: f64,
    pub opacity: f64,
    /// Ground-truth lens per view; the view count is its length.
    pub lenses: Vec<LensParams>,
}

impl SyntheticSpec {
    /// Near plane at depth 2 over the left half, far plane at 6 everywhere.
    pub fn two_plane(size: usize, lenses: Vec<LensParams>) -> Self {
        Self {
            layout: Layout::Planes(vec![
                PlaneSpec { depth: 2.0, x_range: (-1.2, 0.0) },
                PlaneSpec { depth: 6.0, x_range: (-1.2, 1.2) },
            ]),
            colors: ColorScheme::Random,
            width: size,
            height: size,
            focal_px: size as f64,
            baseline: 0.05,
            spacing_px: 1.5,
            opacity: 0.95,
            lenses,
        }
    }

    pub fn view_count(&self) -> usize {
        self.lenses.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.focal_px > 0.0) || !(self.spacing_px > 0.0) {
            return Err(Error::Validation("synthetic image size, focal length and spacing must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Validation("synthetic opacity must be in [0, 1]".into()));
        }
        for l in &self.lenses {
            l.validate()?;
        }
        match &self.layout {
            Layout::Planes(p) if p.iter().any(|p| !(p.depth > 0.0) || p.x_range.0 >= p.x_range.1) => {
                Err(Error::Validation("planes need positive depth and a non-empty x range".into()))
            }
            Layout::RandomBox { depth_range: (a, b), .. } if !(*a > 0.0 && a < b) => {
                Err(Error::Validation("random box depth range must be positive and increasing".into()))
            }
            _ => Ok(()),
        }
    }

    /// Camera `m`, offset along x from the center of the rig.
    pub fn camera(&self, m: usize) -> CameraPose {
        let offset = self.baseline * (m as f64 - (self.view_count().max(1) - 1) as f64 / 2.0);
        let mut view = Matrix4::identity();
        view[(0, 3)] = -offset;
        CameraPose { view, ..CameraPose::centered(self.width, self.height, self.focal_px) }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub scene: Scene,
    pub views: Vec<TrainView>,
    pub all_in_focus: Vec<Image>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

/// Ground-truth scene for `spec`.
pub fn synthetic_scene(spec: &SyntheticSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_w = spec.width as f64 / 2.0 / spec.focal_px;
    let half_h = spec.height as f64 / 2.0 / spec.focal_px;
    let rig = spec.baseline * spec.view_count().saturating_sub(1) as f64 / 2.0;
    let mut gaussians = Vec::new();
    match &spec.layout {
        Layout::Planes(planes) => {
            let palette = [random_color(&mut rng), random_color(&mut rng)];
            for plane in planes {
                let z = plane.depth;
                let step = spec.spacing_px * z / spec.focal_px;
                let x0 = plane.x_range.0 * half_w * z - if plane.x_range.0 <= -1.0 { rig } else { 0.0 };
                let x1 = plane.x_range.1 * half_w * z + if plane.x_range.1 >= 1.0 { rig } else { 0.0 };
                let y_extent = 1.2 * half_h * z;
                let nx = ((x1 - x0) / step).floor() as usize + 1;
                let ny = (2.0 * y_extent / step).floor() as usize + 1;
                for j in 0..ny {
                    for i in 0..nx {
                        let center = Vector3::new(x0 + i as f64 * step, -y_extent + j as f64 * step, z);
                        let rgb = match spec.colors {
                            ColorScheme::Random => random_color(&mut rng),
                            ColorScheme::Checker(cell) => palette[(i / cell.max(1) + j / cell.max(1)) % 2],
                        };
                        let mut g = Gaussian3D::isotropic(center, 0.9 * step, spec.opacity, rgb);
                        g.scale.z = 0.06 * step;
                        gaussians.push(g);
                    }
                }
            }
        }
        Layout::RandomBox { count, depth_range } => {
            for _ in 0..*count {
                let z = rng.random_range(depth_range.0..depth_range.1);
                let x = rng.random_range(-1.1..1.1) * (half_w * z + rig);
                let y = rng.random_range(-1.1..1.1) * half_h * z;
                let s = rng.random_range(1.0..3.0) * spec.spacing_px * z / spec.focal_px;
                let rgb = random_color(&mut rng);
                gaussians.push(Gaussian3D::isotropic(Vector3::new(x, y, z), s, spec.opacity, rgb));
            }
        }
    }
    Ok(Scene::new(gaussians))
}

/// Scene, cameras and references rendered at the ground-truth lenses, plus
/// all-in-focus renders.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, cfg: &RasterConfig) -> Result<SyntheticData> {
    let scene = synthetic_scene(spec, seed)?;
    let mut views = Vec::with_capacity(spec.view_count());
    let mut all_in_focus = Vec::with_capacity(spec.view_count());
    for (m, lens) in spec.lenses.iter().enumerate() {
        let camera = spec.camera(m);
        let image = render(&scene, &camera, lens, cfg).color;
        all_in_focus.push(render_all_in_focus(&scene, &camera, cfg).color);
        views.push(TrainView { index: m, camera, lens: *lens, image });
    }
    Ok(SyntheticData { scene, views, all_in_focus })
}

/// A point-cloud-like starting scene: every `stride`-th ground-truth center,
/// jittered by `noise` (world units), with gray color.
pub fn initial_points(scene: &Scene, stride: usize, noise: f64, seed: u64) -> crate::io::PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = scene
        .gaussians
        .iter()
        .step_by(stride.max(1))
        .map(|g| g.center + Vector3::from_fn(|_, _| rng.random_range(-noise..=noise)))
        .collect();
    crate::io::PointCloud { positions, colors: None }
}
