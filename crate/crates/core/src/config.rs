//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera_init::{initialize_views, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::io::{load_ply_points, read_image, PoseFile};
use crate::losses::LossWeights;
use crate::model::{Image, LensParams, Scene, TrainView};
use crate::raster::RasterConfig;
use crate::synthetic::{generate_synthetic, initial_points, SyntheticSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraInitConfig {
    pub tau: f64,
    /// Start from the `f`/`Q` stored in the pose file instead of the heuristic.
    pub use_pose_lens: bool,
}

impl Default for CameraInitConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, use_pose_lens: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub workers: usize,
    pub bind: String,
    /// Directory of the viewer bundle served at `/`.
    pub static_dir: Option<PathBuf>,
    pub cache_entries: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { workers: 4, bind: "127.0.0.1:8080".into(), static_dir: None, cache_entries: 256 }
    }
}

/// Two-plane scene generated in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub size: usize,
    pub seed: u64,
    /// One view per entry.
    pub focal_distances: Vec<f64>,
    pub aperture: f64,
    /// Initial points: every `init_stride`-th ground-truth center.
    pub init_stride: usize,
    pub init_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { size: 48, seed: 0, focal_distances: vec![2.0, 3.0, 4.5, 6.0], aperture: 20.0, init_stride: 3, init_noise: 0.0 }
    }
}

impl SyntheticConfig {
    pub fn spec(&self) -> SyntheticSpec {
        let lenses = self.focal_distances.iter().map(|&f| LensParams::new(f, self.aperture)).collect();
        SyntheticSpec::two_plane(self.size, lenses)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub points: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    /// One image per pose record, in order.
    pub images: Vec<PathBuf>,
    /// Optional all-in-focus references for evaluation.
    pub ground_truth: Vec<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub metrics: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint: "model.dofs".into(), metrics: Some("metrics.csv".into()) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub camera_init: CameraInitConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub raster: RasterConfig,
    pub serve: ServeConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.points.iter_mut().chain(d.poses.iter_mut()).chain(&mut d.images).chain(&mut d.ground_truth).for_each(fix);
        fix(&mut self.output.checkpoint);
        self.output.metrics.iter_mut().for_each(fix);
        self.serve.static_dir.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.camera_init.tau > 0.0) {
            return Err(Error::Config("camera_init.tau must be positive".into()));
        }
        if self.serve.workers == 0 {
            return Err(Error::Config("serve.workers must be at least 1".into()));
        }
        self.loss.validate()?;
        self.train.validate()?;
        let d = &self.data;
        match (&d.synthetic, &d.points, &d.poses) {
            (Some(_), None, None) if d.images.is_empty() => Ok(()),
            (Some(_), _, _) => Err(Error::Config("data.synthetic excludes points, poses and images".into())),
            (None, Some(_), Some(_)) => Ok(()),
            (None, None, None) => Ok(()),
            _ => Err(Error::Config("data.points and data.poses must be given together".into())),
        }
    }
}

/// Initial scene, views with initialized lenses, and optional ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: Scene,
    pub views: Vec<TrainView>,
    pub ground_truth: Option<Vec<Image>>,
}

/// Loads or generates the training data described by `cfg`.
pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let d = &cfg.data;
    let (scene, mut views, ground_truth, pose_lens) = if let Some(syn) = &d.synthetic {
        let data = generate_synthetic(&syn.spec(), syn.seed, &cfg.raster)?;
        let cloud = initial_points(&data.scene, syn.init_stride, syn.init_noise, syn.seed ^ 0x5eed);
        let scene = crate::io::ply::scene_from_points(&cloud);
        (scene, data.views, Some(data.all_in_focus), true)
    } else {
        let (Some(points), Some(poses)) = (&d.points, &d.poses) else {
            return Err(Error::Config("no data configured: set data.synthetic or data.points + data.poses".into()));
        };
        let scene = load_ply_points(points)?;
        let poses = PoseFile::load(poses)?;
        if poses.views.len() != d.images.len() {
            return Err(Error::Config(format!(
                "{} pose records but {} images",
                poses.views.len(),
                d.images.len()
            )));
        }
        let mut views = Vec::with_capacity(poses.views.len());
        let mut all_lens = true;
        for (rec, path) in poses.views.iter().zip(&d.images) {
            let camera = rec.camera()?;
            let image = read_image(path)?;
            if image.width != camera.width || image.height != camera.height {
                return Err(Error::Validation(format!(
                    "{}: image is {}x{}, pose says {}x{}",
                    path.display(),
                    image.width,
                    image.height,
                    camera.width,
                    camera.height
                )));
            }
            all_lens &= rec.lens().is_some();
            let lens = rec.lens().unwrap_or_else(LensParams::pinhole);
            views.push(TrainView { index: rec.m, camera, lens, image });
        }
        let gt = if d.ground_truth.is_empty() {
            None
        } else {
            Some(d.ground_truth.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?)
        };
        (scene, views, gt, all_lens)
    };
    if !(cfg.camera_init.use_pose_lens && pose_lens) || d.synthetic.is_some() {
        initialize_views(&scene, &mut views, cfg.camera_init.tau)?;
    }
    Ok(Dataset { scene, views, ground_truth })
}
