//! Differentiable depth-of-field Gaussian splatting.
//!
//! A scene of anisotropic 3D Gaussians is rendered through a per-view thin
//! lens (focal distance `f`, aperture parameter `Q`). Each Gaussian is blurred
//! by a kernel sized to its circle of confusion, and the whole render is
//! differentiable with respect to the scene and the lens. On top of that sit
//! camera initialization, the in-focus localization network, the losses and
//! the two-stage trainer.

pub mod camera_init;
pub mod config;
pub mod dof;
pub mod error;
pub mod iln;
pub mod io;
pub mod losses;
pub mod model;
pub mod neighbors;
pub mod optim;
pub mod projection;
pub mod raster;
pub mod ssim;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{CameraPose, Gaussian3D, Image, LensParams, Scene, TrainView};
