//! Tile-based compositing of (optionally defocused) Gaussians into color,
//! depth, CoC and alpha maps, plus the analytic backward pass.
//!
//! Each projected Gaussian is convolved with its isotropic CoC kernel before
//! compositing. Because both are Gaussians the result is again a Gaussian
//! with covariance `cov + a I`, scaled by `sqrt(det cov / det(cov + a I))`
//! so that the kernel redistributes energy instead of inflating it.
//! Contributions are accumulated front to back per pixel:
//!
//! ```text
//! alpha_i = min(0.99, o_i * A_i * exp(-0.5 d^T conic_i d))
//! color   = sum_i T_i alpha_i c_i + T_N * background
//! depth   = sum_i T_i alpha_i z_i
//! coc     = sum_i T_i alpha_i R_i
//! ```
//!
//! Depth and CoC maps are not normalized by the accumulated alpha; use
//! [`RenderOutput::normalized_depth`] / [`RenderOutput::normalized_coc`] for
//! display values.

mod backward;
mod forward;
mod tiles;

pub use backward::{render_backward, GaussianGrad, GradientSet, LensGrad, Upstream};
pub use forward::{render, render_all_in_focus, render_plain, render_with, splat_gaussian};
pub use tiles::TileIndex;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::model::{CameraPose, Image, LensParams};
use crate::projection::{ProjectionConfig, Projected2D};

/// Rasterizer tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub background: [f64; 3],
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub transmittance_min: f64,
    pub near: f64,
    pub low_pass: f64,
    /// Let gradients reach depth through the CoC kernel and the CoC map.
    /// Set from `train.coc_z_grad` rather than the `raster` table.
    #[serde(skip)]
    pub coc_z_grad: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            background: [0.0; 3],
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            near: crate::projection::DEFAULT_NEAR,
            low_pass: crate::projection::LOW_PASS,
            coc_z_grad: false,
        }
    }
}

impl RasterConfig {
    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig { near: self.near, low_pass: self.low_pass }
    }
}

/// How defocus is applied during a render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Defocus<'a> {
    /// Plain splatting, no CoC kernel at all.
    Off,
    /// Thin-lens blur. `coc_depths`, when given, replaces each Gaussian's
    /// depth in the CoC computation with a fixed value (a stop-gradient
    /// forward used to check the detached depth path).
    Lens { lens: LensParams, coc_depths: Option<&'a [f64]> },
}

impl Defocus<'_> {
    pub fn lens(lens: LensParams) -> Self {
        Defocus::Lens { lens, coc_depths: None }
    }
}

/// A Gaussian ready for compositing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub projected: Projected2D,
    pub mean: Vector2<f64>,
    /// Covariance after the CoC convolution.
    pub cov: Matrix2<f64>,
    /// Inverse of `cov`.
    pub conic: Matrix2<f64>,
    /// Peak scale of the convolved Gaussian, 1 without blur.
    pub amplitude: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Which color channels were clamped at zero.
    pub color_clamped: [bool; 3],
    pub depth: f64,
    /// Depth used for the CoC radius (differs from `depth` only when frozen).
    pub coc_depth: f64,
    pub coc_radius: f64,
    pub coc_variance: f64,
    pub radius: f64,
    pub visible: bool,
}

/// Intermediates retained from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub splats: Vec<Splat>,
    pub tiles: TileIndex,
    /// Transmittance after the last blended contributor, per pixel.
    pub final_transmittance: Vec<f64>,
    /// Number of tile-list entries visited per pixel.
    pub contributors: Vec<u32>,
    pub camera: CameraPose,
    pub lens: Option<LensParams>,
    pub config: RasterConfig,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: Image,
    pub coc: Image,
    pub alpha: Image,
    pub state: Option<ForwardState>,
}

impl RenderOutput {
    /// Drops the backward intermediates.
    pub fn into_maps(mut self) -> Self {
        self.state = None;
        self
    }

    /// Depth divided by accumulated alpha (0 where nothing was drawn).
    pub fn normalized_depth(&self) -> Image {
        normalize_by_alpha(&self.depth, &self.alpha)
    }

    pub fn normalized_coc(&self) -> Image {
        normalize_by_alpha(&self.coc, &self.alpha)
    }

    /// Per-pixel count of contributors that were actually blended.
    pub fn contributor_counts(&self) -> Option<Vec<usize>> {
        let state = self.state.as_ref()?;
        let w = self.color.width;
        let mut out = vec![0; self.color.pixels()];
        for t in 0..state.tiles.tile_count() {
            let (x0, x1, y0, y1) = state.tiles.tile_rect(t, w, self.color.height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    out[p] = forward::blended_count(state, t, x, y);
                }
            }
        }
        Some(out)
    }
}

const ALPHA_EPS: f64 = 1e-12;

fn normalize_by_alpha(map: &Image, alpha: &Image) -> Image {
    let data = map
        .data
        .iter()
        .zip(&alpha.data)
        .map(|(v, a)| if *a > ALPHA_EPS { v / a } else { 0.0 })
        .collect();
    Image { width: map.width, height: map.height, channels: 1, data }
}

#[cfg(test)]
mod tests;
