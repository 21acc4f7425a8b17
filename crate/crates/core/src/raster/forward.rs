use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use super::{Defocus, ForwardState, RasterConfig, RenderOutput, Splat, TileIndex};
use crate::dof;
use crate::model::{CameraPose, Gaussian3D, Image, LensParams, Scene, SH_C0, SH_C1};
use crate::projection::{cutoff_radius, overlaps_image, project_gaussian, CUTOFF_SIGMAS};

/// Largest Mahalanobis exponent still inside the footprint: `-0.5 * 3^2`.
pub(crate) const MIN_POWER: f64 = -0.5 * CUTOFF_SIGMAS * CUTOFF_SIGMAS;

/// View-dependent color before clamping.
pub(crate) fn eval_color(g: &Gaussian3D, sh_degree: u8, cam_pos: &Vector3<f64>) -> [f64; 3] {
    let mut c = std::array::from_fn(|k| SH_C0 * g.sh[0][k] + 0.5);
    if sh_degree >= 1 {
        let dir = (g.center - cam_pos).normalize();
        for (k, ck) in c.iter_mut().enumerate() {
            *ck += SH_C1 * (-dir.y * g.sh[1][k] + dir.z * g.sh[2][k] - dir.x * g.sh[3][k]);
        }
    }
    c
}

pub fn splat_gaussian(
    g: &Gaussian3D,
    sh_degree: u8,
    cam: &CameraPose,
    defocus: Defocus<'_>,
    frozen_depth: Option<f64>,
    cfg: &RasterConfig,
) -> Splat {
    let projected = project_gaussian(g, cam, &cfg.projection());
    let raw = eval_color(g, sh_degree, &cam.position());
    let color_clamped = raw.map(|c| c < 0.0);
    let color = raw.map(|c| c.max(0.0));
    let depth = projected.depth;
    let mut splat = Splat {
        projected,
        mean: projected.mean,
        cov: projected.cov,
        conic: Matrix2::identity(),
        amplitude: 1.0,
        opacity: g.opacity,
        color,
        color_clamped,
        depth,
        coc_depth: frozen_depth.unwrap_or(depth),
        coc_radius: 0.0,
        coc_variance: 0.0,
        radius: projected.radius,
        visible: projected.visible,
    };
    if !(depth > cfg.near) {
        splat.visible = false;
        return splat;
    }
    if let Defocus::Lens { lens, .. } = defocus {
        let z = splat.coc_depth;
        let radius = dof::coc_radius_unchecked(lens.aperture, lens.focal_distance, z);
        let kernel = dof::CocKernel::new(projected.cov, radius);
        splat.coc_radius = radius;
        splat.coc_variance = kernel.variance;
        splat.cov = kernel.convolved;
        splat.amplitude = (projected.cov.determinant() / kernel.convolved.determinant()).sqrt();
        splat.radius = cutoff_radius(&kernel.convolved);
        splat.visible = overlaps_image(&splat.mean, splat.radius, cam);
    }
    match splat.cov.try_inverse() {
        Some(conic) if splat.cov.determinant() > 0.0 => splat.conic = conic,
        _ => splat.visible = false,
    }
    splat
}

/// Thin-lens DOF render.
pub fn render(scene: &Scene, cam: &CameraPose, lens: &LensParams, cfg: &RasterConfig) -> RenderOutput {
    render_with(scene, cam, Defocus::lens(*lens), cfg)
}

/// Plain splatting without any CoC kernel.
pub fn render_plain(scene: &Scene, cam: &CameraPose, cfg: &RasterConfig) -> RenderOutput {
    render_with(scene, cam, Defocus::Off, cfg)
}

/// Pinhole render through the lens path (`Q = 0`).
pub fn render_all_in_focus(scene: &Scene, cam: &CameraPose, cfg: &RasterConfig) -> RenderOutput {
    render(scene, cam, &LensParams::pinhole(), cfg)
}

pub fn render_with(scene: &Scene, cam: &CameraPose, defocus: Defocus<'_>, cfg: &RasterConfig) -> RenderOutput {
    let frozen = match defocus {
        Defocus::Lens { coc_depths: Some(d), .. } => Some(d),
        _ => None,
    };
    let splats: Vec<Splat> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| splat_gaussian(g, scene.sh_degree, cam, defocus, frozen.map(|d| d[i]), cfg))
        .collect();
    let (w, h) = (cam.width, cam.height);
    let tiles = TileIndex::build(&splats, w, h, cfg.tile_size);

    let per_tile: Vec<Vec<PixelResult>> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = tiles.tile_rect(t, w, h);
            let list = &tiles.lists[t];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    out.push(composite_pixel(&splats, list, x, y, cfg));
                }
            }
            out
        })
        .collect();

    let mut color = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut coc = Image::new(w, h, 1);
    let mut alpha = Image::new(w, h, 1);
    let mut final_transmittance = vec![1.0; w * h];
    let mut contributors = vec![0u32; w * h];
    for (t, results) in per_tile.into_iter().enumerate() {
        let (x0, x1, y0, y1) = tiles.tile_rect(t, w, h);
        let mut it = results.into_iter();
        for y in y0..y1 {
            for x in x0..x1 {
                let r = it.next().expect("tile result count");
                let p = y * w + x;
                for c in 0..3 {
                    color.data[p * 3 + c] = r.color[c] + r.transmittance * cfg.background[c];
                }
                depth.data[p] = r.depth;
                coc.data[p] = r.coc;
                alpha.data[p] = 1.0 - r.transmittance;
                final_transmittance[p] = r.transmittance;
                contributors[p] = r.visited;
            }
        }
    }

    let lens = match defocus {
        Defocus::Off => None,
        Defocus::Lens { lens, .. } => Some(lens),
    };
    RenderOutput {
        color,
        depth,
        coc,
        alpha,
        state: Some(ForwardState {
            splats,
            tiles,
            final_transmittance,
            contributors,
            camera: *cam,
            lens,
            config: *cfg,
        }),
    }
}

struct PixelResult {
    color: [f64; 3],
    depth: f64,
    coc: f64,
    transmittance: f64,
    visited: u32,
}

/// Opacity of splat `s` at pixel center `px`, or `None` if it is skipped.
/// Returns `(alpha, gaussian, clamped)`.
#[inline]
pub(crate) fn splat_alpha(s: &Splat, px: &Vector2<f64>, cfg: &RasterConfig) -> Option<(f64, f64, bool)> {
    let d = px - s.mean;
    let power = -0.5 * (s.conic[(0, 0)] * d.x * d.x + 2.0 * s.conic[(0, 1)] * d.x * d.y + s.conic[(1, 1)] * d.y * d.y);
    if !(MIN_POWER..=0.0).contains(&power) {
        return None;
    }
    let gauss = power.exp();
    let raw = s.opacity * s.amplitude * gauss;
    let clamped = raw > cfg.alpha_max;
    let alpha = if clamped { cfg.alpha_max } else { raw };
    if alpha < cfg.alpha_min {
        return None;
    }
    Some((alpha, gauss, clamped))
}

#[inline]
pub(crate) fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

fn composite_pixel(splats: &[Splat], list: &[u32], x: usize, y: usize, cfg: &RasterConfig) -> PixelResult {
    let px = pixel_center(x, y);
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut coc = 0.0;
    let mut visited = 0u32;
    for (k, &idx) in list.iter().enumerate() {
        let s = &splats[idx as usize];
        let Some((alpha, _, _)) = splat_alpha(s, &px, cfg) else {
            continue;
        };
        let next = t * (1.0 - alpha);
        if next < cfg.transmittance_min {
            break;
        }
        let w = alpha * t;
        for c in 0..3 {
            color[c] += w * s.color[c];
        }
        depth += w * s.depth;
        coc += w * s.coc_radius;
        t = next;
        visited = k as u32 + 1;
    }
    PixelResult { color, depth, coc, transmittance: t, visited }
}

pub(crate) fn blended_count(state: &ForwardState, tile: usize, x: usize, y: usize) -> usize {
    let px = pixel_center(x, y);
    let p = y * state.camera.width + x;
    let list = &state.tiles.lists[tile][..state.contributors[p] as usize];
    list.iter()
        .filter(|&&i| splat_alpha(&state.splats[i as usize], &px, &state.config).is_some())
        .count()
}
