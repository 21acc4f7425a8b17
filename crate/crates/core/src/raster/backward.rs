use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use super::forward::{pixel_center, splat_alpha};
use super::{ForwardState, RenderOutput};
use crate::dof;
use crate::error::{Error, Result};
use crate::model::{CameraPose, Gaussian3D, Image, Scene, SH_C0, SH_C1, SH_COEFFS};
use crate::projection::{covariance_backward, project_backward};

/// Loss gradients with respect to each rendered map. Missing maps count as zero.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub color: Option<Image>,
    pub depth: Option<Image>,
    pub coc: Option<Image>,
    pub alpha: Option<Image>,
}

impl Upstream {
    pub fn color(color: Image) -> Self {
        Self { color: Some(color), ..Default::default() }
    }
}

/// Gradient for one Gaussian, in the same physical units as [`Gaussian3D`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub center: Vector3<f64>,
    /// With respect to the raw `(w, x, y, z)` quaternion.
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub sh: [[f64; 3]; SH_COEFFS],
}

impl GaussianGrad {
    pub fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, other: &GaussianGrad) {
        self.center += other.center;
        self.scale += other.scale;
        self.opacity += other.opacity;
        for i in 0..4 {
            self.rotation[i] += other.rotation[i];
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LensGrad {
    pub focal_distance: f64,
    pub aperture: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    pub gaussians: Vec<GaussianGrad>,
    pub lens: LensGrad,
}

impl GradientSet {
    pub fn zeros(n: usize) -> Self {
        Self { gaussians: vec![GaussianGrad::default(); n], lens: LensGrad::default() }
    }

    pub fn is_finite(&self) -> bool {
        self.lens.focal_distance.is_finite()
            && self.lens.aperture.is_finite()
            && self.gaussians.iter().all(GaussianGrad::is_finite)
    }

    pub fn accumulate(&mut self, other: &GradientSet) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            a.accumulate(b);
        }
        self.lens.focal_distance += other.lens.focal_distance;
        self.lens.aperture += other.lens.aperture;
    }
}

/// Screen-space gradient accumulated over pixels for one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatAccum {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    amplitude: f64,
    color: [f64; 3],
    depth: f64,
    coc: f64,
}

impl SplatAccum {
    fn add(&mut self, o: &SplatAccum) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.amplitude += o.amplitude;
        self.depth += o.depth;
        self.coc += o.coc;
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
    }
}

fn check_map(map: &Option<Image>, w: usize, h: usize, channels: usize, name: &str) -> Result<()> {
    match map {
        Some(m) if m.width != w || m.height != h || m.channels != channels => Err(Error::Shape(format!(
            "upstream {name} is {}x{}x{}, render is {w}x{h}x{channels}",
            m.width, m.height, m.channels
        ))),
        _ => Ok(()),
    }
}

/// Backpropagates `upstream` through the render that produced `output`.
pub fn render_backward(
    scene: &Scene,
    cam: &CameraPose,
    output: &RenderOutput,
    upstream: &Upstream,
) -> Result<GradientSet> {
    let state = output
        .state
        .as_ref()
        .ok_or_else(|| Error::State("render_backward needs forward intermediates".into()))?;
    if state.splats.len() != scene.len() {
        return Err(Error::State(format!(
            "forward state has {} splats, scene has {} Gaussians",
            state.splats.len(),
            scene.len()
        )));
    }
    if state.camera != *cam {
        return Err(Error::State("camera differs from the forward pass".into()));
    }
    let (w, h) = (cam.width, cam.height);
    check_map(&upstream.color, w, h, 3, "color")?;
    check_map(&upstream.depth, w, h, 1, "depth")?;
    check_map(&upstream.coc, w, h, 1, "coc")?;
    check_map(&upstream.alpha, w, h, 1, "alpha")?;

    let tiles = &state.tiles;
    let per_tile: Vec<Vec<SplatAccum>> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|t| tile_backward(state, upstream, t))
        .collect();

    // fixed tile order keeps the reduction independent of thread count
    let mut accum = vec![SplatAccum::default(); scene.len()];
    for (t, local) in per_tile.iter().enumerate() {
        for (k, &idx) in tiles.lists[t].iter().enumerate() {
            accum[idx as usize].add(&local[k]);
        }
    }

    let per_gauss: Vec<(GaussianGrad, f64, f64)> = scene
        .gaussians
        .par_iter()
        .zip(&state.splats)
        .zip(&accum)
        .map(|((g, s), a)| gaussian_backward(g, scene.sh_degree, cam, state, s, a))
        .collect();

    let mut out = GradientSet::zeros(scene.len());
    for (i, (g, df, dq)) in per_gauss.into_iter().enumerate() {
        out.gaussians[i] = g;
        out.lens.focal_distance += df;
        out.lens.aperture += dq;
    }
    Ok(out)
}

fn tile_backward(state: &ForwardState, up: &Upstream, t: usize) -> Vec<SplatAccum> {
    let cam = &state.camera;
    let cfg = &state.config;
    let (w, h) = (cam.width, cam.height);
    let list = &state.tiles.lists[t];
    let mut local = vec![SplatAccum::default(); list.len()];
    let (x0, x1, y0, y1) = state.tiles.tile_rect(t, w, h);
    for y in y0..y1 {
        for x in x0..x1 {
            let p = y * w + x;
            let g_color = up.color.as_ref().map_or([0.0; 3], |m| [m.data[p * 3], m.data[p * 3 + 1], m.data[p * 3 + 2]]);
            let g_depth = up.depth.as_ref().map_or(0.0, |m| m.data[p]);
            let g_coc = up.coc.as_ref().map_or(0.0, |m| m.data[p]);
            let g_alpha = up.alpha.as_ref().map_or(0.0, |m| m.data[p]);
            if g_color == [0.0; 3] && g_depth == 0.0 && g_coc == 0.0 && g_alpha == 0.0 {
                continue;
            }
            let px = pixel_center(x, y);
            let mut trans = state.final_transmittance[p];
            // loss contribution still to be attenuated by earlier contributors
            let bg: f64 = (0..3).map(|c| g_color[c] * cfg.background[c]).sum();
            let mut after = trans * (bg - g_alpha);
            let visited = state.contributors[p] as usize;
            for k in (0..visited).rev() {
                let s = &state.splats[list[k] as usize];
                let Some((alpha, gauss, clamped)) = splat_alpha(s, &px, cfg) else {
                    continue;
                };
                let one_minus = 1.0 - alpha;
                let t_i = trans / one_minus;
                let value = g_color[0] * s.color[0]
                    + g_color[1] * s.color[1]
                    + g_color[2] * s.color[2]
                    + g_depth * s.depth
                    + g_coc * s.coc_radius;
                let d_alpha = t_i * value - after / one_minus;
                after += t_i * alpha * value;
                trans = t_i;

                let acc = &mut local[k];
                let weight = t_i * alpha;
                for c in 0..3 {
                    acc.color[c] += weight * g_color[c];
                }
                acc.depth += weight * g_depth;
                acc.coc += weight * g_coc;
                if clamped {
                    continue;
                }
                acc.opacity += d_alpha * s.amplitude * gauss;
                acc.amplitude += d_alpha * s.opacity * gauss;
                let d_power = d_alpha * s.opacity * s.amplitude * gauss;
                let d = px - s.mean;
                acc.mean += d_power * (s.conic * d);
                acc.conic += d_power * -0.5 * (d * d.transpose());
            }
        }
    }
    local
}

/// Chains screen-space gradients of one splat back to its parameters.
/// Returns the Gaussian gradient plus its `(df, dQ)` contribution.
fn gaussian_backward(
    g: &Gaussian3D,
    sh_degree: u8,
    cam: &CameraPose,
    state: &ForwardState,
    s: &super::Splat,
    a: &SplatAccum,
) -> (GaussianGrad, f64, f64) {
    let mut out = GaussianGrad::default();
    if !s.visible {
        return (out, 0.0, 0.0);
    }
    // conic = cov''^-1
    let mut d_cov_blur = -(s.conic * a.conic * s.conic);
    let mut d_cov = Matrix2::zeros();
    let mut d_depth = a.depth;
    let (mut df, mut dq) = (0.0, 0.0);

    if let Some(lens) = state.lens {
        // amplitude = sqrt(det cov' / det cov'')
        let inv_proj = s.projected.cov.try_inverse().unwrap_or_else(Matrix2::zeros);
        d_cov += 0.5 * s.amplitude * a.amplitude * inv_proj;
        d_cov_blur -= 0.5 * s.amplitude * a.amplitude * s.conic;

        let d_var = d_cov_blur[(0, 0)] + d_cov_blur[(1, 1)];
        let (f, q, z) = (lens.focal_distance, lens.aperture, s.coc_depth);
        let r = s.coc_radius;
        df = d_var * dof::da_df(r, q, f, z) + a.coc * dof::dr_df(q, f, z);
        dq = d_var * dof::da_dq(r, f, z) + a.coc * dof::dr_dq(f, z);
        if state.config.coc_z_grad {
            d_depth += d_var * dof::da_dz(r, q, f, z) + a.coc * dof::dr_dz(q, f, z);
        }
    }
    d_cov += d_cov_blur;

    let pg = project_backward(g, cam, &s.projected, a.mean, d_cov, Vector3::new(0.0, 0.0, d_depth));
    let (d_rot, d_scale) = covariance_backward(g.quaternion(), &g.scale, &pg.cov_world);
    out.center = pg.center;
    out.rotation = d_rot;
    out.scale = d_scale;
    out.opacity = a.opacity;

    let d_color: [f64; 3] = std::array::from_fn(|c| if s.color_clamped[c] { 0.0 } else { a.color[c] });
    for c in 0..3 {
        out.sh[0][c] = SH_C0 * d_color[c];
    }
    if sh_degree >= 1 {
        let offset = g.center - cam.position();
        let n = offset.norm();
        let dir = offset / n;
        let mut d_dir = Vector3::zeros();
        for c in 0..3 {
            out.sh[1][c] = -SH_C1 * dir.y * d_color[c];
            out.sh[2][c] = SH_C1 * dir.z * d_color[c];
            out.sh[3][c] = -SH_C1 * dir.x * d_color[c];
            d_dir.x += -SH_C1 * g.sh[3][c] * d_color[c];
            d_dir.y += -SH_C1 * g.sh[1][c] * d_color[c];
            d_dir.z += SH_C1 * g.sh[2][c] * d_color[c];
        }
        out.center += (d_dir - dir * dir.dot(&d_dir)) / n;
    }
    (out, df, dq)
}
