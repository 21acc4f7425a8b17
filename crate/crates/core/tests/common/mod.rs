//! Oracles shared by the integration tests: an untiled per-pixel renderer,
//! finite-difference helpers, random scenes and the disk-fit objective.
#![allow(dead_code)]

use std::f64::consts::PI;

use dofsplat::model::{SH_C0, SH_C1};
use dofsplat::raster::{render_with, Defocus, RasterConfig, RenderOutput, Upstream};
use dofsplat::{CameraPose, Gaussian3D, Image, LensParams, Scene};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_lens(rng: &mut impl Rng) -> LensParams {
    LensParams::new(rng.random_range(1.5..6.0), rng.random_range(2.0..20.0))
}

fn random_unit_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
    q.map(|v| v / n)
}

/// `n` Gaussians inside the view frustum of `cam`, depths in `[1.5, 6]`,
/// footprints of a few pixels.
pub fn random_scene(rng: &mut impl Rng, n: usize, cam: &CameraPose, sh_degree: u8) -> Scene {
    let gaussians = (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(1.5..6.0);
            let u = rng.random_range(0.15..0.85) * cam.width as f64;
            let v = rng.random_range(0.15..0.85) * cam.height as f64;
            let p_cam = Vector3::new((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z);
            let rot = cam.rotation();
            let t = cam.translation();
            let center = rot.transpose() * (p_cam - t);
            let px = z / cam.fx;
            let mut sh = [[0.0; 3]; 4];
            for c in 0..3 {
                sh[0][c] = rng.random_range(-1.2..1.2);
                if sh_degree >= 1 {
                    for s in sh.iter_mut().skip(1) {
                        s[c] = rng.random_range(-0.4..0.4);
                    }
                }
            }
            Gaussian3D {
                center,
                rotation: random_unit_quaternion(rng),
                scale: Vector3::from_fn(|_, _| rng.random_range(0.6..2.5) * px),
                opacity: rng.random_range(0.2..0.85),
                sh,
            }
        })
        .collect();
    Scene { gaussians, sh_degree }
}

/// Per-pixel maps of the oracle renderer.
#[derive(Debug, Clone)]
pub struct Maps {
    pub color: Image,
    pub depth: Image,
    pub coc: Image,
    pub alpha: Image,
}

struct OracleSplat {
    mean: Vector2<f64>,
    inv: Matrix2<f64>,
    amplitude: f64,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    coc: f64,
}

fn quat_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

fn oracle_splat(g: &Gaussian3D, sh_degree: u8, cam: &CameraPose, lens: Option<LensParams>, cfg: &RasterConfig) -> Option<OracleSplat> {
    let h = cam.view * Vector4::new(g.center.x, g.center.y, g.center.z, 1.0);
    let p = Vector3::new(h.x, h.y, h.z);
    if !(p.z > cfg.near) {
        return None;
    }
    let w = cam.view.fixed_view::<3, 3>(0, 0).into_owned();
    let rs = quat_matrix(g.rotation) * Matrix3::from_diagonal(&g.scale);
    let j = Matrix2x3::new(cam.fx / p.z, 0.0, -cam.fx * p.x / (p.z * p.z), 0.0, cam.fy / p.z, -cam.fy * p.y / (p.z * p.z));
    let t = j * w * rs;
    let mut cov = t * t.transpose() + Matrix2::identity() * cfg.low_pass;
    let mut amplitude = 1.0;
    let mut coc = 0.0;
    if let Some(l) = lens {
        coc = l.aperture / 2.0 * (1.0 / p.z - 1.0 / l.focal_distance).abs();
        let a = coc * coc / (2.0 * 4f64.ln());
        let blurred = cov + Matrix2::identity() * a;
        amplitude = (cov.determinant() / blurred.determinant()).sqrt();
        cov = blurred;
    }
    let eye = -w.transpose() * Vector3::new(cam.view[(0, 3)], cam.view[(1, 3)], cam.view[(2, 3)]);
    let dir = (g.center - eye).normalize();
    let color = std::array::from_fn(|c| {
        let mut v = SH_C0 * g.sh[0][c] + 0.5;
        if sh_degree >= 1 {
            v += SH_C1 * (-dir.y * g.sh[1][c] + dir.z * g.sh[2][c] - dir.x * g.sh[3][c]);
        }
        v.max(0.0)
    });
    Some(OracleSplat {
        mean: Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy),
        inv: cov.try_inverse()?,
        amplitude,
        opacity: g.opacity,
        color,
        depth: p.z,
        coc,
    })
}

/// Untiled renderer: every pixel walks every Gaussian in depth order.
pub fn brute_force(scene: &Scene, cam: &CameraPose, lens: Option<LensParams>, cfg: &RasterConfig) -> Maps {
    let mut splats: Vec<OracleSplat> =
        scene.gaussians.iter().filter_map(|g| oracle_splat(g, scene.sh_degree, cam, lens, cfg)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let (w, h) = (cam.width, cam.height);
    let mut maps = Maps {
        color: Image::new(w, h, 3),
        depth: Image::new(w, h, 1),
        coc: Image::new(w, h, 1),
        alpha: Image::new(w, h, 1),
    };
    for y in 0..h {
        for x in 0..w {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut acc = [0.0; 5];
            for s in &splats {
                let d = px - s.mean;
                let power = -0.5 * (d.transpose() * s.inv * d)[(0, 0)];
                if power > 0.0 || power < -4.5 {
                    continue;
                }
                let alpha = (s.opacity * s.amplitude * power.exp()).min(cfg.alpha_max);
                if alpha < cfg.alpha_min {
                    continue;
                }
                if t * (1.0 - alpha) < cfg.transmittance_min {
                    break;
                }
                let wgt = alpha * t;
                for c in 0..3 {
                    acc[c] += wgt * s.color[c];
                }
                acc[3] += wgt * s.depth;
                acc[4] += wgt * s.coc;
                t *= 1.0 - alpha;
            }
            for c in 0..3 {
                *maps.color.at_mut(x, y, c) = acc[c] + t * cfg.background[c];
            }
            *maps.depth.at_mut(x, y, 0) = acc[3];
            *maps.coc.at_mut(x, y, 0) = acc[4];
            *maps.alpha.at_mut(x, y, 0) = 1.0 - t;
        }
    }
    maps
}

pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor: passes when either is small.
pub fn grad_ok(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs || diff <= rel * analytic.abs().max(numeric.abs())
}

/// Random per-map weights defining a scalar objective over a render.
#[derive(Debug, Clone)]
pub struct Probe {
    pub color: Image,
    pub depth: Image,
    pub coc: Image,
    pub alpha: Image,
}

impl Probe {
    pub fn random(rng: &mut impl Rng, w: usize, h: usize) -> Self {
        let mut img = |c| {
            let n = w * h * c;
            Image::from_vec(w, h, c, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        Self { color: img(3), depth: img(1), coc: img(1), alpha: img(1) }
    }

    pub fn value(&self, out: &RenderOutput) -> f64 {
        let dot = |a: &Image, b: &Image| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
        dot(&self.color, &out.color) + dot(&self.depth, &out.depth) + dot(&self.coc, &out.coc) + dot(&self.alpha, &out.alpha)
    }

    pub fn upstream(&self) -> Upstream {
        Upstream {
            color: Some(self.color.clone()),
            depth: Some(self.depth.clone()),
            coc: Some(self.coc.clone()),
            alpha: Some(self.alpha.clone()),
        }
    }
}

/// Camera-space depths of all centers, for the frozen-depth forward.
pub fn center_depths(scene: &Scene, cam: &CameraPose) -> Vec<f64> {
    scene.gaussians.iter().map(|g| cam.to_camera(&g.center).z).collect()
}

/// Forward used as the finite-difference target: with `frozen` depths the
/// CoC ignores center motion along z, matching a detached depth path.
pub fn fd_render(scene: &Scene, cam: &CameraPose, lens: LensParams, frozen: Option<&[f64]>, cfg: &RasterConfig) -> RenderOutput {
    render_with(scene, cam, Defocus::Lens { lens, coc_depths: frozen }, cfg)
}

/// Squared L2 distance over the plane between the uniform disk of radius
/// `r` and a normalized isotropic Gaussian of variance `a`, integrated
/// radially with composite Simpson on each side of the rim.
pub fn disk_fit_residual(r: f64, a: f64) -> f64 {
    let disk = 1.0 / (PI * r * r);
    let gauss = |rho: f64| (-(rho * rho) / (2.0 * a)).exp() / (2.0 * PI * a);
    let simpson = |lo: f64, hi: f64, g: &dyn Fn(f64) -> f64| {
        let n = 2000;
        let h = (hi - lo) / n as f64;
        let mut acc = g(lo) + g(hi);
        for i in 1..n {
            acc += g(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    let inside = simpson(0.0, r, &|rho| (disk - gauss(rho)).powi(2) * rho);
    let outside = simpson(r, r + 12.0 * a.sqrt(), &|rho| gauss(rho).powi(2) * rho);
    2.0 * PI * (inside + outside)
}

/// Grid minimizer of [`disk_fit_residual`] at resolution `1e-4 R^2`.
pub fn grid_fit_variance(r: f64) -> f64 {
    let r2 = r * r;
    let argmin = |grid: &mut dyn Iterator<Item = f64>| {
        grid.map(|a| (a, disk_fit_residual(r, a))).min_by(|x, y| x.1.total_cmp(&y.1)).unwrap().0
    };
    let coarse = argmin(&mut (1..=1000).map(|i| i as f64 * 1e-2 * r2));
    argmin(&mut (-200..=200).map(|i| coarse + i as f64 * 1e-4 * r2).filter(|a| *a > 0.0))
}

/// Outcome of a gradient check.
#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
}

/// Compares `render_backward` against central differences for every
/// parameter of every Gaussian and both lens parameters. With
/// `cfg.coc_z_grad == false` the CoC depths are frozen in the target.
pub fn check_render_gradients(scene: &Scene, cam: &CameraPose, lens: LensParams, cfg: &RasterConfig, probe: &Probe, h: f64) -> GradReport {
    use dofsplat::raster::render_backward;
    let depths = center_depths(scene, cam);
    let frozen = (!cfg.coc_z_grad).then_some(depths.as_slice());
    let out = fd_render(scene, cam, lens, None, cfg);
    let grads = render_backward(scene, cam, &out, &probe.upstream()).expect("backward");
    let mut report = GradReport::default();
    let mut check = |name: String, analytic: f64, numeric: f64| {
        report.checked += 1;
        if !grad_ok(analytic, numeric, 1e-3, 1e-6) {
            report.failures.push(format!("{name}: analytic {analytic:.9e} vs numeric {numeric:.9e}"));
        }
    };
    let eval_scene = |s: &Scene| probe.value(&fd_render(s, cam, lens, frozen, cfg));
    for (i, g) in grads.gaussians.iter().enumerate() {
        let perturb = |edit: &dyn Fn(&mut Gaussian3D, f64)| {
            central_diff(
                |d| {
                    let mut s = scene.clone();
                    edit(&mut s.gaussians[i], d);
                    eval_scene(&s)
                },
                0.0,
                h,
            )
        };
        for k in 0..3 {
            check(format!("g{i}.center[{k}]"), g.center[k], perturb(&|g, d| g.center[k] += d));
            check(format!("g{i}.scale[{k}]"), g.scale[k], perturb(&|g, d| g.scale[k] += d));
        }
        for k in 0..4 {
            check(format!("g{i}.rotation[{k}]"), g.rotation[k], perturb(&|g, d| g.rotation[k] += d));
        }
        check(format!("g{i}.opacity"), g.opacity, perturb(&|g, d| g.opacity += d));
        let coeffs = if scene.sh_degree >= 1 { 4 } else { 1 };
        for j in 0..coeffs {
            for c in 0..3 {
                check(format!("g{i}.sh[{j}][{c}]"), g.sh[j][c], perturb(&|g, d| g.sh[j][c] += d));
            }
        }
    }
    let lens_fd = |edit: &dyn Fn(&mut LensParams, f64)| {
        central_diff(
            |d| {
                let mut l = lens;
                edit(&mut l, d);
                probe.value(&fd_render(scene, cam, l, frozen, cfg))
            },
            0.0,
            h,
        )
    };
    check("lens.f".into(), grads.lens.focal_distance, lens_fd(&|l, d| l.focal_distance += d));
    check("lens.Q".into(), grads.lens.aperture, lens_fd(&|l, d| l.aperture += d));
    report
}
