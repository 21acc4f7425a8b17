//! EWA projection of 3D Gaussians to screen space, and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, Vector2, Vector3};

use crate::model::{rotation_matrix, CameraPose, Gaussian3D};

/// Screen-space dilation added to every projected covariance (pixels^2).
pub const LOW_PASS: f64 = 0.3;
pub const DEFAULT_NEAR: f64 = 0.01;
/// Footprint radius in standard deviations.
pub const CUTOFF_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    pub near: f64,
    pub low_pass: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { near: DEFAULT_NEAR, low_pass: LOW_PASS }
    }
}

/// A Gaussian after projection. `cov` already includes the low-pass term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2D {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub cam_point: Vector3<f64>,
    /// Cutoff radius in pixels; recomputed from the blurred covariance when
    /// a lens is applied.
    pub radius: f64,
    pub visible: bool,
}

/// Camera-space z of the Gaussian center.
pub fn depth_of(g: &Gaussian3D, cam: &CameraPose) -> f64 {
    cam.to_camera(&g.center).z
}

/// Jacobian of the perspective projection at camera-space point `p`.
pub fn ewa_jacobian(p: &Vector3<f64>, cam: &CameraPose) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz2,
    )
}

/// `CUTOFF_SIGMAS` times the largest standard deviation of `cov`.
pub fn cutoff_radius(cov: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    CUTOFF_SIGMAS * lambda.max(0.0).sqrt()
}

/// Whether the square `mean +- radius` overlaps the image.
pub fn overlaps_image(mean: &Vector2<f64>, radius: f64, cam: &CameraPose) -> bool {
    mean.x + radius >= 0.0
        && mean.x - radius <= cam.width as f64
        && mean.y + radius >= 0.0
        && mean.y - radius <= cam.height as f64
}

pub fn project_gaussian(g: &Gaussian3D, cam: &CameraPose, cfg: &ProjectionConfig) -> Projected2D {
    let cam_point = cam.to_camera(&g.center);
    let depth = cam_point.z;
    if !(depth > cfg.near) {
        return Projected2D {
            mean: Vector2::zeros(),
            cov: Matrix2::identity() * cfg.low_pass,
            depth,
            cam_point,
            radius: 0.0,
            visible: false,
        };
    }
    let mean = Vector2::new(
        cam.fx * cam_point.x / depth + cam.cx,
        cam.fy * cam_point.y / depth + cam.cy,
    );
    let rw = cam.rotation();
    let m = rotation_matrix(g.quaternion()) * Matrix3::from_diagonal(&g.scale);
    let cov_world = m * m.transpose();
    let cov_cam = rw * cov_world * rw.transpose();
    let j = ewa_jacobian(&cam_point, cam);
    let mut cov = j * cov_cam * j.transpose();
    // exact symmetry regardless of rounding in the triple product
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    cov[(0, 0)] += cfg.low_pass;
    cov[(1, 1)] += cfg.low_pass;
    let radius = cutoff_radius(&cov);
    Projected2D { mean, cov, depth, cam_point, radius, visible: overlaps_image(&mean, radius, cam) }
}

/// Gradient of a loss with respect to a Gaussian's center and world covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionGrad {
    pub center: Vector3<f64>,
    pub cov_world: Matrix3<f64>,
}

/// Adjoint of [`project_gaussian`].
///
/// `d_mean`, `d_cov` (gradient w.r.t. the full 2x2 matrix, treated
/// entry-wise) and `d_cam_point` (any direct dependence on the camera-space
/// point, e.g. through depth) are upstream gradients.
pub fn project_backward(
    g: &Gaussian3D,
    cam: &CameraPose,
    proj: &Projected2D,
    d_mean: Vector2<f64>,
    d_cov: Matrix2<f64>,
    d_cam_point: Vector3<f64>,
) -> ProjectionGrad {
    let p = proj.cam_point;
    let (x, y, z) = (p.x, p.y, p.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    let rw = cam.rotation();
    let m = rotation_matrix(g.quaternion()) * Matrix3::from_diagonal(&g.scale);
    let cov_cam = rw * (m * m.transpose()) * rw.transpose();
    let j = ewa_jacobian(&p, cam);

    // cov2 = J C J^T  (the low-pass term is constant)
    let d_cov_cam = j.transpose() * d_cov * j;
    let d_j = d_cov * j * cov_cam.transpose() + d_cov.transpose() * j * cov_cam;

    let mut d_p = d_cam_point;
    // mean = (fx x/z + cx, fy y/z + cy)
    d_p.x += d_mean.x * cam.fx * iz;
    d_p.y += d_mean.y * cam.fy * iz;
    d_p.z += -d_mean.x * cam.fx * x * iz2 - d_mean.y * cam.fy * y * iz2;
    // J entries: (0,0)=fx/z (0,2)=-fx x/z^2 (1,1)=fy/z (1,2)=-fy y/z^2
    d_p.x += -d_j[(0, 2)] * cam.fx * iz2;
    d_p.y += -d_j[(1, 2)] * cam.fy * iz2;
    d_p.z += -d_j[(0, 0)] * cam.fx * iz2
        + d_j[(0, 2)] * 2.0 * cam.fx * x * iz3
        - d_j[(1, 1)] * cam.fy * iz2
        + d_j[(1, 2)] * 2.0 * cam.fy * y * iz3;

    ProjectionGrad {
        center: rw.transpose() * d_p,
        cov_world: rw.transpose() * d_cov_cam * rw,
    }
}

/// Adjoint of `covariance_from` w.r.t. the raw (unnormalized) quaternion
/// `(w, x, y, z)` and the scale.
pub fn covariance_backward(
    q: Quaternion<f64>,
    scale: &Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> ([f64; 4], Vector3<f64>) {
    let r = rotation_matrix(q);
    let m = r * Matrix3::from_diagonal(scale);
    let d_m = (d_cov + d_cov.transpose()) * m;
    let mut d_s = Vector3::zeros();
    for c in 0..3 {
        d_s[c] = d_m.column(c).dot(&r.column(c));
    }
    let d_r = d_m * Matrix3::from_diagonal(scale);
    (rotation_backward(q, &d_r), d_s)
}

/// Adjoint of [`rotation_matrix`], including the normalization.
pub fn rotation_backward(q: Quaternion<f64>, g: &Matrix3<f64>) -> [f64; 4] {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let unit = [w, x, y, z];
    let dq = [dw, dx, dy, dz];
    let radial: f64 = unit.iter().zip(&dq).map(|(a, b)| a * b).sum();
    std::array::from_fn(|i| (dq[i] - unit[i] * radial) / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> CameraPose {
        CameraPose::centered(64, 48, 50.0)
    }

    #[test]
    fn on_axis_isotropic() {
        let sigma = 0.1;
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 2.0), sigma, 0.8, [0.5; 3]);
        let cam = camera();
        let p = project_gaussian(&g, &cam, &ProjectionConfig::default());
        assert!(p.visible);
        assert_eq!(p.mean, Vector2::new(cam.cx, cam.cy));
        // J = diag(F/z, F/z) on the image rows for an on-axis point
        let expected = (cam.fx * sigma / 2.0).powi(2) + LOW_PASS;
        assert_relative_eq!(p.cov, Matrix2::identity() * expected, epsilon = 1e-12);
        assert_relative_eq!(p.radius, 3.0 * expected.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_invisible() {
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.8, [0.5; 3]);
        assert!(!project_gaussian(&g, &camera(), &ProjectionConfig::default()).visible);
        let near = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 0.005), 0.1, 0.8, [0.5; 3]);
        assert!(!project_gaussian(&near, &camera(), &ProjectionConfig::default()).visible);
    }

    #[test]
    fn rigid_translation_invariance() {
        let eye = Vector3::new(0.3, -0.2, -1.0);
        let target = Vector3::new(0.0, 0.1, 3.0);
        let up = Vector3::new(0.0, -1.0, 0.0);
        let cam_a = CameraPose::look_at(eye, target, up, 64, 48, 50.0);
        let offset = Vector3::new(5.0, -7.0, 2.5);
        let cam_b = CameraPose::look_at(eye + offset, target + offset, up, 64, 48, 50.0);
        let mut g = Gaussian3D::isotropic(Vector3::new(0.2, 0.1, 3.0), 0.1, 0.8, [0.5; 3]);
        g.scale = Vector3::new(0.1, 0.3, 0.05);
        let uq = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        g.rotation = [uq.w, uq.i, uq.j, uq.k];
        let mut h = g;
        h.center += offset;
        let a = project_gaussian(&g, &cam_a, &ProjectionConfig::default());
        let b = project_gaussian(&h, &cam_b, &ProjectionConfig::default());
        assert_relative_eq!(a.mean, b.mean, epsilon = 1e-9);
        assert_relative_eq!(a.cov, b.cov, epsilon = 1e-9);
        assert_relative_eq!(a.depth, b.depth, epsilon = 1e-12);
    }

    #[test]
    fn depth_examples() {
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 5.0), 0.1, 0.8, [0.5; 3]);
        assert_eq!(depth_of(&g, &camera()), 5.0);
        let mut cam = camera();
        cam.view[(2, 3)] = -1.0;
        assert_eq!(depth_of(&g, &cam), 4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let rot = UnitQuaternion::from_euler_angles(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            let mut view = Matrix4::identity();
            view.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.to_rotation_matrix().matrix());
            for i in 0..3 {
                view[(i, 3)] = rng.random_range(-3.0..3.0);
            }
            let cam = CameraPose { view, ..camera() };
            let c = Vector3::new(rng.random(), rng.random(), rng.random());
            let g = Gaussian3D::isotropic(c, 0.1, 0.8, [0.5; 3]);
            let homo = view * c.push(1.0);
            assert_relative_eq!(depth_of(&g, &cam), homo.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn cutoff_uses_largest_eigenvalue() {
        let c = Matrix2::new(4.0, 1.0, 1.0, 2.0);
        let lmax = c.symmetric_eigen().eigenvalues.max();
        assert_relative_eq!(cutoff_radius(&c), 3.0 * lmax.sqrt(), epsilon = 1e-12);
    }

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian3D {
        let uq = UnitQuaternion::from_euler_angles(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let mut g = Gaussian3D::isotropic(
            Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(2.0..4.0)),
            0.1,
            0.5,
            [0.5; 3],
        );
        g.scale = Vector3::new(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
        g.rotation = [uq.w * 1.1, uq.i * 1.1, uq.j * 1.1, uq.k * 1.1];
        g
    }

    /// Scalar probe `L = <A, mean> + <B, cov>` and its finite differences.
    #[test]
    fn projection_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = CameraPose::look_at(
            Vector3::new(0.2, 0.1, -0.5),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(0.0, -1.0, 0.0),
            64,
            48,
            50.0,
        );
        let cfg = ProjectionConfig::default();
        for _ in 0..10 {
            let g = random_gaussian(&mut rng);
            let a = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = Matrix2::new(rng.random(), rng.random(), rng.random(), rng.random());
            let dz: f64 = rng.random_range(-1.0..1.0);
            let loss = |g: &Gaussian3D| {
                let p = project_gaussian(g, &cam, &cfg);
                a.dot(&p.mean) + b.component_mul(&p.cov).sum() + dz * p.depth
            };
            let p = project_gaussian(&g, &cam, &cfg);
            let grad = project_backward(&g, &cam, &p, a, b, Vector3::new(0.0, 0.0, dz));
            let (dq, ds) = covariance_backward(g.quaternion(), &g.scale, &grad.cov_world);
            let h = 1e-6;
            for i in 0..3 {
                let mut gp = g;
                let mut gm = g;
                gp.center[i] += h;
                gm.center[i] -= h;
                let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
                assert_relative_eq!(grad.center[i], fd, max_relative = 1e-6, epsilon = 1e-8);
                let mut gp = g;
                let mut gm = g;
                gp.scale[i] += h;
                gm.scale[i] -= h;
                let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
                assert_relative_eq!(ds[i], fd, max_relative = 1e-6, epsilon = 1e-8);
            }
            for i in 0..4 {
                let mut gp = g;
                let mut gm = g;
                gp.rotation[i] += h;
                gm.rotation[i] -= h;
                let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
                assert_relative_eq!(dq[i], fd, max_relative = 1e-6, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn low_pass_never_shrinks_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = camera();
        for _ in 0..50 {
            let g = random_gaussian(&mut rng);
            let with = project_gaussian(&g, &cam, &ProjectionConfig::default());
            let without = project_gaussian(&g, &cam, &ProjectionConfig { low_pass: 0.0, ..Default::default() });
            let ew = with.cov.symmetric_eigen().eigenvalues;
            let eo = without.cov.symmetric_eigen().eigenvalues;
            assert!(ew.min() >= eo.min() - 1e-12 && ew.max() >= eo.max() - 1e-12);
            assert!((with.cov[(0, 1)] - with.cov[(1, 0)]).abs() <= 1e-12);
        }
    }
}
