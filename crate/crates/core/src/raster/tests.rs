use nalgebra::Vector3;

use super::*;
use crate::model::{Gaussian3D, Scene};

fn cam() -> CameraPose {
    CameraPose::centered(32, 32, 32.0)
}

#[test]
fn empty_scene_is_background() {
    let cfg = RasterConfig { background: [0.2, 0.3, 0.4], ..Default::default() };
    let out = render(&Scene::default(), &cam(), &LensParams::new(3.0, 20.0), &cfg);
    for p in 0..out.color.pixels() {
        assert_eq!(&out.color.data[p * 3..p * 3 + 3], &[0.2, 0.3, 0.4]);
        assert_eq!(out.depth.data[p], 0.0);
        assert_eq!(out.coc.data[p], 0.0);
        assert_eq!(out.alpha.data[p], 0.0);
    }
}

#[test]
fn focal_plane_single_gaussian() {
    let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 5.0), 0.3, 0.999, [1.0, 0.5, 0.25]);
    let scene = Scene::new(vec![g]);
    let out = render(&scene, &cam(), &LensParams::new(5.0, 100.0), &RasterConfig::default());
    let p = 16 * 32 + 16;
    let a = out.alpha.data[p];
    assert!(a > 0.9);
    assert!((out.depth.data[p] - 5.0 * a).abs() < 1e-12);
    assert!(out.coc.data[p].abs() < 1e-12);
}

#[test]
fn out_of_focus_single_gaussian_coc() {
    let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.3, 0.9, [1.0, 0.5, 0.25]);
    let scene = Scene::new(vec![g]);
    let out = render(&scene, &cam(), &LensParams::new(4.0, 100.0), &RasterConfig::default());
    let norm = out.normalized_coc();
    let p = 16 * 32 + 16;
    assert!(out.alpha.data[p] > 0.0);
    assert!((norm.data[p] - 12.5).abs() < 1e-9);
}

#[test]
fn all_in_focus_matches_zero_aperture_and_ignores_f() {
    let scene = Scene::new(vec![
        Gaussian3D::isotropic(Vector3::new(0.1, 0.0, 3.0), 0.2, 0.7, [0.9, 0.1, 0.3]),
        Gaussian3D::isotropic(Vector3::new(-0.2, 0.1, 5.0), 0.4, 0.8, [0.2, 0.8, 0.3]),
    ]);
    let cfg = RasterConfig::default();
    let aif = render_all_in_focus(&scene, &cam(), &cfg);
    let q0 = render(&scene, &cam(), &LensParams::new(7.0, 0.0), &cfg);
    let q0b = render(&scene, &cam(), &LensParams::new(2.0, 0.0), &cfg);
    let plain = render_plain(&scene, &cam(), &cfg);
    assert_eq!(aif.color, q0.color);
    assert_eq!(aif.color, q0b.color);
    assert_eq!(aif.color, plain.color);
    assert!(aif.coc.data.iter().all(|v| *v == 0.0));
}

#[test]
fn backward_requires_forward_state() {
    let scene = Scene::new(vec![Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.2, 0.7, [0.5; 3])]);
    let out = render(&scene, &cam(), &LensParams::new(3.0, 10.0), &RasterConfig::default()).into_maps();
    let up = Upstream::color(Image::filled(32, 32, 3, 1.0));
    assert!(matches!(render_backward(&scene, &cam(), &out, &up), Err(crate::Error::State(_))));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let scene = Scene::new(vec![
        Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.2, 0.7, [0.5; 3]),
        Gaussian3D::isotropic(Vector3::new(0.1, 0.1, 4.0), 0.3, 0.6, [0.2; 3]),
    ]);
    let lens = LensParams::new(3.5, 30.0);
    let out = render(&scene, &cam(), &lens, &RasterConfig::default());
    let up = Upstream {
        color: Some(Image::new(32, 32, 3)),
        depth: Some(Image::new(32, 32, 1)),
        coc: Some(Image::new(32, 32, 1)),
        alpha: Some(Image::new(32, 32, 1)),
    };
    let grads = render_backward(&scene, &cam(), &out, &up).unwrap();
    assert_eq!(grads, GradientSet::zeros(2));
}

#[test]
fn upstream_shape_checked() {
    let scene = Scene::new(vec![Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.2, 0.7, [0.5; 3])]);
    let out = render(&scene, &cam(), &LensParams::new(3.0, 10.0), &RasterConfig::default());
    let up = Upstream::color(Image::new(16, 32, 3));
    assert!(matches!(render_backward(&scene, &cam(), &out, &up), Err(crate::Error::Shape(_))));
}

#[test]
fn transmittance_monotone_and_alpha_bounded() {
    let scene = Scene::new(
        (0..20)
            .map(|i| {
                let t = i as f64 * 0.3;
                Gaussian3D::isotropic(Vector3::new(t.sin() * 0.3, t.cos() * 0.3, 2.0 + t), 0.3, 0.8, [0.5; 3])
            })
            .collect(),
    );
    let out = render(&scene, &cam(), &LensParams::new(3.0, 20.0), &RasterConfig::default());
    assert!(out.alpha.data.iter().all(|a| (0.0..=1.0).contains(a)));
    let counts = out.contributor_counts().unwrap();
    assert!(counts.iter().any(|c| *c > 1));
}
