//! Heuristic lens initialization from the initial point cloud.
//!
//! Per view, the focal distance is placed at the median diopter of the
//! visible points, and the aperture is sized so that points between the 10th
//! and 90th depth percentiles get a CoC radius of at most `tau` pixels.

use log::warn;

use crate::error::{Error, Result};
use crate::model::{CameraPose, LensParams, Scene, TrainView};

pub const DEFAULT_TAU: f64 = 15.0;

/// Camera-space depths of all points in front of the camera.
pub fn view_depths(scene: &Scene, cam: &CameraPose) -> Vec<f64> {
    scene
        .gaussians
        .iter()
        .map(|g| cam.to_camera(&g.center).z)
        .filter(|z| *z > 0.0 && z.is_finite())
        .collect()
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let v = sorted(values);
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// Nearest-rank percentile (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    let v = sorted(values);
    if v.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// Focal distance whose diopter is the median point diopter.
pub fn focal_from_depths(depths: &[f64]) -> Result<f64> {
    let diopters: Vec<f64> = depths.iter().filter(|z| **z > 0.0).map(|z| 1.0 / z).collect();
    let m = median(&diopters).ok_or_else(|| Error::Domain("no points in front of the camera".into()))?;
    Ok(1.0 / m)
}

/// Aperture from the depth spread: `tau / |1/p10 - 1/p90|`.
///
/// Returns `(Q, degenerate)`; a flat depth distribution yields `Q = 0`.
pub fn aperture_from_depths(depths: &[f64], tau: f64) -> Result<(f64, bool)> {
    let near = percentile(depths, 10.0).ok_or_else(|| Error::Domain("no depths".into()))?;
    let far = percentile(depths, 90.0).expect("non-empty");
    let spread = (1.0 / near - 1.0 / far).abs();
    if spread == 0.0 || !spread.is_finite() {
        return Ok((0.0, true));
    }
    Ok((tau / spread, false))
}

/// Initial focal distance per camera.
pub fn init_focal(scene: &Scene, cams: &[CameraPose]) -> Result<Vec<f64>> {
    if scene.is_empty() {
        return Err(Error::Domain("cannot initialize lenses from an empty scene".into()));
    }
    cams.iter()
        .enumerate()
        .map(|(m, cam)| {
            focal_from_depths(&view_depths(scene, cam))
                .map_err(|_| Error::Domain(format!("view {m}: no points in front of the camera")))
        })
        .collect()
}

/// Initial aperture per camera; flat views fall back to 0 with a warning.
pub fn init_aperture(scene: &Scene, cams: &[CameraPose], tau: f64) -> Result<Vec<f64>> {
    if scene.is_empty() {
        return Err(Error::Domain("cannot initialize lenses from an empty scene".into()));
    }
    cams.iter()
        .enumerate()
        .map(|(m, cam)| {
            let (q, degenerate) = aperture_from_depths(&view_depths(scene, cam), tau)
                .map_err(|_| Error::Domain(format!("view {m}: no points in front of the camera")))?;
            if degenerate {
                warn!("view {m}: 10th and 90th depth percentiles coincide, aperture set to 0");
            }
            Ok(q)
        })
        .collect()
}

/// Overwrites every view's lens with the heuristic initialization.
pub fn initialize_views(scene: &Scene, views: &mut [TrainView], tau: f64) -> Result<()> {
    let cams: Vec<CameraPose> = views.iter().map(|v| v.camera).collect();
    let focal = init_focal(scene, &cams)?;
    let aperture = init_aperture(scene, &cams, tau)?;
    for ((v, f), q) in views.iter_mut().zip(focal).zip(aperture) {
        v.lens = LensParams::new(f, q);
    }
    Ok(())
}
