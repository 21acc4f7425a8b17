//! Thin-lens circle-of-confusion math and the Gaussian blur kernel fitted to it.
//!
//! The blur of a point at depth `z` is modelled as an isotropic Gaussian with
//! variance `a = R^2 / (2 ln 4)` where `R = Q/2 * |1/z - 1/f|` is the CoC
//! radius in pixels. Convolving a screen-space Gaussian with this kernel adds
//! `a` to both diagonal entries of its covariance.
//!
//! All derivatives are zero at `z == f`, where `|.|` has a kink and `R == 0`.

use nalgebra::Matrix2;

use crate::error::{Error, Result};

/// `2 ln 4`, the denominator of the kernel variance.
pub const TWO_LN4: f64 = 2.0 * std::f64::consts::LN_2 * 2.0;

/// CoC radius, blur variance and the blurred covariance for one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CocKernel {
    pub radius: f64,
    pub variance: f64,
    pub convolved: Matrix2<f64>,
}

impl CocKernel {
    pub fn new(projected: Matrix2<f64>, radius: f64) -> Self {
        let variance = kernel_variance(radius);
        Self { radius, variance, convolved: convolve_cov(projected, variance) }
    }
}

/// Full thin-lens CoC radius with lens focal length `lens_focal` and aperture
/// diameter `aperture_diameter`.
pub fn coc_radius_full(lens_focal: f64, aperture_diameter: f64, f: f64, z: f64) -> Result<f64> {
    if !(lens_focal > 0.0 && f > lens_focal) {
        return Err(Error::Domain(format!(
            "focal distance {f} must exceed lens focal length {lens_focal} > 0"
        )));
    }
    if !(z > 0.0) {
        return Err(Error::Domain(format!("depth {z} must be positive")));
    }
    if aperture_diameter < 0.0 {
        return Err(Error::Domain(format!("aperture {aperture_diameter} must be >= 0")));
    }
    Ok(0.5 * lens_focal * aperture_diameter * (z - f).abs() / (z * (f - lens_focal)))
}

/// Simplified CoC radius `Q/2 |1/z - 1/f|`.
pub fn coc_radius(q: f64, f: f64, z: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::Domain(format!("depth {z} must be positive")));
    }
    if !(f > 0.0) {
        return Err(Error::Domain(format!("focal distance {f} must be positive")));
    }
    if q < 0.0 {
        return Err(Error::Domain(format!("aperture parameter {q} must be >= 0")));
    }
    Ok(coc_radius_unchecked(q, f, z))
}

/// [`coc_radius`] without argument checks, for the hot path.
#[inline]
pub fn coc_radius_unchecked(q: f64, f: f64, z: f64) -> f64 {
    0.5 * q * (1.0 / z - 1.0 / f).abs()
}

#[inline]
pub fn kernel_variance(radius: f64) -> f64 {
    radius * radius / TWO_LN4
}

#[inline]
pub fn convolve_cov(cov: Matrix2<f64>, variance: f64) -> Matrix2<f64> {
    cov + Matrix2::identity() * variance
}

#[inline]
fn side(f: f64, z: f64) -> f64 {
    // sign of (1/z - 1/f): positive in front of the focal plane
    if z < f {
        1.0
    } else if z > f {
        -1.0
    } else {
        0.0
    }
}

/// `da/df`; negative behind the focal plane (`z > f`), positive in front.
pub fn da_df(radius: f64, q: f64, f: f64, z: f64) -> f64 {
    side(f, z) * radius * q / (TWO_LN4 * f * f)
}

/// `da/dQ = R / (2 ln 4) |1/z - 1/f|`.
pub fn da_dq(radius: f64, f: f64, z: f64) -> f64 {
    if z == f {
        return 0.0;
    }
    radius / TWO_LN4 * (1.0 / z - 1.0 / f).abs()
}

/// `da/dz`; negative in front of the focal plane (`z < f`), positive behind.
pub fn da_dz(radius: f64, q: f64, f: f64, z: f64) -> f64 {
    -side(f, z) * radius * q / (TWO_LN4 * z * z)
}

/// `dR/df`, used where the CoC radius itself is rendered.
pub fn dr_df(q: f64, f: f64, z: f64) -> f64 {
    side(f, z) * 0.5 * q / (f * f)
}

/// `dR/dQ`.
pub fn dr_dq(f: f64, z: f64) -> f64 {
    0.5 * (1.0 / z - 1.0 / f).abs()
}

/// `dR/dz`.
pub fn dr_dz(q: f64, f: f64, z: f64) -> f64 {
    -side(f, z) * 0.5 * q / (z * z)
}
