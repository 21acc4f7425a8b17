//! Reconstruction, detail, mask-correlation and mask-entropy losses.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Image;
use crate::ssim::ssim_with_grad;

/// Loss weights and variants (`loss.*` config keys).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dssim: f64,
    pub mk: f64,
    pub reg: f64,
    /// Squared instead of absolute pixel error in the reconstruction term.
    pub use_mse: bool,
    /// Adds `-(1-m) log(1-m)` to the mask regularizer.
    pub symmetric_reg: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dssim: 0.2, mk: 0.001, reg: 0.0001, use_mse: false, symmetric_reg: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.dssim, self.mk, self.reg].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// A scalar loss with its gradient with respect to the first argument.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Image,
}

/// Mean absolute error and its gradient (subgradient 0 at equality).
pub fn l1(a: &Image, b: &Image) -> Result<LossGrad> {
    a.ensure_same_shape(b)?;
    let n = a.data.len() as f64;
    let mut grad = Image::new(a.width, a.height, a.channels);
    let mut value = 0.0;
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        let d = x - y;
        value += d.abs();
        grad.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossGrad { value: value / n, grad })
}

pub fn mse(a: &Image, b: &Image) -> Result<LossGrad> {
    a.ensure_same_shape(b)?;
    let n = a.data.len() as f64;
    let mut grad = Image::new(a.width, a.height, a.channels);
    let mut value = 0.0;
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        let d = x - y;
        value += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    Ok(LossGrad { value: value / n, grad })
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?.value;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Pixel error plus `dssim * (1 - SSIM)`.
pub fn l_rec(rendered: &Image, reference: &Image, weights: &LossWeights) -> Result<LossGrad> {
    let mut pixel = if weights.use_mse { mse(rendered, reference)? } else { l1(rendered, reference)? };
    if weights.dssim != 0.0 {
        let (s, g) = ssim_with_grad(rendered, reference)?;
        pixel.value += weights.dssim * (1.0 - s);
        for (a, b) in pixel.grad.data.iter_mut().zip(&g.data) {
            *a -= weights.dssim * b;
        }
    }
    Ok(pixel)
}

fn check_mask(mask: &Image, image: &Image) -> Result<()> {
    if mask.channels != 1 || mask.width != image.width || mask.height != image.height {
        return Err(Error::Shape(format!(
            "mask {}x{}x{} does not match image {}x{}",
            mask.width, mask.height, mask.channels, image.width, image.height
        )));
    }
    Ok(())
}

/// Per-pixel blend `mask * sharp + (1 - mask) * defocused`.
pub fn composite_image(mask: &Image, sharp: &Image, defocused: &Image) -> Result<Image> {
    sharp.ensure_same_shape(defocused)?;
    check_mask(mask, sharp)?;
    let ch = sharp.channels;
    let mut out = Image::new(sharp.width, sharp.height, ch);
    for p in 0..sharp.pixels() {
        let m = mask.data[p];
        for c in 0..ch {
            let i = p * ch + c;
            out.data[i] = m * sharp.data[i] + (1.0 - m) * defocused.data[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DetailLoss {
    pub value: f64,
    pub d_sharp: Image,
    pub d_defocused: Image,
    pub d_mask: Image,
}

/// Reconstruction loss of the composite, with gradients to all three inputs.
pub fn l_detail(
    mask: &Image,
    sharp: &Image,
    defocused: &Image,
    reference: &Image,
    weights: &LossWeights,
) -> Result<DetailLoss> {
    let composite = composite_image(mask, sharp, defocused)?;
    let rec = l_rec(&composite, reference, weights)?;
    let ch = sharp.channels;
    let mut d_sharp = Image::new(sharp.width, sharp.height, ch);
    let mut d_defocused = Image::new(sharp.width, sharp.height, ch);
    let mut d_mask = Image::new(sharp.width, sharp.height, 1);
    for p in 0..sharp.pixels() {
        let m = mask.data[p];
        let mut dm = 0.0;
        for c in 0..ch {
            let i = p * ch + c;
            let g = rec.grad.data[i];
            d_sharp.data[i] = m * g;
            d_defocused.data[i] = (1.0 - m) * g;
            dm += g * (sharp.data[i] - defocused.data[i]);
        }
        d_mask.data[p] = dm;
    }
    Ok(DetailLoss { value: rec.value, d_sharp, d_defocused, d_mask })
}

const MIN_VARIANCE: f64 = 1e-12;

/// `1 - pearson(1 - mask, coc)`; `None` (with a warning) when either input
/// is constant.
pub fn mask_correlation_loss(mask: &Image, coc: &Image) -> Result<Option<LossGrad>> {
    if mask.channels != 1 || !mask.same_shape(coc) {
        return Err(Error::Shape("mask and CoC map must be single-channel and equal size".into()));
    }
    let n = mask.data.len() as f64;
    let u: Vec<f64> = mask.data.iter().map(|m| 1.0 - m).collect();
    let mean_u = u.iter().sum::<f64>() / n;
    let mean_c = coc.data.iter().sum::<f64>() / n;
    let (mut var_u, mut var_c, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(&coc.data) {
        let (du, dc) = (a - mean_u, b - mean_c);
        var_u += du * du;
        var_c += dc * dc;
        cov += du * dc;
    }
    var_u /= n;
    var_c /= n;
    cov /= n;
    if var_u <= MIN_VARIANCE || var_c <= MIN_VARIANCE {
        warn!("mask correlation skipped: zero variance (mask {var_u:e}, coc {var_c:e})");
        return Ok(None);
    }
    let denom = (var_u * var_c).sqrt();
    let rho = cov / denom;
    let mut grad = Image::new(mask.width, mask.height, 1);
    for (i, (a, b)) in u.iter().zip(&coc.data).enumerate() {
        let d_rho_du = ((b - mean_c) / denom - rho * (a - mean_u) / var_u) / n;
        // L = 1 - rho(u), u = 1 - mask
        grad.data[i] = d_rho_du;
    }
    Ok(Some(LossGrad { value: 1.0 - rho, grad }))
}

const ENTROPY_EPS: f64 = 1e-8;

/// Mean of `-m log(m + eps)` over pixels (plus the `1 - m` mirror term when
/// `symmetric`).
pub fn mask_entropy_reg(mask: &Image, symmetric: bool) -> LossGrad {
    let n = mask.data.len().max(1) as f64;
    let mut grad = Image::new(mask.width, mask.height, mask.channels);
    let mut value = 0.0;
    for (i, &m) in mask.data.iter().enumerate() {
        let l = (m + ENTROPY_EPS).ln();
        value += -m * l;
        let mut g = -(l + m / (m + ENTROPY_EPS));
        if symmetric {
            let r = 1.0 - m;
            let lr = (r + ENTROPY_EPS).ln();
            value += -r * lr;
            g += lr + r / (r + ENTROPY_EPS);
        }
        grad.data[i] = g / n;
    }
    LossGrad { value: value / n, grad }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Refine,
}

/// Loss values of one iteration, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub detail: f64,
    pub mk: f64,
    pub reg: f64,
}

/// Stage objective: `rec` during warm-up, `detail + mk + reg` (weighted)
/// during refinement.
pub fn total_objective(stage: Stage, parts: &LossParts, weights: &LossWeights) -> f64 {
    match stage {
        Stage::Warmup => parts.rec,
        Stage::Refine => parts.detail + weights.mk * parts.mk + weights.reg * parts.reg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random()).collect()).unwrap()
    }

    fn normalized(coc: &Image) -> Image {
        let lo = coc.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = coc.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let data = coc.data.iter().map(|v| (v - lo) / (hi - lo)).collect();
        Image::from_vec(coc.width, coc.height, 1, data).unwrap()
    }

    #[test]
    fn rec_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 8, 8, 3);
        assert_eq!(l_rec(&a, &a, &LossWeights::default()).unwrap().value, 0.0);
        let shifted = Image { data: a.data.iter().map(|v| v + 0.1).collect(), ..a.clone() };
        let l1v = l1(&shifted, &a).unwrap().value;
        assert_relative_eq!(l1v, 0.1, epsilon = 1e-12);
        assert!(l_rec(&shifted, &a, &LossWeights::default()).unwrap().value >= l1v);
        assert!(l_rec(&a, &Image::new(4, 8, 3), &LossWeights::default()).is_err());
    }

    #[test]
    fn composite_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sharp = random(&mut rng, 3, 2, 3);
        let blur = random(&mut rng, 3, 2, 3);
        let ones = Image::filled(3, 2, 1, 1.0);
        let zeros = Image::new(3, 2, 1);
        let half = Image::filled(3, 2, 1, 0.5);
        assert_eq!(composite_image(&ones, &sharp, &blur).unwrap(), sharp);
        assert_eq!(composite_image(&zeros, &sharp, &blur).unwrap(), blur);
        let avg = composite_image(&half, &sharp, &blur).unwrap();
        for i in 0..avg.data.len() {
            assert_relative_eq!(avg.data[i], 0.5 * (sharp.data[i] + blur.data[i]), epsilon = 1e-15);
        }
    }

    #[test]
    fn detail_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = random(&mut rng, 4, 4, 3);
        let blur = random(&mut rng, 4, 4, 3);
        let ones = Image::filled(4, 4, 1, 1.0);
        let w = LossWeights::default();
        assert_eq!(l_detail(&ones, &reference, &blur, &reference, &w).unwrap().value, 0.0);
        let zeros = Image::new(4, 4, 1);
        assert_eq!(l_detail(&zeros, &blur, &reference, &reference, &w).unwrap().value, 0.0);
    }

    #[test]
    fn detail_mask_gradient_points_toward_sharp_image() {
        // 2x2: the sharp render is right everywhere, the defocused one wrong
        let reference = Image::from_vec(2, 2, 3, vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.3, 0.5, 0.7, 0.9, 0.25, 0.45, 0.65]).unwrap();
        let sharp = reference.clone();
        let blur = Image::filled(2, 2, 3, 0.5);
        let mask = Image::filled(2, 2, 1, 0.4);
        let w = LossWeights { dssim: 0.0, ..Default::default() };
        let out = l_detail(&mask, &sharp, &blur, &reference, &w).unwrap();
        let h = 1e-6;
        for p in 0..4 {
            let mut mp = mask.clone();
            let mut mm = mask.clone();
            mp.data[p] += h;
            mm.data[p] -= h;
            let fd = (l_detail(&mp, &sharp, &blur, &reference, &w).unwrap().value
                - l_detail(&mm, &sharp, &blur, &reference, &w).unwrap().value)
                / (2.0 * h);
            assert!(out.d_mask.data[p] < 0.0);
            assert_relative_eq!(out.d_mask.data[p], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn correlation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coc = random(&mut rng, 6, 5, 1);
        let n = normalized(&coc);
        let inv = Image { data: n.data.iter().map(|v| 1.0 - v).collect(), ..n.clone() };
        let aff = Image { data: n.data.iter().map(|v| 0.2 + 0.5 * (1.0 - v)).collect(), ..n.clone() };
        assert!(mask_correlation_loss(&inv, &coc).unwrap().unwrap().value.abs() < 1e-12);
        assert!((mask_correlation_loss(&n, &coc).unwrap().unwrap().value - 2.0).abs() < 1e-12);
        assert!(mask_correlation_loss(&aff, &coc).unwrap().unwrap().value.abs() < 1e-12);
        let flat = Image::filled(6, 5, 1, 0.3);
        assert!(mask_correlation_loss(&flat, &coc).unwrap().is_none());
        assert!(mask_correlation_loss(&n, &flat).unwrap().is_none());
    }

    #[test]
    fn correlation_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coc = random(&mut rng, 5, 5, 1);
        let mask = random(&mut rng, 5, 5, 1);
        let base = mask_correlation_loss(&mask, &coc).unwrap().unwrap().value;
        for &(s, t) in &[(0.3, 0.1), (2.0, -0.5), (10.0, 3.0)] {
            let m2 = Image { data: mask.data.iter().map(|v| s * v + t).collect(), ..mask.clone() };
            let c2 = Image { data: coc.data.iter().map(|v| s * v + t).collect(), ..coc.clone() };
            assert!((mask_correlation_loss(&m2, &coc).unwrap().unwrap().value - base).abs() < 1e-9);
            assert!((mask_correlation_loss(&mask, &c2).unwrap().unwrap().value - base).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_examples() {
        let ones = Image::filled(3, 3, 1, 1.0);
        assert!(mask_entropy_reg(&ones, false).value.abs() < 1e-7);
        let tiny = Image::filled(3, 3, 1, 1e-12);
        assert!(mask_entropy_reg(&tiny, false).value.abs() < 1e-9);
        let e = Image::filled(3, 3, 1, (-1.0f64).exp());
        let r = mask_entropy_reg(&e, false);
        assert_relative_eq!(r.value, (-1.0f64).exp(), epsilon = 1e-7);
        assert!(r.grad.data.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn objective_examples() {
        let w = LossWeights::default();
        let warm = LossParts { rec: 0.3, ..Default::default() };
        assert_eq!(total_objective(Stage::Warmup, &warm, &w), 0.3);
        let refine = LossParts { rec: 9.0, detail: 0.2, mk: 1.0, reg: 0.3 };
        assert_relative_eq!(total_objective(Stage::Refine, &refine, &w), 0.20103, epsilon = 1e-15);
        assert_eq!(total_objective(Stage::Refine, &LossParts::default(), &w), 0.0);
    }
}
