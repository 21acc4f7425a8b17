//! Windowed SSIM with an analytic gradient.
//!
//! Local statistics use an 11x11 Gaussian window (sigma 1.5) applied
//! separably with mirror padding, so the SSIM map has the image's size.

use crate::error::Result;
use crate::model::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut k: [f64; WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SIGMA * SIGMA)).exp()
    });
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable window filter on a single-channel plane.
struct Window {
    taps: [f64; WINDOW],
    width: usize,
    height: usize,
}

impl Window {
    fn new(width: usize, height: usize) -> Self {
        Self { taps: kernel(), width, height }
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let half = (WINDOW / 2) as isize;
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in self.taps.iter().enumerate() {
                    acc += t * src[y * w + reflect(x as isize + k as isize - half, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in self.taps.iter().enumerate() {
                    acc += t * tmp[reflect(y as isize + k as isize - half, h) * w + x];
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    /// Transpose of [`Window::apply`].
    fn adjoint(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let half = (WINDOW / 2) as isize;
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let g = src[y * w + x];
                for (k, t) in self.taps.iter().enumerate() {
                    tmp[reflect(y as isize + k as isize - half, h) * w + x] += t * g;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let g = tmp[y * w + x];
                for (k, t) in self.taps.iter().enumerate() {
                    out[y * w + reflect(x as isize + k as isize - half, w)] += t * g;
                }
            }
        }
        out
    }
}

struct PlaneStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    ssim: Vec<f64>,
    // per-pixel partials of SSIM w.r.t. mu_a, sigma_a^2, sigma_ab
    d_mu: Vec<f64>,
    d_var: Vec<f64>,
    d_cov: Vec<f64>,
}

fn plane_stats(win: &Window, a: &[f64], b: &[f64], want_grad: bool) -> PlaneStats {
    let mu_a = win.apply(a);
    let mu_b = win.apply(b);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let e_aa = win.apply(&aa);
    let e_bb = win.apply(&bb);
    let e_ab = win.apply(&ab);
    let n = a.len();
    let mut ssim = vec![0.0; n];
    let (mut d_mu, mut d_var, mut d_cov) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let var_a = e_aa[p] - ma * ma;
        let var_b = e_bb[p] - mb * mb;
        let cov = e_ab[p] - ma * mb;
        let a1 = 2.0 * ma * mb + C1;
        let a2 = 2.0 * cov + C2;
        let b1 = ma * ma + mb * mb + C1;
        let b2 = var_a + var_b + C2;
        let s = a1 * a2 / (b1 * b2);
        ssim[p] = s;
        if want_grad {
            d_mu[p] = 2.0 * mb * a2 / (b1 * b2) - s * 2.0 * ma / b1;
            d_var[p] = -s / b2;
            d_cov[p] = 2.0 * a1 / (b1 * b2);
        }
    }
    PlaneStats { mu_a, mu_b, ssim, d_mu, d_var, d_cov }
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let win = Window::new(a.width, a.height);
    let mut total = 0.0;
    for c in 0..a.channels {
        let pa = a.channel(c).data;
        let pb = b.channel(c).data;
        total += plane_stats(&win, &pa, &pb, false).ssim.iter().sum::<f64>();
    }
    Ok(total / a.data.len() as f64)
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.ensure_same_shape(b)?;
    let win = Window::new(a.width, a.height);
    let scale = 1.0 / a.data.len() as f64;
    let mut total = 0.0;
    let mut grad = Image::new(a.width, a.height, a.channels);
    for c in 0..a.channels {
        let pa = a.channel(c).data;
        let pb = b.channel(c).data;
        let st = plane_stats(&win, &pa, &pb, true);
        total += st.ssim.iter().sum::<f64>();
        // sigma_a^2 = E[a^2] - mu_a^2 and sigma_ab = E[ab] - mu_a mu_b
        let p_sq: Vec<f64> = st.d_var.iter().map(|v| v * scale).collect();
        let p_ab: Vec<f64> = st.d_cov.iter().map(|v| v * scale).collect();
        let p_mu: Vec<f64> = (0..pa.len())
            .map(|p| scale * st.d_mu[p] - 2.0 * st.mu_a[p] * p_sq[p] - st.mu_b[p] * p_ab[p])
            .collect();
        let g_mu = win.adjoint(&p_mu);
        let g_sq = win.adjoint(&p_sq);
        let g_ab = win.adjoint(&p_ab);
        for p in 0..pa.len() {
            grad.data[p * a.channels + c] = g_mu[p] + 2.0 * pa[p] * g_sq[p] + pb[p] * g_ab[p];
        }
    }
    Ok((total * scale, grad))
}
