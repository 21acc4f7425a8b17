//! In-focus localization network.
//!
//! Four 3x3 convolutions (stride 1, zero padding 1):
//!
//! ```text
//! [rgb, depth, coc] (5) -> L1 -> 48 -> L2 -> 16 -> concat PE (48) -> L3 -> 16 -> L4 -> 1 -> sigmoid
//! ```
//!
//! Hidden layers use leaky ReLU (slope 0.01). Convolutions are computed as
//! im2col followed by a matrix product.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Image;

pub const INPUT_CHANNELS: usize = 5;
pub const PE_CHANNELS: usize = 48;
pub const LEAKY_SLOPE: f64 = 0.01;
const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Frequency counts of the positional encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeConfig {
    pub coord_freqs: usize,
    pub view_freqs: usize,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self { coord_freqs: 10, view_freqs: 4 }
    }
}

impl PeConfig {
    pub fn channels(&self) -> usize {
        2 * 2 * self.coord_freqs + 2 * self.view_freqs
    }
}

/// Maps view `m` of `count` onto `[-1, 1]`.
pub fn normalize_view(m: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        2.0 * m as f64 / (count - 1) as f64 - 1.0
    }
}

/// Pixel center coordinate normalized to `[-1, 1]`.
pub fn normalize_coord(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

fn encode_into(out: &mut Vec<f64>, v: f64, freqs: usize) {
    for k in 0..freqs {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push((w * v).sin());
        out.push((w * v).cos());
    }
}

/// Encoding of one `(x, y)` coordinate pair and a normalized view index.
/// Layout: x (sin, cos per frequency), y, then view.
pub fn encode_point(cfg: &PeConfig, x: f64, y: f64, view: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.channels());
    encode_into(&mut out, x, cfg.coord_freqs);
    encode_into(&mut out, y, cfg.coord_freqs);
    encode_into(&mut out, view, cfg.view_freqs);
    out
}

/// `channels x height x width` positional encoding for a view.
pub fn positional_encode(cfg: &PeConfig, view: f64, width: usize, height: usize) -> Array3<f64> {
    let mut pe = Array3::zeros((cfg.channels(), height, width));
    for y in 0..height {
        for x in 0..width {
            let v = encode_point(cfg, normalize_coord(x, width), normalize_coord(y, height), view);
            for (c, val) in v.into_iter().enumerate() {
                pe[[c, y, x]] = val;
            }
        }
    }
    pe
}

/// One 3x3 convolution; `weight` is `out x (in * 9)` with columns ordered
/// `(in_channel, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv {
    fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((output, input * TAPS)), bias: Array1::zeros(output) }
    }

    fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((input * TAPS) as f64).sqrt();
        let mut c = Self::zeros(input, output);
        c.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        c.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        c
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols() / TAPS
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, cols: &Array2<f64>) -> Array2<f64> {
        let mut out = self.weight.dot(cols);
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(&self.bias) {
            row += *b;
        }
        out
    }
}

/// Network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct IlnParams {
    pub layers: [Conv; 4],
    pub pe: PeConfig,
}

impl IlnParams {
    /// Standard widths: 48, 16, 16.
    pub fn new(seed: u64) -> Self {
        Self::with_widths([48, 16, 16], PeConfig::default(), seed)
    }

    /// Hidden widths `[h1, h2, h3]`, uniform `1/sqrt(fan_in)` init.
    pub fn with_widths(widths: [usize; 3], pe: PeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h1, h2, h3] = widths;
        Self {
            layers: [
                Conv::init(INPUT_CHANNELS, h1, &mut rng),
                Conv::init(h1, h2, &mut rng),
                Conv::init(h2 + pe.channels(), h3, &mut rng),
                Conv::init(h3, 1, &mut rng),
            ],
            pe,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: std::array::from_fn(|i| Conv::zeros(self.layers[i].inputs(), self.layers[i].outputs())),
            pe: self.pe,
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.layers[0].outputs(), self.layers[1].outputs(), self.layers[2].outputs()]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} ILN values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = *it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn validate(&self) -> Result<()> {
        let [h1, h2, h3] = self.widths();
        let ok = self.layers[0].inputs() == INPUT_CHANNELS
            && self.layers[1].inputs() == h1
            && self.layers[2].inputs() == h2 + self.pe.channels()
            && self.layers[3].inputs() == h3
            && self.layers[3].outputs() == 1;
        if !ok {
            return Err(Error::Shape("inconsistent ILN layer widths".into()));
        }
        Ok(())
    }
}

/// Zero-padded 3x3 patches: `(channels * 9) x (height * width)`.
pub fn im2col(x: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * TAPS, h * w));
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let mut row = cols.row_mut(ch * TAPS + ky * KERNEL + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = x[[ch, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut x = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = cols.row(ch * TAPS + ky * KERNEL + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            x[[ch, sy as usize, sx as usize]] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Stacks `[rgb, depth, coc]` into a `5 x h x w` tensor.
pub fn stack_inputs(image: &Image, depth: &Image, coc: &Image) -> Result<Array3<f64>> {
    let (w, h) = (image.width, image.height);
    if image.channels != 3 {
        return Err(Error::Shape(format!("ILN image needs 3 channels, got {}", image.channels)));
    }
    for (name, m) in [("depth", depth), ("coc", coc)] {
        if m.width != w || m.height != h || m.channels != 1 {
            return Err(Error::Shape(format!(
                "ILN {name} map is {}x{}x{}, image is {w}x{h}",
                m.width, m.height, m.channels
            )));
        }
    }
    let mut x = Array3::zeros((INPUT_CHANNELS, h, w));
    for y in 0..h {
        for xx in 0..w {
            let p = y * w + xx;
            for c in 0..3 {
                x[[c, y, xx]] = image.data[p * 3 + c];
            }
            x[[3, y, xx]] = depth.data[p];
            x[[4, y, xx]] = coc.data[p];
        }
    }
    Ok(x)
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct IlnCache {
    width: usize,
    height: usize,
    cols: [Array2<f64>; 4],
    pre: [Array2<f64>; 3],
    mask: Array1<f64>,
}

/// Gradients with respect to the network inputs.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub image: Image,
    pub depth: Image,
    pub coc: Image,
}

/// Network forward pass on pre-stacked inputs; returns the mask and cache.
pub fn forward_tensor(params: &IlnParams, x: &Array3<f64>, pe: &Array3<f64>) -> Result<(Image, IlnCache)> {
    params.validate()?;
    let (c, h, w) = x.dim();
    if c != INPUT_CHANNELS {
        return Err(Error::Shape(format!("ILN input has {c} channels, expected {INPUT_CHANNELS}")));
    }
    if pe.dim() != (params.pe.channels(), h, w) {
        return Err(Error::Shape(format!("positional encoding shape {:?} does not match {h}x{w}", pe.dim())));
    }
    let n = h * w;
    let [l1, l2, l3, l4] = &params.layers;

    let cols0 = im2col(x.view());
    let z1 = l1.forward(&cols0);
    let a1 = z1.mapv(leaky);
    let cols1 = im2col(a1.view().into_shape_with_order((l1.outputs(), h, w)).expect("contiguous"));
    let z2 = l2.forward(&cols1);
    let a2 = z2.mapv(leaky);
    let mut x3 = Array3::zeros((l2.outputs() + pe.dim().0, h, w));
    x3.slice_mut(s![..l2.outputs(), .., ..])
        .assign(&a2.view().into_shape_with_order((l2.outputs(), h, w)).expect("contiguous"));
    x3.slice_mut(s![l2.outputs().., .., ..]).assign(pe);
    let cols2 = im2col(x3.view());
    let z3 = l3.forward(&cols2);
    let a3 = z3.mapv(leaky);
    let cols3 = im2col(a3.view().into_shape_with_order((l3.outputs(), h, w)).expect("contiguous"));
    let z4 = l4.forward(&cols3);
    let mask: Array1<f64> = z4.row(0).mapv(|v| 1.0 / (1.0 + (-v).exp()));

    let out = Image { width: w, height: h, channels: 1, data: mask.to_vec() };
    debug_assert_eq!(out.data.len(), n);
    Ok((out, IlnCache { width: w, height: h, cols: [cols0, cols1, cols2, cols3], pre: [z1, z2, z3], mask }))
}

/// `M* = ILN(image, depth, coc, PE)`.
pub fn iln_forward(
    params: &IlnParams,
    image: &Image,
    depth: &Image,
    coc: &Image,
    pe: &Array3<f64>,
) -> Result<(Image, IlnCache)> {
    let x = stack_inputs(image, depth, coc)?;
    forward_tensor(params, &x, pe)
}

fn conv_backward(layer: &Conv, grad: &mut Conv, cols: &Array2<f64>, dz: &Array2<f64>) -> Array2<f64> {
    grad.weight += &dz.dot(&cols.t());
    grad.bias += &dz.sum_axis(Axis(1));
    layer.weight.t().dot(dz)
}

/// Backpropagates `upstream` (`dL/dM*`, single channel) through the cached
/// forward pass. Returns parameter gradients and input gradients.
pub fn iln_backward(
    params: &IlnParams,
    cache: Option<&IlnCache>,
    upstream: &Image,
) -> Result<(IlnParams, Array3<f64>)> {
    let cache = cache.ok_or_else(|| Error::State("ILN backward needs a cached forward pass".into()))?;
    let (w, h) = (cache.width, cache.height);
    if upstream.width != w || upstream.height != h || upstream.channels != 1 {
        return Err(Error::Shape("ILN upstream must match the mask shape".into()));
    }
    let mut grads = params.zeros_like();
    let [l1, l2, l3, l4] = &params.layers;
    let [g1, g2, g3, g4] = &mut grads.layers;
    let n = h * w;

    let mut dz4 = Array2::zeros((1, n));
    for p in 0..n {
        let m = cache.mask[p];
        dz4[[0, p]] = upstream.data[p] * m * (1.0 - m);
    }
    let dcols3 = conv_backward(l4, g4, &cache.cols[3], &dz4);
    let da3 = col2im(&dcols3, l3.outputs(), h, w);
    let dz3 = gate(&da3, &cache.pre[2]);
    let dcols2 = conv_backward(l3, g3, &cache.cols[2], &dz3);
    let dx3 = col2im(&dcols2, l3.inputs(), h, w);
    let da2 = dx3.slice(s![..l2.outputs(), .., ..]).to_owned();
    let dz2 = gate(&da2, &cache.pre[1]);
    let dcols1 = conv_backward(l2, g2, &cache.cols[1], &dz2);
    let da1 = col2im(&dcols1, l1.outputs(), h, w);
    let dz1 = gate(&da1, &cache.pre[0]);
    let dcols0 = conv_backward(l1, g1, &cache.cols[0], &dz1);
    let dx = col2im(&dcols0, INPUT_CHANNELS, h, w);
    Ok((grads, dx))
}

fn gate(da: &Array3<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let (c, h, w) = da.dim();
    let flat = da.view().into_shape_with_order((c, h * w)).expect("contiguous");
    let mut out = flat.to_owned();
    out.zip_mut_with(pre, |g, z| *g *= leaky_grad(*z));
    out
}

/// Splits a `5 x h x w` input gradient into image / depth / CoC gradients.
pub fn split_input_grads(dx: &Array3<f64>) -> InputGrads {
    let (_, h, w) = dx.dim();
    let mut image = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut coc = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for c in 0..3 {
                image.data[p * 3 + c] = dx[[c, y, x]];
            }
            depth.data[p] = dx[[3, y, x]];
            coc.data[p] = dx[[4, y, x]];
        }
    }
    InputGrads { image, depth, coc }
}
