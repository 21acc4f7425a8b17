//! Parameter storage in optimizer space and the Adam optimizer.
//!
//! Gaussians are stored as fixed-width rows:
//! `[center(3) | quaternion(4) | log scale(3) | logit opacity(1) | sh(12)]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gaussian3D, LensParams, Scene, SH_COEFFS};
use crate::raster::{GaussianGrad, LensGrad};

pub const ROW: usize = 23;
const CENTER: usize = 0;
const ROT: usize = 3;
const SCALE: usize = 7;
const OPACITY: usize = 10;
const SH: usize = 11;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Smallest focal distance the optimizer may produce.
pub const MIN_FOCAL: f64 = 1e-3;

const OPACITY_CLAMP: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub center_init: f64,
    pub center_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub focal: f64,
    pub aperture: f64,
    pub iln: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center_init: 5e-4,
            center_final: 5e-6,
            rotation: 1e-3,
            scale: 1e-2,
            opacity: 5e-2,
            color: 2.5e-3,
            focal: 5e-2,
            aperture: 1e-2,
            iln: 5e-4,
        }
    }
}

impl LearningRates {
    /// Center rate, linearly decayed from `center_init` to `center_final`.
    pub fn center_at(&self, iteration: usize, total: usize) -> f64 {
        let t = if total == 0 { 1.0 } else { (iteration as f64 / total as f64).clamp(0.0, 1.0) };
        self.center_init + (self.center_final - self.center_init) * t
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.center_init,
            self.center_final,
            self.rotation,
            self.scale,
            self.opacity,
            self.color,
            self.focal,
            self.aperture,
            self.iln,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moments for a flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam update of `params` in place; `lr(i)` gives the rate per element.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr(i) * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }

    /// Keeps the rows for which `keep` is true (rows of `width` values).
    pub fn retain_rows(&mut self, width: usize, keep: &[bool]) {
        self.m = retain(&self.m, width, keep);
        self.v = retain(&self.v, width, keep);
    }

    /// Appends zeroed rows.
    pub fn grow(&mut self, extra: usize) {
        self.m.resize(self.m.len() + extra, 0.0);
        self.v.resize(self.v.len() + extra, 0.0);
    }
}

fn retain(values: &[f64], width: usize, keep: &[bool]) -> Vec<f64> {
    values
        .chunks(width)
        .zip(keep)
        .filter(|(_, k)| **k)
        .flat_map(|(row, _)| row.iter().copied())
        .collect()
}

fn group_of(col: usize) -> usize {
    match col {
        c if c < ROT => 0,
        c if c < SCALE => 1,
        c if c < OPACITY => 2,
        c if c < SH => 3,
        _ => 4,
    }
}

/// Optimizer-space parameters and their Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    /// `n * ROW` Gaussian parameters.
    pub gaussians: Vec<f64>,
    pub sh_degree: u8,
    pub gaussian_state: AdamState,
    /// `(f, Q)` per view.
    pub lenses: Vec<[f64; 2]>,
    pub lens_states: Vec<AdamState>,
}

impl ParamStore {
    pub fn new(scene: &Scene, lenses: &[LensParams]) -> Self {
        let gaussians: Vec<f64> = scene.gaussians.iter().flat_map(encode).collect();
        Self {
            gaussian_state: AdamState::new(gaussians.len()),
            gaussians,
            sh_degree: scene.sh_degree,
            lenses: lenses.iter().map(|l| [l.focal_distance, l.aperture]).collect(),
            lens_states: vec![AdamState::new(2); lenses.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len() / ROW
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn scene(&self) -> Scene {
        Scene {
            gaussians: self.gaussians.chunks(ROW).map(decode).collect(),
            sh_degree: self.sh_degree,
        }
    }

    pub fn lens(&self, view: usize) -> LensParams {
        let [f, q] = self.lenses[view];
        LensParams::new(f, q)
    }

    pub fn lens_params(&self) -> Vec<LensParams> {
        (0..self.lenses.len()).map(|m| self.lens(m)).collect()
    }

    /// Adam step on all Gaussian rows from physical-space gradients.
    pub fn step_gaussians(&mut self, grads: &[GaussianGrad], rates: &LearningRates, center_lr: f64) -> Result<()> {
        if grads.len() != self.len() {
            return Err(Error::Shape(format!("{} gradients for {} Gaussians", grads.len(), self.len())));
        }
        let mut flat = vec![0.0; self.gaussians.len()];
        for (i, g) in grads.iter().enumerate() {
            let row = &self.gaussians[i * ROW..(i + 1) * ROW];
            let out = &mut flat[i * ROW..(i + 1) * ROW];
            out[CENTER..ROT].copy_from_slice(g.center.as_slice());
            out[ROT..SCALE].copy_from_slice(&g.rotation);
            for k in 0..3 {
                // d/d(log s) = s d/ds
                out[SCALE + k] = g.scale[k] * row[SCALE + k].exp();
            }
            let o = sigmoid(row[OPACITY]);
            out[OPACITY] = g.opacity * o * (1.0 - o);
            for j in 0..SH_COEFFS {
                if j > 0 && self.sh_degree == 0 {
                    continue;
                }
                out[SH + 3 * j..SH + 3 * j + 3].copy_from_slice(&g.sh[j]);
            }
        }
        let lrs = [center_lr, rates.rotation, rates.scale, rates.opacity, rates.color];
        self.gaussian_state.update(&mut self.gaussians, &flat, |i| lrs[group_of(i % ROW)]);
        for row in self.gaussians.chunks_mut(ROW) {
            normalize_quat(&mut row[ROT..SCALE]);
        }
        Ok(())
    }

    /// Adam step on one view's lens.
    pub fn step_lens(&mut self, view: usize, grad: &LensGrad, rates: &LearningRates) {
        let g = [grad.focal_distance, grad.aperture];
        let lrs = [rates.focal, rates.aperture];
        self.lens_states[view].update(&mut self.lenses[view], &g, |i| lrs[i]);
        let l = &mut self.lenses[view];
        l[0] = l[0].max(MIN_FOCAL);
        l[1] = l[1].max(0.0);
    }

    /// Removes Gaussians where `keep` is false, compacting the moments.
    pub fn retain(&mut self, keep: &[bool]) {
        self.gaussians = retain(&self.gaussians, ROW, keep);
        self.gaussian_state.retain_rows(ROW, keep);
    }

    /// Appends Gaussians with zeroed moments.
    pub fn extend(&mut self, new: &[Gaussian3D]) {
        self.gaussians.extend(new.iter().flat_map(encode));
        self.gaussian_state.grow(new.len() * ROW);
    }
}

fn normalize_quat(q: &mut [f64]) {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        q.iter_mut().for_each(|v| *v /= n);
    } else {
        q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    }
}

pub fn encode(g: &Gaussian3D) -> [f64; ROW] {
    let mut row = [0.0; ROW];
    row[CENTER..ROT].copy_from_slice(g.center.as_slice());
    row[ROT..SCALE].copy_from_slice(&g.rotation);
    for k in 0..3 {
        row[SCALE + k] = g.scale[k].ln();
    }
    row[OPACITY] = logit(g.opacity);
    for j in 0..SH_COEFFS {
        row[SH + 3 * j..SH + 3 * j + 3].copy_from_slice(&g.sh[j]);
    }
    row
}

pub fn decode(row: &[f64]) -> Gaussian3D {
    let mut sh = [[0.0; 3]; SH_COEFFS];
    for (j, s) in sh.iter_mut().enumerate() {
        s.copy_from_slice(&row[SH + 3 * j..SH + 3 * j + 3]);
    }
    Gaussian3D {
        center: nalgebra::Vector3::new(row[0], row[1], row[2]),
        rotation: [row[ROT], row[ROT + 1], row[ROT + 2], row[ROT + 3]],
        scale: nalgebra::Vector3::new(row[SCALE].exp(), row[SCALE + 1].exp(), row[SCALE + 2].exp()),
        opacity: sigmoid(row[OPACITY]),
        sh,
    }
}
