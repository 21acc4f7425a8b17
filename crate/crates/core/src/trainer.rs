//! Two-stage optimization: warm-up on the reconstruction loss, then
//! refinement with CoC-guided detail enhancement.

use std::fmt::Write as _;

use log::{error, info};
use nalgebra::Vector3;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iln::{iln_backward, iln_forward, normalize_view, positional_encode, split_input_grads, IlnParams};
use crate::io::{Checkpoint, OptimRecord, ViewRecord};
use crate::losses::{
    l_detail, l_rec, mask_correlation_loss, mask_entropy_reg, psnr, total_objective, LossParts, LossWeights, Stage,
};
use crate::model::{Gaussian3D, Image, LensParams, Scene, TrainView};
use crate::neighbors::PointIndex;
use crate::optim::{AdamState, LearningRates, ParamStore};
use crate::raster::{render, render_all_in_focus, render_backward, GradientSet, RasterConfig, Upstream};

/// Iteration counts of the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub total: usize,
    pub warmup_end: usize,
    pub inject_at: usize,
    pub inject_count: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { total: 40_000, warmup_end: 5_000, inject_at: 2_000, inject_count: 60_000 }
    }
}

impl Schedule {
    /// Every constant multiplied by `scale` and rounded.
    pub fn scaled(scale: f64) -> Self {
        let d = Self::default();
        let s = |v: usize| (v as f64 * scale).round() as usize;
        Self {
            total: s(d.total),
            warmup_end: s(d.warmup_end),
            inject_at: s(d.inject_at),
            inject_count: s(d.inject_count),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inject_at < self.warmup_end && self.warmup_end < self.total) {
            return Err(Error::Config(format!(
                "schedule needs inject_at < warmup_end < total, got {} / {} / {}",
                self.inject_at, self.warmup_end, self.total
            )));
        }
        Ok(())
    }

    pub fn stage(&self, iteration: usize) -> Stage {
        if iteration < self.warmup_end {
            Stage::Warmup
        } else {
            Stage::Refine
        }
    }
}

/// `train.*` config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Multiplies every schedule constant.
    pub scale: f64,
    /// Overrides the scaled total when set.
    pub total: Option<usize>,
    pub lr: LearningRates,
    /// Let gradients reach depth through the CoC kernel and map.
    pub coc_z_grad: bool,
    /// Refinement with the ILN composite; `false` keeps the reconstruction loss.
    pub detail_enhance: bool,
    /// Freeze the scene and optimize only per-view lenses.
    pub lens_only: bool,
    pub optimize_lens: bool,
    pub prune_threshold: f64,
    /// Prune every this many iterations (0 disables).
    pub prune_every: usize,
    /// Evaluate all-in-focus PSNR every this many iterations (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 1.0,
            total: None,
            lr: LearningRates::default(),
            coc_z_grad: false,
            detail_enhance: true,
            lens_only: false,
            optimize_lens: true,
            prune_threshold: 0.005,
            prune_every: 100,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        let mut s = Schedule::scaled(self.scale);
        if let Some(total) = self.total {
            s.total = total;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("train.scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::Config("train.prune_threshold must be in [0, 1)".into()));
        }
        self.lr.validate()?;
        if !self.lens_only {
            self.schedule().validate()?;
        }
        Ok(())
    }
}

/// `count` new Gaussians uniform in the scene bounds scaled by 1.05 about
/// their center; each copies scale, opacity and color from the nearest
/// existing center and gets an identity rotation.
pub fn inject_points(scene: &Scene, count: usize, rng: &mut impl Rng) -> Result<Vec<Gaussian3D>> {
    let (lo, hi) = scene.bounds().ok_or_else(|| Error::Domain("cannot inject points into an empty scene".into()))?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mid = (lo + hi) / 2.0;
    let half = (hi - lo) * 0.525;
    let centers: Vec<Vector3<f64>> = scene.gaussians.iter().map(|g| g.center).collect();
    let index = PointIndex::new(&centers);
    Ok((0..count)
        .map(|_| {
            let p = Vector3::from_fn(|k, _| {
                if half[k] > 0.0 {
                    rng.random_range(mid[k] - half[k]..=mid[k] + half[k])
                } else {
                    mid[k]
                }
            });
            let src = &scene.gaussians[index.nearest(&p).expect("non-empty index")];
            Gaussian3D { center: p, rotation: [1.0, 0.0, 0.0, 0.0], ..*src }
        })
        .collect())
}

/// Keep-mask of Gaussians with opacity at or above `threshold`.
pub fn prune_mask(scene: &Scene, threshold: f64) -> Vec<bool> {
    scene.gaussians.iter().map(|g| g.opacity >= threshold).collect()
}

/// Scene without Gaussians below `threshold` opacity.
pub fn prune(scene: &Scene, threshold: f64) -> Scene {
    let keep = prune_mask(scene, threshold);
    Scene {
        gaussians: scene.gaussians.iter().zip(&keep).filter(|(_, k)| **k).map(|(g, _)| *g).collect(),
        sh_degree: scene.sh_degree,
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub stage: Stage,
    pub view: usize,
    pub loss: f64,
    pub parts: LossParts,
    /// Defocused render against the training image.
    pub psnr: f64,
    /// Mean all-in-focus PSNR against ground truth, when evaluated.
    pub aif_psnr: Option<f64>,
    pub gaussians: usize,
    pub lens: LensParams,
}

pub const CSV_HEADER: &str = "iter,stage,view,loss,rec,detail,mk,reg,psnr,aif_psnr,gaussians,f,q";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let stage = match self.stage {
            Stage::Warmup => "warmup",
            Stage::Refine => "refine",
        };
        let aif = self.aif_psnr.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{stage},{},{},{},{},{},{},{},{aif},{},{},{}",
            self.iteration,
            self.view,
            self.loss,
            self.parts.rec,
            self.parts.detail,
            self.parts.mk,
            self.parts.reg,
            self.psnr,
            self.gaussians,
            self.lens.focal_distance,
            self.lens.aperture
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

/// Training state; one [`Trainer::step`] per iteration.
pub struct Trainer {
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub raster: RasterConfig,
    pub schedule: Schedule,
    pub store: ParamStore,
    pub iln: IlnParams,
    pub iln_state: AdamState,
    pub views: Vec<TrainView>,
    /// Optional all-in-focus ground truth per view, for evaluation only.
    pub ground_truth: Option<Vec<Image>>,
    pub iteration: usize,
    pub log: Vec<MetricsRow>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pe: Vec<Array3<f64>>,
}

impl Trainer {
    /// `views` carry the initial lenses (see [`crate::camera_init`]).
    pub fn new(
        scene: &Scene,
        views: Vec<TrainView>,
        config: TrainConfig,
        weights: LossWeights,
        raster: RasterConfig,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        if views.is_empty() {
            return Err(Error::Validation("training needs at least one view".into()));
        }
        for v in &views {
            v.validate()?;
        }
        if scene.is_empty() {
            return Err(Error::Validation("training needs a non-empty scene".into()));
        }
        let lenses: Vec<LensParams> = views.iter().map(|v| v.lens).collect();
        let store = ParamStore::new(scene, &lenses);
        let iln = IlnParams::new(config.seed ^ 0x11f0);
        let iln_state = AdamState::new(iln.param_count());
        let pe = views
            .iter()
            .map(|v| positional_encode(&iln.pe, normalize_view(v.index, views.len()), v.camera.width, v.camera.height))
            .collect();
        let raster = RasterConfig { coc_z_grad: config.coc_z_grad, ..raster };
        Ok(Self {
            schedule: config.schedule(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            weights,
            raster,
            store,
            iln,
            iln_state,
            views,
            ground_truth: None,
            iteration: 0,
            log: Vec::new(),
            order: Vec::new(),
            pe,
        })
    }

    pub fn with_ground_truth(mut self, aif: Vec<Image>) -> Result<Self> {
        if aif.len() != self.views.len() {
            return Err(Error::Validation("one ground-truth image per view required".into()));
        }
        self.ground_truth = Some(aif);
        Ok(self)
    }

    pub fn scene(&self) -> Scene {
        self.store.scene()
    }

    pub fn lenses(&self) -> Vec<LensParams> {
        self.store.lens_params()
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.schedule.total
    }

    fn stage(&self) -> Stage {
        if self.config.lens_only {
            Stage::Warmup
        } else {
            self.schedule.stage(self.iteration)
        }
    }

    fn next_view(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.order.reverse();
        }
        self.order.pop().expect("refilled")
    }

    /// Runs one iteration and returns its metrics.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let it = self.iteration;
        let stage = self.stage();
        let m = self.next_view();
        let scene = self.store.scene();
        let lens = self.store.lens(m);
        let view = &self.views[m];
        let cam = view.camera;
        let reference = &view.image;

        let defocused = render(&scene, &cam, &lens, &self.raster);
        let rec = l_rec(&defocused.color, reference, &self.weights)?;
        let mut parts = LossParts { rec: rec.value, ..Default::default() };
        let mut iln_grad = None;
        let mut aif_grads = None;

        let enhance = stage == Stage::Refine && self.config.detail_enhance;
        let upstream = if !enhance {
            Upstream::color(rec.grad)
        } else {
            let aif = render_all_in_focus(&scene, &cam, &self.raster);
            let (mask, cache) = iln_forward(&self.iln, &defocused.color, &defocused.depth, &defocused.coc, &self.pe[m])?;
            let detail = l_detail(&mask, &aif.color, &defocused.color, reference, &self.weights)?;
            parts.detail = detail.value;
            let mut d_mask = detail.d_mask;
            if let Some(mk) = mask_correlation_loss(&mask, &defocused.coc)? {
                parts.mk = mk.value;
                add_scaled(&mut d_mask, &mk.grad, self.weights.mk);
            }
            let reg = mask_entropy_reg(&mask, self.weights.symmetric_reg);
            parts.reg = reg.value;
            add_scaled(&mut d_mask, &reg.grad, self.weights.reg);

            let (g_params, dx) = iln_backward(&self.iln, Some(&cache), &d_mask)?;
            iln_grad = Some(g_params);
            let inputs = split_input_grads(&dx);
            let mut d_color = detail.d_defocused;
            add_scaled(&mut d_color, &inputs.image, 1.0);
            if !self.config.lens_only {
                aif_grads = Some(render_backward(&scene, &cam, &aif, &Upstream::color(detail.d_sharp))?);
            }
            Upstream { color: Some(d_color), depth: Some(inputs.depth), coc: Some(inputs.coc), alpha: None }
        };
        let loss = if enhance { total_objective(stage, &parts, &self.weights) } else { parts.rec };

        let mut grads: GradientSet = render_backward(&scene, &cam, &defocused, &upstream)?;
        if let Some(extra) = &aif_grads {
            let lens_grad = grads.lens;
            grads.accumulate(extra);
            grads.lens = lens_grad;
        }
        let iln_finite = iln_grad.as_ref().is_none_or(|g| g.is_finite());
        if !loss.is_finite() || !grads.is_finite() || !iln_finite {
            let msg = format!(
                "iteration {it}, view {m}: non-finite {} (loss {loss}, parts {parts:?}, lens f={} Q={}, {} Gaussians)",
                if loss.is_finite() { "gradient" } else { "loss" },
                lens.focal_distance,
                lens.aperture,
                scene.len()
            );
            error!("{msg}");
            return Err(Error::Numerical(msg));
        }

        if !self.config.lens_only {
            let center_lr = self.config.lr.center_at(it, self.schedule.total);
            self.store.step_gaussians(&grads.gaussians, &self.config.lr, center_lr)?;
        }
        if self.config.optimize_lens {
            self.store.step_lens(m, &grads.lens, &self.config.lr);
        }
        if let Some(g) = iln_grad {
            let mut flat = self.iln.to_flat();
            let lr = self.config.lr.iln;
            self.iln_state.update(&mut flat, &g.to_flat(), |_| lr);
            self.iln.set_flat(&flat)?;
        }

        if !self.config.lens_only {
            if it + 1 == self.schedule.inject_at && self.schedule.inject_count > 0 {
                let current = self.store.scene();
                let new = inject_points(&current, self.schedule.inject_count, &mut self.rng)?;
                info!("iteration {}: injected {} points", it + 1, new.len());
                self.store.extend(&new);
            }
            if self.config.prune_every > 0 && (it + 1) % self.config.prune_every == 0 {
                let keep = prune_mask(&self.store.scene(), self.config.prune_threshold);
                if keep.iter().any(|k| !k) && keep.iter().any(|k| *k) {
                    self.store.retain(&keep);
                }
            }
        }

        let aif_psnr = match &self.ground_truth {
            Some(_) if self.config.eval_every > 0 && (it + 1) % self.config.eval_every == 0 => Some(self.eval_aif_psnr()?),
            _ => None,
        };
        let row = MetricsRow {
            iteration: it,
            stage,
            view: m,
            loss,
            parts,
            psnr: psnr(&defocused.color, reference)?,
            aif_psnr,
            gaussians: self.store.len(),
            lens: self.store.lens(m),
        };
        self.log.push(row.clone());
        self.iteration += 1;
        Ok(row)
    }

    /// Steps until the schedule's total.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Mean all-in-focus PSNR against the ground truth.
    pub fn eval_aif_psnr(&self) -> Result<f64> {
        let gt = self.ground_truth.as_ref().ok_or_else(|| Error::State("no ground truth attached".into()))?;
        let scene = self.store.scene();
        let mut total = 0.0;
        for (v, img) in self.views.iter().zip(gt) {
            total += psnr(&render_all_in_focus(&scene, &v.camera, &self.raster).color, img)?;
        }
        Ok(total / gt.len() as f64)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            scene: self.store.scene(),
            views: self
                .views
                .iter()
                .enumerate()
                .map(|(m, v)| ViewRecord { camera: v.camera, lens: self.store.lens(m) })
                .collect(),
            iln: Some(self.iln.clone()),
            optim: Some(OptimRecord {
                iteration: self.iteration as u64,
                stage: self.stage(),
                gaussians: self.store.gaussian_state.clone(),
                lenses: self.store.lens_states.clone(),
                iln: Some(self.iln_state.clone()),
            }),
        }
    }
}

fn add_scaled(dst: &mut Image, src: &Image, k: f64) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += k * s;
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub scene: Scene,
    pub lenses: Vec<LensParams>,
    pub iln: IlnParams,
    pub log: Vec<MetricsRow>,
}

/// Convenience wrapper: build a [`Trainer`] and run it to completion.
pub fn train(
    scene: &Scene,
    views: Vec<TrainView>,
    config: TrainConfig,
    weights: LossWeights,
    raster: RasterConfig,
) -> Result<TrainOutput> {
    let mut t = Trainer::new(scene, views, config, weights, raster)?;
    t.run()?;
    Ok(TrainOutput { scene: t.scene(), lenses: t.lenses(), iln: t.iln.clone(), log: t.log })
}
