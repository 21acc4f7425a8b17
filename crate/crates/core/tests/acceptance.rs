//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to
//! see the report.

mod common;

use std::time::Instant;

use common::*;
use dofsplat::camera_init::initialize_views;
use dofsplat::config::{load_dataset, Config, SyntheticConfig};
use dofsplat::dof::kernel_variance;
use dofsplat::io::Checkpoint;
use dofsplat::losses::{l_detail, l_rec, mask_correlation_loss, mask_entropy_reg, LossWeights};
use dofsplat::raster::{render, render_plain, RasterConfig};
use dofsplat::synthetic::{generate_synthetic, SyntheticSpec};
use dofsplat::trainer::{TrainConfig, Trainer};
use dofsplat::{CameraPose, Image, LensParams};
use rand::Rng;

type Outcome = Result<String, String>;

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let cam = CameraPose::centered(16, 16, 18.0);
    let (mut checked, mut failures) = (0, Vec::new());
    for seed in 0..24u64 {
        let mut r = rng(seed);
        let n = r.random_range(1..=8);
        let scene = random_scene(&mut r, n, &cam, (seed % 2) as u8);
        let lens = random_lens(&mut r);
        let probe = Probe::random(&mut r, 16, 16);
        let cfg = RasterConfig { coc_z_grad: seed >= 12, ..Default::default() };
        let rep = check_render_gradients(&scene, &cam, lens, &cfg, &probe, 1e-6);
        checked += rep.checked;
        failures.extend(rep.failures.into_iter().map(|f| format!("scene {seed}: {f}")));
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!("24 scenes, {checked} gradients, {} mismatches, {secs:.1}s", failures.len());
    if failures.is_empty() && secs < 60.0 {
        Ok(summary)
    } else {
        Err(format!("{summary}; {:?}", failures.iter().take(3).collect::<Vec<_>>()))
    }
}

fn pinhole_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut r = rng(500 + seed);
        let cam = CameraPose::centered(24, 24, 24.0);
        let n = r.random_range(1..=20);
        let scene = random_scene(&mut r, n, &cam, (seed % 2) as u8);
        let lens = LensParams::new(r.random_range(0.5..10.0), 0.0);
        let cfg = RasterConfig::default();
        worst = worst.max(render(&scene, &cam, &lens, &cfg).color.max_abs_diff(&render_plain(&scene, &cam, &cfg).color));
    }
    let msg = format!("50 scenes, max |diff| {worst:e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn kernel_fit() -> Outcome {
    let mut out = Vec::new();
    let mut ok = true;
    for r in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let fitted = grid_fit_variance(r);
        let err = (fitted - kernel_variance(r)).abs() / (r * r);
        ok &= err <= 1e-4;
        out.push(format!("R={r}: {err:.1e}"));
    }
    let msg = format!("|grid - formula| / R^2: {}", out.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn coc_map() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut pixels = 0;
    for (f, q) in [(3.0, 12.0), (6.0, 20.0), (2.0, 8.0)] {
        let spec = SyntheticSpec::two_plane(48, vec![LensParams::new(f, q)]);
        let cfg = RasterConfig::default();
        let data = generate_synthetic(&spec, 0, &cfg).map_err(|e| e.to_string())?;
        let coc = render(&data.scene, &data.views[0].camera, &LensParams::new(f, q), &cfg).normalized_coc();
        let expect = |z: f64| q / 2.0 * (1.0 / z - 1.0 / f).abs();
        let (near, far) = (expect(2.0), expect(6.0));
        let margin = (2.0 * near.max(far)).ceil() as usize + 2;
        for y in 4..44 {
            for x in 2..46 {
                let want = if x + margin < 24 {
                    near
                } else if x >= 24 + margin {
                    far
                } else {
                    continue;
                };
                let got = coc.at(x, y, 0);
                // in-focus plane: compare on the scale of the other plane
                let scale = if want == 0.0 { near.max(far) } else { want };
                worst = worst.max((got - want).abs() / scale);
                pixels += 1;
            }
        }
    }
    let msg = format!("{pixels} plane pixels over 3 lenses, max relative error {:.3}%", 100.0 * worst);
    if worst <= 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn camera_recovery() -> Outcome {
    let start = Instant::now();
    let targets = [(5.0, 42.0), (5.4, 47.0), (6.6, 43.5)];
    let mut worst = (0.0f64, 0.0f64);
    for (seed, &(f, q)) in targets.iter().enumerate() {
        let spec = SyntheticSpec::two_plane(48, vec![LensParams::new(f, q); 2]);
        let cfg = RasterConfig::default();
        let data = generate_synthetic(&spec, seed as u64, &cfg).map_err(|e| e.to_string())?;
        let mut views = data.views.clone();
        initialize_views(&data.scene, &mut views, 15.0).map_err(|e| e.to_string())?;
        let tc = TrainConfig { lens_only: true, total: Some(1500), seed: seed as u64, ..Default::default() };
        let mut t = Trainer::new(&data.scene, views, tc, LossWeights::default(), cfg).map_err(|e| e.to_string())?;
        t.run().map_err(|e| e.to_string())?;
        for l in t.lenses() {
            worst.0 = worst.0.max((1.0 / l.focal_distance - 1.0 / f).abs() * f);
            worst.1 = worst.1.max((l.aperture - q).abs() / q);
        }
    }
    let msg = format!(
        "3 seeds x 2 views, 1500 iterations: worst diopter error {:.3}%, worst Q error {:.3}%, {:.0}s",
        100.0 * worst.0,
        100.0 * worst.1,
        start.elapsed().as_secs_f64()
    );
    if worst.0 <= 0.02 && worst.1 <= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ablation_run(seed: u64, detail: bool) -> Result<f64, String> {
    let mut cfg = Config::default();
    cfg.data.synthetic = Some(SyntheticConfig { size: 24, seed, ..Default::default() });
    cfg.train.scale = 0.05;
    cfg.train.seed = seed;
    cfg.train.detail_enhance = detail;
    let ds = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(&ds.scene, ds.views, cfg.train, cfg.loss, cfg.raster)
        .and_then(|t| t.with_ground_truth(ds.ground_truth.unwrap_or_default()))
        .map_err(|e| e.to_string())?;
    t.run().map_err(|e| e.to_string())?;
    t.eval_aif_psnr().map_err(|e| e.to_string())
}

fn detail_ablation() -> Outcome {
    let mut gains = Vec::new();
    for seed in 0..3 {
        gains.push(ablation_run(seed, true)? - ablation_run(seed, false)?);
    }
    let mean = gains.iter().sum::<f64>() / 3.0;
    let msg = format!(
        "all-in-focus PSNR gain per seed {:?} dB, mean {mean:.3} dB",
        gains.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>()
    );
    if mean >= 0.1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn tiled_vs_brute_force() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..16u64 {
        let mut r = rng(900 + seed);
        let cam = CameraPose::centered(32, 32, 30.0);
        let n = r.random_range(1..=64);
        let scene = random_scene(&mut r, n, &cam, (seed % 2) as u8);
        let lens = random_lens(&mut r);
        let cfg = RasterConfig { tile_size: [4, 8, 16, 13][seed as usize % 4], ..Default::default() };
        let tiled = render(&scene, &cam, &lens, &cfg);
        let oracle = brute_force(&scene, &cam, Some(lens), &cfg);
        for (a, b) in [(&tiled.color, &oracle.color), (&tiled.depth, &oracle.depth), (&tiled.coc, &oracle.coc)] {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    let msg = format!("16 scenes, max |diff| {worst:e}");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fd_max_error(x: &Image, analytic: &Image, f: impl Fn(&Image) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.data.len() {
        let num = central_diff(
            |d| {
                let mut y = x.clone();
                y.data[i] += d;
                f(&y)
            },
            0.0,
            1e-6,
        );
        let a = analytic.data[i];
        let err = (a - num).abs();
        worst = worst.max(if err <= 1e-9 { 0.0 } else { err / a.abs().max(num.abs()) });
    }
    worst
}

fn loss_properties() -> Outcome {
    let mut r = rng(77);
    let mut img = |c: usize, lo: f64, hi: f64| {
        Image::from_vec(8, 8, c, (0..64 * c).map(|_| r.random_range(lo..hi)).collect()).unwrap()
    };
    let mask = img(1, 0.05, 0.95);
    let (sharp, defocused, reference) = (img(3, 0.0, 1.0), img(3, 0.0, 1.0), img(3, 0.0, 1.0));
    let coc = img(1, 0.0, 3.0);
    let w = LossWeights::default();

    let affine = |k: f64| Image::from_vec(8, 8, 1, mask.data.iter().map(|m| k * (1.0 - m) + 0.5).collect()).unwrap();
    let mk = |c: &Image| mask_correlation_loss(&mask, c).ok().flatten().map(|g| g.value).unwrap_or(f64::NAN);
    let (pos, neg) = (mk(&affine(1.7)), mk(&affine(-0.6)));
    let reg_at = |m: f64| mask_entropy_reg(&Image::filled(1, 1, 1, m), false);
    let e = (-1.0f64).exp();
    let peak = (1..2000).map(|i| i as f64 / 2000.0).max_by(|a, b| reg_at(*a).value.total_cmp(&reg_at(*b).value)).unwrap();

    let d = l_detail(&mask, &sharp, &defocused, &reference, &w).map_err(|e| e.to_string())?;
    let fd = [
        fd_max_error(&sharp, &l_rec(&sharp, &reference, &w).unwrap().grad, |x| l_rec(x, &reference, &w).unwrap().value),
        fd_max_error(&mask, &d.d_mask, |m| l_detail(m, &sharp, &defocused, &reference, &w).unwrap().value),
        fd_max_error(&sharp, &d.d_sharp, |x| l_detail(&mask, x, &defocused, &reference, &w).unwrap().value),
        fd_max_error(&defocused, &d.d_defocused, |x| l_detail(&mask, &sharp, x, &reference, &w).unwrap().value),
        fd_max_error(&mask, &mask_correlation_loss(&mask, &coc).unwrap().unwrap().grad, |m| {
            mask_correlation_loss(m, &coc).unwrap().unwrap().value
        }),
        fd_max_error(&mask, &mask_entropy_reg(&mask, false).grad, |m| mask_entropy_reg(m, false).value),
    ];
    let fd_worst = fd.iter().cloned().fold(0.0, f64::max);
    let msg = format!(
        "L_mk affine {pos:.1e}, anti {neg:.12}; L_reg peak at {peak:.4} (1/e = {e:.4}); worst FD relative error {fd_worst:.1e}"
    );
    if pos.abs() < 1e-9 && (neg - 2.0).abs() < 1e-9 && (peak - e).abs() <= 1e-3 && fd_worst < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism() -> Outcome {
    let run = || -> Result<Trainer, String> {
        let mut cfg = Config::default();
        cfg.data.synthetic = Some(SyntheticConfig { size: 16, seed: 3, ..Default::default() });
        cfg.train.scale = 0.01;
        cfg.train.seed = 11;
        let ds = load_dataset(&cfg).map_err(|e| e.to_string())?;
        let mut t = Trainer::new(&ds.scene, ds.views, cfg.train, cfg.loss, cfg.raster).map_err(|e| e.to_string())?;
        t.run().map_err(|e| e.to_string())?;
        Ok(t)
    };
    let (a, b) = (run()?, run()?);
    let same_csv = a.metrics_csv() == b.metrics_csv();
    let ck = a.checkpoint();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).map_err(|e| e.to_string())?;
    let cfg = RasterConfig::default();
    let identical = ck.views.iter().zip(&back.views).all(|(v, w)| {
        let x = render(&ck.scene, &v.camera, &v.lens, &cfg);
        let y = render(&back.scene, &w.camera, &w.lens, &cfg);
        x.color.data == y.color.data && x.depth.data == y.depth.data && x.coc.data == y.coc.data
    });
    let msg = format!(
        "{} CSV rows identical: {same_csv}; {} views render bit-identical after round-trip: {identical}",
        a.log.len(),
        ck.views.len()
    );
    if same_csv && identical {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient oracle", gradient_oracle),
        ("pinhole equivalence", pinhole_equivalence),
        ("kernel fit", kernel_fit),
        ("CoC map", coc_map),
        ("camera recovery", camera_recovery),
        ("detail-enhancement ablation", detail_ablation),
        ("tiled vs brute force", tiled_vs_brute_force),
        ("loss properties", loss_properties),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
