//! `train` and `render` subcommands.

use std::path::{Path, PathBuf};

use dofsplat::config::{load_dataset, Config};
use dofsplat::io::{write_image, Checkpoint, PoseFile};
use dofsplat::raster::render;
use dofsplat::trainer::Trainer;
use dofsplat::LensParams;
use log::info;

use crate::{display, view_lens, CliError, CliResult, MapKind};

pub fn load_config(path: &Path) -> CliResult<Config> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file {} not found", path.display())));
    }
    Config::load(path).map_err(|e| match e {
        dofsplat::Error::Config(_) => CliError::Usage(format!("{}: {e}", path.display())),
        other => CliError::Runtime(other),
    })
}

/// Trains per `config`; writes the checkpoint and metrics CSV named there.
pub fn train(config: &Path) -> CliResult<Checkpoint> {
    let cfg = load_config(config)?;
    let data = load_dataset(&cfg)?;
    info!("{} views, {} initial Gaussians", data.views.len(), data.scene.len());
    let mut trainer = Trainer::new(&data.scene, data.views, cfg.train.clone(), cfg.loss, cfg.raster)?;
    if let Some(gt) = data.ground_truth {
        trainer = trainer.with_ground_truth(gt)?;
    }
    let every = (trainer.schedule.total / 20).max(1);
    while !trainer.is_done() {
        let row = trainer.step()?;
        if row.iteration % every == 0 {
            info!(
                "iter {} {:?}: loss {:.5}, psnr {:.2}, {} Gaussians",
                row.iteration, row.stage, row.loss, row.psnr, row.gaussians
            );
        }
    }
    let ck = trainer.checkpoint();
    if let Some(dir) = cfg.output.checkpoint.parent() {
        std::fs::create_dir_all(dir).map_err(dofsplat::Error::from)?;
    }
    ck.save(&cfg.output.checkpoint)?;
    info!("checkpoint written to {}", cfg.output.checkpoint.display());
    if let Some(path) = &cfg.output.metrics {
        std::fs::write(path, trainer.metrics_csv()).map_err(dofsplat::Error::from)?;
        info!("metrics written to {}", path.display());
    }
    Ok(ck)
}

/// Options of the `render` subcommand.
#[derive(Debug, Clone, Default)]
pub struct RenderOptions {
    pub view: usize,
    /// Single-record pose file replacing the stored camera.
    pub pose: Option<PathBuf>,
    pub f: Option<f64>,
    pub q: Option<f64>,
    pub aif: bool,
    pub coc: bool,
    pub depth: bool,
    pub output: PathBuf,
}

/// `<stem>_<suffix>.<ext>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{suffix}"),
    };
    path.with_file_name(name)
}

/// Renders the color image to `output`, plus `_depth`/`_coc` siblings when
/// requested. Returns the written paths with their display min/max.
pub fn render_cmd(checkpoint: &Path, opts: &RenderOptions) -> CliResult<Vec<(PathBuf, f64, f64)>> {
    let mut ck = Checkpoint::load(checkpoint)?;
    let q = if opts.aif { Some(0.0) } else { opts.q };
    let (camera, lens) = match &opts.pose {
        Some(path) => {
            let file = PoseFile::load(path)?;
            let [rec] = file.views.as_slice() else {
                return Err(CliError::Usage(format!("{}: expected exactly one pose record", path.display())));
            };
            let lens = match (opts.f.or(rec.f), q.or(rec.q)) {
                (Some(f), Some(q)) => LensParams::new(f, q),
                _ => return Err(CliError::Usage("a pose without f/Q needs --f and --Q".into())),
            };
            lens.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            (rec.camera()?, lens)
        }
        None => {
            let lens = view_lens(&ck, opts.view, opts.f, q)?;
            (ck.views[opts.view].camera, lens)
        }
    };
    let scene = std::mem::take(&mut ck.scene);
    let out = render(&scene, &camera, &lens, &Default::default()).into_maps();
    let mut written = Vec::new();
    let mut kinds = vec![(MapKind::Color, opts.output.clone())];
    if opts.depth {
        kinds.push((MapKind::Depth, sibling(&opts.output, "depth")));
    }
    if opts.coc {
        kinds.push((MapKind::Coc, sibling(&opts.output, "coc")));
    }
    for (kind, path) in kinds {
        let d = display(&out, kind);
        write_image(&path, &d.image)?;
        written.push((path, d.min, d.max));
    }
    Ok(written)
}
