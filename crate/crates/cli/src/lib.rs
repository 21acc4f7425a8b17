//! Command implementations and the HTTP refocus service behind the
//! `dofsplat` binary.

pub mod commands;
pub mod serve;

use dofsplat::io::Checkpoint;
use dofsplat::raster::{render, RasterConfig, RenderOutput};
use dofsplat::{Image, LensParams};

/// Exit status: success.
pub const EXIT_OK: i32 = 0;
/// Exit status: the command ran and failed.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status: bad arguments or configuration.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] dofsplat::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Which rendered map to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapKind {
    Color,
    Depth,
    Coc,
}

impl MapKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "color" => Some(MapKind::Color),
            "depth" => Some(MapKind::Depth),
            "coc" => Some(MapKind::Coc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Color => "color",
            MapKind::Depth => "depth",
            MapKind::Coc => "coc",
        }
    }
}

/// Lens for view `view`: trained values unless overridden.
pub fn view_lens(ck: &Checkpoint, view: usize, f: Option<f64>, q: Option<f64>) -> CliResult<LensParams> {
    let trained = ck
        .views
        .get(view)
        .ok_or_else(|| CliError::Usage(format!("view {view} out of range (checkpoint has {})", ck.views.len())))?
        .lens;
    let lens = LensParams::new(f.unwrap_or(trained.focal_distance), q.unwrap_or(trained.aperture));
    lens.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(lens)
}

pub fn render_view(ck: &Checkpoint, view: usize, lens: &LensParams, cfg: &RasterConfig) -> RenderOutput {
    render(&ck.scene, &ck.views[view].camera, lens, cfg).into_maps()
}

/// A map scaled to `[0, 1]` for display, with the constants used.
#[derive(Debug, Clone)]
pub struct DisplayMap {
    pub image: Image,
    pub min: f64,
    pub max: f64,
}

/// Min-max normalization over the frame; a constant map becomes zeros.
pub fn normalize_for_display(map: &Image) -> DisplayMap {
    let min = map.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (min, max) = if map.data.is_empty() { (0.0, 0.0) } else { (min, max) };
    let range = max - min;
    let data = map.data.iter().map(|v| if range > 0.0 { (v - min) / range } else { 0.0 }).collect();
    DisplayMap { image: Image { data, ..map.clone() }, min, max }
}

/// The requested map of a render, ready to encode. Depth and CoC are
/// alpha-normalized, then min-max scaled.
pub fn display(out: &RenderOutput, kind: MapKind) -> DisplayMap {
    match kind {
        MapKind::Color => DisplayMap { image: out.color.clone(), min: 0.0, max: 1.0 },
        MapKind::Depth => normalize_for_display(&out.normalized_depth()),
        MapKind::Coc => normalize_for_display(&out.normalized_coc()),
    }
}

/// Sets the global rasterizer thread count from `DOFSPLAT_THREADS`.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("DOFSPLAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("DOFSPLAT_THREADS must be a positive integer, got {v:?}")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
