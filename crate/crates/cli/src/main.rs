use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use dofsplat::io::Checkpoint;
use dofsplat_cli::commands::{load_config, render_cmd, train, RenderOptions};
use dofsplat_cli::serve::{run, AppState};
use dofsplat_cli::{init_threads, CliError, CliResult, EXIT_OK};

/// Depth-of-field Gaussian splatting: train, render, serve.
#[derive(Debug, Parser)]
#[command(name = "dofsplat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a TOML config; writes the checkpoint and metrics CSV.
    Train {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Render one view of a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// JSON file with a single pose record to render instead of a stored view.
        #[arg(long)]
        pose: Option<PathBuf>,
        /// Focal distance (default: the trained value).
        #[arg(long)]
        f: Option<f64>,
        /// Aperture parameter (default: the trained value).
        #[arg(long = "Q")]
        q: Option<f64>,
        /// All-in-focus, same as --Q 0.
        #[arg(long, conflicts_with = "q")]
        aif: bool,
        /// Also write the CoC map to <stem>_coc.<ext>.
        #[arg(long)]
        coc: bool,
        /// Also write the depth map to <stem>_depth.<ext>.
        #[arg(long)]
        depth: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// HTTP refocus service for the viewer.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional TOML config for serve.* and raster.* settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
        /// Viewer bundle directory.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Train { config } => {
            train(&config)?;
        }
        Command::Render { checkpoint, view, pose, f, q, aif, coc, depth, output } => {
            let opts = RenderOptions { view, pose, f, q, aif, coc, depth, output };
            for (path, min, max) in render_cmd(&checkpoint, &opts)? {
                println!("{} min={min} max={max}", path.display());
            }
        }
        Command::Serve { checkpoint, config, port, host, static_dir } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => Default::default(),
            };
            let ck = Checkpoint::load(&checkpoint)?;
            let mut addr = cfg.serve.bind.clone();
            if host.is_some() || port.is_some() {
                let (h, p) = addr.rsplit_once(':').unwrap_or(("127.0.0.1", "8080"));
                addr = format!("{}:{}", host.as_deref().unwrap_or(h), port.map(|p| p.to_string()).unwrap_or(p.into()));
            }
            let state = Arc::new(AppState::new(ck, cfg.raster, cfg.serve.workers, cfg.serve.cache_entries)?);
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::Runtime(dofsplat::Error::Io(e)))?;
            rt.block_on(run(state, static_dir.or(cfg.serve.static_dir), &addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `dofsplat --help` for usage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
