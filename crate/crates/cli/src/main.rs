//! `zmono`: two-stage city reconstruction from facade-deficient point
//! clouds. Subcommands mirror the pipeline stages and communicate through
//! files; see `--help` per subcommand and the repository README.

mod commands;
mod config;
mod manifest;

use anyhow::Context;
use clap::{Parser, Subcommand};
use config::RunConfig;
use manifest::RunManifest;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "zmono", version, about = "Watertight 2.5D city reconstruction from sparse satellite-style point clouds")]
struct Cli {
    /// TOML configuration file; defaults cover the reference protocol.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = automatic). Outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Record deterministic mode in manifests (the pipeline is
    /// deterministic regardless).
    #[arg(long, global = true)]
    deterministic: Option<bool>,

    /// Re-run with the configuration and inputs of a previous run.
    #[arg(long, global = true)]
    from_manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark: scene, cameras, views, clouds.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the z-monotone field to a point cloud (tiled).
    Fit {
        /// Input PLY point cloud (world meters); defaults to the manifest
        /// input with --from-manifest.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a world-space mesh from fitted tiles.
    Extract {
        /// tiles.json written by `fit`; defaults to the manifest input
        /// with --from-manifest.
        #[arg(long)]
        tiles: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// height | mc | naive128 | naive256
        #[arg(long)]
        method: Option<String>,
    },
    /// Bake and refine a texture atlas against posed views.
    Texture {
        /// Mesh OBJ; defaults to the manifest input with --from-manifest.
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Camera list; defaults to the manifest input with
        /// --from-manifest.
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// View image directory; defaults to the manifest input with
        /// --from-manifest.
        #[arg(long)]
        views: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stop after the basic bake (no refinement).
        #[arg(long)]
        basic_only: bool,
    },
    /// Geometry (and optionally image) metrics against ground truth.
    Eval {
        /// Predicted mesh OBJ; defaults to the manifest input with
        /// --from-manifest.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Ground-truth PLY cloud; defaults to the manifest input with
        /// --from-manifest.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pred_views: Option<PathBuf>,
        #[arg(long)]
        gt_views: Option<PathBuf>,
    },
}

/// Exit codes: 0 success, 3 divergence guard, 4 enhancer hook failure,
/// 2 bad input and anything else that reaches the top level.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<zmono_core::Error>() {
        use zmono_core::Error::*;
        match core {
            Diverged { .. } => 3,
            HookFailed { .. } => 4,
            _ => 2,
        }
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    // Manifest re-runs take configuration (and inputs, below) from the
    // recorded run.
    let from_manifest = cli
        .from_manifest
        .as_ref()
        .map(RunManifest::load)
        .transpose()?;

    let mut cfg = if let Some(m) = &from_manifest {
        m.config.clone()
    } else if let Some(path) = &cli.config {
        RunConfig::load(path)?
    } else {
        RunConfig::default()
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(det) = cli.deterministic {
        cfg.deterministic = det;
    }

    if cfg.threads > 0 {
        // Tests may run several commands in-process; a pre-built pool is
        // not an error.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }

    let manifest_input = |idx: usize| -> anyhow::Result<PathBuf> {
        let m = from_manifest
            .as_ref()
            .context("--from-manifest required to omit input paths")?;
        Ok(m.inputs
            .get(idx)
            .with_context(|| format!("manifest lacks input #{idx}"))?
            .path
            .clone())
    };

    match cli.command {
        Command::Simulate { out } => commands::cmd_simulate(&cfg, &out),
        Command::Fit { input, out } => {
            let input = match input {
                Some(p) => p,
                None => manifest_input(0)?,
            };
            commands::cmd_fit(&cfg, &input, &out)
        }
        Command::Extract { tiles, out, method } => {
            if let Some(m) = method {
                cfg.extract.method = m;
            }
            let tiles = match tiles {
                Some(p) => p,
                None => manifest_input(0)?,
            };
            commands::cmd_extract(&cfg, &tiles, &out)
        }
        Command::Texture {
            mesh,
            cameras,
            views,
            out,
            basic_only,
        } => {
            let mesh = match mesh {
                Some(p) => p,
                None => manifest_input(0)?,
            };
            let cameras = match cameras {
                Some(p) => p,
                None => manifest_input(1)?,
            };
            let views = match views {
                Some(p) => p,
                None => manifest_input(2)?,
            };
            commands::cmd_texture(&cfg, &mesh, &cameras, &views, &out, basic_only)
        }
        Command::Eval {
            pred,
            gt,
            out,
            pred_views,
            gt_views,
        } => {
            let pred = match pred {
                Some(p) => p,
                None => manifest_input(0)?,
            };
            let gt = match gt {
                Some(p) => p,
                None => manifest_input(1)?,
            };
            commands::cmd_eval(
                &cfg,
                &pred,
                &gt,
                &out,
                pred_views.as_deref(),
                gt_views.as_deref(),
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
