//! `gsloc` command line: seeded batch experiments that write CSV/text reports
//! plus a replayable `manifest.json` into an output directory.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub use commands::{BiasArgs, BuildDbArgs, LocalizeArgs, SceneGenArgs, SweepArgs};
pub use manifest::{ReplayError, RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "gsloc", version, about = "Feature-based localization experiments on synthetic Gaussian scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene file.
    SceneGen(SceneGenArgs),
    /// Empirical vs analytic bias of the blending optimum, and feature-distance histograms.
    BiasExperiment(BiasArgs),
    /// Sample landmarks by keypoint consensus and fuse their features.
    BuildDb(BuildDbArgs),
    /// Coarse-to-fine localization benchmark over seeded queries.
    Localize(LocalizeArgs),
    /// Post-filter precision of LGCV over a threshold grid.
    LgcvSweep(SweepArgs),
    /// Re-run a manifest into a new directory and check the outputs match.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<RunManifest> {
    match cli.command {
        Command::SceneGen(a) => commands::scene_gen(&a),
        Command::BiasExperiment(a) => commands::bias_experiment(&a),
        Command::BuildDb(a) => commands::build_db(&a),
        Command::Localize(a) => commands::localize(&a),
        Command::LgcvSweep(a) => commands::lgcv_sweep(&a),
        Command::Replay { manifest, out } => replay(&RunManifest::load(&manifest)?, out),
    }
}

/// Replays `recorded` into `out`; fails unless every recorded output hash is
/// reproduced.
pub fn replay(recorded: &RunManifest, out: PathBuf) -> Result<RunManifest> {
    fn args<T: serde::de::DeserializeOwned>(m: &RunManifest) -> Result<T> {
        Ok(serde_json::from_value(m.config.clone())?)
    }
    manifest::check_inputs(recorded)?;
    let replayed = match recorded.command.as_str() {
        "scene-gen" => commands::scene_gen(&SceneGenArgs { out, ..args(recorded)? }),
        "bias-experiment" => commands::bias_experiment(&BiasArgs { out, ..args(recorded)? }),
        "build-db" => commands::build_db(&BuildDbArgs { out, ..args(recorded)? }),
        "localize" => commands::localize(&LocalizeArgs { out, ..args(recorded)? }),
        "lgcv-sweep" => commands::lgcv_sweep(&SweepArgs { out, ..args(recorded)? }),
        other => Err(ReplayError::UnknownCommand(other.into()).into()),
    }?;
    manifest::compare_outputs(recorded, &replayed)?;
    Ok(replayed)
}

/// Stable machine-readable name for the first recognised error in the chain.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<gsloc::Error>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<ReplayError>() {
            return e.kind();
        }
        if cause.is::<std::io::Error>() {
            return "Io";
        }
        if cause.is::<serde_json::Error>() {
            return "Parse";
        }
    }
    "Error"
}

/// One-line JSON error record for stderr.
pub fn error_line(err: &anyhow::Error) -> String {
    serde_json::json!({ "error": error_kind(err), "message": format!("{err:#}") }).to_string()
}
