//! Run manifests and the output directory they describe.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "gsloc";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to replay a run. Contains no timestamps, so two runs
/// with the same inputs and flags write identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// The command's resolved flags, output directory excluded.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, FileHash>,
    /// File name inside the output directory to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Input file contents, read once so the hash matches what was parsed.
pub struct Input {
    pub text: String,
    pub hash: FileHash,
}

pub fn read_input(path: &Path) -> Result<Input> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let hash = FileHash { path: path.display().to_string(), sha256: gsloc::sha256_hex(&text) };
    Ok(Input { text, hash })
}

/// Collects outputs for one run and writes the manifest last.
pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start<C: Serialize>(dir: &Path, command: &str, seed: u64, config: &C) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                tool: TOOL.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                seed,
                config: serde_json::to_value(config)?,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        })
    }

    pub fn input(&mut self, role: &str, input: &Input) {
        self.manifest.inputs.insert(role.into(), input.hash.clone());
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.insert(name.into(), gsloc::sha256_hex(content));
        Ok(())
    }

    pub fn finish(self) -> Result<RunManifest> {
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayError {
    InputChanged { role: String, path: String },
    OutputMismatch { file: String },
    UnknownCommand(String),
}

impl ReplayError {
    pub fn kind(&self) -> &'static str {
        match self {
            ReplayError::InputChanged { .. } => "InputChanged",
            ReplayError::OutputMismatch { .. } => "OutputMismatch",
            ReplayError::UnknownCommand(_) => "UnknownCommand",
        }
    }
}

impl fmt::Display for ReplayError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayError::InputChanged { role, path } => {
                write!(f, "input {role} ({path}) no longer matches its recorded hash")
            }
            ReplayError::OutputMismatch { file } => write!(f, "replayed output {file} differs from the recorded hash"),
            ReplayError::UnknownCommand(c) => write!(f, "unknown command {c}"),
        }
    }
}

impl std::error::Error for ReplayError {}

/// Checks recorded input hashes against the files on disk.
pub fn check_inputs(manifest: &RunManifest) -> Result<()> {
    for (role, h) in &manifest.inputs {
        let input = read_input(Path::new(&h.path))?;
        if input.hash.sha256 != h.sha256 {
            return Err(ReplayError::InputChanged { role: role.clone(), path: h.path.clone() }.into());
        }
    }
    Ok(())
}

pub fn compare_outputs(recorded: &RunManifest, replayed: &RunManifest) -> Result<()> {
    for (file, hash) in &recorded.outputs {
        if replayed.outputs.get(file) != Some(hash) {
            return Err(ReplayError::OutputMismatch { file: file.clone() }.into());
        }
    }
    Ok(())
}
