//! Workspace-directory conventions: artifact file names, the run manifest,
//! and missing-input errors that name the producing subcommand.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tabtext::tabular::SerializationVariant;

/// A required pipeline input that no subcommand has produced yet. Mapped to
/// exit code 2 in `main`.
#[derive(Debug, thiserror::Error)]
#[error("missing {path}: run `tabtext {producer}` first")]
pub struct MissingArtifact {
    pub path: String,
    pub producer: &'static str,
}

pub fn require(dir: &Path, name: &str, producer: &'static str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(MissingArtifact {
            path: path.display().to_string(),
            producer,
        }
        .into());
    }
    Ok(path)
}

pub fn records_name(variant: SerializationVariant, task: &str, split: &str) -> String {
    format!("records-{variant}-{task}.{split}.jsonl")
}

pub fn vocab_name(variant: SerializationVariant) -> String {
    format!("vocab-{variant}.json")
}

pub fn pretrained_name(variant: SerializationVariant) -> String {
    format!("pretrained-{variant}.ckpt")
}

pub fn model_name(variant: SerializationVariant, task: &str) -> String {
    format!("model-{variant}-{task}.ckpt")
}

/// Parse a TOML config file, or fall back to the type's defaults when no
/// path was given.
pub fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

pub fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

pub fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open_reader(path)?)
        .with_context(|| format!("parsing {}", path.display()))
}

/// Reproducibility record written by every run. Deliberately contains no
/// timestamps: rerunning a step must produce identical bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub package: &'static str,
    pub version: &'static str,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

pub fn write_manifest<C: Serialize>(
    dir: &Path,
    step: &str,
    command: String,
    config: &C,
    seed: Option<u64>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let config = serde_json::to_value(config)?;
    let digest = Sha256::digest(serde_json::to_string(&config)?.as_bytes());
    let config_sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
    let names = |paths: &[PathBuf]| {
        paths
            .iter()
            .map(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string())
            })
            .collect()
    };
    let manifest = RunManifest {
        command,
        config,
        config_sha256,
        seed,
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        inputs: names(inputs),
        outputs: names(outputs),
    };
    write_json_pretty(&dir.join(format!("manifest-{step}.json")), &manifest)
}
