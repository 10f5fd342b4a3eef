//! Reading inputs, writing outputs and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use smart_core::dataset::Vocabularies;
use smart_core::io::{sha256_hex, SCHEMA_VERSION};
use smart_core::tokens::{MotionVocab, MotionVocabSet, RoadVocab};
use smart_core::Scenario;

use crate::ConfigError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one run: what was asked for, with which inputs, producing
/// which outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

impl Manifest {
    pub fn new(subcommand: &str, config: impl Serialize) -> Result<Self> {
        Ok(Manifest {
            schema: SCHEMA_VERSION,
            tool: "smart".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        })
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(path.display().to_string(), sha256_hex(bytes));
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
pub fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Sibling of `out` with its extension replaced by `suffix`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// JSON files of `path` (itself, if it is a file), sorted by name.
pub fn json_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// A scenario read from disk with its source path and raw bytes.
pub struct LoadedScenario {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
    pub scenario: Scenario,
}

impl LoadedScenario {
    pub fn name(&self) -> String {
        self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Every scenario under `path`: JSON files whose top level holds an
/// `agents` field. Other JSON files (manifests, vocabularies) are skipped.
pub fn load_scenarios(path: &Path) -> Result<Vec<LoadedScenario>> {
    let mut out = Vec::new();
    for p in json_files(path)? {
        let bytes = read_bytes(&p)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?;
        if value.get("agents").is_none() {
            continue;
        }
        let text = String::from_utf8_lossy(&bytes);
        let scenario = Scenario::from_json(&text).with_context(|| format!("loading scenario {}", p.display()))?;
        out.push(LoadedScenario { path: p, bytes, scenario });
    }
    if out.is_empty() {
        anyhow::bail!(ConfigError::new("data_dir", format!("no scenario files in {}", path.display())));
    }
    Ok(out)
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario> {
    let bytes = read_bytes(path)?;
    let scenario = Scenario::from_json(&String::from_utf8_lossy(&bytes)).with_context(|| format!("loading scenario {}", path.display()))?;
    Ok(LoadedScenario { path: path.to_path_buf(), bytes, scenario })
}

/// A vocabulary file of any class.
pub enum AnyVocab {
    Motion(MotionVocab),
    Road(RoadVocab),
}

pub fn load_vocab(path: &Path) -> Result<(AnyVocab, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let vocab = if value.get("class").and_then(|c| c.as_str()) == Some(RoadVocab::CLASS) {
        AnyVocab::Road(RoadVocab::from_json(&text).with_context(|| format!("loading {}", path.display()))?)
    } else {
        AnyVocab::Motion(MotionVocab::from_json(&text).with_context(|| format!("loading {}", path.display()))?)
    };
    Ok((vocab, bytes))
}

/// Motion vocabularies plus an optional road vocabulary from a list of
/// files, each tagged with the config field it came from.
pub struct VocabFiles {
    pub motion: Vec<MotionVocab>,
    pub road: Option<RoadVocab>,
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

pub fn load_vocab_files(paths: &[(String, PathBuf)]) -> Result<VocabFiles> {
    let mut out = VocabFiles { motion: Vec::new(), road: None, files: Vec::new() };
    for (field, path) in paths {
        if !path.is_file() {
            anyhow::bail!(ConfigError::new(field.clone(), format!("vocabulary file not found: {}", path.display())));
        }
        let (vocab, bytes) = load_vocab(path)?;
        match vocab {
            AnyVocab::Road(r) => {
                if out.road.replace(r).is_some() {
                    anyhow::bail!(ConfigError::new(field.clone(), "more than one road vocabulary"));
                }
            }
            AnyVocab::Motion(m) => {
                if out.motion.iter().any(|v| v.class == m.class) {
                    anyhow::bail!(ConfigError::new(field.clone(), format!("more than one {} vocabulary", m.class.name())));
                }
                out.motion.push(m);
            }
        }
        out.files.push((path.clone(), bytes));
    }
    out.motion.sort_by_key(|v| v.class.index());
    Ok(out)
}

impl VocabFiles {
    /// The full vocabulary bundle a model needs.
    pub fn into_vocabularies(self, field: &str) -> Result<Vocabularies> {
        if self.motion.is_empty() {
            anyhow::bail!(ConfigError::new(field, "no motion vocabulary given"));
        }
        let road = self.road.ok_or_else(|| ConfigError::new(field, "no road vocabulary given"))?;
        Ok(Vocabularies { motion: MotionVocabSet::new(self.motion), road })
    }
}

/// Worker count: `SMART_THREADS` if set, else the machine's cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var("SMART_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(ConfigError::new("SMART_THREADS", format!("expected a positive integer, got {v:?}")).into()),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}
