//! Run directories: the resolved config, the manifest that tracks artifacts
//! and stage status, and the lock that keeps two commands apart.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use hypercell_core::SearchConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOCK_FILE: &str = ".lock";

/// Fixed artifact names inside a run directory.
pub mod names {
    pub const TABLE: &str = "latency_table.json";
    pub const CHECKPOINT: &str = "search.ckpt";
    pub const METRICS: &str = "metrics.csv";
    pub const TRAJECTORY: &str = "trajectory.json";
    pub const ARCHITECTURE: &str = "architecture.json";
    pub const WEIGHTS: &str = "weights.bin";
    pub const RETRAIN: &str = "retrain.json";
    pub const RANDOM: &str = "random_search.json";
    pub const PLOTS: &str = "plots";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    BenchLat,
    Search,
    Derive,
    Retrain,
    Eval,
    RandomSearch,
    ExportPlots,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum StageStatus {
    Running,
    Complete,
    Failed { message: String },
}

/// Artifact paths. Files inside the run directory are stored relative to it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Artifacts {
    pub latency_table: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub architecture: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub retrain_report: Option<PathBuf>,
    pub random_search: Option<PathBuf>,
    /// One report per evaluated split.
    pub eval: BTreeMap<String, PathBuf>,
    pub plots: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Artifacts,
    pub stages: BTreeMap<Stage, StageStatus>,
}

impl RunManifest {
    pub fn new(config: &SearchConfig) -> Self {
        let hash = config.hash();
        Self {
            version: MANIFEST_VERSION,
            run_id: format!("{}-s{}", &hash[..12], config.seed),
            config_hash: hash,
            seed: config.seed,
            artifacts: Artifacts::default(),
            stages: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let bad = |msg: String| CliError::BadArtifact {
            what: "manifest",
            path: path.to_path_buf(),
            msg,
        };
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let version = raw.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(MANIFEST_VERSION)) {
            return Err(bad(format!(
                "unsupported schema version {version:?} (expected {MANIFEST_VERSION})"
            )));
        }
        serde_json::from_value(raw).map_err(|e| bad(e.to_string()))
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.get(&stage) == Some(&StageStatus::Complete)
    }
}

/// Parses a TOML config; absent fields take their defaults.
pub fn parse_config(text: &str) -> CliResult<SearchConfig> {
    let config: SearchConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> CliResult<SearchConfig> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(config: &SearchConfig) -> String {
    toml::to_string(config).expect("config serializes to TOML")
}

/// Writes through a temporary sibling and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

/// Exclusive ownership of a run directory for the life of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(CliError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// An opened, locked run directory with its resolved configuration.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub config: SearchConfig,
    pub manifest: RunManifest,
    _lock: RunLock,
}

impl Run {
    /// Opens `dir`, creating it on first use. A directory created under a
    /// different config is refused unless `force`, which starts it over.
    pub fn open(dir: &Path, config: SearchConfig, force: bool) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let lock = RunLock::acquire(dir)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let hash = config.hash();
        let manifest = if manifest_path.exists() {
            let m = RunManifest::load(&manifest_path)?;
            if m.config_hash == hash {
                m
            } else if force {
                RunManifest::new(&config)
            } else {
                return Err(CliError::HashMismatch {
                    stored: m.config_hash,
                    found: hash,
                    source_name: "the requested config".into(),
                });
            }
        } else {
            RunManifest::new(&config)
        };
        let run = Self {
            dir: dir.to_path_buf(),
            config,
            manifest,
            _lock: lock,
        };
        write_atomic(&run.dir.join(CONFIG_FILE), config_to_toml(&run.config).as_bytes())?;
        run.save()?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Resolves a manifest entry against the run directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn save(&self) -> CliResult<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn set_stage(&mut self, stage: Stage, status: StageStatus) -> CliResult<()> {
        self.manifest.stages.insert(stage, status);
        self.save()
    }

    /// Refuses to clobber an existing artifact unless forced.
    pub fn guard(&self, path: &Path, force: bool) -> CliResult<()> {
        if path.exists() && !force {
            return Err(CliError::Exists(path.to_path_buf()));
        }
        Ok(())
    }

    /// Checks that an upstream artifact was produced under this run's config.
    pub fn check_hash(&self, found: &str, source_name: &str) -> CliResult<()> {
        if found != self.manifest.config_hash {
            return Err(CliError::HashMismatch {
                stored: self.manifest.config_hash.clone(),
                found: found.to_string(),
                source_name: source_name.to_string(),
            });
        }
        Ok(())
    }
}
