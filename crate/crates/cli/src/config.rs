//! Build configuration: a single JSON document, overridable by command-line
//! flags, which in turn override `MRSEG_`-prefixed environment variables.
//! Schema in `docs/config.md`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use mrseg_core::convgen::{Family, GenConfig};
use mrseg_core::templates::Split;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("configured path does not exist: {0}")]
    MissingPath(String),
    #[error("environment variable {name} is not valid: {value:?}")]
    BadEnv { name: String, value: String },
    #[error("family {family} references unknown source {name:?}")]
    UnknownSource { family: Family, name: String },
    #[error("invalid generation parameters: {0}")]
    BadGen(String),
    #[error("refine mode {0:?} requires an endpoint")]
    MissingEndpoint(String),
}

/// How a source's captions are obtained for the positional pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceStyle {
    /// Referring expressions attached via a refs document.
    #[default]
    Captioned,
    /// Category-multiplicity captions (LVIS-like sources without refs).
    Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub instances: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triples: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<PathBuf>,
    #[serde(default)]
    pub style: SourceStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    #[default]
    Off,
    Stub,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineTargets {
    #[default]
    Queries,
    Answers,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub mode: RefineMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    /// Families whose text goes through refinement; empty disables it.
    pub families: Vec<Family>,
    pub targets: RefineTargets,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            mode: RefineMode::Off,
            endpoint: None,
            timeout_ms: 10_000,
            retries: 2,
            max_in_flight: 4,
            families: Vec::new(),
            targets: RefineTargets::Queries,
        }
    }
}

/// Tunable sampling parameters; defaults are the published generation rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub p_self: f64,
    pub p_caption: f64,
    pub positional_annotations: (u32, u32),
    pub hier_parents: (u32, u32),
    pub hier_parts: (u32, u32),
    pub max_triples_per_image: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        let d = GenConfig::default();
        Self {
            p_self: d.p_self,
            p_caption: d.p_caption,
            positional_annotations: d.positional_annotations,
            hier_parents: d.hier_parents,
            hier_parts: d.hier_parts,
            max_triples_per_image: d.max_triples_per_image,
        }
    }
}

/// Effective build configuration after merging environment, file, and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub seed: u64,
    pub workers: usize,
    pub template_dir: PathBuf,
    pub template_split: Split,
    pub gen: GenParams,
    pub sources: BTreeMap<String, SourceConfig>,
    pub families: BTreeMap<Family, Vec<String>>,
    pub refine: RefineConfig,
}

impl BuildConfig {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            p_self: self.gen.p_self,
            p_caption: self.gen.p_caption,
            positional_annotations: self.gen.positional_annotations,
            hier_parents: self.gen.hier_parents,
            hier_parts: self.gen.hier_parts,
            max_triples_per_image: self.gen.max_triples_per_image,
            master_seed: self.seed,
        }
    }

    /// SHA-256 over the canonical serialized config, excluding fields that do
    /// not affect output bytes (worker count). Two builds with the same
    /// digest and seed must produce byte-identical outputs.
    pub fn digest(&self) -> String {
        let mut view = self.clone();
        view.workers = 0;
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        let hash = Sha256::digest(&bytes);
        let mut out = String::with_capacity(64);
        for byte in hash {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Command-line overrides; highest precedence.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub template_dir: Option<PathBuf>,
    pub template_split: Option<Split>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    workers: Option<usize>,
    template_dir: Option<PathBuf>,
    template_split: Option<Split>,
    #[serde(default)]
    gen: Option<GenParams>,
    #[serde(default)]
    sources: BTreeMap<String, SourceConfig>,
    #[serde(default)]
    families: BTreeMap<Family, Vec<String>>,
    #[serde(default)]
    refine: Option<RefineConfig>,
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>, ConfigError> {
    match std::env::var(name) {
        Ok(value) => value.parse::<T>().map(Some).map_err(|_| ConfigError::BadEnv {
            name: name.to_string(),
            value,
        }),
        Err(_) => Ok(None),
    }
}

fn env_split() -> Result<Option<Split>, ConfigError> {
    match std::env::var("MRSEG_TEMPLATE_SPLIT") {
        Ok(value) => match value.as_str() {
            "train" => Ok(Some(Split::Train)),
            "val" => Ok(Some(Split::Val)),
            _ => Err(ConfigError::BadEnv {
                name: "MRSEG_TEMPLATE_SPLIT".into(),
                value,
            }),
        },
        Err(_) => Ok(None),
    }
}

/// Load the build configuration: defaults, then `MRSEG_*` environment
/// variables, then the config file, then command-line flags. Relative paths
/// in the file resolve against the file's directory; every configured path
/// must exist.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<BuildConfig, ConfigError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: display.clone(),
        source,
    })?;
    let raw: RawConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
        path: display.clone(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let seed = overrides
        .seed
        .or(raw.seed)
        .or(env_parse::<u64>("MRSEG_SEED")?)
        .unwrap_or(0);
    let workers = overrides
        .workers
        .or(raw.workers)
        .or(env_parse::<usize>("MRSEG_WORKERS")?)
        .unwrap_or(1)
        .max(1);
    let template_dir = overrides
        .template_dir
        .clone()
        .or_else(|| raw.template_dir.as_ref().map(|d| base.join(d)))
        .or_else(|| std::env::var("MRSEG_TEMPLATE_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("templates"));
    let template_split = overrides
        .template_split
        .or(raw.template_split)
        .or(env_split()?)
        .unwrap_or(Split::Train);

    // Environment refiner settings apply where the file left the default.
    let file_refine = raw.refine.clone();
    let mut refine = file_refine.clone().unwrap_or_default();
    if refine.endpoint.is_none() {
        refine.endpoint = std::env::var("MRSEG_REFINER_ENDPOINT").ok();
    }
    let defaults = RefineConfig::default();
    if let Some(timeout) = env_parse::<u64>("MRSEG_REFINER_TIMEOUT_MS")? {
        if file_refine.as_ref().map_or(true, |r| r.timeout_ms == defaults.timeout_ms) {
            refine.timeout_ms = timeout;
        }
    }
    if let Some(retries) = env_parse::<u32>("MRSEG_REFINER_RETRIES")? {
        if file_refine.as_ref().map_or(true, |r| r.retries == defaults.retries) {
            refine.retries = retries;
        }
    }
    if refine.mode == RefineMode::Http && refine.endpoint.is_none() {
        return Err(ConfigError::MissingEndpoint("http".into()));
    }

    let mut sources = BTreeMap::new();
    for (name, mut source) in raw.sources {
        source.instances = base.join(&source.instances);
        for opt in [
            &mut source.refs,
            &mut source.parts,
            &mut source.triples,
            &mut source.descriptions,
        ] {
            if let Some(p) = opt.as_mut() {
                *p = base.join(&p);
            }
        }
        sources.insert(name, source);
    }

    let config = BuildConfig {
        seed,
        workers,
        template_dir,
        template_split,
        gen: raw.gen.unwrap_or_default(),
        sources,
        families: raw.families,
        refine,
    };

    for (family, names) in &config.families {
        for name in names {
            if !config.sources.contains_key(name) {
                return Err(ConfigError::UnknownSource {
                    family: *family,
                    name: name.clone(),
                });
            }
        }
    }
    config
        .gen_config()
        .validate()
        .map_err(ConfigError::BadGen)?;

    if !config.template_dir.exists() {
        return Err(ConfigError::MissingPath(
            config.template_dir.display().to_string(),
        ));
    }
    for source in config.sources.values() {
        for p in [Some(&source.instances), source.refs.as_ref(), source.parts.as_ref(),
                  source.triples.as_ref(), source.descriptions.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.display().to_string()));
            }
        }
    }
    Ok(config)
}
