//! Layered configuration: built-in defaults, then a TOML file, then
//! command-line overrides (`--set key=value` and dedicated flags).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use uncanny_core::compositing::SoftenConfig;
use uncanny_core::dataset::{AlignConfig, RetryPolicy};
use uncanny_core::finetune::FinetuneConfig;
use uncanny_core::generators::GeneratorConfig;
use uncanny_core::inference::DecodeNoise;
use uncanny_core::inversion::InversionConfig;
use uncanny_core::losses::LossConfig;

use crate::error::CliError;

/// Name of the resolved configuration written next to directory outputs.
pub const RESOLVED_NAME: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSection {
    /// `toy` (64 px) or `full` (1024 px); used when no base checkpoint is given.
    pub preset: String,
    pub seed: u64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            seed: 0,
        }
    }
}

impl GeneratorSection {
    pub fn config(&self) -> Result<GeneratorConfig, CliError> {
        match self.preset.as_str() {
            "toy" => Ok(GeneratorConfig::toy()),
            "full" => Ok(GeneratorConfig::full()),
            other => Err(CliError::Config(format!(
                "generator.preset must be toy or full, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealifySection {
    pub decode_noise: DecodeNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeSection {
    #[serde(flatten)]
    pub soften: SoftenConfig,
    /// `fixture`, `palette` or `external`.
    pub parser: String,
    /// Program and leading arguments of the external parser.
    pub parser_command: Vec<String>,
    pub palette_tolerance: f32,
}

impl Default for CompositeSection {
    fn default() -> Self {
        Self {
            soften: SoftenConfig::default(),
            parser: "fixture".into(),
            parser_command: Vec::new(),
            palette_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSection {
    /// Embedder for FID and identity similarity: `toy` or `pretrained`.
    pub backend: String,
    pub embedder_weights: Option<PathBuf>,
    /// Where FID feature statistics are cached; unset disables the cache.
    pub cache_dir: Option<PathBuf>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            embedder_weights: None,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Worker threads for parallel stages and downloads; 0 uses every core.
    pub jobs: usize,
    pub generator: GeneratorSection,
    pub losses: LossConfig,
    pub finetune: FinetuneConfig,
    pub inversion: InversionConfig,
    pub realify: RealifySection,
    pub fetch: RetryPolicy,
    pub align: AlignConfig,
    pub composite: CompositeSection,
    pub evaluate: EvaluateSection,
}

/// Keys whose default is unset, so they are absent from the serialized
/// defaults but still accepted.
const OPTIONAL_KEYS: [&str; 7] = [
    "losses.perceptual_weights",
    "inversion.perceptual_resolution",
    "composite.erode_radius",
    "composite.blur_kernel",
    "composite.blur_sigma",
    "evaluate.embedder_weights",
    "evaluate.cache_dir",
];

fn defaults() -> Table {
    match Value::try_from(Config::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("the default configuration serializes to a table"),
    }
}

fn lookup<'a>(table: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (first, rest) = path.split_first()?;
    let v = table.get(*first)?;
    if rest.is_empty() {
        Some(v)
    } else {
        lookup(v.as_table()?, rest)
    }
}

fn is_known(key: &str) -> bool {
    OPTIONAL_KEYS.contains(&key) || lookup(&defaults(), &key.split('.').collect::<Vec<_>>()).is_some()
}

/// Fails on any key of `t` (under `prefix`) that the configuration lacks.
fn check_known(t: &Table, prefix: &str) -> Result<(), CliError> {
    for (k, v) in t {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if !is_known(&key) {
            return Err(CliError::Config(format!("unknown configuration key {key:?}")));
        }
        if let (Value::Table(inner), false) = (v, OPTIONAL_KEYS.contains(&key.as_str())) {
            check_known(inner, &key)?;
        }
    }
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    if !is_known(key) {
        return Err(CliError::Config(format!("unknown configuration key {key:?}")));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key:?}: {p:?} is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// `KEY=VALUE` with VALUE parsed as a TOML value, falling back to a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Defaults, overlaid by `file`, then by `overrides` in order.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Config, CliError> {
    let mut table = defaults();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| uncanny_core::Error::io(path, e))?;
        let parsed: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        check_known(&parsed, "")?;
        merge(&mut table, parsed);
    }
    for (key, value) in overrides {
        set_path(&mut table, key, value.clone())?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

impl Config {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("the configuration serializes to TOML")
    }

    /// Writes the resolved configuration to `path`.
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| uncanny_core::Error::io(parent, e))?;
        }
        uncanny_core::tensor_file::write_atomic(path, self.to_toml().as_bytes())?;
        Ok(())
    }

    /// Worker count with 0 meaning every available core.
    pub fn workers(&self) -> usize {
        if self.jobs > 0 {
            self.jobs
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

/// Resolved-config path for a file output: `{out}.resolved.toml`.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".resolved.toml");
    out.with_file_name(name)
}
