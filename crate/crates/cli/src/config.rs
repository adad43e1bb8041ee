//! Run configuration: built-in defaults, overlaid by an optional TOML file,
//! then by dotted `section.key=value` overrides.
//!
//! Merging happens on a JSON tree so that keys unknown to the defaults are
//! rejected and the digest (SHA-256 of the sorted-key JSON) is independent
//! of key order in the file.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use modalvgae::dataset::GenerationConfig;
use modalvgae::evaluation::SparsityConfig;
use modalvgae::model::{BaselineConfig, ModelConfig, UResVgaeConfig};
use modalvgae::psd::Snr;
use modalvgae::trainer::TrainConfig;
use modalvgae::uq::UqConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Noise levels for the noise study: `clean` or a dB value.
    pub snr: Vec<String>,
    /// Observed-sensor percentages for the sparsity study.
    pub sensor_percent: Vec<f64>,
    pub sparsity: SparsityConfig,
    /// Confidence level of the intervals written by `predict`.
    pub interval_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            snr: ["clean", "30", "20", "10"].map(String::from).to_vec(),
            sensor_percent: vec![5.0, 10.0, 20.0, 30.0, 50.0, 80.0, 95.0],
            sparsity: SparsityConfig::default(),
            interval_level: 0.9,
        }
    }
}

impl EvalConfig {
    pub fn snr_levels(&self) -> Result<Vec<Snr>> {
        self.snr.iter().map(|s| s.parse::<Snr>().map_err(|e| anyhow!("eval.snr: {e}"))).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub generation: GenerationConfig,
    pub model: UResVgaeConfig,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
    pub uq: UqConfig,
    pub eval: EvalConfig,
}

/// Where a resolved configuration came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub file: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provenance: Provenance,
}

fn merge(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| anyhow!("unknown config key `{here}`"))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, o) => {
            if b.is_object() {
                bail!("config key `{path}` is a section, not a value");
            }
            *b = o.clone();
            Ok(())
        }
    }
}

fn parse_literal(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(t) => serde_json::to_value(&t["v"]).unwrap_or_else(|_| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let path = path.trim();
    let mut over = parse_literal(raw.trim());
    for key in path.split('.').rev() {
        if key.is_empty() {
            bail!("override `{spec}` has an empty key segment");
        }
        let mut m = serde_json::Map::new();
        m.insert(key.to_string(), over);
        over = Value::Object(m);
    }
    merge(tree, &over, "")
}

pub fn digest(config: &RunConfig) -> String {
    let v = serde_json::to_value(config).expect("config serializes");
    let h = Sha256::digest(v.to_string().as_bytes());
    h.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    /// Defaults ← file ← overrides, then full validation.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let parsed: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut tree, &serde_json::to_value(parsed)?, "").with_context(|| format!("in config {}", path.display()))?;
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let config: RunConfig = serde_json::from_value(tree).context("config has a field of the wrong type")?;
        config.validate()?;
        let digest = digest(&config);
        Ok(ResolvedConfig {
            config,
            provenance: Provenance { file: file.map(Path::to_path_buf), overrides: overrides.to_vec(), digest },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate().context("generation")?;
        self.model_config(false).validate().context("model")?;
        self.model_config(true).validate().context("baseline")?;
        if self.model.n_modes != self.generation.truss.n_modes || self.baseline.n_modes != self.generation.truss.n_modes {
            bail!("model.n_modes and baseline.n_modes must equal generation.truss.n_modes");
        }
        self.train.validate(self.model.n_modes).context("train")?;
        self.uq.validate().context("uq")?;
        self.eval.snr_levels()?;
        self.eval.sparsity.validate().context("eval.sparsity")?;
        if !(self.eval.interval_level > 0.0 && self.eval.interval_level < 1.0) {
            bail!("eval.interval_level must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn model_config(&self, baseline: bool) -> ModelConfig {
        if baseline {
            ModelConfig::Baseline(self.baseline.clone())
        } else {
            ModelConfig::Uresvgae(self.model.clone())
        }
    }
}
