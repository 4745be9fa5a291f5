use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::BackendSpec;
use crate::corpus::sha256_hex;
use crate::segmentation::Hysteresis;

pub const ENV_PREFIX: &str = "LFP_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid TOML: {0}")]
    Toml(String),
    #[error("environment override {var}: {reason}")]
    Override { var: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkSizes {
    pub offline: f64,
    pub if_asr: f64,
    pub if_st: f64,
    pub qa: f64,
}

impl Default for ChunkSizes {
    fn default() -> Self {
        Self {
            offline: 25.0,
            if_asr: 20.0,
            if_st: 25.0,
            qa: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSizes {
    pub ape: usize,
    pub if_asr: usize,
    pub if_st: usize,
    /// Target languages whose post-editing is a no-op.
    pub disabled_langs: Vec<String>,
}

impl Default for ContextSizes {
    fn default() -> Self {
        Self {
            ape: 0,
            if_asr: 5,
            if_st: 15,
            disabled_langs: vec!["zh".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub chunk_size_s: ChunkSizes,
    pub truncation_cap_s: f64,
    pub vad: Hysteresis,
    pub context_sizes: ContextSizes,
    pub fusion_token_budget: usize,
    pub max_tokens: u32,
    pub temperature: f64,
    /// ASR backends in fusion order; the first is the fallback system.
    pub asr_system_ids: Vec<String>,
    pub vad_backend: Option<String>,
    pub llm_backend: Option<String>,
    pub mt_backend: Option<String>,
    pub top_k: usize,
    pub ape_sample_n: usize,
    pub unanswerable_fraction: f64,
    pub seed: u64,
    pub grid_sizes: Vec<f64>,
    pub backends: Vec<BackendSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chunk_size_s: ChunkSizes::default(),
            truncation_cap_s: crate::segmentation::LONG_AUDIO_CAP_S,
            vad: Hysteresis::default(),
            context_sizes: ContextSizes::default(),
            fusion_token_budget: 3000,
            max_tokens: 1024,
            temperature: 0.0,
            asr_system_ids: Vec::new(),
            vad_backend: None,
            llm_backend: None,
            mt_backend: None,
            top_k: 500_000,
            ape_sample_n: 100_000,
            unanswerable_fraction: 0.05,
            seed: 13,
            grid_sizes: vec![5.0, 10.0, 15.0, 20.0, 25.0],
            backends: Vec::new(),
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML file and applies `LFP_*` overrides from `env`.
    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_with_env(&text, env)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Overrides are `LFP_<PATH>=<value>` with `__` between path segments,
    /// e.g. `LFP_CHUNK_SIZE_S__OFFLINE=20` or `LFP_BACKENDS__0__ENDPOINT=...`.
    /// Values parse as JSON when possible and as strings otherwise.
    pub fn from_toml_with_env(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Toml(e.to_string()))?;
        let mut value = serde_json::to_value(table).map_err(|e| ConfigError::Toml(e.to_string()))?;
        let mut overrides: Vec<(String, String)> =
            env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (var, raw) in overrides {
            let path: Vec<String> = var[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
            let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
            set_path(&mut value, &path, parsed).map_err(|reason| ConfigError::Override { var, reason })?;
        }
        let config: PipelineConfig =
            serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("chunk_size_s.offline", self.chunk_size_s.offline),
            ("chunk_size_s.if_asr", self.chunk_size_s.if_asr),
            ("chunk_size_s.if_st", self.chunk_size_s.if_st),
            ("chunk_size_s.qa", self.chunk_size_s.qa),
            ("truncation_cap_s", self.truncation_cap_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.fusion_token_budget == 0 || self.max_tokens == 0 || self.top_k == 0 || self.ape_sample_n == 0 {
            return Err(ConfigError::Invalid(
                "fusion_token_budget, max_tokens, top_k and ape_sample_n must be positive".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(ConfigError::Invalid("temperature must be non-negative".into()));
        }
        if !(self.unanswerable_fraction > 0.0 && self.unanswerable_fraction < 1.0) {
            return Err(ConfigError::Invalid("unanswerable_fraction must lie in (0, 1)".into()));
        }
        if self.grid_sizes.iter().any(|s| !(*s > 0.0)) {
            return Err(ConfigError::Invalid("grid_sizes must be positive".into()));
        }
        if self.asr_system_ids.is_empty() {
            return Err(ConfigError::Invalid("asr_system_ids must name at least one backend".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for spec in &self.backends {
            spec.validate().map_err(ConfigError::Invalid)?;
            if !ids.insert(spec.id.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate backend id `{}`", spec.id)));
            }
        }
        for id in self
            .asr_system_ids
            .iter()
            .chain(&self.vad_backend)
            .chain(&self.llm_backend)
            .chain(&self.mt_backend)
        {
            if !ids.contains(id.as_str()) {
                return Err(ConfigError::Invalid(format!("backend `{id}` is referenced but not configured")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn set_path(value: &mut Value, path: &[String], new: Value) -> Result<(), String> {
    let Some((head, rest)) = path.split_first() else {
        *value = new;
        return Ok(());
    };
    if head.is_empty() {
        return Err("empty path segment".into());
    }
    match value {
        Value::Object(map) => {
            let slot = map.entry(head.clone()).or_insert_with(|| {
                if rest.is_empty() {
                    Value::Null
                } else {
                    Value::Object(Default::default())
                }
            });
            set_path(slot, rest, new)
        }
        Value::Array(items) => {
            let index: usize = head.parse().map_err(|_| format!("`{head}` is not an array index"))?;
            let len = items.len();
            let slot = items
                .get_mut(index)
                .ok_or_else(|| format!("index {index} out of range (len {len})"))?;
            set_path(slot, rest, new)
        }
        _ => Err(format!("cannot descend into `{head}`")),
    }
}
