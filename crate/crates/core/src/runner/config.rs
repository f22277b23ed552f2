use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::gateway::BackendConfig;
use crate::ingest::{IngestConfig, StayFormat};
use crate::mobility::WindowConfig;
use crate::prompt::PromptConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}: {detail}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        detail: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Predictor {
    Llm,
    Mock,
    Markov,
    TopFreq,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::Llm => "llm",
            Predictor::Mock => "mock",
            Predictor::Markov => "1mmc",
            Predictor::TopFreq => "topfreq",
        }
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, Predictor::Llm | Predictor::Mock)
    }
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Predictor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "llm" => Ok(Predictor::Llm),
            "mock" => Ok(Predictor::Mock),
            "1mmc" | "mmc" | "markov" => Ok(Predictor::Markov),
            "topfreq" => Ok(Predictor::TopFreq),
            other => Err(format!("unknown predictor {other:?} (llm, mock, 1mmc, topfreq)")),
        }
    }
}

/// Everything a run needs. Serialized as flat `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub stays_path: Option<PathBuf>,
    pub stays_format: Option<StayFormat>,
    pub tracks_path: Option<PathBuf>,
    pub ingest: IngestConfig,
    pub window: WindowConfig,
    pub prompt: PromptConfig,
    pub template_dir: Option<PathBuf>,
    pub backend: BackendConfig,
    pub predictor: Predictor,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub sample_limit: Option<usize>,
    /// File name of the results JSONL inside `output_dir`.
    pub results_name: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stays_path: None,
            stays_format: None,
            tracks_path: None,
            ingest: IngestConfig::default(),
            window: WindowConfig::default(),
            prompt: PromptConfig::default(),
            template_dir: None,
            backend: BackendConfig::default(),
            predictor: Predictor::Mock,
            output_dir: PathBuf::from("out"),
            seed: 0,
            sample_limit: None,
            results_name: None,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn optional(v: &str) -> Option<&str> {
    match v {
        "" | "none" | "-" => None,
        other => Some(other),
    }
}

impl ExperimentConfig {
    pub fn from_kv_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|detail| match detail {
                SetError::Unknown => ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                },
                SetError::Invalid(detail) => ConfigError::InvalidValue {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    detail,
                },
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_kv_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative_to(base);
        }
        Ok(cfg)
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.stays_path.as_mut(),
            self.tracks_path.as_mut(),
            self.template_dir.as_mut(),
            self.backend.cache_dir.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SetError> {
        let inv = SetError::Invalid;
        match key {
            "stays_path" => self.stays_path = optional(value).map(PathBuf::from),
            "stays_format" => {
                self.stays_format = optional(value)
                    .map(|v| v.parse::<StayFormat>().map_err(|e| e.to_string()))
                    .transpose()
                    .map_err(inv)?
            }
            "tracks_path" => self.tracks_path = optional(value).map(PathBuf::from),
            "utc_offset_minutes" => self.ingest.utc_offset_minutes = parse_num(value).map_err(inv)?,
            "stay_radius_m" => self.ingest.stay_radius_m = parse_num(value).map_err(inv)?,
            "stay_min_duration_min" => self.ingest.stay_min_duration_min = parse_num(value).map_err(inv)?,
            "place_cluster_radius_m" => self.ingest.place_cluster_radius_m = parse_num(value).map_err(inv)?,
            "test_fraction" => self.ingest.test_fraction = parse_num(value).map_err(inv)?,
            "min_stays_per_user" => self.ingest.min_stays_per_user = parse_num(value).map_err(inv)?,
            "history_len" => self.window.history_len = parse_num(value).map_err(inv)?,
            "context_len" => self.window.context_len = parse_num(value).map_err(inv)?,
            "k" => self.prompt.k = parse_num(value).map_err(inv)?,
            "time_aware" => self.prompt.time_aware = parse_bool(value).map_err(inv)?,
            "include_history" => self.prompt.include_history = parse_bool(value).map_err(inv)?,
            "include_context" => self.prompt.include_context = parse_bool(value).map_err(inv)?,
            "include_guidance" => self.prompt.include_guidance = parse_bool(value).map_err(inv)?,
            "ask_reason" => self.prompt.ask_reason = parse_bool(value).map_err(inv)?,
            "template_id" => self.prompt.template_id = value.to_string(),
            "template_dir" => self.template_dir = optional(value).map(PathBuf::from),
            "endpoint_url" => self.backend.endpoint_url = value.to_string(),
            "model_id" => self.backend.model_id = value.to_string(),
            "temperature" => self.backend.temperature = parse_num(value).map_err(inv)?,
            "max_retries" => self.backend.max_retries = parse_num(value).map_err(inv)?,
            "timeout_s" => self.backend.timeout_s = parse_num(value).map_err(inv)?,
            "max_in_flight" => self.backend.max_in_flight = parse_num(value).map_err(inv)?,
            "cache_dir" => self.backend.cache_dir = optional(value).map(PathBuf::from),
            "api_key_env" => self.backend.api_key_env = value.to_string(),
            "backoff_base_ms" => self.backend.backoff_base_ms = parse_num(value).map_err(inv)?,
            "backoff_max_ms" => self.backend.backoff_max_ms = parse_num(value).map_err(inv)?,
            "rate_limit_rps" => {
                self.backend.rate_limit_rps = optional(value).map(parse_num).transpose().map_err(inv)?
            }
            "predictor" => self.predictor = value.parse().map_err(inv)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = parse_num(value).map_err(inv)?,
            "sample_limit" => self.sample_limit = optional(value).map(parse_num).transpose().map_err(inv)?,
            "results_name" => self.results_name = optional(value).map(str::to_string),
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let fmt = match self.stays_format {
            None => "none",
            Some(StayFormat::Csv) => "csv",
            Some(StayFormat::Jsonl) => "jsonl",
        };
        let lines = [
            ("stays_path", path(&self.stays_path)),
            ("stays_format", fmt.to_string()),
            ("tracks_path", path(&self.tracks_path)),
            ("utc_offset_minutes", self.ingest.utc_offset_minutes.to_string()),
            ("stay_radius_m", self.ingest.stay_radius_m.to_string()),
            ("stay_min_duration_min", self.ingest.stay_min_duration_min.to_string()),
            ("place_cluster_radius_m", self.ingest.place_cluster_radius_m.to_string()),
            ("test_fraction", self.ingest.test_fraction.to_string()),
            ("min_stays_per_user", self.ingest.min_stays_per_user.to_string()),
            ("history_len", self.window.history_len.to_string()),
            ("context_len", self.window.context_len.to_string()),
            ("k", self.prompt.k.to_string()),
            ("time_aware", self.prompt.time_aware.to_string()),
            ("include_history", self.prompt.include_history.to_string()),
            ("include_context", self.prompt.include_context.to_string()),
            ("include_guidance", self.prompt.include_guidance.to_string()),
            ("ask_reason", self.prompt.ask_reason.to_string()),
            ("template_id", self.prompt.template_id.clone()),
            ("template_dir", path(&self.template_dir)),
            ("endpoint_url", self.backend.endpoint_url.clone()),
            ("model_id", self.backend.model_id.clone()),
            ("temperature", self.backend.temperature.to_string()),
            ("max_retries", self.backend.max_retries.to_string()),
            ("timeout_s", self.backend.timeout_s.to_string()),
            ("max_in_flight", self.backend.max_in_flight.to_string()),
            ("cache_dir", path(&self.backend.cache_dir)),
            ("api_key_env", self.backend.api_key_env.clone()),
            ("backoff_base_ms", self.backend.backoff_base_ms.to_string()),
            ("backoff_max_ms", self.backend.backoff_max_ms.to_string()),
            (
                "rate_limit_rps",
                self.backend.rate_limit_rps.map_or("none".to_string(), |r| r.to_string()),
            ),
            ("predictor", self.predictor.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("sample_limit", self.sample_limit.map_or("none".to_string(), |n| n.to_string())),
            ("results_name", self.results_name.clone().unwrap_or_else(|| "none".into())),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks value ranges and that input paths exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn fmt::Display| ConfigError::Invalid(e.to_string());
        self.ingest.validate().map_err(|e| invalid(&e))?;
        self.window.validate().map_err(|e| invalid(&e))?;
        self.prompt.validate().map_err(|e| invalid(&e))?;
        self.backend.validate().map_err(|e| invalid(&e))?;
        match (&self.stays_path, &self.tracks_path) {
            (None, None) => return Err(ConfigError::Invalid("set stays_path or tracks_path".into())),
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid("set only one of stays_path and tracks_path".into()))
            }
            (Some(p), None) | (None, Some(p)) if !p.is_file() => {
                return Err(ConfigError::Invalid(format!("input file {} does not exist", p.display())))
            }
            _ => {}
        }
        if let Some(dir) = &self.template_dir {
            if !dir.is_dir() {
                return Err(ConfigError::Invalid(format!("template_dir {} does not exist", dir.display())));
            }
        }
        if self.sample_limit == Some(0) {
            return Err(ConfigError::Invalid("sample_limit must be positive".into()));
        }
        Ok(())
    }

    /// `run_<predictor>_k<k>[_wot].jsonl` unless `results_name` is set.
    pub fn results_file_name(&self) -> String {
        if let Some(name) = &self.results_name {
            return name.clone();
        }
        let wot = if self.predictor.uses_prompts() && !self.prompt.time_aware {
            "_wot"
        } else {
            ""
        };
        format!("run_{}_k{}{}.jsonl", self.predictor, self.prompt.k, wot)
    }

    pub fn results_path(&self) -> PathBuf {
        self.output_dir.join(self.results_file_name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SetError {
    Unknown,
    Invalid(String),
}
