use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use scribbletex_core::backend::SegMockMode;

/// Which of the four services a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Service {
    Chat,
    Gen,
    Inpaint,
    Seg,
}

impl Service {
    pub fn name(self) -> &'static str {
        match self {
            Service::Chat => "chat",
            Service::Gen => "gen",
            Service::Inpaint => "inpaint",
            Service::Seg => "seg",
        }
    }

    pub fn url_env(self) -> String {
        format!("SCRIBBLESENSE_{}_URL", self.name().to_uppercase())
    }

    pub fn key_env(self) -> String {
        format!("SCRIBBLESENSE_{}_KEY", self.name().to_uppercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

/// How images are embedded in chat messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImagePartStyle {
    /// `{"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}}`
    #[default]
    Openai,
    /// `{"type": "image", "image": "<base64 png>"}`
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Endpoint URL; empty means read it from the service's URL variable.
    pub endpoint: String,
    /// Environment variable holding the bearer token; defaults to the
    /// service's KEY variable.
    pub token_env: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    pub model: String,
    /// Base delay of the exponential backoff between retries.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub image_part_style: ImagePartStyle,
    /// Extra request fields forwarded verbatim (temperature, steps, ...).
    pub params: Map<String, Value>,
    /// Chat mock: JSON file mapping request keys to canned completions.
    pub canned_path: Option<String>,
    /// Chat mock: answer unknown requests with the rule-based responder.
    pub scripted: bool,
    /// Segmentation mock behavior.
    pub seg_mode: SegMockMode,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: String::new(),
            token_env: None,
            timeout_secs: 120.0,
            retries: 3,
            model: String::new(),
            backoff_ms: 500,
            max_in_flight: 2,
            image_part_style: ImagePartStyle::Openai,
            params: Map::new(),
            canned_path: None,
            scripted: true,
            seg_mode: SegMockMode::PromptAndBox,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{service}: timeout_secs must be > 0")]
    Timeout { service: &'static str },
    #[error("{service}: max_in_flight must be ≥ 1")]
    InFlight { service: &'static str },
    #[error("{service}: no endpoint configured and {var} is unset")]
    NoEndpoint { service: &'static str, var: String },
    #[error("{service}: cannot read canned completions: {reason}")]
    Canned { service: &'static str, reason: String },
}

impl BackendConfig {
    pub fn http(endpoint: impl Into<String>) -> Self {
        Self { kind: BackendKind::Http, endpoint: endpoint.into(), ..Self::default() }
    }

    pub fn validate(&self, service: Service) -> Result<(), ConfigError> {
        if !(self.timeout_secs > 0.0) {
            return Err(ConfigError::Timeout { service: service.name() });
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::InFlight { service: service.name() });
        }
        Ok(())
    }

    /// Endpoint, falling back to the service's URL variable.
    pub fn resolve_endpoint(&self, service: Service) -> Result<String, ConfigError> {
        if !self.endpoint.is_empty() {
            return Ok(self.endpoint.clone());
        }
        let var = service.url_env();
        match std::env::var(&var) {
            Ok(v) if !v.is_empty() => Ok(v),
            _ => Err(ConfigError::NoEndpoint { service: service.name(), var }),
        }
    }

    /// Bearer token, if the configured variable is set.
    pub fn resolve_token(&self, service: Service) -> Option<String> {
        let var = self.token_env.clone().unwrap_or_else(|| service.key_env());
        std::env::var(var).ok().filter(|t| !t.is_empty())
    }
}

/// Configs for all four services.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub chat: BackendConfig,
    pub gen: BackendConfig,
    pub inpaint: BackendConfig,
    pub seg: BackendConfig,
}

impl BackendsConfig {
    pub fn all_mock() -> Self {
        Self::default()
    }

    pub fn get(&self, s: Service) -> &BackendConfig {
        match s {
            Service::Chat => &self.chat,
            Service::Gen => &self.gen,
            Service::Inpaint => &self.inpaint,
            Service::Seg => &self.seg,
        }
    }
}
