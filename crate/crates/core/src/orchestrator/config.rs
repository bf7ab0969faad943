use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::identities::DEFAULT_THRESHOLD;
use crate::sources::{RoomConfig, DEFAULT_CHAT_BASE, DEFAULT_TRACKER_BASE};
use crate::timestamp::Timestamp;

pub const DEFAULT_SERVE_PORT: u16 = 8314;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiBaseUrls {
    #[serde(default = "default_chat_base")]
    pub chat: String,
    #[serde(default = "default_tracker_base")]
    pub tracker: String,
}

fn default_chat_base() -> String {
    DEFAULT_CHAT_BASE.to_string()
}

fn default_tracker_base() -> String {
    DEFAULT_TRACKER_BASE.to_string()
}

impl Default for ApiBaseUrls {
    fn default() -> Self {
        ApiBaseUrls {
            chat: default_chat_base(),
            tracker: default_tracker_base(),
        }
    }
}

/// Pipeline settings, read from a TOML file.
///
/// ```toml
/// storage_dir = "data"
/// tokens = ["ghp_..."]
/// cutoff = "2019-11-30T23:59:59Z"
///
/// [[rooms]]
/// room_uri = "shuup/shuup"
/// default_repo = "shuup/shuup"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub storage_dir: PathBuf,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_window_days")]
    pub window_days: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<Timestamp>,
    #[serde(default = "default_port")]
    pub serve_port: u16,
    /// Look up unknown referenced issues on the tracker during enrichment.
    #[serde(default = "default_true")]
    pub remote_lookup: bool,
    /// Static review UI assets served under `/ui/`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui_dir: Option<PathBuf>,
    #[serde(default)]
    pub tokens: Vec<String>,
    #[serde(default)]
    pub api_base_urls: ApiBaseUrls,
    #[serde(default)]
    pub rooms: Vec<RoomConfig>,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_window_days() -> u32 {
    crate::analytics::DEFAULT_WINDOW_DAYS
}

fn default_port() -> u16 {
    DEFAULT_SERVE_PORT
}

fn default_true() -> bool {
    true
}

impl PipelineConfig {
    pub fn new(storage_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            storage_dir: storage_dir.into(),
            threshold: DEFAULT_THRESHOLD,
            window_days: default_window_days(),
            cutoff: None,
            serve_port: DEFAULT_SERVE_PORT,
            remote_lookup: true,
            ui_dir: None,
            tokens: Vec::new(),
            api_base_urls: ApiBaseUrls::default(),
            rooms: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = PipelineConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.storage_dir.is_relative() {
            config.storage_dir = base.join(&config.storage_dir);
        }
        if let Some(ui) = config.ui_dir.as_mut().filter(|p| p.is_relative()) {
            *ui = base.join(&*ui);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return invalid(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.window_days < 1 {
            return invalid("window_days must be at least 1".into());
        }
        if self.storage_dir.as_os_str().is_empty() {
            return invalid("storage_dir must not be empty".into());
        }
        for room in &self.rooms {
            if room.validate().is_err() {
                return invalid(format!("room_uri {:?} is not an owner/name slug", room.room_uri));
            }
        }
        let mut uris: Vec<String> = self.rooms.iter().map(|r| r.room_uri.to_ascii_lowercase()).collect();
        uris.sort();
        if let Some(dup) = uris.windows(2).find(|w| w[0] == w[1]) {
            return invalid(format!("room {} is listed twice", dup[0]));
        }
        if self.tokens.iter().any(|t| t.trim().is_empty()) {
            return invalid("tokens must not be empty strings".into());
        }
        Ok(())
    }

    /// Enabled rooms, narrowed to `only` when given (case-insensitive).
    pub fn selected_rooms(&self, only: Option<&str>) -> Result<Vec<RoomConfig>, ConfigError> {
        let rooms: Vec<RoomConfig> = self
            .rooms
            .iter()
            .filter(|r| r.enabled)
            .filter(|r| {
                only.is_none_or(|o| {
                    o.eq_ignore_ascii_case(&r.room_uri) || o.eq_ignore_ascii_case(&r.slug())
                })
            })
            .cloned()
            .collect();
        if rooms.is_empty() {
            return Err(ConfigError::Invalid(match only {
                Some(o) => format!("no enabled room matches {o:?}"),
                None => "no enabled rooms configured".into(),
            }));
        }
        Ok(rooms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
storage_dir = "data"
tokens = ["t1", "t2"]
cutoff = "2019-11-30T23:59:59Z"

[api_base_urls]
chat = "http://127.0.0.1:9000"

[[rooms]]
room_uri = "shuup/shuup"
default_repo = "shuup/shuup"

[[rooms]]
room_uri = "amberframework/amber"
enabled = false
"#;

    #[test]
    fn defaults_apply() {
        let c = PipelineConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.threshold, 0.7);
        assert_eq!(c.window_days, 7);
        assert_eq!(c.serve_port, 8314);
        assert_eq!(c.api_base_urls.tracker, DEFAULT_TRACKER_BASE);
        assert_eq!(c.rooms.len(), 2);
        assert!(!c.rooms[1].enabled);
        assert_eq!(c.selected_rooms(None).unwrap().len(), 1);
    }

    #[test]
    fn round_trip() {
        let c = PipelineConfig::parse(SAMPLE).unwrap();
        let again = PipelineConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "storage_dir = \"d\"\nthreshold = 1.0",
            "storage_dir = \"d\"\nthreshold = 0.0",
            "storage_dir = \"d\"\nwindow_days = 0",
            "storage_dir = \"d\"\n[[rooms]]\nroom_uri = \"noslash\"",
            "storage_dir = \"d\"\nbogus = 1",
        ] {
            assert!(PipelineConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn room_filter() {
        let c = PipelineConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.selected_rooms(Some("shuup_shuup")).unwrap().len(), 1);
        assert!(c.selected_rooms(Some("amberframework/amber")).is_err());
    }
}
