//! Retrieval of raw chat messages and issue-tracker records.
//!
//! Both upstreams are paginated REST APIs reached through a configurable base
//! URL. Every request draws a credential from a shared [`TokenPool`] so that
//! no token exceeds its per-window request budget.

mod chat;
mod http;
mod tokens;
mod tracker;

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::timestamp::Timestamp;

pub use chat::{ChatClient, MessageStream};
pub use http::{Clock, RetryPolicy, SystemClock};
pub use tokens::{Acquire, SharedTokenPool, TokenGrant, TokenPool, UsageEntry};
pub use tracker::{IssueStream, TrackerClient};

/// Default GitHub-compatible tracker endpoint.
pub const DEFAULT_TRACKER_BASE: &str = "https://api.github.com";
/// Default Gitter-compatible chat endpoint.
pub const DEFAULT_CHAT_BASE: &str = "https://api.gitter.im";

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("credential rejected by {url} (HTTP {status})")]
    Auth { url: String, status: u16 },
    #[error("room {0} no longer exists upstream")]
    UpstreamGone(String),
    #[error("{0} not found upstream")]
    NotFound(String),
    #[error("transport failure on {url} after {attempts} attempt(s): {message}")]
    Transport {
        url: String,
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("token pool is empty")]
    EmptyPool,
    #[error("malformed upstream document from {url}: {message}")]
    Malformed { url: String, message: String },
}

/// `owner/name` slug. Equality, ordering and hashing ignore ASCII case.
#[derive(Debug, Clone)]
pub struct RepoId {
    pub owner: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid owner/name slug {0:?}")]
pub struct InvalidSlug(pub String);

impl RepoId {
    pub fn new(owner: impl Into<String>, name: impl Into<String>) -> Result<Self, InvalidSlug> {
        let owner = owner.into();
        let name = name.into();
        if owner.is_empty() || name.is_empty() || owner.contains('/') || name.contains('/') {
            return Err(InvalidSlug(format!("{owner}/{name}")));
        }
        Ok(RepoId { owner, name })
    }

    pub fn slug(&self) -> String {
        format!("{}/{}", self.owner, self.name)
    }

    /// Lower-cased slug; the canonical origin for tracker records.
    pub fn canonical(&self) -> String {
        self.slug().to_ascii_lowercase()
    }

    pub fn same_owner(&self, other: &RepoId) -> bool {
        self.owner.eq_ignore_ascii_case(&other.owner)
    }

    fn key(&self) -> (String, String) {
        (
            self.owner.to_ascii_lowercase(),
            self.name.to_ascii_lowercase(),
        )
    }
}

impl PartialEq for RepoId {
    fn eq(&self, other: &Self) -> bool {
        self.owner.eq_ignore_ascii_case(&other.owner) && self.name.eq_ignore_ascii_case(&other.name)
    }
}

impl Eq for RepoId {}

impl Hash for RepoId {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state)
    }
}

impl PartialOrd for RepoId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RepoId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for RepoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.owner, self.name)
    }
}

impl FromStr for RepoId {
    type Err = InvalidSlug;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('/');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(owner), Some(name), None) => {
                RepoId::new(owner, name).map_err(|_| InvalidSlug(s.to_string()))
            }
            _ => Err(InvalidSlug(s.to_string())),
        }
    }
}

impl Serialize for RepoId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RepoId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A chat room and the repository it discusses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomConfig {
    pub room_uri: String,
    /// Target for bare `#n` references; rooms without one drop such mentions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_repo: Option<RepoId>,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl RoomConfig {
    pub fn new(room_uri: &str, default_repo: Option<RepoId>) -> Result<Self, InvalidSlug> {
        let room = RoomConfig {
            room_uri: room_uri.to_string(),
            default_repo,
            enabled: true,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<(), InvalidSlug> {
        self.room_uri.parse::<RepoId>().map(|_| ())
    }

    /// File-name form of the room uri (`/` replaced by `_`).
    pub fn slug(&self) -> String {
        origin_slug(&self.room_uri)
    }
}

pub fn origin_slug(origin: &str) -> String {
    origin.replace('/', "_")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Chat,
    Tracker,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Chat => "chat",
            Source::Tracker => "tracker",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of a logical upstream item.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub source: Source,
    pub origin: String,
    pub item_id: String,
}

/// One upstream document, stored verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub key: RecordKey,
    pub fetched_at: Timestamp,
    pub payload: Value,
}

impl RawRecord {
    pub fn new(
        source: Source,
        origin: impl Into<String>,
        item_id: impl Into<String>,
        fetched_at: Timestamp,
        payload: Value,
    ) -> Self {
        RawRecord {
            key: RecordKey {
                source,
                origin: origin.into(),
                item_id: item_id.into(),
            },
            fetched_at,
            payload,
        }
    }

    /// Upstream activity time: `sent` for chat messages, `updated_at` for
    /// tracker items. This is the resume cursor and the query sort key.
    pub fn item_time(&self) -> Option<Timestamp> {
        let field = match self.key.source {
            Source::Chat => "sent",
            Source::Tracker => "updated_at",
        };
        self.payload
            .get(field)
            .and_then(Value::as_str)
            .and_then(|s| Timestamp::parse(s).ok())
    }

    /// `pull_request` or `issue` for tracker records, `message` for chat.
    pub fn item_kind(&self) -> ItemKind {
        match self.key.source {
            Source::Chat => ItemKind::Message,
            Source::Tracker if self.payload.get("pull_request").is_some() => ItemKind::PullRequest,
            Source::Tracker => ItemKind::Issue,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Message,
    Issue,
    PullRequest,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repo_id_is_case_insensitive() {
        let a: RepoId = "AWS/aws-sdk-go".parse().unwrap();
        let b: RepoId = "aws/AWS-SDK-GO".parse().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cmp(&b), Ordering::Equal);
        assert_eq!(a.to_string(), "AWS/aws-sdk-go");
    }

    #[test]
    fn slug_needs_exactly_one_separator() {
        assert!("shuup".parse::<RepoId>().is_err());
        assert!("a/b/c".parse::<RepoId>().is_err());
        assert!("/b".parse::<RepoId>().is_err());
        assert!("a/".parse::<RepoId>().is_err());
        assert!("a/b".parse::<RepoId>().is_ok());
    }

    #[test]
    fn room_without_default_repo_is_valid() {
        let room = RoomConfig::new("shuup/shuup", None).unwrap();
        assert_eq!(room.slug(), "shuup_shuup");
        assert!(RoomConfig::new("shuup", None).is_err());
    }

    #[test]
    fn tracker_kind_follows_pull_request_marker() {
        let pr = RawRecord::new(
            Source::Tracker,
            "a/b",
            "2",
            Timestamp::from_unix(0),
            serde_json::json!({"number": 2, "pull_request": {}}),
        );
        assert_eq!(pr.item_kind(), ItemKind::PullRequest);
    }
}
