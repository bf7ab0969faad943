//! Chat-message enrichment: reference extraction, kind resolution and
//! provenance classification.

pub mod grammar;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use grammar::{ExtractedRef, RefForm};

use crate::sources::{RawRecord, RepoId, RoomConfig, Source, SourceError, TrackerClient};
use crate::store::{AppendOutcome, RawIndex, StoreError};
use crate::timestamp::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Issue,
    PullRequest,
    Unknown,
}

impl IssueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IssueKind::Issue => "issue",
            IssueKind::PullRequest => "pull_request",
            IssueKind::Unknown => "unknown",
        }
    }
}

/// Relation of a referenced repository to the room's own repository.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Same repository as the room.
    Project,
    /// Same owner, different repository.
    Parent,
    /// Unrelated owner.
    Foreign,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Project, Category::Parent, Category::Foreign];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Project => "project",
            Category::Parent => "parent",
            Category::Foreign => "foreign",
        }
    }
}

pub fn classify_provenance(ref_repo: &RepoId, room_repo: &RepoId) -> Category {
    if !ref_repo.same_owner(room_repo) {
        Category::Foreign
    } else if ref_repo.name.eq_ignore_ascii_case(&room_repo.name) {
        Category::Project
    } else {
        Category::Parent
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueReference {
    pub repo: RepoId,
    pub number: u64,
    pub form: RefForm,
    pub kind: IssueKind,
    pub category: Category,
    pub span: (usize, usize),
    /// No tracker record exists for this reference.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dangling: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedMessage {
    pub message_id: String,
    pub room: String,
    pub sent_at: Timestamp,
    pub author_uuid: String,
    pub text: String,
    pub references: Vec<IssueReference>,
}

/// References found in one text, plus `#n` mentions that had no target.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub references: Vec<ExtractedRef>,
    pub unresolvable: usize,
}

pub fn extract_references(text: &str, room: &RoomConfig) -> Extraction {
    let (references, dropped): (Vec<_>, Vec<_>) = grammar::scan(text, room.default_repo.as_ref())
        .into_iter()
        .partition(|r| r.repo.is_some());
    Extraction {
        references,
        unresolvable: dropped.len(),
    }
}

/// The repository a room's references are classified against: its default
/// repository, or the room slug itself.
pub fn room_repo(room: &RoomConfig) -> Option<RepoId> {
    room.default_repo
        .clone()
        .or_else(|| room.room_uri.parse().ok())
}

/// Read access to locally stored tracker records.
pub trait TrackerView {
    fn issue_kind(&self, repo: &RepoId, number: u64) -> Option<IssueKind>;
}

impl TrackerView for HashMap<(RepoId, u64), IssueKind> {
    fn issue_kind(&self, repo: &RepoId, number: u64) -> Option<IssueKind> {
        self.get(&(repo.clone(), number)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub kind: IssueKind,
    pub dangling: bool,
}

/// Kind lookup used by enrichment.
pub trait KindResolver {
    fn resolve(&mut self, repo: &RepoId, number: u64, hint: Option<IssueKind>) -> Resolution;
}

impl Resolution {
    /// Stored or fetched truth beats the URL hint; the hint only fills in
    /// when no record exists.
    pub fn from_lookup(found: Option<IssueKind>, hint: Option<IssueKind>) -> Self {
        match found {
            Some(kind) => Resolution {
                kind,
                dangling: false,
            },
            None => Resolution {
                kind: hint.unwrap_or(IssueKind::Unknown),
                dangling: true,
            },
        }
    }
}

/// Remote lookup used when no stored record exists.
pub type Fallback<'a> = &'a mut dyn FnMut(&RepoId, u64) -> Option<IssueKind>;

/// Resolves a reference's kind from stored records, consulting `fallback`
/// on a miss.
pub fn resolve_kind(
    repo: &RepoId,
    number: u64,
    view: &dyn TrackerView,
    fallback: Option<Fallback<'_>>,
    hint: Option<IssueKind>,
) -> Resolution {
    let found = view
        .issue_kind(repo, number)
        .or_else(|| fallback.and_then(|f| f(repo, number)));
    Resolution::from_lookup(found, hint)
}

/// Local-only resolution over any [`TrackerView`].
pub struct LocalResolver<'a, V: TrackerView>(pub &'a V);

impl<V: TrackerView> KindResolver for LocalResolver<'_, V> {
    fn resolve(&mut self, repo: &RepoId, number: u64, hint: Option<IssueKind>) -> Resolution {
        resolve_kind(repo, number, self.0, None, hint)
    }
}

/// Resolution against the raw index with single-item remote lookups on a
/// miss. Fetched records are appended to the index; misses are remembered
/// for the life of the resolver so each number is requested at most once.
pub struct FetchingResolver<'a> {
    raw: &'a mut RawIndex,
    client: &'a TrackerClient,
    misses: HashSet<(RepoId, u64)>,
    pub fetched: usize,
    pub errors: Vec<String>,
}

impl<'a> FetchingResolver<'a> {
    pub fn new(raw: &'a mut RawIndex, client: &'a TrackerClient) -> Self {
        FetchingResolver {
            raw,
            client,
            misses: HashSet::new(),
            fetched: 0,
            errors: Vec::new(),
        }
    }

    fn lookup(&mut self, repo: &RepoId, number: u64) -> Result<Option<IssueKind>, LookupError> {
        if self.misses.contains(&(repo.clone(), number)) {
            return Ok(None);
        }
        match self.client.fetch_issue(repo, number)? {
            None => {
                self.misses.insert((repo.clone(), number));
                Ok(None)
            }
            Some(record) => {
                if self.raw.append(record)? != AppendOutcome::Ignored {
                    self.fetched += 1;
                }
                Ok(self.raw.issue_kind(repo, number))
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum LookupError {
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl KindResolver for FetchingResolver<'_> {
    fn resolve(&mut self, repo: &RepoId, number: u64, hint: Option<IssueKind>) -> Resolution {
        let found = match self.raw.issue_kind(repo, number) {
            Some(kind) => Some(kind),
            None => self.lookup(repo, number).unwrap_or_else(|e| {
                tracing::warn!(%repo, number, error = %e, "remote kind lookup failed");
                self.errors.push(format!("{repo}#{number}: {e}"));
                None
            }),
        };
        Resolution::from_lookup(found, hint)
    }
}

/// Current unique-identity uuid for a chat author.
pub trait AuthorMap {
    fn author_uuid(&self, source: Source, username: &str) -> Option<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("message {item_id} lacks required field `{field}`")]
pub struct MalformedPayload {
    pub item_id: String,
    pub field: &'static str,
}

/// Fields the pipeline reads from a chat message payload.
pub struct ChatFields<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub sent: Timestamp,
    pub username: &'a str,
    pub display_name: &'a str,
}

pub fn chat_fields(raw: &RawRecord) -> Result<ChatFields<'_>, MalformedPayload> {
    let missing = |field| MalformedPayload {
        item_id: raw.key.item_id.clone(),
        field,
    };
    let p = &raw.payload;
    let sent = p
        .get("sent")
        .and_then(Value::as_str)
        .and_then(|s| Timestamp::parse(s).ok())
        .ok_or_else(|| missing("sent"))?;
    let text = p.get("text").and_then(Value::as_str).ok_or_else(|| missing("text"))?;
    let user = p.get("fromUser").ok_or_else(|| missing("fromUser"))?;
    let username = user
        .get("username")
        .and_then(Value::as_str)
        .filter(|u| !u.is_empty())
        .ok_or_else(|| missing("fromUser.username"))?;
    let display_name = user.get("displayName").and_then(Value::as_str).unwrap_or("");
    Ok(ChatFields {
        id: &raw.key.item_id,
        text,
        sent,
        username,
        display_name,
    })
}

/// Per-message enrichment outcome counters beyond the message itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EnrichStats {
    pub unresolvable: usize,
}

/// Annotates one raw chat record. Pure given a local-only resolver.
pub fn enrich_message(
    raw: &RawRecord,
    room: &RoomConfig,
    resolver: &mut dyn KindResolver,
    authors: &dyn AuthorMap,
) -> Result<(EnrichedMessage, EnrichStats), MalformedPayload> {
    debug_assert_eq!(raw.key.source, Source::Chat);
    let fields = chat_fields(raw)?;
    let extraction = extract_references(fields.text, room);
    let home = room_repo(room);

    let references = extraction
        .references
        .into_iter()
        .filter_map(|r| {
            let repo = r.repo?;
            let hint = r.pull_hint.then_some(IssueKind::PullRequest);
            let Resolution { kind, dangling } = resolver.resolve(&repo, r.number, hint);
            let category = match &home {
                Some(home) => classify_provenance(&repo, home),
                None => Category::Foreign,
            };
            Some(IssueReference {
                repo,
                number: r.number,
                form: r.form,
                kind,
                category,
                span: r.span,
                dangling,
            })
        })
        .collect();

    let author_uuid = authors
        .author_uuid(Source::Chat, fields.username)
        .unwrap_or_else(|| crate::identities::identity_id(Source::Chat, fields.username));

    Ok((
        EnrichedMessage {
            message_id: fields.id.to_string(),
            room: room.room_uri.clone(),
            sent_at: fields.sent,
            author_uuid,
            text: fields.text.to_string(),
            references,
        },
        EnrichStats {
            unresolvable: extraction.unresolvable,
        },
    ))
}
