//! Durable raw and enriched item storage.
//!
//! Layout under the storage directory:
//!
//! ```text
//! raw/<source>_<origin-slug>.jsonl     append-only upstream documents
//! enriched/<origin-slug>.jsonl         annotated chat messages, rewritten per build
//! identities/registry.jsonl            identity registry snapshot
//! identities/audit.jsonl               identity audit log
//! .writer.lock                         advisory single-writer lock
//! ```
//!
//! Raw files are never rewritten in place except by [`RawIndex::compact`];
//! the live record for a key is resolved at load time, last writer by
//! `fetched_at` wins.

pub mod jsonl;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::refparse::{EnrichedMessage, IssueKind, TrackerView};
use crate::sources::{origin_slug, ItemKind, RawRecord, RecordKey, RepoId, Source};
use crate::timestamp::Timestamp;

pub const RAW_DIR: &str = "raw";
pub const ENRICHED_DIR: &str = "enriched";
pub const IDENTITIES_DIR: &str = "identities";
const LOCK_FILE: &str = ".writer.lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt record at {path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("storage {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("encoding failure: {0}")]
    Encode(String),
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Advisory exclusive lock over a storage directory, released on drop.
#[derive(Debug)]
pub struct StorageLock {
    _file: File,
    path: PathBuf,
}

impl StorageLock {
    pub fn acquire(storage_dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(storage_dir).map_err(|e| StoreError::io(storage_dir, e))?;
        let path = storage_dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(StorageLock { _file: file, path }),
            Err(fs::TryLockError::WouldBlock) => Err(StoreError::Locked(storage_dir.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => Err(StoreError::io(&path, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Stored,
    Superseded,
    Ignored,
}

/// Half-open `[start, end)` time interval; either bound may be open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TimeRange {
    pub start: Option<Timestamp>,
    pub end: Option<Timestamp>,
}

impl TimeRange {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start.is_none_or(|s| t >= s) && self.end.is_none_or(|e| t < e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Filter {
    pub source: Option<Source>,
    pub origin: Option<String>,
    pub time_range: Option<TimeRange>,
    pub kind: Option<ItemKind>,
}

/// Anything the query layer can filter and order.
pub trait Indexed {
    fn source(&self) -> Source;
    fn origin(&self) -> &str;
    fn item_time(&self) -> Option<Timestamp>;
    fn kind(&self) -> ItemKind;
    fn sort_key(&self) -> (&str, &str);
}

impl Filter {
    pub fn matches<T: Indexed>(&self, item: &T) -> bool {
        if self.source.is_some_and(|s| s != item.source()) {
            return false;
        }
        if let Some(origin) = &self.origin {
            if !origin.eq_ignore_ascii_case(item.origin()) {
                return false;
            }
        }
        if let Some(range) = &self.time_range {
            match item.item_time() {
                Some(t) if range.contains(t) => {}
                _ => return false,
            }
        }
        self.kind.is_none_or(|k| k == item.kind())
    }
}

fn select<'a, T: Indexed + 'a>(items: impl Iterator<Item = &'a T>, filter: &Filter) -> Vec<&'a T> {
    let mut out: Vec<&T> = items.filter(|i| filter.matches(*i)).collect();
    out.sort_by(|a, b| {
        (a.item_time(), a.sort_key(), a.source()).cmp(&(b.item_time(), b.sort_key(), b.source()))
    });
    out
}

impl Indexed for RawRecord {
    fn source(&self) -> Source {
        self.key.source
    }
    fn origin(&self) -> &str {
        &self.key.origin
    }
    fn item_time(&self) -> Option<Timestamp> {
        RawRecord::item_time(self)
    }
    fn kind(&self) -> ItemKind {
        self.item_kind()
    }
    fn sort_key(&self) -> (&str, &str) {
        (&self.key.origin, &self.key.item_id)
    }
}

/// Live view over the raw JSONL files.
#[derive(Debug, Clone)]
pub struct RawIndex {
    dir: PathBuf,
    live: BTreeMap<RecordKey, RawRecord>,
}

impl RawIndex {
    /// Loads every raw file under `storage_dir/raw`, resolving liveness.
    pub fn open(storage_dir: &Path) -> Result<Self, StoreError> {
        let dir = storage_dir.join(RAW_DIR);
        let mut index = RawIndex {
            dir: dir.clone(),
            live: BTreeMap::new(),
        };
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(index),
            Err(e) => return Err(StoreError::io(&dir, e)),
        };
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for path in files {
            for record in jsonl::read_all::<RawRecord>(&path)? {
                index.admit(record);
            }
        }
        Ok(index)
    }

    fn admit(&mut self, record: RawRecord) -> AppendOutcome {
        match self.live.get(&record.key) {
            None => {
                self.live.insert(record.key.clone(), record);
                AppendOutcome::Stored
            }
            Some(existing) if record.fetched_at > existing.fetched_at => {
                self.live.insert(record.key.clone(), record);
                AppendOutcome::Superseded
            }
            Some(_) => AppendOutcome::Ignored,
        }
    }

    pub fn file_for(&self, source: Source, origin: &str) -> PathBuf {
        self.dir
            .join(format!("{}_{}.jsonl", source.as_str(), origin_slug(origin)))
    }

    /// Appends `record` unless an equal-or-newer version is already live.
    /// Callers must hold the [`StorageLock`].
    pub fn append(&mut self, record: RawRecord) -> Result<AppendOutcome, StoreError> {
        let path = self.file_for(record.key.source, &record.key.origin);
        let outcome = match self.live.get(&record.key) {
            None => AppendOutcome::Stored,
            Some(existing) if record.fetched_at > existing.fetched_at => AppendOutcome::Superseded,
            Some(_) => return Ok(AppendOutcome::Ignored),
        };
        jsonl::append(&path, &record)?;
        self.live.insert(record.key.clone(), record);
        Ok(outcome)
    }

    pub fn get(&self, key: &RecordKey) -> Option<&RawRecord> {
        self.live.get(key)
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &RawRecord> {
        self.live.values()
    }

    pub fn query(&self, filter: &Filter) -> Vec<&RawRecord> {
        select(self.live.values(), filter)
    }

    /// Latest upstream activity time stored for an origin, the resume point
    /// for incremental fetches.
    pub fn latest_item_time(&self, source: Source, origin: &str) -> Option<Timestamp> {
        self.live
            .values()
            .filter(|r| r.key.source == source && r.key.origin.eq_ignore_ascii_case(origin))
            .filter_map(RawRecord::item_time)
            .max()
    }

    /// Rewrites every raw file to hold only its live records.
    pub fn compact(&self) -> Result<usize, StoreError> {
        let mut by_file: BTreeMap<PathBuf, Vec<&RawRecord>> = BTreeMap::new();
        for r in self.live.values() {
            by_file
                .entry(self.file_for(r.key.source, &r.key.origin))
                .or_default()
                .push(r);
        }
        let mut rewritten = 0;
        for (path, records) in by_file {
            if jsonl::replace_if_changed(&path, &jsonl::encode_all(&records)?)? {
                rewritten += 1;
            }
        }
        Ok(rewritten)
    }
}

impl TrackerView for RawIndex {
    fn issue_kind(&self, repo: &RepoId, number: u64) -> Option<IssueKind> {
        let key = RecordKey {
            source: Source::Tracker,
            origin: repo.canonical(),
            item_id: number.to_string(),
        };
        self.live.get(&key).map(|r| match r.item_kind() {
            ItemKind::PullRequest => IssueKind::PullRequest,
            _ => IssueKind::Issue,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnrichedKey {
    pub origin: String,
    pub item_id: String,
}

/// One line of an enriched file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedItem {
    pub key: EnrichedKey,
    pub fetched_at: Timestamp,
    pub pipeline_version: String,
    pub payload: EnrichedMessage,
}

impl Indexed for EnrichedItem {
    fn source(&self) -> Source {
        Source::Chat
    }
    fn origin(&self) -> &str {
        &self.key.origin
    }
    fn item_time(&self) -> Option<Timestamp> {
        Some(self.payload.sent_at)
    }
    fn kind(&self) -> ItemKind {
        ItemKind::Message
    }
    fn sort_key(&self) -> (&str, &str) {
        (&self.key.origin, &self.key.item_id)
    }
}

/// Enriched messages, one file per room, each rebuilt wholesale.
#[derive(Debug, Clone)]
pub struct EnrichedIndex {
    dir: PathBuf,
}

impl EnrichedIndex {
    pub fn new(storage_dir: &Path) -> Self {
        EnrichedIndex {
            dir: storage_dir.join(ENRICHED_DIR),
        }
    }

    pub fn path_for(&self, origin: &str) -> PathBuf {
        self.dir.join(format!("{}.jsonl", origin_slug(origin)))
    }

    pub fn exists(&self, origin: &str) -> bool {
        self.path_for(origin).is_file()
    }

    /// Replaces a room's enriched file with `items`, ordered by send time
    /// then message id. Returns whether any bytes changed.
    pub fn write_room(&self, origin: &str, mut items: Vec<EnrichedItem>) -> Result<bool, StoreError> {
        items.sort_by(|a, b| {
            (a.payload.sent_at, &a.key.item_id).cmp(&(b.payload.sent_at, &b.key.item_id))
        });
        let bytes = jsonl::encode_all(&items)?;
        jsonl::replace_if_changed(&self.path_for(origin), &bytes)
    }

    pub fn load_room(&self, origin: &str) -> Result<Vec<EnrichedItem>, StoreError> {
        jsonl::read_all(&self.path_for(origin))
    }

    pub fn query(&self, origin: &str, filter: &Filter) -> Result<Vec<EnrichedItem>, StoreError> {
        let items = self.load_room(origin)?;
        Ok(select(items.iter(), filter).into_iter().cloned().collect())
    }

    /// Keys of enriched items with no live raw record behind them.
    pub fn orphans(&self, origin: &str, raw: &RawIndex) -> Result<Vec<EnrichedKey>, StoreError> {
        Ok(self
            .load_room(origin)?
            .into_iter()
            .filter(|item| {
                raw.get(&RecordKey {
                    source: Source::Chat,
                    origin: item.key.origin.clone(),
                    item_id: item.key.item_id.clone(),
                })
                .is_none()
            })
            .map(|item| item.key)
            .collect())
    }
}
