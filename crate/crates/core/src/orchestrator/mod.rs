//! Phase execution and the review service.
//!
//! Phases run one-shot over the configured rooms: `fetch` pulls chat and
//! tracker data into the raw index, `enrich` registers identities and
//! rebuilds each room's enriched index, `identities` proposes merge
//! candidates, `analyze` writes per-room reports and `export` writes flat
//! tables. One room's failure is recorded in the phase result and the
//! remaining rooms still run. Every run appends its result to
//! `journal.jsonl` under the storage directory.

pub mod api;
mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use api::{ReviewServer, ServeOptions};
pub use config::{ApiBaseUrls, ConfigError, PipelineConfig, DEFAULT_SERVE_PORT};

use crate::analytics::{self, export, AnalyticsError, MetricsReport, ReportParams, RoomAnalysis};
use crate::identities::{IdentityError, Registry, SYSTEM_ACTOR};
use crate::refparse::{self, FetchingResolver, KindResolver, LocalResolver};
use crate::sources::{
    ChatClient, Clock, RawRecord, RetryPolicy, RoomConfig, SharedTokenPool, Source, SourceError,
    SystemClock, TokenPool, TrackerClient,
};
use crate::store::{
    jsonl, AppendOutcome, EnrichedIndex, EnrichedItem, EnrichedKey, Filter, RawIndex, StorageLock,
    StoreError,
};
use crate::timestamp::Timestamp;

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const REPORTS_DIR: &str = "reports";
pub const EXPORTS_DIR: &str = "exports";

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing dependency: {0}")]
    DependencyMissing(String),
    #[error("cannot bind {addr}: {source}")]
    PortInUse {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Source(#[from] SourceError),
}

impl OrchestratorError {
    pub fn is_config(&self) -> bool {
        matches!(self, OrchestratorError::Config(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fetch,
    Enrich,
    Identities,
    Analyze,
    Export,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Fetch => "fetch",
            Phase::Enrich => "enrich",
            Phase::Identities => "identities",
            Phase::Analyze => "analyze",
            Phase::Export => "export",
        }
    }
}

/// One room-level failure inside a phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub room: Option<String>,
    pub code: String,
    pub message: String,
}

impl ErrorRecord {
    fn new(room: Option<&str>, code: &str, message: impl ToString) -> Self {
        ErrorRecord {
            room: room.map(str::to_string),
            code: code.to_string(),
            message: message.to_string(),
        }
    }

    fn from_source(room: &str, e: &SourceError) -> Self {
        let code = match e {
            SourceError::Auth { .. } => "auth",
            SourceError::UpstreamGone(_) => "upstream_gone",
            SourceError::NotFound(_) => "not_found",
            SourceError::Transport { .. } => "transport",
            SourceError::EmptyPool => "empty_pool",
            SourceError::Malformed { .. } => "malformed",
        };
        ErrorRecord::new(Some(room), code, e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: Phase,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub items_processed: usize,
    pub items_skipped: usize,
    pub errors: Vec<ErrorRecord>,
}

impl PhaseResult {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Per-run narrowing and overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub room: Option<String>,
    pub since: Option<Timestamp>,
    /// Export destination; defaults to `<storage>/exports`.
    pub out: Option<PathBuf>,
}

pub struct Pipeline {
    config: PipelineConfig,
    clock: Arc<dyn Clock>,
    retry: RetryPolicy,
    pool: SharedTokenPool,
    page_size: Option<usize>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let pool = SharedTokenPool::new(TokenPool::new(config.tokens.clone()));
        Ok(Pipeline {
            config,
            clock: Arc::new(SystemClock),
            retry: RetryPolicy::default(),
            pool,
            page_size: None,
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Overrides upstream page sizes (both sources).
    pub fn with_page_size(mut self, page_size: usize) -> Self {
        self.page_size = Some(page_size);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    pub fn storage_dir(&self) -> &Path {
        &self.config.storage_dir
    }

    fn chat_client(&self) -> ChatClient {
        let c = ChatClient::new(
            &self.config.api_base_urls.chat,
            self.pool.clone(),
            self.clock.clone(),
            self.retry,
        );
        match self.page_size {
            Some(n) => c.with_page_size(n),
            None => c,
        }
    }

    fn tracker_client(&self) -> TrackerClient {
        let c = TrackerClient::new(
            &self.config.api_base_urls.tracker,
            self.pool.clone(),
            self.clock.clone(),
            self.retry,
        );
        match self.page_size {
            Some(n) => c.with_page_size(n),
            None => c,
        }
    }

    /// Runs one phase and journals its result.
    pub fn run_phase(&self, phase: Phase, opts: &RunOptions) -> Result<PhaseResult, OrchestratorError> {
        let started_at = self.clock.now();
        let mut result = PhaseResult {
            phase,
            started_at,
            finished_at: started_at,
            items_processed: 0,
            items_skipped: 0,
            errors: Vec::new(),
        };
        match phase {
            Phase::Fetch => self.fetch(opts, &mut result)?,
            Phase::Enrich => self.enrich(opts, &mut result)?,
            Phase::Identities => self.detect(&mut result)?,
            Phase::Analyze => self.analyze(opts, &mut result)?,
            Phase::Export => self.export(opts, &mut result)?,
        }
        result.finished_at = self.clock.now().max(started_at);
        jsonl::append(&self.config.storage_dir.join(JOURNAL_FILE), &result)?;
        Ok(result)
    }

    fn fetch(&self, opts: &RunOptions, result: &mut PhaseResult) -> Result<(), OrchestratorError> {
        let rooms = self.config.selected_rooms(opts.room.as_deref())?;
        if self.config.tokens.is_empty() {
            return Err(ConfigError::Invalid("fetch needs at least one token".into()).into());
        }
        let _lock = StorageLock::acquire(&self.config.storage_dir)?;
        let mut raw = RawIndex::open(&self.config.storage_dir)?;
        let chat = self.chat_client();
        let tracker = self.tracker_client();

        let cursors: Vec<(Option<Timestamp>, Option<Timestamp>)> = rooms
            .iter()
            .map(|room| {
                let chat_since = opts
                    .since
                    .or_else(|| raw.latest_item_time(Source::Chat, &room.room_uri));
                let tracker_since = room.default_repo.as_ref().and_then(|repo| {
                    opts.since
                        .or_else(|| raw.latest_item_time(Source::Tracker, &repo.canonical()))
                });
                (chat_since, tracker_since)
            })
            .collect();

        // Rooms fetch concurrently; the token pool is the only shared state.
        let fetched: Vec<(Vec<RawRecord>, Vec<ErrorRecord>)> = std::thread::scope(|s| {
            let handles: Vec<_> = rooms
                .iter()
                .zip(&cursors)
                .map(|(room, &(chat_since, tracker_since))| {
                    let (chat, tracker) = (&chat, &tracker);
                    s.spawn(move || fetch_room(room, chat, tracker, chat_since, tracker_since))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fetch worker panicked"))
                .collect()
        });

        for (records, errors) in fetched {
            result.errors.extend(errors);
            for record in records {
                let unchanged = raw
                    .get(&record.key)
                    .is_some_and(|live| live.payload == record.payload);
                if unchanged {
                    result.items_skipped += 1;
                    continue;
                }
                match raw.append(record)? {
                    AppendOutcome::Ignored => result.items_skipped += 1,
                    _ => result.items_processed += 1,
                }
            }
        }
        Ok(())
    }

    fn enrich(&self, opts: &RunOptions, result: &mut PhaseResult) -> Result<(), OrchestratorError> {
        let rooms = self.config.selected_rooms(opts.room.as_deref())?;
        let _lock = StorageLock::acquire(&self.config.storage_dir)?;
        let mut raw = RawIndex::open(&self.config.storage_dir)?;
        let has_chat = |raw: &RawIndex, room: &RoomConfig| {
            !raw.query(&chat_filter(room)).is_empty()
        };
        if !rooms.iter().any(|r| has_chat(&raw, r)) {
            return Err(OrchestratorError::DependencyMissing(
                "no raw chat data; run fetch first".into(),
            ));
        }

        let mut registry = Registry::load(&self.config.storage_dir)?;
        register_all(&mut registry, &raw);

        let enriched = EnrichedIndex::new(&self.config.storage_dir);
        let tracker = (self.config.remote_lookup && !self.config.tokens.is_empty())
            .then(|| self.tracker_client());
        for room in &rooms {
            if !has_chat(&raw, room) {
                result.errors.push(ErrorRecord::new(
                    Some(&room.room_uri),
                    "dependency_missing",
                    "no raw chat data for room",
                ));
                continue;
            }
            let records: Vec<RawRecord> = raw.query(&chat_filter(room)).into_iter().cloned().collect();
            let items = match &tracker {
                Some(client) => {
                    let mut resolver = FetchingResolver::new(&mut raw, client);
                    let items = enrich_records(&records, room, &mut resolver, &registry, result);
                    for e in resolver.errors.drain(..) {
                        result.errors.push(ErrorRecord::new(Some(&room.room_uri), "lookup_failed", e));
                    }
                    items
                }
                None => enrich_records(&records, room, &mut LocalResolver(&raw), &registry, result),
            };
            enriched.write_room(&room.room_uri, items)?;
        }

        // Users of records fetched by remote lookups.
        register_all(&mut registry, &raw);
        registry.save(&self.config.storage_dir)?;
        Ok(())
    }

    fn detect(&self, result: &mut PhaseResult) -> Result<(), OrchestratorError> {
        if !Registry::exists(&self.config.storage_dir) {
            return Err(OrchestratorError::DependencyMissing(
                "no identity registry; run enrich first".into(),
            ));
        }
        let _lock = StorageLock::acquire(&self.config.storage_dir)?;
        let mut registry = Registry::load(&self.config.storage_dir)?;
        let found = registry.detect_candidates(self.config.threshold)?;
        result.items_processed = registry.propose(found, self.clock.now())?;
        registry.save(&self.config.storage_dir)?;
        Ok(())
    }

    /// Merges two clusters on behalf of `actor`.
    pub fn merge(&self, uuid_a: &str, uuid_b: &str, actor: &str) -> Result<PhaseResult, OrchestratorError> {
        self.mutate_registry(|reg, now| reg.merge(uuid_a, uuid_b, actor, now).map(|_| ()))
    }

    pub fn unmerge(&self, identity_id: &str, actor: &str) -> Result<PhaseResult, OrchestratorError> {
        self.mutate_registry(|reg, now| reg.unmerge(identity_id, actor, now).map(|_| ()))
    }

    pub fn decide(
        &self,
        candidate_id: &str,
        decision: crate::identities::Decision,
        actor: &str,
    ) -> Result<PhaseResult, OrchestratorError> {
        self.mutate_registry(|reg, now| reg.decide_candidate(candidate_id, decision, actor, now).map(|_| ()))
    }

    fn mutate_registry(
        &self,
        f: impl FnOnce(&mut Registry, Timestamp) -> Result<(), IdentityError>,
    ) -> Result<PhaseResult, OrchestratorError> {
        let started_at = self.clock.now();
        let _lock = StorageLock::acquire(&self.config.storage_dir)?;
        let mut registry = Registry::load(&self.config.storage_dir)?;
        f(&mut registry, started_at)?;
        registry.save(&self.config.storage_dir)?;
        let result = PhaseResult {
            phase: Phase::Identities,
            started_at,
            finished_at: self.clock.now().max(started_at),
            items_processed: 1,
            items_skipped: 0,
            errors: Vec::new(),
        };
        jsonl::append(&self.config.storage_dir.join(JOURNAL_FILE), &result)?;
        Ok(result)
    }

    /// Computes reports for the selected rooms. Rooms without an enriched
    /// index are reported as errors; if none has one the whole call fails.
    pub fn analyses(
        &self,
        opts: &RunOptions,
        errors: &mut Vec<ErrorRecord>,
    ) -> Result<Vec<RoomAnalysis>, OrchestratorError> {
        let rooms = self.config.selected_rooms(opts.room.as_deref())?;
        let raw = RawIndex::open(&self.config.storage_dir)?;
        let issues = analytics::issue_records(&raw);
        let enriched = EnrichedIndex::new(&self.config.storage_dir);
        let params = ReportParams {
            cutoff: self.config.cutoff,
            window_days: self.config.window_days,
            generated_at: self.clock.now(),
        };
        let mut out = Vec::new();
        for room in &rooms {
            match analytics::analyze_room(room, &enriched, &issues, params) {
                Ok(mut analysis) => {
                    keep_generated_at(&self.report_path(&room.room_uri), &mut analysis.report);
                    out.push(analysis);
                }
                Err(AnalyticsError::MissingEnrichedIndex(r)) => {
                    errors.push(ErrorRecord::new(Some(&r), "missing_enriched_index", "run enrich first"));
                }
                Err(AnalyticsError::Store(e)) => return Err(e.into()),
            }
        }
        if out.is_empty() {
            return Err(OrchestratorError::DependencyMissing(
                "no enriched index for any selected room; run enrich first".into(),
            ));
        }
        Ok(out)
    }

    pub fn report_path(&self, room_uri: &str) -> PathBuf {
        report_path(&self.config.storage_dir, &crate::sources::origin_slug(room_uri))
    }

    fn analyze(&self, opts: &RunOptions, result: &mut PhaseResult) -> Result<(), OrchestratorError> {
        let analyses = self.analyses(opts, &mut result.errors)?;
        for a in &analyses {
            jsonl::replace_if_changed(&self.report_path(&a.report.room), &export::json_bytes(&a.report)?)?;
            result.items_processed += 1;
        }
        Ok(())
    }

    fn export(&self, opts: &RunOptions, result: &mut PhaseResult) -> Result<(), OrchestratorError> {
        let analyses = self.analyses(opts, &mut result.errors)?;
        let out = opts
            .out
            .clone()
            .unwrap_or_else(|| self.config.storage_dir.join(EXPORTS_DIR));
        let written = export::write_exports(&out, &analyses)?;
        result.items_processed = analyses.len();
        result.items_skipped = usize::from(written == 0);
        Ok(())
    }
}

pub fn report_path(storage_dir: &Path, room_slug: &str) -> PathBuf {
    storage_dir.join(REPORTS_DIR).join(format!("{room_slug}.json"))
}

/// Reuses the stored report's `generated_at` when nothing else changed, so
/// rerunning on unchanged data leaves the file untouched.
fn keep_generated_at(path: &Path, report: &mut MetricsReport) {
    let Ok(bytes) = std::fs::read(path) else {
        return;
    };
    let Ok(stored) = serde_json::from_slice::<MetricsReport>(&bytes) else {
        return;
    };
    let candidate = MetricsReport {
        generated_at: stored.generated_at,
        ..report.clone()
    };
    if candidate == stored {
        *report = candidate;
    }
}

fn chat_filter(room: &RoomConfig) -> Filter {
    Filter {
        source: Some(Source::Chat),
        origin: Some(room.room_uri.clone()),
        ..Filter::default()
    }
}

fn fetch_room(
    room: &RoomConfig,
    chat: &ChatClient,
    tracker: &TrackerClient,
    chat_since: Option<Timestamp>,
    tracker_since: Option<Timestamp>,
) -> (Vec<RawRecord>, Vec<ErrorRecord>) {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut gone = false;
    for item in chat.fetch_room_messages(room, chat_since) {
        match item {
            Ok(r) => records.push(r),
            Err(e) => {
                gone |= matches!(e, SourceError::UpstreamGone(_));
                tracing::warn!(room = %room.room_uri, error = %e, "chat fetch failed");
                errors.push(ErrorRecord::from_source(&room.room_uri, &e));
            }
        }
    }
    if gone {
        return (records, errors);
    }
    if let Some(repo) = &room.default_repo {
        for item in tracker.fetch_repo_issues(repo, tracker_since) {
            match item {
                Ok(r) => records.push(r),
                Err(e) => {
                    tracing::warn!(room = %room.room_uri, %repo, error = %e, "tracker fetch failed");
                    errors.push(ErrorRecord::from_source(&room.room_uri, &e));
                }
            }
        }
    }
    (records, errors)
}

fn user_fields(user: &Value, login_key: &str, name_key: &str) -> Option<(String, String)> {
    let login = user.get(login_key)?.as_str().filter(|l| !l.is_empty())?;
    let name = user.get(name_key).and_then(Value::as_str).unwrap_or("");
    Some((login.to_string(), name.to_string()))
}

fn time_of(v: &Value, field: &str) -> Option<Timestamp> {
    v.get(field)?.as_str().and_then(|s| Timestamp::parse(s).ok())
}

/// Registers every author found in the raw index, oldest activity first.
fn register_all(registry: &mut Registry, raw: &RawIndex) {
    let mut sightings: Vec<(Timestamp, Source, String, String)> = Vec::new();
    for record in raw.records() {
        let p = &record.payload;
        match record.key.source {
            Source::Chat => {
                if let (Some(user), Some(at)) = (
                    p.get("fromUser").and_then(|u| user_fields(u, "username", "displayName")),
                    time_of(p, "sent"),
                ) {
                    sightings.push((at, Source::Chat, user.0, user.1));
                }
            }
            Source::Tracker => {
                let mut docs = vec![p];
                if let Some(comments) = p.get("comments_data").and_then(Value::as_array) {
                    docs.extend(comments);
                }
                for doc in docs {
                    let user = doc
                        .get("user_data")
                        .and_then(|u| user_fields(u, "login", "name"))
                        .or_else(|| doc.get("user").and_then(|u| user_fields(u, "login", "name")));
                    if let (Some(user), Some(at)) = (user, time_of(doc, "created_at")) {
                        sightings.push((at, Source::Tracker, user.0, user.1));
                    }
                }
            }
        }
    }
    sightings.sort();
    for (at, source, username, name) in sightings {
        if let Err(e) = registry.register(source, &username, &name, at) {
            tracing::warn!(%source, username, error = %e, "identity not registered");
        }
    }
}

fn enrich_records(
    records: &[RawRecord],
    room: &RoomConfig,
    resolver: &mut dyn KindResolver,
    registry: &Registry,
    result: &mut PhaseResult,
) -> Vec<EnrichedItem> {
    let mut items = Vec::new();
    for record in records {
        match refparse::enrich_message(record, room, resolver, registry) {
            Ok((message, _stats)) => {
                items.push(EnrichedItem {
                    key: EnrichedKey {
                        origin: record.key.origin.clone(),
                        item_id: record.key.item_id.clone(),
                    },
                    fetched_at: record.fetched_at,
                    pipeline_version: crate::PIPELINE_VERSION.to_string(),
                    payload: message,
                });
                result.items_processed += 1;
            }
            Err(e) => {
                tracing::warn!(room = %room.room_uri, error = %e, "skipping malformed message");
                result.items_skipped += 1;
            }
        }
    }
    items
}

/// Reports stored by `analyze`, keyed by room slug.
pub fn stored_report(storage_dir: &Path, room_slug: &str) -> Option<Value> {
    let bytes = std::fs::read(report_path(storage_dir, room_slug)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Audit helper shared by the CLI and the review API.
pub fn actor_or_default(actor: Option<&str>) -> String {
    actor
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .unwrap_or(SYSTEM_ACTOR)
        .to_string()
}
