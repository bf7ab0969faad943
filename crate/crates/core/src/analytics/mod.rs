//! Reference counts, resolution times and comment-change ratios.
//!
//! All timestamps compare at whole-second precision. The optional cutoff is
//! inclusive and applies to tracker data as an as-of snapshot: comments
//! after it are ignored, an issue closed after it counts as open, and an
//! issue created after it does not exist.

mod boxplot;
pub mod export;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use boxplot::{boxplot_summary, quantile, BoxplotSummary};

use crate::refparse::{Category, EnrichedMessage, IssueKind};
use crate::sources::{RawRecord, RepoId, RoomConfig, Source};
use crate::store::{EnrichedIndex, Filter, RawIndex, StoreError};
use crate::timestamp::Timestamp;

pub const DEFAULT_WINDOW_DAYS: u32 = 7;
pub const DAY_SECS: i64 = 86_400;

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("no enriched index for room {0}")]
    MissingEnrichedIndex(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEvent {
    pub room: String,
    pub repo: RepoId,
    pub number: u64,
    pub kind: IssueKind,
    pub category: Category,
    pub referenced_at: Timestamp,
    pub is_first_mention: bool,
    #[serde(skip)]
    pub message_id: String,
}

/// One event per reference in messages sent at or before `cutoff`, in
/// message order. The first mention of each `(repo, number)` is the
/// earliest, ties going to the smaller message id.
pub fn build_events(messages: &[EnrichedMessage], cutoff: Option<Timestamp>) -> Vec<ReferenceEvent> {
    let mut kept: Vec<&EnrichedMessage> = messages
        .iter()
        .filter(|m| cutoff.is_none_or(|c| m.sent_at <= c))
        .collect();
    kept.sort_by(|a, b| (a.sent_at, &a.message_id).cmp(&(b.sent_at, &b.message_id)));

    let mut seen = HashSet::new();
    let mut events = Vec::new();
    for m in kept {
        for r in &m.references {
            let first = seen.insert((r.repo.clone(), r.number));
            events.push(ReferenceEvent {
                room: m.room.clone(),
                repo: r.repo.clone(),
                number: r.number,
                kind: r.kind,
                category: r.category,
                referenced_at: m.sent_at,
                is_first_mention: first,
                message_id: m.message_id.clone(),
            });
        }
    }
    events
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssueRecord {
    pub repo: RepoId,
    pub number: u64,
    pub kind: IssueKind,
    pub created_at: Timestamp,
    pub closed_at: Option<Timestamp>,
    pub comment_times: Vec<Timestamp>,
}

fn time_field(v: &Value, field: &str) -> Option<Timestamp> {
    v.get(field)?.as_str().and_then(|s| Timestamp::parse(s).ok())
}

impl IssueRecord {
    /// Reads a tracker payload. `None` when it lacks a number or creation
    /// time.
    pub fn from_raw(raw: &RawRecord) -> Option<IssueRecord> {
        if raw.key.source != Source::Tracker {
            return None;
        }
        let p = &raw.payload;
        let repo: RepoId = raw.key.origin.parse().ok()?;
        let number = p.get("number").and_then(Value::as_u64)?;
        let created_at = time_field(p, "created_at")?;
        let kind = if p.get("pull_request").is_some() {
            IssueKind::PullRequest
        } else {
            IssueKind::Issue
        };
        let mut comment_times: Vec<Timestamp> = p
            .get("comments_data")
            .and_then(Value::as_array)
            .map(|cs| cs.iter().filter_map(|c| time_field(c, "created_at")).collect())
            .unwrap_or_default();
        comment_times.sort();
        Some(IssueRecord {
            repo,
            number,
            kind,
            created_at,
            closed_at: time_field(p, "closed_at"),
            comment_times,
        })
    }

    /// The record as it stood at `cutoff`, or `None` if it did not exist yet.
    pub fn as_of(&self, cutoff: Option<Timestamp>) -> Option<IssueRecord> {
        let Some(cutoff) = cutoff else {
            return Some(self.clone());
        };
        if self.created_at > cutoff {
            return None;
        }
        Some(IssueRecord {
            closed_at: self.closed_at.filter(|c| *c <= cutoff),
            comment_times: self.comment_times.iter().copied().filter(|t| *t <= cutoff).collect(),
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionTime {
    Seconds(i64),
    Open,
    /// Closed before it was created.
    NegativeInterval,
}

pub fn resolution_time(issue: &IssueRecord) -> ResolutionTime {
    match issue.closed_at {
        None => ResolutionTime::Open,
        Some(closed) if closed < issue.created_at => ResolutionTime::NegativeInterval,
        Some(closed) => ResolutionTime::Seconds(closed - issue.created_at),
    }
}

/// Comment counts around a reference instant `t`: before is `[t - w, t)`,
/// after is `(t, t + w]`, and comments exactly at `t` count in neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCounts {
    pub before: usize,
    pub after: usize,
    pub at_instant: usize,
}

impl WindowCounts {
    /// `after / before`, undefined when nothing preceded the reference.
    pub fn ratio(&self) -> Option<f64> {
        (self.before > 0).then(|| self.after as f64 / self.before as f64)
    }
}

pub fn comment_windows(comment_times: &[Timestamp], at: Timestamp, window_secs: i64) -> WindowCounts {
    let mut counts = WindowCounts {
        before: 0,
        after: 0,
        at_instant: 0,
    };
    for &t in comment_times {
        let d = t - at;
        if d == 0 {
            counts.at_instant += 1;
        } else if (-window_secs..0).contains(&d) {
            counts.before += 1;
        } else if d > 0 && d <= window_secs {
            counts.after += 1;
        }
    }
    counts
}

pub fn comment_change_ratio(event: &ReferenceEvent, issue: &IssueRecord, window_secs: i64) -> Option<f64> {
    comment_windows(&issue.comment_times, event.referenced_at, window_secs).ratio()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub room: String,
    pub cutoff: Option<Timestamp>,
    pub window_days: u32,
    pub total_messages: usize,
    pub messages_with_refs: usize,
    pub ref_counts: BTreeMap<Category, usize>,
    pub resolution: BoxplotSummary,
    pub comment_ratio: BoxplotSummary,
    /// Comments posted in the same second as the mention they follow.
    pub comments_at_reference_instant: usize,
    pub negative_intervals: usize,
    pub generated_at: Timestamp,
    pub pipeline_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRow {
    pub repo: RepoId,
    pub number: u64,
    pub seconds: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub repo: RepoId,
    pub number: u64,
    pub before: usize,
    pub after: usize,
    pub ratio: Option<f64>,
}

/// A report plus the per-event and per-issue tables it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomAnalysis {
    pub report: MetricsReport,
    pub events: Vec<ReferenceEvent>,
    pub resolutions: Vec<ResolutionRow>,
    pub ratios: Vec<RatioRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportParams {
    pub cutoff: Option<Timestamp>,
    pub window_days: u32,
    pub generated_at: Timestamp,
}

pub fn compute_report(
    room: &RoomConfig,
    messages: &[EnrichedMessage],
    issues: &HashMap<(RepoId, u64), IssueRecord>,
    params: ReportParams,
) -> RoomAnalysis {
    let cutoff = params.cutoff;
    let window_secs = i64::from(params.window_days) * DAY_SECS;
    let in_scope: Vec<&EnrichedMessage> = messages
        .iter()
        .filter(|m| cutoff.is_none_or(|c| m.sent_at <= c))
        .collect();
    let events = build_events(messages, cutoff);

    let mut ref_counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|c| (*c, 0)).collect();
    for e in &events {
        *ref_counts.entry(e.category).or_default() += 1;
    }

    let snapshot = |repo: &RepoId, number: u64| {
        issues
            .get(&(repo.clone(), number))
            .and_then(|i| i.as_of(cutoff))
    };

    let mut resolutions = Vec::new();
    let mut ratios = Vec::new();
    let mut negative_intervals = 0;
    let mut at_instant = 0;
    for e in events.iter().filter(|e| e.is_first_mention) {
        let Some(issue) = snapshot(&e.repo, e.number) else {
            continue;
        };
        let seconds = match resolution_time(&issue) {
            ResolutionTime::Seconds(s) => Some(s),
            ResolutionTime::Open => None,
            ResolutionTime::NegativeInterval => {
                tracing::warn!(repo = %e.repo, number = e.number, "closed before created; excluded");
                negative_intervals += 1;
                None
            }
        };
        resolutions.push(ResolutionRow {
            repo: e.repo.clone(),
            number: e.number,
            seconds,
        });

        let w = comment_windows(&issue.comment_times, e.referenced_at, window_secs);
        at_instant += w.at_instant;
        ratios.push(RatioRow {
            repo: e.repo.clone(),
            number: e.number,
            before: w.before,
            after: w.after,
            ratio: w.ratio(),
        });
    }

    let resolved: Vec<f64> = resolutions.iter().filter_map(|r| r.seconds).map(|s| s as f64).collect();
    let unresolved = resolutions.len() - resolved.len() - negative_intervals;
    let defined: Vec<f64> = ratios.iter().filter_map(|r| r.ratio).collect();

    let report = MetricsReport {
        room: room.room_uri.clone(),
        cutoff,
        window_days: params.window_days,
        total_messages: in_scope.len(),
        messages_with_refs: in_scope.iter().filter(|m| !m.references.is_empty()).count(),
        ref_counts,
        resolution: boxplot_summary(&resolved, unresolved),
        comment_ratio: boxplot_summary(&defined, ratios.len() - defined.len()),
        comments_at_reference_instant: at_instant,
        negative_intervals,
        generated_at: params.generated_at,
        pipeline_version: crate::PIPELINE_VERSION.to_string(),
    };
    RoomAnalysis {
        report,
        events,
        resolutions,
        ratios,
    }
}

/// Latest tracker records keyed by `(repo, number)`.
pub fn issue_records(raw: &RawIndex) -> HashMap<(RepoId, u64), IssueRecord> {
    let filter = Filter {
        source: Some(Source::Tracker),
        ..Filter::default()
    };
    raw.query(&filter)
        .into_iter()
        .filter_map(IssueRecord::from_raw)
        .map(|i| ((i.repo.clone(), i.number), i))
        .collect()
}

/// Loads a room's enriched messages and computes its report.
pub fn analyze_room(
    room: &RoomConfig,
    enriched: &EnrichedIndex,
    issues: &HashMap<(RepoId, u64), IssueRecord>,
    params: ReportParams,
) -> Result<RoomAnalysis, AnalyticsError> {
    if !enriched.exists(&room.room_uri) {
        return Err(AnalyticsError::MissingEnrichedIndex(room.room_uri.clone()));
    }
    let messages: Vec<EnrichedMessage> = enriched
        .load_room(&room.room_uri)?
        .into_iter()
        .map(|item| item.payload)
        .collect();
    Ok(compute_report(room, &messages, issues, params))
}
