use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use reqwest::Url;
use serde_json::{Map, Value};

use super::http::{ApiClient, Clock, Reply, RetryPolicy};
use super::tokens::SharedTokenPool;
use super::{RawRecord, RepoId, Source, SourceError};
use crate::timestamp::Timestamp;

pub const DEFAULT_PER_PAGE: usize = 100;

/// Client for a GitHub-compatible issue tracker.
///
/// Each stored item is the upstream issue document with two added keys:
/// `user_data` (the author's user document) and `comments_data` (every
/// comment, each with its own `user_data`). Pull requests arrive through the
/// issues listing and carry the upstream `pull_request` marker.
#[derive(Clone)]
pub struct TrackerClient {
    api: ApiClient,
    base: String,
    per_page: usize,
}

impl TrackerClient {
    pub fn new(
        base_url: &str,
        pool: SharedTokenPool,
        clock: Arc<dyn Clock>,
        retry: RetryPolicy,
    ) -> Self {
        TrackerClient {
            api: ApiClient::new(pool, clock, retry, "token"),
            base: base_url.trim_end_matches('/').to_string(),
            per_page: DEFAULT_PER_PAGE,
        }
    }

    pub fn with_page_size(mut self, per_page: usize) -> Self {
        self.per_page = per_page.max(1);
        self
    }

    /// Streams every issue and pull request updated at or after `since`.
    pub fn fetch_repo_issues(&self, repo: &RepoId, since: Option<Timestamp>) -> IssueStream<'_> {
        let mut params = vec![
            ("state", "all".to_string()),
            ("sort", "updated".to_string()),
            ("direction", "asc".to_string()),
            ("per_page", self.per_page.to_string()),
        ];
        if let Some(t) = since {
            params.push(("since", t.to_rfc3339()));
        }
        let first = Url::parse_with_params(
            &format!("{}/repos/{}/{}/issues", self.base, repo.owner, repo.name),
            &params,
        )
        .map(String::from)
        .map_err(|e| SourceError::Malformed {
            url: self.base.clone(),
            message: e.to_string(),
        });
        IssueStream {
            client: self,
            repo: repo.clone(),
            since,
            next: Some(first),
            buffer: VecDeque::new(),
            users: HashMap::new(),
            first_page: true,
        }
    }

    /// Single-item lookup; `Ok(None)` when the tracker has no such number.
    pub fn fetch_issue(&self, repo: &RepoId, number: u64) -> Result<Option<RawRecord>, SourceError> {
        let url = format!(
            "{}/repos/{}/{}/issues/{}",
            self.base, repo.owner, repo.name, number
        );
        let issue = match self.api.get(&url)? {
            Reply::Found { body, .. } => body,
            Reply::Missing => return Ok(None),
        };
        let mut users = HashMap::new();
        let fetched_at = self.api.clock().now();
        self.assemble(repo, issue, fetched_at, &mut users).map(Some)
    }

    fn assemble(
        &self,
        repo: &RepoId,
        issue: Value,
        fetched_at: Timestamp,
        users: &mut HashMap<String, Value>,
    ) -> Result<RawRecord, SourceError> {
        let Value::Object(mut doc) = issue else {
            return Err(SourceError::Malformed {
                url: self.base.clone(),
                message: "issue is not a JSON object".into(),
            });
        };
        let number = doc
            .get("number")
            .and_then(Value::as_u64)
            .ok_or_else(|| SourceError::Malformed {
                url: self.base.clone(),
                message: "issue without number".into(),
            })?;

        let author = login(&doc);
        let user_data = self.user(author.as_deref(), users)?;
        let has_comments = doc.get("comments").and_then(Value::as_u64) != Some(0);
        let comments = if has_comments {
            self.comments(repo, number, users)?
        } else {
            Vec::new()
        };
        doc.insert("user_data".into(), user_data);
        doc.insert("comments_data".into(), Value::Array(comments));

        Ok(RawRecord::new(
            Source::Tracker,
            repo.canonical(),
            number.to_string(),
            fetched_at,
            Value::Object(doc),
        ))
    }

    fn comments(
        &self,
        repo: &RepoId,
        number: u64,
        users: &mut HashMap<String, Value>,
    ) -> Result<Vec<Value>, SourceError> {
        let mut next = Some(format!(
            "{}/repos/{}/{}/issues/{}/comments?per_page={}",
            self.base, repo.owner, repo.name, number, self.per_page
        ));
        let mut out = Vec::new();
        while let Some(url) = next.take() {
            let (body, link) = match self.api.get(&url)? {
                Reply::Found { body, next } => (body, next),
                Reply::Missing => break,
            };
            let Value::Array(page) = body else {
                return Err(SourceError::Malformed {
                    url,
                    message: "expected a JSON array of comments".into(),
                });
            };
            for comment in page {
                let Value::Object(mut c) = comment else { continue };
                let user_data = self.user(login(&c).as_deref(), users)?;
                c.insert("user_data".into(), user_data);
                out.push(Value::Object(c));
            }
            next = link;
        }
        Ok(out)
    }

    fn user(&self, login: Option<&str>, cache: &mut HashMap<String, Value>) -> Result<Value, SourceError> {
        let Some(login) = login else {
            return Ok(Value::Null);
        };
        if let Some(v) = cache.get(login) {
            return Ok(v.clone());
        }
        let url = format!("{}/users/{}", self.base, login);
        let doc = match self.api.get(&url)? {
            Reply::Found { body, .. } => body,
            Reply::Missing => Value::Null,
        };
        cache.insert(login.to_string(), doc.clone());
        Ok(doc)
    }
}

fn login(doc: &Map<String, Value>) -> Option<String> {
    doc.get("user")?
        .get("login")?
        .as_str()
        .map(str::to_string)
}

pub struct IssueStream<'a> {
    client: &'a TrackerClient,
    repo: RepoId,
    since: Option<Timestamp>,
    next: Option<Result<String, SourceError>>,
    buffer: VecDeque<Value>,
    users: HashMap<String, Value>,
    first_page: bool,
}

impl IssueStream<'_> {
    fn load_page(&mut self, url: String) -> Result<(), SourceError> {
        match self.client.api.get(&url)? {
            Reply::Found { body, next } => {
                let Value::Array(items) = body else {
                    return Err(SourceError::Malformed {
                        url,
                        message: "expected a JSON array of issues".into(),
                    });
                };
                self.buffer.extend(items);
                self.next = next.map(Ok);
                self.first_page = false;
                Ok(())
            }
            Reply::Missing if self.first_page => Err(SourceError::NotFound(self.repo.slug())),
            Reply::Missing => Ok(()),
        }
    }

    fn updated_before_since(&self, issue: &Value) -> bool {
        let updated = issue
            .get("updated_at")
            .and_then(Value::as_str)
            .and_then(|s| Timestamp::parse(s).ok());
        matches!((self.since, updated), (Some(since), Some(u)) if u < since)
    }
}

impl Iterator for IssueStream<'_> {
    type Item = Result<RawRecord, SourceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(issue) = self.buffer.pop_front() {
                if self.updated_before_since(&issue) {
                    continue;
                }
                let fetched_at = self.client.api.clock().now();
                let client = self.client;
                return Some(client.assemble(&self.repo, issue, fetched_at, &mut self.users));
            }
            match self.next.take()? {
                Ok(url) => {
                    if let Err(e) = self.load_page(url) {
                        return Some(Err(e));
                    }
                }
                Err(e) => return Some(Err(e)),
            }
        }
    }
}
