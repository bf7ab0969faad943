use std::collections::VecDeque;
use std::sync::Arc;

use reqwest::Url;
use serde_json::Value;

use super::http::{ApiClient, Clock, Reply, RetryPolicy};
use super::tokens::SharedTokenPool;
use super::{RawRecord, RepoId, RoomConfig, Source, SourceError};
use crate::timestamp::Timestamp;

pub const DEFAULT_PAGE_SIZE: usize = 50;

/// Client for a Gitter-compatible chat API.
///
/// Messages are read from `GET {base}/v1/rooms/{owner}/{name}/chatMessages`
/// with `limit` and an `afterId` cursor; pages are ascending by `sent` and a
/// short page marks the end of the room history.
#[derive(Clone)]
pub struct ChatClient {
    api: ApiClient,
    base: String,
    page_size: usize,
}

impl ChatClient {
    pub fn new(
        base_url: &str,
        pool: SharedTokenPool,
        clock: Arc<dyn Clock>,
        retry: RetryPolicy,
    ) -> Self {
        ChatClient {
            api: ApiClient::new(pool, clock, retry, "Bearer"),
            base: base_url.trim_end_matches('/').to_string(),
            page_size: DEFAULT_PAGE_SIZE,
        }
    }

    pub fn with_page_size(mut self, page_size: usize) -> Self {
        self.page_size = page_size.max(1);
        self
    }

    /// Streams every message sent at or after `since` in ascending order.
    /// Disabled rooms yield nothing.
    pub fn fetch_room_messages(&self, room: &RoomConfig, since: Option<Timestamp>) -> MessageStream<'_> {
        MessageStream {
            client: self,
            room_uri: room.room_uri.clone(),
            since,
            after_id: None,
            buffer: VecDeque::new(),
            done: !room.enabled,
            pages: 0,
        }
    }

    fn page_url(&self, room_uri: &str, after_id: Option<&str>) -> Result<Url, SourceError> {
        let repo: RepoId = room_uri.parse().map_err(|_| SourceError::Malformed {
            url: self.base.clone(),
            message: format!("bad room uri {room_uri:?}"),
        })?;
        let base = format!(
            "{}/v1/rooms/{}/{}/chatMessages",
            self.base, repo.owner, repo.name
        );
        let limit = self.page_size.to_string();
        let mut params = vec![("limit", limit.as_str())];
        if let Some(id) = after_id {
            params.push(("afterId", id));
        }
        Url::parse_with_params(&base, &params).map_err(|e| SourceError::Malformed {
            url: base,
            message: e.to_string(),
        })
    }
}

pub struct MessageStream<'a> {
    client: &'a ChatClient,
    room_uri: String,
    since: Option<Timestamp>,
    after_id: Option<String>,
    buffer: VecDeque<Result<RawRecord, SourceError>>,
    done: bool,
    pages: usize,
}

impl MessageStream<'_> {
    /// Page requests issued so far.
    pub fn pages_requested(&self) -> usize {
        self.pages
    }

    fn load_page(&mut self) -> Result<(), SourceError> {
        let url = self
            .client
            .page_url(&self.room_uri, self.after_id.as_deref())?;
        self.pages += 1;
        let body = match self.client.api.get(url.as_str())? {
            Reply::Found { body, .. } => body,
            Reply::Missing => return Err(SourceError::UpstreamGone(self.room_uri.clone())),
        };
        let Value::Array(mut messages) = body else {
            return Err(SourceError::Malformed {
                url: url.to_string(),
                message: "expected a JSON array of messages".into(),
            });
        };
        if messages.len() < self.client.page_size {
            self.done = true;
        }
        if let Some(last) = messages.last().and_then(message_id) {
            self.after_id = Some(last);
        } else {
            self.done = true;
        }

        let fetched_at = self.client.api.clock().now();
        messages.sort_by_key(sent_time);
        for msg in messages {
            let Some(id) = message_id(&msg) else {
                self.buffer.push_back(Err(SourceError::Malformed {
                    url: url.to_string(),
                    message: "message without id".into(),
                }));
                continue;
            };
            if let (Some(since), Some(sent)) = (self.since, sent_time(&msg)) {
                if sent < since {
                    continue;
                }
            }
            self.buffer.push_back(Ok(RawRecord::new(
                Source::Chat,
                self.room_uri.clone(),
                id,
                fetched_at,
                msg,
            )));
        }
        Ok(())
    }
}

impl Iterator for MessageStream<'_> {
    type Item = Result<RawRecord, SourceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(item) = self.buffer.pop_front() {
                return Some(item);
            }
            if self.done {
                return None;
            }
            if let Err(e) = self.load_page() {
                self.done = true;
                return Some(Err(e));
            }
        }
    }
}

fn message_id(msg: &Value) -> Option<String> {
    match msg.get("id")? {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn sent_time(msg: &Value) -> Option<Timestamp> {
    msg.get("sent")
        .and_then(Value::as_str)
        .and_then(|s| Timestamp::parse(s).ok())
}
