use std::sync::Arc;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::{HeaderMap, AUTHORIZATION, LINK, USER_AGENT};
use serde_json::Value;

use super::tokens::SharedTokenPool;
use super::SourceError;
use crate::timestamp::Timestamp;

/// Wall-clock source used for rate-limit windows and record stamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
    fn sleep_until(&self, t: Timestamp);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }

    fn sleep_until(&self, t: Timestamp) {
        let wait = t - Timestamp::now();
        if wait > 0 {
            std::thread::sleep(Duration::from_secs(wait as u64));
        }
    }
}

/// Exponential backoff for transient failures (transport errors, 429, 5xx).
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << (attempt.saturating_sub(1)).min(16))
    }
}

pub(crate) enum Reply {
    Found { body: Value, next: Option<String> },
    /// 404 or 410.
    Missing,
}

/// Authenticated JSON GETs against one upstream.
#[derive(Clone)]
pub(crate) struct ApiClient {
    http: Client,
    pool: SharedTokenPool,
    clock: Arc<dyn Clock>,
    retry: RetryPolicy,
    auth_scheme: &'static str,
}

impl ApiClient {
    pub(crate) fn new(
        pool: SharedTokenPool,
        clock: Arc<dyn Clock>,
        retry: RetryPolicy,
        auth_scheme: &'static str,
    ) -> Self {
        let http = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("TLS backend available");
        ApiClient {
            http,
            pool,
            clock,
            retry,
            auth_scheme,
        }
    }

    pub(crate) fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    pub(crate) fn get(&self, url: &str) -> Result<Reply, SourceError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let grant = self.pool.acquire(self.clock.as_ref())?;
            let sent = self
                .http
                .get(url)
                .header(USER_AGENT, concat!("chatmine/", env!("CARGO_PKG_VERSION")))
                .header(
                    AUTHORIZATION,
                    format!("{} {}", self.auth_scheme, grant.secret),
                )
                .send();

            let (status, message) = match sent {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    match status {
                        200..=299 => {
                            let next = next_link(resp.headers());
                            let body: Value =
                                resp.json().map_err(|e| SourceError::Malformed {
                                    url: url.to_string(),
                                    message: e.to_string(),
                                })?;
                            return Ok(Reply::Found { body, next });
                        }
                        401 | 403 => {
                            return Err(SourceError::Auth {
                                url: url.to_string(),
                                status,
                            })
                        }
                        404 | 410 => return Ok(Reply::Missing),
                        429 | 500..=599 => (Some(status), format!("HTTP {status}")),
                        _ => {
                            return Err(SourceError::Transport {
                                url: url.to_string(),
                                attempts: attempt,
                                last_status: Some(status),
                                message: format!("unexpected HTTP {status}"),
                            })
                        }
                    }
                }
                Err(e) => (None, e.to_string()),
            };

            if attempt >= self.retry.max_attempts {
                return Err(SourceError::Transport {
                    url: url.to_string(),
                    attempts: attempt,
                    last_status: status,
                    message,
                });
            }
            let delay = self.retry.delay(attempt);
            tracing::warn!(url, attempt, ?delay, %message, "transient failure, retrying");
            std::thread::sleep(delay);
        }
    }
}

/// Extracts the `rel="next"` target from an RFC 8288 `Link` header.
pub(crate) fn next_link(headers: &HeaderMap) -> Option<String> {
    let raw = headers.get(LINK)?.to_str().ok()?;
    raw.split(',').find_map(|part| {
        let mut pieces = part.split(';');
        let target = pieces.next()?.trim();
        let is_next = pieces.any(|p| {
            let p = p.trim();
            p == "rel=\"next\"" || p == "rel=next"
        });
        if is_next {
            target
                .strip_prefix('<')
                .and_then(|t| t.strip_suffix('>'))
                .map(str::to_string)
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use reqwest::header::HeaderValue;

    #[test]
    fn parses_next_link() {
        let mut h = HeaderMap::new();
        h.insert(
            LINK,
            HeaderValue::from_static(
                "<https://x/repos/a/b/issues?page=3>; rel=\"next\", <https://x/repos/a/b/issues?page=9>; rel=\"last\"",
            ),
        );
        assert_eq!(
            next_link(&h).as_deref(),
            Some("https://x/repos/a/b/issues?page=3")
        );
    }

    #[test]
    fn last_page_has_no_next() {
        let mut h = HeaderMap::new();
        h.insert(
            LINK,
            HeaderValue::from_static("<https://x/?page=1>; rel=\"first\""),
        );
        assert_eq!(next_link(&h), None);
        assert_eq!(next_link(&HeaderMap::new()), None);
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
        };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(4), Duration::from_millis(800));
    }
}
