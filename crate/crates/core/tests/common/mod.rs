//! Shared test support: an in-process mock of the chat and tracker APIs, a
//! settable clock, and fixture helpers.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chatmine_core::identities::Registry;
use chatmine_core::orchestrator::{Pipeline, PipelineConfig};
use chatmine_core::sources::{Clock, RetryPolicy};
use chatmine_core::timestamp::Timestamp;
use serde_json::{json, Value};
use tokio::sync::oneshot;

pub const GOOD_TOKEN: &str = "fixture-token";

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/acme_widget")
}

/// Settable clock; sleeping jumps straight to the target instant.
#[derive(Debug)]
pub struct TestClock(AtomicI64);

impl TestClock {
    pub fn at(t: Timestamp) -> Arc<Self> {
        Arc::new(TestClock(AtomicI64::new(t.unix())))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.unix(), Ordering::SeqCst);
    }

    pub fn advance(&self, secs: i64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for TestClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_unix(self.0.load(Ordering::SeqCst))
    }

    fn sleep_until(&self, t: Timestamp) {
        self.0.fetch_max(t.unix(), Ordering::SeqCst);
    }
}

pub fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 5,
        base_delay: Duration::from_millis(1),
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Lowercase room uri → messages in ascending send order.
    pub rooms: BTreeMap<String, Vec<Value>>,
    /// Lowercase repo slug → `(issue, comments)`.
    pub repos: BTreeMap<String, Vec<(Value, Vec<Value>)>>,
    pub users: BTreeMap<String, Value>,
}

impl Dataset {
    pub fn fixture() -> Dataset {
        let text = std::fs::read_to_string(fixture_dir().join("upstream.json")).unwrap();
        let doc: Value = serde_json::from_str(&text).unwrap();
        let mut data = Dataset::default();
        for (room, msgs) in doc["rooms"].as_object().unwrap() {
            data.rooms.insert(room.to_lowercase(), msgs.as_array().unwrap().clone());
        }
        for (repo, items) in doc["repos"].as_object().unwrap() {
            let items = items
                .as_array()
                .unwrap()
                .iter()
                .map(|i| (i["issue"].clone(), i["comments"].as_array().unwrap().clone()))
                .collect();
            data.repos.insert(repo.to_lowercase(), items);
        }
        for (login, user) in doc["users"].as_object().unwrap() {
            data.users.insert(login.clone(), user.clone());
        }
        data
    }

    /// `n` messages one minute apart starting 2019-01-01, ids `1..=n`.
    pub fn synthetic_room(n: usize) -> Vec<Value> {
        let start = Timestamp::parse("2019-01-01T00:00:00Z").unwrap();
        (1..=n)
            .map(|i| {
                json!({
                    "id": i.to_string(),
                    "text": format!("message {i}"),
                    "sent": (start + 60 * i as i64).to_rfc3339(),
                    "fromUser": {"username": format!("user{}", i % 3), "displayName": ""},
                })
            })
            .collect()
    }
}

struct MockState {
    data: Mutex<Dataset>,
    base: Mutex<String>,
    requests: AtomicUsize,
    fail_next: AtomicUsize,
    log: Mutex<Vec<String>>,
}

pub struct MockUpstream {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

type Resp = Result<Response, Response>;


fn status(code: StatusCode) -> Response {
    (code, Json(json!({"message": code.canonical_reason()}))).into_response()
}

impl MockState {
    #[allow(clippy::result_large_err)]
    fn gate(&self, headers: &HeaderMap, scheme: &str, what: String) -> Result<(), Response> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(what);
        if self
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(status(StatusCode::INTERNAL_SERVER_ERROR));
        }
        let expected = format!("{scheme} {GOOD_TOKEN}");
        let ok = headers
            .get("authorization")
            .and_then(|h| h.to_str().ok())
            .is_some_and(|h| h == expected);
        if ok {
            Ok(())
        } else {
            Err(status(StatusCode::UNAUTHORIZED))
        }
    }
}

fn page_of<T: Clone>(items: &[T], page: usize, per_page: usize) -> (Vec<T>, bool) {
    let start = (page - 1) * per_page;
    let chunk: Vec<T> = items.iter().skip(start).take(per_page).cloned().collect();
    (chunk, start + per_page < items.len())
}

fn with_link(body: Vec<Value>, next: Option<String>) -> Response {
    let mut resp = Json(Value::Array(body)).into_response();
    if let Some(url) = next {
        resp.headers_mut().insert(
            "link",
            HeaderValue::from_str(&format!("<{url}>; rel=\"next\", <{url}>; rel=\"last\"")).unwrap(),
        );
    }
    resp
}

async fn chat_messages(
    State(st): State<Arc<MockState>>,
    UrlPath((owner, name)): UrlPath<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> Resp {
    st.gate(&headers, "Bearer", format!("chat {owner}/{name}"))?;
    let data = st.data.lock().unwrap();
    let Some(msgs) = data.rooms.get(&format!("{owner}/{name}").to_lowercase()) else {
        return Err(status(StatusCode::NOT_FOUND));
    };
    let limit: usize = q.get("limit").and_then(|l| l.parse().ok()).unwrap_or(50);
    let start = match q.get("afterId") {
        Some(after) => msgs
            .iter()
            .position(|m| m["id"].as_str() == Some(after.as_str()))
            .map_or(msgs.len(), |i| i + 1),
        None => 0,
    };
    let page: Vec<Value> = msgs.iter().skip(start).take(limit).cloned().collect();
    Ok(Json(Value::Array(page)).into_response())
}

async fn issues(
    State(st): State<Arc<MockState>>,
    UrlPath((owner, name)): UrlPath<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> Resp {
    st.gate(&headers, "token", format!("issues {owner}/{name}"))?;
    let data = st.data.lock().unwrap();
    let Some(items) = data.repos.get(&format!("{owner}/{name}").to_lowercase()) else {
        return Err(status(StatusCode::NOT_FOUND));
    };
    let since = q.get("since").map(|s| Timestamp::parse(s).unwrap());
    let mut list: Vec<Value> = items
        .iter()
        .map(|(i, _)| i.clone())
        .filter(|i| {
            let updated = Timestamp::parse(i["updated_at"].as_str().unwrap()).unwrap();
            since.is_none_or(|s| updated >= s)
        })
        .collect();
    list.sort_by_key(|i| i["updated_at"].as_str().unwrap().to_string());
    let per_page: usize = q.get("per_page").and_then(|p| p.parse().ok()).unwrap_or(30);
    let page: usize = q.get("page").and_then(|p| p.parse().ok()).unwrap_or(1);
    let (chunk, more) = page_of(&list, page, per_page);
    let base = st.base.lock().unwrap().clone();
    let next = more.then(|| {
        let mut url = format!(
            "{base}/repos/{owner}/{name}/issues?state=all&sort=updated&direction=asc&per_page={per_page}&page={}",
            page + 1
        );
        if let Some(s) = q.get("since") {
            url.push_str(&format!("&since={s}"));
        }
        url
    });
    Ok(with_link(chunk, next))
}

fn find_issue<'a>(data: &'a Dataset, owner: &str, name: &str, n: u64) -> Option<&'a (Value, Vec<Value>)> {
    data.repos
        .get(&format!("{owner}/{name}").to_lowercase())?
        .iter()
        .find(|(i, _)| i["number"].as_u64() == Some(n))
}

async fn single_issue(
    State(st): State<Arc<MockState>>,
    UrlPath((owner, name, n)): UrlPath<(String, String, u64)>,
    headers: HeaderMap,
) -> Resp {
    st.gate(&headers, "token", format!("issue {owner}/{name}#{n}"))?;
    let data = st.data.lock().unwrap();
    match find_issue(&data, &owner, &name, n) {
        Some((issue, _)) => Ok(Json(issue.clone()).into_response()),
        None => Err(status(StatusCode::NOT_FOUND)),
    }
}

async fn comments(
    State(st): State<Arc<MockState>>,
    UrlPath((owner, name, n)): UrlPath<(String, String, u64)>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> Resp {
    st.gate(&headers, "token", format!("comments {owner}/{name}#{n}"))?;
    let data = st.data.lock().unwrap();
    let Some((_, cs)) = find_issue(&data, &owner, &name, n) else {
        return Err(status(StatusCode::NOT_FOUND));
    };
    let per_page: usize = q.get("per_page").and_then(|p| p.parse().ok()).unwrap_or(30);
    let page: usize = q.get("page").and_then(|p| p.parse().ok()).unwrap_or(1);
    let (chunk, more) = page_of(cs, page, per_page);
    let base = st.base.lock().unwrap().clone();
    let next = more.then(|| {
        format!(
            "{base}/repos/{owner}/{name}/issues/{n}/comments?per_page={per_page}&page={}",
            page + 1
        )
    });
    Ok(with_link(chunk, next))
}

async fn user(
    State(st): State<Arc<MockState>>,
    UrlPath(login): UrlPath<String>,
    headers: HeaderMap,
) -> Resp {
    st.gate(&headers, "token", format!("user {login}"))?;
    let data = st.data.lock().unwrap();
    match data.users.get(&login) {
        Some(u) => Ok(Json(u.clone()).into_response()),
        None => Err(status(StatusCode::NOT_FOUND)),
    }
}

fn flatten(r: Resp) -> Response {
    r.unwrap_or_else(|e| e)
}

impl MockUpstream {
    pub fn start(data: Dataset) -> MockUpstream {
        let state = Arc::new(MockState {
            data: Mutex::new(data),
            base: Mutex::new(String::new()),
            requests: AtomicUsize::new(0),
            fail_next: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route(
                "/v1/rooms/:owner/:name/chatMessages",
                get(|s, p, q, h| async { flatten(chat_messages(s, p, q, h).await) }),
            )
            .route(
                "/repos/:owner/:name/issues",
                get(|s, p, q, h| async { flatten(issues(s, p, q, h).await) }),
            )
            .route(
                "/repos/:owner/:name/issues/:n",
                get(|s, p, h| async { flatten(single_issue(s, p, h).await) }),
            )
            .route(
                "/repos/:owner/:name/issues/:n/comments",
                get(|s, p, q, h| async { flatten(comments(s, p, q, h).await) }),
            )
            .route("/users/:login", get(|s, p, h| async { flatten(user(s, p, h).await) }))
            .with_state(state.clone());

        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let addr = listener.local_addr().unwrap();
        *state.base.lock().unwrap() = format!("http://{addr}");
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        MockUpstream {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// Requests whose log line starts with `prefix`.
    pub fn requests_to(&self, prefix: &str) -> usize {
        self.state
            .log
            .lock()
            .unwrap()
            .iter()
            .filter(|l| l.starts_with(prefix))
            .count()
    }

    /// The next `n` requests fail with HTTP 500.
    pub fn fail_next(&self, n: usize) {
        self.state.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn remove_room(&self, room: &str) {
        self.state.data.lock().unwrap().rooms.remove(&room.to_lowercase());
    }

    pub fn update<F: FnOnce(&mut Dataset)>(&self, f: F) {
        f(&mut self.state.data.lock().unwrap());
    }
}

impl Drop for MockUpstream {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Instant every fixture run pretends to happen at.
pub fn fixture_now() -> Timestamp {
    Timestamp::parse("2022-02-03T00:00:00Z").unwrap()
}

/// The fixture config pointed at `mock` with storage under `storage`.
pub fn fixture_config(mock: &MockUpstream, storage: &Path) -> PipelineConfig {
    let text = std::fs::read_to_string(fixture_dir().join("miner.toml")).unwrap();
    let mut config = PipelineConfig::parse(&text).unwrap();
    config.storage_dir = storage.to_path_buf();
    config.api_base_urls.chat = mock.base_url();
    config.api_base_urls.tracker = mock.base_url();
    config
}

pub fn fixture_pipeline(mock: &MockUpstream, storage: &Path) -> (Pipeline, Arc<TestClock>) {
    let clock = TestClock::at(fixture_now());
    let pipeline = Pipeline::new(fixture_config(mock, storage))
        .unwrap()
        .with_clock(clock.clone())
        .with_retry(fast_retry());
    (pipeline, clock)
}

/// Relative path → bytes for every file under `dir`, skipping `skip` names.
pub fn snapshot(dir: &Path, skip: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, skip: &[&str], out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for entry in entries {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            if skip.contains(&name.as_str()) {
                continue;
            }
            if path.is_dir() {
                walk(root, &path, skip, out);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, skip, &mut out);
    out
}

/// One line per candidate, chat side first.
pub fn candidate_lines(reg: &Registry) -> String {
    let mut out = String::new();
    for c in reg.candidates(None) {
        let mut pair = [
            reg.identity(&c.identity_a).unwrap(),
            reg.identity(&c.identity_b).unwrap(),
        ];
        pair.sort_by_key(|i| i.source);
        let (a, b) = (pair[0], pair[1]);
        let (name, user) = (c.name_similarity, c.username_similarity);
        out.push_str(&format!(
            "{}:{} {}:{} name={name:.4} username={user:.4}\n",
            a.source, a.username, b.source, b.username
        ));
    }
    out
}
