use std::fmt;
use std::sync::{Arc, Mutex};

use super::http::Clock;
use super::SourceError;
use crate::timestamp::Timestamp;

pub const DEFAULT_BUDGET: u32 = 5000;
pub const DEFAULT_WINDOW_SECS: i64 = 3600;

/// Per-token usage within the token's current window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UsageEntry {
    pub count: u32,
    pub window_start: Option<Timestamp>,
}

struct TokenState {
    secret: String,
    usage: UsageEntry,
}

/// Credentials with fixed per-window request budgets.
///
/// A token's window opens at its first request and lasts `window_secs`; once
/// it elapses the count resets on the next request. Selection is round-robin
/// over tokens that still have budget.
pub struct TokenPool {
    tokens: Vec<TokenState>,
    per_token_budget: u32,
    window_secs: i64,
    cursor: usize,
}

#[derive(Clone, PartialEq, Eq)]
pub struct TokenGrant {
    pub index: usize,
    pub secret: String,
}

impl fmt::Debug for TokenGrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenGrant")
            .field("index", &self.index)
            .field("secret", &"<redacted>")
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Acquire {
    Granted(TokenGrant),
    /// Every token is spent; the earliest window reopens at this instant.
    WaitUntil(Timestamp),
}

impl TokenPool {
    pub fn new(tokens: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::with_budget(tokens, DEFAULT_BUDGET, DEFAULT_WINDOW_SECS)
    }

    pub fn with_budget(
        tokens: impl IntoIterator<Item = impl Into<String>>,
        per_token_budget: u32,
        window_secs: i64,
    ) -> Self {
        TokenPool {
            tokens: tokens
                .into_iter()
                .map(|t| TokenState {
                    secret: t.into(),
                    usage: UsageEntry {
                        count: 0,
                        window_start: None,
                    },
                })
                .collect(),
            per_token_budget,
            window_secs,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn per_token_budget(&self) -> u32 {
        self.per_token_budget
    }

    pub fn window_secs(&self) -> i64 {
        self.window_secs
    }

    pub fn usage(&self) -> Vec<UsageEntry> {
        self.tokens.iter().map(|t| t.usage).collect()
    }

    fn window_expired(&self, usage: &UsageEntry, now: Timestamp) -> bool {
        match usage.window_start {
            None => true,
            Some(start) => now >= start + self.window_secs,
        }
    }

    fn has_budget(&self, usage: &UsageEntry, now: Timestamp) -> bool {
        self.window_expired(usage, now) || usage.count < self.per_token_budget
    }

    pub fn acquire(&mut self, now: Timestamp) -> Result<Acquire, SourceError> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(SourceError::EmptyPool);
        }
        for step in 0..n {
            let index = (self.cursor + step) % n;
            let usage = self.tokens[index].usage;
            if !self.has_budget(&usage, now) {
                continue;
            }
            let usage = if self.window_expired(&usage, now) {
                UsageEntry {
                    count: 1,
                    window_start: Some(now),
                }
            } else {
                UsageEntry {
                    count: usage.count + 1,
                    ..usage
                }
            };
            self.tokens[index].usage = usage;
            self.cursor = (index + 1) % n;
            return Ok(Acquire::Granted(TokenGrant {
                index,
                secret: self.tokens[index].secret.clone(),
            }));
        }
        // every token has a window_start here, otherwise it would have budget
        let reset = self
            .tokens
            .iter()
            .filter_map(|t| t.usage.window_start)
            .map(|start| start + self.window_secs)
            .min()
            .expect("exhausted tokens have open windows");
        Ok(Acquire::WaitUntil(reset))
    }
}

/// A [`TokenPool`] shared by concurrent fetchers; each acquisition is atomic.
#[derive(Clone)]
pub struct SharedTokenPool(Arc<Mutex<TokenPool>>);

impl SharedTokenPool {
    pub fn new(pool: TokenPool) -> Self {
        SharedTokenPool(Arc::new(Mutex::new(pool)))
    }

    pub fn try_acquire(&self, now: Timestamp) -> Result<Acquire, SourceError> {
        self.0.lock().expect("token pool poisoned").acquire(now)
    }

    /// Acquires a token, sleeping on `clock` while the whole pool is spent.
    pub fn acquire(&self, clock: &dyn Clock) -> Result<TokenGrant, SourceError> {
        loop {
            match self.try_acquire(clock.now())? {
                Acquire::Granted(grant) => return Ok(grant),
                Acquire::WaitUntil(t) => {
                    tracing::info!(until = %t, "all tokens exhausted, waiting for window reset");
                    clock.sleep_until(t);
                }
            }
        }
    }

    pub fn usage(&self) -> Vec<UsageEntry> {
        self.0.lock().expect("token pool poisoned").usage()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(secs: i64) -> Timestamp {
        Timestamp::from_unix(1_500_000_000 + secs)
    }

    fn granted(a: Acquire) -> TokenGrant {
        match a {
            Acquire::Granted(g) => g,
            other => panic!("expected grant, got {other:?}"),
        }
    }

    #[test]
    fn single_token_exhausts_after_budget() {
        let mut pool = TokenPool::new(["a"]);
        for _ in 0..5000 {
            granted(pool.acquire(t(10)).unwrap());
        }
        assert_eq!(pool.acquire(t(20)).unwrap(), Acquire::WaitUntil(t(3610)));
        // no side effect from the refused acquisition
        assert_eq!(pool.usage()[0].count, 5000);
    }

    #[test]
    fn second_token_doubles_capacity() {
        let mut pool = TokenPool::new(["a", "b"]);
        let mut grants = 0;
        while let Acquire::Granted(_) = pool.acquire(t(0)).unwrap() {
            grants += 1;
        }
        assert_eq!(grants, 10_000);
    }

    #[test]
    fn round_robin_alternates() {
        let mut pool = TokenPool::new(["a", "b", "c"]);
        let order: Vec<usize> = (0..6)
            .map(|_| granted(pool.acquire(t(0)).unwrap()).index)
            .collect();
        assert_eq!(order, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn window_elapse_resets_usage() {
        let mut pool = TokenPool::with_budget(["a"], 2, 60);
        granted(pool.acquire(t(0)).unwrap());
        granted(pool.acquire(t(1)).unwrap());
        assert_eq!(pool.acquire(t(59)).unwrap(), Acquire::WaitUntil(t(60)));
        let g = granted(pool.acquire(t(60)).unwrap());
        assert_eq!(g.secret, "a");
        assert_eq!(
            pool.usage()[0],
            UsageEntry {
                count: 1,
                window_start: Some(t(60))
            }
        );
    }

    #[test]
    fn empty_pool_is_an_error() {
        let mut pool = TokenPool::new(Vec::<String>::new());
        assert!(matches!(pool.acquire(t(0)), Err(SourceError::EmptyPool)));
    }

    proptest! {
        // Replays the grant log: within any window a token never exceeds budget.
        #[test]
        fn no_token_exceeds_budget(
            steps in proptest::collection::vec(0i64..40, 1..400),
            tokens in 1usize..4,
            budget in 1u32..6,
        ) {
            let names: Vec<String> = (0..tokens).map(|i| format!("tok{i}")).collect();
            let mut pool = TokenPool::with_budget(names, budget, 30);
            let mut now = t(0);
            let mut log: Vec<(usize, Timestamp)> = Vec::new();
            for dt in steps {
                now = now + dt % 7;
                if let Acquire::Granted(g) = pool.acquire(now).unwrap() {
                    log.push((g.index, now));
                }
            }
            // rebuild each token's windows from its grants alone
            for tok in 0..tokens {
                let mut window: Option<(Timestamp, u32)> = None;
                for &(_, at) in log.iter().filter(|(i, _)| *i == tok) {
                    window = match window {
                        Some((start, n)) if at < start + 30 => Some((start, n + 1)),
                        _ => Some((at, 1)),
                    };
                    prop_assert!(window.unwrap().1 <= budget);
                }
            }
        }
    }
}
