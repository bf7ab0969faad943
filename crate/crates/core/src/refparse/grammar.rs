//! Issue/pull-request reference grammar.
//!
//! Three forms are recognized, scanning left to right and taking the longest
//! match at the leftmost position, never overlapping:
//!
//! | form                   | shape                                                  |
//! |------------------------|--------------------------------------------------------|
//! | `url`                  | `http(s)://github.com/{owner}/{repo}/(issues|pull)/{n}` |
//! | `cross_repo_shorthand` | `{owner}/{repo}#{n}`                                   |
//! | `shorthand`            | `#{n}`, resolved against the room's default repository |
//!
//! * `owner` is `[A-Za-z0-9][A-Za-z0-9-]*`; `repo` is `[A-Za-z0-9._-]+`; the
//!   host is matched case-insensitively.
//! * `n` is `[1-9][0-9]*` (at most 18 digits) and must be followed by a
//!   non-alphanumeric character or the end of the text, so `#12abc` is not a
//!   reference and trailing punctuation such as `.,;:)]` is never part of it.
//! * A `url` must not be preceded by an alphanumeric character. A
//!   `cross_repo_shorthand` must not be preceded by any of
//!   `[A-Za-z0-9._/-]`. A `shorthand` `#` must not be preceded by any of
//!   `[A-Za-z0-9_&./-]`, which rules out `C#7` and HTML entities like `&#39;`.
//! * Code spans and fenced blocks are scanned like any other text.
//!
//! Spans are `[start, end)` offsets in Unicode scalar values.

use serde::{Deserialize, Serialize};

use crate::sources::RepoId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefForm {
    Url,
    Shorthand,
    CrossRepoShorthand,
}

/// A reference as written, before kind resolution and classification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedRef {
    /// `None` for a `#n` shorthand in a room without a default repository.
    pub repo: Option<RepoId>,
    pub number: u64,
    pub form: RefForm,
    pub span: (usize, usize),
    /// The URL named a `/pull/` path.
    pub pull_hint: bool,
}

const MAX_DIGITS: usize = 18;

fn is_owner_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-'
}

fn is_repo_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-')
}

struct Scanner<'a> {
    chars: &'a [char],
}

struct Hit {
    end: usize,
    owner: Option<String>,
    name: Option<String>,
    number: u64,
    form: RefForm,
    pull_hint: bool,
}

impl Scanner<'_> {
    fn at(&self, i: usize) -> Option<char> {
        self.chars.get(i).copied()
    }

    fn prev(&self, i: usize) -> Option<char> {
        i.checked_sub(1).and_then(|j| self.at(j))
    }

    fn literal_ci(&self, i: usize, lit: &str) -> Option<usize> {
        let mut j = i;
        for expected in lit.chars() {
            if !self.at(j)?.eq_ignore_ascii_case(&expected) {
                return None;
            }
            j += 1;
        }
        Some(j)
    }

    fn owner(&self, i: usize) -> Option<(String, usize)> {
        if !self.at(i)?.is_ascii_alphanumeric() {
            return None;
        }
        let mut j = i;
        while self.at(j).is_some_and(is_owner_char) {
            j += 1;
        }
        Some((self.chars[i..j].iter().collect(), j))
    }

    fn repo(&self, i: usize) -> Option<(String, usize)> {
        let mut j = i;
        while self.at(j).is_some_and(is_repo_char) {
            j += 1;
        }
        (j > i).then(|| (self.chars[i..j].iter().collect(), j))
    }

    /// `[1-9][0-9]*` followed by a non-alphanumeric char or end of text.
    fn number(&self, i: usize) -> Option<(u64, usize)> {
        let first = self.at(i)?;
        if !('1'..='9').contains(&first) {
            return None;
        }
        let mut j = i;
        while self.at(j).is_some_and(|c| c.is_ascii_digit()) {
            j += 1;
        }
        if j - i > MAX_DIGITS || self.at(j).is_some_and(|c| c.is_alphanumeric()) {
            return None;
        }
        let digits: String = self.chars[i..j].iter().collect();
        digits.parse().ok().map(|n| (n, j))
    }

    fn url(&self, i: usize) -> Option<Hit> {
        if self.prev(i).is_some_and(|c| c.is_alphanumeric()) {
            return None;
        }
        let j = self
            .literal_ci(i, "https://")
            .or_else(|| self.literal_ci(i, "http://"))?;
        let j = self.literal_ci(j, "github.com/")?;
        let (owner, j) = self.owner(j)?;
        let j = self.literal_ci(j, "/")?;
        let (name, j) = self.repo(j)?;
        let j = self.literal_ci(j, "/")?;
        let (pull_hint, j) = match self.literal_ci(j, "issues/") {
            Some(j) => (false, j),
            None => (true, self.literal_ci(j, "pull/")?),
        };
        let (number, end) = self.number(j)?;
        Some(Hit {
            end,
            owner: Some(owner),
            name: Some(name),
            number,
            form: RefForm::Url,
            pull_hint,
        })
    }

    fn cross(&self, i: usize) -> Option<Hit> {
        if self
            .prev(i)
            .is_some_and(|c| is_repo_char(c) || c == '/')
        {
            return None;
        }
        let (owner, j) = self.owner(i)?;
        if self.at(j) != Some('/') {
            return None;
        }
        let (name, j) = self.repo(j + 1)?;
        if self.at(j) != Some('#') {
            return None;
        }
        let (number, end) = self.number(j + 1)?;
        Some(Hit {
            end,
            owner: Some(owner),
            name: Some(name),
            number,
            form: RefForm::CrossRepoShorthand,
            pull_hint: false,
        })
    }

    fn short(&self, i: usize) -> Option<Hit> {
        if self.at(i) != Some('#') {
            return None;
        }
        if self
            .prev(i)
            .is_some_and(|c| c.is_alphanumeric() || matches!(c, '_' | '&' | '.' | '/' | '-'))
        {
            return None;
        }
        let (number, end) = self.number(i + 1)?;
        Some(Hit {
            end,
            owner: None,
            name: None,
            number,
            form: RefForm::Shorthand,
            pull_hint: false,
        })
    }
}

/// Every reference in `text`, in order of appearance.
pub fn scan(text: &str, default_repo: Option<&RepoId>) -> Vec<ExtractedRef> {
    let chars: Vec<char> = text.chars().collect();
    let scanner = Scanner { chars: &chars };
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let best = [scanner.url(i), scanner.cross(i), scanner.short(i)]
            .into_iter()
            .flatten()
            .max_by_key(|h| h.end);
        let Some(hit) = best else {
            i += 1;
            continue;
        };
        let repo = match (hit.owner, hit.name) {
            (Some(owner), Some(name)) => RepoId::new(owner, name).ok(),
            _ => default_repo.cloned(),
        };
        out.push(ExtractedRef {
            repo,
            number: hit.number,
            form: hit.form,
            span: (i, hit.end),
            pull_hint: hit.pull_hint,
        });
        i = hit.end;
    }
    out
}
