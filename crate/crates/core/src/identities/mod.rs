//! Per-source identities, unique-identity clusters, alias detection and
//! human merge decisions.
//!
//! Every state change is an [`AuditEntry`] applied through one code path, so
//! replaying the audit log on an empty registry rebuilds the same state.
//! Cluster uuids are always the id of one of their members: a fresh
//! identity's singleton takes the identity id, a merge keeps the smaller of
//! the two uuids, and an unmerge re-keys the remainder to its smallest
//! member id if the departing identity owned the uuid.

mod similarity;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use similarity::{fold, levenshtein, normalized_similarity};

use crate::refparse::AuthorMap;
use crate::sources::Source;
use crate::store::{jsonl, StoreError, IDENTITIES_DIR};
use crate::timestamp::Timestamp;

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const SYSTEM_ACTOR: &str = "system";

#[derive(Debug, thiserror::Error)]
pub enum IdentityError {
    #[error("username must not be empty")]
    EmptyUsername,
    #[error("unknown cluster {0}")]
    UnknownCluster(String),
    #[error("unknown identity {0}")]
    UnknownIdentity(String),
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
    #[error("candidate {0} was already decided")]
    AlreadyDecided(String),
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Stable identity id: hex SHA-256 of `source:username`, first 40 digits.
pub fn identity_id(source: Source, username: &str) -> String {
    let digest = Sha256::digest(format!("{}:{}", source.as_str(), username).as_bytes());
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex.truncate(40);
    hex
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub id: String,
    pub source: Source,
    pub username: String,
    pub display_name: String,
    pub first_seen: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterOrigin {
    AutoExact,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueIdentity {
    pub uuid: String,
    pub members: BTreeSet<String>,
    pub created_by: ClusterOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pending,
    Accepted,
    Rejected,
}

impl std::str::FromStr for CandidateStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pending" => Ok(CandidateStatus::Pending),
            "accepted" => Ok(CandidateStatus::Accepted),
            "rejected" => Ok(CandidateStatus::Rejected),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeCandidate {
    pub candidate_id: String,
    pub identity_a: String,
    pub identity_b: String,
    pub name_similarity: f64,
    pub username_similarity: f64,
    pub status: CandidateStatus,
    pub decided_at: Option<Timestamp>,
    pub decided_by: Option<String>,
}

impl MergeCandidate {
    pub fn min_similarity(&self) -> f64 {
        self.name_similarity.min(self.username_similarity)
    }
}

/// Detection order: weakest similarity descending, then id.
fn candidate_order(a: &MergeCandidate, b: &MergeCandidate) -> std::cmp::Ordering {
    b.min_similarity()
        .total_cmp(&a.min_similarity())
        .then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

fn candidate_id(a: &str, b: &str) -> String {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let digest = Sha256::digest(format!("{lo}:{hi}").as_bytes());
    let mut id = String::from("c");
    for b in &digest[..8] {
        id.push_str(&format!("{b:02x}"));
    }
    id
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AuditAction {
    Registered {
        source: Source,
        username: String,
        display_name: String,
    },
    Proposed {
        candidate: MergeCandidate,
    },
    Merged {
        uuid_a: String,
        uuid_b: String,
    },
    Unmerged {
        identity_id: String,
    },
    Decided {
        candidate_id: String,
        decision: Decision,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub at: Timestamp,
    pub actor: String,
    #[serde(flatten)]
    pub action: AuditAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum SnapshotLine {
    Identity(Identity),
    Cluster(UniqueIdentity),
    Candidate(MergeCandidate),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    identities: BTreeMap<String, Identity>,
    clusters: BTreeMap<String, UniqueIdentity>,
    membership: BTreeMap<String, String>,
    candidates: BTreeMap<String, MergeCandidate>,
    audit: Vec<AuditEntry>,
    persisted_audit: usize,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    // ---- reads ----

    pub fn identity(&self, id: &str) -> Option<&Identity> {
        self.identities.get(id)
    }

    pub fn identities(&self) -> impl Iterator<Item = &Identity> {
        self.identities.values()
    }

    pub fn cluster(&self, uuid: &str) -> Option<&UniqueIdentity> {
        self.clusters.get(uuid)
    }

    pub fn clusters(&self) -> impl Iterator<Item = &UniqueIdentity> {
        self.clusters.values()
    }

    pub fn cluster_of(&self, identity_id: &str) -> Option<&UniqueIdentity> {
        self.membership
            .get(identity_id)
            .and_then(|uuid| self.clusters.get(uuid))
    }

    pub fn candidate(&self, id: &str) -> Option<&MergeCandidate> {
        self.candidates.get(id)
    }

    /// Candidates with the given status (all when `None`), detection order.
    pub fn candidates(&self, status: Option<CandidateStatus>) -> Vec<MergeCandidate> {
        let mut out: Vec<MergeCandidate> = self
            .candidates
            .values()
            .filter(|c| status.is_none_or(|s| c.status == s))
            .cloned()
            .collect();
        out.sort_by(candidate_order);
        out
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    /// Audit entries touching any current member of cluster `uuid`.
    pub fn audit_trail(&self, uuid: &str) -> Vec<AuditEntry> {
        let Some(cluster) = self.clusters.get(uuid) else {
            return Vec::new();
        };
        let touches = |id: &str| cluster.members.contains(id);
        self.audit
            .iter()
            .filter(|e| match &e.action {
                AuditAction::Registered { source, username, .. } => {
                    touches(&identity_id(*source, username))
                }
                AuditAction::Proposed { candidate } => {
                    touches(&candidate.identity_a) || touches(&candidate.identity_b)
                }
                AuditAction::Merged { uuid_a, uuid_b } => touches(uuid_a) || touches(uuid_b),
                AuditAction::Unmerged { identity_id } => touches(identity_id),
                AuditAction::Decided { candidate_id, .. } => self
                    .candidates
                    .get(candidate_id)
                    .is_some_and(|c| touches(&c.identity_a) || touches(&c.identity_b)),
            })
            .cloned()
            .collect()
    }

    /// Checks that clusters exactly partition the identity set.
    pub fn check_partition(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (uuid, cluster) in &self.clusters {
            if cluster.members.is_empty() {
                return Err(format!("cluster {uuid} is empty"));
            }
            if !cluster.members.contains(uuid) {
                return Err(format!("cluster {uuid} does not contain its uuid"));
            }
            for m in &cluster.members {
                if !self.identities.contains_key(m) {
                    return Err(format!("cluster {uuid} holds unknown identity {m}"));
                }
                if !seen.insert(m.clone()) {
                    return Err(format!("identity {m} is in two clusters"));
                }
                if self.membership.get(m) != Some(uuid) {
                    return Err(format!("membership of {m} disagrees with cluster {uuid}"));
                }
            }
        }
        if seen.len() != self.identities.len() || self.membership.len() != self.identities.len() {
            return Err("some identity has no cluster".into());
        }
        Ok(())
    }

    // ---- mutations ----

    /// Registers `(source, username)`, creating a singleton cluster the
    /// first time. Re-registration keeps the id; a non-empty display name
    /// replaces the stored one and `first_seen` moves to the earliest
    /// sighting. Unchanged re-registrations leave no audit entry.
    pub fn register(
        &mut self,
        source: Source,
        username: &str,
        display_name: &str,
        seen_at: Timestamp,
    ) -> Result<Identity, IdentityError> {
        if username.is_empty() {
            return Err(IdentityError::EmptyUsername);
        }
        let id = identity_id(source, username);
        if let Some(existing) = self.identities.get(&id) {
            let renamed = !display_name.is_empty() && display_name != existing.display_name;
            if !renamed && seen_at >= existing.first_seen {
                return Ok(existing.clone());
            }
        }
        self.record(
            seen_at,
            SYSTEM_ACTOR,
            AuditAction::Registered {
                source,
                username: username.to_string(),
                display_name: display_name.to_string(),
            },
        )?;
        Ok(self.identities[&id].clone())
    }

    /// Pending candidates for cross-source pairs in distinct clusters whose
    /// display names and usernames both exceed `threshold`. Pairs with any
    /// existing candidate are skipped. Does not modify the registry.
    pub fn detect_candidates(&self, threshold: f64) -> Result<Vec<MergeCandidate>, IdentityError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(IdentityError::BadThreshold(threshold));
        }
        let folded: Vec<(&Identity, Vec<char>, Vec<char>)> = self
            .identities
            .values()
            .map(|i| (i, fold(&i.username), fold(&i.display_name)))
            .collect();

        let mut out = Vec::new();
        for (x, (a, a_user, a_name)) in folded.iter().enumerate() {
            for (b, b_user, b_name) in &folded[x + 1..] {
                if a.source == b.source || self.membership[&a.id] == self.membership[&b.id] {
                    continue;
                }
                if a_name.is_empty() || b_name.is_empty() {
                    continue;
                }
                let cid = candidate_id(&a.id, &b.id);
                if self.candidates.contains_key(&cid) {
                    continue;
                }
                if similarity::similarity_upper_bound(a_user.len(), b_user.len()) <= threshold
                    || similarity::similarity_upper_bound(a_name.len(), b_name.len()) <= threshold
                {
                    continue;
                }
                let username_similarity = similarity::similarity_from(
                    levenshtein(a_user, b_user),
                    a_user.len().max(b_user.len()),
                );
                if username_similarity <= threshold {
                    continue;
                }
                let name_similarity = similarity::similarity_from(
                    levenshtein(a_name, b_name),
                    a_name.len().max(b_name.len()),
                );
                if name_similarity <= threshold {
                    continue;
                }
                let (identity_a, identity_b) = if a.id <= b.id {
                    (a.id.clone(), b.id.clone())
                } else {
                    (b.id.clone(), a.id.clone())
                };
                out.push(MergeCandidate {
                    candidate_id: cid,
                    identity_a,
                    identity_b,
                    name_similarity,
                    username_similarity,
                    status: CandidateStatus::Pending,
                    decided_at: None,
                    decided_by: None,
                });
            }
        }
        out.sort_by(candidate_order);
        Ok(out)
    }

    /// Stores freshly detected candidates; returns how many were new.
    pub fn propose(
        &mut self,
        candidates: Vec<MergeCandidate>,
        at: Timestamp,
    ) -> Result<usize, IdentityError> {
        let mut added = 0;
        for candidate in candidates {
            if self.candidates.contains_key(&candidate.candidate_id) {
                continue;
            }
            self.record(at, SYSTEM_ACTOR, AuditAction::Proposed { candidate })?;
            added += 1;
        }
        Ok(added)
    }

    /// Unions two clusters under the smaller uuid. Self-merge is a no-op.
    pub fn merge(
        &mut self,
        uuid_a: &str,
        uuid_b: &str,
        actor: &str,
        at: Timestamp,
    ) -> Result<UniqueIdentity, IdentityError> {
        for uuid in [uuid_a, uuid_b] {
            if !self.clusters.contains_key(uuid) {
                return Err(IdentityError::UnknownCluster(uuid.to_string()));
            }
        }
        if uuid_a != uuid_b {
            self.record(
                at,
                actor,
                AuditAction::Merged {
                    uuid_a: uuid_a.to_string(),
                    uuid_b: uuid_b.to_string(),
                },
            )?;
        }
        Ok(self.clusters[uuid_a.min(uuid_b)].clone())
    }

    /// Moves an identity out of its cluster into a fresh singleton.
    pub fn unmerge(
        &mut self,
        identity: &str,
        actor: &str,
        at: Timestamp,
    ) -> Result<UniqueIdentity, IdentityError> {
        let cluster = self
            .cluster_of(identity)
            .ok_or_else(|| IdentityError::UnknownIdentity(identity.to_string()))?;
        if cluster.members.len() > 1 {
            self.record(
                at,
                actor,
                AuditAction::Unmerged {
                    identity_id: identity.to_string(),
                },
            )?;
        }
        Ok(self.cluster_of(identity).expect("identity stays registered").clone())
    }

    pub fn decide_candidate(
        &mut self,
        candidate_id: &str,
        decision: Decision,
        actor: &str,
        at: Timestamp,
    ) -> Result<MergeCandidate, IdentityError> {
        let candidate = self
            .candidates
            .get(candidate_id)
            .ok_or_else(|| IdentityError::UnknownCandidate(candidate_id.to_string()))?;
        if candidate.status != CandidateStatus::Pending {
            return Err(IdentityError::AlreadyDecided(candidate_id.to_string()));
        }
        self.record(
            at,
            actor,
            AuditAction::Decided {
                candidate_id: candidate_id.to_string(),
                decision,
            },
        )?;
        Ok(self.candidates[candidate_id].clone())
    }

    fn record(&mut self, at: Timestamp, actor: &str, action: AuditAction) -> Result<(), IdentityError> {
        let entry = AuditEntry {
            seq: self.audit.len() as u64 + 1,
            at,
            actor: actor.to_string(),
            action,
        };
        self.apply(&entry)?;
        self.audit.push(entry);
        Ok(())
    }

    fn apply(&mut self, entry: &AuditEntry) -> Result<(), IdentityError> {
        match &entry.action {
            AuditAction::Registered {
                source,
                username,
                display_name,
            } => {
                let id = identity_id(*source, username);
                match self.identities.get_mut(&id) {
                    Some(existing) => {
                        if !display_name.is_empty() {
                            existing.display_name = display_name.clone();
                        }
                        existing.first_seen = existing.first_seen.min(entry.at);
                    }
                    None => {
                        self.identities.insert(
                            id.clone(),
                            Identity {
                                id: id.clone(),
                                source: *source,
                                username: username.clone(),
                                display_name: display_name.clone(),
                                first_seen: entry.at,
                            },
                        );
                        self.clusters.insert(
                            id.clone(),
                            UniqueIdentity {
                                uuid: id.clone(),
                                members: BTreeSet::from([id.clone()]),
                                created_by: ClusterOrigin::AutoExact,
                            },
                        );
                        self.membership.insert(id.clone(), id);
                    }
                }
            }
            AuditAction::Proposed { candidate } => {
                self.candidates
                    .insert(candidate.candidate_id.clone(), candidate.clone());
            }
            AuditAction::Merged { uuid_a, uuid_b } => {
                self.union(uuid_a, uuid_b, entry)?;
            }
            AuditAction::Unmerged { identity_id } => {
                let uuid = self
                    .membership
                    .get(identity_id)
                    .cloned()
                    .ok_or_else(|| IdentityError::UnknownIdentity(identity_id.clone()))?;
                let mut cluster = self.clusters.remove(&uuid).expect("membership is consistent");
                cluster.members.remove(identity_id);
                if !cluster.members.is_empty() {
                    if uuid == *identity_id {
                        cluster.uuid = cluster.members.first().expect("non-empty").clone();
                        for m in &cluster.members {
                            self.membership.insert(m.clone(), cluster.uuid.clone());
                        }
                    }
                    self.clusters.insert(cluster.uuid.clone(), cluster);
                }
                self.clusters.insert(
                    identity_id.clone(),
                    UniqueIdentity {
                        uuid: identity_id.clone(),
                        members: BTreeSet::from([identity_id.clone()]),
                        created_by: ClusterOrigin::Manual,
                    },
                );
                self.membership.insert(identity_id.clone(), identity_id.clone());
            }
            AuditAction::Decided {
                candidate_id,
                decision,
            } => {
                let c = self
                    .candidates
                    .get_mut(candidate_id)
                    .ok_or_else(|| IdentityError::UnknownCandidate(candidate_id.clone()))?;
                c.status = match decision {
                    Decision::Accept => CandidateStatus::Accepted,
                    Decision::Reject => CandidateStatus::Rejected,
                };
                c.decided_at = Some(entry.at);
                c.decided_by = Some(entry.actor.clone());
                if *decision == Decision::Accept {
                    let (a, b) = (c.identity_a.clone(), c.identity_b.clone());
                    let ua = self.membership[&a].clone();
                    let ub = self.membership[&b].clone();
                    if ua != ub {
                        self.union(&ua, &ub, entry)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn union(&mut self, uuid_a: &str, uuid_b: &str, entry: &AuditEntry) -> Result<(), IdentityError> {
        if uuid_a == uuid_b {
            return Ok(());
        }
        let (keep, gone) = if uuid_a < uuid_b { (uuid_a, uuid_b) } else { (uuid_b, uuid_a) };
        let absorbed = self
            .clusters
            .remove(gone)
            .ok_or_else(|| IdentityError::UnknownCluster(gone.to_string()))?;
        let survivor = match self.clusters.get_mut(keep) {
            Some(c) => c,
            None => {
                self.clusters.insert(absorbed.uuid.clone(), absorbed);
                return Err(IdentityError::UnknownCluster(keep.to_string()));
            }
        };
        for m in &absorbed.members {
            self.membership.insert(m.clone(), keep.to_string());
        }
        survivor.members.extend(absorbed.members);
        survivor.created_by = ClusterOrigin::Manual;
        let members = survivor.members.clone();

        for c in self.candidates.values_mut() {
            if c.status == CandidateStatus::Pending
                && members.contains(&c.identity_a)
                && members.contains(&c.identity_b)
            {
                c.status = CandidateStatus::Accepted;
                c.decided_at = Some(entry.at);
                c.decided_by = Some(entry.actor.clone());
            }
        }
        Ok(())
    }

    /// Rebuilds a registry from its audit log alone.
    pub fn replay(entries: &[AuditEntry]) -> Result<Registry, IdentityError> {
        let mut reg = Registry::new();
        for e in entries {
            reg.apply(e)?;
            reg.audit.push(e.clone());
        }
        reg.persisted_audit = reg.audit.len();
        Ok(reg)
    }

    /// Same identities, clusters and candidates (audit bookkeeping ignored).
    pub fn same_state(&self, other: &Registry) -> bool {
        self.identities == other.identities
            && self.clusters == other.clusters
            && self.membership == other.membership
            && self.candidates == other.candidates
    }

    // ---- persistence ----

    pub fn exists(storage_dir: &Path) -> bool {
        storage_dir.join(IDENTITIES_DIR).join("audit.jsonl").is_file()
    }

    /// Loads the snapshot and audit log; a missing registry loads empty.
    pub fn load(storage_dir: &Path) -> Result<Registry, IdentityError> {
        let dir = storage_dir.join(IDENTITIES_DIR);
        let audit: Vec<AuditEntry> = jsonl::read_all(&dir.join("audit.jsonl"))?;
        let lines: Vec<SnapshotLine> = jsonl::read_all(&dir.join("registry.jsonl"))?;
        if lines.is_empty() && !audit.is_empty() {
            return Registry::replay(&audit);
        }
        let mut reg = Registry::new();
        for line in lines {
            match line {
                SnapshotLine::Identity(i) => {
                    reg.identities.insert(i.id.clone(), i);
                }
                SnapshotLine::Cluster(c) => {
                    for m in &c.members {
                        reg.membership.insert(m.clone(), c.uuid.clone());
                    }
                    reg.clusters.insert(c.uuid.clone(), c);
                }
                SnapshotLine::Candidate(c) => {
                    reg.candidates.insert(c.candidate_id.clone(), c);
                }
            }
        }
        reg.persisted_audit = audit.len();
        reg.audit = audit;
        Ok(reg)
    }

    /// Appends new audit entries and rewrites the snapshot if it changed.
    pub fn save(&mut self, storage_dir: &Path) -> Result<bool, IdentityError> {
        let dir = storage_dir.join(IDENTITIES_DIR);
        let new_entries = &self.audit[self.persisted_audit..];
        for e in new_entries {
            jsonl::append(&dir.join("audit.jsonl"), e)?;
        }
        let wrote_audit = !new_entries.is_empty();
        self.persisted_audit = self.audit.len();

        let mut lines = Vec::new();
        lines.extend(self.identities.values().cloned().map(SnapshotLine::Identity));
        lines.extend(self.clusters.values().cloned().map(SnapshotLine::Cluster));
        lines.extend(self.candidates.values().cloned().map(SnapshotLine::Candidate));
        let wrote_snapshot =
            jsonl::replace_if_changed(&dir.join("registry.jsonl"), &jsonl::encode_all(&lines)?)?;
        Ok(wrote_audit || wrote_snapshot)
    }
}

impl AuthorMap for Registry {
    fn author_uuid(&self, source: Source, username: &str) -> Option<String> {
        self.membership.get(&identity_id(source, username)).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: i64) -> Timestamp {
        Timestamp::from_unix(1_550_000_000 + s)
    }

    fn pair_registry() -> (Registry, Identity, Identity) {
        let mut reg = Registry::new();
        let a = reg.register(Source::Chat, "johnsmith", "John Smith", t(0)).unwrap();
        let b = reg
            .register(Source::Tracker, "john-smith", "John Smith", t(1))
            .unwrap();
        (reg, a, b)
    }

    #[test]
    fn registration_is_idempotent() {
        let mut reg = Registry::new();
        let a = reg.register(Source::Chat, "jdoe", "John Doe", t(5)).unwrap();
        assert_eq!(reg.clusters().count(), 1);
        let again = reg.register(Source::Chat, "jdoe", "", t(9)).unwrap();
        assert_eq!(a, again);
        assert_eq!(reg.audit().len(), 1);
        let other = reg.register(Source::Tracker, "jdoe", "", t(9)).unwrap();
        assert_ne!(a.id, other.id);
        assert_eq!(reg.clusters().count(), 2);
    }

    #[test]
    fn display_name_tracks_latest_non_empty_and_first_seen_earliest() {
        let mut reg = Registry::new();
        reg.register(Source::Chat, "jdoe", "J", t(5)).unwrap();
        let i = reg.register(Source::Chat, "jdoe", "John Doe", t(2)).unwrap();
        assert_eq!(i.display_name, "John Doe");
        assert_eq!(i.first_seen, t(2));
    }

    #[test]
    fn empty_username_rejected() {
        assert!(matches!(
            Registry::new().register(Source::Chat, "", "x", t(0)),
            Err(IdentityError::EmptyUsername)
        ));
    }

    #[test]
    fn detects_cross_source_pair() {
        let (reg, a, b) = pair_registry();
        let found = reg.detect_candidates(DEFAULT_THRESHOLD).unwrap();
        assert_eq!(found.len(), 1);
        let c = &found[0];
        assert!((c.username_similarity - 0.9).abs() < 1e-12);
        assert_eq!(c.name_similarity, 1.0);
        let pair = BTreeSet::from([a.id, b.id]);
        assert_eq!(BTreeSet::from([c.identity_a.clone(), c.identity_b.clone()]), pair);
    }

    #[test]
    fn below_threshold_not_proposed() {
        let mut reg = Registry::new();
        reg.register(Source::Chat, "abc", "Abc", t(0)).unwrap();
        reg.register(Source::Tracker, "abd", "Abd", t(0)).unwrap();
        assert!(reg.detect_candidates(0.7).unwrap().is_empty());
    }

    #[test]
    fn same_source_and_nameless_pairs_are_never_proposed() {
        let mut reg = Registry::new();
        reg.register(Source::Chat, "johnsmith", "John Smith", t(0)).unwrap();
        reg.register(Source::Chat, "john-smith", "John Smith", t(0)).unwrap();
        reg.register(Source::Tracker, "johnsmith", "", t(0)).unwrap();
        assert!(reg.detect_candidates(0.7).unwrap().is_empty());
    }

    #[test]
    fn rejected_pair_is_not_reproposed() {
        let (mut reg, _, _) = pair_registry();
        let found = reg.detect_candidates(0.7).unwrap();
        let cid = found[0].candidate_id.clone();
        reg.propose(found, t(10)).unwrap();
        assert!(reg.detect_candidates(0.7).unwrap().is_empty());
        reg.decide_candidate(&cid, Decision::Reject, "alice", t(11)).unwrap();
        assert!(reg.detect_candidates(0.7).unwrap().is_empty());
        assert_eq!(reg.clusters().count(), 2);
    }

    #[test]
    fn accept_merges_and_second_decision_fails() {
        let (mut reg, a, b) = pair_registry();
        let found = reg.detect_candidates(0.7).unwrap();
        let cid = found[0].candidate_id.clone();
        reg.propose(found, t(10)).unwrap();
        let c = reg.decide_candidate(&cid, Decision::Accept, "alice", t(11)).unwrap();
        assert_eq!(c.status, CandidateStatus::Accepted);
        assert_eq!(c.decided_by.as_deref(), Some("alice"));
        assert_eq!(c.decided_at, Some(t(11)));
        assert_eq!(reg.cluster_of(&a.id), reg.cluster_of(&b.id));
        assert!(matches!(
            reg.decide_candidate(&cid, Decision::Accept, "alice", t(12)),
            Err(IdentityError::AlreadyDecided(_))
        ));
        assert!(matches!(
            reg.decide_candidate("nope", Decision::Accept, "alice", t(12)),
            Err(IdentityError::UnknownCandidate(_))
        ));
    }

    #[test]
    fn merge_keeps_smaller_uuid_and_self_merge_is_noop() {
        let (mut reg, a, b) = pair_registry();
        let merged = reg.merge(&a.id, &b.id, "bob", t(3)).unwrap();
        assert_eq!(merged.uuid, a.id.clone().min(b.id.clone()));
        assert_eq!(merged.members, BTreeSet::from([a.id.clone(), b.id.clone()]));
        let audit_len = reg.audit().len();
        let same = reg.merge(&merged.uuid, &merged.uuid, "bob", t(4)).unwrap();
        assert_eq!(same, merged);
        assert_eq!(reg.audit().len(), audit_len);
        assert!(matches!(
            reg.merge("missing", &merged.uuid, "bob", t(4)),
            Err(IdentityError::UnknownCluster(_))
        ));
    }

    #[test]
    fn merge_auto_accepts_internal_pending_candidates() {
        let (mut reg, a, b) = pair_registry();
        let found = reg.detect_candidates(0.7).unwrap();
        let cid = found[0].candidate_id.clone();
        reg.propose(found, t(10)).unwrap();
        reg.merge(&a.id, &b.id, "bob", t(12)).unwrap();
        let c = reg.candidate(&cid).unwrap();
        assert_eq!(c.status, CandidateStatus::Accepted);
        assert_eq!(c.decided_by.as_deref(), Some("bob"));
    }

    #[test]
    fn unmerge_restores_singleton_and_is_audited() {
        let (mut reg, a, b) = pair_registry();
        let merged = reg.merge(&a.id, &b.id, "bob", t(3)).unwrap();
        let owner = merged.uuid.clone();
        let solo = reg.unmerge(&owner, "bob", t(4)).unwrap();
        assert_eq!(solo.uuid, owner);
        assert_eq!(solo.members.len(), 1);
        let other = if owner == a.id { &b.id } else { &a.id };
        assert_eq!(reg.cluster_of(other).unwrap().uuid, *other);
        reg.check_partition().unwrap();
        let trail = reg.audit_trail(&owner);
        assert!(trail.iter().any(|e| matches!(e.action, AuditAction::Merged { .. })));
        assert!(trail.iter().any(|e| matches!(e.action, AuditAction::Unmerged { .. })));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (mut reg, a, b) = pair_registry();
        let found = reg.detect_candidates(0.7).unwrap();
        reg.propose(found, t(10)).unwrap();
        reg.merge(&a.id, &b.id, "bob", t(11)).unwrap();
        assert!(reg.save(dir.path()).unwrap());
        assert!(!reg.save(dir.path()).unwrap());
        let loaded = Registry::load(dir.path()).unwrap();
        assert!(loaded.same_state(&reg));
        assert_eq!(loaded.audit(), reg.audit());
        let replayed = Registry::replay(loaded.audit()).unwrap();
        assert!(replayed.same_state(&reg));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Register(bool, u8, u8),
        Merge(u8, u8),
        Unmerge(u8),
        Detect,
        Decide(u8, bool),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (any::<bool>(), 0u8..6, 0u8..3).prop_map(|(s, u, n)| Op::Register(s, u, n)),
            (0u8..12, 0u8..12).prop_map(|(a, b)| Op::Merge(a, b)),
            (0u8..12).prop_map(Op::Unmerge),
            Just(Op::Detect),
            (0u8..8, any::<bool>()).prop_map(|(c, acc)| Op::Decide(c, acc)),
        ]
    }

    proptest! {
        #[test]
        fn partition_and_replay_hold(ops in prop::collection::vec(op(), 1..40)) {
            const USERS: [&str; 6] = ["johnsmith", "john-smith", "jsmith", "janedoe", "jane.doe", "x"];
            const NAMES: [&str; 3] = ["John Smith", "Jane Doe", ""];
            let mut reg = Registry::new();
            for (step, op) in ops.into_iter().enumerate() {
                let at = t(step as i64);
                let ids: Vec<String> = reg.identities().map(|i| i.id.clone()).collect();
                match op {
                    Op::Register(s, u, n) => {
                        let source = if s { Source::Chat } else { Source::Tracker };
                        reg.register(source, USERS[u as usize], NAMES[n as usize], at).unwrap();
                    }
                    Op::Merge(a, b) if !ids.is_empty() => {
                        let ua = reg.cluster_of(&ids[a as usize % ids.len()]).unwrap().uuid.clone();
                        let ub = reg.cluster_of(&ids[b as usize % ids.len()]).unwrap().uuid.clone();
                        reg.merge(&ua, &ub, "p", at).unwrap();
                    }
                    Op::Unmerge(a) if !ids.is_empty() => {
                        reg.unmerge(&ids[a as usize % ids.len()], "p", at).unwrap();
                    }
                    Op::Detect => {
                        let found = reg.detect_candidates(0.7).unwrap();
                        reg.propose(found, at).unwrap();
                    }
                    Op::Decide(c, accept) => {
                        let pending = reg.candidates(Some(CandidateStatus::Pending));
                        if !pending.is_empty() {
                            let cid = pending[c as usize % pending.len()].candidate_id.clone();
                            let d = if accept { Decision::Accept } else { Decision::Reject };
                            reg.decide_candidate(&cid, d, "p", at).unwrap();
                        }
                    }
                    _ => {}
                }
                prop_assert_eq!(reg.check_partition(), Ok(()));
            }
            let replayed = Registry::replay(reg.audit()).unwrap();
            prop_assert!(replayed.same_state(&reg));
        }
    }
}
