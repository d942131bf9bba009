//! Session service for collecting human triadic judgments.
//!
//! [`Service`] owns the sessions and the judgment store behind one lock, so
//! store appends are serialized and each session transition is atomic. A
//! receipt is only returned after its record is on disk. Restarting on the
//! same directory replays the logs and reconstructs every cursor.
//!
//! The HTTP binding lives in the command-line crate.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{TaskDimension, Triplet, TripletSet};
use crate::judgments::{self, Judgment};
use crate::rng;

pub mod store;

pub use store::{SessionEvent, Snapshot, Store, StoreRecord};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is complete")]
    SessionComplete(String),
    #[error("session {0} was abandoned after being idle")]
    SessionAbandoned(String),
    #[error("unknown triplet set {0:?}")]
    UnknownTripletSet(String),
    #[error("requested {requested} trials but the pool has {available} triplets")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("triplet {got} is not the current trial (expected {expected})")]
    WrongTriplet { expected: String, got: String },
    #[error("{choice:?} is not an option of triplet {triplet_id}")]
    InvalidChoice { triplet_id: String, choice: String },
    #[error("triplet {0} was already answered in this session")]
    DuplicateSubmission(String),
    #[error("invalid export filter: {0}")]
    InvalidFilter(String),
    #[error("store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Idle time after which an active session is abandoned.
    pub idle_timeout_secs: u64,
    /// Judgments between snapshots.
    pub snapshot_every: u64,
    pub default_trials: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            idle_timeout_secs: 30 * 60,
            snapshot_every: 100,
            default_trials: 100,
        }
    }
}

/// Time source, injectable so idle expiry can be tested.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        ManualClock(Mutex::new(start))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Complete,
    Abandoned,
}

/// One scheduled trial; `swapped` flips the stored option order on display.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledTrial {
    pub triplet_id: String,
    pub swapped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub participant_tag: String,
    pub dimension: TaskDimension,
    pub triplet_set: String,
    pub seed: u64,
    pub schedule: Vec<ScheduledTrial>,
    pub cursor: usize,
    pub status: SessionStatus,
    pub created_at: DateTime<Utc>,
    pub last_activity: DateTime<Utc>,
}

impl Session {
    pub fn condition(&self) -> String {
        format!("human-{}", self.dimension)
    }

    pub fn agent_tag(&self) -> String {
        format!("human:{}", self.participant_tag)
    }
}

/// Seeded schedule: `n` triplets sampled without replacement, each with a
/// coin flip for presentation order.
pub fn schedule(pool: &TripletSet, n: usize, seed: u64) -> Result<Vec<ScheduledTrial>> {
    if n > pool.len() {
        return Err(ServiceError::PoolTooSmall {
            requested: n,
            available: pool.len(),
        });
    }
    let mut r = rng::derived(seed, &["session_schedule"]);
    let picks = rand::seq::index::sample(&mut r, pool.len(), n).into_vec();
    Ok(picks
        .into_iter()
        .map(|i| ScheduledTrial {
            triplet_id: pool.triplets()[i].id.clone(),
            swapped: r.random_bool(0.5),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub participant_tag: String,
    pub dimension: TaskDimension,
    pub triplet_set: String,
    pub n_trials: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub participant_tag: String,
    pub dimension: TaskDimension,
    pub triplet_set: String,
    pub n_trials: usize,
    pub cursor: usize,
    pub status: SessionStatus,
    pub created_at: DateTime<Utc>,
}

impl From<&Session> for SessionInfo {
    fn from(s: &Session) -> Self {
        SessionInfo {
            session_id: s.session_id.clone(),
            participant_tag: s.participant_tag.clone(),
            dimension: s.dimension,
            triplet_set: s.triplet_set.clone(),
            n_trials: s.schedule.len(),
            cursor: s.cursor,
            status: s.status,
            created_at: s.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialPayload {
    Trial {
        session_id: String,
        triplet_id: String,
        reference: String,
        /// Options in presentation order.
        options: [String; 2],
        dimension: TaskDimension,
        /// Zero-based index of this trial.
        index: usize,
        total: usize,
    },
    Done { session_id: String, total: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub triplet_id: String,
    pub choice: String,
    #[serde(default)]
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub seq: u64,
    pub session_id: String,
    pub triplet_id: String,
    pub cursor: usize,
    pub total: usize,
    pub status: SessionStatus,
}

/// Export selection; every present field must match.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportFilter {
    pub condition: Option<String>,
    pub dimension: Option<TaskDimension>,
    pub agent_tag: Option<String>,
    pub session_id: Option<String>,
}

impl ExportFilter {
    fn matches(&self, r: &StoreRecord) -> bool {
        self.condition.as_ref().is_none_or(|c| *c == r.condition)
            && self.dimension.is_none_or(|d| d == r.judgment.dimension)
            && self.agent_tag.as_ref().is_none_or(|t| *t == r.judgment.agent_tag)
            && self
                .session_id
                .as_ref()
                .is_none_or(|s| r.judgment.session_id.as_ref() == Some(s))
    }
}

impl FromStr for ExportFilter {
    type Err = ServiceError;

    /// Comma-separated `key=value` pairs, e.g. `dimension=size,condition=human-size`.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = ExportFilter::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| ServiceError::InvalidFilter(format!("{part:?} is not key=value")))?;
            match k.trim() {
                "condition" => f.condition = Some(v.trim().into()),
                "dimension" => {
                    f.dimension = Some(v.trim().parse().map_err(|e: crate::concepts::ParseDimensionError| ServiceError::InvalidFilter(e.to_string()))?)
                }
                "agent_tag" => f.agent_tag = Some(v.trim().into()),
                "session_id" | "session" => f.session_id = Some(v.trim().into()),
                other => return Err(ServiceError::InvalidFilter(format!("unknown key {other:?}"))),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for ExportFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(c) = &self.condition {
            parts.push(format!("condition={c}"));
        }
        if let Some(d) = self.dimension {
            parts.push(format!("dimension={d}"));
        }
        if let Some(t) = &self.agent_tag {
            parts.push(format!("agent_tag={t}"));
        }
        if let Some(s) = &self.session_id {
            parts.push(format!("session_id={s}"));
        }
        f.write_str(&parts.join(","))
    }
}

struct State {
    store: Store,
    sessions: BTreeMap<String, Session>,
    records: Vec<StoreRecord>,
    next_seq: u64,
    since_snapshot: u64,
}

pub struct Service {
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    pools: HashMap<String, TripletSet>,
    state: Mutex<State>,
}

impl fmt::Debug for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Service")
            .field("config", &self.config)
            .field("pools", &self.pools.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

fn triplet_by_id<'a>(pools: &'a HashMap<String, TripletSet>, s: &Session, id: &str) -> Result<&'a Triplet> {
    pools
        .get(&s.triplet_set)
        .and_then(|ts| ts.get(id))
        .ok_or_else(|| ServiceError::Store(format!("session {} refers to unknown triplet {id}", s.session_id)))
}

impl Service {
    /// Open the store in `dir`, replay it, and serve the given triplet sets
    /// (keyed by [`TripletSet::source`]).
    pub fn open(
        dir: impl Into<PathBuf>,
        pools: Vec<TripletSet>,
        config: ServiceConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        let (store, recovered) = Store::open(dir)?;
        let pools: HashMap<String, TripletSet> = pools.into_iter().map(|ts| (ts.source.clone(), ts)).collect();

        let snapshot = recovered.snapshot.unwrap_or_default();
        let mut sessions: BTreeMap<String, Session> = snapshot
            .sessions
            .into_iter()
            .map(|s| (s.session_id.clone(), s))
            .collect();
        for event in recovered.events.into_iter().skip(snapshot.session_events) {
            match event {
                SessionEvent::Created { session } => {
                    sessions.insert(session.session_id.clone(), session);
                }
                SessionEvent::Abandoned { session_id, at } => {
                    if let Some(s) = sessions.get_mut(&session_id) {
                        s.status = SessionStatus::Abandoned;
                        s.last_activity = at;
                    }
                }
            }
        }
        for r in recovered.records.iter().filter(|r| r.seq > snapshot.last_seq) {
            let sid = r.judgment.session_id.as_deref().unwrap_or_default();
            let s = sessions
                .get_mut(sid)
                .ok_or_else(|| ServiceError::Store(format!("record {} refers to unknown session {sid:?}", r.seq)))?;
            let expected = s.schedule.get(s.cursor).map(|t| t.triplet_id.as_str());
            if expected != Some(r.judgment.triplet_id.as_str()) {
                return Err(ServiceError::Store(format!(
                    "record {} answers {} but session {sid} expects {:?}",
                    r.seq, r.judgment.triplet_id, expected
                )));
            }
            s.cursor += 1;
            s.last_activity = r.received_at;
            if s.cursor == s.schedule.len() {
                s.status = SessionStatus::Complete;
            }
        }
        for s in sessions.values() {
            if !pools.contains_key(&s.triplet_set) {
                tracing::warn!(session = %s.session_id, set = %s.triplet_set, "recovered session uses an unloaded triplet set");
            }
        }
        let next_seq = recovered.records.last().map_or(snapshot.last_seq, |r| r.seq.max(snapshot.last_seq)) + 1;
        tracing::info!(sessions = sessions.len(), records = recovered.records.len(), "store recovered");

        Ok(Service {
            config,
            clock,
            pools,
            state: Mutex::new(State {
                store,
                sessions,
                records: recovered.records,
                next_seq,
                since_snapshot: 0,
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn triplet_sets(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.pools.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Mark active sessions idle past the timeout as abandoned.
    fn expire_idle(&self, state: &mut State, now: DateTime<Utc>) -> Result<()> {
        let timeout = Duration::seconds(self.config.idle_timeout_secs as i64);
        let idle: Vec<String> = state
            .sessions
            .values()
            .filter(|s| s.status == SessionStatus::Active && now - s.last_activity > timeout)
            .map(|s| s.session_id.clone())
            .collect();
        for id in idle {
            state.store.append_event(&SessionEvent::Abandoned {
                session_id: id.clone(),
                at: now,
            })?;
            let s = state.sessions.get_mut(&id).expect("listed above");
            s.status = SessionStatus::Abandoned;
            tracing::info!(session = %id, "session abandoned after idle timeout");
        }
        Ok(())
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<SessionInfo> {
        let pool = self
            .pools
            .get(&req.triplet_set)
            .ok_or_else(|| ServiceError::UnknownTripletSet(req.triplet_set.clone()))?;
        let n = req.n_trials.unwrap_or(self.config.default_trials);
        let seed = req.seed.unwrap_or_else(rand::random);
        let schedule = schedule(pool, n, seed)?;
        let now = self.clock.now();
        let session = Session {
            session_id: uuid::Uuid::new_v4().simple().to_string(),
            participant_tag: req.participant_tag.clone(),
            dimension: req.dimension,
            triplet_set: req.triplet_set.clone(),
            seed,
            status: if schedule.is_empty() {
                SessionStatus::Complete
            } else {
                SessionStatus::Active
            },
            schedule,
            cursor: 0,
            created_at: now,
            last_activity: now,
        };
        let mut state = self.lock();
        self.expire_idle(&mut state, now)?;
        state.store.append_event(&SessionEvent::Created {
            session: session.clone(),
        })?;
        let info = SessionInfo::from(&session);
        state.sessions.insert(session.session_id.clone(), session);
        Ok(info)
    }

    pub fn session(&self, id: &str) -> Result<SessionInfo> {
        let state = self.lock();
        state
            .sessions
            .get(id)
            .map(SessionInfo::from)
            .ok_or_else(|| ServiceError::UnknownSession(id.into()))
    }

    pub fn sessions(&self) -> Vec<SessionInfo> {
        self.lock().sessions.values().map(SessionInfo::from).collect()
    }

    /// The current trial, without advancing; `Done` once every trial is
    /// answered.
    pub fn next_trial(&self, id: &str) -> Result<TrialPayload> {
        let now = self.clock.now();
        let mut state = self.lock();
        self.expire_idle(&mut state, now)?;
        let s = state.sessions.get(id).ok_or_else(|| ServiceError::UnknownSession(id.into()))?;
        match s.status {
            SessionStatus::Abandoned => return Err(ServiceError::SessionAbandoned(id.into())),
            SessionStatus::Complete => {
                return Ok(TrialPayload::Done {
                    session_id: id.into(),
                    total: s.schedule.len(),
                })
            }
            SessionStatus::Active => {}
        }
        let trial = &s.schedule[s.cursor];
        let t = triplet_by_id(&self.pools, s, &trial.triplet_id)?;
        let options = if trial.swapped {
            [t.opt2.clone(), t.opt1.clone()]
        } else {
            [t.opt1.clone(), t.opt2.clone()]
        };
        Ok(TrialPayload::Trial {
            session_id: id.into(),
            triplet_id: t.id.clone(),
            reference: t.reference.clone(),
            options,
            dimension: s.dimension,
            index: s.cursor,
            total: s.schedule.len(),
        })
    }

    /// Record a choice for the current trial. The record is on disk before
    /// this returns.
    pub fn submit_judgment(&self, id: &str, sub: &Submission) -> Result<Receipt> {
        let now = self.clock.now();
        let mut state = self.lock();
        self.expire_idle(&mut state, now)?;
        let s = state.sessions.get(id).ok_or_else(|| ServiceError::UnknownSession(id.into()))?;
        if s.schedule[..s.cursor].iter().any(|t| t.triplet_id == sub.triplet_id) {
            return Err(ServiceError::DuplicateSubmission(sub.triplet_id.clone()));
        }
        match s.status {
            SessionStatus::Complete => return Err(ServiceError::SessionComplete(id.into())),
            SessionStatus::Abandoned => return Err(ServiceError::SessionAbandoned(id.into())),
            SessionStatus::Active => {}
        }
        let expected = &s.schedule[s.cursor].triplet_id;
        if *expected != sub.triplet_id {
            return Err(ServiceError::WrongTriplet {
                expected: expected.clone(),
                got: sub.triplet_id.clone(),
            });
        }
        let t = triplet_by_id(&self.pools, s, expected)?;
        if !t.is_option(&sub.choice) {
            return Err(ServiceError::InvalidChoice {
                triplet_id: t.id.clone(),
                choice: sub.choice.clone(),
            });
        }

        let record = StoreRecord {
            seq: state.next_seq,
            received_at: now,
            condition: s.condition(),
            judgment: Judgment {
                triplet_id: t.id.clone(),
                dimension: s.dimension,
                choice: sub.choice.clone(),
                agent_tag: s.agent_tag(),
                session_id: Some(id.into()),
                ts: now,
                latency_ms: sub.latency_ms,
            },
        };
        state.store.append_record(&record)?;
        state.next_seq += 1;
        state.records.push(record.clone());

        let s = state.sessions.get_mut(id).expect("checked above");
        s.cursor += 1;
        s.last_activity = now;
        if s.cursor == s.schedule.len() {
            s.status = SessionStatus::Complete;
        }
        let receipt = Receipt {
            seq: record.seq,
            session_id: id.into(),
            triplet_id: record.judgment.triplet_id,
            cursor: s.cursor,
            total: s.schedule.len(),
            status: s.status,
        };

        state.since_snapshot += 1;
        if self.config.snapshot_every > 0 && state.since_snapshot >= self.config.snapshot_every {
            Self::snapshot_locked(&mut state)?;
        }
        Ok(receipt)
    }

    fn snapshot_locked(state: &mut State) -> Result<()> {
        let snap = Snapshot {
            session_events: state.store.session_lines(),
            last_seq: state.next_seq - 1,
            sessions: state.sessions.values().cloned().collect(),
        };
        state.store.write_snapshot(&snap)?;
        state.since_snapshot = 0;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<()> {
        Self::snapshot_locked(&mut self.lock())
    }

    /// Matching records in receipt order.
    pub fn records(&self, filter: &ExportFilter) -> Vec<StoreRecord> {
        self.lock().records.iter().filter(|r| filter.matches(r)).cloned().collect()
    }

    /// Matching judgments as a judgment file, ordered by sequence number.
    pub fn export(&self, filter: &ExportFilter) -> String {
        let js: Vec<Judgment> = self.records(filter).into_iter().map(|r| r.judgment).collect();
        judgments::to_jsonl(&js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::{generate_triplets, ConceptSet};
    use crate::judgments::JudgmentSet;

    fn pool() -> TripletSet {
        let mut ts = generate_triplets(&ConceptSet::standin(), 1.5, 2, 150).unwrap();
        ts.source = "pool".into();
        ts
    }

    fn start() -> DateTime<Utc> {
        "2024-01-01T00:00:00Z".parse().unwrap()
    }

    fn open(dir: &std::path::Path, clock: Arc<dyn Clock>) -> Service {
        Service::open(dir, vec![pool()], ServiceConfig::default(), clock).unwrap()
    }

    fn req(n: usize, seed: u64) -> CreateSession {
        CreateSession {
            participant_tag: "p1".into(),
            dimension: TaskDimension::Size,
            triplet_set: "pool".into(),
            n_trials: Some(n),
            seed: Some(seed),
        }
    }

    fn answer(svc: &Service, id: &str) -> Receipt {
        let TrialPayload::Trial { triplet_id, options, .. } = svc.next_trial(id).unwrap() else {
            panic!("done early")
        };
        svc.submit_judgment(
            id,
            &Submission {
                triplet_id,
                choice: options[0].clone(),
                latency_ms: Some(900),
            },
        )
        .unwrap()
    }

    #[test]
    fn schedules() {
        let p = pool();
        let full = schedule(&p, p.len(), 9).unwrap();
        let mut ids: Vec<_> = full.iter().map(|t| t.triplet_id.clone()).collect();
        ids.sort();
        let mut all: Vec<_> = p.iter().map(|t| t.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
        assert!(matches!(
            schedule(&p, p.len() + 1, 9),
            Err(ServiceError::PoolTooSmall { requested: 151, available: 150 })
        ));
        assert_eq!(schedule(&p, 40, 3).unwrap(), schedule(&p, 40, 3).unwrap());
        let flips = full.iter().filter(|t| t.swapped).count();
        assert!((45..=105).contains(&flips), "{flips}");
    }

    #[test]
    fn create_errors() {
        let dir = tempfile::tempdir().unwrap();
        let svc = open(dir.path(), Arc::new(ManualClock::new(start())));
        let mut r = req(5, 1);
        r.triplet_set = "missing".into();
        assert!(matches!(svc.create_session(&r), Err(ServiceError::UnknownTripletSet(_))));
        assert!(matches!(svc.create_session(&req(151, 1)), Err(ServiceError::PoolTooSmall { .. })));
    }

    #[test]
    fn trial_flow_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let svc = open(dir.path(), Arc::new(ManualClock::new(start())));
        let s = svc.create_session(&req(3, 7)).unwrap();
        let id = &s.session_id;
        assert_eq!(svc.next_trial(id).unwrap(), svc.next_trial(id).unwrap());

        let TrialPayload::Trial { triplet_id, reference, options, index, total, .. } = svc.next_trial(id).unwrap() else {
            panic!()
        };
        assert_eq!((index, total), (0, 3));
        let sub = |tid: &str, choice: &str| Submission {
            triplet_id: tid.into(),
            choice: choice.into(),
            latency_ms: None,
        };
        assert!(matches!(
            svc.submit_judgment(id, &sub(&triplet_id, &reference)),
            Err(ServiceError::InvalidChoice { .. })
        ));
        assert!(matches!(
            svc.submit_judgment(id, &sub("nope", &options[0])),
            Err(ServiceError::WrongTriplet { .. })
        ));
        let r1 = svc.submit_judgment(id, &sub(&triplet_id, &options[1])).unwrap();
        assert_eq!((r1.seq, r1.cursor), (1, 1));
        let before = svc.export(&ExportFilter::default());
        assert!(matches!(
            svc.submit_judgment(id, &sub(&triplet_id, &options[1])),
            Err(ServiceError::DuplicateSubmission(_))
        ));
        assert_eq!(svc.export(&ExportFilter::default()), before);

        assert_eq!(answer(&svc, id).seq, 2);
        let last = answer(&svc, id);
        assert_eq!((last.seq, last.status), (3, SessionStatus::Complete));
        assert_eq!(svc.next_trial(id).unwrap(), TrialPayload::Done { session_id: id.clone(), total: 3 });
        assert!(matches!(
            svc.submit_judgment(id, &sub("whatever", "x")),
            Err(ServiceError::SessionComplete(_))
        ));
        assert!(matches!(svc.next_trial("ghost"), Err(ServiceError::UnknownSession(_))));
    }

    #[test]
    fn export_filters_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let svc = open(dir.path(), Arc::new(ManualClock::new(start())));
        let a = svc.create_session(&req(4, 1)).unwrap().session_id;
        let mut kind = req(4, 2);
        kind.dimension = TaskDimension::Kind;
        kind.participant_tag = "p2".into();
        let b = svc.create_session(&kind).unwrap().session_id;
        for _ in 0..4 {
            answer(&svc, &a);
            answer(&svc, &b);
        }
        let all = svc.records(&ExportFilter::default());
        assert!(all.windows(2).all(|w| w[0].seq < w[1].seq));
        assert_eq!(all.len(), 8);

        let size: ExportFilter = "dimension=size".parse().unwrap();
        let text = svc.export(&size);
        let parsed = JudgmentSet::parse("x", &text).unwrap();
        assert_eq!(parsed.len(), 4);
        assert!(parsed.judgments.iter().all(|j| j.session_id.as_deref() == Some(a.as_str())));
        assert_eq!(parsed.to_jsonl(), text);

        let tag: ExportFilter = "agent_tag=human:p2,condition=human-kind".parse().unwrap();
        assert_eq!(svc.records(&tag).len(), 4);
        assert_eq!(svc.export(&"agent_tag=nobody".parse().unwrap()), "");
        assert!("colour=red".parse::<ExportFilter>().is_err());
        assert_eq!(tag.to_string().parse::<ExportFilter>().unwrap(), tag);
    }

    #[test]
    fn restart_reconstructs_cursors() {
        let dir = tempfile::tempdir().unwrap();
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(start()));
        let cfg = ServiceConfig {
            snapshot_every: 3,
            ..ServiceConfig::default()
        };
        let (ids, exported) = {
            let svc = Service::open(dir.path(), vec![pool()], cfg.clone(), clock.clone()).unwrap();
            let ids: Vec<String> = (0..3).map(|i| svc.create_session(&req(10, i)).unwrap().session_id).collect();
            for (k, id) in ids.iter().enumerate() {
                for _ in 0..(k * 3 + 2) {
                    answer(&svc, id);
                }
            }
            (ids, svc.export(&ExportFilter::default()))
        };
        // A torn write that was never acknowledged.
        let log = dir.path().join(store::JUDGMENTS_FILE);
        let mut text = std::fs::read_to_string(&log).unwrap();
        text.push_str("{\"seq\":99,\"rece");
        std::fs::write(&log, text).unwrap();

        let svc = Service::open(dir.path(), vec![pool()], cfg, clock).unwrap();
        for (k, id) in ids.iter().enumerate() {
            assert_eq!(svc.session(id).unwrap().cursor, k * 3 + 2);
        }
        assert_eq!(svc.export(&ExportFilter::default()), exported);
        assert_eq!(answer(&svc, &ids[0]).seq, 2 + 5 + 8 + 1);
    }

    #[test]
    fn idle_sessions_are_abandoned() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(start()));
        let svc = open(dir.path(), clock.clone());
        let idle = svc.create_session(&req(5, 1)).unwrap().session_id;
        let busy = svc.create_session(&req(5, 2)).unwrap().session_id;
        clock.advance(Duration::minutes(20));
        answer(&svc, &busy);
        clock.advance(Duration::minutes(11));
        assert!(matches!(svc.next_trial(&idle), Err(ServiceError::SessionAbandoned(_))));
        assert_eq!(svc.session(&busy).unwrap().status, SessionStatus::Active);
        drop(svc);
        let svc = open(dir.path(), clock);
        assert_eq!(svc.session(&idle).unwrap().status, SessionStatus::Abandoned);
    }
}
