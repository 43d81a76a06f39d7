//! Synchronous round protocol over a shared directory.
//!
//! Two stores live under `<root>/runs/<run_id>/`:
//!
//! * the blob store holds serialized parameter vectors
//!   (`round_<t>/client_<k>.params`, `round_<t>/global.params`);
//! * the status store holds small JSON records
//!   (`round_<t>/client_<k>.status.json`, `round_<t>/aggregation.json`,
//!   `server.phase.json`).
//!
//! Every file is published by writing a temporary sibling and renaming it
//! into place, so readers observe either nothing or a complete file. Each key
//! has exactly one writer: the client owns its params and status record, the
//! server owns the global params, the aggregation report and the phase record.
//!
//! A round `t >= 1` starts from the global model of round `t - 1`; round 0's
//! global model is the initial model.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AggregationReport, ClientUpdate};
use crate::param::{deserialize, digest_bytes, serialize, ParamError, ParamVector};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_millis(200);

#[derive(Debug, Error)]
pub enum CoordinationError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed record {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("corrupt parameter blob {path}: {source}")]
    Decode { path: PathBuf, source: ParamError },
    #[error("integrity error on {path}: expected digest {expected}, found {found}")]
    Integrity {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("blob {0} already exists with different content")]
    ConflictingBlob(PathBuf),
    #[error("missing blob {0}")]
    MissingBlob(PathBuf),
    #[error(
        "illegal status transition for client {client_id} in round {round}: {from:?} -> {to:?}"
    )]
    IllegalTransition {
        client_id: u32,
        round: u32,
        from: ClientState,
        to: ClientState,
    },
    #[error("illegal phase transition: round {from_round} {from:?} -> round {to_round} {to:?}")]
    IllegalPhase {
        from_round: u32,
        from: Phase,
        to_round: u32,
        to: Phase,
    },
    #[error("barrier timed out in round {round}; missing clients {missing:?}")]
    BarrierTimeout { round: u32, missing: Vec<u32> },
    #[error("round {round} failed: client {client_id} reported failure")]
    RoundFailed { round: u32, client_id: u32 },
    #[error("timed out waiting for the global model of round {round}")]
    GlobalTimeout { round: u32 },
    #[error("run ended before the global model of round {round} was published")]
    RunEnded { round: u32 },
    #[error("global model for round {round} is already published")]
    AlreadyPublished { round: u32 },
    #[error("protocol order violation: {0}")]
    ProtocolOrder(String),
}

pub type Result<T, E = CoordinationError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CoordinationError + '_ {
    move |source| CoordinationError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Path conventions for one store root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn round_dir(&self, run_id: &str, round: u32) -> PathBuf {
        self.run_dir(run_id).join(format!("round_{round}"))
    }

    pub fn params(&self, run_id: &str, round: u32, owner: Owner) -> PathBuf {
        let name = match owner {
            Owner::Global => "global.params".to_owned(),
            Owner::Client(k) => format!("client_{k}.params"),
        };
        self.round_dir(run_id, round).join(name)
    }

    pub fn client_status(&self, run_id: &str, round: u32, client_id: u32) -> PathBuf {
        self.round_dir(run_id, round)
            .join(format!("client_{client_id}.status.json"))
    }

    pub fn aggregation(&self, run_id: &str, round: u32) -> PathBuf {
        self.round_dir(run_id, round).join("aggregation.json")
    }

    pub fn server_phase(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("server.phase.json")
    }

    pub fn client_losses(&self, run_id: &str, round: u32, client_id: u32) -> PathBuf {
        self.round_dir(run_id, round)
            .join(format!("client_{client_id}.losses.csv"))
    }

    pub fn client_val_losses(&self, run_id: &str, round: u32, client_id: u32) -> PathBuf {
        self.round_dir(run_id, round)
            .join(format!("client_{client_id}.val_losses.csv"))
    }
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `path` via a uniquely named temporary sibling and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .expect("store paths always have a parent directory");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let file_name = path.file_name().unwrap_or_default().to_string_lossy();
    let tmp = dir.join(format!(
        ".{file_name}.{}.{}.tmp",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    read_optional(path)?
        .map(|bytes| {
            serde_json::from_slice(&bytes).map_err(|source| CoordinationError::Json {
                path: path.to_path_buf(),
                source,
            })
        })
        .transpose()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("records serialize");
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Global,
    Client(u32),
}

/// Parameter blobs on the local filesystem.
#[derive(Debug, Clone)]
pub struct BlobStore {
    layout: RunLayout,
}

impl BlobStore {
    pub fn new(layout: RunLayout) -> Self {
        Self { layout }
    }

    pub fn layout(&self) -> &RunLayout {
        &self.layout
    }

    /// Publishes `pv` and returns its SHA-256 digest. Re-publishing identical
    /// content is a no-op; different content under the same key is an error.
    pub fn publish_params(
        &self,
        run_id: &str,
        round: u32,
        owner: Owner,
        pv: &ParamVector,
    ) -> Result<String> {
        let path = self.layout.params(run_id, round, owner);
        let bytes = serialize(pv);
        let digest = digest_bytes(&bytes);
        if let Some(existing) = read_optional(&path)? {
            return if digest_bytes(&existing) == digest {
                Ok(digest)
            } else {
                Err(CoordinationError::ConflictingBlob(path))
            };
        }
        atomic_write(&path, &bytes)?;
        let written =
            read_optional(&path)?.ok_or_else(|| CoordinationError::MissingBlob(path.clone()))?;
        let found = digest_bytes(&written);
        if found != digest {
            return Err(CoordinationError::Integrity {
                path,
                expected: digest,
                found,
            });
        }
        Ok(digest)
    }

    pub fn exists(&self, run_id: &str, round: u32, owner: Owner) -> bool {
        self.layout.params(run_id, round, owner).is_file()
    }

    /// Reads a blob and returns it with the digest of its bytes.
    pub fn fetch_params(
        &self,
        run_id: &str,
        round: u32,
        owner: Owner,
    ) -> Result<Option<(ParamVector, String)>> {
        let path = self.layout.params(run_id, round, owner);
        let Some(bytes) = read_optional(&path)? else {
            return Ok(None);
        };
        let digest = digest_bytes(&bytes);
        let pv = deserialize(&bytes).map_err(|source| CoordinationError::Decode {
            path: path.clone(),
            source,
        })?;
        Ok(Some((pv, digest)))
    }

    /// Reads a blob and checks its digest before decoding.
    pub fn fetch_verified(
        &self,
        run_id: &str,
        round: u32,
        owner: Owner,
        expected: &str,
    ) -> Result<ParamVector> {
        let path = self.layout.params(run_id, round, owner);
        let bytes =
            read_optional(&path)?.ok_or_else(|| CoordinationError::MissingBlob(path.clone()))?;
        let found = digest_bytes(&bytes);
        if found != expected {
            return Err(CoordinationError::Integrity {
                path,
                expected: expected.to_owned(),
                found,
            });
        }
        deserialize(&bytes).map_err(|source| CoordinationError::Decode { path, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientState {
    Assigned,
    Training,
    Uploaded,
    Failed,
}

impl ClientState {
    fn rank(self) -> u8 {
        match self {
            ClientState::Assigned => 0,
            ClientState::Training => 1,
            ClientState::Uploaded | ClientState::Failed => 2,
        }
    }

    /// Forward-only; repeating the current state is allowed.
    pub fn can_become(self, next: ClientState) -> bool {
        match self {
            ClientState::Uploaded | ClientState::Failed => next == self,
            _ => next == self || next.rank() > self.rank(),
        }
    }
}

/// One client's progress in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStatus {
    pub run_id: String,
    pub round: u32,
    pub client_id: u32,
    pub state: ClientState,
    pub data_length: u64,
    pub validation_loss: f64,
    pub params_digest: String,
    pub timestamp: DateTime<Utc>,
}

impl RoundStatus {
    pub fn new(run_id: &str, round: u32, client_id: u32, state: ClientState) -> Self {
        Self {
            run_id: run_id.to_owned(),
            round,
            client_id,
            state,
            data_length: 0,
            validation_loss: 0.0,
            params_digest: String::new(),
            timestamp: Utc::now(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Distributing,
    AwaitingClients,
    Aggregating,
    Published,
    Finished,
}

/// Server progress. `global_digests[t]` is the digest of round `t`'s global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerPhase {
    pub run_id: String,
    pub round: u32,
    pub phase: Phase,
    #[serde(default)]
    pub global_digests: Vec<String>,
}

/// JSON status records on the local filesystem.
#[derive(Debug, Clone)]
pub struct StatusStore {
    layout: RunLayout,
}

impl StatusStore {
    pub fn new(layout: RunLayout) -> Self {
        Self { layout }
    }

    pub fn layout(&self) -> &RunLayout {
        &self.layout
    }

    pub fn get_status(
        &self,
        run_id: &str,
        round: u32,
        client_id: u32,
    ) -> Result<Option<RoundStatus>> {
        read_json(&self.layout.client_status(run_id, round, client_id))
    }

    /// Stores a status record, rejecting backward transitions. Repeating
    /// `uploaded` is only accepted with the same digest.
    pub fn put_status(&self, status: &RoundStatus) -> Result<()> {
        let path = self
            .layout
            .client_status(&status.run_id, status.round, status.client_id);
        if let Some(prev) = read_json::<RoundStatus>(&path)? {
            let conflicting_upload = prev.state == ClientState::Uploaded
                && status.state == ClientState::Uploaded
                && prev.params_digest != status.params_digest;
            if !prev.state.can_become(status.state) || conflicting_upload {
                return Err(CoordinationError::IllegalTransition {
                    client_id: status.client_id,
                    round: status.round,
                    from: prev.state,
                    to: status.state,
                });
            }
        }
        write_json(&path, status)
    }

    pub fn get_phase(&self, run_id: &str) -> Result<Option<ServerPhase>> {
        read_json(&self.layout.server_phase(run_id))
    }

    /// Stores the server phase; `(round, phase)` must not move backwards.
    pub fn put_phase(&self, phase: &ServerPhase) -> Result<()> {
        if let Some(prev) = self.get_phase(&phase.run_id)? {
            if (phase.round, phase.phase) < (prev.round, prev.phase)
                || phase.global_digests.len() < prev.global_digests.len()
            {
                return Err(CoordinationError::IllegalPhase {
                    from_round: prev.round,
                    from: prev.phase,
                    to_round: phase.round,
                    to: phase.phase,
                });
            }
        }
        write_json(&self.layout.server_phase(&phase.run_id), phase)
    }

    pub fn get_report(&self, run_id: &str, round: u32) -> Result<Option<AggregationReport>> {
        read_json(&self.layout.aggregation(run_id, round))
    }

    pub fn put_report(&self, run_id: &str, report: &AggregationReport) -> Result<()> {
        write_json(&self.layout.aggregation(run_id, report.round), report)
    }
}

/// Moves the server phase forward to `(round, phase)` unless it is already
/// there or beyond. Returns the resulting record.
pub fn advance_phase(
    status: &StatusStore,
    run_id: &str,
    round: u32,
    phase: Phase,
) -> Result<ServerPhase> {
    let current = status.get_phase(run_id)?.ok_or_else(|| {
        CoordinationError::ProtocolOrder(format!("run {run_id} has no initial global model"))
    })?;
    if (current.round, current.phase) >= (round, phase) {
        return Ok(current);
    }
    let next = ServerPhase {
        round,
        phase,
        ..current
    };
    status.put_phase(&next)?;
    Ok(next)
}

/// Publishes the round-0 global model. Idempotent for identical content.
pub fn publish_initial(
    status: &StatusStore,
    blobs: &BlobStore,
    run_id: &str,
    pv: &ParamVector,
) -> Result<String> {
    let digest = blobs.publish_params(run_id, 0, Owner::Global, pv)?;
    match status.get_phase(run_id)? {
        Some(phase) => {
            if phase.global_digests.first() != Some(&digest) {
                return Err(CoordinationError::Integrity {
                    path: status.layout.params(run_id, 0, Owner::Global),
                    expected: phase.global_digests.first().cloned().unwrap_or_default(),
                    found: digest,
                });
            }
        }
        None => status.put_phase(&ServerPhase {
            run_id: run_id.to_owned(),
            round: 0,
            phase: Phase::Published,
            global_digests: vec![digest.clone()],
        })?,
    }
    Ok(digest)
}

/// Blocks until every expected client has uploaded for `round`, then
/// assembles their updates with digests checked against the status records.
pub fn barrier_await_clients(
    status: &StatusStore,
    blobs: &BlobStore,
    run_id: &str,
    round: u32,
    expected: &BTreeSet<u32>,
    poll_interval: Duration,
    timeout: Duration,
) -> Result<Vec<ClientUpdate>> {
    match status.get_phase(run_id)? {
        Some(p) if p.round == round && p.phase == Phase::AwaitingClients => {}
        other => {
            return Err(CoordinationError::ProtocolOrder(format!(
                "barrier for round {round} requires phase awaiting_clients, found {:?}",
                other.map(|p| (p.round, p.phase))
            )))
        }
    }
    let start = Instant::now();
    loop {
        let mut uploaded = Vec::with_capacity(expected.len());
        let mut missing = Vec::new();
        for &client_id in expected {
            match status.get_status(run_id, round, client_id)? {
                Some(s) if s.state == ClientState::Failed => {
                    return Err(CoordinationError::RoundFailed { round, client_id })
                }
                Some(s) if s.state == ClientState::Uploaded => uploaded.push(s),
                _ => missing.push(client_id),
            }
        }
        if missing.is_empty() {
            return uploaded
                .into_iter()
                .map(|s| {
                    let params = blobs.fetch_verified(
                        run_id,
                        round,
                        Owner::Client(s.client_id),
                        &s.params_digest,
                    )?;
                    ClientUpdate::new(s.client_id, params, s.data_length, s.validation_loss)
                        .map_err(|e| {
                            CoordinationError::ProtocolOrder(format!(
                                "client {} uploaded an invalid update: {e}",
                                s.client_id
                            ))
                        })
                })
                .collect();
        }
        if start.elapsed() >= timeout {
            return Err(CoordinationError::BarrierTimeout { round, missing });
        }
        thread::sleep(poll_interval);
    }
}

/// Publishes the aggregated global model for `round`, persists the report,
/// and marks the round published.
pub fn publish_global_and_advance(
    status: &StatusStore,
    blobs: &BlobStore,
    run_id: &str,
    round: u32,
    pv: &ParamVector,
    report: &AggregationReport,
) -> Result<String> {
    let phase = status
        .get_phase(run_id)?
        .ok_or_else(|| CoordinationError::ProtocolOrder("no server phase record".into()))?;
    if phase.global_digests.len() > round as usize {
        return Err(CoordinationError::AlreadyPublished { round });
    }
    if phase.round != round || phase.phase != Phase::Aggregating {
        return Err(CoordinationError::ProtocolOrder(format!(
            "cannot publish round {round} while server is in round {} {:?}",
            phase.round, phase.phase
        )));
    }
    if report.round != round {
        return Err(CoordinationError::ProtocolOrder(format!(
            "report is for round {}, publishing round {round}",
            report.round
        )));
    }
    // A crash between the blob write and the phase update leaves the blob in
    // place; identical content is accepted on retry.
    let digest = blobs.publish_params(run_id, round, Owner::Global, pv)?;
    if digest != report.params_digest {
        return Err(CoordinationError::Integrity {
            path: blobs.layout().params(run_id, round, Owner::Global),
            expected: report.params_digest.clone(),
            found: digest,
        });
    }
    status.put_report(run_id, report)?;
    let mut digests = phase.global_digests.clone();
    digests.push(digest.clone());
    status.put_phase(&ServerPhase {
        run_id: run_id.to_owned(),
        round,
        phase: Phase::Published,
        global_digests: digests,
    })?;
    Ok(digest)
}

/// Blocks until the global model for `round` is published and returns it.
/// Fails with `RunEnded` if the server finishes the run without it.
pub fn client_await_global(
    status: &StatusStore,
    blobs: &BlobStore,
    run_id: &str,
    round: u32,
    poll_interval: Duration,
    timeout: Duration,
) -> Result<ParamVector> {
    let start = Instant::now();
    loop {
        if let Some(phase) = status.get_phase(run_id)? {
            if let Some(expected) = phase.global_digests.get(round as usize) {
                return blobs.fetch_verified(run_id, round, Owner::Global, expected);
            }
            if phase.phase == Phase::Finished {
                return Err(CoordinationError::RunEnded { round });
            }
        }
        if start.elapsed() >= timeout {
            return Err(CoordinationError::GlobalTimeout { round });
        }
        thread::sleep(poll_interval);
    }
}

/// Writes `contents` to `path` atomically; used for loss traces.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    atomic_write(path, contents.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{aggregate, AggregatorConfig};

    fn stores(dir: &Path) -> (StatusStore, BlobStore) {
        let layout = RunLayout::new(dir);
        (StatusStore::new(layout.clone()), BlobStore::new(layout))
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_flat(v.to_vec()).unwrap()
    }

    fn upload(
        status: &StatusStore,
        blobs: &BlobStore,
        run: &str,
        round: u32,
        k: u32,
        p: &ParamVector,
    ) {
        let digest = blobs
            .publish_params(run, round, Owner::Client(k), p)
            .unwrap();
        for state in [ClientState::Assigned, ClientState::Training] {
            status
                .put_status(&RoundStatus::new(run, round, k, state))
                .unwrap();
        }
        status
            .put_status(&RoundStatus {
                data_length: 10 * k as u64,
                validation_loss: 1.0,
                params_digest: digest,
                ..RoundStatus::new(run, round, k, ClientState::Uploaded)
            })
            .unwrap();
    }

    fn start_round(status: &StatusStore, run: &str, round: u32) {
        advance_phase(status, run, round, Phase::Distributing).unwrap();
        advance_phase(status, run, round, Phase::AwaitingClients).unwrap();
    }

    #[test]
    fn layout_paths_are_exact() {
        let l = RunLayout::new("/s");
        assert_eq!(
            l.params("r", 2, Owner::Client(3)),
            PathBuf::from("/s/runs/r/round_2/client_3.params")
        );
        assert_eq!(
            l.params("r", 2, Owner::Global),
            PathBuf::from("/s/runs/r/round_2/global.params")
        );
        assert_eq!(
            l.client_status("r", 2, 3),
            PathBuf::from("/s/runs/r/round_2/client_3.status.json")
        );
        assert_eq!(
            l.aggregation("r", 2),
            PathBuf::from("/s/runs/r/round_2/aggregation.json")
        );
        assert_eq!(
            l.server_phase("r"),
            PathBuf::from("/s/runs/r/server.phase.json")
        );
        assert_eq!(
            l.client_losses("r", 1, 4),
            PathBuf::from("/s/runs/r/round_1/client_4.losses.csv")
        );
    }

    #[test]
    fn publish_fetch_and_idempotency() {
        let dir = tempfile::tempdir().unwrap();
        let (_, blobs) = stores(dir.path());
        let p = pv(&[1.0, -2.5]);
        let d1 = blobs.publish_params("r", 1, Owner::Client(1), &p).unwrap();
        let d2 = blobs.publish_params("r", 1, Owner::Client(1), &p).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1, p.digest());
        let (back, digest) = blobs
            .fetch_params("r", 1, Owner::Client(1))
            .unwrap()
            .unwrap();
        assert_eq!(back, p);
        assert_eq!(digest, d1);
        let files: Vec<_> = fs::read_dir(dir.path().join("runs/r/round_1"))
            .unwrap()
            .collect();
        assert_eq!(files.len(), 1);
        assert!(matches!(
            blobs.publish_params("r", 1, Owner::Client(1), &pv(&[0.0, 0.0])),
            Err(CoordinationError::ConflictingBlob(_))
        ));
    }

    #[test]
    fn concurrent_publishers_to_distinct_keys() {
        let dir = tempfile::tempdir().unwrap();
        let (_, blobs) = stores(dir.path());
        thread::scope(|s| {
            for k in 1..=4u32 {
                let blobs = blobs.clone();
                s.spawn(move || {
                    for round in 0..20 {
                        let p = pv(&vec![k as f64 + round as f64; 1000]);
                        blobs
                            .publish_params("r", round, Owner::Client(k), &p)
                            .unwrap();
                    }
                });
            }
        });
        for k in 1..=4u32 {
            for round in 0..20 {
                let (p, _) = blobs
                    .fetch_params("r", round, Owner::Client(k))
                    .unwrap()
                    .unwrap();
                assert_eq!(p.values()[999], k as f64 + round as f64);
            }
        }
    }

    #[test]
    fn status_transitions_only_move_forward() {
        let dir = tempfile::tempdir().unwrap();
        let (status, _) = stores(dir.path());
        let s = |state| RoundStatus::new("r", 1, 2, state);
        status.put_status(&s(ClientState::Assigned)).unwrap();
        status.put_status(&s(ClientState::Training)).unwrap();
        status.put_status(&s(ClientState::Training)).unwrap();
        assert!(matches!(
            status.put_status(&s(ClientState::Assigned)),
            Err(CoordinationError::IllegalTransition { .. })
        ));
        status.put_status(&s(ClientState::Uploaded)).unwrap();
        assert!(status.put_status(&s(ClientState::Failed)).is_err());
        let mut other = s(ClientState::Uploaded);
        other.params_digest = "ff".into();
        assert!(status.put_status(&other).is_err());
        let json: serde_json::Value = serde_json::from_slice(
            &fs::read(dir.path().join("runs/r/round_1/client_2.status.json")).unwrap(),
        )
        .unwrap();
        for key in [
            "run_id",
            "round",
            "client_id",
            "state",
            "data_length",
            "validation_loss",
            "params_digest",
            "timestamp",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["state"], "uploaded");
    }

    #[test]
    fn concurrent_read_modify_check() {
        // Each thread owns one key and repeatedly advances it; readers never
        // see a torn or backward record.
        let dir = tempfile::tempdir().unwrap();
        let (status, _) = stores(dir.path());
        thread::scope(|s| {
            for k in 1..=4u32 {
                let status = status.clone();
                s.spawn(move || {
                    for round in 1..=25 {
                        for state in [
                            ClientState::Assigned,
                            ClientState::Training,
                            ClientState::Uploaded,
                        ] {
                            status
                                .put_status(&RoundStatus::new("r", round, k, state))
                                .unwrap();
                            let back = status.get_status("r", round, k).unwrap().unwrap();
                            assert_eq!(back.state, state);
                        }
                    }
                });
            }
            let status = status.clone();
            s.spawn(move || {
                for _ in 0..200 {
                    for k in 1..=4 {
                        if let Some(r) = status.get_status("r", 10, k).unwrap() {
                            assert_eq!(r.client_id, k);
                        }
                    }
                }
            });
        });
    }

    #[test]
    fn barrier_happy_path() {
        let dir = tempfile::tempdir().unwrap();
        let (status, blobs) = stores(dir.path());
        publish_initial(&status, &blobs, "r", &pv(&[0.0])).unwrap();
        start_round(&status, "r", 1);
        for k in 1..=4 {
            upload(&status, &blobs, "r", 1, k, &pv(&[k as f64]));
        }
        let expected: BTreeSet<u32> = (1..=4).collect();
        let ups = barrier_await_clients(
            &status,
            &blobs,
            "r",
            1,
            &expected,
            Duration::from_millis(5),
            Duration::from_secs(1),
        )
        .unwrap();
        assert_eq!(ups.len(), 4);
        assert_eq!(ups[2].client_id, 3);
        assert_eq!(ups[2].data_length, 30);
    }

    #[test]
    fn barrier_timeout_names_missing_client() {
        let dir = tempfile::tempdir().unwrap();
        let (status, blobs) = stores(dir.path());
        publish_initial(&status, &blobs, "r", &pv(&[0.0])).unwrap();
        start_round(&status, "r", 1);
        for k in [1, 2, 4] {
            upload(&status, &blobs, "r", 1, k, &pv(&[k as f64]));
        }
        let expected: BTreeSet<u32> = (1..=4).collect();
        let err = barrier_await_clients(
            &status,
            &blobs,
            "r",
            1,
            &expected,
            Duration::from_millis(5),
            Duration::from_millis(60),
        )
        .unwrap_err();
        assert!(
            matches!(err, CoordinationError::BarrierTimeout { round: 1, ref missing } if missing == &vec![3])
        );
    }

    #[test]
    fn barrier_fails_fast_on_failed_client() {
        let dir = tempfile::tempdir().unwrap();
        let (status, blobs) = stores(dir.path());
        publish_initial(&status, &blobs, "r", &pv(&[0.0])).unwrap();
        start_round(&status, "r", 1);
        upload(&status, &blobs, "r", 1, 1, &pv(&[1.0]));
        status
            .put_status(&RoundStatus::new("r", 1, 2, ClientState::Failed))
            .unwrap();
        let expected: BTreeSet<u32> = (1..=2).collect();
        let err = barrier_await_clients(
            &status,
            &blobs,
            "r",
            1,
            &expected,
            Duration::from_millis(5),
            Duration::from_secs(5),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            CoordinationError::RoundFailed {
                round: 1,
                client_id: 2
            }
        ));
    }

    #[test]
    fn barrier_detects_tampered_blob() {
        let dir = tempfile::tempdir().unwrap();
        let (status, blobs) = stores(dir.path());
        publish_initial(&status, &blobs, "r", &pv(&[0.0])).unwrap();
        start_round(&status, "r", 1);
        upload(&status, &blobs, "r", 1, 1, &pv(&[1.0]));
        let path = blobs.layout().params("r", 1, Owner::Client(1));
        atomic_write(&path, &serialize(&pv(&[666.0]))).unwrap();
        let expected: BTreeSet<u32> = [1].into();
        let err = barrier_await_clients(
            &status,
            &blobs,
            "r",
            1,
            &expected,
            Duration::from_millis(5),
            Duration::from_secs(1),
        )
        .unwrap_err();
        assert!(matches!(err, CoordinationError::Integrity { .. }));
    }

    #[test]
    fn restarted_client_reupload_completes_barrier_once() {
        let dir = tempfile::tempdir().unwrap();
        let (status, blobs) = stores(dir.path());
        publish_initial(&status, &blobs, "r", &pv(&[0.0])).unwrap();
        start_round(&status, "r", 1);
        let expected: BTreeSet<u32> = (1..=2).collect();
        thread::scope(|s| {
            let waiter = s.spawn(|| {
                barrier_await_clients(
                    &status,
                    &blobs,
                    "r",
                    1,
                    &expected,
                    Duration::from_millis(2),
                    Duration::from_secs(5),
                )
            });
            upload(&status, &blobs, "r", 1, 1, &pv(&[1.0]));
            // Client 2 crashes after its blob write but before its status update.
            blobs
                .publish_params("r", 1, Owner::Client(2), &pv(&[2.0]))
                .unwrap();
            status
                .put_status(&RoundStatus::new("r", 1, 2, ClientState::Training))
                .unwrap();
            thread::sleep(Duration::from_millis(20));
            // After restart it recomputes the same model, re-uploads, and finishes.
            let digest = blobs
                .publish_params("r", 1, Owner::Client(2), &pv(&[2.0]))
                .unwrap();
            status
                .put_status(&RoundStatus {
                    data_length: 20,
                    validation_loss: 1.0,
                    params_digest: digest,
                    ..RoundStatus::new("r", 1, 2, ClientState::Uploaded)
                })
                .unwrap();
            let ups = waiter.join().unwrap().unwrap();
            assert_eq!(
                ups.iter().map(|u| u.client_id).collect::<Vec<_>>(),
                vec![1, 2]
            );
        });
    }

    #[test]
    fn global_publication_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let (status, blobs) = stores(dir.path());
        let init = pv(&[0.0, 0.0]);
        publish_initial(&status, &blobs, "r", &init).unwrap();
        publish_initial(&status, &blobs, "r", &init).unwrap();
        let got = client_await_global(
            &status,
            &blobs,
            "r",
            0,
            Duration::from_millis(5),
            Duration::from_millis(50),
        )
        .unwrap();
        assert_eq!(got, init);

        start_round(&status, "r", 1);
        let ups = vec![
            ClientUpdate::new(1, pv(&[1.0, 1.0]), 1, 1.0).unwrap(),
            ClientUpdate::new(2, pv(&[3.0, 3.0]), 1, 1.0).unwrap(),
        ];
        let (global, report) = aggregate(&ups, &AggregatorConfig::default(), 1).unwrap();
        // Not yet aggregating.
        assert!(matches!(
            publish_global_and_advance(&status, &blobs, "r", 1, &global, &report),
            Err(CoordinationError::ProtocolOrder(_))
        ));
        advance_phase(&status, "r", 1, Phase::Aggregating).unwrap();
        publish_global_and_advance(&status, &blobs, "r", 1, &global, &report).unwrap();
        assert!(matches!(
            publish_global_and_advance(&status, &blobs, "r", 1, &global, &report),
            Err(CoordinationError::AlreadyPublished { round: 1 })
        ));
        assert_eq!(status.get_report("r", 1).unwrap().unwrap(), report);
        let phase = status.get_phase("r").unwrap().unwrap();
        assert_eq!(
            (phase.round, phase.phase, phase.global_digests.len()),
            (1, Phase::Published, 2)
        );
        assert!(matches!(
            status.put_phase(&ServerPhase {
                round: 1,
                phase: Phase::Distributing,
                ..phase
            }),
            Err(CoordinationError::IllegalPhase { .. })
        ));
    }

    #[test]
    fn await_global_returns_within_one_poll_after_publication() {
        let dir = tempfile::tempdir().unwrap();
        let (status, blobs) = stores(dir.path());
        let poll = Duration::from_millis(20);
        thread::scope(|s| {
            let waiter = s.spawn(|| {
                let t0 = Instant::now();
                let got =
                    client_await_global(&status, &blobs, "r", 0, poll, Duration::from_secs(5))
                        .unwrap();
                (got, t0.elapsed())
            });
            thread::sleep(Duration::from_millis(100));
            let published_at = Instant::now();
            publish_initial(&status, &blobs, "r", &pv(&[4.0])).unwrap();
            let (got, _) = waiter.join().unwrap();
            assert_eq!(got.values(), &[4.0]);
            // Slack for scheduler jitter on top of one poll interval.
            assert!(published_at.elapsed() <= poll + Duration::from_millis(80));
        });
    }

    #[test]
    fn corrupted_global_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let (status, blobs) = stores(dir.path());
        publish_initial(&status, &blobs, "r", &pv(&[1.0])).unwrap();
        let path = blobs.layout().params("r", 0, Owner::Global);
        let mut bytes = fs::read(&path).unwrap();
        *bytes.last_mut().unwrap() ^= 0x01;
        fs::write(&path, bytes).unwrap();
        let err = client_await_global(
            &status,
            &blobs,
            "r",
            0,
            Duration::from_millis(5),
            Duration::from_millis(50),
        )
        .unwrap_err();
        assert!(matches!(err, CoordinationError::Integrity { .. }));
        let err = client_await_global(
            &status,
            &blobs,
            "r",
            1,
            Duration::from_millis(5),
            Duration::from_millis(30),
        )
        .unwrap_err();
        assert!(matches!(err, CoordinationError::GlobalTimeout { round: 1 }));
    }
}
