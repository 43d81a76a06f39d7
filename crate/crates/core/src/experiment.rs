//! Experiment runner: configuration, the server and client roles, and the
//! in-process / multi-process execution modes.
//!
//! Roles never share memory. Each one rebuilds the synthetic dataset from the
//! run seed and talks to the others only through the blob and status stores,
//! so a client can equally be a thread or a separate OS process.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate, AggregationError, AggregatorConfig, ClientUpdate, Strategy};
use crate::client::{
    apply_adversary, local_train, partition_by, AdversaryMode, ClientData, ClientError,
    LocalTrainConfig, PartitionSpec, DEFAULT_TRAIN_RATIOS, DEFAULT_VALIDATION_RATIOS,
};
use crate::coordination::{
    advance_phase, atomic_write, barrier_await_clients, client_await_global,
    publish_global_and_advance, publish_initial, write_text, BlobStore, ClientState,
    CoordinationError, Owner, Phase, RoundStatus, RunLayout, ServerPhase, StatusStore,
};
use crate::metrics::{evaluate_corpus, tokenize, CorpusScores, MetricReport, MetricsError};
use crate::model::{
    detokenize, synth_generate, CaptionModel, ModelError, Sample, SyntheticDataset,
    SyntheticTaskSpec, ToyCaptioner,
};
use crate::param::ParamVector;
use crate::seed::{mix, mix_all};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("round {round}: {source}")]
    Round {
        round: u32,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("client {client_id}: {source}")]
    Client {
        client_id: u32,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("client process {client_id} exited with {status}")]
    ClientProcess { client_id: u32, status: String },
    #[error("run {0} was ended by the server before this client finished")]
    RunEnded(String),
    #[error(transparent)]
    Coordination(#[from] CoordinationError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Training(#[from] ClientError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    #[default]
    Inprocess,
    Multiprocess,
}

impl std::str::FromStr for ExecutionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "inprocess" => Ok(Self::Inprocess),
            "multiprocess" => Ok(Self::Multiprocess),
            _ => Err(format!(
                "unknown mode `{s}` (expected inprocess or multiprocess)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub train_ratios: Vec<f64>,
    pub validation_ratios: Vec<f64>,
    pub shuffle: bool,
    /// 0 = IID shards that differ only in size.
    pub class_skew: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            train_ratios: DEFAULT_TRAIN_RATIOS.to_vec(),
            validation_ratios: DEFAULT_VALIDATION_RATIOS.to_vec(),
            shuffle: true,
            class_skew: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinationConfig {
    pub poll_interval_ms: u64,
    pub timeout_secs: f64,
}

impl Default for CoordinationConfig {
    fn default() -> Self {
        Self {
            poll_interval_ms: 200,
            timeout_secs: 600.0,
        }
    }
}

impl CoordinationConfig {
    pub fn poll(&self) -> Duration {
        Duration::from_millis(self.poll_interval_ms)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryAssignment {
    pub client_id: u32,
    #[serde(flatten)]
    pub mode: AdversaryMode,
}

/// Full experiment description. Every field has a default, so an empty
/// config file describes the reference 4-client, 3-round setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub num_clients: u32,
    /// Number of federated rounds. A desk-scale choice, not a published value.
    pub rounds: u32,
    pub seed: u64,
    pub store_root: PathBuf,
    pub mode: ExecutionMode,
    pub partition: PartitionConfig,
    pub aggregator: AggregatorConfig,
    /// `seed` here is ignored; per-client, per-round seeds derive from the run seed.
    pub local_train: LocalTrainConfig,
    /// `seed` here is ignored; the task seed derives from the run seed.
    pub task: SyntheticTaskSpec,
    pub adversaries: Vec<AdversaryAssignment>,
    pub coordination: CoordinationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            num_clients: 4,
            rounds: 3,
            seed: 42,
            store_root: PathBuf::from("."),
            mode: ExecutionMode::Inprocess,
            partition: PartitionConfig::default(),
            aggregator: AggregatorConfig::default(),
            local_train: LocalTrainConfig::default(),
            task: SyntheticTaskSpec::default(),
            adversaries: Vec::new(),
            coordination: CoordinationConfig::default(),
        }
    }
}

// Seed streams.
const STREAM_TASK: u64 = 1;
const STREAM_TRAIN_SPLIT: u64 = 2;
const STREAM_VALIDATION_SPLIT: u64 = 3;
const STREAM_LOCAL_TRAIN: u64 = 4;
const STREAM_ADVERSARY: u64 = 5;

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        toml::from_str(&text).map_err(|e| ExperimentError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            return bad(format!(
                "run_id `{}` must be a non-empty [A-Za-z0-9._-] name",
                self.run_id
            ));
        }
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        let k = self.num_clients as usize;
        if self.partition.train_ratios.len() != k || self.partition.validation_ratios.len() != k {
            return bad(format!(
                "partition ratios must have one entry per client ({k}), got {} train and {} validation",
                self.partition.train_ratios.len(),
                self.partition.validation_ratios.len()
            ));
        }
        self.aggregator.validate()?;
        if self.aggregator.strategy == Strategy::Krum && k < self.aggregator.fault_tolerance + 3 {
            return bad(format!(
                "krum with f = {} needs at least {} clients, got {k}",
                self.aggregator.fault_tolerance,
                self.aggregator.fault_tolerance + 3
            ));
        }
        self.local_train.validate()?;
        self.task.validate()?;
        if self.task.train_samples < k || self.task.validation_samples < k {
            return bad(
                "every client needs at least one training and one validation sample".into(),
            );
        }
        if self.task.test_samples == 0 {
            return bad("test_samples must be at least 1".into());
        }
        let mut seen = BTreeSet::new();
        for a in &self.adversaries {
            if a.client_id == 0 || a.client_id > self.num_clients {
                return bad(format!(
                    "adversary client {} is not in 1..={}",
                    a.client_id, self.num_clients
                ));
            }
            if !seen.insert(a.client_id) {
                return bad(format!(
                    "client {} has two adversary assignments",
                    a.client_id
                ));
            }
            match a.mode {
                AdversaryMode::Scale { factor: x } | AdversaryMode::GaussianNoise { sigma: x }
                    if !x.is_finite() =>
                {
                    return bad(format!(
                        "adversary parameter for client {} is not finite",
                        a.client_id
                    ))
                }
                _ => {}
            }
        }
        if !(self.coordination.timeout_secs.is_finite() && self.coordination.timeout_secs > 0.0) {
            return bad("coordination.timeout_secs must be positive".into());
        }
        Ok(())
    }

    pub fn client_ids(&self) -> BTreeSet<u32> {
        (1..=self.num_clients).collect()
    }

    pub fn adversary(&self, client_id: u32) -> AdversaryMode {
        self.adversaries
            .iter()
            .find(|a| a.client_id == client_id)
            .map(|a| a.mode)
            .unwrap_or_default()
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            seed: mix(self.seed, STREAM_TASK),
            ..self.task.clone()
        }
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout::new(&self.store_root)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.layout().run_dir(&self.run_id)
    }

    fn local_train_for(&self, round: u32, client_id: u32) -> LocalTrainConfig {
        LocalTrainConfig {
            seed: mix_all(
                self.seed,
                &[STREAM_LOCAL_TRAIN, round as u64, client_id as u64],
            ),
            ..self.local_train.clone()
        }
    }
}

/// Generated data plus every client's shard. Pure function of the config.
#[derive(Debug, Clone)]
pub struct Workload {
    pub model: ToyCaptioner,
    pub data: SyntheticDataset,
    pub shards: Vec<ClientData>,
}

impl Workload {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.task_spec();
        let data = synth_generate(&spec)?;
        let split = |samples: &[Sample], ratios: &[f64], stream: u64| {
            let pspec = PartitionSpec {
                ratios: ratios.to_vec(),
                seed: mix(cfg.seed, stream),
                shuffle: cfg.partition.shuffle,
                class_skew: cfg.partition.class_skew,
            };
            partition_by(samples, &pspec, |s| s.class)
        };
        let train = split(&data.train, &cfg.partition.train_ratios, STREAM_TRAIN_SPLIT)?;
        let validation = split(
            &data.validation,
            &cfg.partition.validation_ratios,
            STREAM_VALIDATION_SPLIT,
        )?;
        let shards = train
            .into_iter()
            .zip(validation)
            .map(|(train, validation)| ClientData { train, validation })
            .collect();
        Ok(Self {
            model: spec.model(),
            data,
            shards,
        })
    }

    pub fn shard(&self, client_id: u32) -> &ClientData {
        &self.shards[client_id as usize - 1]
    }
}

fn stores(cfg: &ExperimentConfig) -> (StatusStore, BlobStore) {
    let layout = cfg.layout();
    (StatusStore::new(layout.clone()), BlobStore::new(layout))
}

// ---------------------------------------------------------------------------
// Client role

fn loss_csv(trace: &[crate::client::LossRecord]) -> String {
    let mut s = String::from("step,epoch,train_loss\n");
    for r in trace {
        writeln!(s, "{},{},{}", r.step, r.epoch, r.train_loss).unwrap();
    }
    s
}

fn val_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,val_loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{},{}", i + 1, l).unwrap();
    }
    s
}

/// Runs one client through every round. Rounds whose upload is already
/// recorded are skipped, so a restarted client picks up where it stopped.
pub fn run_client(cfg: &ExperimentConfig, client_id: u32) -> Result<()> {
    cfg.validate()?;
    if !cfg.client_ids().contains(&client_id) {
        return Err(ExperimentError::Config(format!(
            "no client {client_id} in this run"
        )));
    }
    let workload = Workload::build(cfg)?;
    let shard = workload.shard(client_id);
    let (status, blobs) = stores(cfg);
    let run = cfg.run_id.as_str();
    for round in 1..=cfg.rounds {
        if let Some(s) = status.get_status(run, round, client_id)? {
            if s.state == ClientState::Uploaded
                && blobs.exists(run, round, Owner::Client(client_id))
            {
                debug!("client {client_id}: round {round} already uploaded");
                continue;
            }
        }
        let global = match client_await_global(
            &status,
            &blobs,
            run,
            round - 1,
            cfg.coordination.poll(),
            cfg.coordination.timeout(),
        ) {
            Ok(g) => g,
            Err(CoordinationError::RunEnded { .. }) => {
                return Err(ExperimentError::RunEnded(run.to_owned()))
            }
            Err(e) => return Err(e.into()),
        };
        let put = |state: ClientState| -> Result<()> {
            let prev = status.get_status(run, round, client_id)?;
            if prev.is_none_or(|p| p.state != state && p.state.can_become(state)) {
                status.put_status(&RoundStatus {
                    data_length: shard.train.len() as u64,
                    ..RoundStatus::new(run, round, client_id, state)
                })?;
            }
            Ok(())
        };
        put(ClientState::Assigned)?;
        put(ClientState::Training)?;
        let uploaded = (|| -> Result<ClientUpdate> {
            let outcome = local_train(
                &workload.model,
                &global,
                shard,
                &cfg.local_train_for(round, client_id),
            )?;
            let layout = status.layout();
            write_text(
                &layout.client_losses(run, round, client_id),
                &loss_csv(&outcome.train_trace),
            )?;
            write_text(
                &layout.client_val_losses(run, round, client_id),
                &val_csv(&outcome.epoch_val_losses),
            )?;
            let honest = ClientUpdate::new(
                client_id,
                outcome.params,
                shard.train.len() as u64,
                outcome.validation_loss,
            )?;
            let seed = mix_all(
                cfg.seed,
                &[STREAM_ADVERSARY, round as u64, client_id as u64],
            );
            let update = apply_adversary(&honest, cfg.adversary(client_id), seed)
                .map_err(|e| ExperimentError::Training(e.into()))?;
            let digest =
                blobs.publish_params(run, round, Owner::Client(client_id), &update.params)?;
            status.put_status(&RoundStatus {
                data_length: update.data_length,
                validation_loss: update.validation_loss,
                params_digest: digest,
                ..RoundStatus::new(run, round, client_id, ClientState::Uploaded)
            })?;
            Ok(update)
        })();
        let update = match uploaded {
            Ok(u) => u,
            Err(e) => {
                warn!("client {client_id}: round {round} failed: {e}");
                // Best effort: the server fails the round as soon as it sees this.
                let _ = status.put_status(&RoundStatus {
                    data_length: shard.train.len() as u64,
                    ..RoundStatus::new(run, round, client_id, ClientState::Failed)
                });
                return Err(e);
            }
        };
        info!(
            "client {client_id}: round {round} uploaded (val loss {:.4})",
            update.validation_loss
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Server role

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub global_digest: String,
    pub global_val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_client: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<u32, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub run_id: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub num_clients: u32,
    pub rounds: u32,
    /// Round 0 is the initial model; round t is the global model after t rounds.
    pub history: Vec<RoundSummary>,
    pub test_metrics: CorpusScores,
}

impl ExperimentSummary {
    pub fn final_val_loss(&self) -> f64 {
        self.history
            .last()
            .expect("history has round 0")
            .global_val_loss
    }

    pub fn first_round_val_loss(&self) -> f64 {
        self.history[1.min(self.history.len() - 1)].global_val_loss
    }

    pub fn global_digests(&self) -> Vec<&str> {
        self.history
            .iter()
            .map(|r| r.global_digest.as_str())
            .collect()
    }
}

/// Rebuilds the phase record when the artifacts it references were removed
/// or an earlier attempt ended the run early, keeping only the contiguous
/// prefix of rounds whose global model exists.
fn recover_phase(status: &StatusStore, blobs: &BlobStore, run: &str, rounds: u32) -> Result<()> {
    let Some(phase) = status.get_phase(run)? else {
        return Ok(());
    };
    let mut intact = 0usize;
    for (t, digest) in phase.global_digests.iter().enumerate() {
        let ok = matches!(blobs.fetch_params(run, t as u32, Owner::Global)?, Some((_, d)) if &d == digest)
            && (t == 0 || status.get_report(run, t as u32)?.is_some());
        if !ok {
            break;
        }
        intact += 1;
    }
    let ended_early = phase.phase == Phase::Finished && intact <= rounds as usize;
    if intact == phase.global_digests.len() && !ended_early {
        return Ok(());
    }
    warn!(
        "run {run}: resuming from round {}",
        intact.saturating_sub(1)
    );
    let path = status.layout().server_phase(run);
    std::fs::remove_file(&path).map_err(io_at(&path))?;
    if intact > 0 {
        status.put_phase(&ServerPhase {
            run_id: run.to_owned(),
            round: intact as u32 - 1,
            phase: Phase::Published,
            global_digests: phase.global_digests[..intact].to_vec(),
        })?;
    }
    Ok(())
}

fn validation_loss(workload: &Workload, params: &ParamVector) -> Result<f64> {
    let batch: Vec<&Sample> = workload.data.validation.iter().collect();
    Ok(workload.model.loss(params, &batch)?)
}

/// Runs the server through every round, then evaluates the final model on
/// the test split and writes the run artifacts.
pub fn run_server(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let workload = Workload::build(cfg)?;
    let (status, blobs) = stores(cfg);
    let run = cfg.run_id.as_str();
    recover_phase(&status, &blobs, run, cfg.rounds)?;
    let init = workload.model.init_params();
    let d0 = publish_initial(&status, &blobs, run, &init)?;
    let mut history = vec![RoundSummary {
        round: 0,
        global_digest: d0,
        global_val_loss: validation_loss(&workload, &init)?,
        selected_client: None,
        weights: None,
    }];
    let mut global = init;
    let expected = cfg.client_ids();
    for round in 1..=cfg.rounds {
        let in_round = |e: ExperimentError| ExperimentError::Round {
            round,
            source: Box::new(e),
        };
        let phase = status.get_phase(run)?.expect("initial phase exists");
        let report = if let Some(digest) = phase.global_digests.get(round as usize) {
            debug!("server: round {round} already published");
            global = blobs.fetch_verified(run, round, Owner::Global, digest)?;
            status.get_report(run, round)?.ok_or_else(|| {
                in_round(
                    CoordinationError::ProtocolOrder(
                        "published round has no aggregation report".into(),
                    )
                    .into(),
                )
            })?
        } else {
            advance_phase(&status, run, round, Phase::Distributing)?;
            advance_phase(&status, run, round, Phase::AwaitingClients)?;
            let updates = barrier_await_clients(
                &status,
                &blobs,
                run,
                round,
                &expected,
                cfg.coordination.poll(),
                cfg.coordination.timeout(),
            )
            .map_err(|e| in_round(e.into()))?;
            advance_phase(&status, run, round, Phase::Aggregating)?;
            let (next, report) =
                aggregate(&updates, &cfg.aggregator, round).map_err(|e| in_round(e.into()))?;
            publish_global_and_advance(&status, &blobs, run, round, &next, &report)?;
            global = next;
            report
        };
        let val = validation_loss(&workload, &global)?;
        info!(
            "server: round {round} published ({}), global val loss {val:.4}",
            cfg.aggregator.strategy
        );
        history.push(RoundSummary {
            round,
            global_digest: report.params_digest.clone(),
            global_val_loss: val,
            selected_client: report.selected_client,
            weights: report.weights.clone(),
        });
    }
    advance_phase(&status, run, cfg.rounds, Phase::Finished)?;

    let pairs = decode_test_split(&workload, &global)?;
    let report = evaluate_decodes(&pairs)?;
    let summary = ExperimentSummary {
        run_id: cfg.run_id.clone(),
        strategy: cfg.aggregator.strategy,
        seed: cfg.seed,
        num_clients: cfg.num_clients,
        rounds: cfg.rounds,
        history,
        test_metrics: report.corpus,
    };
    let dir = cfg.run_dir();
    write_decodes(&dir.join("decodes.csv"), &pairs)?;
    write_metrics(&dir, cfg.aggregator.strategy.as_str(), &report)?;
    let mut json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    json.push(b'\n');
    atomic_write(&dir.join("summary.json"), &json)?;
    Ok(summary)
}

/// Marks the run finished so waiting clients stop instead of timing out.
fn end_run(cfg: &ExperimentConfig) {
    let (status, _) = stores(cfg);
    if let Ok(Some(phase)) = status.get_phase(&cfg.run_id) {
        let _ = status.put_phase(&ServerPhase {
            phase: Phase::Finished,
            ..phase
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodePair {
    pub sample_id: usize,
    pub candidate: String,
    pub reference: String,
}

pub fn decode_test_split(workload: &Workload, params: &ParamVector) -> Result<Vec<DecodePair>> {
    workload
        .data
        .test
        .iter()
        .map(|s| {
            Ok(DecodePair {
                sample_id: s.id,
                candidate: detokenize(&workload.model.greedy_decode(params, &s.features)?),
                reference: detokenize(&s.reference),
            })
        })
        .collect()
}

pub fn evaluate_decodes(pairs: &[DecodePair]) -> Result<MetricReport> {
    let tokens: Vec<_> = pairs
        .iter()
        .map(|p| (tokenize(&p.candidate), tokenize(&p.reference)))
        .collect();
    Ok(evaluate_corpus(&tokens)?)
}

pub fn write_decodes(path: &Path, pairs: &[DecodePair]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "candidate", "reference"])
        .expect("in-memory write");
    for p in pairs {
        w.write_record([
            p.sample_id.to_string(),
            p.candidate.clone(),
            p.reference.clone(),
        ])
        .expect("in-memory write");
    }
    atomic_write(path, &w.into_inner().expect("in-memory flush"))?;
    Ok(())
}

pub fn read_decodes(path: &Path) -> Result<Vec<DecodePair>> {
    let parse_err = |message: String| ExperimentError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        if row.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 columns, found {}",
                row.len()
            )));
        }
        out.push(DecodePair {
            sample_id: row[0]
                .parse()
                .map_err(|e| parse_err(format!("sample_id: {e}")))?,
            candidate: row[1].to_owned(),
            reference: row[2].to_owned(),
        });
    }
    Ok(out)
}

fn metrics_csv(rows: &[(String, CorpusScores)]) -> String {
    let mut s = String::from("approach");
    for h in CorpusScores::CSV_HEADER {
        s.push(',');
        s.push_str(h);
    }
    s.push('\n');
    for (name, scores) in rows {
        s.push_str(name);
        for v in scores.as_row() {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes `metrics.csv` (one row) and `metrics.json` (per-pair detail).
pub fn write_metrics(dir: &Path, approach: &str, report: &MetricReport) -> Result<()> {
    atomic_write(
        &dir.join("metrics.csv"),
        metrics_csv(&[(approach.to_owned(), report.corpus)]).as_bytes(),
    )?;
    let mut json = serde_json::to_vec_pretty(report).expect("report serializes");
    json.push(b'\n');
    atomic_write(&dir.join("metrics.json"), &json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Runners

/// Where the runner finds the executable for multi-process clients.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub client_exe: Option<PathBuf>,
}

/// Executes the experiment and returns its summary.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    atomic_write(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let spec = cfg.task_spec();
    let data = synth_generate(&spec)?;
    crate::model::write_samples_csv(
        &dir.join("samples.csv"),
        data.all_samples(),
        spec.feature_dim,
    )?;
    match cfg.mode {
        ExecutionMode::Inprocess => run_inprocess(cfg),
        ExecutionMode::Multiprocess => {
            let exe = opts.client_exe.clone().ok_or_else(|| {
                ExperimentError::Config("multiprocess mode needs the client executable path".into())
            })?;
            run_multiprocess(cfg, &exe)
        }
    }
}

fn run_inprocess(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    thread::scope(|s| {
        let clients: Vec<_> = cfg
            .client_ids()
            .into_iter()
            .map(|k| (k, s.spawn(move || run_client(cfg, k))))
            .collect();
        let server = run_server(cfg);
        if server.is_err() {
            end_run(cfg);
        }
        let mut client_error = None;
        for (k, handle) in clients {
            let res = handle.join().expect("client thread panicked");
            if let Err(e) = res {
                client_error.get_or_insert(ExperimentError::Client {
                    client_id: k,
                    source: Box::new(e),
                });
            }
        }
        match (server, client_error) {
            (Ok(summary), None) => Ok(summary),
            (Err(e), _) | (Ok(_), Some(e)) => Err(e),
        }
    })
}

/// Command line that runs one client role as a separate process.
pub fn client_command(exe: &Path, config_path: &Path, client_id: u32) -> Command {
    let mut cmd = Command::new(exe);
    cmd.arg("client")
        .arg("--config")
        .arg(config_path)
        .arg("--client-id")
        .arg(client_id.to_string());
    cmd
}

fn run_multiprocess(cfg: &ExperimentConfig, exe: &Path) -> Result<ExperimentSummary> {
    let config_path = cfg.run_dir().join("config.toml");
    let mut children: Vec<(u32, Child)> = Vec::new();
    for k in cfg.client_ids() {
        let child = client_command(exe, &config_path, k)
            .spawn()
            .map_err(io_at(exe))?;
        children.push((k, child));
    }
    let server = run_server(cfg);
    if server.is_err() {
        end_run(cfg);
    }
    let mut client_error = None;
    for (k, mut child) in children {
        let status = child.wait().map_err(io_at(exe))?;
        if !status.success() {
            client_error.get_or_insert(ExperimentError::ClientProcess {
                client_id: k,
                status: status.to_string(),
            });
        }
    }
    match (server, client_error) {
        (Ok(summary), None) => Ok(summary),
        (Err(e), _) | (Ok(_), Some(e)) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub run_id: String,
    pub final_val_loss: f64,
    pub metrics: CorpusScores,
}

/// Runs every strategy from the same seed, partition and initial model.
/// Each run lives under `<run_id>-<strategy>`; the table is written to
/// `runs/<run_id>/metrics.csv`.
pub fn compare_strategies(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    opts: &RunOptions,
) -> Result<Vec<ComparisonRow>> {
    if strategies.is_empty() {
        return Err(ExperimentError::Config("no strategies to compare".into()));
    }
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let mut run_cfg = cfg.clone();
        run_cfg.run_id = format!("{}-{}", cfg.run_id, strategy);
        run_cfg.aggregator.strategy = strategy;
        let summary = run_experiment(&run_cfg, opts)?;
        rows.push(ComparisonRow {
            strategy,
            run_id: run_cfg.run_id,
            final_val_loss: summary.final_val_loss(),
            metrics: summary.test_metrics,
        });
    }
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let table: Vec<(String, CorpusScores)> = rows
        .iter()
        .map(|r| (r.strategy.to_string(), r.metrics))
        .collect();
    atomic_write(&dir.join("metrics.csv"), metrics_csv(&table).as_bytes())?;
    Ok(rows)
}

/// Recomputes metrics from a finished run's `decodes.csv`.
pub fn recompute_metrics(cfg: &ExperimentConfig) -> Result<MetricReport> {
    let dir = cfg.run_dir();
    let pairs = read_decodes(&dir.join("decodes.csv"))?;
    let report = evaluate_decodes(&pairs)?;
    write_metrics(&dir, cfg.aggregator.strategy.as_str(), &report)?;
    Ok(report)
}
