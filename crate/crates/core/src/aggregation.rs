//! Server-side aggregation: FedAvg (uniform and data-weighted), Krum, and
//! loss-aware weighted averaging (L-FedAvg).
//!
//! Every aggregator sorts its input by client id before doing any arithmetic,
//! so the result does not depend on the order in which updates arrived.
//! None of them mutate their inputs, and each returns an [`AggregationReport`]
//! carrying the weights or scores it used.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::param::{linear_combine, sq_l2_distance, ParamError, ParamVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("no client updates to aggregate")]
    Empty,
    #[error("client {0} appears more than once in the update set")]
    DuplicateClient(u32),
    #[error("invalid update from client {client_id}: {reason}")]
    InvalidUpdate { client_id: u32, reason: String },
    #[error("krum needs at least f + 3 clients: got m = {m}, f = {f}")]
    InsufficientClients { m: usize, f: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("loss floor must be positive and finite, got {0}")]
    InvalidLossFloor(f64),
    #[error("aggregation weights sum to a non-positive or non-finite value")]
    DegenerateWeights,
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T, E = AggregationError> = std::result::Result<T, E>;

/// A client's contribution to one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub params: ParamVector,
    /// Number of local training samples.
    pub data_length: u64,
    /// Validation loss at the end of the client's local training.
    pub validation_loss: f64,
}

impl ClientUpdate {
    pub fn new(
        client_id: u32,
        params: ParamVector,
        data_length: u64,
        validation_loss: f64,
    ) -> Result<Self> {
        let update = Self {
            client_id,
            params,
            data_length,
            validation_loss,
        };
        update.validate()?;
        Ok(update)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| AggregationError::InvalidUpdate {
            client_id: self.client_id,
            reason: reason.to_owned(),
        };
        if self.data_length == 0 {
            return Err(invalid("data_length must be at least 1"));
        }
        if !self.validation_loss.is_finite() || self.validation_loss < 0.0 {
            return Err(invalid("validation_loss must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Per-client metadata consumed by the L-FedAvg weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientMeta {
    pub client_id: u32,
    pub data_length: u64,
    pub validation_loss: f64,
}

impl From<&ClientUpdate> for ClientMeta {
    fn from(u: &ClientUpdate) -> Self {
        Self {
            client_id: u.client_id,
            data_length: u.data_length,
            validation_loss: u.validation_loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    FedavgUniform,
    FedavgWeighted,
    Krum,
    LFedavg,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FedavgUniform,
        Strategy::FedavgWeighted,
        Strategy::Krum,
        Strategy::LFedavg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FedavgUniform => "fedavg-uniform",
            Strategy::FedavgWeighted => "fedavg-weighted",
            Strategy::Krum => "krum",
            Strategy::LFedavg => "l-fedavg",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                format!("unknown strategy `{s}` (expected fedavg-uniform, fedavg-weighted, krum or l-fedavg)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub strategy: Strategy,
    /// Blend between data-size weight (alpha) and inverse-loss weight (1 - alpha).
    pub alpha: f64,
    /// Number of Byzantine clients Krum tolerates.
    pub fault_tolerance: usize,
    /// Validation losses are clamped to at least this value before inversion.
    pub loss_floor: f64,
    /// Rescale inverse-loss weights to sum to 1 before blending with data weights.
    pub normalize_loss_weights_first: bool,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FedavgWeighted,
            alpha: 0.5,
            fault_tolerance: 1,
            loss_floor: 1e-8,
            normalize_loss_weights_first: false,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(AggregationError::AlphaOutOfRange(self.alpha));
        }
        if !(self.loss_floor.is_finite() && self.loss_floor > 0.0) {
            return Err(AggregationError::InvalidLossFloor(self.loss_floor));
        }
        Ok(())
    }
}

/// Audit record of one aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub strategy: Strategy,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<u32, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<u32, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_client: Option<u32>,
    pub params_digest: String,
}

/// Checks the update-set invariants and returns the updates sorted by client id.
fn sorted_updates(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return Err(AggregationError::Empty);
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let mut seen = BTreeSet::new();
    for u in &sorted {
        if !seen.insert(u.client_id) {
            return Err(AggregationError::DuplicateClient(u.client_id));
        }
        u.validate()?;
        if !u.params.same_shape(&sorted[0].params) {
            return Err(ParamError::IncompatibleShapes.into());
        }
    }
    Ok(sorted)
}

fn normalize(raw: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = raw.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(AggregationError::DegenerateWeights);
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

fn data_weights(meta: &[ClientMeta]) -> Vec<f64> {
    let total: f64 = meta.iter().map(|m| m.data_length as f64).sum();
    meta.iter().map(|m| m.data_length as f64 / total).collect()
}

fn combine(sorted: &[&ClientUpdate], coefficients: &[f64]) -> Result<ParamVector> {
    let terms: Vec<(f64, &ParamVector)> = coefficients
        .iter()
        .zip(sorted)
        .map(|(&c, u)| (c, &u.params))
        .collect();
    Ok(linear_combine(&terms)?)
}

fn keyed(sorted: &[&ClientUpdate], values: &[f64]) -> BTreeMap<u32, f64> {
    sorted
        .iter()
        .zip(values)
        .map(|(u, &v)| (u.client_id, v))
        .collect()
}

/// FedAvg. `weighted == false` gives every client `1/m`; `weighted == true`
/// gives client `k` the share `d_k / sum d`.
pub fn aggregate_fedavg(
    updates: &[ClientUpdate],
    weighted: bool,
) -> Result<(ParamVector, AggregationReport)> {
    let sorted = sorted_updates(updates)?;
    let coefficients = if weighted {
        let meta: Vec<ClientMeta> = sorted.iter().map(|u| ClientMeta::from(*u)).collect();
        normalize(&data_weights(&meta))?
    } else {
        vec![1.0 / sorted.len() as f64; sorted.len()]
    };
    let global = combine(&sorted, &coefficients)?;
    let report = AggregationReport {
        strategy: if weighted {
            Strategy::FedavgWeighted
        } else {
            Strategy::FedavgUniform
        },
        round: 0,
        weights: Some(keyed(&sorted, &coefficients)),
        scores: None,
        selected_client: None,
        params_digest: global.digest(),
    };
    Ok((global, report))
}

/// Krum scores: for each client, the sum of its `m - f - 2` smallest squared
/// distances to the other clients. Returned in ascending client id order.
pub fn krum_scores(updates: &[ClientUpdate], f: usize) -> Result<Vec<(u32, f64)>> {
    let sorted = sorted_updates(updates)?;
    krum_scores_sorted(&sorted, f)
}

fn krum_scores_sorted(sorted: &[&ClientUpdate], f: usize) -> Result<Vec<(u32, f64)>> {
    let m = sorted.len();
    if m < f + 3 {
        return Err(AggregationError::InsufficientClients { m, f });
    }
    let neighbours = m - f - 2;
    let mut dist = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = sq_l2_distance(&sorted[i].params, &sorted[j].params)?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut row: Vec<f64> = (0..m).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            (u.client_id, row[..neighbours].iter().sum())
        })
        .collect())
}

/// Krum: returns the parameters of the client with the smallest score,
/// verbatim. Ties go to the lowest client id.
pub fn aggregate_krum(
    updates: &[ClientUpdate],
    f: usize,
) -> Result<(ParamVector, AggregationReport)> {
    let sorted = sorted_updates(updates)?;
    let scores = krum_scores_sorted(&sorted, f)?;
    let mut best = 0;
    for (i, (_, score)) in scores.iter().enumerate() {
        if *score < scores[best].1 {
            best = i;
        }
    }
    let global = sorted[best].params.clone();
    let report = AggregationReport {
        strategy: Strategy::Krum,
        round: 0,
        weights: None,
        scores: Some(scores.iter().copied().collect()),
        selected_client: Some(sorted[best].client_id),
        params_digest: global.digest(),
    };
    Ok((global, report))
}

/// L-FedAvg weights, ascending by client id.
///
/// `w_d = d_k / sum d`, `w_l = 1 / max(l_k, loss_floor)`,
/// `w = alpha * w_d + (1 - alpha) * w_l`, then normalized to sum to 1.
/// With `normalize_loss_first`, `w_l` is rescaled to sum to 1 before blending.
pub fn lfedavg_weights(
    metadata: &[ClientMeta],
    alpha: f64,
    loss_floor: f64,
    normalize_loss_first: bool,
) -> Result<Vec<(u32, f64)>> {
    if metadata.is_empty() {
        return Err(AggregationError::Empty);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AggregationError::AlphaOutOfRange(alpha));
    }
    if !(loss_floor.is_finite() && loss_floor > 0.0) {
        return Err(AggregationError::InvalidLossFloor(loss_floor));
    }
    let mut meta = metadata.to_vec();
    meta.sort_by_key(|m| m.client_id);
    for pair in meta.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(AggregationError::DuplicateClient(pair[0].client_id));
        }
    }
    for m in &meta {
        if m.data_length == 0 || !m.validation_loss.is_finite() || m.validation_loss < 0.0 {
            return Err(AggregationError::InvalidUpdate {
                client_id: m.client_id,
                reason: "need data_length >= 1 and a finite nonnegative validation loss".into(),
            });
        }
    }
    let wd = data_weights(&meta);
    let mut wl: Vec<f64> = meta
        .iter()
        .map(|m| 1.0 / m.validation_loss.max(loss_floor))
        .collect();
    if normalize_loss_first {
        wl = normalize(&wl)?;
    }
    let raw: Vec<f64> = wd
        .iter()
        .zip(&wl)
        .map(|(d, l)| alpha * d + (1.0 - alpha) * l)
        .collect();
    let weights = normalize(&raw)?;
    Ok(meta.iter().map(|m| m.client_id).zip(weights).collect())
}

pub fn aggregate_lfedavg(
    updates: &[ClientUpdate],
    config: &AggregatorConfig,
) -> Result<(ParamVector, AggregationReport)> {
    let sorted = sorted_updates(updates)?;
    let meta: Vec<ClientMeta> = sorted.iter().map(|u| ClientMeta::from(*u)).collect();
    let weights = lfedavg_weights(
        &meta,
        config.alpha,
        config.loss_floor,
        config.normalize_loss_weights_first,
    )?;
    let coefficients: Vec<f64> = weights.iter().map(|(_, w)| *w).collect();
    let global = combine(&sorted, &coefficients)?;
    let report = AggregationReport {
        strategy: Strategy::LFedavg,
        round: 0,
        weights: Some(weights.into_iter().collect()),
        scores: None,
        selected_client: None,
        params_digest: global.digest(),
    };
    Ok((global, report))
}

/// Dispatches on `config.strategy` and stamps the round into the report.
pub fn aggregate(
    updates: &[ClientUpdate],
    config: &AggregatorConfig,
    round: u32,
) -> Result<(ParamVector, AggregationReport)> {
    config.validate()?;
    let (global, mut report) = match config.strategy {
        Strategy::FedavgUniform => aggregate_fedavg(updates, false)?,
        Strategy::FedavgWeighted => aggregate_fedavg(updates, true)?,
        Strategy::Krum => aggregate_krum(updates, config.fault_tolerance)?,
        Strategy::LFedavg => aggregate_lfedavg(updates, config)?,
    };
    report.round = round;
    Ok((global, report))
}
