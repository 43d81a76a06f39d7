//! Simulated clients: data partitioning, local training, and Byzantine
//! adversary wrappers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::ClientUpdate;
use crate::model::{CaptionModel, ModelError, Sample};
use crate::param::{ParamError, ParamVector};
use crate::seed::mix;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot partition an empty dataset")]
    EmptyDataset,
    #[error("{clients} clients but only {samples} samples")]
    TooManyClients { clients: usize, samples: usize },
    #[error("invalid partition spec: {0}")]
    InvalidPartition(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("client has no training data")]
    NoTrainingData,
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("non-finite optimizer input")]
    NonFiniteInput,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Partitioning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub ratios: Vec<f64>,
    pub seed: u64,
    pub shuffle: bool,
    /// 0 gives IID shards; 1 sorts samples by class before cutting shards.
    #[serde(default)]
    pub class_skew: f64,
}

/// Training split sizes per client.
pub const DEFAULT_TRAIN_RATIOS: [f64; 4] = [1655.0, 1241.0, 828.0, 414.0];
/// Validation split sizes per client.
pub const DEFAULT_VALIDATION_RATIOS: [f64; 4] = [237.0, 178.0, 117.0, 60.0];

impl PartitionSpec {
    pub fn new(ratios: Vec<f64>, seed: u64) -> Self {
        Self {
            ratios,
            seed,
            shuffle: true,
            class_skew: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(ClientError::InvalidPartition("no ratios".into()));
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(ClientError::InvalidPartition(
                "ratios must be positive and finite".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.class_skew) {
            return Err(ClientError::InvalidPartition(
                "class_skew must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items; every share gets at least one.
pub fn partition_sizes(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(ClientError::EmptyDataset);
    }
    if n < ratios.len() {
        return Err(ClientError::TooManyClients {
            clients: ratios.len(),
            samples: n,
        });
    }
    let total: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    // Tiny ratios can round to zero; borrow from the largest share.
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..sizes.len())
            .max_by_key(|&i| (sizes[i], usize::MAX - i))
            .unwrap();
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    Ok(sizes)
}

/// Splits `samples` into disjoint shards sized by `spec.ratios`.
pub fn partition<T: Clone>(samples: &[T], spec: &PartitionSpec) -> Result<Vec<Vec<T>>> {
    partition_by(samples, spec, |_| 0)
}

/// Like [`partition`], with `class_of` feeding the class-skew knob.
pub fn partition_by<T: Clone>(
    samples: &[T],
    spec: &PartitionSpec,
    class_of: impl Fn(&T) -> usize,
) -> Result<Vec<Vec<T>>> {
    spec.validate()?;
    let sizes = partition_sizes(samples.len(), &spec.ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if spec.class_skew > 0.0 {
        let classes = samples.iter().map(&class_of).max().unwrap_or(0) as f64 + 1.0;
        let keys: Vec<f64> = samples
            .iter()
            .map(|s| {
                let u: f64 = rng.random();
                if rng.random_bool(spec.class_skew) {
                    class_of(s) as f64 + u
                } else {
                    u * classes
                }
            })
            .collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    } else if spec.shuffle {
        order.shuffle(&mut rng);
    }
    let mut shards = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        shards.push(
            order[start..start + size]
                .iter()
                .map(|&i| samples[i].clone())
                .collect(),
        );
        start += size;
    }
    Ok(shards)
}

// ---------------------------------------------------------------------------
// Optimizers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_round: 3,
            batch_size: 8,
            optimizer: OptimizerKind::Adamw,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 {
            return Err(ClientError::InvalidConfig(
                "epochs_per_round must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(ClientError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ClientError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(ClientError::InvalidConfig(
                "weight_decay must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// AdamW hyperparameters. `beta1`, `beta2` and `eps` default to 0.9, 0.999, 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWHyper {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One in-place AdamW step. `step` is 1-based.
///
/// Decay is decoupled: `p *= 1 - lr * wd`, then
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    moment1: &mut [f64],
    moment2: &mut [f64],
    step: u64,
    hp: &AdamWHyper,
) -> Result<()> {
    assert!(step >= 1, "AdamW steps are 1-based");
    let n = params.len();
    assert!(grads.len() == n && moment1.len() == n && moment2.len() == n);
    if grads.iter().chain(params.iter()).any(|x| !x.is_finite()) {
        return Err(ClientError::NonFiniteInput);
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    let decay = 1.0 - hp.learning_rate * hp.weight_decay;
    for i in 0..n {
        let g = grads[i];
        moment1[i] = hp.beta1 * moment1[i] + (1.0 - hp.beta1) * g;
        moment2[i] = hp.beta2 * moment2[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = moment1[i] / bc1;
        let v_hat = moment2[i] / bc2;
        params[i] = params[i] * decay - hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Optimizer state for one local round. Moments start at zero.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        learning_rate: f64,
        weight_decay: f64,
    },
    AdamW {
        hp: AdamWHyper,
        moment1: Vec<f64>,
        moment2: Vec<f64>,
        step: u64,
    },
}

impl Optimizer {
    pub fn new(cfg: &LocalTrainConfig, n: usize) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                learning_rate: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
            },
            OptimizerKind::Adamw => Optimizer::AdamW {
                hp: AdamWHyper::new(cfg.learning_rate, cfg.weight_decay),
                moment1: vec![0.0; n],
                moment2: vec![0.0; n],
                step: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self {
            Optimizer::Sgd {
                learning_rate,
                weight_decay,
            } => {
                let decay = 1.0 - *learning_rate * *weight_decay;
                for (p, g) in params.iter_mut().zip(grads) {
                    *p = *p * decay - *learning_rate * g;
                }
                Ok(())
            }
            Optimizer::AdamW {
                hp,
                moment1,
                moment2,
                step,
            } => {
                *step += 1;
                adamw_step(params, grads, moment1, moment2, *step, hp)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Local training

/// A client's private shard.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainOutcome {
    pub params: ParamVector,
    /// Batch loss before each optimizer step.
    pub train_trace: Vec<LossRecord>,
    /// Mean validation loss after each epoch, 1-based epoch order.
    pub epoch_val_losses: Vec<f64>,
    /// Validation loss after the final epoch.
    pub validation_loss: f64,
}

/// Runs `epochs_per_round` passes over the shard. Batch order per epoch is a
/// shuffle seeded by `(cfg.seed, epoch)`; the final short batch is kept.
/// Optimizer state starts fresh on every call.
///
/// Validation loss is measured on `data.validation`, or on the training shard
/// when the client has no validation samples.
pub fn local_train<M: CaptionModel + ?Sized>(
    model: &M,
    params: &ParamVector,
    data: &ClientData,
    cfg: &LocalTrainConfig,
) -> Result<LocalTrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(ClientError::NoTrainingData);
    }
    if params.manifest() != model.manifest().as_slice() {
        return Err(ModelError::ManifestMismatch.into());
    }
    let val_set: Vec<&Sample> = if data.validation.is_empty() {
        data.train.iter().collect()
    } else {
        data.validation.iter().collect()
    };
    let mut current = params.clone();
    let mut optimizer = Optimizer::new(cfg, params.len());
    let mut trace = Vec::new();
    let mut epoch_val_losses = Vec::with_capacity(cfg.epochs_per_round);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs_per_round {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (loss, grad) = match model.loss_and_gradient(&current, &batch) {
                Ok(lg) => lg,
                Err(ModelError::NonFiniteLoss | ModelError::NonFiniteGradient) => {
                    return Err(ClientError::Divergence { step })
                }
                Err(e) => return Err(e.into()),
            };
            trace.push(LossRecord {
                step,
                epoch,
                train_loss: loss,
            });
            let mut values = current.into_values();
            optimizer
                .step(&mut values, grad.values())
                .map_err(|_| ClientError::Divergence { step })?;
            current = params
                .with_values(values)
                .map_err(|_| ClientError::Divergence { step })?;
        }
        let val = model
            .loss(&current, &val_set)
            .map_err(|_| ClientError::Divergence { step })?;
        epoch_val_losses.push(val);
    }
    let validation_loss = *epoch_val_losses.last().expect("at least one epoch");
    Ok(LocalTrainOutcome {
        params: current,
        train_trace: trace,
        epoch_val_losses,
        validation_loss,
    })
}

// ---------------------------------------------------------------------------
// Adversaries

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AdversaryMode {
    #[default]
    Honest,
    Scale {
        factor: f64,
    },
    GaussianNoise {
        sigma: f64,
    },
    SignFlip,
}

/// Corrupts an update's parameters. Metadata is passed through untouched.
pub fn apply_adversary(
    update: &ClientUpdate,
    mode: AdversaryMode,
    seed: u64,
) -> Result<ClientUpdate, ParamError> {
    let values: Vec<f64> = match mode {
        AdversaryMode::Honest => return Ok(update.clone()),
        AdversaryMode::Scale { factor } => {
            update.params.values().iter().map(|v| v * factor).collect()
        }
        AdversaryMode::SignFlip => update.params.values().iter().map(|v| -v).collect(),
        AdversaryMode::GaussianNoise { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma.abs()).expect("finite sigma");
            update
                .params
                .values()
                .iter()
                .map(|v| v + normal.sample(&mut rng))
                .collect()
        }
    };
    Ok(ClientUpdate {
        params: update.params.with_values(values)?,
        ..update.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SyntheticTaskSpec, ToyCaptioner};
    use crate::param::TensorSpec;
    use proptest::prelude::*;

    #[test]
    fn table_one_sizes() {
        let data: Vec<usize> = (0..4138).collect();
        let shards =
            partition(&data, &PartitionSpec::new(DEFAULT_TRAIN_RATIOS.to_vec(), 1)).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![1655, 1241, 828, 414]);
        let val = partition_sizes(592, &DEFAULT_VALIDATION_RATIOS).unwrap();
        assert_eq!(val, vec![237, 178, 117, 60]);
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(partition_sizes(8, &[1.0, 1.0]).unwrap(), vec![4, 4]);
        assert_eq!(
            partition_sizes(10, &[4.0, 3.0, 2.0, 1.0]).unwrap(),
            vec![4, 3, 2, 1]
        );
        // 7 * {1/3, 1/3, 1/3} = 2.33 each: one extra goes to the first.
        assert_eq!(partition_sizes(7, &[1.0, 1.0, 1.0]).unwrap(), vec![3, 2, 2]);
        // 5 * {0.5, 0.3, 0.2} = {2.5, 1.5, 1.0}: remainders tie, lowest index first.
        assert_eq!(partition_sizes(5, &[5.0, 3.0, 2.0]).unwrap(), vec![3, 1, 1]);
        // A vanishing ratio still gets one sample.
        assert_eq!(partition_sizes(4, &[1000.0, 1.0]).unwrap(), vec![3, 1]);
    }

    #[test]
    fn partition_errors() {
        let spec = PartitionSpec::new(vec![1.0, 1.0, 1.0], 0);
        assert!(matches!(
            partition::<u8>(&[], &spec),
            Err(ClientError::EmptyDataset)
        ));
        assert!(matches!(
            partition(&[1u8, 2], &spec),
            Err(ClientError::TooManyClients {
                clients: 3,
                samples: 2
            })
        ));
    }

    #[test]
    fn class_skew_concentrates_classes() {
        let data: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let mut spec = PartitionSpec::new(vec![1.0; 4], 3);
        spec.class_skew = 1.0;
        let shards = partition_by(&data, &spec, |c| *c).unwrap();
        for (k, shard) in shards.iter().enumerate() {
            assert!(shard.iter().all(|&c| c == k));
        }
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_cover(n in 1usize..300, k in 1usize..6, seed in any::<u64>(), skew in 0.0f64..1.0) {
            prop_assume!(n >= k);
            let data: Vec<usize> = (0..n).collect();
            let ratios: Vec<f64> = (0..k).map(|i| (i + 1) as f64).collect();
            let mut spec = PartitionSpec::new(ratios, seed);
            spec.class_skew = skew;
            let shards = partition_by(&data, &spec, |x| x % 3).unwrap();
            prop_assert_eq!(shards.len(), k);
            prop_assert!(shards.iter().all(|s| !s.is_empty()));
            let mut all: Vec<usize> = shards.concat();
            all.sort_unstable();
            prop_assert_eq!(all, data);
        }
    }

    /// Scalar AdamW written out step by step.
    fn scalar_adamw(p: f64, g: f64, m: f64, v: f64, t: i32, lr: f64, wd: f64) -> (f64, f64, f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let p = p - lr * wd * p;
        let m = b1 * m + (1.0 - b1) * g;
        let v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        (p - lr * mh / (vh.sqrt() + eps), m, v)
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        let hp = AdamWHyper::new(1e-2, 0.1);
        let mut p = vec![0.5, -1.25, 3.0];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        let mut reference: Vec<(f64, f64, f64)> = p.iter().map(|&x| (x, 0.0, 0.0)).collect();
        let grads = [[0.1, -0.3, 2.0], [0.05, 0.4, -1.0], [-0.2, 0.0, 0.7]];
        for (t, g) in grads.iter().enumerate() {
            adamw_step(&mut p, g, &mut m, &mut v, t as u64 + 1, &hp).unwrap();
            for (i, r) in reference.iter_mut().enumerate() {
                *r = scalar_adamw(r.0, g[i], r.1, r.2, t as i32 + 1, 1e-2, 0.1);
                assert!((p[i] - r.0).abs() <= 1e-12 * r.0.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adamw_zero_gradient_cases() {
        let hp = AdamWHyper::new(0.1, 0.0);
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &hp).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!((m.clone(), v.clone()), (vec![0.0; 2], vec![0.0; 2]));

        let hp = AdamWHyper::new(0.1, 0.5);
        for t in 1..=3 {
            let before = p.clone();
            adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, t, &hp).unwrap();
            for (a, b) in p.iter().zip(&before) {
                assert_eq!(*a, b * (1.0 - 0.1 * 0.5));
            }
        }
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let hp = AdamWHyper::new(0.1, 0.0);
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        assert!(matches!(
            adamw_step(&mut p, &[f64::NAN], &mut m, &mut v, 1, &hp),
            Err(ClientError::NonFiniteInput)
        ));
    }

    proptest! {
        #[test]
        fn adamw_without_momentum_is_sign_sgd(g in prop::collection::vec(-10.0f64..10.0, 1..20), lr in 1e-4f64..1.0) {
            let hp = AdamWHyper { beta1: 0.0, beta2: 0.0, ..AdamWHyper::new(lr, 0.0) };
            let start: Vec<f64> = (0..g.len()).map(|i| i as f64 * 0.1).collect();
            let mut p = start.clone();
            let (mut m, mut v) = (vec![0.0; g.len()], vec![0.0; g.len()]);
            adamw_step(&mut p, &g, &mut m, &mut v, 1, &hp).unwrap();
            for i in 0..g.len() {
                let expected = -lr * g[i] / (g[i].abs() + 1e-8);
                let got = p[i] - start[i];
                prop_assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }
    }

    fn tiny_task() -> (ToyCaptioner, ClientData) {
        let spec = SyntheticTaskSpec {
            feature_dim: 4,
            vocab_size: 6,
            report_length: 3,
            min_report_length: 2,
            num_classes: 3,
            train_samples: 21,
            validation_samples: 6,
            test_samples: 0,
            seed: 5,
            ..Default::default()
        };
        let data = crate::model::synth_generate(&spec).unwrap();
        (
            spec.model(),
            ClientData {
                train: data.train,
                validation: data.validation,
            },
        )
    }

    #[test]
    fn trace_has_epochs_times_batches_entries() {
        let (model, data) = tiny_task();
        let cfg = LocalTrainConfig {
            epochs_per_round: 3,
            batch_size: 8,
            ..Default::default()
        };
        let out = local_train(&model, &model.init_params(), &data, &cfg).unwrap();
        // 21 samples, batch 8: 3 batches (the last one short) per epoch.
        assert_eq!(out.train_trace.len(), 9);
        assert_eq!(out.epoch_val_losses.len(), 3);
        assert_eq!(out.validation_loss, out.epoch_val_losses[2]);
        assert_eq!(out.train_trace.last().unwrap().epoch, 3);
    }

    #[test]
    fn training_is_deterministic() {
        let (model, data) = tiny_task();
        let cfg = LocalTrainConfig {
            seed: 9,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let a = local_train(&model, &model.init_params(), &data, &cfg).unwrap();
        let b = local_train(&model, &model.init_params(), &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vanishing_learning_rate_keeps_params() {
        let (model, data) = tiny_task();
        let start = ParamVector::new(
            model.manifest(),
            (0..model
                .manifest()
                .iter()
                .map(TensorSpec::numel)
                .sum::<usize>())
                .map(|i| 1.0 + (i % 7) as f64 * 0.1)
                .collect(),
        )
        .unwrap();
        let cfg = LocalTrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-300,
            batch_size: data.train.len(),
            ..Default::default()
        };
        let out = local_train(&model, &start, &data, &cfg).unwrap();
        assert_eq!(out.params, start);
        let first = out.train_trace[0].train_loss;
        // Full-batch losses differ only by summation order after each shuffle.
        assert!(out
            .train_trace
            .iter()
            .all(|r| (r.train_loss - first).abs() <= 1e-12 * first.abs()));
    }

    #[test]
    fn single_sgd_step_matches_closed_form() {
        // One sample, vocab 2, dim 1, length 1: the step is -lr * grad.
        let model = ToyCaptioner::new(1, 2, 1);
        let sample = Sample {
            id: 0,
            class: 0,
            features: vec![2.0],
            reference: vec![1],
        };
        let start = ParamVector::new(model.manifest(), vec![0.1, -0.2, 0.3, 0.05]).unwrap();
        let lr = 0.5;
        let cfg = LocalTrainConfig {
            epochs_per_round: 1,
            batch_size: 1,
            optimizer: OptimizerKind::Sgd,
            learning_rate: lr,
            weight_decay: 0.0,
            seed: 0,
        };
        let data = ClientData {
            train: vec![sample.clone()],
            validation: vec![],
        };
        let out = local_train(&model, &start, &data, &cfg).unwrap();
        let v = start.values();
        let (z0, z1) = (v[0] * 2.0 + v[2], v[1] * 2.0 + v[3]);
        let p0 = 1.0 / (1.0 + (z1 - z0).exp());
        let grad = [p0 * 2.0, -p0 * 2.0, p0, -p0];
        for i in 0..4 {
            assert!((out.params.values()[i] - (v[i] - lr * grad[i])).abs() < 1e-15);
        }
    }

    /// Delegates to the toy captioner but reports a non-finite loss on call `fail_at`.
    struct FailingModel {
        inner: ToyCaptioner,
        fail_at: usize,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl CaptionModel for FailingModel {
        fn manifest(&self) -> Vec<TensorSpec> {
            self.inner.manifest()
        }
        fn loss(&self, p: &ParamVector, b: &[&Sample]) -> crate::model::Result<f64> {
            self.inner.loss(p, b)
        }
        fn loss_and_gradient(
            &self,
            p: &ParamVector,
            b: &[&Sample],
        ) -> crate::model::Result<(f64, ParamVector)> {
            let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
            if n == self.fail_at {
                return Err(ModelError::NonFiniteLoss);
            }
            self.inner.loss_and_gradient(p, b)
        }
        fn decode(&self, p: &ParamVector, x: &[f64]) -> crate::model::Result<Vec<u32>> {
            self.inner.decode(p, x)
        }
    }

    #[test]
    fn divergence_reports_step() {
        let (inner, data) = tiny_task();
        let model = FailingModel {
            inner,
            fail_at: 5,
            calls: Default::default(),
        };
        let err = local_train(
            &model,
            &model.init_params(),
            &data,
            &LocalTrainConfig::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, ClientError::Divergence { step: 5 }),
            "{err:?}"
        );
    }

    fn update(values: Vec<f64>) -> ClientUpdate {
        ClientUpdate::new(4, ParamVector::from_flat(values).unwrap(), 414, 0.7).unwrap()
    }

    #[test]
    fn adversary_modes() {
        let u = update(vec![1.0, -2.0, 0.5]);
        assert_eq!(apply_adversary(&u, AdversaryMode::Honest, 0).unwrap(), u);
        let flipped = apply_adversary(&u, AdversaryMode::SignFlip, 0).unwrap();
        let scaled = apply_adversary(&u, AdversaryMode::Scale { factor: -1.0 }, 0).unwrap();
        assert_eq!(flipped, scaled);
        assert_eq!(flipped.params.values(), &[-1.0, 2.0, -0.5]);
        let noisy = apply_adversary(&u, AdversaryMode::GaussianNoise { sigma: 1.0 }, 3).unwrap();
        assert_eq!(
            noisy,
            apply_adversary(&u, AdversaryMode::GaussianNoise { sigma: 1.0 }, 3).unwrap()
        );
        assert_ne!(noisy.params, u.params);
        assert_eq!((noisy.data_length, noisy.validation_loss), (414, 0.7));
    }

    #[test]
    fn adversary_mode_serde() {
        let m: AdversaryMode = serde_json::from_str(r#"{"mode":"scale","factor":50.0}"#).unwrap();
        assert_eq!(m, AdversaryMode::Scale { factor: 50.0 });
        let m: AdversaryMode = serde_json::from_str(r#"{"mode":"sign_flip"}"#).unwrap();
        assert_eq!(m, AdversaryMode::SignFlip);
    }
}
