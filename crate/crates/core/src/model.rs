//! Synthetic image-to-report task and a position-wise linear captioner.
//!
//! Each sample is a feature vector (the "image embedding") paired with a
//! fixed-length token sequence. Position `t` of the captioner is an
//! independent softmax classifier `logits_t = W_t x + b_t`, so loss and
//! gradient have closed forms that can be checked against finite differences.
//!
//! Token id 0 is reserved for padding. Padded positions do not contribute to
//! the loss and are stripped before text metrics are computed.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::param::{ParamError, ParamVector, TensorSpec};

pub const PAD: u32 = 0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter manifest does not match the model")]
    ManifestMismatch,
    #[error("sample {sample_id} has {found} features/tokens, model expects {expected}")]
    SampleShape {
        sample_id: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub class: usize,
    pub features: Vec<f64>,
    /// Reference tokens, exactly `report_length` long, PAD-filled at the tail.
    pub reference: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub report_length: usize,
    /// Shortest class template; templates are PAD-filled up to `report_length`.
    pub min_report_length: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    /// Per-position probability that a reference token is swapped for another.
    pub swap_rate: f64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            vocab_size: 24,
            report_length: 8,
            min_report_length: 6,
            num_classes: 4,
            noise_sigma: 0.5,
            swap_rate: 0.05,
            train_samples: 4138,
            validation_samples: 592,
            test_samples: 1180,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_owned()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must leave room for PAD plus one token");
        }
        if self.report_length == 0 {
            return bad("report_length must be at least 1");
        }
        if self.min_report_length == 0 || self.min_report_length > self.report_length {
            return bad("min_report_length must lie in 1..=report_length");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.swap_rate) {
            return bad("swap_rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn model(&self) -> ToyCaptioner {
        ToyCaptioner::new(self.feature_dim, self.vocab_size, self.report_length)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub templates: Vec<Vec<u32>>,
}

impl SyntheticDataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Generates train/validation/test splits. Sample ids run consecutively
/// across the three splits in that order.
pub fn synth_generate(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centroids: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| unit.sample(&mut rng))
                .collect()
        })
        .collect();
    let vocab = spec.vocab_size as u32;
    let templates: Vec<Vec<u32>> = (0..spec.num_classes)
        .map(|_| {
            let len = rng.random_range(spec.min_report_length..=spec.report_length);
            (0..spec.report_length)
                .map(|t| {
                    if t < len {
                        rng.random_range(1..vocab)
                    } else {
                        PAD
                    }
                })
                .collect()
        })
        .collect();

    let mut next_id = 0usize;
    let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let class = rng.random_range(0..spec.num_classes);
                let features = centroids[class]
                    .iter()
                    .map(|mu| {
                        if spec.noise_sigma > 0.0 {
                            mu + spec.noise_sigma * unit.sample(rng)
                        } else {
                            *mu
                        }
                    })
                    .collect();
                let reference = templates[class]
                    .iter()
                    .map(|&tok| {
                        if tok != PAD && vocab > 2 && rng.random_bool(spec.swap_rate) {
                            // Uniform over the other non-PAD tokens.
                            let r = rng.random_range(1..vocab - 1);
                            if r >= tok {
                                r + 1
                            } else {
                                r
                            }
                        } else {
                            tok
                        }
                    })
                    .collect();
                let id = next_id;
                next_id += 1;
                Sample {
                    id,
                    class,
                    features,
                    reference,
                }
            })
            .collect()
    };
    let train = split(spec.train_samples, &mut rng);
    let validation = split(spec.validation_samples, &mut rng);
    let test = split(spec.test_samples, &mut rng);
    Ok(SyntheticDataset {
        train,
        validation,
        test,
        templates,
    })
}

/// Writes `sample_id,class,feature_0..feature_{d-1},ref_tokens`.
pub fn write_samples_csv<'a>(
    path: &Path,
    samples: impl IntoIterator<Item = &'a Sample>,
    feature_dim: usize,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "sample_id,class")?;
    for j in 0..feature_dim {
        write!(out, ",feature_{j}")?;
    }
    writeln!(out, ",ref_tokens")?;
    for s in samples {
        write!(out, "{},{}", s.id, s.class)?;
        for v in &s.features {
            write!(out, ",{v:?}")?;
        }
        let toks: Vec<String> = s.reference.iter().map(u32::to_string).collect();
        writeln!(out, ",{}", toks.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

/// Drops PAD tokens.
pub fn strip_pad(tokens: &[u32]) -> Vec<u32> {
    tokens.iter().copied().filter(|&t| t != PAD).collect()
}

/// Renders PAD-stripped token ids as words (`w<id>`).
pub fn detokenize(tokens: &[u32]) -> String {
    strip_pad(tokens)
        .iter()
        .map(|t| format!("w{t}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// What the training loop needs from a model. Parameters travel as a
/// [`ParamVector`] whose manifest must equal [`CaptionModel::manifest`].
pub trait CaptionModel: Send + Sync {
    fn manifest(&self) -> Vec<TensorSpec>;

    fn loss(&self, params: &ParamVector, batch: &[&Sample]) -> Result<f64>;

    fn loss_and_gradient(
        &self,
        params: &ParamVector,
        batch: &[&Sample],
    ) -> Result<(f64, ParamVector)>;

    fn decode(&self, params: &ParamVector, features: &[f64]) -> Result<Vec<u32>>;

    fn init_params(&self) -> ParamVector {
        ParamVector::zeros(self.manifest())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyCaptioner {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub length: usize,
}

/// Softmax probabilities per (sample, position) from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `probs[s][t]` is empty for PAD positions.
    probs: Vec<Vec<Vec<f64>>>,
    count: usize,
}

impl ToyCaptioner {
    pub fn new(feature_dim: usize, vocab_size: usize, length: usize) -> Self {
        Self {
            feature_dim,
            vocab_size,
            length,
        }
    }

    fn weight_offset(&self, t: usize) -> usize {
        t * self.vocab_size * self.feature_dim
    }

    fn bias_offset(&self, t: usize) -> usize {
        self.length * self.vocab_size * self.feature_dim + t * self.vocab_size
    }

    fn check(&self, params: &ParamVector, batch: &[&Sample]) -> Result<()> {
        if params.manifest() != self.manifest().as_slice() {
            return Err(ModelError::ManifestMismatch);
        }
        for s in batch {
            if s.features.len() != self.feature_dim {
                return Err(ModelError::SampleShape {
                    sample_id: s.id,
                    expected: self.feature_dim,
                    found: s.features.len(),
                });
            }
            if s.reference.len() != self.length {
                return Err(ModelError::SampleShape {
                    sample_id: s.id,
                    expected: self.length,
                    found: s.reference.len(),
                });
            }
        }
        Ok(())
    }

    fn logits(&self, values: &[f64], t: usize, x: &[f64], out: &mut [f64]) {
        let (v, d) = (self.vocab_size, self.feature_dim);
        let w = &values[self.weight_offset(t)..self.weight_offset(t) + v * d];
        let b = &values[self.bias_offset(t)..self.bias_offset(t) + v];
        for (k, slot) in out.iter_mut().enumerate() {
            let row = &w[k * d..(k + 1) * d];
            *slot = b[k] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Mean cross-entropy over non-PAD (sample, position) pairs.
    /// A batch with no scored positions has loss 0.
    pub fn forward_loss(
        &self,
        params: &ParamVector,
        batch: &[&Sample],
    ) -> Result<(f64, ForwardCache)> {
        self.check(params, batch)?;
        let values = params.values();
        let mut logits = vec![0.0; self.vocab_size];
        let mut total = 0.0;
        let mut count = 0usize;
        let mut probs = Vec::with_capacity(batch.len());
        for s in batch {
            let mut per_pos = Vec::with_capacity(self.length);
            for t in 0..self.length {
                let target = s.reference[t];
                if target == PAD {
                    per_pos.push(Vec::new());
                    continue;
                }
                self.logits(values, t, &s.features, &mut logits);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                total += max + sum.ln() - logits[target as usize];
                count += 1;
                per_pos.push(exps.iter().map(|e| e / sum).collect());
            }
            probs.push(per_pos);
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        Ok((loss, ForwardCache { probs, count }))
    }

    /// Analytic gradient of [`ToyCaptioner::forward_loss`].
    pub fn gradient(&self, params: &ParamVector, batch: &[&Sample]) -> Result<ParamVector> {
        let (_, cache) = self.forward_loss(params, batch)?;
        self.backward(params, batch, &cache)
    }

    fn backward(
        &self,
        params: &ParamVector,
        batch: &[&Sample],
        cache: &ForwardCache,
    ) -> Result<ParamVector> {
        let mut grad = vec![0.0; params.len()];
        if cache.count > 0 {
            let scale = 1.0 / cache.count as f64;
            let d = self.feature_dim;
            for (s, per_pos) in batch.iter().zip(&cache.probs) {
                for (t, p) in per_pos.iter().enumerate() {
                    if p.is_empty() {
                        continue;
                    }
                    let target = s.reference[t] as usize;
                    let w_off = self.weight_offset(t);
                    let b_off = self.bias_offset(t);
                    for (k, &pk) in p.iter().enumerate() {
                        let dz = (pk - if k == target { 1.0 } else { 0.0 }) * scale;
                        grad[b_off + k] += dz;
                        let row = &mut grad[w_off + k * d..w_off + (k + 1) * d];
                        for (g, x) in row.iter_mut().zip(&s.features) {
                            *g += dz * x;
                        }
                    }
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteGradient);
        }
        Ok(params.with_values(grad)?)
    }

    /// Position-wise argmax; ties go to the lowest token id.
    pub fn greedy_decode(&self, params: &ParamVector, features: &[f64]) -> Result<Vec<u32>> {
        if params.manifest() != self.manifest().as_slice() {
            return Err(ModelError::ManifestMismatch);
        }
        if features.len() != self.feature_dim {
            return Err(ModelError::SampleShape {
                sample_id: usize::MAX,
                expected: self.feature_dim,
                found: features.len(),
            });
        }
        let mut logits = vec![0.0; self.vocab_size];
        Ok((0..self.length)
            .map(|t| {
                self.logits(params.values(), t, features, &mut logits);
                let mut best = 0;
                for (k, &z) in logits.iter().enumerate() {
                    if z > logits[best] {
                        best = k;
                    }
                }
                best as u32
            })
            .collect())
    }
}

impl CaptionModel for ToyCaptioner {
    /// `W_1..W_L` (each vocab x feature_dim, row-major) followed by `b_1..b_L`.
    fn manifest(&self) -> Vec<TensorSpec> {
        let (v, d) = (self.vocab_size as u32, self.feature_dim as u32);
        (1..=self.length)
            .map(|t| TensorSpec::new(format!("W_{t}"), vec![v, d]))
            .chain((1..=self.length).map(|t| TensorSpec::new(format!("b_{t}"), vec![v])))
            .collect()
    }

    fn loss(&self, params: &ParamVector, batch: &[&Sample]) -> Result<f64> {
        Ok(self.forward_loss(params, batch)?.0)
    }

    fn loss_and_gradient(
        &self,
        params: &ParamVector,
        batch: &[&Sample],
    ) -> Result<(f64, ParamVector)> {
        let (loss, cache) = self.forward_loss(params, batch)?;
        Ok((loss, self.backward(params, batch, &cache)?))
    }

    fn decode(&self, params: &ParamVector, features: &[f64]) -> Result<Vec<u32>> {
        self.greedy_decode(params, features)
    }
}
