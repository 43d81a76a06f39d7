//! Lexical overlap metrics: ROUGE-1..4 F1, ROUGE-L F1 and corpus BLEU.
//!
//! Conventions: lowercase whitespace tokenization without stemming, ROUGE
//! macro-averaged over sentence pairs, BLEU pooled over the corpus. Any ratio
//! with a zero denominator is 0.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("candidate and reference lists differ in length ({candidates} vs {references})")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("no sentence pairs to evaluate")]
    EmptyInput,
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub type TokenSequence = Vec<String>;

/// Lowercases, splits on Unicode whitespace, and trims non-alphanumeric
/// characters from both ends of every token. Empty tokens are dropped.
pub fn tokenize(text: &str) -> TokenSequence {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let precision = ratio(overlap, candidate_total);
        let recall = ratio(overlap, reference_total);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap plus candidate and reference n-gram totals.
fn clipped_overlap<T: Eq + Hash>(
    candidate: &[T],
    reference: &[T],
    n: usize,
) -> (usize, usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (
        overlap,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    let (overlap, c, r) = clipped_overlap(candidate, reference, n);
    Ok(Prf::from_counts(overlap, c, r))
}

/// Longest common subsequence length, O(|a| * |b|) time, O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

/// Pooled BLEU statistics over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_length: usize,
    pub reference_length: usize,
}

impl BleuStats {
    pub fn collect<T: Eq + Hash, S: AsRef<[T]>>(
        candidates: &[S],
        references: &[S],
        max_n: usize,
    ) -> Result<Self> {
        if candidates.len() != references.len() {
            return Err(MetricsError::LengthMismatch {
                candidates: candidates.len(),
                references: references.len(),
            });
        }
        if max_n == 0 {
            return Err(MetricsError::ZeroOrder);
        }
        let mut stats = BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            candidate_length: 0,
            reference_length: 0,
        };
        for (c, r) in candidates.iter().zip(references) {
            let (c, r) = (c.as_ref(), r.as_ref());
            stats.candidate_length += c.len();
            stats.reference_length += r.len();
            for n in 1..=max_n {
                let (m, total, _) = clipped_overlap(c, r, n);
                stats.matches[n - 1] += m;
                stats.totals[n - 1] += total;
            }
        }
        Ok(stats)
    }

    /// Geometric mean of the n-gram precisions times the brevity penalty.
    /// Orders n >= 2 with no matches use `1 / (total + 1)`.
    pub fn score(&self) -> f64 {
        if self.candidate_length == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let max_n = self.matches.len();
        let log_sum: f64 = (0..max_n)
            .map(|i| {
                let p = if i > 0 && self.matches[i] == 0 {
                    1.0 / (self.totals[i] as f64 + 1.0)
                } else {
                    self.matches[i] as f64 / self.totals[i] as f64
                };
                p.ln()
            })
            .sum();
        let (c, r) = (self.candidate_length as f64, self.reference_length as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        bp * (log_sum / max_n as f64).exp()
    }
}

/// Corpus BLEU with a single reference per candidate.
pub fn bleu<T: Eq + Hash, S: AsRef<[T]>>(
    candidates: &[S],
    references: &[S],
    max_n: usize,
) -> Result<f64> {
    Ok(BleuStats::collect(candidates, references, max_n)?.score())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub lowercase: bool,
    pub stemming: bool,
    pub rouge_average: String,
    pub bleu_max_n: usize,
    pub bleu_smoothing: String,
}

impl MetricSettings {
    fn new(bleu_max_n: usize) -> Self {
        Self {
            lowercase: true,
            stemming: false,
            rouge_average: "macro".into(),
            bleu_max_n,
            bleu_smoothing: "add-one-on-zero-for-n>=2".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge3: Prf,
    pub rouge4: Prf,
    pub rouge_l: Prf,
    pub bleu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusScores {
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rouge3_f1: f64,
    pub rouge4_f1: f64,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: f64,
    pub bleu: f64,
}

impl CorpusScores {
    pub const CSV_HEADER: [&'static str; 6] = [
        "rouge1_f1",
        "rouge2_f1",
        "rouge3_f1",
        "rouge4_f1",
        "rougeL_f1",
        "bleu",
    ];

    pub fn as_row(&self) -> [f64; 6] {
        [
            self.rouge1_f1,
            self.rouge2_f1,
            self.rouge3_f1,
            self.rouge4_f1,
            self.rouge_l_f1,
            self.bleu,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub corpus: CorpusScores,
    pub pairs: Vec<PairScores>,
    pub settings: MetricSettings,
}

pub fn evaluate_corpus(pairs: &[(TokenSequence, TokenSequence)]) -> Result<MetricReport> {
    evaluate_corpus_with(pairs, 4)
}

pub fn evaluate_corpus_with(
    pairs: &[(TokenSequence, TokenSequence)],
    bleu_max_n: usize,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (c, r) in pairs {
        per_pair.push(PairScores {
            rouge1: rouge_n(c, r, 1)?,
            rouge2: rouge_n(c, r, 2)?,
            rouge3: rouge_n(c, r, 3)?,
            rouge4: rouge_n(c, r, 4)?,
            rouge_l: rouge_l(c, r),
            bleu: bleu(std::slice::from_ref(c), std::slice::from_ref(r), bleu_max_n)?,
        });
    }
    let n = per_pair.len() as f64;
    let mean = |f: &dyn Fn(&PairScores) -> f64| per_pair.iter().map(f).sum::<f64>() / n;
    let candidates: Vec<&[String]> = pairs.iter().map(|(c, _)| c.as_slice()).collect();
    let references: Vec<&[String]> = pairs.iter().map(|(_, r)| r.as_slice()).collect();
    let corpus = CorpusScores {
        rouge1_f1: mean(&|p| p.rouge1.f1),
        rouge2_f1: mean(&|p| p.rouge2.f1),
        rouge3_f1: mean(&|p| p.rouge3.f1),
        rouge4_f1: mean(&|p| p.rouge4.f1),
        rouge_l_f1: mean(&|p| p.rouge_l.f1),
        bleu: bleu(&candidates, &references, bleu_max_n)?,
    };
    Ok(MetricReport {
        corpus,
        pairs: per_pair,
        settings: MetricSettings::new(bleu_max_n),
    })
}
