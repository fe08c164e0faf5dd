//! Sentence encoders.
//!
//! The toy encoder is a frozen hashed bag-of-words projection: lowercase
//! tokens are hashed into `vocab_buckets` counts, projected to `d_s` by a
//! seeded uniform random matrix, then L2-normalized. A transformer sentence
//! encoder can be plugged in through [`SentenceDelegate`].

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SentRef, Sentence};
use crate::error::{Error, Result};
use crate::linalg::{l2_norm, Matrix};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Toy,
    TransformerAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_s: usize,
    pub vocab_buckets: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Toy,
            d_s: 128,
            vocab_buckets: 4096,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn toy(d_s: usize, seed: u64) -> Self {
        Self {
            d_s,
            seed,
            vocab_buckets: 4096.max(d_s),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_s < 2 {
            return Err(Error::EncoderConfig(format!("d_s must be >= 2, got {}", self.d_s)));
        }
        if self.kind == EncoderKind::Toy && self.vocab_buckets < self.d_s {
            return Err(Error::EncoderConfig(format!(
                "vocab_buckets ({}) must be >= d_s ({})",
                self.vocab_buckets, self.d_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub sent_ref: SentRef,
}

/// A named trainable tensor exposed by an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// External sentence encoder (e.g. a fine-tunable transformer).
///
/// Implementations own their parameters and optimizer. The trainer hands
/// back `d loss / d embedding` for every encoded sentence through
/// [`SentenceDelegate::backward`] so the encoder can be fine-tuned jointly.
pub trait SentenceDelegate: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
    fn parameters(&self) -> Vec<ParamTensor>;
    fn backward(&self, _texts: &[&str], _grads: &[Vec<f64>], _lr: f64) -> Result<()> {
        Ok(())
    }
    /// Whether `encode` may be called concurrently from several threads.
    fn concurrent_batches(&self) -> bool {
        false
    }
}

/// Configured encoder with its runtime state.
#[derive(Clone)]
pub struct Encoder {
    config: EncoderConfig,
    backend: Backend,
}

#[derive(Clone)]
enum Backend {
    Toy(Arc<ToyProjection>),
    Adapter(Arc<dyn SentenceDelegate>),
}

impl fmt::Debug for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let backend = match self.backend {
            Backend::Toy(_) => "toy",
            Backend::Adapter(_) => "adapter",
        };
        f.debug_struct("Encoder")
            .field("config", &self.config)
            .field("backend", &backend)
            .finish()
    }
}

struct ToyProjection {
    // bucket-major: column `b` of the d_s × vocab_buckets projection
    columns: Matrix,
}

impl ToyProjection {
    fn new(cfg: &EncoderConfig) -> Self {
        let mut rng = seed::rng(seed::derive(cfg.seed, "toy-encoder"));
        let scale = (3.0 / cfg.d_s as f64).sqrt();
        let data = (0..cfg.vocab_buckets * cfg.d_s)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Self {
            columns: Matrix::from_vec(cfg.vocab_buckets, cfg.d_s, data),
        }
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub fn bucket_of(token: &str, vocab_buckets: usize) -> usize {
    (seed::fnv1a64(token.as_bytes()) % vocab_buckets as u64) as usize
}

impl Encoder {
    /// Creates an encoder. `TransformerAdapter` configs fail here; use
    /// [`Encoder::with_delegate`] for those.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        match config.kind {
            EncoderKind::Toy => Ok(Self {
                backend: Backend::Toy(Arc::new(ToyProjection::new(&config))),
                config,
            }),
            EncoderKind::TransformerAdapter => Err(Error::AdapterUnavailable),
        }
    }

    pub fn with_delegate(mut config: EncoderConfig, delegate: Arc<dyn SentenceDelegate>) -> Result<Self> {
        config.kind = EncoderKind::TransformerAdapter;
        config.d_s = delegate.dim();
        config.validate()?;
        Ok(Self {
            config,
            backend: Backend::Adapter(delegate),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.d_s
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.backend, Backend::Adapter(_))
    }

    pub fn delegate(&self) -> Option<&Arc<dyn SentenceDelegate>> {
        match &self.backend {
            Backend::Adapter(d) => Some(d),
            Backend::Toy(_) => None,
        }
    }

    pub fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        match &self.backend {
            Backend::Toy(proj) => Ok(texts.iter().map(|t| self.toy_vector(proj, t)).collect()),
            Backend::Adapter(d) => {
                let out = d.encode(texts)?;
                for v in &out {
                    if v.len() != self.config.d_s {
                        return Err(Error::DimensionMismatch {
                            expected: self.config.d_s,
                            actual: v.len(),
                        });
                    }
                    if !v.iter().all(|x| x.is_finite()) {
                        return Err(Error::NonFinite("sentence embedding"));
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn encode(&self, sentences: &[Sentence]) -> Result<Vec<SentenceEmbedding>> {
        let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
        let vecs = self.encode_texts(&texts)?;
        Ok(vecs
            .into_iter()
            .zip(sentences)
            .map(|(vector, s)| SentenceEmbedding {
                vector,
                sent_ref: s.sent_ref(),
            })
            .collect())
    }

    fn toy_vector(&self, proj: &ToyProjection, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.config.d_s];
        for tok in tokenize(text) {
            let col = proj.columns.row(bucket_of(&tok, self.config.vocab_buckets));
            for (vi, ci) in v.iter_mut().zip(col) {
                *vi += ci;
            }
        }
        let norm = l2_norm(&v);
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    /// Parameters updated by end-to-end fine-tuning. Empty for the frozen toy
    /// featurizer.
    pub fn trainable_params(&self) -> Vec<ParamTensor> {
        match &self.backend {
            Backend::Toy(_) => Vec::new(),
            Backend::Adapter(d) => d.parameters(),
        }
    }

    /// Projection column for a bucket (toy encoder only).
    pub fn toy_column(&self, bucket: usize) -> Option<&[f64]> {
        match &self.backend {
            Backend::Toy(p) => Some(p.columns.row(bucket)),
            Backend::Adapter(_) => None,
        }
    }
}

/// Convenience wrapper matching the module-level operation.
pub fn encode(sentences: &[Sentence], config: &EncoderConfig) -> Result<Vec<SentenceEmbedding>> {
    Encoder::new(config.clone())?.encode(sentences)
}

/// Trainable parameter set for a config. Adapter configs without a
/// registered delegate report [`Error::AdapterUnavailable`].
pub fn trainable_params(config: &EncoderConfig) -> Result<Vec<ParamTensor>> {
    Ok(Encoder::new(config.clone())?.trainable_params())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(text: &str, i: usize) -> Sentence {
        Sentence {
            sent_id: i,
            para_idx: 0,
            text: text.into(),
        }
    }

    #[test]
    fn identical_text_identical_vector() {
        let cfg = EncoderConfig::toy(16, 1);
        let e = encode(&[sent("same text", 0), sent("same text", 1)], &cfg).unwrap();
        assert_eq!(e[0].vector, e[1].vector);
        assert_eq!(e[1].sent_ref, SentRef { para: 0, idx: 1 });
    }

    #[test]
    fn adapter_without_delegate_is_capability_error() {
        let cfg = EncoderConfig {
            kind: EncoderKind::TransformerAdapter,
            ..EncoderConfig::default()
        };
        assert!(matches!(trainable_params(&cfg), Err(Error::AdapterUnavailable)));
    }

    #[test]
    fn toy_has_no_trainable_params() {
        assert!(trainable_params(&EncoderConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(EncoderConfig { d_s: 1, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { d_s: 64, vocab_buckets: 32, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn punctuation_only_sentence_encodes_to_zero() {
        let cfg = EncoderConfig::toy(8, 0);
        let e = encode(&[sent("...", 0)], &cfg).unwrap();
        assert!(e[0].vector.iter().all(|&x| x == 0.0));
    }
}
