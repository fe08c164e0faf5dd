//! The full detector: encoder, pairwise contradiction layer, top-K attention
//! pooling and classifier, with hand-written back-propagation.

use serde::{Deserialize, Serialize};

use crate::aggregator::{
    attend_backward, attend_features, rank_order, topk_indices, AblationFlags, AggParams,
    AttendTrace, Prediction, DEFAULT_K, DEFAULT_THRESHOLD,
};
use crate::corpus::Article;
use crate::encoder::{Encoder, EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, Matrix};
use crate::pcl::{
    contradiction_prob, enumerate_pair_indices, features_backward, features_from_transformed,
    PairScope, PairScore, PclParams,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_t: usize,
    pub d_a: usize,
    pub hidden: usize,
    pub k: usize,
    pub scope: PairScope,
    pub threshold: f64,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_t: 128,
            d_a: 64,
            hidden: 64,
            k: DEFAULT_K,
            scope: PairScope::Paragraph,
            threshold: DEFAULT_THRESHOLD,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidK);
        }
        if self.d_t == 0 || self.d_a == 0 || self.hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        self.ablation.validate()
    }

    pub fn effective_scope(&self) -> PairScope {
        if self.ablation.no_paragraph {
            PairScope::Article
        } else {
            self.scope
        }
    }

    pub fn feature_dim(&self) -> usize {
        if self.ablation.no_pcl {
            2 * self.d_t
        } else {
            3 * self.d_t
        }
    }
}

/// Gradient buffers with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub pcl: PclParams,
    pub agg: AggParams,
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.pcl.tensors();
        v.extend(self.agg.tensors());
        v
    }

    pub fn add(&mut self, other: &ModelGrads) {
        let mine: Vec<&mut Matrix> = self
            .pcl
            .tensors_mut()
            .into_iter()
            .chain(self.agg.tensors_mut())
            .collect();
        for (a, b) in mine.into_iter().zip(other.tensors()) {
            a.add_scaled(1.0, b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub pcl: PclParams,
    pub agg: AggParams,
}

/// Classifier input of one article.
#[derive(Debug, Clone)]
enum Pooled {
    Attention(AttendTrace),
    Concat(Vec<f64>),
    /// Zero-pair fallback: the zero vector.
    Empty(Vec<f64>),
}

impl Pooled {
    fn input(&self) -> &[f64] {
        match self {
            Pooled::Attention(t) => &t.output,
            Pooled::Concat(x) | Pooled::Empty(x) => x,
        }
    }
}

/// Every intermediate value of one forward pass.
#[derive(Debug, Clone)]
pub struct ArticlePass {
    pub embeddings: Vec<Vec<f64>>,
    pub transformed: Vec<Vec<f64>>,
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<PairScore>,
    /// Indices into `scores`, best first.
    pub selected: Vec<usize>,
    pub hidden_pre: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
    pooled: Pooled,
}

impl ArticlePass {
    pub fn classifier_input(&self) -> &[f64] {
        self.pooled.input()
    }

    pub fn attention_weights(&self) -> Option<&[f64]> {
        match &self.pooled {
            Pooled::Attention(t) => Some(&t.alpha),
            _ => None,
        }
    }
}

impl Model {
    pub const TENSOR_NAMES: [&'static str; 9] = [
        "pcl.w_t", "pcl.w_r", "agg.w_q", "agg.w_k", "agg.w_s", "agg.ffn.w1", "agg.ffn.b1",
        "agg.ffn.w2", "agg.ffn.b2",
    ];

    pub fn new(config: ModelConfig, encoder: Encoder, seed: u64) -> Result<Self> {
        config.validate()?;
        let d_s = encoder.dim();
        let mut rng = seed::rng(seed::derive(seed, "model-init"));
        let pcl = PclParams::new(d_s, config.d_t, &mut rng);
        let agg = Self::fresh_agg(&config, &mut seed::rng(seed::derive(seed, "agg-init")));
        let encoder = if config.ablation.no_sbert {
            Encoder::new(EncoderConfig {
                kind: EncoderKind::Toy,
                ..encoder.config().clone()
            })?
        } else {
            encoder
        };
        Ok(Self {
            config,
            encoder,
            pcl,
            agg,
        })
    }

    /// Convenience constructor with a toy encoder.
    pub fn toy(config: ModelConfig, encoder: EncoderConfig, seed: u64) -> Result<Self> {
        Self::new(config, Encoder::new(encoder)?, seed)
    }

    fn fresh_agg(config: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng) -> AggParams {
        let f = config.feature_dim();
        if config.ablation.no_sa {
            AggParams::new_concat(f, config.d_a, config.hidden, config.k, rng)
        } else {
            AggParams::new(f, config.d_a, config.hidden, rng)
        }
    }

    /// Variant with `flags` applied. Shape-changing parts are re-initialised
    /// from `seed`; w/o PCL also discards any pre-trained pair layer.
    pub fn with_ablation(&self, flags: AblationFlags, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.ablation = flags;
        config.validate()?;
        let mut out = self.clone();
        if flags.no_sbert && self.encoder.config().kind != EncoderKind::Toy {
            out.encoder = Encoder::new(EncoderConfig {
                kind: EncoderKind::Toy,
                ..self.encoder.config().clone()
            })?;
        }
        if flags.no_pcl {
            out.pcl = PclParams::new(
                out.encoder.dim(),
                config.d_t,
                &mut seed::rng(seed::derive(seed, "model-init")),
            );
        }
        if config.feature_dim() != self.config.feature_dim()
            || flags.no_sa != self.config.ablation.no_sa
        {
            out.agg = Self::fresh_agg(&config, &mut seed::rng(seed::derive(seed, "agg-init")));
        }
        out.config = config;
        Ok(out)
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.pcl.tensors();
        v.extend(self.agg.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.pcl.tensors_mut();
        v.extend(self.agg.tensors_mut());
        v
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            pcl: self.pcl.zeros_like(),
            agg: self.agg.zeros_like(),
        }
    }

    /// Runs the forward pass and keeps every intermediate.
    pub fn forward(&self, article: &Article) -> Result<ArticlePass> {
        let sentences: Vec<_> = article.sentences().cloned().collect();
        let embeddings = self
            .encoder
            .encode_texts(&sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>())?;
        self.forward_embedded(article, embeddings)
    }

    /// Forward pass from precomputed sentence embeddings (document order).
    pub fn forward_embedded(&self, article: &Article, embeddings: Vec<Vec<f64>>) -> Result<ArticlePass> {
        let refs: Vec<_> = article.sentences().map(|s| s.sent_ref()).collect();
        if embeddings.len() != refs.len() {
            return Err(Error::DimensionMismatch {
                expected: refs.len(),
                actual: embeddings.len(),
            });
        }
        let transformed: Vec<Vec<f64>> = embeddings.iter().map(|s| self.pcl.transform(s)).collect();
        let pairs = enumerate_pair_indices(article, self.config.effective_scope());
        let mut scores = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            let (features, prob) = if self.config.ablation.no_pcl {
                let mut c = transformed[i].clone();
                c.extend_from_slice(&transformed[j]);
                (c, 0.5)
            } else {
                let c = features_from_transformed(&transformed[i], &transformed[j]);
                let p = contradiction_prob(&c, &self.pcl)?;
                (c, p)
            };
            scores.push(PairScore {
                pair: (refs[i], refs[j]),
                features,
                prob,
            });
        }

        let selected = if scores.is_empty() {
            Vec::new()
        } else if self.config.ablation.no_top_pair {
            topk_indices(&scores, scores.len())?
        } else {
            topk_indices(&scores, self.config.k)?
        };

        let pooled = if selected.is_empty() {
            Pooled::Empty(vec![0.0; self.agg.ffn.input_dim()])
        } else if self.config.ablation.no_sa {
            let f = self.config.feature_dim();
            let mut x = vec![0.0; self.config.k * f];
            for (slot, &s) in selected.iter().enumerate() {
                x[slot * f..(slot + 1) * f].copy_from_slice(&scores[s].features);
            }
            Pooled::Concat(x)
        } else {
            let feats: Vec<&[f64]> = selected.iter().map(|&s| scores[s].features.as_slice()).collect();
            Pooled::Attention(attend_features(&feats, &self.agg)?)
        };

        let (hidden_pre, logit) = self.agg.ffn.forward(pooled.input());
        if !logit.is_finite() {
            return Err(Error::NonFinite("classifier logit"));
        }
        Ok(ArticlePass {
            embeddings,
            transformed,
            pairs,
            scores,
            selected,
            hidden_pre,
            logit,
            prob: sigmoid(logit),
            pooled,
        })
    }

    pub fn predict(&self, article: &Article) -> Result<Prediction> {
        let pass = self.forward(article)?;
        let mut explanation = pass.scores;
        explanation.sort_by(rank_order);
        Ok(Prediction {
            prob: pass.prob,
            label: u8::from(pass.prob >= self.config.threshold),
            explanation,
        })
    }

    pub fn predict_prob(&self, article: &Article) -> Result<f64> {
        Ok(self.forward(article)?.prob)
    }

    /// Binary cross-entropy of one article.
    pub fn article_loss(&self, article: &Article) -> Result<f64> {
        Ok(bce(self.forward(article)?.logit, article.label))
    }

    /// Accumulates `scale · ∇ loss` into `grads`; returns `(loss, prob)`.
    /// Sentence-embedding gradients are written to `embedding_grads` when
    /// given (one row per sentence, document order).
    pub fn backward(
        &self,
        pass: &ArticlePass,
        label: u8,
        scale: f64,
        grads: &mut ModelGrads,
        embedding_grads: Option<&mut Vec<Vec<f64>>>,
    ) -> (f64, f64) {
        let loss = bce(pass.logit, label);
        let g = scale * (pass.prob - f64::from(label));
        let dx = self
            .agg
            .ffn
            .backward(pass.classifier_input(), &pass.hidden_pre, g, &mut grads.agg.ffn);

        let d = self.config.d_t;
        let mut dt = vec![vec![0.0; d]; pass.transformed.len()];
        let mut touched = false;
        let dcs: Vec<Vec<f64>> = match &pass.pooled {
            Pooled::Empty(_) => Vec::new(),
            Pooled::Concat(_) => {
                let f = self.config.feature_dim();
                (0..pass.selected.len())
                    .map(|slot| dx[slot * f..(slot + 1) * f].to_vec())
                    .collect()
            }
            Pooled::Attention(trace) => {
                let feats: Vec<&[f64]> = pass
                    .selected
                    .iter()
                    .map(|&s| pass.scores[s].features.as_slice())
                    .collect();
                attend_backward(&feats, trace, &dx, &self.agg, &mut grads.agg)
            }
        };
        for (&s, dc) in pass.selected.iter().zip(&dcs) {
            let (i, j) = pass.pairs[s];
            touched = true;
            if self.config.ablation.no_pcl {
                for k in 0..d {
                    dt[i][k] += dc[k];
                    dt[j][k] += dc[d + k];
                }
            } else {
                let (lo, hi) = dt.split_at_mut(j);
                features_backward(
                    &pass.transformed[i],
                    &pass.transformed[j],
                    dc,
                    &mut lo[i],
                    &mut hi[0],
                );
            }
        }
        if touched {
            for (dtn, s) in dt.iter().zip(&pass.embeddings) {
                grads.pcl.w_t.add_outer(1.0, dtn, s);
            }
        }
        if let Some(out) = embedding_grads {
            *out = dt.iter().map(|dtn| self.pcl.w_t.matvec_t(dtn)).collect();
        }
        (loss, pass.prob)
    }

    /// Loss and gradient of one article in a single call.
    pub fn loss_and_grad(&self, article: &Article) -> Result<(f64, ModelGrads)> {
        let pass = self.forward(article)?;
        let mut grads = self.zero_grads();
        let (loss, _) = self.backward(&pass, article.label, 1.0, &mut grads, None);
        Ok((loss, grads))
    }
}

/// `-[y log σ(z) + (1-y) log(1-σ(z))]`, computed from the logit.
pub fn bce(logit: f64, label: u8) -> f64 {
    // log(1 + e^{-|z|}) + max(z, 0) - y z
    let z = logit;
    (1.0 + (-z.abs()).exp()).ln() + z.max(0.0) - f64::from(label) * z
}
