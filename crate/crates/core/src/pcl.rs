//! Pairwise contradiction learning.
//!
//! Each sentence embedding is mapped by a shared `W_t`, the pair feature is
//! `c = (t_i ‖ t_j ‖ |t_i − t_j|)` and the contradiction probability is the
//! class-1 component of `softmax(W_r c)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Article, NliExample, SentRef, Sentence};
use crate::encoder::{Encoder, SentenceEmbedding};
use crate::error::{Error, Result};
use crate::linalg::{softmax, Matrix};
use crate::optim::{Adam, WarmupSchedule};
use crate::seed;
use crate::trainer::Hyperparams;

/// Index of the contradiction class in the two-way softmax.
pub const CONTRADICTION: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PclParams {
    /// `d_t × d_s`, shared by both sentences.
    pub w_t: Matrix,
    /// `2 × 3·d_t`.
    pub w_r: Matrix,
}

impl PclParams {
    pub fn new<R: Rng + ?Sized>(d_s: usize, d_t: usize, rng: &mut R) -> Self {
        Self {
            w_t: Matrix::glorot(d_t, d_s, rng),
            w_r: Matrix::glorot(2, 3 * d_t, rng),
        }
    }

    pub fn zeros(d_s: usize, d_t: usize) -> Self {
        Self {
            w_t: Matrix::zeros(d_t, d_s),
            w_r: Matrix::zeros(2, 3 * d_t),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_s(), self.d_t())
    }

    pub fn d_s(&self) -> usize {
        self.w_t.cols()
    }

    pub fn d_t(&self) -> usize {
        self.w_t.rows()
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.d_t()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w_t, &self.w_r]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_t, &mut self.w_r]
    }

    pub const TENSOR_NAMES: [&'static str; 2] = ["pcl.w_t", "pcl.w_r"];

    pub fn transform(&self, s: &[f64]) -> Vec<f64> {
        self.w_t.matvec(s)
    }
}

/// A scored sentence pair; `pair.0` precedes `pair.1` in document order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub pair: (SentRef, SentRef),
    pub features: Vec<f64>,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairScope {
    #[default]
    Paragraph,
    Article,
}

/// `(t_i ‖ t_j ‖ |t_i − t_j|)`
pub fn features_from_transformed(t_i: &[f64], t_j: &[f64]) -> Vec<f64> {
    let mut c = Vec::with_capacity(3 * t_i.len());
    c.extend_from_slice(t_i);
    c.extend_from_slice(t_j);
    c.extend(t_i.iter().zip(t_j).map(|(a, b)| (a - b).abs()));
    c
}

/// Back-propagates `d loss / d c` onto both transformed sentences.
pub fn features_backward(t_i: &[f64], t_j: &[f64], dc: &[f64], dt_i: &mut [f64], dt_j: &mut [f64]) {
    let d = t_i.len();
    for k in 0..d {
        let diff = t_i[k] - t_j[k];
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        let dabs = dc[2 * d + k] * sign;
        dt_i[k] += dc[k] + dabs;
        dt_j[k] += dc[d + k] - dabs;
    }
}

pub fn pair_features(s_i: &SentenceEmbedding, s_j: &SentenceEmbedding, params: &PclParams) -> Result<Vec<f64>> {
    for s in [s_i, s_j] {
        if s.vector.len() != params.d_s() {
            return Err(Error::DimensionMismatch {
                expected: params.d_s(),
                actual: s.vector.len(),
            });
        }
    }
    Ok(features_from_transformed(
        &params.transform(&s_i.vector),
        &params.transform(&s_j.vector),
    ))
}

/// Both softmax components of `W_r c`.
pub fn class_probs(c: &[f64], params: &PclParams) -> Result<[f64; 2]> {
    if c.len() != params.w_r.cols() {
        return Err(Error::DimensionMismatch {
            expected: params.w_r.cols(),
            actual: c.len(),
        });
    }
    let z = params.w_r.matvec(c);
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("PCL logits"));
    }
    let p = softmax(&z);
    Ok([p[0], p[1]])
}

pub fn contradiction_prob(c: &[f64], params: &PclParams) -> Result<f64> {
    Ok(class_probs(c, params)?[CONTRADICTION])
}

/// Candidate pairs in lexicographic `((para_i, sent_i), (para_j, sent_j))`
/// order. Paragraph scope pairs sentences within a paragraph only.
pub fn enumerate_pairs(article: &Article, scope: PairScope) -> Vec<(&Sentence, &Sentence)> {
    match scope {
        PairScope::Paragraph => article
            .paragraphs
            .iter()
            .flat_map(|p| {
                p.iter()
                    .enumerate()
                    .flat_map(move |(i, a)| p[i + 1..].iter().map(move |b| (a, b)))
            })
            .collect(),
        PairScope::Article => {
            let flat: Vec<&Sentence> = article.sentences().collect();
            let mut out = Vec::with_capacity(flat.len() * flat.len().saturating_sub(1) / 2);
            for (i, a) in flat.iter().enumerate() {
                for b in &flat[i + 1..] {
                    out.push((*a, *b));
                }
            }
            out
        }
    }
}

/// Index form of [`enumerate_pairs`]: flat sentence indices.
pub fn enumerate_pair_indices(article: &Article, scope: PairScope) -> Vec<(usize, usize)> {
    enumerate_pairs(article, scope)
        .into_iter()
        .map(|(a, b)| (a.sent_id, b.sent_id))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PretrainOptions {
    /// Keep `W_r` fixed at its initial value.
    pub freeze_classifier: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    /// Mean cross-entropy per epoch, measured on the fly.
    pub epoch_losses: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub steps: usize,
}

/// Two-class cross-entropy of one pair and its gradient, accumulated into
/// `grad` with weight `scale`. Returns the loss.
pub(crate) fn pair_loss_grad(
    params: &PclParams,
    s_i: &[f64],
    s_j: &[f64],
    label: u8,
    scale: f64,
    grad: &mut PclParams,
    ds: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let t_i = params.transform(s_i);
    let t_j = params.transform(s_j);
    let c = features_from_transformed(&t_i, &t_j);
    let p = softmax(&params.w_r.matvec(&c));
    let y = usize::from(label);
    let loss = -p[y].max(f64::MIN_POSITIVE).ln();
    let mut dz = p.clone();
    dz[y] -= 1.0;
    grad.w_r.add_outer(scale, &dz, &c);
    let dc = params.w_r.matvec_t(&dz);
    let d = t_i.len();
    let mut dt_i = vec![0.0; d];
    let mut dt_j = vec![0.0; d];
    features_backward(&t_i, &t_j, &dc, &mut dt_i, &mut dt_j);
    grad.w_t.add_outer(scale, &dt_i, s_i);
    grad.w_t.add_outer(scale, &dt_j, s_j);
    if let Some((ds_i, ds_j)) = ds {
        for (o, v) in ds_i.iter_mut().zip(params.w_t.matvec_t(&dt_i)) {
            *o += scale * v;
        }
        for (o, v) in ds_j.iter_mut().zip(params.w_t.matvec_t(&dt_j)) {
            *o += scale * v;
        }
    }
    loss
}

/// Cross-entropy of one labelled pair of embeddings and its gradient with
/// respect to both weight matrices.
pub fn pair_loss_and_grad(params: &PclParams, s_i: &[f64], s_j: &[f64], label: u8) -> (f64, PclParams) {
    let mut grad = params.zeros_like();
    let loss = pair_loss_grad(params, s_i, s_j, label, 1.0, &mut grad, None);
    (loss, grad)
}

/// Mean cross-entropy of `params` over examples given pre-computed
/// embeddings.
pub fn nli_loss(params: &PclParams, pairs: &[(Vec<f64>, Vec<f64>, u8)]) -> f64 {
    let mut scratch = params.zeros_like();
    pairs
        .iter()
        .map(|(a, b, y)| pair_loss_grad(params, a, b, *y, 0.0, &mut scratch, None))
        .sum::<f64>()
        / pairs.len() as f64
}

pub fn pretrain(
    examples: &[NliExample],
    encoder: &Encoder,
    params_init: PclParams,
    hp: &Hyperparams,
) -> Result<PclParams> {
    pretrain_with(examples, encoder, params_init, hp, PretrainOptions::default()).map(|(p, _)| p)
}

/// Binary NLI pre-training with Adam, mini-batches shuffled by `hp.seed`.
pub fn pretrain_with(
    examples: &[NliExample],
    encoder: &Encoder,
    params_init: PclParams,
    hp: &Hyperparams,
    opts: PretrainOptions,
) -> Result<(PclParams, PretrainReport)> {
    let n_pos = examples.iter().filter(|e| e.label == 1).count();
    if n_pos == 0 || n_pos == examples.len() {
        return Err(Error::SingleClass("NLI pre-training"));
    }
    hp.validate()?;
    if encoder.dim() != params_init.d_s() {
        return Err(Error::DimensionMismatch {
            expected: params_init.d_s(),
            actual: encoder.dim(),
        });
    }

    let trainable_encoder = encoder.is_trainable();
    let cached: Vec<(Vec<f64>, Vec<f64>)> = if trainable_encoder {
        Vec::new()
    } else {
        let premises: Vec<&str> = examples.iter().map(|e| e.premise.as_str()).collect();
        let hyps: Vec<&str> = examples.iter().map(|e| e.hypothesis.as_str()).collect();
        encoder
            .encode_texts(&premises)?
            .into_iter()
            .zip(encoder.encode_texts(&hyps)?)
            .collect()
    };

    let mut params = params_init;
    let steps_per_epoch = examples.len().div_ceil(hp.batch_size);
    let schedule = WarmupSchedule::new(hp.learning_rate, hp.warmup_fraction, steps_per_epoch * hp.epochs);
    let mut adam = Adam::for_params(&params.tensors());
    let frozen = [false, opts.freeze_classifier];
    let mut rng = seed::rng(hp.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = PretrainReport::default();

    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad = params.zeros_like();
            if trainable_encoder {
                let texts: Vec<&str> = batch
                    .iter()
                    .flat_map(|&i| [examples[i].premise.as_str(), examples[i].hypothesis.as_str()])
                    .collect();
                let embs = encoder.encode_texts(&texts)?;
                let mut ds = vec![vec![0.0; encoder.dim()]; embs.len()];
                for (b, &i) in batch.iter().enumerate() {
                    let (left, right) = ds.split_at_mut(2 * b + 1);
                    epoch_loss += pair_loss_grad(
                        &params,
                        &embs[2 * b],
                        &embs[2 * b + 1],
                        examples[i].label,
                        scale,
                        &mut grad,
                        Some((&mut left[2 * b], &mut right[0])),
                    );
                }
                report.steps += 1;
                let lr = schedule.lr_at(report.steps);
                if let Some(d) = encoder.delegate() {
                    d.backward(&texts, &ds, lr)?;
                }
                adam.step(params.tensors_mut(), &grad.tensors(), lr, &frozen);
                report.lr_trace.push(lr);
            } else {
                for &i in batch {
                    let (a, b) = &cached[i];
                    epoch_loss += pair_loss_grad(&params, a, b, examples[i].label, scale, &mut grad, None);
                }
                report.steps += 1;
                let lr = schedule.lr_at(report.steps);
                adam.step(params.tensors_mut(), &grad.tensors(), lr, &frozen);
                report.lr_trace.push(lr);
            }
            if !params.w_t.is_finite() || !params.w_r.is_finite() {
                return Err(Error::NonFinite("PCL parameters"));
            }
        }
        report.epoch_losses.push(epoch_loss / examples.len() as f64);
    }
    Ok((params, report))
}

/// Fraction of examples whose contradiction probability lands on the right
/// side of 0.5.
pub fn nli_accuracy(params: &PclParams, encoder: &Encoder, examples: &[NliExample]) -> Result<f64> {
    let premises: Vec<&str> = examples.iter().map(|e| e.premise.as_str()).collect();
    let hyps: Vec<&str> = examples.iter().map(|e| e.hypothesis.as_str()).collect();
    let a = encoder.encode_texts(&premises)?;
    let b = encoder.encode_texts(&hyps)?;
    let mut correct = 0;
    for ((x, y), ex) in a.iter().zip(&b).zip(examples) {
        let c = features_from_transformed(&params.transform(x), &params.transform(y));
        let p = contradiction_prob(&c, params)?;
        if u8::from(p >= 0.5) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}
