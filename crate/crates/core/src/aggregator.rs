//! Top-K pair selection, self-attention pooling and the article classifier.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Article;
use crate::error::{Error, Result};
use crate::linalg::{dot, sigmoid, softmax, Matrix};
use crate::model::Model;
use crate::pcl::PairScore;

/// Default number of pooled pairs.
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One-hidden-layer ReLU network with a scalar output logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    /// `h × in`
    pub w1: Matrix,
    /// `h × 1`
    pub b1: Matrix,
    /// `1 × h`
    pub w2: Matrix,
    /// `1 × 1`
    pub b2: Matrix,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::glorot(hidden, input, rng),
            b1: Matrix::zeros(hidden, 1),
            w2: Matrix::glorot(1, hidden, rng),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, input),
            b1: Matrix::zeros(hidden, 1),
            w2: Matrix::zeros(1, hidden),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    /// Returns `(pre_activation, logit)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut pre = self.w1.matvec(x);
        for (p, b) in pre.iter_mut().zip(self.b1.data()) {
            *p += b;
        }
        let logit = pre
            .iter()
            .zip(self.w2.data())
            .map(|(p, w)| p.max(0.0) * w)
            .sum::<f64>()
            + self.b2.data()[0];
        (pre, logit)
    }

    /// Accumulates parameter gradients for `d loss / d logit = g` and returns
    /// `d loss / d x`.
    pub fn backward(&self, x: &[f64], pre: &[f64], g: f64, grad: &mut Ffn) -> Vec<f64> {
        let hidden: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
        grad.w2.add_outer(g, &[1.0], &hidden);
        grad.b2.data_mut()[0] += g;
        let dpre: Vec<f64> = pre
            .iter()
            .zip(self.w2.data())
            .map(|(p, w)| if *p > 0.0 { g * w } else { 0.0 })
            .collect();
        grad.w1.add_outer(1.0, &dpre, x);
        for (b, d) in grad.b1.data_mut().iter_mut().zip(&dpre) {
            *b += d;
        }
        self.w1.matvec_t(&dpre)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggParams {
    /// Query transform, `d_a × F`.
    pub w_q: Matrix,
    /// Key transform, `d_a × F`.
    pub w_k: Matrix,
    /// Value transform, `d_a × F`.
    pub w_s: Matrix,
    pub ffn: Ffn,
}

impl AggParams {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, d_a: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_q: Matrix::glorot(d_a, feature_dim, rng),
            w_k: Matrix::glorot(d_a, feature_dim, rng),
            w_s: Matrix::glorot(d_a, feature_dim, rng),
            ffn: Ffn::new(d_a, hidden, rng),
        }
    }

    /// Parameters for the concatenation variant: the classifier reads `k`
    /// pair-feature slots directly.
    pub fn new_concat<R: Rng + ?Sized>(feature_dim: usize, d_a: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        Self {
            w_q: Matrix::zeros(d_a, feature_dim),
            w_k: Matrix::zeros(d_a, feature_dim),
            w_s: Matrix::zeros(d_a, feature_dim),
            ffn: Ffn::new(k * feature_dim, hidden, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: Matrix::zeros(self.w_q.rows(), self.w_q.cols()),
            w_k: Matrix::zeros(self.w_k.rows(), self.w_k.cols()),
            w_s: Matrix::zeros(self.w_s.rows(), self.w_s.cols()),
            ffn: Ffn::zeros(self.ffn.input_dim(), self.ffn.hidden_dim()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_s.cols()
    }

    pub fn d_a(&self) -> usize {
        self.w_s.rows()
    }

    pub const TENSOR_NAMES: [&'static str; 7] = [
        "agg.w_q", "agg.w_k", "agg.w_s", "agg.ffn.w1", "agg.ffn.b1", "agg.ffn.w2", "agg.ffn.b2",
    ];

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.w_q,
            &self.w_k,
            &self.w_s,
            &self.ffn.w1,
            &self.ffn.b1,
            &self.ffn.w2,
            &self.ffn.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_s,
            &mut self.ffn.w1,
            &mut self.ffn.b1,
            &mut self.ffn.w2,
            &mut self.ffn.b2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub prob: f64,
    pub label: u8,
    /// Every scored pair, most contradictory first.
    pub explanation: Vec<PairScore>,
}

/// Descending probability, then ascending pair identifier.
pub fn rank_order(a: &PairScore, b: &PairScore) -> Ordering {
    b.prob.total_cmp(&a.prob).then_with(|| a.pair.cmp(&b.pair))
}

/// Indices of the `k` best pairs under [`rank_order`], best first.
pub fn topk_indices(scores: &[PairScore], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(&scores[a], &scores[b]));
        idx.truncate(k);
    }
    idx.sort_by(|&a, &b| rank_order(&scores[a], &scores[b]));
    Ok(idx)
}

/// The `K` highest-probability pairs; fewer when the article has fewer pairs.
pub fn select_topk(scores: &[PairScore], k: usize) -> Result<Vec<PairScore>> {
    Ok(topk_indices(scores, k)?
        .into_iter()
        .map(|i| scores[i].clone())
        .collect())
}

/// Intermediate values of one attention pass.
#[derive(Debug, Clone)]
pub struct AttendTrace {
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub output: Vec<f64>,
}

/// `α = softmax_k(⟨W_q c_k, W_k c_k⟩)`, `a = Σ α_k W_s c_k / K_eff`.
pub fn attend_features(features: &[&[f64]], params: &AggParams) -> Result<AttendTrace> {
    if features.is_empty() {
        return Err(Error::EmptyTopK("attend"));
    }
    let f = params.feature_dim();
    if let Some(c) = features.iter().find(|c| c.len() != f) {
        return Err(Error::DimensionMismatch {
            expected: f,
            actual: c.len(),
        });
    }
    let queries: Vec<Vec<f64>> = features.iter().map(|c| params.w_q.matvec(c)).collect();
    let keys: Vec<Vec<f64>> = features.iter().map(|c| params.w_k.matvec(c)).collect();
    let values: Vec<Vec<f64>> = features.iter().map(|c| params.w_s.matvec(c)).collect();
    let energies: Vec<f64> = queries.iter().zip(&keys).map(|(q, k)| dot(q, k)).collect();
    if !energies.iter().all(|e| e.is_finite()) {
        return Err(Error::NonFinite("attention energies"));
    }
    let alpha = softmax(&energies);
    let k_eff = features.len() as f64;
    let mut output = vec![0.0; params.d_a()];
    for (a, v) in alpha.iter().zip(&values) {
        for (o, x) in output.iter_mut().zip(v) {
            *o += a * x / k_eff;
        }
    }
    Ok(AttendTrace {
        queries,
        keys,
        values,
        alpha,
        output,
    })
}

/// Accumulates attention-parameter gradients for `d loss / d a` and returns
/// `d loss / d c_k` for every pooled pair.
pub fn attend_backward(
    features: &[&[f64]],
    trace: &AttendTrace,
    da: &[f64],
    params: &AggParams,
    grad: &mut AggParams,
) -> Vec<Vec<f64>> {
    let k_eff = features.len() as f64;
    let dalpha: Vec<f64> = trace.values.iter().map(|v| dot(v, da) / k_eff).collect();
    let mean: f64 = trace.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
    let mut dcs = Vec::with_capacity(features.len());
    for (k, c) in features.iter().enumerate() {
        let alpha = trace.alpha[k];
        let de = alpha * (dalpha[k] - mean);
        let dv: Vec<f64> = da.iter().map(|d| alpha * d / k_eff).collect();
        grad.w_s.add_outer(1.0, &dv, c);
        grad.w_q.add_outer(de, &trace.keys[k], c);
        grad.w_k.add_outer(de, &trace.queries[k], c);
        let mut dc = params.w_s.matvec_t(&dv);
        if de != 0.0 {
            for (o, (x, y)) in dc.iter_mut().zip(
                params
                    .w_q
                    .matvec_t(&trace.keys[k])
                    .into_iter()
                    .zip(params.w_k.matvec_t(&trace.queries[k])),
            ) {
                *o += de * (x + y);
            }
        }
        dcs.push(dc);
    }
    dcs
}

pub fn attend(topk: &[PairScore], params: &AggParams) -> Result<Vec<f64>> {
    let feats: Vec<&[f64]> = topk.iter().map(|p| p.features.as_slice()).collect();
    Ok(attend_features(&feats, params)?.output)
}

/// `prob = sigmoid(ffn(a))`; label 1 iff `prob >= threshold`.
pub fn classify(a: &[f64], params: &AggParams, threshold: f64) -> Result<Prediction> {
    if a.len() != params.ffn.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.ffn.input_dim(),
            actual: a.len(),
        });
    }
    let (_, logit) = params.ffn.forward(a);
    if !logit.is_finite() {
        return Err(Error::NonFinite("classifier logit"));
    }
    let prob = sigmoid(logit);
    Ok(Prediction {
        prob,
        label: u8::from(prob >= threshold),
        explanation: Vec::new(),
    })
}

/// Full inference: encode, pair, score, select, pool, classify.
pub fn predict(article: &Article, model: &Model) -> Result<Prediction> {
    model.predict(article)
}

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Concatenate the K selected pair features instead of attending.
    pub no_sa: bool,
    /// Plain `(t_i ‖ t_j)` features, no pre-training, uniform selection.
    pub no_pcl: bool,
    /// Force the toy fallback encoder.
    pub no_sbert: bool,
    /// Pool every pair instead of the top K.
    pub no_top_pair: bool,
    /// Enumerate pairs across the whole article.
    pub no_paragraph: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.no_sa && self.no_top_pair {
            return Err(Error::AblationConflict(
                "w/o TopPair needs a fixed number of slots for w/o SA",
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.no_sa, "w/o SA"),
            (self.no_pcl, "w/o PCL"),
            (self.no_sbert, "w/o SBERT"),
            (self.no_top_pair, "w/o TopPair"),
            (self.no_paragraph, "w/o Paragraph"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(" + ")
        }
    }

    /// Machine name such as `full` or `no_sa+no_paragraph`.
    pub fn key(&self) -> String {
        let on: Vec<&str> = self
            .switches()
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, k)| *k)
            .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    /// Inverse of [`AblationFlags::key`].
    pub fn from_key(key: &str) -> Result<Self> {
        let mut flags = AblationFlags::default();
        if key.trim() == "full" {
            return Ok(flags);
        }
        for part in key.split('+').map(str::trim) {
            let slot = match part {
                "no_sa" => &mut flags.no_sa,
                "no_pcl" => &mut flags.no_pcl,
                "no_sbert" => &mut flags.no_sbert,
                "no_top_pair" => &mut flags.no_top_pair,
                "no_paragraph" => &mut flags.no_paragraph,
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            };
            *slot = true;
        }
        flags.validate()?;
        Ok(flags)
    }

    fn switches(&self) -> [(bool, &'static str); 5] {
        [
            (self.no_sa, "no_sa"),
            (self.no_pcl, "no_pcl"),
            (self.no_sbert, "no_sbert"),
            (self.no_top_pair, "no_top_pair"),
            (self.no_paragraph, "no_paragraph"),
        ]
    }

    /// The five single-component variants plus the full model.
    pub fn standard_set() -> Vec<AblationFlags> {
        let none = AblationFlags::default();
        vec![
            none,
            AblationFlags { no_sa: true, ..none },
            AblationFlags { no_pcl: true, ..none },
            AblationFlags { no_sbert: true, ..none },
            AblationFlags { no_top_pair: true, ..none },
            AblationFlags { no_paragraph: true, ..none },
        ]
    }
}

/// Rebuilds `model` as the variant selected by `flags`; parameters whose
/// shape changes are re-initialised from `seed`.
pub fn apply_ablation(flags: AblationFlags, model: &Model, seed: u64) -> Result<Model> {
    model.with_ablation(flags, seed)
}
