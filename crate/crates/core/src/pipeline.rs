//! Stage wiring shared by the CLI, the FFI layer and the acceptance suite.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::AblationFlags;
use crate::corpus::{Article, NliExample, SentRef};
use crate::encoder::Encoder;
use crate::error::Result;
use crate::evalm::ModelFactory;
use crate::model::{Model, ModelConfig};
use crate::pcl::{pretrain_with, PclParams, PretrainOptions, PretrainReport};
use crate::seed;
use crate::trainer::{finetune, Hyperparams, TrainReport};

/// Everything needed to build and train one detector.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub encoder: Encoder,
    pub model: ModelConfig,
    pub pretrain: Hyperparams,
    pub finetune: Hyperparams,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub pretrain: Option<PretrainReport>,
    pub finetune: TrainReport,
}

impl PipelineSpec {
    /// Fresh model whose pair layer is taken from `pretrained` when given
    /// (and the variant keeps a pair layer at all).
    pub fn build(&self, seed: u64, pretrained: Option<&PclParams>) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), self.encoder.clone(), seed)?;
        if let Some(p) = pretrained {
            if !self.model.ablation.no_pcl {
                model.pcl = p.clone();
            }
        }
        Ok(model)
    }

    pub fn pretrain_pcl(&self, nli: &[NliExample], seed: u64) -> Result<(PclParams, PretrainReport)> {
        let init = PclParams::new(
            self.encoder.dim(),
            self.model.d_t,
            &mut seed::rng(seed::derive(seed, "pcl-init")),
        );
        let hp = Hyperparams {
            seed: seed::derive(seed, "pretrain"),
            ..self.pretrain.clone()
        };
        pretrain_with(nli, &self.encoder, init, &hp, PretrainOptions::default())
    }

    /// Builds a model and fine-tunes it on `train`.
    pub fn fit(&self, train: &[Article], pretrained: Option<&PclParams>, seed: u64) -> Result<(Model, TrainReport)> {
        let model = self.build(seed, pretrained)?;
        let hp = Hyperparams {
            seed: seed::derive(seed, "finetune"),
            ..self.finetune.clone()
        };
        finetune(train, model, &hp)
    }

    /// Pre-training (unless disabled by the variant) followed by
    /// fine-tuning.
    pub fn run(&self, nli: Option<&[NliExample]>, train: &[Article], seed: u64) -> Result<(Model, PipelineReport)> {
        let mut report = PipelineReport::default();
        let pretrained = match nli {
            Some(nli) if !self.model.ablation.no_pcl => {
                let (p, r) = self.pretrain_pcl(nli, seed)?;
                report.pretrain = Some(r);
                Some(p)
            }
            _ => None,
        };
        let (model, ft) = self.fit(train, pretrained.as_ref(), seed)?;
        report.finetune = ft;
        Ok((model, report))
    }

    pub fn with_ablation(&self, flags: AblationFlags) -> Self {
        let mut out = self.clone();
        out.model.ablation = flags;
        out
    }

    pub fn with_k(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.model.k = k;
        out
    }
}

/// Probabilities for many articles, in input order.
pub fn predict_probs(model: &Model, articles: &[Article]) -> Result<Vec<f64>> {
    articles.par_iter().map(|a| model.predict_prob(a)).collect()
}

/// [`ModelFactory`] that fine-tunes a detector per run, starting from a
/// shared pre-trained pair layer.
pub struct PcnnFactory {
    pub spec: PipelineSpec,
    pub pretrained: Option<PclParams>,
}

impl ModelFactory for PcnnFactory {
    fn name(&self) -> String {
        format!("pcnn ({})", self.spec.model.ablation.label())
    }

    fn fit_predict(&self, train: &[Article], test: &[Article], seed: u64) -> Result<Vec<f64>> {
        let (model, _) = self.spec.fit(train, self.pretrained.as_ref(), seed)?;
        predict_probs(&model, test)
    }
}

/// Where the planted pair ended up in a model's explanation list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationHit {
    pub page_id: u64,
    pub rev_id: u64,
    /// 1-based rank of the planted pair; `None` if it was never scored.
    pub rank: Option<usize>,
}

pub fn planted_rank(model: &Model, article: &Article, planted: (SentRef, SentRef)) -> Result<ExplanationHit> {
    let pred = model.predict(article)?;
    let rank = pred
        .explanation
        .iter()
        .position(|p| p.pair == planted)
        .map(|r| r + 1);
    Ok(ExplanationHit {
        page_id: article.page_id,
        rev_id: article.rev_id,
        rank,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainedSentence {
    pub para: usize,
    pub idx: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub rank: usize,
    pub prob: f64,
    pub sent_i: ExplainedSentence,
    pub sent_j: ExplainedSentence,
}

/// A prediction with its supporting pairs, as written by `explain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleExplanation {
    pub page_id: u64,
    pub rev_id: u64,
    pub title: String,
    pub prob: f64,
    pub label: u8,
    pub pairs: Vec<RankedPair>,
}

/// Predicts `article` and keeps the `top` highest-ranked pairs (all when
/// `top` is `None`).
pub fn explain(model: &Model, article: &Article, top: Option<usize>) -> Result<ArticleExplanation> {
    let pred = model.predict(article)?;
    let sentences: Vec<_> = article.sentences().collect();
    let text = |r: SentRef| ExplainedSentence {
        para: r.para,
        idx: r.idx,
        text: sentences[r.idx].text.clone(),
    };
    let n = top.unwrap_or(pred.explanation.len());
    let pairs = pred
        .explanation
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, p)| RankedPair {
            rank: i + 1,
            prob: p.prob,
            sent_i: text(p.pair.0),
            sent_j: text(p.pair.1),
        })
        .collect();
    Ok(ArticleExplanation {
        page_id: article.page_id,
        rev_id: article.rev_id,
        title: article.title.clone(),
        prob: pred.prob,
        label: pred.label,
        pairs,
    })
}
