//! Evaluation: threshold metrics, ranking metrics and the multi-set
//! train/test protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_imbalanced, split_train_test, Article, SplitSpec};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision_at: BTreeMap<usize, f64>,
    pub recall_at: BTreeMap<usize, f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Precision, recall, F1 and accuracy with label 1 as the positive class.
/// Empty denominators yield 0.
pub fn confusion_metrics(preds: &[u8], labels: &[u8]) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyTopK("confusion_metrics"));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    Ok(MetricsReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        accuracy: ratio(tp + tn, preds.len()),
        n_pos: tp + fneg,
        n_neg: fp + tn,
        ..MetricsReport::default()
    })
}

/// Precision@k and Recall@k after sorting by probability, descending, ties
/// kept in input order.
pub fn ranking_metrics(
    probs: &[f64],
    labels: &[u8],
    ks: &[usize],
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>)> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(probs.len(), labels.len()));
    }
    let n = probs.len();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::KOutOfRange { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let total_pos = labels.iter().filter(|&&y| y == 1).count();
    let mut hits_prefix = Vec::with_capacity(n + 1);
    hits_prefix.push(0usize);
    for &i in &order {
        let last = *hits_prefix.last().expect("non-empty");
        hits_prefix.push(last + usize::from(labels[i] == 1));
    }
    let mut p_at = BTreeMap::new();
    let mut r_at = BTreeMap::new();
    for &k in ks {
        let hits = hits_prefix[k] as f64;
        p_at.insert(k, hits / k as f64);
        r_at.insert(k, if total_pos == 0 { 0.0 } else { hits / total_pos as f64 });
    }
    Ok((p_at, r_at))
}

/// Full report for a set of predictions.
pub fn evaluate_probs(probs: &[f64], labels: &[u8], threshold: f64, ks: &[usize]) -> Result<MetricsReport> {
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= threshold)).collect();
    let mut report = confusion_metrics(&preds, labels)?;
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k >= 1 && k <= probs.len()).collect();
    let (p_at, r_at) = ranking_metrics(probs, labels, &ks)?;
    report.precision_at = p_at;
    report.recall_at = r_at;
    Ok(report)
}

/// Something that can be trained on one partition and score another.
pub trait ModelFactory: Sync {
    fn name(&self) -> String;
    /// Contradiction probabilities for `test`, in order.
    fn fit_predict(&self, train: &[Article], test: &[Article], seed: u64) -> Result<Vec<f64>>;
}

/// Uniform random scores; the sanity floor.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomBaseline;

impl ModelFactory for RandomBaseline {
    fn name(&self) -> String {
        "random".into()
    }

    fn fit_predict(&self, _train: &[Article], test: &[Article], seed: u64) -> Result<Vec<f64>> {
        let mut rng = seed::rng(seed);
        Ok(test.iter().map(|_| rng.gen::<f64>()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Balanced,
    Imbalanced,
    /// One fixed train/test split scored once.
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub trs: Vec<f64>,
    /// Only used by the imbalanced protocol.
    pub pos_ratios: Vec<f64>,
    pub n_sets: usize,
    pub ks: Vec<usize>,
    pub threshold: f64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self::balanced()
    }
}

impl ProtocolSpec {
    pub fn balanced() -> Self {
        Self {
            kind: ProtocolKind::Balanced,
            trs: SplitSpec::PROTOCOL_RATIOS.to_vec(),
            pos_ratios: vec![0.5],
            n_sets: 10,
            ks: vec![10, 20, 30],
            threshold: 0.5,
        }
    }

    pub fn imbalanced() -> Self {
        Self {
            kind: ProtocolKind::Imbalanced,
            trs: vec![0.8],
            pos_ratios: vec![0.1, 0.3, 0.5],
            ..Self::balanced()
        }
    }

    fn cells(&self) -> Vec<(f64, f64)> {
        let ratios = match self.kind {
            ProtocolKind::Balanced | ProtocolKind::Holdout => vec![0.5],
            ProtocolKind::Imbalanced => self.pos_ratios.clone(),
        };
        ratios
            .iter()
            .flat_map(|&r| self.trs.iter().map(move |&tr| (tr, r)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and sample standard deviation (0 for one value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// One aggregated table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub protocol: ProtocolKind,
    pub tr: f64,
    pub pos_ratio: f64,
    pub n_sets: usize,
    pub metrics: BTreeMap<String, MeanStd>,
    pub per_set: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub model: String,
    pub master_seed: u64,
    pub rows: Vec<RowReport>,
}

pub const THRESHOLD_METRICS: [&str; 4] = ["precision", "recall", "f1", "accuracy"];

impl ProtocolReport {
    /// Table with one line per row: mean and std of every aggregated metric.
    pub fn to_csv(&self) -> String {
        let mut names: Vec<String> = Vec::new();
        for row in &self.rows {
            for k in row.metrics.keys() {
                if !names.contains(k) {
                    names.push(k.clone());
                }
            }
        }
        let mut out = String::from("protocol,tr,pos_ratio,n_sets");
        for n in &names {
            let _ = write!(out, ",{n}_mean,{n}_std");
        }
        out.push('\n');
        for row in &self.rows {
            let kind = match row.protocol {
                ProtocolKind::Balanced => "balanced",
                ProtocolKind::Imbalanced => "imbalanced",
                ProtocolKind::Holdout => "holdout",
            };
            let _ = write!(out, "{kind},{},{},{}", row.tr, row.pos_ratio, row.n_sets);
            for n in &names {
                match row.metrics.get(n) {
                    Some(m) => {
                        let _ = write!(out, ",{:.6},{:.6}", m.mean, m.std);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean and standard deviation of every metric across sets.
pub fn aggregate(reports: &[MetricsReport]) -> BTreeMap<String, MeanStd> {
    let mut m = BTreeMap::new();
    let pick = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    m.insert("precision".into(), MeanStd::of(&pick(|r| r.precision)));
    m.insert("recall".into(), MeanStd::of(&pick(|r| r.recall)));
    m.insert("f1".into(), MeanStd::of(&pick(|r| r.f1)));
    m.insert("accuracy".into(), MeanStd::of(&pick(|r| r.accuracy)));
    if let Some(first) = reports.first() {
        for &k in first.precision_at.keys() {
            let p: Option<Vec<f64>> = reports.iter().map(|r| r.precision_at.get(&k).copied()).collect();
            let r: Option<Vec<f64>> = reports.iter().map(|r| r.recall_at.get(&k).copied()).collect();
            if let (Some(p), Some(r)) = (p, r) {
                m.insert(format!("precision@{k}"), MeanStd::of(&p));
                m.insert(format!("recall@{k}"), MeanStd::of(&r));
            }
        }
    }
    m
}

/// For every (TR, positive ratio) cell and every set: resample, split by
/// page, train, evaluate. Sets are drawn once per ratio and shared across
/// TRs. Runs execute on the current rayon pool; results are reduced in a
/// fixed order.
pub fn run_protocol(
    corpus: &[Article],
    factory: &dyn ModelFactory,
    spec: &ProtocolSpec,
    master_seed: u64,
) -> Result<ProtocolReport> {
    if spec.n_sets == 0 {
        return Err(Error::Config("n_sets must be positive".into()));
    }
    if spec.kind == ProtocolKind::Holdout {
        return Err(Error::Config("the holdout protocol has no resampling schedule".into()));
    }
    let cells = spec.cells();
    let jobs: Vec<(usize, f64, f64, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, &(tr, r))| (0..spec.n_sets).map(move |s| (c, tr, r, s)))
        .collect();
    let results: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(_, tr, ratio, set)| {
            let sample_seed = seed::derive(master_seed, &format!("sample/{ratio}/{set}"));
            let split_seed = seed::derive(master_seed, &format!("split/{tr}/{ratio}/{set}"));
            let model_seed = seed::derive(master_seed, &format!("model/{tr}/{ratio}/{set}"));
            let sample = sample_imbalanced(corpus, ratio, sample_seed)?;
            let split = split_train_test(&sample, &SplitSpec::new(tr, split_seed));
            if split.has_empty_partition() {
                return Err(Error::InfeasibleSample(format!(
                    "TR {tr} leaves an empty partition ({} train / {} test articles)",
                    split.train.len(),
                    split.test.len()
                )));
            }
            let probs = factory.fit_predict(&split.train, &split.test, model_seed)?;
            let labels: Vec<u8> = split.test.iter().map(|a| a.label).collect();
            let mut report = evaluate_probs(&probs, &labels, spec.threshold, &spec.ks)?;
            report.seed = model_seed;
            Ok(report)
        })
        .collect();
    let mut per_cell: Vec<Vec<MetricsReport>> = vec![Vec::new(); cells.len()];
    for (job, r) in jobs.iter().zip(results) {
        per_cell[job.0].push(r?);
    }
    let rows = cells
        .iter()
        .zip(per_cell)
        .map(|(&(tr, pos_ratio), per_set)| RowReport {
            protocol: spec.kind,
            tr,
            pos_ratio,
            n_sets: spec.n_sets,
            metrics: aggregate(&per_set),
            per_set,
        })
        .collect();
    Ok(ProtocolReport {
        model: factory.name(),
        master_seed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_confusion() {
        let m = confusion_metrics(&[1, 1, 0, 1], &[1, 0, 0, 1]).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 0.8).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.75);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = confusion_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        let m = confusion_metrics(&[0, 0, 0], &[1, 0, 1]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(matches!(
            confusion_metrics(&[0], &[0, 1]),
            Err(Error::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn ranking_cases() {
        let (p, r) = ranking_metrics(&[0.9, 0.8, 0.1], &[1, 0, 1], &[2]).unwrap();
        assert_eq!(p[&2], 0.5);
        assert_eq!(r[&2], 0.5);
        let (p, r) = ranking_metrics(&[0.2, 0.7, 0.1], &[1, 1, 1], &[3]).unwrap();
        assert_eq!((p[&3], r[&3]), (1.0, 1.0));
        let (p, r) = ranking_metrics(&[0.2, 0.7], &[0, 0], &[1]).unwrap();
        assert_eq!((p[&1], r[&1]), (0.0, 0.0));
        assert!(matches!(
            ranking_metrics(&[0.2], &[0], &[2]),
            Err(Error::KOutOfRange { k: 2, n: 1 })
        ));
    }

    #[test]
    fn ranking_ties_follow_input_order() {
        let (p, _) = ranking_metrics(&[0.5, 0.5, 0.5], &[0, 1, 1], &[1]).unwrap();
        assert_eq!(p[&1], 0.0);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
