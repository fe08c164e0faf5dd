//! End-to-end fine-tuning and the checkpoint container.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Article;
use crate::encoder::{Encoder, EncoderConfig, SentenceDelegate};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelGrads};
use crate::optim::{Adam, WarmupSchedule};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 2e-5,
            warmup_fraction: 0.10,
            epochs: 10,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning_rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean batch loss at every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub final_loss: f64,
}

/// Adam on the mean article cross-entropy of each mini-batch, with linear
/// learning-rate warm-up over the first `warmup_fraction` of steps.
pub fn finetune(train: &[Article], mut model: Model, hp: &Hyperparams) -> Result<(Model, TrainReport)> {
    hp.validate()?;
    let n_pos = train.iter().filter(|a| a.label == 1).count();
    if n_pos == 0 || n_pos == train.len() {
        return Err(Error::SingleClass("fine-tuning"));
    }
    let steps_per_epoch = train.len().div_ceil(hp.batch_size);
    let schedule = WarmupSchedule::new(hp.learning_rate, hp.warmup_fraction, steps_per_epoch * hp.epochs);
    let mut adam = Adam::for_params(&model.tensors());
    let mut rng = seed::rng(hp.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let trainable_encoder = model.encoder.is_trainable();

    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let m = &model;
            let per_article: Vec<Result<(f64, ModelGrads, Vec<Vec<f64>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let pass = m.forward(&train[i])?;
                    let mut g = m.zero_grads();
                    let mut eg = Vec::new();
                    let (loss, _) = m.backward(
                        &pass,
                        train[i].label,
                        scale,
                        &mut g,
                        trainable_encoder.then_some(&mut eg),
                    );
                    Ok((loss, g, eg))
                })
                .collect();
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            let mut texts: Vec<&str> = Vec::new();
            let mut emb_grads: Vec<Vec<f64>> = Vec::new();
            for (&i, r) in batch.iter().zip(per_article) {
                let (loss, g, eg) = r?;
                batch_loss += loss;
                grads.add(&g);
                if trainable_encoder {
                    texts.extend(train[i].sentences().map(|s| s.text.as_str()));
                    emb_grads.extend(eg);
                }
            }
            report.steps += 1;
            let lr = schedule.lr_at(report.steps);
            if let Some(d) = model.encoder.delegate() {
                d.backward(&texts, &emb_grads, lr)?;
            }
            adam.step(model.tensors_mut(), &grads.tensors(), lr, &[]);
            if !model.tensors().iter().all(|t| t.is_finite()) {
                return Err(Error::NonFinite("model parameters"));
            }
            report.lr_trace.push(lr);
            report.step_losses.push(batch_loss * scale);
            epoch_loss += batch_loss;
        }
        report.epoch_losses.push(epoch_loss / train.len() as f64);
    }
    report.final_loss = *report.epoch_losses.last().unwrap_or(&f64::NAN);
    Ok((model, report))
}

/// Fraction of articles whose predicted label equals the gold label.
pub fn accuracy(model: &Model, articles: &[Article]) -> Result<f64> {
    let preds: Vec<Result<u8>> = articles
        .par_iter()
        .map(|a| Ok(model.predict(a)?.label))
        .collect();
    let mut correct = 0;
    for (p, a) in preds.into_iter().zip(articles) {
        if p? == a.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / articles.len().max(1) as f64)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub hyperparams: Option<Hyperparams>,
    pub metadata: TrainingMeta,
    pub tensors: Vec<TensorHeader>,
    pub payload_bytes: usize,
    /// Hex SHA-256 of the payload.
    pub checksum: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialises a model: magic, little-endian `u32` header length, JSON header,
/// then every tensor as little-endian `f64` in header order.
pub fn encode_checkpoint(model: &Model, hp: Option<&Hyperparams>, meta: &TrainingMeta) -> Result<Vec<u8>> {
    let tensors = model.tensors();
    let mut payload = Vec::with_capacity(tensors.iter().map(|t| t.data().len() * 8).sum());
    for t in &tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        encoder: model.encoder.config().clone(),
        model: model.config.clone(),
        hyperparams: hp.cloned(),
        metadata: meta.clone(),
        tensors: Model::TENSOR_NAMES
            .iter()
            .zip(&tensors)
            .map(|(name, t)| TensorHeader {
                name: (*name).to_string(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
        payload_bytes: payload.len(),
        checksum: hex(&Sha256::digest(&payload)),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(
    model: &Model,
    path: impl AsRef<Path>,
    hp: Option<&Hyperparams>,
    meta: &TrainingMeta,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, hp, meta)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

/// Parses and validates the container without building a model.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let raw: serde_json::Value =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("missing format_version"))? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header: CheckpointHeader =
        serde_json::from_value(raw).map_err(|e| corrupt(&format!("header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() != header.payload_bytes {
        return Err(corrupt(&format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex(&Sha256::digest(payload)) != header.checksum {
        return Err(corrupt("checksum mismatch"));
    }
    Ok((header, payload))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointHeader)> {
    decode_checkpoint_inner(bytes, None)
}

/// Loads a checkpoint whose encoder is a transformer adapter.
pub fn decode_checkpoint_with_delegate(
    bytes: &[u8],
    delegate: std::sync::Arc<dyn SentenceDelegate>,
) -> Result<(Model, CheckpointHeader)> {
    decode_checkpoint_inner(bytes, Some(delegate))
}

fn decode_checkpoint_inner(
    bytes: &[u8],
    delegate: Option<std::sync::Arc<dyn SentenceDelegate>>,
) -> Result<(Model, CheckpointHeader)> {
    let (header, payload) = decode_header(bytes)?;
    let encoder = match delegate {
        Some(d) => Encoder::with_delegate(header.encoder.clone(), d)?,
        None => Encoder::new(header.encoder.clone())?,
    };
    let mut model = Model::new(header.model.clone(), encoder, 0)?;
    let expected: usize = model.tensors().iter().map(|t| t.data().len() * 8).sum();
    if expected != payload.len() || header.tensors.len() != Model::TENSOR_NAMES.len() {
        return Err(Error::CorruptCheckpoint("tensor layout does not match model config".into()));
    }
    let mut offset = 0;
    for (t, th) in model.tensors_mut().into_iter().zip(&header.tensors) {
        if [t.rows(), t.cols()] != th.shape {
            return Err(Error::CorruptCheckpoint(format!("shape mismatch for {}", th.name)));
        }
        for v in t.data_mut() {
            *v = f64::from_le_bytes(payload[offset..offset + 8].try_into().expect("8 bytes"));
            offset += 8;
        }
    }
    Ok((model, header))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?.0)
}
