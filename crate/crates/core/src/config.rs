//! Experiment configuration: a TOML tree with paper defaults, generic
//! `key.path=value` overrides and master-seed fan-out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::AblationFlags;
use crate::corpus::SplitSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalm::ProtocolSpec;
use crate::model::ModelConfig;
use crate::seed;
use crate::synthgen::SynthSpec;
use crate::trainer::Hyperparams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub corpus: Option<PathBuf>,
    pub planted: Option<PathBuf>,
    pub nli: Option<PathBuf>,
    pub snli: Option<PathBuf>,
    pub mnli: Option<PathBuf>,
    /// Trained detector read by `evaluate` and `explain`.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint whose pair layer seeds fine-tuning.
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub n_articles: usize,
    pub n_nli: usize,
    pub pos_fraction: f64,
    pub cross_paragraph: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_articles: 200,
            n_nli: 1000,
            pos_fraction: 0.5,
            cross_paragraph: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Score a saved checkpoint on the held-out split.
    #[default]
    Checkpoint,
    /// Run the repeated resample/train/test protocol.
    Protocol,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    #[default]
    Pcnn,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSection {
    pub mode: EvalMode,
    pub model: EvalModel,
    pub csv: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            mode: EvalMode::Checkpoint,
            model: EvalModel::Pcnn,
            csv: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainSection {
    /// Article file to explain instead of the corpus.
    pub input: Option<PathBuf>,
    /// Pairs listed per article; 0 lists all of them.
    pub top: usize,
    /// `page_id` or `page_id:rev_id` selectors; empty explains everything.
    pub articles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSection {
    /// Variant keys such as `full`, `no_sa` or `no_pcl+no_paragraph`.
    pub variants: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: AblationFlags::standard_set().iter().map(|f| f.key()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Upper bound on concurrently running training jobs.
    pub jobs: usize,
    pub train_ratio: f64,
    pub data: DataPaths,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub pretrain: Hyperparams,
    pub finetune: Hyperparams,
    pub protocol: ProtocolSpec,
    pub synth: SynthSection,
    pub sweep_ks: Vec<usize>,
    pub evaluate: EvaluateSection,
    pub explain: ExplainSection,
    pub ablate: AblateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            jobs: 1,
            train_ratio: 0.8,
            data: DataPaths::default(),
            encoder: EncoderConfig::default(),
            model: ModelConfig::default(),
            pretrain: Hyperparams::default(),
            finetune: Hyperparams::default(),
            protocol: ProtocolSpec::balanced(),
            synth: SynthSection::default(),
            sweep_ks: vec![1, 5, 10, 20, 30, 40, 50],
            evaluate: EvaluateSection::default(),
            explain: ExplainSection {
                top: 10,
                ..ExplainSection::default()
            },
            ablate: AblateSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `a.b.c=value` overrides. Values are parsed as TOML scalars or
    /// arrays, falling back to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut tree, key.trim(), value)?;
        }
        let out: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!("train_ratio {} outside (0, 1)", self.train_ratio)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        if self.sweep_ks.contains(&0) {
            return Err(Error::InvalidK);
        }
        for v in &self.ablate.variants {
            AblationFlags::from_key(v)?;
        }
        self.synth_spec().validate()
    }

    pub fn ablation_variants(&self) -> Result<Vec<AblationFlags>> {
        self.ablate.variants.iter().map(|v| AblationFlags::from_key(v)).collect()
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage)
    }

    /// Copies derived per-stage seeds into the stage sections so the written
    /// config records what was actually used.
    pub fn resolve_seeds(&mut self) {
        self.pretrain.seed = self.stage_seed("pretrain");
        self.finetune.seed = self.stage_seed("finetune");
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec::new(self.train_ratio, self.stage_seed("split"))
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_articles: self.synth.n_articles,
            pos_fraction: self.synth.pos_fraction,
            cross_paragraph: self.synth.cross_paragraph,
            seed: self.stage_seed("synth"),
            ..SynthSpec::default()
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = tree;
    for p in parents {
        let entry = cur
            .entry((*p).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}
