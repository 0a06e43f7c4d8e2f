//! Per-subcommand settings: defaults, then the config file section, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use dehaze_core::ceda::Regression;
use dehaze_core::encoder::EncoderConfig;
use dehaze_core::network::ModelConfig;
use dehaze_core::training::loss::LossConfig;
use dehaze_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Parsed config file; each subcommand reads the section named after it
/// with dashes replaced by underscores.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<ConfigFile> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        ConfigFile::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ConfigFile> {
        match serde_json::from_str(text)? {
            Value::Object(root) => Ok(ConfigFile { root }),
            _ => Err(Error::Config("config file must hold a JSON object".into())),
        }
    }

    pub fn section(&self, name: &str) -> Option<&Value> {
        self.root.get(name)
    }

    /// Top-level key outside any section.
    pub fn global<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.root.get(key) {
            Some(v) if !v.is_object() => Ok(Some(serde_json::from_value(v.clone()).map_err(|e| {
                Error::Config(format!("config key {key}: {e}"))
            })?)),
            _ => Ok(None),
        }
    }
}

fn overlay(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (_, Value::Null) => {}
        (b, t) => *b = t.clone(),
    }
}

/// Resolves `T` from its defaults, the config `section` and the flags that
/// were actually given.
pub fn resolve<T, F>(config: &ConfigFile, section: &str, flags: &F) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut v = serde_json::to_value(T::default())?;
    if let Some(s) = config.section(section) {
        if !s.is_object() {
            return Err(Error::Config(format!("config section {section} must be an object")));
        }
        overlay(&mut v, s);
    }
    overlay(&mut v, &serde_json::to_value(flags)?);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("section {section}: {e}")))
}

pub fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing {what} (flag or config key)")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    /// Directory of clear images to crop from; procedural scenes when absent.
    pub clear_dir: Option<PathBuf>,
    pub n: usize,
    /// Index of the first generated sample.
    pub start: u64,
    pub crop: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub airlight_min: f64,
    pub airlight_max: f64,
    pub flip: bool,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            clear_dir: None,
            n: 400,
            start: 0,
            crop: 64,
            beta_min: 0.6,
            beta_max: 1.8,
            airlight_min: 0.7,
            airlight_max: 1.0,
            flip: true,
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct SynthFlags {
    /// Directory of clear images; procedural scenes when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clear_dir: Option<PathBuf>,
    /// Number of triplets.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Index of the first sample.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<u64>,
    /// Square crop size in pixels.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_max: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub airlight_min: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub airlight_max: Option<f64>,
    /// Random horizontal flips.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub data: Option<PathBuf>,
    pub steps: usize,
    pub per_class: usize,
    pub lr: f64,
    pub encoder: EncoderConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let p = dehaze_core::encoder::PretrainConfig::default();
        PretrainSettings {
            data: None,
            steps: p.steps,
            per_class: p.per_class,
            lr: p.lr,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct PretrainFlags {
    /// Triplet directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    pub data: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub stage: u8,
    /// Prompts to continue from; stage 2 normally starts from stage 1.
    pub init: Option<PathBuf>,
    pub prompt_len: usize,
    pub steps: usize,
    pub per_class: usize,
    pub lr: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub regression: Regression,
}

impl Default for PromptSettings {
    fn default() -> Self {
        let p = dehaze_core::ceda::PromptTrainConfig::default();
        PromptSettings {
            data: None,
            encoder: None,
            stage: 1,
            init: None,
            prompt_len: ModelConfig::default().prompt_len,
            steps: p.steps,
            per_class: p.per_class,
            lr: p.lr,
            alpha1: p.alpha1,
            alpha2: p.alpha2,
            regression: p.regression,
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct PromptFlags {
    /// Triplet directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Encoder checkpoint from pretrain-encoder.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<PathBuf>,
    /// 1: hazy/clear classification; 2: adds density regression.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<u8>,
    /// Prompts to continue from.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    /// Precomputed embeddings; selects the imported backend.
    pub embeddings: Option<PathBuf>,
    pub steps: u64,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycles: u64,
    pub eval_every: u64,
    pub target_psnr: Option<f64>,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = dehaze_core::training::trainer::TrainConfig::default();
        TrainSettings {
            data: None,
            val: None,
            encoder: None,
            prompts: None,
            embeddings: None,
            steps: t.steps,
            batch: t.batch,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            cycles: t.cycles,
            eval_every: t.eval_every,
            target_psnr: t.target_psnr,
            model: ModelConfig::default(),
            loss: t.loss,
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct TrainFlags {
    /// Training triplet directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Validation triplet directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    /// Frozen encoder checkpoint; also feeds the perceptual term.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<PathBuf>,
    /// Learned prompt checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    /// Precomputed embedding file; replaces encoder and prompts.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_max: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_min: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cycles: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
    /// Stop once validation PSNR reaches this value.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_psnr: Option<f64>,
}

/// Settings shared by the commands that run a trained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub model: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Image file, image directory or triplet directory.
    pub input: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct ModelFlags {
    /// Model checkpoint from train.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Embedding file for models trained on imported embeddings.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Image file, image directory or triplet directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySettings {
    pub model: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub input: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct DensityFlags {
    /// Tiny-backend model checkpoint; alternatively give encoder and prompts.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    /// Image file, image directory or triplet directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            n_train: 400,
            n_val: 50,
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct PipelineFlags {
    /// Training triplets to synthesize.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    /// Validation triplets to synthesize.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_val: Option<usize>,
}
