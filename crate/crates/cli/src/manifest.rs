//! Experiment manifest: one TOML file describing a run.
//!
//! Relative paths resolve against the manifest's directory.

use crate::error::CliError;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use xoffense_core::datasets::{self, ColumnMapping, LabelSchema, LabeledDataset};
use xoffense_core::encoder::EncoderConfig;
use xoffense_core::experiment::Strategy;
use xoffense_core::tokenizer::Vocabulary;
use xoffense_core::trainer::{MlmConfig, TrainConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub output_dir: PathBuf,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub data: Option<DataSection>,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub pretrain: Option<PretrainSection>,
}

fn default_model_name() -> String {
    "desk-encoder".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub path: PathBuf,
}

/// Encoder architecture; `vocab_size` defaults to the tokenizer's size.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_layers")]
    pub num_layers: usize,
    #[serde(default = "d_hidden")]
    pub hidden_size: usize,
    #[serde(default = "d_heads")]
    pub num_heads: usize,
    #[serde(default = "d_ff")]
    pub ff_size: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    pub vocab_size: Option<usize>,
    #[serde(default = "d_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn d_layers() -> usize {
    2
}
fn d_hidden() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_ff() -> usize {
    128
}
fn d_max_len() -> usize {
    64
}
fn d_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub task: String,
    /// Label names of the model's schema, in class-index order.
    pub labels: Vec<String>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMapping,
    /// Labels as they appear in the files, when they differ from `labels`.
    pub file_labels: Option<Vec<String>>,
    /// File label to schema label; required with `file_labels`.
    #[serde(default)]
    pub label_map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    #[serde(default = "d_strategy")]
    pub strategy: Strategy,
    /// Source-task checkpoint for the transfer strategies.
    pub checkpoint: Option<PathBuf>,
    /// Pretrained encoder used by `scratch` and by `pretrain` as a starting point.
    pub init_checkpoint: Option<PathBuf>,
}

fn d_strategy() -> Strategy {
    Strategy::Scratch
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Scratch,
            checkpoint: None,
            init_checkpoint: None,
        }
    }
}

/// `corpus` plus the MLM settings as sibling keys.
#[derive(Debug, Clone, Deserialize)]
#[serde(try_from = "toml::Table")]
pub struct PretrainSection {
    /// Plain-text files, one sentence per line.
    pub corpus: Vec<PathBuf>,
    pub mlm: MlmConfig,
}

impl TryFrom<toml::Table> for PretrainSection {
    type Error = String;

    // serde's flatten does not honour deny_unknown_fields, so split by hand
    fn try_from(mut table: toml::Table) -> Result<Self, String> {
        let corpus = table.remove("corpus").ok_or("missing field `corpus`")?;
        let corpus: Vec<PathBuf> = corpus.try_into().map_err(|e: toml::de::Error| format!("corpus: {}", e.message()))?;
        let mlm: MlmConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| e.message().to_string())?;
        Ok(Self { corpus, mlm })
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("manifest field {field}: {msg}"))
}

fn existing(base: &Path, p: &Path, field: &str) -> Result<PathBuf, CliError> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.is_file() {
        return Err(field_err(field, format!("file not found: {}", full.display())));
    }
    Ok(full)
}

/// A manifest with every path resolved and checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub manifest: Manifest,
    pub output_dir: PathBuf,
    pub tokenizer: PathBuf,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub corpus: Vec<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            CliError::Validation(format!("manifest: {msg}"))
        })
    }

    pub fn load(path: &Path) -> Result<Resolved, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("manifest {}: {e}", path.display())))?;
        let manifest = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.resolve(&base)
    }

    pub fn resolve(self, base: &Path) -> Result<Resolved, CliError> {
        let tokenizer = existing(base, &self.tokenizer.path, "tokenizer.path")?;
        let (mut train_path, mut test_path) = (None, None);
        if let Some(d) = &self.data {
            if d.labels.len() < 2 {
                return Err(field_err("data.labels", "at least two labels are required"));
            }
            LabelSchema::new(d.task.clone(), d.labels.clone()).map_err(|e| field_err("data.labels", e))?;
            if let Some(p) = &d.train {
                train_path = Some(existing(base, p, "data.train")?);
            }
            if let Some(p) = &d.test {
                test_path = Some(existing(base, p, "data.test")?);
            }
            if let Some(fl) = &d.file_labels {
                LabelSchema::new("file", fl.clone()).map_err(|e| field_err("data.file_labels", e))?;
                for l in fl {
                    if !d.label_map.keys().any(|k| k.eq_ignore_ascii_case(l)) {
                        return Err(field_err("data.label_map", format!("no entry for file label {l:?}")));
                    }
                }
            } else if !d.label_map.is_empty() {
                return Err(field_err("data.file_labels", "required when data.label_map is given"));
            }
        }
        let checkpoint = self
            .transfer
            .checkpoint
            .as_ref()
            .map(|p| existing(base, p, "transfer.checkpoint"))
            .transpose()?;
        if self.transfer.strategy.is_transfer() && checkpoint.is_none() {
            return Err(field_err(
                "transfer.checkpoint",
                format!("required for strategy {}", self.transfer.strategy),
            ));
        }
        let init_checkpoint = self
            .transfer
            .init_checkpoint
            .as_ref()
            .map(|p| existing(base, p, "transfer.init_checkpoint"))
            .transpose()?;
        let corpus = match &self.pretrain {
            Some(p) => {
                if p.corpus.is_empty() {
                    return Err(field_err("pretrain.corpus", "no corpus files listed"));
                }
                p.corpus
                    .iter()
                    .map(|c| existing(base, c, "pretrain.corpus"))
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => Vec::new(),
        };
        self.train.validate().map_err(|e| field_err("train", e))?;
        if let Some(p) = &self.pretrain {
            p.mlm.validate().map_err(|e| field_err("pretrain", e))?;
        }
        let output_dir = if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            base.join(&self.output_dir)
        };
        Ok(Resolved {
            output_dir,
            tokenizer,
            train_path,
            test_path,
            checkpoint,
            init_checkpoint,
            corpus,
            manifest: self,
        })
    }
}

impl Resolved {
    pub fn vocabulary(&self) -> Result<Vocabulary, CliError> {
        Vocabulary::load(&self.tokenizer).map_err(|e| field_err("tokenizer.path", e))
    }

    pub fn encoder_config(&self, vocab: &Vocabulary) -> Result<EncoderConfig, CliError> {
        let m = &self.manifest.model;
        let vocab_size = m.vocab_size.unwrap_or(vocab.len());
        if vocab_size < vocab.len() {
            return Err(field_err(
                "model.vocab_size",
                format!("{vocab_size} is smaller than the tokenizer's {} tokens", vocab.len()),
            ));
        }
        let cfg = EncoderConfig {
            num_layers: m.num_layers,
            hidden_size: m.hidden_size,
            num_heads: m.num_heads,
            ff_size: m.ff_size,
            max_len: m.max_len,
            vocab_size,
            dropout_rate: m.dropout_rate,
        };
        cfg.validate().map_err(|e| field_err("model", e))?;
        Ok(cfg)
    }

    pub fn data(&self) -> Result<&DataSection, CliError> {
        self.manifest
            .data
            .as_ref()
            .ok_or_else(|| field_err("data", "section is required for this command"))
    }

    pub fn schema(&self) -> Result<LabelSchema, CliError> {
        let d = self.data()?;
        LabelSchema::new(d.task.clone(), d.labels.clone()).map_err(|e| field_err("data.labels", e))
    }

    fn load_split(&self, path: &Option<PathBuf>, field: &str) -> Result<LabeledDataset, CliError> {
        let d = self.data()?;
        let path = path
            .as_ref()
            .ok_or_else(|| field_err(field, "is required for this command"))?;
        let schema = self.schema()?;
        match &d.file_labels {
            None => datasets::load_tsv(path, &schema, &d.columns).map_err(|e| field_err(field, e)),
            Some(fl) => {
                let file_schema = LabelSchema::new(format!("{} (file)", d.task), fl.clone())
                    .map_err(|e| field_err("data.file_labels", e))?;
                let raw = datasets::load_tsv(path, &file_schema, &d.columns).map_err(|e| field_err(field, e))?;
                datasets::map_labels(&raw, &d.label_map, &schema).map_err(|e| field_err("data.label_map", e))
            }
        }
    }

    pub fn train_set(&self) -> Result<LabeledDataset, CliError> {
        self.load_split(&self.train_path, "data.train")
    }

    pub fn test_set(&self) -> Result<LabeledDataset, CliError> {
        self.load_split(&self.test_path, "data.test")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_manifest_parses_with_defaults() {
        let m = Manifest::parse(
            r#"
output_dir = "out"
[tokenizer]
path = "vocab.txt"
[model]
max_len = 32
"#,
        )
        .unwrap();
        assert_eq!(m.model.hidden_size, 64);
        assert_eq!(m.transfer.strategy, Strategy::Scratch);
        assert_eq!(m.train, TrainConfig::default());
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = Manifest::parse(
            r#"
output_dir = "out"
[tokenizer]
path = "vocab.txt"
[model]
hiden_size = 3
"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("hiden_size"), "{err}");
    }

    #[test]
    fn pretrain_section() {
        let base = "output_dir = \"o\"\n[tokenizer]\npath = \"v\"\n[model]\n[pretrain]\ncorpus = [\"c.txt\"]\n";
        let m = Manifest::parse(&format!("{base}epochs = 2\n")).unwrap();
        let p = m.pretrain.unwrap();
        assert_eq!(p.mlm.epochs, 2);
        assert_eq!(p.mlm.mask_prob, 0.15);
        assert!(Manifest::parse(&format!("{base}epoch = 2\n")).is_err());
    }

    #[test]
    fn strategy_names() {
        let m = Manifest::parse(
            r#"
output_dir = "out"
[tokenizer]
path = "v"
[model]
[transfer]
strategy = "transfer-encoder-only"
checkpoint = "a.ckpt"
"#,
        )
        .unwrap();
        assert_eq!(m.transfer.strategy, Strategy::TransferEncoderOnly);
    }

    #[test]
    fn missing_files_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::parse(
            r#"
output_dir = "out"
[tokenizer]
path = "missing.txt"
[model]
"#,
        )
        .unwrap();
        let err = m.resolve(dir.path()).unwrap_err().to_string();
        assert!(err.contains("tokenizer.path"), "{err}");

        std::fs::write(dir.path().join("v.txt"), "x").unwrap();
        let m = Manifest::parse(
            r#"
output_dir = "out"
[tokenizer]
path = "v.txt"
[model]
[transfer]
strategy = "transfer-full"
"#,
        )
        .unwrap();
        let err = m.resolve(dir.path()).unwrap_err().to_string();
        assert!(err.contains("transfer.checkpoint"), "{err}");
    }
}
