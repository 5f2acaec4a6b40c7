//! Checkpoint files and the two ways of seeding a target model from one:
//! full restore (encoder and classifier) and encoder-only restore with a
//! fresh classifier.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic "XOFFCKPT" | u32 version | u64 header length | header (UTF-8 key=value lines)
//! u64 tensor count | per tensor: u32 name length, name, u8 dtype (0 = f64),
//!                    u32 ndim, u64 dims..., f64 payload
//! ```

use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, MlmHead};
use crate::model::Model;
use crate::tensor::Tensor;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"XOFFCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMetadata {
    /// Task the classifier head was trained on (empty for MLM-only checkpoints).
    pub task: String,
    pub labels: Vec<String>,
    pub seed: u64,
    pub steps: u64,
    /// Content hash of the vocabulary the model was trained with.
    pub vocab_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: EncoderConfig,
    pub metadata: CheckpointMetadata,
    pub tensors: Vec<(String, Tensor)>,
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".to_string()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: CheckpointMetadata) -> Self {
        Self {
            version: VERSION,
            config: model.config.clone(),
            metadata,
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    fn header(&self) -> String {
        let c = &self.config;
        let m = &self.metadata;
        let mut lines = vec![
            format!("config.num_layers={}", c.num_layers),
            format!("config.hidden_size={}", c.hidden_size),
            format!("config.num_heads={}", c.num_heads),
            format!("config.ff_size={}", c.ff_size),
            format!("config.max_len={}", c.max_len),
            format!("config.vocab_size={}", c.vocab_size),
            format!("config.dropout_rate={}", c.dropout_rate),
            format!("meta.task={}", escape(&m.task)),
            format!("meta.seed={}", m.seed),
            format!("meta.steps={}", m.steps),
            format!("meta.vocab_hash={}", escape(&m.vocab_hash)),
            format!("meta.num_labels={}", m.labels.len()),
        ];
        for (i, l) in m.labels.iter().enumerate() {
            lines.push(format!("meta.label.{i}={}", escape(l)));
        }
        lines.join("\n")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("bad magic bytes: not a checkpoint of a recognized version".to_string()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let hlen = r.len()?;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::Format("header is not UTF-8".to_string()))?;
        let mut fields = HashMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("header line without '=': {line:?}")))?;
            fields.insert(k.to_string(), unescape(v));
        }
        let get = |k: &str| -> Result<&String> {
            fields
                .get(k)
                .ok_or_else(|| Error::Format(format!("header is missing {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("header field {k} has invalid value {v:?}")))
        }
        let n = |k: &str| -> Result<usize> { num(k, get(k)?) };
        let config = EncoderConfig {
            num_layers: n("config.num_layers")?,
            hidden_size: n("config.hidden_size")?,
            num_heads: n("config.num_heads")?,
            ff_size: n("config.ff_size")?,
            max_len: n("config.max_len")?,
            vocab_size: n("config.vocab_size")?,
            dropout_rate: num("config.dropout_rate", get("config.dropout_rate")?)?,
        };
        let num_labels = n("meta.num_labels")?;
        let labels = (0..num_labels)
            .map(|i| get(&format!("meta.label.{i}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let metadata = CheckpointMetadata {
            task: get("meta.task")?.clone(),
            labels,
            seed: num("meta.seed", get("meta.seed")?)?,
            steps: num("meta.steps", get("meta.steps")?)?,
            vocab_hash: get("meta.vocab_hash")?.clone(),
        };

        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".to_string()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!("tensor {name} has unknown dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Format(format!("tensor {name} has implausible shape {shape:?}")))?;
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self {
            version,
            config,
            metadata,
            tensors,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Every tensor is known and shaped as the embedded config requires.
    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let by_name = self.tensor_map();
        if by_name.len() != self.tensors.len() {
            return Err(Error::Format("duplicate tensor names".to_string()));
        }
        let mut expected: BTreeMap<String, Vec<usize>> =
            crate::encoder::expected_shapes(&self.config).into_iter().collect();
        let h = self.config.hidden_size;
        if let Some(w) = by_name.get("classifier.weight") {
            let c = w.shape().first().copied().unwrap_or(0);
            expected.insert("classifier.weight".into(), vec![c, h]);
            expected.insert("classifier.bias".into(), vec![c]);
            if !self.metadata.labels.is_empty() && self.metadata.labels.len() != c {
                return Err(Error::Format(format!(
                    "metadata lists {} labels but classifier has {c} rows",
                    self.metadata.labels.len()
                )));
            }
        }
        if by_name.contains_key("mlm.weight") {
            let v = self.config.vocab_size;
            expected.insert("mlm.weight".into(), vec![v, h]);
            expected.insert("mlm.bias".into(), vec![v]);
        }
        for (name, t) in &self.tensors {
            let shape = expected
                .get(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, config requires {shape:?}",
                    t.shape()
                )));
            }
        }
        for name in expected.keys() {
            if !by_name.contains_key(name.as_str()) {
                return Err(Error::Format(format!("missing tensor {name}")));
            }
        }
        Ok(())
    }

    fn tensor_map(&self) -> HashMap<&str, &Tensor> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    fn tensor(&self, name: &str) -> Option<Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone())
    }

    pub fn classifier_classes(&self) -> Option<usize> {
        self.tensors
            .iter()
            .find(|(n, _)| n == "classifier.weight")
            .map(|(_, t)| t.shape()[0])
    }

    pub fn has_mlm_head(&self) -> bool {
        self.tensors.iter().any(|(n, _)| n == "mlm.weight")
    }

    fn encoder_weights(&self, config: &EncoderConfig) -> Result<EncoderWeights> {
        EncoderWeights::from_named(config, |name| {
            debug_assert!(name.starts_with("encoder."));
            self.tensor(name)
        })
    }

    /// The saved model with every head it carries.
    pub fn to_model(&self) -> Result<Model> {
        let encoder = self.encoder_weights(&self.config)?;
        let classifier = match (self.tensor("classifier.weight"), self.tensor("classifier.bias")) {
            (Some(w), Some(b)) => Some(ClassifierHead::from_parts(w, b)?),
            _ => None,
        };
        let mlm = match (self.tensor("mlm.weight"), self.tensor("mlm.bias")) {
            (Some(weight), Some(bias)) => Some(MlmHead { weight, bias }),
            _ => None,
        };
        Ok(Model {
            config: self.config.clone(),
            encoder,
            classifier,
            mlm,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes to a temporary file beside `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    /// Refuses checkpoints trained under a different vocabulary.
    pub fn check_vocabulary(&self, vocab_hash: &str) -> Result<()> {
        if self.metadata.vocab_hash != vocab_hash {
            return Err(Error::Transfer(format!(
                "checkpoint was trained with vocabulary {} but the current vocabulary is {vocab_hash}; transfer needs a shared vocabulary",
                short(&self.metadata.vocab_hash)
            )));
        }
        Ok(())
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(16)]
}

pub fn save_checkpoint(model: &Model, path: &Path, metadata: CheckpointMetadata) -> Result<()> {
    Checkpoint::from_model(model, metadata).save(path)
}

/// Restores encoder and classifier exactly; the class counts must agree.
pub fn load_full(checkpoint: &Checkpoint, target_num_classes: usize) -> Result<Model> {
    let classes = checkpoint.classifier_classes().ok_or_else(|| {
        Error::Transfer("checkpoint has no classifier head; use load_encoder_only (transfer-encoder-only)".to_string())
    })?;
    if classes != target_num_classes {
        return Err(Error::Transfer(format!(
            "class count mismatch: checkpoint head has {classes} classes but the target task has {target_num_classes}; use load_encoder_only (transfer-encoder-only) to re-initialize the head"
        )));
    }
    let mut model = checkpoint.to_model()?;
    model.mlm = None;
    Ok(model)
}

/// Restores only the encoder; the classifier is freshly initialized from
/// `seed`. `config` may differ from the checkpoint's only in dropout rate.
pub fn load_encoder_only(
    checkpoint: &Checkpoint,
    config: &EncoderConfig,
    target_num_classes: usize,
    seed: u64,
) -> Result<Model> {
    let report = compatibility_check(checkpoint, config);
    let blocking: Vec<String> = report
        .mismatches
        .iter()
        .filter(|m| m.field != "dropout_rate")
        .map(|m| format!("{} (checkpoint {}, requested {})", m.field, m.checkpoint, m.requested))
        .collect();
    if !blocking.is_empty() {
        return Err(Error::Transfer(format!(
            "encoder config mismatch: {}",
            blocking.join(", ")
        )));
    }
    let encoder = checkpoint.encoder_weights(config)?;
    Ok(Model {
        config: config.clone(),
        encoder,
        classifier: Some(ClassifierHead::init(target_num_classes, config.hidden_size, seed)?),
        mlm: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMismatch {
    pub field: &'static str,
    pub checkpoint: String,
    pub requested: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatibilityReport {
    pub matching: Vec<&'static str>,
    pub mismatches: Vec<FieldMismatch>,
}

impl CompatibilityReport {
    pub fn is_compatible(&self) -> bool {
        self.mismatches.is_empty()
    }
}

pub fn compatibility_check(checkpoint: &Checkpoint, config: &EncoderConfig) -> CompatibilityReport {
    let diffs = checkpoint.config.differences(config);
    let all = checkpoint.config.differences(&EncoderConfig {
        num_layers: usize::MAX,
        hidden_size: usize::MAX,
        num_heads: usize::MAX,
        ff_size: usize::MAX,
        max_len: usize::MAX,
        vocab_size: usize::MAX,
        dropout_rate: f64::NAN,
    });
    let matching = all
        .iter()
        .map(|(f, _, _)| *f)
        .filter(|f| !diffs.iter().any(|(d, _, _)| d == f))
        .collect();
    CompatibilityReport {
        matching,
        mismatches: diffs
            .into_iter()
            .map(|(field, checkpoint, requested)| FieldMismatch {
                field,
                checkpoint,
                requested,
            })
            .collect(),
    }
}
